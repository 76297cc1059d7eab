"""Objective evaluation: speaker similarity, verification rate, WER, reports.

Speaker similarity (cosine between embeddings of synthesized and reference
audio) and the strict >0.7 verification rule drive the headline metrics.
Embeddings come either from the model's own speaker encoder or from any
external command that maps a WAV path to one line of space-separated floats,
so stronger verification models can be plugged in without bundling them.
Listener scores are never computed here; they are reported as external.
"""

from __future__ import annotations

import json
import shlex
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .corpus import tokenize_words, word_edit_distance
from .errors import DataError
from .manifest import Utterance, read_manifest
from .stats import mann_whitney_u, wilcoxon_signed_rank  # noqa: F401 (re-export)

SVR_THRESHOLD = 0.7
REPORT_CSV_COLUMNS = ("utt_id", "speaker_id", "smcs", "verified", "wer")
EXTERNAL_METRIC_NOTE = "n/a (external)"


def smcs(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two speaker embeddings, in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DataError(f"embedding dims differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DataError("cannot take cosine of a zero embedding")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def svr(similarities: list[float], threshold: float = SVR_THRESHOLD) -> float:
    """Percentage of pairs verified as same-speaker: similarity strictly > 0.7."""
    if not similarities:
        raise DataError("verification rate needs at least one pair")
    verified = sum(1 for s in similarities if s > threshold)
    return 100.0 * verified / len(similarities)


def wer(ref_text: str, hyp_text: str) -> float:
    """Word error rate: edit operations over reference length."""
    ref = tokenize_words(ref_text)
    hyp = tokenize_words(hyp_text)
    if not ref:
        raise DataError("reference transcript is empty after normalization")
    return word_edit_distance(ref, hyp) / len(ref)


def internal_embedder(backbone):
    """Embedding via the model's own speaker encoder (WAV path -> vector)."""
    from .model import embed_audio

    def fn(path: Path) -> np.ndarray:
        return embed_audio(backbone, dsp.load_wav(path)).vector

    return fn


def external_embedder(command: str):
    """Embedding via an external command printing one line of floats."""

    def fn(path: Path) -> np.ndarray:
        proc = subprocess.run(
            [*shlex.split(command), str(path)],
            capture_output=True, text=True, check=False)
        if proc.returncode != 0:
            raise DataError(
                f"embedder command failed ({proc.returncode}): {proc.stderr.strip()}")
        try:
            vec = np.array([float(tok) for tok in proc.stdout.split()],
                           dtype=np.float64)
        except ValueError as exc:
            raise DataError(f"embedder output is not a float vector: {exc}") from exc
        if vec.size == 0:
            raise DataError("embedder command printed no values")
        return vec

    return fn


@dataclass
class MetricRow:
    utt_id: str
    speaker_id: str
    smcs: float
    verified: bool
    wer: float | None = None


@dataclass
class MetricReport:
    rows: list[MetricRow]
    aggregates: dict
    settings: dict = field(default_factory=dict)

    def validate(self) -> None:
        frac = self.aggregates["svr_fraction"]
        if not 0.0 <= frac <= 1.0:
            raise DataError(f"verification fraction {frac} outside [0, 1]")
        expect = float(np.mean([r.verified for r in self.rows]))
        if abs(frac - expect) > 1e-12:
            raise DataError("verification fraction disagrees with row flags")

    def to_json(self) -> str:
        self.validate()
        payload = {
            "rows": [
                {"utt_id": r.utt_id, "speaker_id": r.speaker_id,
                 "smcs": r.smcs, "verified": r.verified, "wer": r.wer}
                for r in self.rows
            ],
            "aggregates": self.aggregates,
            "settings": self.settings,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        lines = [",".join(REPORT_CSV_COLUMNS)]
        for r in self.rows:
            wer_s = "" if r.wer is None else repr(r.wer)
            lines.append(
                f"{r.utt_id},{r.speaker_id},{r.smcs!r},"
                f"{1 if r.verified else 0},{wer_s}")
        return "\n".join(lines) + "\n"


def evaluate_run(
    synth_manifest: str | Path,
    ref_manifest: str | Path,
    embedder,
    embedder_name: str = "internal",
    workers: int = 1,
) -> MetricReport:
    """Pair synthesized utterances with references by utt_id and score them.

    Every synthesized utterance must have a reference with the same utt_id.
    WER uses the `<utt>.hyp.txt` sidecar next to the synthesized audio when
    present (an ASR hypothesis of the synthesized speech against the
    reference transcript); rows without a sidecar carry no WER and are
    excluded from the WER mean.
    """
    synth_path, ref_path = Path(synth_manifest), Path(ref_manifest)
    synth = read_manifest(synth_path)
    refs = {u.utt_id: u for u in read_manifest(ref_path)}
    if not synth:
        raise DataError(f"synthesized manifest {synth_path} is empty")
    missing = sorted(u.utt_id for u in synth if u.utt_id not in refs)
    if missing:
        raise DataError(
            f"no reference utterances for: {', '.join(missing[:5])}")
    synth = sorted(synth, key=lambda u: u.utt_id)

    def row_for(u: Utterance) -> MetricRow:
        ref = refs[u.utt_id]
        s_path = u.audio_path(synth_path.parent)
        r_path = ref.audio_path(ref_path.parent)
        sim = smcs(embedder(s_path), embedder(r_path))
        hyp_file = s_path.with_name(s_path.stem + ".hyp.txt")
        row_wer = None
        if hyp_file.exists():
            row_wer = wer(ref.transcript, hyp_file.read_text("utf-8"))
        return MetricRow(
            utt_id=u.utt_id, speaker_id=u.speaker_id, smcs=sim,
            verified=sim > SVR_THRESHOLD, wer=row_wer)

    if workers == 1:
        rows = [row_for(u) for u in synth]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(row_for, synth))
    rows.sort(key=lambda r: r.utt_id)

    sims = [r.smcs for r in rows]
    wers = [r.wer for r in rows if r.wer is not None]
    aggregates = {
        "num_utterances": len(rows),
        "smcs_mean": float(np.mean(sims)),
        "svr_percent": svr(sims),
        "svr_fraction": float(np.mean([r.verified for r in rows])),
        "wer_mean": float(np.mean(wers)) if wers else None,
        "wer_rows": len(wers),
        "nmos": EXTERNAL_METRIC_NOTE,
        "smos": EXTERNAL_METRIC_NOTE,
        "utmos": EXTERNAL_METRIC_NOTE,
    }
    return MetricReport(
        rows=rows,
        aggregates=aggregates,
        settings={
            "synth_manifest": str(synth_path),
            "ref_manifest": str(ref_path),
            "embedder": embedder_name,
            "svr_threshold": SVR_THRESHOLD,
        },
    )


def write_report(report: MetricReport, out_base: str | Path) -> tuple[Path, Path]:
    """Emit `<base>.csv` and `<base>.json`; returns both paths."""
    base = Path(out_base)
    base.parent.mkdir(parents=True, exist_ok=True)
    csv_path = base.with_suffix(".csv")
    json_path = base.with_suffix(".json")
    csv_path.write_text(report.to_csv(), encoding="utf-8")
    json_path.write_text(report.to_json() + "\n", encoding="utf-8")
    return csv_path, json_path
