"""Corpus construction pipeline: resample, trim, filter, normalize, split.

Every stage is a small pure function over one utterance; `run_pipeline`
composes the requested stages over a manifest (or a directory of WAV files
with sidecar transcripts), writes the retained audio and manifests, and
emits a per-stage report whose counts always conserve (kept + dropped =
input). Reprocessing a pipeline's own output changes nothing: resampling
runs first so every acoustic decision lands on the target-rate frame grid,
trimming cuts only at frame boundaries, text normalization is a fixed point
on its own output, and resampling at the target rate is an exact copy.

External heavy models stay outside the repo: a voice-activity command can
replace the bundled energy detector, ASR hypotheses are read from
`<utt>.hyp.txt` sidecars, and speaker counts from `<utt>.spk.txt`.
"""

from __future__ import annotations

import dataclasses
import json
import shlex
import subprocess
import tempfile
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from . import dsp
from .errors import DataError
from .manifest import Utterance, read_manifest, write_manifest

STAGES = ("resample", "trim", "short", "snr", "speakers", "transcript", "normalize")
DEFAULT_TARGET_RATE = 24000
DEFAULT_TEST_UTTERANCES = 10
DEFAULT_ADAPT_SECONDS = 300.0

_ONES = ("zero one two three four five six seven eight nine ten eleven twelve "
         "thirteen fourteen fifteen sixteen seventeen eighteen nineteen").split()
_TENS = "zero ten twenty thirty forty fifty sixty seventy eighty ninety".split()
_SCALES = ((10 ** 9, "billion"), (10 ** 6, "million"), (1000, "thousand"), (100, "hundred"))


# --------------------------------------------------------------------- text

@lru_cache(maxsize=1)
def _abbreviations() -> dict[str, str]:
    text = (resources.files("usat") / "data" / "abbreviations.txt").read_text("utf-8")
    table = {}
    for line in text.splitlines():
        parts = line.split()
        if len(parts) >= 2:
            table[parts[0]] = " ".join(parts[1:])
    return table


def _number_to_words(n: int) -> list[str]:
    if n < 20:
        return [_ONES[n]]
    if n < 100:
        tens, rem = divmod(n, 10)
        return [_TENS[tens]] + (_number_to_words(rem) if rem else [])
    for scale, word in _SCALES:
        if n >= scale:
            head, rem = divmod(n, scale)
            return _number_to_words(head) + [word] + (_number_to_words(rem) if rem else [])
    raise DataError(f"cannot spell out {n}")  # pragma: no cover

def normalize_text(text: str) -> str:
    """Lowercase, strip punctuation, spell out integers, expand abbreviations.

    Running it on its own output is an identity, which keeps the pipeline
    idempotent.
    """
    out: list[str] = []
    for raw in text.split():
        token = "".join(c for c in raw if c.isalnum() or c == "'").lower()
        if not token:
            continue
        if token.isdigit():
            out.extend(_number_to_words(int(token)))
        else:
            out.append(_abbreviations().get(token, token))
    return " ".join(out)


def tokenize_words(text: str) -> list[str]:
    """Word tokens after lowercasing and punctuation stripping."""
    return normalize_text(text).split()


def word_edit_distance(ref_tokens: list[str], hyp_tokens: list[str]) -> int:
    """Levenshtein distance over word tokens (unit-cost edits)."""
    n, m = len(ref_tokens), len(hyp_tokens)
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        for j in range(1, m + 1):
            sub = prev[j - 1] + (ref_tokens[i - 1] != hyp_tokens[j - 1])
            cur[j] = min(sub, prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[m]


def filter_transcript(ref_text: str, hyp_text: str) -> tuple[bool, int]:
    """(keep, distance): keep when the word edit distance is at most one."""
    d = word_edit_distance(tokenize_words(ref_text), tokenize_words(hyp_text))
    return d <= 1, d


# -------------------------------------------------------------------- audio

def _vad_mask(w: dsp.Waveform, vad_command: str | None,
              wav_path: Path | None) -> np.ndarray:
    """Speech mask per analysis frame: external command or energy fallback.

    The command receives the WAV path as its last argument and must print
    one line of space-separated 0/1 flags, one per non-overlapping
    512-sample frame.
    """
    if vad_command is None or wav_path is None:
        return dsp.energy_vad(w)
    proc = subprocess.run(
        [*shlex.split(vad_command), str(wav_path)],
        capture_output=True, text=True, check=False)
    if proc.returncode != 0:
        raise DataError(
            f"voice-activity command failed ({proc.returncode}): {proc.stderr.strip()}")
    try:
        mask = np.array([int(tok) for tok in proc.stdout.split()], dtype=bool)
    except ValueError as exc:
        raise DataError(f"voice-activity command output not 0/1 flags: {exc}") from exc
    expected = len(w.samples) // dsp.SNR_FRAME_SIZE
    if len(mask) != expected:
        raise DataError(
            f"voice-activity command returned {len(mask)} flags for "
            f"{expected} frames")
    return mask


def trim_silence(w: dsp.Waveform, mask: np.ndarray | None = None) -> dsp.Waveform | None:
    """Cut leading/trailing non-speech at frame granularity; None when silent.

    Cuts land on 512-sample frame boundaries and a trailing partial frame is
    judged as a frame of its own, so trimming an already-trimmed waveform is
    a no-op. Interior frames are never touched.
    """
    if mask is None:
        mask = dsp.energy_vad(w)
    mask = np.asarray(mask, dtype=bool)
    size = dsp.SNR_FRAME_SIZE
    remainder = len(w.samples) % size
    if remainder:
        tail = w.samples[-remainder:].astype(np.float64)
        tail_speech = float(np.mean(tail * tail)) > 10.0 ** (dsp.VAD_THRESHOLD_DBFS / 10.0)
        mask = np.append(mask, tail_speech)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return None
    start = int(idx[0]) * size
    end = min(len(w.samples), (int(idx[-1]) + 1) * size)
    if start == 0 and end == len(w.samples):
        return w
    return dsp.Waveform(w.samples[start:end].copy(), w.sample_rate)


def filter_short(w: dsp.Waveform, min_seconds: float = 0.5) -> bool:
    """Keep waveforms at least `min_seconds` long (boundary inclusive)."""
    return 2 * len(w.samples) >= int(round(2 * min_seconds * w.sample_rate))


def filter_snr(w: dsp.Waveform, mask: np.ndarray, min_db: float = 0.0) -> tuple[bool, float]:
    """(keep, snr): keep when the noise-floor-subtracted SNR is >= min_db."""
    snr = dsp.estimate_snr(w, mask)
    return snr >= min_db, snr


# ----------------------------------------------------------------- pipeline

@dataclass
class StageCount:
    stage: str
    input: int = 0
    kept: int = 0
    dropped: int = 0
    reasons: dict[str, int] = field(default_factory=dict)

    def drop(self, reason: str) -> None:
        self.input += 1
        self.dropped += 1
        self.reasons[reason] = self.reasons.get(reason, 0) + 1

    def keep(self) -> None:
        self.input += 1
        self.kept += 1


@dataclass
class PipelineReport:
    stages: list[StageCount]
    settings: dict

    @property
    def total(self) -> int:
        """Utterances entering the first stage."""
        return self.stages[0].input if self.stages else 0

    @property
    def retained(self) -> int:
        """Utterances surviving the last stage."""
        return self.stages[-1].kept if self.stages else 0

    def validate(self) -> None:
        for s in self.stages:
            if s.kept + s.dropped != s.input:
                raise DataError(
                    f"stage {s.stage}: kept {s.kept} + dropped {s.dropped} "
                    f"!= input {s.input}")
        for prev, nxt in zip(self.stages, self.stages[1:]):
            if prev.kept != nxt.input:
                raise DataError(
                    f"stage chain broken: {prev.stage} kept {prev.kept} but "
                    f"{nxt.stage} saw {nxt.input}")

    def to_json(self) -> str:
        self.validate()
        payload = {
            "stages": [dataclasses.asdict(s) for s in self.stages],
            "settings": self.settings,
        }
        return json.dumps(payload, indent=2, sort_keys=True)


@dataclass
class _WorkResult:
    utt: Utterance
    samples: np.ndarray | None = None
    sample_rate: int = 0
    dropped_at: str | None = None
    reason: str | None = None
    warnings: list[str] = field(default_factory=list)


def _sidecar(audio_path: Path, suffix: str) -> Path:
    return audio_path.with_name(audio_path.stem + suffix)


def _process_one(
    utt: Utterance,
    base: Path,
    stages: tuple[str, ...],
    vad_command: str | None,
    target_rate: int,
    strict_sidecars: bool,
) -> _WorkResult:
    res = _WorkResult(utt=utt)
    path = utt.audio_path(base)
    if not path.exists():
        res.dropped_at, res.reason = "load", "missing-audio"
        return res
    w = dsp.load_wav(path)
    transcript = utt.transcript

    if "resample" in stages and w.sample_rate != target_rate:
        w = dsp.resample(w, target_rate)
    if "trim" in stages:
        if vad_command is None:
            mask = dsp.energy_vad(w)
        else:
            # the command must see the audio that will actually be cut
            with tempfile.TemporaryDirectory() as tmp:
                tmp_wav = Path(tmp) / "in.wav"
                dsp.save_wav(tmp_wav, w)
                mask = _vad_mask(w, vad_command, tmp_wav)
        trimmed = trim_silence(w, mask)
        if trimmed is None:
            res.dropped_at, res.reason = "trim", "silent"
            return res
        w = trimmed
    if "short" in stages and not filter_short(w):
        res.dropped_at, res.reason = "short", "under-half-second"
        return res
    if "snr" in stages:
        keep, snr = filter_snr(w, _vad_mask(w, None, None))
        if not keep:
            res.dropped_at, res.reason = "snr", "low-snr"
            return res
    if "speakers" in stages:
        spk_file = _sidecar(path, ".spk.txt")
        if not spk_file.exists():
            res.warnings.append(
                f"{utt.utt_id}: no speaker-count sidecar; stage skipped")
            if strict_sidecars:
                res.dropped_at, res.reason = "speakers", "missing-sidecar"
                return res
        else:
            try:
                count = int(spk_file.read_text("utf-8").strip())
            except ValueError as exc:
                raise DataError(
                    f"{utt.utt_id}: speaker-count sidecar is not an integer") from exc
            if count != 1:
                res.dropped_at, res.reason = "speakers", "multi-speaker"
                return res
    if "transcript" in stages:
        hyp_file = _sidecar(path, ".hyp.txt")
        if not hyp_file.exists():
            res.warnings.append(
                f"{utt.utt_id}: no hypothesis sidecar; stage skipped")
            if strict_sidecars:
                res.dropped_at, res.reason = "transcript", "missing-sidecar"
                return res
        else:
            keep, dist = filter_transcript(transcript, hyp_file.read_text("utf-8"))
            if not keep:
                res.dropped_at, res.reason = "transcript", f"edit-distance-{dist}"
                return res
    if "normalize" in stages:
        transcript = normalize_text(transcript)
        if not transcript:
            res.dropped_at, res.reason = "normalize", "empty-transcript"
            return res

    tags = sorted(set(utt.stages) | set(stages))
    res.utt = Utterance(
        utt_id=utt.utt_id,
        speaker_id=utt.speaker_id,
        audio=f"audio/{utt.utt_id}.wav",
        transcript=transcript,
        duration=w.duration_seconds,
        sample_rate=w.sample_rate,
        stages=tags,
    )
    res.samples = w.samples
    res.sample_rate = w.sample_rate
    return res


def discover_input(in_path: str | Path) -> tuple[list[Utterance], Path]:
    """(utterances, audio base) from a manifest file or a raw directory.

    A directory is scanned for `*.wav` files with `<utt>.txt` transcripts;
    utt_id is the file stem and speaker_id its prefix before the first `_`
    (the whole stem when there is none).
    """
    p = Path(in_path)
    if p.is_file():
        return read_manifest(p), p.parent
    manifest = p / "manifest.jsonl"
    if manifest.exists():
        return read_manifest(manifest), p
    utts = []
    for wav in sorted(p.rglob("*.wav")):
        txt = wav.with_suffix(".txt")
        if not txt.exists():
            warnings.warn(f"{wav.name}: no transcript sidecar; skipped")
            continue
        stem = wav.stem
        w = dsp.load_wav(wav)
        utts.append(Utterance(
            utt_id=stem,
            speaker_id=stem.split("_")[0],
            audio=str(wav.relative_to(p)),
            transcript=txt.read_text("utf-8").strip(),
            duration=w.duration_seconds,
            sample_rate=w.sample_rate,
            stages=[],
        ))
    if not utts:
        raise DataError(f"no usable input found under {p}")
    return utts, p


def split_sets(
    utts: list[Utterance],
    seed: int = 0,
    test_n: int = DEFAULT_TEST_UTTERANCES,
    adapt_seconds: float = DEFAULT_ADAPT_SECONDS,
) -> dict[str, list[Utterance]]:
    """Per-speaker test / adaptation / development partition.

    Test takes min(test_n, available) utterances; adaptation greedily
    accumulates whole utterances until it reaches `adapt_seconds`; the rest
    is development. Seeded shuffling makes the draw reproducible.
    """
    rng = np.random.default_rng(seed)
    splits: dict[str, list[Utterance]] = {"adaptation": [], "test": [], "development": []}
    by_spk: dict[str, list[Utterance]] = {}
    for u in sorted(utts, key=lambda u: u.utt_id):
        by_spk.setdefault(u.speaker_id, []).append(u)
    for speaker in sorted(by_spk):
        pool = list(by_spk[speaker])
        order = rng.permutation(len(pool))
        pool = [pool[i] for i in order]
        n_test = min(test_n, len(pool))
        if len(pool) <= test_n:
            warnings.warn(
                f"speaker {speaker}: only {len(pool)} utterances; all assigned "
                f"to test, adaptation left empty")
        splits["test"].extend(pool[:n_test])
        rest = pool[n_test:]
        acc = 0.0
        cut = 0
        for u in rest:
            if acc >= adapt_seconds:
                break
            acc += u.duration
            cut += 1
        if rest and acc < adapt_seconds:
            warnings.warn(
                f"speaker {speaker}: adaptation set reaches only {acc:.1f} s "
                f"of {adapt_seconds:.0f} s requested")
        splits["adaptation"].extend(rest[:cut])
        splits["development"].extend(rest[cut:])
    for name in splits:
        splits[name].sort(key=lambda u: u.utt_id)
    return splits


def run_pipeline(
    in_path: str | Path,
    out_dir: str | Path,
    stages: tuple[str, ...] = STAGES,
    workers: int = 1,
    seed: int = 0,
    target_rate: int = DEFAULT_TARGET_RATE,
    test_n: int = DEFAULT_TEST_UTTERANCES,
    adapt_seconds: float = DEFAULT_ADAPT_SECONDS,
    vad_command: str | None = None,
    strict_sidecars: bool = False,
    log=None,
) -> PipelineReport:
    """Run the requested stages over every utterance and emit all artifacts.

    Writes `audio/*.wav`, `manifest.jsonl`, `dropped.jsonl`, `report.json`,
    and the three split manifests to `out_dir`. Stage order is canonical
    regardless of the order given. Per-file work runs in a thread pool;
    output ordering is by utt_id, so worker count never changes the bytes.
    """
    unknown = sorted(set(stages) - set(STAGES))
    if unknown:
        raise DataError(f"unknown pipeline stages: {', '.join(unknown)}")
    stages = tuple(s for s in STAGES if s in stages)
    utts, base = discover_input(in_path)
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)

    if workers < 1:
        raise DataError("workers must be at least 1")

    def work(u: Utterance) -> _WorkResult:
        try:
            return _process_one(u, base, stages, vad_command, target_rate,
                                strict_sidecars)
        except DataError as exc:
            # one bad file must not abort the corpus run
            return _WorkResult(utt=u, dropped_at="load", reason=f"error: {exc}")

    if workers == 1:
        results = [work(u) for u in utts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, utts))
    results.sort(key=lambda r: r.utt.utt_id)

    counts = {s: StageCount(stage=s) for s in ("load",) + stages}
    kept: list[Utterance] = []
    dropped_rows: list[dict] = []
    for res in results:
        for msg in res.warnings:
            warnings.warn(msg)
            if log:
                log(f"warning: {msg}")
        if res.dropped_at is not None:
            for s in ("load",) + stages:
                if s == res.dropped_at:
                    counts[s].drop(res.reason)
                    break
                counts[s].keep()
            dropped_rows.append({
                "utt_id": res.utt.utt_id,
                "stage": res.dropped_at,
                "reason": res.reason,
            })
            continue
        for s in ("load",) + stages:
            counts[s].keep()
        kept.append(res.utt)
        dsp.save_wav(out / "audio" / f"{res.utt.utt_id}.wav",
                     dsp.Waveform(res.samples, res.sample_rate))

    write_manifest(out / "manifest.jsonl", kept)
    with open(out / "dropped.jsonl", "w", encoding="utf-8") as f:
        for row in sorted(dropped_rows, key=lambda r: r["utt_id"]):
            f.write(json.dumps(row, sort_keys=True) + "\n")

    splits = split_sets(kept, seed=seed, test_n=test_n, adapt_seconds=adapt_seconds)
    for name, rows in splits.items():
        write_manifest(out / f"{name}.jsonl", rows)

    report = PipelineReport(
        stages=list(counts.values()),
        settings={
            "stages": list(stages),
            "seed": seed,
            "target_rate": target_rate,
            "test_n": test_n,
            "adapt_seconds": adapt_seconds,
            "workers_requested": workers,
            "strict_sidecars": strict_sidecars,
            "vad_command": vad_command,
        },
    )
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    if log:
        for s in report.stages:
            log(f"stage {s.stage}: {s.input} in, {s.kept} kept, {s.dropped} dropped")
    return report
