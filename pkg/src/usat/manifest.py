"""Utterance manifests: JSON Lines, one object per utterance.

Audio paths are stored as written (usually relative to the manifest's
directory); `audio_path` resolves them. Writers emit sorted keys and
utterance-id-sorted rows so equal content means equal bytes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import DataError

REQUIRED_FIELDS = ("utt_id", "speaker_id", "audio", "transcript", "duration", "sample_rate")


@dataclass
class Utterance:
    utt_id: str
    speaker_id: str
    audio: str
    transcript: str
    duration: float
    sample_rate: int
    stages: list[str] = field(default_factory=list)

    def audio_path(self, base: str | Path) -> Path:
        p = Path(self.audio)
        return p if p.is_absolute() else Path(base) / p


def read_manifest(path: str | Path) -> list[Utterance]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    utts: list[Utterance] = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        missing = [k for k in REQUIRED_FIELDS if k not in obj]
        if missing:
            raise DataError(f"{path}:{lineno}: missing fields {missing}")
        utts.append(Utterance(
            utt_id=str(obj["utt_id"]),
            speaker_id=str(obj["speaker_id"]),
            audio=str(obj["audio"]),
            transcript=str(obj["transcript"]),
            duration=float(obj["duration"]),
            sample_rate=int(obj["sample_rate"]),
            stages=list(obj.get("stages", [])),
        ))
    return utts


def write_manifest(path: str | Path, utts: list[Utterance], sort: bool = True) -> None:
    rows = sorted(utts, key=lambda u: u.utt_id) if sort else list(utts)
    lines = [json.dumps(asdict(u), sort_keys=True) for u in rows]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def by_speaker(utts: list[Utterance]) -> dict[str, list[Utterance]]:
    groups: dict[str, list[Utterance]] = {}
    for u in utts:
        groups.setdefault(u.speaker_id, []).append(u)
    return groups
