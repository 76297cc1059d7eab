"""Synthetic speech corpora for tests and desk-scale end-to-end runs.

Utterances are built phoneme by phoneme from the bundled symbol table:
vowels are harmonic stacks shaped by per-vowel formant peaks, consonants are
band-limited noise bursts, and word gaps are silence. Speakers differ in
fundamental frequency, formant scaling, and spectral tilt, which gives a
speaker encoder real signal to separate while keeping every file a few
dozen kilobytes. All randomness flows from one seeded generator, so corpora
are reproducible byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp
from .errors import DataError
from .manifest import Utterance, write_manifest
from .text_frontend import text_to_phonemes

TRAIN_SPEAKERS = {
    "spk_a": {"f0": 110.0, "formant_scale": 1.0, "tilt": 0.3},
    "spk_b": {"f0": 220.0, "formant_scale": 1.12, "tilt": 0.55},
}
HELDOUT_SPEAKER = {
    "spk_c": {"f0": 160.0, "formant_scale": 0.93, "tilt": 0.85},
}

WORDS = ("kato", "pimu", "sore", "nala", "tuke", "mipo", "rese", "kuna",
         "tilo", "pame", "suri", "noke", "lapu", "meti", "peko", "ruli")

# (F1, F2) formant peaks in Hz per vowel symbol
_VOWEL_FORMANTS = {
    "aa": (730.0, 1090.0),
    "ee": (530.0, 1840.0),
    "ii": (270.0, 2290.0),
    "oo": (570.0, 840.0),
    "uu": (300.0, 870.0),
}
# noise-burst center frequency and duration range (seconds) per consonant
_CONSONANTS = {
    "k": (1500.0, (0.045, 0.065)),
    "t": (3800.0, (0.040, 0.060)),
    "p": (800.0, (0.045, 0.065)),
    "s": (5200.0, (0.080, 0.120)),
    "m": (280.0, (0.060, 0.090)),
    "n": (320.0, (0.060, 0.090)),
    "r": (1200.0, (0.055, 0.085)),
    "l": (900.0, (0.055, 0.085)),
}
_VOWEL_DUR = (0.09, 0.15)
_GAP_DUR = (0.04, 0.07)
_EDGE_SILENCE = 0.03


def _fade(wave: np.ndarray, rate: int, ms: float = 5.0) -> np.ndarray:
    n = min(len(wave) // 2, int(rate * ms / 1000.0))
    if n > 0:
        ramp = 0.5 - 0.5 * np.cos(np.linspace(0.0, np.pi, n))
        wave[:n] *= ramp
        wave[-n:] *= ramp[::-1]
    return wave


def _vowel_wave(symbol: str, spk: dict, dur: float, rate: int,
                rng: np.random.Generator) -> np.ndarray:
    f0 = spk["f0"] * (1.0 + 0.02 * rng.standard_normal())
    f1, f2 = (f * spk["formant_scale"] for f in _VOWEL_FORMANTS[symbol])
    n = int(dur * rate)
    t = np.arange(n) / rate
    wave = np.zeros(n)
    top = min(6000.0, 0.45 * rate)
    k = 1
    while k * f0 <= top:
        f = k * f0
        gain = (np.exp(-0.5 * ((f - f1) / 120.0) ** 2)
                + 0.7 * np.exp(-0.5 * ((f - f2) / 180.0) ** 2)
                + 0.08)
        gain *= (f0 / f) ** spk["tilt"]
        wave += gain * np.sin(2.0 * np.pi * f * t + rng.uniform(0.0, 2.0 * np.pi))
        k += 1
    peak = np.max(np.abs(wave))
    if peak > 0:
        wave *= 0.30 / peak
    return _fade(wave, rate)


def _consonant_wave(symbol: str, spk: dict, rate: int,
                    rng: np.random.Generator) -> np.ndarray:
    center, (lo, hi) = _CONSONANTS[symbol]
    center *= spk["formant_scale"]
    n = int(rng.uniform(lo, hi) * rate)
    noise = rng.standard_normal(n)
    spec = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, 1.0 / rate)
    width = max(150.0, center / 4.0)
    spec *= np.exp(-0.5 * ((freqs - center) / width) ** 2)
    wave = np.fft.irfft(spec, n)
    peak = np.max(np.abs(wave))
    if peak > 0:
        wave *= 0.18 / peak
    return _fade(wave, rate)


def synthesize_utterance(
    transcript: str,
    spk: dict,
    rate: int,
    rng: np.random.Generator,
) -> dsp.Waveform:
    """Render a transcript as audio using the bundled phoneme mapping.

    The segment sequence mirrors text_to_phonemes exactly (including the
    word-gap symbols), so aligners see audio whose structure matches the
    id sequence the model is trained on.
    """
    phonemes = text_to_phonemes(transcript)
    pieces = [np.zeros(int(_EDGE_SILENCE * rate))]
    for symbol in phonemes.symbols():
        if symbol == "|":
            pieces.append(np.zeros(int(rng.uniform(*_GAP_DUR) * rate)))
        elif symbol in _VOWEL_FORMANTS:
            dur = rng.uniform(*_VOWEL_DUR)
            pieces.append(_vowel_wave(symbol, spk, dur, rate, rng))
        elif symbol in _CONSONANTS:
            pieces.append(_consonant_wave(symbol, spk, rate, rng))
        else:
            raise DataError(f"no synthesis rule for symbol {symbol!r}")
    pieces.append(np.zeros(int(_EDGE_SILENCE * rate)))
    wave = np.concatenate(pieces).astype(np.float32)
    return dsp.Waveform(wave, rate)


def _random_transcript(rng: np.random.Generator, min_words: int = 2,
                       max_words: int = 4) -> str:
    n = int(rng.integers(min_words, max_words + 1))
    return " ".join(WORDS[int(i)] for i in rng.integers(0, len(WORDS), size=n))


def _write_corpus(
    out_dir: Path,
    speakers: dict[str, dict],
    utterances_per_speaker: int,
    seed: int,
    rate: int,
) -> Path:
    rng = np.random.default_rng(seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "audio").mkdir(exist_ok=True)
    utts = []
    for speaker in sorted(speakers):
        for i in range(utterances_per_speaker):
            utt_id = f"{speaker}_{i:03d}"
            transcript = _random_transcript(rng)
            w = synthesize_utterance(transcript, speakers[speaker], rate, rng)
            dsp.save_wav(out_dir / "audio" / f"{utt_id}.wav", w)
            utts.append(Utterance(
                utt_id=utt_id, speaker_id=speaker,
                audio=f"audio/{utt_id}.wav", transcript=transcript,
                duration=w.duration_seconds, sample_rate=rate, stages=[]))
    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, utts)
    return manifest


def build_training_corpus(
    out_dir: str | Path,
    utterances_per_speaker: int = 25,
    seed: int = 0,
    rate: int = dsp.DEFAULT_SAMPLE_RATE,
) -> Path:
    """Two-speaker training corpus (50 utterances at the defaults)."""
    return _write_corpus(Path(out_dir), TRAIN_SPEAKERS,
                         utterances_per_speaker, seed, rate)


def build_heldout_corpus(
    out_dir: str | Path,
    num_utterances: int = 12,
    seed: int = 7,
    rate: int = dsp.DEFAULT_SAMPLE_RATE,
) -> Path:
    """Unseen-speaker corpus for adaptation experiments."""
    return _write_corpus(Path(out_dir), HELDOUT_SPEAKER,
                         num_utterances, seed, rate)


# ----------------------------------------------------------------- fixture

@dataclass(frozen=True)
class FixtureDesign:
    """What the pipeline fixture is built to produce, for tests to assert."""

    total: int = 9
    dropped_trim: int = 1        # fully silent file
    dropped_short: int = 1       # 0.3 s of speech after trimming
    dropped_snr: int = 1         # speech barely above a loud noise floor
    dropped_speakers: int = 1    # sidecar reports two speakers
    dropped_transcript: int = 1  # hypothesis three edits away
    retained: int = 4


def build_pipeline_fixture(out_dir: str | Path, seed: int = 0,
                           rate: int = 16000) -> FixtureDesign:
    """Raw corpus with one designed drop per filter stage.

    Layout: `<utt>.wav` + `<utt>.txt` transcript, plus `.hyp.txt` and
    `.spk.txt` sidecars. Stage expectations are encoded in FixtureDesign.
    """
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frame = dsp.SNR_FRAME_SIZE
    spk = dict(TRAIN_SPEAKERS["spk_a"])

    def emit(utt_id: str, samples: np.ndarray, transcript: str,
             hyp: str | None = None, spk_count: int = 1) -> None:
        dsp.save_wav(out / f"{utt_id}.wav", dsp.Waveform(
            samples.astype(np.float32), rate))
        (out / f"{utt_id}.txt").write_text(transcript + "\n", encoding="utf-8")
        (out / f"{utt_id}.hyp.txt").write_text(
            (hyp if hyp is not None else transcript) + "\n", encoding="utf-8")
        (out / f"{utt_id}.spk.txt").write_text(f"{spk_count}\n", encoding="utf-8")

    def speech(transcript: str, pad: float) -> np.ndarray:
        w = synthesize_utterance(transcript, spk, rate, rng).samples
        z = np.zeros(int(pad * rate))
        return np.concatenate([z, w, z])

    # kept: edge silence to trim, interior pause keeps the SNR math regular
    emit("fix_good_01", speech("kato pimu sore", 0.3), "kato pimu sore")
    # kept: no silent edges; loud first/last frames survive trimming intact
    w2 = synthesize_utterance("nala tuke mipo", spk, rate, rng).samples
    w2 = w2[: len(w2) - (len(w2) % (2 * frame))]
    w2[:frame] += 0.05 * np.sin(2 * np.pi * 220 * np.arange(frame) / rate)
    w2[-frame:] += 0.05 * np.sin(2 * np.pi * 220 * np.arange(frame) / rate)
    emit("fix_good_02", np.clip(w2, -1, 1), "nala tuke mipo")
    # dropped at trim: nothing above the activity threshold
    emit("fix_silent", 1e-5 * rng.standard_normal(int(1.5 * rate)), "kato")
    # dropped at short: ~0.3 s of speech inside long silence
    brief = synthesize_utterance("tuke", spk, rate, rng).samples
    brief = brief[int(_EDGE_SILENCE * rate):][: int(0.30 * rate)]
    pad = np.zeros(int(0.45 * rate))
    emit("fix_short", np.concatenate([pad, brief, pad]), "tuke")
    # dropped at snr: speech blocks barely above a just-sub-threshold floor.
    # Blocks span two frames at 16 kHz (three at 24 kHz) so the frame grid
    # never straddles a block boundary at either rate.
    block = 2 * frame
    n_blocks = int(2.0 * rate) // block
    floor_power = 10.0 ** (-4.10)     # just below the -40 dBFS gate
    speech_power = 10.0 ** (-3.93)    # just above it
    parts = []
    for i in range(n_blocks):
        seg = rng.standard_normal(block)
        power = speech_power if i % 2 == 0 else floor_power
        seg *= np.sqrt(power / np.mean(seg * seg))
        parts.append(seg)
    emit("fix_lowsnr", np.concatenate(parts), "sore nala")
    # dropped at speakers: diarization sidecar says two voices
    emit("fix_multispeaker", speech("kuna tilo", 0.1), "kuna tilo", spk_count=2)
    # dropped at transcript: hypothesis three substitutions away
    emit("fix_badtranscript", speech("kato pimu sore", 0.1),
         "kato pimu sore", hyp="nala tuke ruli")
    # kept: hypothesis differs by one word (inclusive boundary)
    emit("fix_okhyp", speech("kato pimu sore", 0.1),
         "kato pimu sore", hyp="kato pimu tuke")
    # kept: exercises abbreviation and number normalization
    emit("fix_numbers", speech("kato pimu", 0.1), "Dr. kato 128",
         hyp="doctor kato one hundred twenty eight")
    return FixtureDesign()
