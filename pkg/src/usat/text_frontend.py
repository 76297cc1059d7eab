"""Text frontend: phoneme mapping, transformer encoder with relative
positional attention, duration prediction, alignment, frame expansion.

Grapheme-to-phoneme is pluggable: an external command reading text on stdin
and printing space-separated phoneme symbols wins when given; otherwise the
bundled lexicon is consulted per word, then the per-letter rule table.
Word boundaries become an explicit gap symbol so alignment can absorb the
silences between words.
"""

from __future__ import annotations

import re
import shlex
import subprocess
import warnings
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .alignment import monotonic_alignment_search as _mas_raw
from .config import ModelConfig
from .errors import DataError

PAD_SYMBOL = "<pad>"
UNK_SYMBOL = "<unk>"
GAP_SYMBOL = "|"

_MASK_FILL = -1e9


def _data_text(name: str) -> str:
    return resources.files("usat").joinpath(f"data/{name}").read_text()


@lru_cache(maxsize=1)
def load_symbols() -> tuple[str, ...]:
    """Bundled symbol table: one symbol per line, line index is the id."""
    symbols = tuple(line.strip() for line in _data_text("symbols.txt").splitlines() if line.strip())
    if symbols[0] != PAD_SYMBOL or symbols[1] != UNK_SYMBOL:
        raise DataError("symbol table must start with the pad and unk symbols")
    return symbols


@lru_cache(maxsize=1)
def _symbol_ids() -> dict[str, int]:
    return {s: i for i, s in enumerate(load_symbols())}


@lru_cache(maxsize=1)
def _lexicon() -> dict[str, tuple[str, ...]]:
    table: dict[str, tuple[str, ...]] = {}
    for line in _data_text("lexicon.txt").splitlines():
        parts = line.split()
        if parts:
            table[parts[0]] = tuple(parts[1:])
    return table


@lru_cache(maxsize=1)
def _letter_rules() -> dict[str, str]:
    rules: dict[str, str] = {}
    for line in _data_text("g2p_rules.txt").splitlines():
        parts = line.split()
        if len(parts) == 2:
            rules[parts[0]] = parts[1]
    return rules


@dataclass
class PhonemeSequence:
    """Symbol ids into the bundled table."""

    ids: np.ndarray

    def __post_init__(self) -> None:
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 1 or len(self.ids) == 0:
            raise DataError("phoneme sequence must be a non-empty 1-D id vector")
        n = len(load_symbols())
        if self.ids.min() < 0 or self.ids.max() >= n:
            raise DataError(f"phoneme ids must lie in [0, {n})")

    def symbols(self) -> list[str]:
        table = load_symbols()
        return [table[i] for i in self.ids]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class PhonemeRepresentation:
    """Gaussian statistics per unit; level is 'phoneme' or 'frame'."""

    mean: np.ndarray
    log_scale: np.ndarray
    level: str = "phoneme"

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float32)
        if self.mean.shape != self.log_scale.shape or self.mean.ndim != 2:
            raise DataError("representation mean/log_scale must be equal-shape 2-D")
        if self.level not in ("phoneme", "frame"):
            raise DataError(f"unknown representation level {self.level!r}")

    @property
    def num_units(self) -> int:
        return self.mean.shape[0]


@dataclass
class DurationAssignment:
    """Positive integer frame counts, one per phoneme."""

    durations: np.ndarray

    def __post_init__(self) -> None:
        self.durations = np.asarray(self.durations, dtype=np.int64)
        if self.durations.ndim != 1 or len(self.durations) == 0:
            raise DataError("durations must be a non-empty 1-D vector")
        if self.durations.min() < 1:
            raise DataError("every phoneme must get at least one frame")

    @property
    def total_frames(self) -> int:
        return int(self.durations.sum())


def _normalize_for_g2p(text: str) -> list[str]:
    cleaned = re.sub(r"[^a-z0-9\s]", " ", text.lower())
    return cleaned.split()


def text_to_phonemes(text: str, g2p_command: str | None = None) -> PhonemeSequence:
    """Deterministic text-to-phoneme-id mapping with gap symbols at word edges.

    Unknown symbols map to the dedicated unknown id with a warning. An
    external command (stdin text, stdout space-separated symbols) overrides
    the bundled lexicon + letter rules when provided.
    """
    if not text or not text.strip():
        raise DataError("text is empty")
    ids = _symbol_ids()
    if g2p_command is not None:
        proc = subprocess.run(
            shlex.split(g2p_command), input=text, capture_output=True, text=True)
        if proc.returncode != 0:
            raise DataError(f"g2p command failed ({proc.returncode}): {proc.stderr.strip()}")
        symbols = proc.stdout.split()
        if not symbols:
            raise DataError("g2p command produced no symbols")
        out = []
        for sym in symbols:
            if sym not in ids:
                warnings.warn(f"g2p produced unknown symbol {sym!r}; using {UNK_SYMBOL}")
                sym = UNK_SYMBOL
            out.append(ids[sym])
        return PhonemeSequence(np.array(out, dtype=np.int64))

    words = _normalize_for_g2p(text)
    if not words:
        raise DataError("text is empty after normalization")
    lexicon = _lexicon()
    rules = _letter_rules()
    out = [ids[GAP_SYMBOL]]
    for word in words:
        if word in lexicon:
            phones = lexicon[word]
        else:
            phones = []
            for ch in word:
                if ch in rules:
                    phones.append(rules[ch])
                else:
                    warnings.warn(f"no phoneme rule for {ch!r} in {word!r}; using {UNK_SYMBOL}")
                    phones.append(UNK_SYMBOL)
        out.extend(ids[p] for p in phones)
        out.append(ids[GAP_SYMBOL])
    return PhonemeSequence(np.array(out, dtype=np.int64))


class RelativeSelfAttention(nn.Module):
    """Multi-head self-attention with clipped relative position embeddings.

    Position information enters only through key/value offsets clipped to a
    window, so outputs depend on token distances, never absolute indices.
    """

    def __init__(self, channels: int, heads: int, window: int):
        super().__init__()
        if channels % heads != 0:
            raise DataError("attention channels must divide evenly across heads")
        self.heads = heads
        self.head_dim = channels // heads
        self.window = window
        self.q_proj = nn.Linear(channels, channels)
        self.k_proj = nn.Linear(channels, channels)
        self.v_proj = nn.Linear(channels, channels)
        self.o_proj = nn.Linear(channels, channels)
        scale = self.head_dim ** -0.5
        self.rel_k = nn.Parameter(torch.randn(2 * window + 1, self.head_dim) * scale)
        self.rel_v = nn.Parameter(torch.randn(2 * window + 1, self.head_dim) * scale)
        # adapter slots, set by the adaptation machinery
        self.q_adapter: nn.Module | None = None
        self.k_adapter: nn.Module | None = None
        self.v_adapter: nn.Module | None = None

    def _project(self, x: torch.Tensor, proj: nn.Linear, adapter: nn.Module | None) -> torch.Tensor:
        out = proj(x)
        if adapter is not None:
            out = out + adapter(x)
        b, t, _ = out.shape
        return out.view(b, t, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        b, t, _ = x.shape
        q = self._project(x, self.q_proj, self.q_adapter)
        k = self._project(x, self.k_proj, self.k_adapter)
        v = self._project(x, self.v_proj, self.v_adapter)

        pos = torch.arange(t, device=x.device)
        idx = (pos[None, :] - pos[:, None]).clamp(-self.window, self.window) + self.window
        rel_k = self.rel_k[idx]  # [T, T, head_dim]
        rel_v = self.rel_v[idx]

        scale = self.head_dim ** -0.5
        scores = (q @ k.transpose(-2, -1) + torch.einsum("bhid,ijd->bhij", q, rel_k)) * scale
        if mask is not None:
            scores = scores.masked_fill(~mask[:, None, None, :], _MASK_FILL)
        attn = torch.softmax(scores, dim=-1)
        out = attn @ v + torch.einsum("bhij,ijd->bhid", attn, rel_v)
        out = out.transpose(1, 2).reshape(b, t, -1)
        return self.o_proj(out)


class _EncoderBlock(nn.Module):
    def __init__(self, channels: int, heads: int, window: int, ffn_dim: int):
        super().__init__()
        self.attn = RelativeSelfAttention(channels, heads, window)
        self.ln1 = nn.LayerNorm(channels)
        self.ffn_a = nn.Conv1d(channels, ffn_dim, 3, padding=1)
        self.ffn_b = nn.Conv1d(ffn_dim, channels, 3, padding=1)
        self.ln2 = nn.LayerNorm(channels)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
        maskf = mask.unsqueeze(-1).to(x.dtype) if mask is not None else None
        x = self.ln1(x + self.attn(x, mask))
        if maskf is not None:
            x = x * maskf
        h = x.transpose(1, 2)
        h = self.ffn_b(F.relu(self.ffn_a(h))).transpose(1, 2)
        x = self.ln2(x + h)
        if maskf is not None:
            x = x * maskf
        return x


class PhonemeEncoder(nn.Module):
    """Transformer over phoneme ids emitting per-phoneme Gaussian statistics."""

    def __init__(self, cfg: ModelConfig, num_symbols: int):
        super().__init__()
        self.embedding = nn.Embedding(num_symbols, cfg.enc_hidden)
        self.scale = cfg.enc_hidden ** 0.5
        self.blocks = nn.ModuleList([
            _EncoderBlock(cfg.enc_hidden, cfg.enc_heads, cfg.enc_window, cfg.enc_ffn)
            for _ in range(cfg.enc_layers)
        ])
        self.proj = nn.Linear(cfg.enc_hidden, 2 * cfg.latent_dim)

    def forward(
        self, ids: torch.Tensor, mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """ids [B, N] -> (mean, log_scale) [B, N, latent] and hidden [B, N, H]."""
        x = self.embedding(ids) * self.scale
        if mask is not None:
            x = x * mask.unsqueeze(-1).to(x.dtype)
        for block in self.blocks:
            x = block(x, mask)
        mean, log_scale = self.proj(x).chunk(2, dim=-1)
        return mean, log_scale, x


def encode_phonemes(encoder: PhonemeEncoder, p: PhonemeSequence) -> PhonemeRepresentation:
    """Phoneme-level prior statistics for an id sequence."""
    dev = next(encoder.parameters()).device
    with torch.no_grad():
        ids = torch.as_tensor(p.ids[None], device=dev)
        mean, log_scale, _ = encoder(ids)
    return PhonemeRepresentation(
        mean=mean[0].cpu().numpy(),
        log_scale=log_scale[0].cpu().numpy(),
        level="phoneme",
    )


class DurationPredictor(nn.Module):
    """Convolutional log-duration regressor over phoneme hidden states.

    Inputs are detached internally: duration training must not reshape the
    text encoder or the speaker encoder. The speaker embedding enters as a
    bias after the first conv.
    """

    def __init__(self, in_dim: int, hidden: int, num_layers: int, spk_dim: int):
        super().__init__()
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        for i in range(num_layers):
            self.convs.append(nn.Conv1d(in_dim if i == 0 else hidden, hidden, 3, padding=1))
            self.norms.append(nn.LayerNorm(hidden))
        self.cond = nn.Linear(spk_dim, hidden)
        self.out = nn.Conv1d(hidden, 1, 1)
        # adapter slots, one per conv block, set by the adaptation machinery
        self.block_adapters = nn.ModuleList()

    def forward(self, hidden: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        """hidden [B, N, in_dim], s [B, spk_dim] -> log-durations [B, N]."""
        h = hidden.detach().transpose(1, 2)
        s = s.detach()
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            h = conv(h)
            if i == 0:
                h = h + self.cond(s).unsqueeze(-1)
            h = F.relu(norm(h.transpose(1, 2)).transpose(1, 2))
            if i < len(self.block_adapters) and self.block_adapters[i] is not None:
                h = h + self.block_adapters[i](h)
        return self.out(h).squeeze(1)


def predict_durations(
    predictor: DurationPredictor, hidden: np.ndarray, s_vector: np.ndarray,
) -> np.ndarray:
    """Log-durations [N] for phoneme hidden states [N x in_dim]."""
    p = next(predictor.parameters())
    with torch.no_grad():
        out = predictor(
            torch.as_tensor(hidden[None], dtype=p.dtype, device=p.device),
            torch.as_tensor(s_vector[None], dtype=p.dtype, device=p.device))
    return out[0].cpu().numpy()


def duration_loss(predicted_log: torch.Tensor, durations: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predictions and log of aligned durations."""
    target = torch.log(durations.to(predicted_log.dtype))
    return F.mse_loss(predicted_log, target)


def durations_from_log(predicted_log: np.ndarray) -> DurationAssignment:
    """Inference rule: exp, round, floor at one frame per phoneme."""
    d = np.maximum(1, np.rint(np.exp(np.asarray(predicted_log, dtype=np.float64))))
    return DurationAssignment(d.astype(np.int64))


def monotonic_alignment_search(log_lik: np.ndarray) -> DurationAssignment:
    """Best monotonic, surjective, contiguous alignment (see alignment module)."""
    return DurationAssignment(_mas_raw(log_lik))


def expand_to_frames(rep: PhonemeRepresentation, d: DurationAssignment) -> PhonemeRepresentation:
    """Repeat phoneme i's statistics d_i times, preserving order."""
    if rep.level != "phoneme":
        raise DataError("expansion needs a phoneme-level representation")
    if rep.num_units != len(d.durations):
        raise DataError(
            f"{rep.num_units} phonemes but {len(d.durations)} durations")
    return PhonemeRepresentation(
        mean=np.repeat(rep.mean, d.durations, axis=0),
        log_scale=np.repeat(rep.log_scale, d.durations, axis=0),
        level="frame",
    )
