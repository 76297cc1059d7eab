"""Memory-augmented VAE: posterior encoder, codebook attention, waveform decoder.

Latent sequences cross the public API as [frames x latent_dim] numpy arrays;
torch internals run channels-first. The decoder upsamples by the product of
its transposed-conv factors, which equals the analysis frame shift, so F
latent frames decode to exactly F * frame_shift samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import dsp
from .config import ModelConfig
from .errors import DataError
from .modules import ChannelLayerNorm, ConvStack


@dataclass
class PosteriorParams:
    """Per-frame diagonal-Gaussian posterior statistics, [frames x latent_dim]."""

    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.log_std = np.asarray(self.log_std, dtype=np.float32)
        if self.mean.shape != self.log_std.shape or self.mean.ndim != 2:
            raise DataError("posterior mean/log_std must be equal-shape 2-D arrays")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.log_std))):
            raise DataError("posterior parameters must be finite")

    @property
    def num_frames(self) -> int:
        return self.mean.shape[0]


@dataclass
class LatentSequence:
    """A latent frame sequence, [frames x latent_dim]."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise DataError("latent sequence must be 2-D [frames x latent_dim]")
        if not np.all(np.isfinite(self.values)):
            raise DataError("latent sequence contains non-finite values")

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]


class PosteriorEncoder(nn.Module):
    """Dilated conv stack mapping compressed linear magnitudes to latent stats."""

    def __init__(self, spec_bins: int, hidden: int, latent_dim: int, num_layers: int):
        super().__init__()
        self.pre = nn.Conv1d(spec_bins, hidden, 1)
        self.norm = ChannelLayerNorm(hidden)
        self.stack = ConvStack(hidden, num_layers, kernel=5)
        self.proj = nn.Conv1d(hidden, 2 * latent_dim, 1)
        self.latent_dim = latent_dim

    def forward(self, spec: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """spec [B, bins, T] (raw magnitudes) -> (mean, log_std) [B, latent, T]."""
        h = torch.log1p(spec)  # compress the magnitude dynamic range
        h = torch.relu(self.norm(self.pre(h)))
        h = self.stack(h)
        stats = self.proj(h)
        mean, log_std = stats.chunk(2, dim=1)
        return mean, log_std


class MemoryCodebook(nn.Module):
    """Learnable codebook queried by latent frames through scaled dot attention.

    output = softmax(z Wq (M Wk)^T / sqrt(d)) (M Wv) Wo, row-stochastic over
    the codebook entries for every frame.
    """

    def __init__(self, latent_dim: int, num_entries: int, attn_dim: int | None = None):
        super().__init__()
        if num_entries < 1:
            raise DataError("memory codebook needs at least one entry")
        d = attn_dim or latent_dim
        if d <= 0:
            raise DataError("attention dimension must be positive")
        self.entries = nn.Parameter(torch.randn(num_entries, latent_dim) * 0.1)
        self.wq = nn.Linear(latent_dim, d, bias=False)
        self.wk = nn.Linear(latent_dim, d, bias=False)
        self.wv = nn.Linear(latent_dim, d, bias=False)
        self.wo = nn.Linear(d, latent_dim, bias=False)
        self.attn_dim = d

    def forward(
        self, z: torch.Tensor, return_weights: bool = False,
    ) -> torch.Tensor | tuple[torch.Tensor, torch.Tensor]:
        """z [B, T, latent] -> same shape (and [B, T, entries] weights if asked)."""
        q = self.wq(z)
        k = self.wk(self.entries)
        v = self.wv(self.entries)
        scores = q @ k.T / math.sqrt(self.attn_dim)
        weights = torch.softmax(scores, dim=-1)
        out = self.wo(weights @ v)
        if return_weights:
            return out, weights
        return out


class _DilatedResBlock(nn.Module):
    """Residual refinement after each upsample: dilated then plain 3-convs."""

    def __init__(self, channels: int, dilations: tuple[int, ...] = (1, 3)):
        super().__init__()
        self.first = nn.ModuleList([
            nn.Conv1d(channels, channels, 3, padding=d, dilation=d)
            for d in dilations])
        self.second = nn.ModuleList([
            nn.Conv1d(channels, channels, 3, padding=1) for _ in dilations])

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        for c1, c2 in zip(self.first, self.second):
            r = c2(F.leaky_relu(c1(F.leaky_relu(h, 0.1)), 0.1))
            h = h + r
        return h


class WaveDecoder(nn.Module):
    """Transposed-conv upsampler with dilated residual refinement per stage."""

    def __init__(self, latent_dim: int, channels: int, factors: tuple[int, ...]):
        super().__init__()
        self.pre = nn.Conv1d(latent_dim, channels, 7, padding=3)
        ups = []
        blocks = []
        c = channels
        for f in factors:
            if f % 2 != 0:
                raise DataError("decoder upsample factors must be even")
            ups.append(nn.ConvTranspose1d(c, c // 2, 2 * f, stride=f, padding=f // 2))
            blocks.append(_DilatedResBlock(c // 2))
            c //= 2
        self.ups = nn.ModuleList(ups)
        self.blocks = nn.ModuleList(blocks)
        self.out = nn.Conv1d(c, 1, 7, padding=3)
        self.total_factor = int(np.prod(factors))

    def forward(self, m: torch.Tensor) -> torch.Tensor:
        """m [B, latent, F] -> waveform [B, 1, F * total_factor], in (-1, 1)."""
        h = self.pre(m)
        for up, block in zip(self.ups, self.blocks):
            h = block(up(F.leaky_relu(h, 0.1)))
        return torch.tanh(self.out(F.leaky_relu(h, 0.1)))


class MemoryVAE(nn.Module):
    """Posterior encoder + memory codebook + waveform decoder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        spec_bins = cfg.fft_size // 2 + 1
        self.posterior = PosteriorEncoder(
            spec_bins, cfg.posterior_hidden, cfg.latent_dim, cfg.posterior_layers)
        self.memory = MemoryCodebook(cfg.latent_dim, cfg.memory_entries)
        self.decoder = WaveDecoder(cfg.latent_dim, cfg.decoder_channels, cfg.decoder_factors)
        self.cfg = cfg


def _to_torch(arr: np.ndarray, model: nn.Module) -> torch.Tensor:
    p = next(model.parameters())
    return torch.as_tensor(np.ascontiguousarray(arr), dtype=p.dtype, device=p.device)


def encode(model: MemoryVAE, lin: dsp.LinearSpectrogram) -> PosteriorParams:
    """Posterior statistics for a spectrogram, one latent frame per input frame."""
    if lin.num_frames < 1:
        raise DataError("need at least one spectrogram frame")
    if not np.all(np.isfinite(lin.magnitudes)):
        raise DataError("spectrogram contains non-finite values")
    with torch.no_grad():
        spec = _to_torch(lin.magnitudes.T[None], model)
        mean, log_std = model.posterior(spec)
    return PosteriorParams(
        mean=mean[0].T.cpu().numpy(),
        log_std=log_std[0].T.cpu().numpy(),
    )


def sample_latent(params: PosteriorParams, noise: np.ndarray) -> LatentSequence:
    """Reparameterized draw: mean + exp(log_std) * noise."""
    noise = np.asarray(noise, dtype=np.float32)
    if noise.shape != params.mean.shape:
        raise DataError(
            f"noise shape {noise.shape} must match posterior shape {params.mean.shape}")
    return LatentSequence(params.mean + np.exp(params.log_std) * noise)


def memory_lookup(model: MemoryVAE, z: LatentSequence) -> LatentSequence:
    """Route latent frames through codebook attention; shape preserved."""
    with torch.no_grad():
        out = model.memory(_to_torch(z.values[None], model))
    return LatentSequence(out[0].cpu().numpy())


def decode(model: MemoryVAE, m: LatentSequence) -> dsp.Waveform:
    """Decode memory-attended latents to a waveform of F * frame_shift samples."""
    if m.num_frames < 1:
        raise DataError("need at least one latent frame")
    with torch.no_grad():
        wav = model.decoder(_to_torch(m.values.T[None], model))
    samples = np.clip(wav[0, 0].cpu().numpy(), -1.0, 1.0)
    return dsp.Waveform(samples, model.cfg.sample_rate)


def mel_l1(a: dsp.MelSpectrogram, b: dsp.MelSpectrogram) -> float:
    """Mean absolute difference over the overlapping leading frames."""
    overlap = min(a.values.shape[0], b.values.shape[0])
    if overlap == 0:
        raise DataError("mel spectrograms have no overlapping frames")
    if a.values.shape[1] != b.values.shape[1]:
        raise DataError("mel bin counts differ")
    diff = np.abs(a.values[:overlap].astype(np.float64) - b.values[:overlap].astype(np.float64))
    return float(diff.mean())


def reconstruction_loss(model_cfg: ModelConfig, w: dsp.Waveform, w_hat: dsp.Waveform) -> float:
    """L1 between log mel spectrograms of the two waveforms (overlapping frames)."""
    if w.sample_rate != w_hat.sample_rate:
        raise DataError("waveform sample rates differ")
    mel_a = dsp.mel_project(
        dsp.stft(w, model_cfg.window_length, model_cfg.frame_shift, model_cfg.fft_size),
        model_cfg.mel_bins, model_cfg.mel_fmin)
    mel_b = dsp.mel_project(
        dsp.stft(w_hat, model_cfg.window_length, model_cfg.frame_shift, model_cfg.fft_size),
        model_cfg.mel_bins, model_cfg.mel_fmin)
    log_a = dsp.MelSpectrogram(np.log(np.clip(mel_a.values, 1e-5, None)))
    log_b = dsp.MelSpectrogram(np.log(np.clip(mel_b.values, 1e-5, None)))
    return mel_l1(log_a, log_b)


class TorchMel(nn.Module):
    """Differentiable mel analysis mirroring the numpy path's conventions."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        fb = dsp.mel_filterbank(cfg.sample_rate, cfg.fft_size, cfg.mel_bins, cfg.mel_fmin)
        self.register_buffer("fb", torch.from_numpy(fb))
        self.register_buffer(
            "window", torch.hann_window(cfg.window_length, periodic=True))
        self.cfg = cfg

    def forward(self, wav: torch.Tensor) -> torch.Tensor:
        """wav [B, L] -> log mel [B, mel_bins, frames] under the no-padding rule."""
        spec = torch.stft(
            wav,
            n_fft=self.cfg.fft_size,
            hop_length=self.cfg.frame_shift,
            win_length=self.cfg.window_length,
            window=self.window,
            center=False,
            return_complex=True,
        ).abs()
        # Log compression keeps the L1 gradient informative at low magnitudes;
        # raw linear magnitudes let the KL term collapse the posterior.
        return torch.log(torch.clamp(self.fb @ spec, min=1e-5))
