"""Timbre conversion stack: speaker embeddings, leakage suppression, and the
invertible flow between timbre-bearing latents and timbre-free phoneme space.

Gradient routing contracts enforced here rather than in the trainer:
  - the pair discriminator's own update loss sees only detached embeddings;
  - the embedding-side fooling loss runs the discriminator with detached
    parameters (functional call), so its gradients reach the speaker encoder
    and nothing else;
  - the timbre critic's fake branch passes through gradient reversal, so one
    backward pass descends the critic and ascends the flow simultaneously.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import ModelConfig
from .errors import DataError
from .mavae import LatentSequence, PosteriorParams
from .modules import (
    AttentiveStatsPooling,
    ChannelLayerNorm,
    GatedConvStack,
    Res2Block,
    grl,
)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class SpeakerEmbedding:
    """Finite, nonzero speaker vector; scale is carried as produced."""

    vector: np.ndarray

    def __post_init__(self) -> None:
        self.vector = np.asarray(self.vector, dtype=np.float32)
        if self.vector.ndim != 1:
            raise DataError("speaker embedding must be a 1-D vector")
        norm = float(np.linalg.norm(self.vector))
        if not np.isfinite(norm) or norm == 0.0:
            raise DataError("speaker embedding must be finite and nonzero")

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


@dataclass
class SlicePair:
    """Two overlapping slices of one latent sequence."""

    slice1: LatentSequence
    slice2: LatentSequence
    overlap_frames: int

    def __post_init__(self) -> None:
        if self.overlap_frames < 1:
            raise DataError("slices must overlap by at least one frame")


def slice_bounds(num_frames: int, ratio: float) -> tuple[int, int, int]:
    """(first slice end, second slice start, overlap) for a T-frame sequence.

    overlap = round(ratio * T); the first slice covers [0, ceil((T+overlap)/2))
    and the second starts overlap frames before that end, running to T.
    """
    if num_frames < 4:
        raise DataError(f"need at least 4 frames to slice, got {num_frames}")
    overlap = round(ratio * num_frames)
    if overlap < 1:
        raise DataError(
            f"sequence of {num_frames} frames too short for overlap ratio {ratio:.3f}")
    first_end = (num_frames + overlap + 1) // 2
    return first_end, first_end - overlap, overlap


def slice_reference(
    z: LatentSequence,
    rng: np.random.Generator,
    overlap_ratio: float | None = None,
    ratio_range: tuple[float, float] = (0.2, 0.4),
) -> SlicePair:
    """Split a latent sequence into two overlapping halves.

    With T frames and ratio v: overlap = round(v*T), first slice covers
    [0, ceil((T+overlap)/2)), second starts overlap frames earlier than the
    first slice's end and runs to T. The ratio is drawn uniformly from
    `ratio_range` when not fixed.
    """
    ratio = float(rng.uniform(*ratio_range)) if overlap_ratio is None else float(overlap_ratio)
    first_end, second_start, overlap = slice_bounds(z.num_frames, ratio)
    return SlicePair(
        slice1=LatentSequence(z.values[:first_end]),
        slice2=LatentSequence(z.values[second_start:]),
        overlap_frames=overlap,
    )


class SpeakerEncoder(nn.Module):
    """Multi-scale conv blocks with attentive pooling and a two-layer head."""

    def __init__(self, latent_dim: int, channels: int, spk_dim: int):
        super().__init__()
        self.stem = nn.Conv1d(latent_dim, channels, 5, padding=2)
        self.stem_norm = ChannelLayerNorm(channels)
        self.blocks = nn.ModuleList([
            Res2Block(channels, 3, dilation=2),
            Res2Block(channels, 3, dilation=3),
        ])
        self.pool = AttentiveStatsPooling(channels)
        # No bias on the output layer and a zero-centered hidden activation:
        # a constant offset shared by every embedding would dominate cosine
        # similarity, and rectified hidden units would manufacture one.
        self.head = nn.Sequential(
            nn.Linear(2 * channels, channels),
            nn.Tanh(),
            nn.Linear(channels, spk_dim, bias=False),
        )
        nn.init.orthogonal_(self.head[0].weight, gain=math.sqrt(2.0))
        nn.init.orthogonal_(self.head[2].weight)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """z [B, latent, T] -> embeddings [B, spk_dim].

        Outputs are deliberately not length-normalized: projecting onto the
        unit sphere lets a growing constant component squeeze out the
        input-dependent variation, which flattens every embedding toward one
        point. Cosine metrics normalize at comparison time instead.
        """
        h = F.relu(self.stem_norm(self.stem(z)))
        for block in self.blocks:
            h = block(h)
        return self.head(self.pool(h))


def speaker_encode(encoder: SpeakerEncoder, z: LatentSequence) -> SpeakerEmbedding:
    """Pool a latent sequence of any length to one speaker vector."""
    if z.num_frames < 1:
        raise DataError("need at least one frame to embed")
    p = next(encoder.parameters())
    with torch.no_grad():
        e = encoder(torch.as_tensor(z.values.T[None], dtype=p.dtype, device=p.device))
    return SpeakerEmbedding(e[0].cpu().numpy())


class LeakageDiscriminator(nn.Module):
    """Feedforward scorer of concatenated embedding pairs, unsquashed output.

    Each embedding in the pair is length-normalized before scoring: the
    discriminator judges the directional structure of the pair, so inflating
    embedding norms can never buy a better fooling score.
    """

    def __init__(self, spk_dim: int, hidden: int = 256, num_layers: int = 3):
        super().__init__()
        self.spk_dim = spk_dim
        layers: list[nn.Module] = [nn.Linear(2 * spk_dim, hidden), nn.LeakyReLU(0.2)]
        for _ in range(num_layers - 2):
            layers += [nn.Linear(hidden, hidden), nn.LeakyReLU(0.2)]
        layers.append(nn.Linear(hidden, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, pair: torch.Tensor) -> torch.Tensor:
        if pair.shape[-1] != self.net[0].in_features:
            raise DataError(
                f"pair dim {pair.shape[-1]} != discriminator input {self.net[0].in_features}")
        a, b = pair.split(self.spk_dim, dim=-1)
        pair = torch.cat([F.normalize(a, dim=-1), F.normalize(b, dim=-1)], dim=-1)
        return self.net(pair).squeeze(-1)


def leakage_losses(
    disc: LeakageDiscriminator,
    s_gt: torch.Tensor,
    s_ref1: torch.Tensor,
    s_ref2: torch.Tensor,
    lambda_se: float,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pair-discriminator loss and the embedding-side fooling loss.

    disc_loss = (D(s_gt + s_ref2) - 1)^2 + D(s_ref1 + s_ref2)^2 on detached
    embeddings; fool_loss = lambda_se * (D(s_ref1 + s_ref2) - 1)^2 through
    a parameter-detached discriminator, so only the embeddings get gradients.
    """
    if not (s_gt.shape == s_ref1.shape == s_ref2.shape):
        raise DataError("speaker embeddings must share one shape")
    real = disc(torch.cat([s_gt.detach(), s_ref2.detach()], dim=-1))
    mixed = disc(torch.cat([s_ref1.detach(), s_ref2.detach()], dim=-1))
    disc_loss = ((real - 1.0) ** 2).mean() + (mixed ** 2).mean()

    frozen = {k: v.detach() for k, v in disc.named_parameters()}
    fooled = torch.func.functional_call(
        disc, frozen, torch.cat([s_ref1, s_ref2], dim=-1))
    fool_loss = lambda_se * ((fooled - 1.0) ** 2).mean()
    return disc_loss, fool_loss


class CouplingLayer(nn.Module):
    """Affine coupling: transform half the channels as a function of the rest.

    The transform net ends in a zero-initialized projection, so a fresh layer
    is the identity with zero log-determinant. Adapter slots (set externally)
    default to None and add nothing.
    """

    def __init__(self, channels: int, hidden: int, num_layers: int, spk_dim: int):
        super().__init__()
        if channels % 2 != 0:
            raise DataError("coupling needs an even channel count")
        self.half = channels // 2
        self.pre = nn.Conv1d(self.half, hidden, 1)
        self.stack = GatedConvStack(hidden, num_layers, kernel=5, cond_dim=spk_dim)
        self.proj = nn.Conv1d(hidden, channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)
        self.hidden_adapter: nn.Module | None = None   # H-* schemes
        self.half_adapter: nn.Module | None = None     # X-* schemes
        self.adapter_scheme: str | None = None

    def _transform_params(
        self, x0: torch.Tensor, s: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        h_in = self.pre(x0)
        h = self.stack(h_in, cond=s)
        if self.hidden_adapter is not None:
            src = h_in if self.adapter_scheme.endswith("Res") else h
            h = h + self.hidden_adapter(src)
        shift, log_scale = self.proj(h).chunk(2, dim=1)
        return shift, log_scale

    def forward(
        self, x: torch.Tensor, s: torch.Tensor, reverse: bool = False,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (output, per-frame log-det of the direction computed)."""
        x0, x1 = x.chunk(2, dim=1)
        shift, log_scale = self._transform_params(x0, s)
        if not reverse:
            y1 = x1 * torch.exp(log_scale) + shift
            logdet = log_scale.sum(dim=1)
        else:
            y1 = (x1 - shift) * torch.exp(-log_scale)
            logdet = -log_scale.sum(dim=1)
        if self.half_adapter is not None:
            src = x1 if self.adapter_scheme.endswith("Res") else y1
            y1 = y1 + self.half_adapter(src)
        return torch.cat([x0, y1], dim=1), logdet


class TimbreFlow(nn.Module):
    """Stack of affine couplings with channel flips in between."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.couplings = nn.ModuleList([
            CouplingLayer(cfg.latent_dim, cfg.flow_hidden, 2, cfg.spk_dim)
            for _ in range(cfg.flow_layers)
        ])
        self.channels = cfg.latent_dim

    def forward(self, x: torch.Tensor, s: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Timbre-free toward timbre-bearing; returns (output, per-frame log-det)."""
        logdet = torch.zeros(x.shape[0], x.shape[2], dtype=x.dtype, device=x.device)
        for layer in self.couplings:
            x, ld = layer(x, s)
            logdet = logdet + ld
            x = torch.flip(x, dims=[1])
        return x, logdet

    def inverse(self, z: torch.Tensor, s: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Exact inverse of forward; returns (output, per-frame log-det)."""
        logdet = torch.zeros(z.shape[0], z.shape[2], dtype=z.dtype, device=z.device)
        for layer in reversed(self.couplings):
            z = torch.flip(z, dims=[1])
            z, ld = layer(z, s, reverse=True)
            logdet = logdet + ld
        return z, logdet


def _seq_to_torch(x: LatentSequence, module: nn.Module) -> torch.Tensor:
    p = next(module.parameters())
    return torch.as_tensor(x.values.T[None], dtype=p.dtype, device=p.device)


def _emb_to_torch(s: SpeakerEmbedding, module: nn.Module) -> torch.Tensor:
    p = next(module.parameters())
    return torch.as_tensor(s.vector[None], dtype=p.dtype, device=p.device)


def flow_forward(flow: TimbreFlow, l: LatentSequence, s: SpeakerEmbedding) -> LatentSequence:
    """Map a timbre-free sequence into timbre-bearing latent space."""
    with torch.no_grad():
        out, _ = flow.forward(_seq_to_torch(l, flow), _emb_to_torch(s, flow))
    return LatentSequence(out[0].T.cpu().numpy())


def flow_inverse(
    flow: TimbreFlow, z: LatentSequence, s: SpeakerEmbedding,
) -> tuple[LatentSequence, np.ndarray]:
    """Map latents to timbre-free space; also return per-frame log-det."""
    with torch.no_grad():
        out, logdet = flow.inverse(_seq_to_torch(z, flow), _emb_to_torch(s, flow))
    return LatentSequence(out[0].T.cpu().numpy()), logdet[0].cpu().numpy()


def _gaussian_log_density(x: torch.Tensor, mean: torch.Tensor, log_std: torch.Tensor) -> torch.Tensor:
    """Per-frame diagonal Gaussian log density, summed over channels; [B, T]."""
    z = (x - mean) * torch.exp(-log_std)
    return (-0.5 * z * z - log_std - 0.5 * LOG_2PI).sum(dim=1)


def kl_loss_torch(
    mean_q: torch.Tensor,
    log_std_q: torch.Tensor,
    z: torch.Tensor,
    mean_p: torch.Tensor,
    log_std_p: torch.Tensor,
    flow: TimbreFlow,
    s: torch.Tensor,
) -> torch.Tensor:
    """Sampled KL between the posterior and the flow-transported prior.

    Averages [log q(z) - log p(inverse(z)) - log_det] over batch, frames and
    latent dimensions; all tensors are [B, C, T] except s [B, spk_dim].
    """
    if z.shape != mean_p.shape or z.shape != mean_q.shape:
        raise DataError("posterior, sample, and prior must be frame-aligned")
    l_hat, logdet = flow.inverse(z, s)
    log_q = _gaussian_log_density(z, mean_q, log_std_q)
    log_p = _gaussian_log_density(l_hat, mean_p, log_std_p)
    per_frame = log_q - log_p - logdet
    return per_frame.sum() / z.numel()


def kl_loss(
    flow: TimbreFlow,
    post: PosteriorParams,
    z: LatentSequence,
    prior_mean: np.ndarray,
    prior_log_scale: np.ndarray,
    s: SpeakerEmbedding,
) -> float:
    """Numpy-facing sampled KL; prior statistics must be frame-level [T x D]."""
    if z.values.shape != post.mean.shape or z.values.shape != np.shape(prior_mean):
        raise DataError("posterior, sample, and prior must be frame-aligned")
    p = next(flow.parameters())
    as_t = lambda a: torch.as_tensor(
        np.asarray(a, dtype=np.float32).T[None], dtype=p.dtype, device=p.device)
    with torch.no_grad():
        val = kl_loss_torch(
            as_t(post.mean), as_t(post.log_std), as_t(z.values),
            as_t(prior_mean), as_t(prior_log_scale),
            flow, _emb_to_torch(s, flow))
    return float(val)


class TimbreResidualCritic(nn.Module):
    """Utterance-level critic over latent sequences: multi-scale conv blocks,
    attentive statistics pooling, one unsquashed logit."""

    def __init__(self, latent_dim: int, channels: int):
        super().__init__()
        self.stem = nn.Conv1d(latent_dim, channels, 5, padding=2)
        self.stem_norm = ChannelLayerNorm(channels)
        self.blocks = nn.ModuleList([
            Res2Block(channels, 3, dilation=2),
            Res2Block(channels, 3, dilation=3),
        ])
        self.pool = AttentiveStatsPooling(channels)
        self.out = nn.Linear(2 * channels, 1)

    def forward(self, l: torch.Tensor) -> torch.Tensor:
        """l [B, latent, T] -> scores [B]."""
        h = F.relu(self.stem_norm(self.stem(l)))
        for block in self.blocks:
            h = block(h)
        return self.out(self.pool(h)).squeeze(-1)


def timbre_residual_loss(
    critic: TimbreResidualCritic,
    l_real: torch.Tensor,
    flow: TimbreFlow,
    z: torch.Tensor,
    s: torch.Tensor,
    lambda_d: float,
) -> torch.Tensor:
    """Least-squares critic loss with gradient reversal on the flow branch.

    One backward pass gives the critic its descent gradient and the flow the
    negated, lambda-scaled gradient. The real branch is detached, and the
    fake branch recomputes the inverse transform from detached inputs so the
    reversed gradient reaches only the flow's own parameters: spilling it
    into the posterior or speaker encoder would teach them to scrub exactly
    the voice information they exist to carry.
    """
    real_score = critic(l_real.detach())
    l_fake, _ = flow.inverse(z.detach(), s.detach())
    fake_score = critic(grl(l_fake, lambda_d))
    return ((real_score - 1.0) ** 2).mean() + (fake_score ** 2).mean()
