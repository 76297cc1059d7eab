"""Backbone assembly and frozen-weights inference paths.

The backbone bundles every trainable piece: the memory VAE, speaker encoder,
timbre flow, phoneme encoder, duration predictor, and both critics. Instant
synthesis conditions the flow on a speaker embedding pooled from reference
audio; adapted synthesis swaps in a tuned embedding and adapter deltas.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from . import dsp
from .alignment import gaussian_log_likelihood_matrix
from .config import Config, ModelConfig
from .errors import DataError
from .mavae import MemoryVAE
from .text_frontend import (
    DurationAssignment,
    DurationPredictor,
    PhonemeEncoder,
    PhonemeSequence,
    durations_from_log,
    load_symbols,
    monotonic_alignment_search,
    text_to_phonemes,
)
from .timbre import (
    LeakageDiscriminator,
    SpeakerEmbedding,
    SpeakerEncoder,
    TimbreFlow,
    TimbreResidualCritic,
)


class Backbone(nn.Module):
    """All model components behind one module tree."""

    def __init__(self, cfg: ModelConfig, num_symbols: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.num_symbols = num_symbols
        self.mavae = MemoryVAE(cfg)
        self.speaker_encoder = SpeakerEncoder(cfg.latent_dim, cfg.spk_channels, cfg.spk_dim)
        self.flow = TimbreFlow(cfg)
        self.phoneme_encoder = PhonemeEncoder(cfg, num_symbols)
        self.duration_predictor = DurationPredictor(
            cfg.enc_hidden, cfg.dur_hidden, cfg.dur_layers, cfg.spk_dim)
        self.pair_disc = LeakageDiscriminator(
            cfg.spk_dim, cfg.leakage_hidden, cfg.leakage_layers)
        self.timbre_critic = TimbreResidualCritic(cfg.latent_dim, cfg.spk_channels)

    def generator_modules(self) -> list[nn.Module]:
        return [self.mavae, self.speaker_encoder, self.flow,
                self.phoneme_encoder, self.duration_predictor]

    def discriminator_modules(self) -> list[nn.Module]:
        return [self.pair_disc, self.timbre_critic]


def build_backbone(cfg: Config, seed: int | None = None) -> Backbone:
    """Construct a backbone; seeding makes the random init reproducible."""
    if seed is not None:
        torch.manual_seed(seed)
    return Backbone(cfg.model, len(load_symbols()))


def spectrogram_for(backbone: Backbone, w: dsp.Waveform) -> dsp.LinearSpectrogram:
    """Analysis matching the backbone's config; resamples when rates differ."""
    cfg = backbone.cfg
    if w.sample_rate != cfg.sample_rate:
        w = dsp.resample(w, cfg.sample_rate)
    return dsp.stft(w, cfg.window_length, cfg.frame_shift, cfg.fft_size)


def embed_audio(backbone: Backbone, w: dsp.Waveform) -> SpeakerEmbedding:
    """Deterministic speaker embedding of a waveform via the posterior mean."""
    lin = spectrogram_for(backbone, w)
    p = next(backbone.parameters())
    with torch.no_grad():
        spec = torch.as_tensor(lin.magnitudes.T[None], dtype=p.dtype, device=p.device)
        mean, _ = backbone.mavae.posterior(spec)
        e = backbone.speaker_encoder(mean)
    return SpeakerEmbedding(e[0].cpu().numpy())


def synthesize(
    backbone: Backbone,
    text: str,
    speaker: SpeakerEmbedding,
    rng: np.random.Generator,
    noise_scale: float = 0.667,
    g2p_command: str | None = None,
) -> tuple[dsp.Waveform, DurationAssignment, PhonemeSequence]:
    """Text to waveform under a fixed speaker embedding.

    The only randomness is the prior noise drawn from `rng`, so a fixed seed
    gives a bit-identical waveform. Output length is
    sum(durations) * frame_shift samples.
    """
    phonemes = text_to_phonemes(text, g2p_command)
    p = next(backbone.parameters())
    with torch.no_grad():
        ids = torch.as_tensor(phonemes.ids[None], device=p.device)
        mean, log_scale, hidden = backbone.phoneme_encoder(ids)
        s = torch.as_tensor(speaker.vector[None], dtype=p.dtype, device=p.device)
        log_dur = backbone.duration_predictor(hidden, s)
        durations = durations_from_log(log_dur[0].cpu().numpy())
        reps = torch.as_tensor(durations.durations, device=p.device)
        mean_f = torch.repeat_interleave(mean, reps, dim=1).transpose(1, 2)
        scale_f = torch.exp(torch.repeat_interleave(log_scale, reps, dim=1)).transpose(1, 2)
        noise = torch.as_tensor(
            rng.standard_normal(mean_f.shape).astype(np.float32),
            dtype=p.dtype, device=p.device)
        l = mean_f + scale_f * noise * noise_scale
        z_hat, _ = backbone.flow.forward(l, s)
        m = backbone.mavae.memory(z_hat.transpose(1, 2)).transpose(1, 2)
        wav = backbone.mavae.decoder(m)
    samples = np.clip(wav[0, 0].cpu().numpy(), -1.0, 1.0)
    return dsp.Waveform(samples, backbone.cfg.sample_rate), durations, phonemes


def forced_align(
    backbone: Backbone,
    w: dsp.Waveform,
    text: str,
    speaker: SpeakerEmbedding,
    g2p_command: str | None = None,
) -> tuple[DurationAssignment, PhonemeSequence]:
    """Align audio frames to a transcript through the frozen model.

    Uses the posterior mean mapped to timbre-free space, scored against the
    phoneme prior; alignment itself is the monotonic search.
    """
    phonemes = text_to_phonemes(text, g2p_command)
    lin = spectrogram_for(backbone, w)
    if lin.num_frames < len(phonemes):
        raise DataError(
            f"audio has {lin.num_frames} frames but transcript needs {len(phonemes)}")
    p = next(backbone.parameters())
    with torch.no_grad():
        spec = torch.as_tensor(lin.magnitudes.T[None], dtype=p.dtype, device=p.device)
        mean_q, _ = backbone.mavae.posterior(spec)
        s = torch.as_tensor(speaker.vector[None], dtype=p.dtype, device=p.device)
        l_hat, _ = backbone.flow.inverse(mean_q, s)
        ids = torch.as_tensor(phonemes.ids[None], device=p.device)
        mean_p, log_scale_p, _ = backbone.phoneme_encoder(ids)
    ll = gaussian_log_likelihood_matrix(
        l_hat[0].T.cpu().numpy(), mean_p[0].cpu().numpy(), log_scale_p[0].cpu().numpy())
    return monotonic_alignment_search(ll), phonemes
