"""Plug-and-play adapters for few-shot voice adaptation on a frozen backbone.

Every adapter is a bottleneck residual branch (norm, down-projection, ReLU,
zero-initialized up-projection) attached at fixed host points: the coupling
hidden stacks or transformed halves of the timbre flow, the attention
projections of the phoneme encoder, and the conv blocks of the duration
predictor. Zero-initialization makes insertion a no-op; only the adapter
weights and a tunable speaker vector receive gradients during adaptation.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import dsp
from .config import ADAPTER_KINDS, ADAPTER_SCHEMES, Config
from .containers import ADAPTER_MAGIC, compute_fingerprint, read_container, write_container
from .errors import ContainerError, DataError, FingerprintMismatchError, NumericalError
from .model import Backbone, embed_audio, spectrogram_for
from .modules import ChannelLayerNorm
from .text_frontend import duration_loss, monotonic_alignment_search, text_to_phonemes
from .timbre import SpeakerEmbedding, _gaussian_log_density

ADAPTER_TARGETS = ("timbre_flow", "duration_predictor", "phoneme_encoder")
MAX_CONSECUTIVE_SKIPS = 25


@dataclass(frozen=True)
class AdapterConfig:
    """Where and how big the adapters are.

    `scheme` picks the host point inside each flow coupling (H-*: the hidden
    transform stack; X-*: the transformed half itself) and the wiring (\*-Res
    reads the host input, \*-Seq reads the host output). X-* schemes halve the
    reduction ratio so both families land near the same parameter budget.
    """

    scheme: str = "H-Res"
    kind: str = "conv"
    r: int = 8

    def __post_init__(self) -> None:
        if self.scheme not in ADAPTER_SCHEMES:
            raise DataError(f"unknown adapter scheme {self.scheme!r}")
        if self.kind not in ADAPTER_KINDS:
            raise DataError(f"unknown adapter kind {self.kind!r}")
        if self.r < 1:
            raise DataError("reduction ratio must be at least 1")
        if self.scheme.startswith("X") and self.r % 2 != 0:
            raise DataError("X-* schemes halve the ratio, so r must be even")

    @property
    def effective_r(self) -> int:
        return self.r // 2 if self.scheme.startswith("X") else self.r


class Adapter(nn.Module):
    """Bottleneck delta branch; identity contribution at initialization."""

    def __init__(self, channels: int, bottleneck: int, kind: str, token_layout: bool = False):
        super().__init__()
        if kind not in ADAPTER_KINDS:
            raise DataError(f"unknown adapter kind {kind!r}")
        if bottleneck < 1:
            raise DataError("adapter bottleneck collapsed to zero width")
        kernel = 3 if kind == "conv" else 1
        self.norm = ChannelLayerNorm(channels)
        self.down = nn.Conv1d(channels, bottleneck, kernel, padding=kernel // 2)
        self.up = nn.Conv1d(bottleneck, channels, kernel, padding=kernel // 2)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)
        self.kind = kind
        self.channels = channels
        self.bottleneck = bottleneck
        self.token_layout = token_layout

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.token_layout:
            x = x.transpose(1, 2)
        y = self.up(torch.relu(self.down(self.norm(x))))
        return y.transpose(1, 2) if self.token_layout else y


def adapter_param_count(channels: int, bottleneck: int, kind: str) -> int:
    """Closed-form size of one adapter: two projections plus norm and biases."""
    kernel = 3 if kind == "conv" else 1
    return 2 * kernel * channels * bottleneck + bottleneck + 3 * channels


def build_adapter(
    channels: int,
    acfg: AdapterConfig,
    kind: str | None = None,
    token_layout: bool = False,
) -> Adapter:
    e = acfg.effective_r
    if channels % e != 0:
        raise DataError(
            f"host width {channels} is not divisible by effective ratio {e}")
    return Adapter(channels, channels // e, kind or acfg.kind, token_layout)


def freeze_backbone(model: Backbone) -> None:
    for p in model.parameters():
        p.requires_grad_(False)


def insert_adapters(
    model: Backbone,
    acfg: AdapterConfig,
    targets: tuple[str, ...] = ADAPTER_TARGETS,
) -> None:
    """Attach fresh zero-initialized adapters at the requested host points.

    The backbone must already be frozen; insertion never changes what the
    model computes until the adapters are trained.
    """
    unknown = sorted(set(targets) - set(ADAPTER_TARGETS))
    if unknown:
        raise DataError(f"unknown adapter targets: {', '.join(unknown)}")
    if any(p.requires_grad for p in model.parameters()):
        raise DataError("freeze the backbone before inserting adapters")
    if "timbre_flow" in targets:
        for layer in model.flow.couplings:
            if acfg.scheme.startswith("H"):
                layer.hidden_adapter = build_adapter(layer.pre.out_channels, acfg)
            else:
                layer.half_adapter = build_adapter(layer.half, acfg)
            layer.adapter_scheme = acfg.scheme
    if "duration_predictor" in targets:
        dp = model.duration_predictor
        dp.block_adapters = nn.ModuleList(
            [build_adapter(conv.out_channels, acfg) for conv in dp.convs])
    if "phoneme_encoder" in targets:
        for block in model.phoneme_encoder.blocks:
            attn = block.attn
            width = attn.q_proj.in_features
            attn.q_adapter = build_adapter(width, acfg, kind="linear", token_layout=True)
            attn.k_adapter = build_adapter(width, acfg, kind="linear", token_layout=True)
            attn.v_adapter = build_adapter(width, acfg, kind="linear", token_layout=True)
    model.adapter_config = acfg


def remove_adapters(model: Backbone) -> None:
    for layer in model.flow.couplings:
        layer.hidden_adapter = None
        layer.half_adapter = None
        layer.adapter_scheme = None
    model.duration_predictor.block_adapters = nn.ModuleList()
    for block in model.phoneme_encoder.blocks:
        block.attn.q_adapter = None
        block.attn.k_adapter = None
        block.attn.v_adapter = None
    if hasattr(model, "adapter_config"):
        del model.adapter_config


def adapter_modules(model: Backbone) -> list[tuple[str, Adapter]]:
    return [(n, m) for n, m in model.named_modules() if isinstance(m, Adapter)]


def adapter_named_parameters(model: Backbone) -> list[tuple[str, nn.Parameter]]:
    out = []
    for name, mod in adapter_modules(model):
        for pn, p in mod.named_parameters():
            out.append((f"{name}.{pn}", p))
    return sorted(out, key=lambda kv: kv[0])


def backbone_named_arrays(model: Backbone) -> list[tuple[str, np.ndarray]]:
    """All parameters that are not adapter weights, as float32 arrays."""
    prefixes = tuple(n + "." for n, _ in adapter_modules(model))
    out = []
    for name, p in model.named_parameters():
        if prefixes and name.startswith(prefixes):
            continue
        out.append((name, p.detach().cpu().numpy().astype(np.float32)))
    return out


def backbone_fingerprint(model: Backbone) -> bytes:
    return compute_fingerprint(backbone_named_arrays(model))


def adaptive_speaker_embedding(
    backbone: Backbone, waves: list[dsp.Waveform],
) -> SpeakerEmbedding:
    """Average of per-utterance embeddings."""
    if not waves:
        raise DataError("need at least one reference waveform")
    vectors = [embed_audio(backbone, w).vector for w in waves]
    return SpeakerEmbedding(np.mean(vectors, axis=0))


@dataclass
class AdapterBundle:
    """Everything adaptation produced: adapter weights and the tuned voice."""

    adapter_config: AdapterConfig
    params: dict[str, np.ndarray]
    speaker_vector: np.ndarray
    backbone_fingerprint: bytes
    steps: int = 0

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()) + self.speaker_vector.size)


def _prepare_references(
    backbone: Backbone,
    items: list[tuple[str, dsp.Waveform]],
    g2p_command: str | None,
) -> list[dict]:
    """Posterior statistics and phoneme ids per reference, extracted once."""
    p = next(backbone.parameters())
    refs = []
    with torch.no_grad():
        for transcript, wave in items:
            phonemes = text_to_phonemes(transcript, g2p_command)
            lin = spectrogram_for(backbone, wave)
            spec = torch.as_tensor(lin.magnitudes.T[None], dtype=p.dtype, device=p.device)
            mean_q, log_std_q = backbone.mavae.posterior(spec)
            if mean_q.shape[2] < len(phonemes):
                raise DataError(
                    f"reference audio too short to align: {mean_q.shape[2]} frames "
                    f"for {len(phonemes)} phonemes")
            refs.append({
                "ids": torch.as_tensor(phonemes.ids[None], device=p.device),
                "mean_q": mean_q,
                "log_std_q": log_std_q,
            })
    if not refs:
        raise DataError("need at least one reference utterance")
    return refs


def _adapt_losses(
    backbone: Backbone,
    ref: dict,
    s_used: torch.Tensor,
    noise: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """One reference's latent-match and duration losses under `s_used`."""
    mean_q, log_std_q = ref["mean_q"], ref["log_std_q"]
    z = mean_q + torch.exp(log_std_q) * noise
    mean_p, log_scale_p, hidden = backbone.phoneme_encoder(ref["ids"])
    l_hat, logdet = backbone.flow.inverse(z, s_used)
    with torch.no_grad():
        ll = _frame_phoneme_log_lik(l_hat[0], mean_p[0], log_scale_p[0])
    durations = monotonic_alignment_search(ll.cpu().numpy())
    reps = torch.as_tensor(durations.durations, device=z.device)
    mean_f = torch.repeat_interleave(mean_p, reps, dim=1).transpose(1, 2)
    log_scale_f = torch.repeat_interleave(log_scale_p, reps, dim=1).transpose(1, 2)
    log_q = _gaussian_log_density(z, mean_q, log_std_q)
    log_p = _gaussian_log_density(l_hat, mean_f, log_scale_f)
    kl = (log_q - log_p - logdet).sum() / z.numel()
    pred_log = backbone.duration_predictor(hidden, s_used)
    dur = duration_loss(pred_log, reps.unsqueeze(0))
    return kl, dur


def _frame_phoneme_log_lik(
    l_hat: torch.Tensor, mean_p: torch.Tensor, log_scale_p: torch.Tensor,
) -> torch.Tensor:
    """[phonemes x frames] diagonal-Gaussian log-likelihoods, torch-side."""
    x = l_hat.T  # [T, D]
    inv_var = torch.exp(-2.0 * log_scale_p)
    const = (-0.5 * np.log(2.0 * np.pi) * x.shape[1]
             - log_scale_p.sum(dim=1, keepdim=True))
    quad = (x * x) @ inv_var.T - 2.0 * (x @ (mean_p * inv_var).T) \
        + (mean_p * mean_p * inv_var).sum(dim=1)
    return const - 0.5 * quad.T


def fine_grained_adapt(
    backbone: Backbone,
    items: list[tuple[str, dsp.Waveform]],
    cfg: Config,
    seed: int = 0,
    steps: int | None = None,
    g2p_command: str | None = None,
    tune_backbone: bool = False,
    eval_every: int | None = None,
    eval_fn=None,
) -> tuple[AdapterBundle, list[dict]]:
    """Tune adapters plus a speaker vector on (transcript, waveform) pairs.

    The backbone stays frozen: its parameters are bit-identical before and
    after, verified by fingerprint. `tune_backbone=True` is the comparison
    arm that instead unfreezes the generator and trains it directly; it
    returns an empty-params bundle that must not be saved. When `eval_fn`
    is given it is called as `eval_fn(step, speaker_vector)` before the
    first step, after every `eval_every` steps, and after the last one,
    with the tuned modules live on the backbone.
    """
    if steps is None:
        steps = cfg.adapt.adapt_steps
    if steps < 0:
        raise DataError("adaptation steps must be non-negative")
    acfg = AdapterConfig(cfg.adapt.scheme, cfg.adapt.kind, cfg.adapt.r)
    refs = _prepare_references(backbone, items, g2p_command)
    fp_before = backbone_fingerprint(backbone)
    with torch.no_grad():
        vecs = [backbone.speaker_encoder(r["mean_q"])[0] for r in refs]
        s_init = torch.stack(vecs).mean(dim=0)
    freeze_backbone(backbone)
    if tune_backbone:
        for mod in backbone.generator_modules():
            for p in mod.parameters():
                p.requires_grad_(True)
        tuned: list[nn.Parameter] = [
            p for m in backbone.generator_modules() for p in m.parameters()]
    else:
        remove_adapters(backbone)
        insert_adapters(backbone, acfg)
        tuned = []
        for _, p in adapter_named_parameters(backbone):
            p.requires_grad_(True)
            tuned.append(p)
    s_ada = nn.Parameter(s_init.clone())
    opt = torch.optim.AdamW(
        [*tuned, s_ada], lr=cfg.adapt.adapt_lr,
        betas=(cfg.train.beta1, cfg.train.beta2),
        weight_decay=cfg.train.weight_decay)
    rng = np.random.default_rng(seed)
    history: list[dict] = []
    consecutive_skips = 0

    def run_eval(done: int) -> None:
        if eval_fn is None:
            return
        with torch.no_grad():
            vec = s_ada.detach().cpu().numpy().astype(np.float32)
        eval_fn(done, vec)

    run_eval(0)
    for step in range(steps):
        ref = refs[int(rng.integers(len(refs)))]
        noise = torch.as_tensor(
            rng.standard_normal(ref["mean_q"].shape).astype(np.float32),
            dtype=ref["mean_q"].dtype)
        s_used = s_ada.unsqueeze(0)
        kl, dur = _adapt_losses(backbone, ref, s_used, noise)
        total = kl + dur
        if not torch.isfinite(total):
            consecutive_skips += 1
            warnings.warn(f"skipping adaptation step {step}: non-finite loss")
            if consecutive_skips > MAX_CONSECUTIVE_SKIPS:
                raise NumericalError(
                    f"{consecutive_skips} consecutive non-finite adaptation steps")
            opt.zero_grad(set_to_none=True)
            continue
        consecutive_skips = 0
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        history.append({
            "step": step,
            "kl": float(kl.detach()),
            "duration": float(dur.detach()),
            "total": float(total.detach()),
        })
        done = step + 1
        if eval_every and (done % eval_every == 0 or done == steps):
            run_eval(done)
    if not tune_backbone and backbone_fingerprint(backbone) != fp_before:
        raise RuntimeError("backbone parameters changed during adaptation")
    with torch.no_grad():
        final_vec = s_ada.detach().cpu().numpy().astype(np.float32)
    params = {} if tune_backbone else {
        name: p.detach().cpu().numpy().astype(np.float32)
        for name, p in adapter_named_parameters(backbone)
    }
    bundle = AdapterBundle(
        adapter_config=acfg,
        params=params,
        speaker_vector=final_vec,
        backbone_fingerprint=fp_before if not tune_backbone
        else backbone_fingerprint(backbone),
        steps=steps,
    )
    return bundle, history


def save_bundle(path, bundle: AdapterBundle) -> None:
    if not bundle.params:
        raise DataError("refusing to save a bundle without adapter weights")
    entries: dict[str, np.ndarray] = {
        f"adapter.{name}": arr for name, arr in bundle.params.items()}
    entries["speaker"] = bundle.speaker_vector.astype(np.float32)
    meta = {
        "scheme": bundle.adapter_config.scheme,
        "kind": bundle.adapter_config.kind,
        "r": bundle.adapter_config.r,
        "steps": bundle.steps,
    }
    entries["meta.config"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()
    write_container(path, ADAPTER_MAGIC, bundle.backbone_fingerprint, entries)


def load_bundle(path) -> AdapterBundle:
    magic, _, fingerprint, entries = read_container(path)
    if magic != ADAPTER_MAGIC:
        raise ContainerError("not an adapter bundle")
    if "meta.config" not in entries or "speaker" not in entries:
        raise ContainerError("adapter bundle is missing required entries")
    meta = json.loads(bytes(entries["meta.config"]).decode("utf-8"))
    acfg = AdapterConfig(meta["scheme"], meta["kind"], int(meta["r"]))
    params = {}
    for name, arr in entries.items():
        if name.startswith("adapter."):
            params[name[len("adapter."):]] = np.asarray(arr, dtype=np.float32)
        elif name not in ("meta.config", "speaker"):
            raise ContainerError(f"unexpected bundle entry {name!r}")
    if not params:
        raise ContainerError("adapter bundle holds no adapter weights")
    return AdapterBundle(
        adapter_config=acfg,
        params=params,
        speaker_vector=np.asarray(entries["speaker"], dtype=np.float32),
        backbone_fingerprint=fingerprint,
        steps=int(meta.get("steps", 0)),
    )


def apply_bundle(backbone: Backbone, bundle: AdapterBundle) -> SpeakerEmbedding:
    """Install saved adapters onto a backbone whose fingerprint matches."""
    fp = backbone_fingerprint(backbone)
    if fp != bundle.backbone_fingerprint:
        raise FingerprintMismatchError(
            "adapter bundle was tuned on a different backbone")
    freeze_backbone(backbone)
    remove_adapters(backbone)
    insert_adapters(backbone, bundle.adapter_config)
    current = dict(adapter_named_parameters(backbone))
    if set(current) != set(bundle.params):
        raise ContainerError("bundle parameter names do not match this model")
    with torch.no_grad():
        for name, arr in bundle.params.items():
            p = current[name]
            if tuple(p.shape) != arr.shape:
                raise ContainerError(
                    f"bundle entry {name!r} has shape {arr.shape}, "
                    f"expected {tuple(p.shape)}")
            p.copy_(torch.as_tensor(arr, dtype=p.dtype))
    return SpeakerEmbedding(bundle.speaker_vector)
