"""Backbone pre-training: losses, optimization, checkpoints, metrics.

One training step samples a (target, reference) utterance pair per batch
item, routes the target through posterior / flow / memory / decoder and the
reference through overlapped slicing and the speaker encoder, and optimizes
generator and discriminator parameter groups with separate AdamW instances.
All randomness is drawn from a single numpy generator whose state rides
along in checkpoints, which makes a resumed run bit-identical to an
uninterrupted one.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import dsp
from .config import Config
from .containers import CHECKPOINT_MAGIC, read_container, write_container
from .errors import ContainerError, DataError, NumericalError
from .manifest import read_manifest
from .mavae import TorchMel
from .model import Backbone, build_backbone
from .text_frontend import (
    duration_loss,
    load_symbols,
    monotonic_alignment_search,
    text_to_phonemes,
)
from .timbre import (
    _gaussian_log_density,
    leakage_losses,
    slice_bounds,
    timbre_residual_loss,
)

MAX_CONSECUTIVE_SKIPS = 25

CSV_COLUMNS = ("step", "recon", "duration", "kl", "leakage", "timbre",
               "total", "pair_disc", "lr", "skipped")


@dataclass
class TrainStepRecord:
    """Loss components of one optimization step; total is their direct sum."""

    step: int
    recon: float
    duration: float
    kl: float
    leakage: float
    timbre: float
    total: float
    pair_disc: float
    lr: float
    skipped: bool = False

    def components(self) -> tuple[float, ...]:
        return (self.recon, self.duration, self.kl, self.leakage, self.timbre)

    def csv_row(self) -> str:
        vals = [str(self.step)]
        vals += [repr(v) for v in (self.recon, self.duration, self.kl,
                                   self.leakage, self.timbre, self.total,
                                   self.pair_disc, self.lr)]
        vals.append("1" if self.skipped else "0")
        return ",".join(vals)


@dataclass
class _Item:
    utt_id: str
    speaker_id: str
    spec: torch.Tensor      # [1, bins, T]
    wav: torch.Tensor       # [1, samples]
    ids: torch.Tensor       # [1, phonemes]


def sample_pair(items: list, rng: np.random.Generator) -> tuple:
    """Distinct (target, reference) from one speaker's utterances.

    Falls back to target == reference with a warning when the speaker has a
    single utterance.
    """
    if not items:
        raise DataError("speaker has no utterances")
    if len(items) == 1:
        warnings.warn("speaker has one utterance; reference equals target")
        return items[0], items[0]
    i = int(rng.integers(len(items)))
    j = int(rng.integers(len(items) - 1))
    if j >= i:
        j += 1
    return items[i], items[j]


def _frame_phoneme_log_lik(
    l_hat: torch.Tensor, mean_p: torch.Tensor, log_scale_p: torch.Tensor,
) -> torch.Tensor:
    """[phonemes x frames] diagonal-Gaussian log-likelihoods."""
    x = l_hat.T  # [T, D]
    inv_var = torch.exp(-2.0 * log_scale_p)
    const = (-0.5 * np.log(2.0 * np.pi) * x.shape[1]
             - log_scale_p.sum(dim=1, keepdim=True))
    quad = (x * x) @ inv_var.T - 2.0 * (x @ (mean_p * inv_var).T) \
        + (mean_p * mean_p * inv_var).sum(dim=1)
    return const - 0.5 * quad.T


class Trainer:
    """Owns the model, data cache, optimizers, and the step loop."""

    def __init__(self, cfg: Config, manifest_path: str | Path,
                 audio_base: str | Path | None = None):
        cfg.validate()
        self.cfg = cfg
        self.model = build_backbone(cfg, seed=cfg.train.seed)
        self.torch_mel = TorchMel(cfg.model)
        self.rng = np.random.default_rng(cfg.train.seed)
        self.step = 0
        self.skipped = 0
        self._consecutive_skips = 0
        self.items_by_speaker: dict[str, list[_Item]] = {}
        self._load_dataset(Path(manifest_path), audio_base)
        self.gen_params = [p for m in self.model.generator_modules()
                           for p in m.parameters()]
        self.disc_params = [p for m in self.model.discriminator_modules()
                            for p in m.parameters()]
        betas = (cfg.train.beta1, cfg.train.beta2)
        self.opt_gen = torch.optim.AdamW(
            self.gen_params, lr=cfg.train.lr, betas=betas,
            weight_decay=cfg.train.weight_decay)
        self.opt_disc = torch.optim.AdamW(
            self.disc_params, lr=cfg.train.lr, betas=betas,
            weight_decay=cfg.train.weight_decay)

    def _load_dataset(self, manifest_path: Path, audio_base: str | Path | None) -> None:
        base = Path(audio_base) if audio_base is not None else manifest_path.parent
        utts = read_manifest(manifest_path)
        if not utts:
            raise DataError(f"manifest {manifest_path} lists no utterances")
        mcfg = self.cfg.model
        for u in sorted(utts, key=lambda u: u.utt_id):
            w = dsp.load_wav(u.audio_path(base))
            if w.sample_rate != mcfg.sample_rate:
                w = dsp.resample(w, mcfg.sample_rate)
            lin = dsp.stft(w, mcfg.window_length, mcfg.frame_shift, mcfg.fft_size)
            phonemes = text_to_phonemes(u.transcript)
            if lin.num_frames < len(phonemes):
                raise DataError(
                    f"utterance {u.utt_id}: {lin.num_frames} frames cannot "
                    f"cover {len(phonemes)} phonemes")
            if lin.num_frames < 4:
                raise DataError(f"utterance {u.utt_id} is too short to slice")
            item = _Item(
                utt_id=u.utt_id,
                speaker_id=u.speaker_id,
                spec=torch.as_tensor(lin.magnitudes.T[None], dtype=torch.float32),
                wav=torch.as_tensor(w.samples[None], dtype=torch.float32),
                ids=torch.as_tensor(phonemes.ids[None]),
            )
            self.items_by_speaker.setdefault(u.speaker_id, []).append(item)
        self.speakers = sorted(self.items_by_speaker)

    # ------------------------------------------------------------------ losses

    def _noise_like(self, t: torch.Tensor) -> torch.Tensor:
        return torch.as_tensor(
            self.rng.standard_normal(tuple(t.shape)).astype(np.float32),
            dtype=t.dtype)

    def _pair_losses(self, target: _Item, ref: _Item) -> dict[str, torch.Tensor]:
        m = self.model
        tcfg = self.cfg.train
        mean_t, log_std_t = m.mavae.posterior(target.spec)
        z_t = mean_t + torch.exp(log_std_t) * self._noise_like(mean_t)
        mean_r, log_std_r = m.mavae.posterior(ref.spec)
        z_r = mean_r + torch.exp(log_std_r) * self._noise_like(mean_r)

        # overlapped slices of the reference latent -> two speaker views
        ratio = float(self.rng.uniform(tcfg.overlap_min, tcfg.overlap_max))
        first_end, second_start, _ = slice_bounds(z_r.shape[2], ratio)
        s1 = m.speaker_encoder(z_r[:, :, :first_end])
        s2 = m.speaker_encoder(z_r[:, :, second_start:])
        with torch.no_grad():
            s_gt = m.speaker_encoder(z_t)
        s_cond = s1 if self.rng.random() < 0.5 else s2

        # phoneme prior and alignment of the timbre-free latent
        mean_p, log_scale_p, hidden = m.phoneme_encoder(target.ids)
        l_hat, logdet = m.flow.inverse(z_t, s_cond)
        ll = _frame_phoneme_log_lik(
            l_hat.detach()[0], mean_p.detach()[0], log_scale_p.detach()[0])
        durations = monotonic_alignment_search(ll.cpu().numpy())
        reps = torch.as_tensor(durations.durations)
        mean_f = torch.repeat_interleave(mean_p, reps, dim=1).transpose(1, 2)
        log_scale_f = torch.repeat_interleave(log_scale_p, reps, dim=1).transpose(1, 2)

        log_q = _gaussian_log_density(z_t, mean_t, log_std_t)
        log_p = _gaussian_log_density(l_hat, mean_f, log_scale_f)
        kl = (log_q - log_p - logdet).sum() / z_t.numel()

        dur = duration_loss(m.duration_predictor(hidden, s_cond), reps.unsqueeze(0))

        # reconstruction on a random crop of the target
        t_frames = z_t.shape[2]
        seg = min(tcfg.segment_frames, t_frames)
        off = int(self.rng.integers(t_frames - seg + 1))
        z_seg = z_t[:, :, off:off + seg]
        m_seg = m.mavae.memory(z_seg.transpose(1, 2)).transpose(1, 2)
        w_hat = m.mavae.decoder(m_seg)
        hop = self.cfg.model.frame_shift
        wav_seg = target.wav[:, off * hop: off * hop + seg * hop]
        recon = torch.mean(torch.abs(
            self.torch_mel(w_hat[:, 0]) - self.torch_mel(wav_seg)))

        # adversaries: timbre residue critic and pair discriminator
        l_real = (mean_f + torch.exp(log_scale_f) * self._noise_like(mean_f)).detach()
        timbre = timbre_residual_loss(
            m.timbre_critic, l_real, m.flow, z_t, s_cond, tcfg.lambda_d)
        pair_disc, leakage = leakage_losses(m.pair_disc, s_gt, s1, s2, tcfg.lambda_se)

        return {"recon": recon, "duration": dur, "kl": kl,
                "leakage": leakage, "timbre": timbre, "pair_disc": pair_disc}

    # ------------------------------------------------------------------- steps

    def current_lr(self) -> float:
        return self.cfg.train.lr * self.cfg.train.lr_decay ** self.step

    def train_step(self) -> TrainStepRecord:
        tcfg = self.cfg.train
        self.model.train()
        self.opt_gen.zero_grad(set_to_none=True)
        self.opt_disc.zero_grad(set_to_none=True)
        sums = dict.fromkeys(
            ("recon", "duration", "kl", "leakage", "timbre", "pair_disc"), 0.0)
        finite = True
        for _ in range(tcfg.batch_size):
            speaker = self.speakers[int(self.rng.integers(len(self.speakers)))]
            target, ref = sample_pair(self.items_by_speaker[speaker], self.rng)
            losses = self._pair_losses(target, ref)
            # logged recon stays the raw L1; only the objective is weighted
            item_total = (sum(losses.values())
                          + (tcfg.lambda_re - 1.0) * losses["recon"])
            if not torch.isfinite(item_total):
                finite = False
                break
            (item_total / tcfg.batch_size).backward()
            for k, v in losses.items():
                sums[k] += float(v.detach()) / tcfg.batch_size
        lr = self.current_lr()
        if finite:
            self._consecutive_skips = 0
            for group in self.opt_gen.param_groups:
                group["lr"] = lr
            for group in self.opt_disc.param_groups:
                group["lr"] = lr
            self.opt_gen.step()
            self.opt_disc.step()
        else:
            self.skipped += 1
            self._consecutive_skips += 1
            warnings.warn(f"skipping step {self.step}: non-finite loss")
            if self._consecutive_skips > MAX_CONSECUTIVE_SKIPS:
                raise NumericalError(
                    f"{self._consecutive_skips} consecutive non-finite steps")
            self.opt_gen.zero_grad(set_to_none=True)
            self.opt_disc.zero_grad(set_to_none=True)
        rec = TrainStepRecord(
            step=self.step,
            recon=sums["recon"], duration=sums["duration"], kl=sums["kl"],
            leakage=sums["leakage"], timbre=sums["timbre"],
            total=tcfg.lambda_re * sums["recon"] + sums["duration"]
            + sums["kl"] + sums["leakage"] + sums["timbre"],
            pair_disc=sums["pair_disc"], lr=lr, skipped=not finite)
        self.step += 1
        return rec

    def train(
        self,
        num_steps: int,
        csv_path: str | Path | None = None,
        checkpoint_dir: str | Path | None = None,
        log=None,
    ) -> list[TrainStepRecord]:
        records = []
        csv_file = None
        if csv_path is not None:
            path = Path(csv_path)
            new = not path.exists() or path.stat().st_size == 0
            csv_file = open(path, "a", encoding="utf-8")
            if new:
                csv_file.write(",".join(CSV_COLUMNS) + "\n")
        try:
            for i in range(num_steps):
                rec = self.train_step()
                records.append(rec)
                if csv_file is not None:
                    csv_file.write(rec.csv_row() + "\n")
                    csv_file.flush()
                if log is not None and (rec.step % self.cfg.train.log_every == 0
                                        or i == num_steps - 1):
                    log(f"step {rec.step}: total {rec.total:.4f} "
                        f"(recon {rec.recon:.4f} dur {rec.duration:.4f} "
                        f"kl {rec.kl:.4f} leak {rec.leakage:.4f} "
                        f"timbre {rec.timbre:.4f}) lr {rec.lr:.3e}")
                if (checkpoint_dir is not None
                        and self.step % self.cfg.train.checkpoint_every == 0):
                    ckpt = Path(checkpoint_dir) / f"step_{self.step:08d}.ckpt"
                    save_checkpoint(self, ckpt)
        finally:
            if csv_file is not None:
                csv_file.close()
        return records

    # ------------------------------------------------------------- persistence

    def _optimizer_entries(self, opt: torch.optim.AdamW, prefix: str,
                           params: list[nn.Parameter]) -> dict[str, np.ndarray]:
        entries: dict[str, np.ndarray] = {}
        for i, p in enumerate(params):
            state = opt.state.get(p)
            if not state:
                continue
            entries[f"{prefix}.{i}.step"] = np.array(
                [float(state["step"])], dtype=np.float64)
            for key in ("exp_avg", "exp_avg_sq"):
                entries[f"{prefix}.{i}.{key}"] = (
                    state[key].detach().cpu().numpy().astype(np.float32))
        return entries

    def _restore_optimizer(self, opt: torch.optim.AdamW, prefix: str,
                           params: list[nn.Parameter],
                           entries: dict[str, np.ndarray]) -> None:
        for i, p in enumerate(params):
            key = f"{prefix}.{i}.step"
            if key not in entries:
                continue
            opt.state[p] = {
                "step": torch.tensor(float(entries[key][0])),
                "exp_avg": torch.as_tensor(
                    entries[f"{prefix}.{i}.exp_avg"], dtype=p.dtype),
                "exp_avg_sq": torch.as_tensor(
                    entries[f"{prefix}.{i}.exp_avg_sq"], dtype=p.dtype),
            }


def save_checkpoint(trainer: Trainer, path: str | Path) -> None:
    """Model, optimizer moments, RNG state, config, and symbol table."""
    model_arrays = [(f"model.{n}", p.detach().cpu().numpy().astype(np.float32))
                    for n, p in trainer.model.named_parameters()]
    entries: dict[str, np.ndarray] = dict(model_arrays)
    entries.update(trainer._optimizer_entries(
        trainer.opt_gen, "opt.gen", trainer.gen_params))
    entries.update(trainer._optimizer_entries(
        trainer.opt_disc, "opt.disc", trainer.disc_params))
    entries["meta.step"] = np.array([trainer.step], dtype=np.int64)
    entries["meta.skipped"] = np.array([trainer.skipped], dtype=np.int64)
    entries["meta.rng"] = _json_entry(trainer.rng.bit_generator.state)
    entries["meta.config"] = _json_entry(trainer.cfg.to_flat_dict())
    entries["meta.symbols"] = np.frombuffer(
        "\n".join(load_symbols()).encode("utf-8"), dtype=np.uint8).copy()
    from .adapters import backbone_fingerprint
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    write_container(path, CHECKPOINT_MAGIC,
                    backbone_fingerprint(trainer.model), entries)


def _json_entry(obj) -> np.ndarray:
    return np.frombuffer(
        json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def _entry_json(arr: np.ndarray):
    return json.loads(bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8"))


def load_checkpoint_entries(path: str | Path) -> tuple[bytes, dict[str, np.ndarray]]:
    magic, _, fingerprint, entries = read_container(path)
    if magic != CHECKPOINT_MAGIC:
        raise ContainerError("not a training checkpoint")
    for required in ("meta.step", "meta.config", "meta.rng"):
        if required not in entries:
            raise ContainerError(f"checkpoint is missing {required!r}")
    return fingerprint, entries


def _restore_model(model: Backbone, entries: dict[str, np.ndarray]) -> None:
    saved = {n[len("model."):]: a for n, a in entries.items()
             if n.startswith("model.")}
    current = dict(model.named_parameters())
    if set(saved) != set(current):
        missing = sorted(set(current) - set(saved))[:3]
        extra = sorted(set(saved) - set(current))[:3]
        raise ContainerError(
            f"checkpoint parameters do not match the model "
            f"(missing {missing}, unexpected {extra})")
    with torch.no_grad():
        for name, arr in saved.items():
            p = current[name]
            if tuple(p.shape) != arr.shape:
                raise ContainerError(
                    f"checkpoint entry {name!r} has shape {arr.shape}, "
                    f"expected {tuple(p.shape)}")
            p.copy_(torch.as_tensor(arr, dtype=p.dtype))


def load_backbone(path: str | Path) -> tuple[Backbone, Config, int]:
    """Rebuild a frozen-ready backbone from a checkpoint."""
    _, entries = load_checkpoint_entries(path)
    cfg = Config.from_flat_dict(_entry_json(entries["meta.config"]))
    if "meta.symbols" in entries:
        stored = bytes(np.asarray(entries["meta.symbols"], dtype=np.uint8)).decode("utf-8")
        if tuple(stored.split("\n")) != load_symbols():
            raise DataError("checkpoint was trained with a different symbol table")
    model = build_backbone(cfg)
    _restore_model(model, entries)
    return model, cfg, int(entries["meta.step"][0])


def resume_trainer(path: str | Path, manifest_path: str | Path,
                   audio_base: str | Path | None = None) -> Trainer:
    """Trainer whose next step continues the checkpointed run bit-exactly."""
    _, entries = load_checkpoint_entries(path)
    cfg = Config.from_flat_dict(_entry_json(entries["meta.config"]))
    trainer = Trainer(cfg, manifest_path, audio_base)
    _restore_model(trainer.model, entries)
    trainer._restore_optimizer(trainer.opt_gen, "opt.gen",
                               trainer.gen_params, entries)
    trainer._restore_optimizer(trainer.opt_disc, "opt.disc",
                               trainer.disc_params, entries)
    state = _entry_json(entries["meta.rng"])
    trainer.rng.bit_generator.state = state
    trainer.step = int(entries["meta.step"][0])
    if "meta.skipped" in entries:
        trainer.skipped = int(entries["meta.skipped"][0])
    return trainer
