"""Command-line entry point for the full workflow.

Subcommands: preprocess (corpus pipeline), pretrain (backbone training),
adapt (fine-grained speaker adaptation), synth (instant or adapted
synthesis), eval (similarity/WER reports), sweep (adapter grid study).
Every run logs its resolved configuration and seed. Exit codes: 0 success,
1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import shutil
import sys
from pathlib import Path

import numpy as np

from . import dsp
from .adapters import (
    apply_bundle,
    fine_grained_adapt,
    load_bundle,
    save_bundle,
)
from .config import ADAPTER_KINDS, ADAPTER_SCHEMES, Config, load_config
from .corpus import (
    DEFAULT_ADAPT_SECONDS,
    DEFAULT_TARGET_RATE,
    DEFAULT_TEST_UTTERANCES,
    STAGES,
    run_pipeline,
)
from .errors import NumericalError, UsageError, UsatError
from .evaluation import (
    evaluate_run,
    external_embedder,
    internal_embedder,
    smcs,
    svr,
    write_report,
)
from .manifest import Utterance, read_manifest
from .model import Backbone, embed_audio, synthesize
from .timbre import SpeakerEmbedding
from .trainer import Trainer, load_backbone, resume_trainer, save_checkpoint

SWEEP_CSV_COLUMNS = ("scheme", "kind", "r", "duration_seconds", "step",
                     "smcs_mean", "svr_percent")


def _log(msg: str) -> None:
    print(f"[usat] {msg}", flush=True)


def _echo_config(cfg: Config, seed: int) -> None:
    """Resolved configuration and seed, one line per key."""
    for key, value in sorted(cfg.to_flat_dict().items()):
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        _log(f"config {key} = {value}")
    _log(f"seed = {seed}")


def _workpath(args: argparse.Namespace, value: str | Path) -> Path:
    p = Path(value)
    return p if p.is_absolute() else Path(args.workdir) / p


def _load_references(
    manifest_path: Path, seconds: float | None,
) -> list[tuple[str, dsp.Waveform]]:
    """(transcript, waveform) pairs, optionally capped to a time budget.

    Whole utterances accumulate in utterance-id order until the budget is
    reached, mirroring how adaptation splits are drawn.
    """
    utts = sorted(read_manifest(manifest_path), key=lambda u: u.utt_id)
    chosen: list[Utterance] = []
    acc = 0.0
    for u in utts:
        if seconds is not None and acc >= seconds:
            break
        chosen.append(u)
        acc += u.duration
    if seconds is not None and acc < seconds:
        _log(f"warning: references total {acc:.1f} s "
             f"of the requested {seconds:.0f} s")
    return [(u.transcript, dsp.load_wav(u.audio_path(manifest_path.parent)))
            for u in chosen]


# ------------------------------------------------------------- subcommands

def cmd_preprocess(args: argparse.Namespace) -> int:
    stages = tuple(s.strip() for s in args.stages.split(",") if s.strip()) \
        if args.stages else STAGES
    unknown = sorted(set(stages) - set(STAGES))
    if unknown:
        raise UsageError(
            f"unknown stages {', '.join(unknown)}; choose from {', '.join(STAGES)}")
    seed = args.seed if args.seed is not None else 0
    settings = {
        "in": str(_workpath(args, args.in_path)),
        "out": str(_workpath(args, args.out)),
        "stages": ",".join(stages),
        "workers": args.workers,
        "target_rate": args.target_rate,
        "test_utterances": args.test_utterances,
        "adapt_seconds": args.adapt_seconds,
        "vad_command": args.vad_command or "",
        "strict_sidecars": args.strict_sidecars,
    }
    for key, value in sorted(settings.items()):
        _log(f"config {key} = {value}")
    _log(f"seed = {seed}")
    report = run_pipeline(
        _workpath(args, args.in_path),
        _workpath(args, args.out),
        stages=stages,
        workers=args.workers,
        seed=seed,
        target_rate=args.target_rate,
        test_n=args.test_utterances,
        adapt_seconds=args.adapt_seconds,
        vad_command=args.vad_command,
        strict_sidecars=args.strict_sidecars,
        log=_log,
    )
    for sc in report.stages:
        _log(f"stage {sc.stage}: kept {sc.kept}, dropped {sc.dropped}")
    _log(f"retained {report.retained} of {report.total} utterances "
         f"-> {_workpath(args, args.out)}")
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    out_dir = _workpath(args, args.out)
    manifest = _workpath(args, args.manifest)
    if args.resume:
        if args.config:
            _log("warning: --config is ignored on resume; "
                 "the checkpoint carries its configuration")
        if args.seed is not None:
            _log("warning: --seed is ignored on resume; "
                 "the checkpoint carries its generator state")
        trainer = resume_trainer(_workpath(args, args.resume), manifest)
        seed = trainer.cfg.train.seed
    else:
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = load_config(args.config or "toy", overrides)
        seed = cfg.train.seed
        trainer = Trainer(cfg, manifest)
    _echo_config(trainer.cfg, seed)
    total = args.steps if args.steps is not None else trainer.cfg.train.total_steps
    remaining = total - trainer.step
    if remaining <= 0:
        _log(f"checkpoint is already at step {trainer.step}; nothing to train")
        return 0
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out_dir / "checkpoints"
    _log(f"training {remaining} steps (from {trainer.step} to {total})")
    trainer.train(remaining, csv_path=out_dir / "losses.csv",
                  checkpoint_dir=ckpt_dir, log=_log)
    final = ckpt_dir / f"step_{trainer.step:08d}.ckpt"
    if not final.exists():
        save_checkpoint(trainer, final)
    shutil.copyfile(final, ckpt_dir / "last.ckpt")
    _log(f"finished at step {trainer.step}; checkpoint {final}")
    return 0


def _override_adapt(cfg: Config, args: argparse.Namespace) -> None:
    if args.scheme is not None:
        cfg.adapt.scheme = args.scheme
    if args.kind is not None:
        cfg.adapt.kind = args.kind
    if args.r is not None:
        cfg.adapt.r = args.r
    if args.steps is not None:
        cfg.adapt.adapt_steps = args.steps
    if getattr(args, "lr", None) is not None:
        cfg.adapt.adapt_lr = args.lr
    cfg.adapt.validate()


def cmd_adapt(args: argparse.Namespace) -> int:
    model, cfg, step = load_backbone(_workpath(args, args.backbone))
    _override_adapt(cfg, args)
    seed = args.seed if args.seed is not None else 0
    _echo_config(cfg, seed)
    _log(f"backbone restored from step {step}")
    items = _load_references(_workpath(args, args.refs), args.seconds)
    _log(f"adapting on {len(items)} reference utterances "
         f"for {cfg.adapt.adapt_steps} steps")
    bundle, history = fine_grained_adapt(model, items, cfg, seed=seed)
    for h in history:
        if h["step"] % 100 == 0 or h["step"] == len(history) - 1:
            _log(f"step {h['step']}: total {h['total']:.4f} "
                 f"(kl {h['kl']:.4f} dur {h['duration']:.4f})")
    out = _workpath(args, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_bundle(out, bundle)
    _log("backbone parameters verified unchanged (fingerprint match)")
    _log(f"bundle with {bundle.parameter_count()} parameters -> {out}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    if not args.bundle and not args.ref_audio:
        raise UsageError(
            "synthesis needs a voice: give --ref-audio (instant mode) "
            "or --bundle (fine-grained mode)")
    model, cfg, _ = load_backbone(_workpath(args, args.backbone))
    seed = args.seed if args.seed is not None else 0
    _echo_config(cfg, seed)
    if args.bundle:
        if args.ref_audio:
            _log("warning: both --bundle and --ref-audio given; "
                 "the bundle's adaptive speaker embedding wins")
        bundle = load_bundle(_workpath(args, args.bundle))
        speaker = apply_bundle(model, bundle)
        _log(f"fine-grained mode: bundle of {bundle.parameter_count()} "
             f"parameters ({bundle.adapter_config.scheme}, "
             f"{bundle.adapter_config.kind}, r={bundle.adapter_config.r})")
    else:
        ref = dsp.load_wav(_workpath(args, args.ref_audio))
        speaker = embed_audio(model, ref)
        _log(f"instant mode: speaker embedded from {args.ref_audio}")
    rng = np.random.default_rng(seed)
    wav, durations, phonemes = synthesize(
        model, args.text, speaker, rng,
        noise_scale=args.noise_scale, g2p_command=args.g2p_command)
    out = _workpath(args, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dsp.save_wav(out, wav)
    frames = int(np.sum(durations.durations))
    secs = frames * model.cfg.frame_shift / model.cfg.sample_rate
    _log(f"{len(phonemes)} phonemes -> {frames} frames -> "
         f"{secs:.3f} s of audio -> {out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else 0
    if args.embedder:
        embedder = external_embedder(args.embedder)
        name = f"external: {args.embedder}"
    elif args.backbone:
        _log("no external embedder given; falling back to the internal "
             "speaker encoder")
        model, cfg, _ = load_backbone(_workpath(args, args.backbone))
        embedder = internal_embedder(model)
        name = "internal"
    else:
        raise UsageError(
            "evaluation needs an embedder: give --embedder (external "
            "command) or --backbone (internal fallback)")
    for key in ("synth", "ref"):
        _log(f"config {key}_manifest = {_workpath(args, getattr(args, key))}")
    _log(f"config embedder = {name}")
    _log(f"seed = {seed}")
    report = evaluate_run(
        _workpath(args, args.synth), _workpath(args, args.ref),
        embedder, embedder_name=name, workers=args.workers)
    csv_path, json_path = write_report(report, _workpath(args, args.out))
    agg = report.aggregates
    _log(f"{agg['num_utterances']} utterances: smcs_mean "
         f"{agg['smcs_mean']:.4f}, svr {agg['svr_percent']:.1f}%"
         + (f", wer_mean {agg['wer_mean']:.4f}" if agg["wer_mean"] is not None
            else ""))
    _log(f"report -> {csv_path} and {json_path}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else 0
    schemes = tuple(s.strip() for s in args.schemes.split(",") if s.strip())
    r_values = tuple(int(v) for v in args.r_values.split(","))
    durations = tuple(float(v) for v in args.durations.split(","))
    ckpt = _workpath(args, args.backbone)
    refs_path = _workpath(args, args.refs)
    test_path = _workpath(args, args.test)

    model0, cfg, _ = load_backbone(ckpt)
    _echo_config(cfg, seed)
    _log(f"sweep grid: schemes {schemes}, r {r_values}, "
         f"durations {durations}, kind {args.kind}")

    # test-set reference embeddings are adapter-invariant: compute them once
    test_utts = sorted(read_manifest(test_path),
                       key=lambda u: u.utt_id)[: args.eval_utterances]
    if not test_utts:
        raise UsageError(f"test manifest {test_path} lists no utterances")
    ref_vecs = [
        embed_audio(model0, dsp.load_wav(u.audio_path(test_path.parent))).vector
        for u in test_utts
    ]

    out = _workpath(args, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    steps = args.steps if args.steps is not None else cfg.adapt.adapt_steps
    with open(out, "w", encoding="utf-8") as csv_file:
        csv_file.write(",".join(SWEEP_CSV_COLUMNS) + "\n")
        cell = 0
        for scheme in schemes:
            for r in r_values:
                for duration in durations:
                    _run_sweep_cell(
                        args, ckpt, refs_path, test_utts, ref_vecs,
                        scheme, r, duration, steps, seed, cell, csv_file)
                    cell += 1
    _log(f"sweep results -> {out}")
    return 0


def _run_sweep_cell(
    args: argparse.Namespace,
    ckpt: Path,
    refs_path: Path,
    test_utts: list[Utterance],
    ref_vecs: list[np.ndarray],
    scheme: str,
    r: int,
    duration: float,
    steps: int,
    seed: int,
    cell: int,
    csv_file,
) -> None:
    """One grid cell: adapt under (scheme, r, duration), scoring periodically."""
    model, cfg, _ = load_backbone(ckpt)
    cfg.adapt.scheme = scheme
    cfg.adapt.kind = args.kind
    cfg.adapt.r = r
    cfg.adapt.validate()
    items = _load_references(refs_path, duration)
    _log(f"cell scheme={scheme} r={r} duration={duration:.0f}s: "
         f"{len(items)} references, {steps} steps")

    def score(step: int, vec: np.ndarray) -> None:
        sims = []
        for k, (u, ref_vec) in enumerate(zip(test_utts, ref_vecs)):
            rng = np.random.default_rng([seed, cell, step, k])
            wav, _, _ = synthesize(
                model, u.transcript, SpeakerEmbedding(vec), rng)
            sims.append(smcs(embed_audio(model, wav).vector, ref_vec))
        row = (scheme, args.kind, r, duration, step,
               float(np.mean(sims)), svr(sims))
        csv_file.write(",".join(repr(v) if isinstance(v, float) else str(v)
                                for v in row) + "\n")
        csv_file.flush()
        _log(f"  step {step}: smcs_mean {np.mean(sims):.4f}, "
             f"svr {svr(sims):.1f}%")

    fine_grained_adapt(model, items, cfg, seed=seed, steps=steps,
                       eval_every=args.eval_every, eval_fn=score)


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--workdir", default=".",
                        help="root for all relative paths (default: .)")
    shared.add_argument("--seed", type=int, default=None,
                        help="random seed (default: command-specific)")

    parser = argparse.ArgumentParser(
        prog="usat",
        description="Speaker-adaptive speech synthesis: preprocessing, "
                    "training, adaptation, synthesis, and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[shared],
                       help="filter and normalize a raw corpus")
    p.add_argument("--in", dest="in_path", required=True,
                   help="input manifest, or directory of wav+txt files")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--stages", default=None,
                   help=f"comma list from {','.join(STAGES)} (default: all)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--target-rate", type=int, default=DEFAULT_TARGET_RATE)
    p.add_argument("--test-utterances", type=int, default=DEFAULT_TEST_UTTERANCES)
    p.add_argument("--adapt-seconds", type=float, default=DEFAULT_ADAPT_SECONDS)
    p.add_argument("--vad-command", default=None,
                   help="external VAD command printing one 0/1 per frame")
    p.add_argument("--strict-sidecars", action="store_true",
                   help="drop files whose enabled-stage sidecars are missing")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("pretrain", parents=[shared],
                       help="train the backbone on a preprocessed corpus")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None,
                   help="preset name or config file (default: toy)")
    p.add_argument("--steps", type=int, default=None,
                   help="train to this step count (default: config value)")
    p.add_argument("--resume", default=None, help="checkpoint to continue")
    p.add_argument("--out", default="pretrain_run",
                   help="run directory for losses.csv and checkpoints/")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", parents=[shared],
                       help="tune adapters to a new speaker")
    p.add_argument("--backbone", required=True, help="pretrained checkpoint")
    p.add_argument("--refs", required=True,
                   help="manifest of reference utterances")
    p.add_argument("--scheme", choices=ADAPTER_SCHEMES, default=None)
    p.add_argument("--kind", choices=ADAPTER_KINDS, default=None)
    p.add_argument("--r", type=int, default=None,
                   help="bottleneck divisor (default: config value)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seconds", type=float, default=None,
                   help="cap total reference audio (default: use all)")
    p.add_argument("--out", required=True, help="output bundle path")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("synth", parents=[shared],
                       help="synthesize speech in a target voice")
    p.add_argument("--backbone", required=True)
    p.add_argument("--bundle", default=None,
                   help="adapter bundle (fine-grained mode)")
    p.add_argument("--text", required=True)
    p.add_argument("--ref-audio", default=None,
                   help="reference wav (instant mode)")
    p.add_argument("--out", required=True, help="output wav path")
    p.add_argument("--noise-scale", type=float, default=0.667)
    p.add_argument("--g2p-command", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", parents=[shared],
                       help="score synthesized speech against references")
    p.add_argument("--synth", required=True, help="synthesized manifest")
    p.add_argument("--ref", required=True, help="reference manifest")
    p.add_argument("--embedder", default=None,
                   help="external embedder command (wav path appended)")
    p.add_argument("--backbone", default=None,
                   help="checkpoint for the internal-embedder fallback")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="report base path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[shared],
                       help="adapter grid study with periodic scoring")
    p.add_argument("--backbone", required=True)
    p.add_argument("--refs", required=True, help="adaptation manifest")
    p.add_argument("--test", required=True, help="held-out test manifest")
    p.add_argument("--schemes", default=",".join(ADAPTER_SCHEMES))
    p.add_argument("--kind", choices=ADAPTER_KINDS, default="conv")
    p.add_argument("--r-values", default="4,8")
    p.add_argument("--durations", default="60,300",
                   help="comma list of reference-audio budgets in seconds")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--eval-utterances", type=int, default=4)
    p.add_argument("--out", required=True, help="tidy CSV path")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage problems and 0 on --help
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except UsatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
