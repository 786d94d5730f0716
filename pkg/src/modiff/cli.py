"""Command-line entry point: ``modiff <gen-data|train|sample|edit|eval|mel> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error. When ``--seed`` is not
given, the ``MODIFF_SEED`` environment variable (if set) supplies the seed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("MODIFF_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"MODIFF_SEED must be an integer, got {env!r}") from None


def _read_audio_mel(path):
    from .conditioning import mel_spectrogram, read_wav, resample

    w = read_wav(path)
    if w.sample_rate != 16000:
        w = resample(w, 16000)
    return w, mel_spectrogram(w)


def _context_for(model, args):
    """Conditioning chosen on the command line, checked against the checkpoint's modality."""
    modality = model.cfg.modality
    if getattr(args, "audio", None):
        if modality != "audio":
            raise UsageError(f"checkpoint is {modality}-conditioned; --audio needs an audio model")
        w, mel = _read_audio_mel(args.audio)
        return model.encode(mel.frames), w.seconds
    if getattr(args, "text", None):
        if modality != "text":
            raise UsageError(f"checkpoint is {modality}-conditioned; --text needs a text model")
        return model.encode(args.text), None
    return model.encode(None), None


def cmd_gen_data(args) -> int:
    from .data import SyntheticSpec, gen_data

    spec = SyntheticSpec(n_sequences=args.n_sequences, seconds=args.seconds, fps=args.fps, beat_hz=args.beat_hz,
                         skeleton=args.skeleton, phase_jitter=args.phase_jitter, captions=not args.no_captions)
    out = gen_data(spec, args.out, seed=_seed(args))
    print(f"wrote {spec.n_sequences} sequences to {out}")
    return 0


def cmd_train(args) -> int:
    from .conditioning import Vocabulary
    from .data import load_dataset
    from .model import read_checkpoint
    from .trainer import TrainConfig, TrainingData, load_config, new_model_for, train, write_config

    overrides = {"rng_seed": args.seed if args.seed is not None else None, "max_steps": args.steps,
                 "loss_m": args.loss_m, "loss_s": args.loss_s, "loss_a": args.loss_a,
                 "batch_size": args.batch_size}
    if args.seed is None and "MODIFF_SEED" in os.environ:
        overrides["rng_seed"] = _seed(args)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    header = None
    if args.resume:
        header, _ = read_checkpoint(args.resume)
    if args.config:
        cfg = load_config(args.config, task=args.task, **overrides)
    elif header is not None:
        saved = dict(header["extra"]["train_config"])
        cfg = TrainConfig(**{**saved, **({"task": args.task} if args.task else {}), **overrides})
    else:
        cfg = TrainConfig.for_task(args.task or "dance", **overrides)

    modality = "audio" if cfg.task == "dance" else "text"
    examples, _ = load_dataset(args.data_dir, with_audio=modality == "audio")
    vocab = None
    if modality == "text":
        if header is not None and header.get("vocab"):
            vocab = Vocabulary.from_list(header["vocab"])
        else:
            vocab = Vocabulary.build(e.caption or "" for e in examples)
    data = TrainingData.from_examples(examples, vocab)
    if modality == "audio" and data.mels is None and cfg.conditioned:
        raise ValueError("dance training needs audio for every sequence")
    if modality == "text" and data.tokens is None and cfg.conditioned:
        raise ValueError("text training needs a caption for every sequence")
    ex0 = examples[0].motion
    model = new_model_for(cfg, ex0.skeleton, ex0.fps, modality, vocab)
    sched = cfg.schedule()

    ckpt_dir = Path(args.ckpt_dir) if args.ckpt_dir else None
    log_path = None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        write_config(cfg, ckpt_dir / "train.ini")
        if vocab is not None:
            vocab.save(ckpt_dir / "vocab.tsv")
        log_path = ckpt_dir / "train_log.jsonl"
    result = train(data, model, sched, cfg, ckpt_dir=ckpt_dir, resume=args.resume, log_path=log_path)
    if result.curve:
        last = result.curve[-1]
        print(f"step {last['step']}  L_da {last['L_da']:.5f}  total {last['total']:.5f}")
    if result.checkpoint is not None:
        print(f"checkpoint: {result.checkpoint}")
    return 0


def cmd_sample(args) -> int:
    from .diffusion import sample
    from .model import load_checkpoint
    from .motion import MotionSequence, save_motion

    model, sched, _, _ = load_checkpoint(args.ckpt)
    ctx, audio_seconds = _context_for(model, args)
    seconds = args.length_sec if args.length_sec is not None else audio_seconds
    if seconds is None:
        raise UsageError("--length-sec is required unless --audio gives the duration")
    n = int(round(seconds * model.fps))
    if n < 1:
        raise UsageError("--length-sec gives no frames")
    frames = sample(model, ctx, (n, model.in_channels), sched, _seed(args))
    save_motion(MotionSequence(frames, model.fps, model.skeleton), args.out)
    print(f"wrote {n} frames to {args.out}")
    return 0


def parse_mask(text: str, n_frames: int):
    from .diffusion import FrameMask

    kind, _, rest = text.partition(":")
    try:
        if kind == "prefix":
            s = int(rest)
            if not 0 <= s <= n_frames:
                raise UsageError(f"prefix length {s} outside [0, {n_frames}]")
            return FrameMask.prefix(n_frames, s)
        if kind == "keyframes":
            idx = [int(v) for v in rest.split(",") if v.strip()]
            if not idx or min(idx) < 0 or max(idx) >= n_frames:
                raise UsageError(f"keyframes must lie in [0, {n_frames})")
            return FrameMask.keyframes(n_frames, idx)
    except ValueError:
        raise UsageError(f"bad mask {text!r}") from None
    raise UsageError(f"mask must be prefix:<S> or keyframes:<i,j,...>, got {text!r}")


def cmd_edit(args) -> int:
    from .diffusion import masked_sample
    from .model import load_checkpoint
    from .motion import DimensionError, MotionSequence, load_motion, save_motion

    model, sched, _, _ = load_checkpoint(args.ckpt)
    seed_motion = load_motion(args.seed_motion)
    if seed_motion.frames.shape[1] != model.in_channels:
        raise DimensionError(f"seed motion has {seed_motion.frames.shape[1]} channels, model expects {model.in_channels}")
    n_seed = seed_motion.n_frames
    n = int(round(args.length_sec * model.fps)) if args.length_sec is not None else n_seed
    mask = parse_mask(args.mask, n)
    kept = np.flatnonzero(mask.keep)
    if kept.size and kept.max() >= n_seed:
        raise UsageError(f"mask keeps frame {kept.max()} but the seed motion has only {n_seed} frames")
    canvas = np.zeros((n, model.in_channels))
    m = min(n, n_seed)
    canvas[:m] = seed_motion.frames[:m]
    ctx, _ = _context_for(model, args)
    frames = masked_sample(model, ctx, canvas, mask, sched, _seed(args))
    save_motion(MotionSequence(frames, model.fps, model.skeleton), args.out)
    print(f"wrote {n} frames ({int(mask.keep.sum())} kept) to {args.out}")
    return 0


def _config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def evaluate(data_dir, ckpt=None, seed: int = 0, k: int = 10) -> dict:
    """BAS / FID / diversity / multimodality of generated motions against a dataset.

    Without a checkpoint the dataset is compared with itself.
    """
    from .data import load_dataset
    from .diffusion import sample
    from .metrics import BeatSet, beat_alignment_score, diversity, frechet_distance, kinetic_features, \
        motion_beat_set, multi_modality
    from .model import load_checkpoint

    examples, manifest = load_dataset(data_dir)
    if not examples:
        raise ValueError(f"no sequences in {data_dir}")
    fps = examples[0].motion.fps
    real = [e.motion.frames for e in examples]
    mm = None
    if ckpt is None:
        gen = real
        chash = _config_hash({"dataset": manifest["spec"], "seed": manifest["seed"]})
    else:
        model, sched, header, _ = load_checkpoint(ckpt)
        chash = _config_hash({"model": header["model"], "schedule": header["schedule"],
                              "train": header["extra"].get("train_config")})
        gen = []
        for i, e in enumerate(examples):
            cond = e.mel if model.cfg.modality == "audio" else e.caption if model.cfg.modality == "text" else None
            ctx = model.encode(cond)
            gen.append(sample(model, ctx, e.motion.frames.shape, sched, seed + i))
        cond0 = examples[0].mel if model.cfg.modality == "audio" else examples[0].caption
        seeds = [seed + 10_000 + j for j in range(k)]
        mm = multi_modality(model, model.encode(cond0), sched, seeds, real[0].shape[0], fps, K=k)
    bas = [beat_alignment_score(BeatSet(e.music_beats, fps), motion_beat_set(g, fps)) for e, g in zip(examples, gen)]
    f_real = np.stack([kinetic_features(m, fps) for m in real])
    f_gen = np.stack([kinetic_features(m, fps) for m in gen])
    return {
        "bas": float(np.mean(bas)),
        "fid": frechet_distance(f_gen, f_real) if len(real) > 1 else None,
        "diversity": diversity(f_gen) if len(gen) > 1 else None,
        "multimodality": mm,
        "n_sequences": len(examples),
        "config_hash": chash,
        "source": "dataset" if ckpt is None else str(ckpt),
    }


def cmd_eval(args) -> int:
    report = evaluate(args.data_dir, args.ckpt, seed=_seed(args), k=args.k)
    line = json.dumps(report, sort_keys=True)
    Path(args.report).write_text(line + "\n", encoding="utf-8")
    print(line)
    return 0


def cmd_mel(args) -> int:
    _, mel = _read_audio_mel(args.audio)
    if args.out is None:
        np.savetxt(sys.stdout, mel.frames, fmt="%.8e")
    elif str(args.out).endswith(".npy"):
        np.save(args.out, mel.frames)
    else:
        np.savetxt(args.out, mel.frames, fmt="%.17e")
    print(f"{mel.frames.shape[0]} frames x {mel.frames.shape[1]} bands", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="modiff", description="Motion diffusion toolkit.")
    p.add_argument("--version", action="version", version=f"modiff {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic beat-synced dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-sequences", type=int, default=8)
    g.add_argument("--seconds", type=float, default=4.0)
    g.add_argument("--fps", type=float, default=20.0)
    g.add_argument("--beat-hz", type=float, default=2.0)
    g.add_argument("--skeleton", choices=["toy8", "smpl24"], default="toy8")
    g.add_argument("--phase-jitter", action="store_true")
    g.add_argument("--no-captions", action="store_true")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--task", choices=["dance", "text"])
    t.add_argument("--data-dir", required=True)
    t.add_argument("--config", help="INI file with a [train] section")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--ckpt-dir")
    t.add_argument("--resume", help="checkpoint to continue from")
    for name in ("m", "s", "a"):
        t.add_argument(f"--loss-{name}", action=argparse.BooleanOptionalAction, default=None)
    t.set_defaults(func=cmd_train)

    def conditioning(sp, required: bool):
        grp = sp.add_mutually_exclusive_group(required=required)
        grp.add_argument("--audio", help="WAV file")
        grp.add_argument("--text", help="caption")
        grp.add_argument("--uncond", action="store_true")

    s = sub.add_parser("sample", help="generate a motion")
    s.add_argument("--ckpt", required=True)
    conditioning(s, True)
    s.add_argument("--length-sec", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("edit", help="complete a motion around kept frames")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--seed-motion", required=True)
    e.add_argument("--mask", required=True, help="prefix:<S> or keyframes:<i,j,...>")
    conditioning(e, False)
    e.add_argument("--length-sec", type=float, help="canvas length; defaults to the seed motion's")
    e.add_argument("--seed", type=int)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_edit)

    v = sub.add_parser("eval", help="score generated motions against a dataset")
    v.add_argument("--ckpt")
    v.add_argument("--data-dir", required=True)
    v.add_argument("--report", required=True)
    v.add_argument("--k", type=int, default=10, help="samples for multimodality")
    v.add_argument("--seed", type=int)
    v.set_defaults(func=cmd_eval)

    m = sub.add_parser("mel", help="dump a log-mel spectrogram")
    m.add_argument("--audio", required=True)
    m.add_argument("--out", help=".npy, or text otherwise; stdout when omitted")
    m.set_defaults(func=cmd_mel)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit code 2
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
