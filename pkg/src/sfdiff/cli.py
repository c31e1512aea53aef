"""Command-line entry point: ``sfdiff {simulate,dataset,train,reconstruct,eval}``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import (
    DatasetConfig,
    Sample,
    build_test_corpus,
    build_training_corpus,
    load_manifest_corpus,
    normalize,
    read_corpus,
    write_corpus,
)
from .evaluation import REGIONS, aggregate, evaluate, nmse, render_heatmap, render_panel, write_sweep_csv
from .room_acoustics import DEFAULT_MARGIN, Grid, ModeLimitError, RoomSpec, magnitude, simulate_rtf

log = logging.getLogger("sfdiff")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
PROTOCOL_FREQ_RANGE = (30.0, 300.0)


class UsageError(Exception):
    """Bad flags, config or inputs; maps to exit code 2."""


@dataclass(frozen=True)
class BaselineConfig:
    ridge: float | str | None = None  # None -> default, "loo" -> leave-one-out selection
    mode: str = "complex"

    def __post_init__(self):
        if self.mode not in ("complex", "magnitude"):
            raise ValueError(f"baseline mode must be complex or magnitude, got {self.mode!r}")
        if isinstance(self.ridge, str) and self.ridge != "loo":
            raise ValueError(f"baseline ridge must be a number, 'loo' or null, got {self.ridge!r}")
        if isinstance(self.ridge, (int, float)) and not self.ridge >= 0:
            raise ValueError("baseline ridge must be >= 0")


@dataclass
class RunConfig:
    seed: int = 0
    threads: int | None = None
    output_dir: str = "runs"
    region: str = "full"
    sampling_steps: int = 250
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    trainer: dict = field(default_factory=dict)
    denoiser: dict = field(default_factory=dict)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "dataset" in d:
            d["dataset"] = DatasetConfig.from_dict(d["dataset"])
        if "baseline" in d:
            extra = set(d["baseline"]) - set(BaselineConfig.__dataclass_fields__)
            if extra:
                raise ValueError(f"unknown baseline keys: {sorted(extra)}")
            d["baseline"] = BaselineConfig(**d["baseline"])
        cfg = cls(**d)
        # trainer/denoiser are validated lazily (torch import) but keys are checked now
        from .diffusion import DenoiserSpec, TrainerConfig

        TrainerConfig.from_dict(cfg.trainer)
        DenoiserSpec.from_dict(cfg.denoiser)
        if cfg.region not in REGIONS + ("both",):
            raise ValueError(f"region must be one of {REGIONS + ('both',)}")
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise UsageError(f"config {path} is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        return cls.from_dict(data)


def _resolve_out(path, default: Path) -> Path:
    p = Path(path) if path is not None else default
    return p.resolve()


def _threads(args, cfg: RunConfig) -> int:
    n = args.threads if args.threads is not None else cfg.threads
    return max(1, n if n else (os.cpu_count() or 1))


def _load_corpus(path) -> dict[str, list[Sample]]:
    """Shards from a manifest, a directory holding one, or a single .sfd file."""
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.exists():
        raise UsageError(f"corpus not found: {path}")
    if p.suffix == ".json":
        return load_manifest_corpus(p)
    return {p.stem: read_corpus(p)}


def _shard_order(key: str):
    return (0, int(key), "") if key.isdigit() else (1, 0, key)


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# -- simulate --------------------------------------------------------------

def cmd_simulate(args, cfg: RunConfig) -> int:
    out = _resolve_out(args.out, Path(cfg.output_dir) / "simulate")
    try:
        room = RoomSpec(args.lx, args.ly, args.lz, args.t60, tuple(args.source), args.c)
        grid = Grid(room, args.z_o, *args.grid)
    except ValueError as e:
        raise UsageError(f"invalid geometry: {e}")
    if not args.freq > 0:
        raise UsageError("frequency must be positive")
    out.mkdir(parents=True, exist_ok=True)
    f = simulate_rtf(room, grid, 2 * math.pi * args.freq, margin=args.margin)
    mag = magnitude(f).values
    np.save(out / "field_complex.npy", f.values)
    np.save(out / "field_magnitude.npy", mag)
    render_heatmap(mag, out / "heatmap.png", title=args.title)
    print(f"wrote {out}  max |P| = {mag.max():.4g}")
    return EXIT_OK


# -- dataset ---------------------------------------------------------------

def cmd_dataset(args, cfg: RunConfig) -> int:
    out = _resolve_out(args.out, Path(cfg.output_dir) / args.split)
    dcfg = cfg.dataset
    if args.freq_range is not None:
        dcfg = replace(dcfg, freq_range=tuple(args.freq_range))
    lo, hi = dcfg.freq_range
    if (lo < PROTOCOL_FREQ_RANGE[0] or hi > PROTOCOL_FREQ_RANGE[1]) and not args.allow_out_of_band:
        raise UsageError(f"frequency range {dcfg.freq_range} leaves [30, 300] Hz; pass --allow-out-of-band")
    threads = _threads(args, cfg)
    if args.split == "train":
        man = build_training_corpus(args.seed, args.n_rooms, out, dcfg, threads)
    else:
        man = build_test_corpus(args.seed, args.n_rooms, args.n_freqs, out, dcfg, threads)
    for name in sorted(man.files.values()):
        print(f"{out / name}  {_sha(out / name)}")
    return EXIT_OK


# -- train -----------------------------------------------------------------

def cmd_train(args, cfg: RunConfig) -> int:
    from .diffusion import DenoiserSpec, TrainerConfig, train
    from .diffusion import checkpoint

    corpus = _load_corpus(args.corpus)
    out = _resolve_out(args.out, Path(cfg.output_dir) / "model.ckpt")
    log_path = _resolve_out(args.log, out.with_suffix(".loss.csv"))
    resume = Path(args.resume).resolve() if args.resume else None
    if resume is not None and not resume.exists():
        raise UsageError(f"checkpoint not found: {resume}")
    samples = [s for shard in corpus.values() for s in shard]
    if not samples:
        raise UsageError("training corpus is empty")

    overrides = {k: v for k, v in (("epochs", args.epochs), ("batch_size", args.batch_size),
                                   ("learning_rate", args.lr), ("loss_mask", args.loss_mask),
                                   ("max_steps", args.max_steps),
                                   ("checkpoint_every", args.checkpoint_every)) if v is not None}
    tcfg = TrainerConfig.from_dict({**cfg.trainer, **overrides, "seed": args.seed})
    spec = DenoiserSpec.from_dict({**cfg.denoiser, "seed": args.seed})
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path.parent.mkdir(parents=True, exist_ok=True)

    state = checkpoint.load_state(resume, tcfg) if resume else None
    state = train(samples, tcfg, spec, state=state, log_path=log_path,
                  on_checkpoint=lambda st: checkpoint.save(out, st, tcfg))
    digest = checkpoint.save(out, state, tcfg)
    tail = [h[1] for h in state.history[-50:]]
    if tail:
        print(f"step {state.step}  mean loss (last {len(tail)}) {np.mean(tail):.5f}")
    print(f"{out}  {digest}")
    return EXIT_OK


# -- reconstruct -----------------------------------------------------------

def _kernel_method(cfg: BaselineConfig):
    from .kernel_baseline import reconstruct_slice

    return lambda samples: [reconstruct_slice(s, mode=cfg.mode, ridge=cfg.ridge) for s in samples]


def _diffusion_method(path: Path, seed: int, steps: int):
    from .diffusion import checkpoint, reconstruct_batch

    denoiser, schedule, _ = checkpoint.load(path)
    return lambda samples: reconstruct_batch(denoiser, samples, schedule, seed=seed, steps=steps)


def _as_estimate(truth: Sample, est: np.ndarray) -> Sample:
    est = np.asarray(est, dtype=np.float64)
    norm, scale = normalize(est) if np.any(est) else (est, 1.0)
    return Sample(est, norm, scale, truth.mask, truth.frequency, truth.room, truth.grid)


def cmd_reconstruct(args, cfg: RunConfig) -> int:
    out = _resolve_out(args.out, Path(cfg.output_dir) / f"reconstruct-{args.method}")
    baseline = cfg.baseline
    if args.ridge is not None:
        baseline = replace(baseline, ridge=args.ridge if args.ridge == "loo" else float(args.ridge))
    if args.mode is not None:
        baseline = replace(baseline, mode=args.mode)
    steps = args.steps if args.steps is not None else cfg.sampling_steps
    if args.method == "sf-diff":
        if not args.checkpoint:
            raise UsageError("--checkpoint is required for --method sf-diff")
        ckpt = Path(args.checkpoint).resolve()
        if not ckpt.exists():
            raise UsageError(f"checkpoint not found: {ckpt}")
        method = _diffusion_method(ckpt, args.seed, steps)
    else:
        method = _kernel_method(baseline)
    corpus = _load_corpus(args.corpus)
    if not any(corpus.values()):
        raise UsageError("corpus is empty")
    out.mkdir(parents=True, exist_ok=True)

    summary = {}
    for key in sorted(corpus, key=_shard_order):
        samples = corpus[key][: args.limit] if args.limit else corpus[key]
        if not samples:
            continue
        estimates = method(samples)
        write_corpus(out / f"recon_{key}.sfd", [_as_estimate(s, e) for s, e in zip(samples, estimates)])
        db = nmse(estimates, [s.magnitude for s in samples])
        summary[key] = {"nmse_db": round(db, 4), "n_samples": len(samples)}
        print(f"{key}: {len(samples)} samples  NMSE {db:.2f} dB")
        for i in range(min(args.figures, len(samples))):
            s, e = samples[i], estimates[i]
            render_heatmap(e, out / f"heatmap_{key}_{i}.png")
            render_panel(s.mask.bits, s.magnitude, {args.method: e}, out / f"panel_{key}_{i}.png",
                         {args.method: nmse([e], [s.magnitude])})
    (out / "nmse.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# -- eval ------------------------------------------------------------------

def _sample_key(s: Sample) -> tuple:
    r = s.room
    return (r.lx, r.ly, r.lz, r.t60, r.source, s.grid.z_o, s.frequency, s.mask.m,
            np.packbits(s.mask.bits).tobytes())


def _flatten(corpus: dict[str, list[Sample]]) -> list[Sample]:
    return [s for key in sorted(corpus, key=_shard_order) for s in corpus[key]]


def cmd_eval(args, cfg: RunConfig) -> int:
    region = args.region or cfg.region
    out = _resolve_out(args.out, Path(cfg.output_dir) / "sweep.csv")
    recon_paths = [Path(p) for p in args.reconstructions]
    recon: list[Sample] = []
    for p in recon_paths:
        if p.is_dir():
            files = sorted(p.glob("recon_*.sfd"))
            if not files:
                raise UsageError(f"no recon_*.sfd files in {p}")
            for f in files:
                recon.extend(read_corpus(f))
        elif p.exists():
            recon.extend(read_corpus(p))
        else:
            raise UsageError(f"reconstructions not found: {p}")
    truths = _flatten(_load_corpus(args.truths))
    if not recon or not truths:
        raise UsageError("empty input: need at least one reconstruction and one truth sample")

    by_key: dict[tuple, list[int]] = {}
    for i, t in enumerate(truths):
        by_key.setdefault(_sample_key(t), []).append(i)
    pairs, unmatched = [], []
    used = set()
    for i, r in enumerate(recon):
        cands = [j for j in by_key.get(_sample_key(r), []) if j not in used]
        if not cands:
            unmatched.append(i)
            continue
        used.add(cands[0])
        pairs.append((truths[cands[0]], r.magnitude))
    if unmatched:
        raise UsageError(f"reconstructions without a matching truth sample: ids {unmatched}")
    if args.strict and len(used) != len(truths):
        missing = [j for j in range(len(truths)) if j not in used]
        raise UsageError(f"truth samples without a reconstruction: ids {missing}")

    regions = REGIONS if region == "both" else (region,)
    out.parent.mkdir(parents=True, exist_ok=True)
    for reg in regions:
        records = evaluate([p[0] for p in pairs], [p[1] for p in pairs], args.name, reg)
        rows = aggregate(records)
        path = out if reg == regions[0] else out.with_name(f"{out.stem}_{reg}{out.suffix}")
        write_sweep_csv(path, rows)
        print(f"{path}  ({reg}, {len(rows)} rows)")
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sfdiff", description="Sound-field magnitude reconstruction toolkit.")
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--seed", type=int, default=None, help="global seed for every random stream (default: config or 0)")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: machine parallelism)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="modal simulation of one frequency slice")
    s.add_argument("--lx", type=float, required=True, help="room length along x (m)")
    s.add_argument("--ly", type=float, required=True, help="room length along y (m)")
    s.add_argument("--lz", type=float, required=True, help="room height (m)")
    s.add_argument("--source", type=float, nargs=3, required=True, metavar=("X", "Y", "Z"), help="source position (m)")
    s.add_argument("--freq", type=float, required=True, help="frequency (Hz)")
    s.add_argument("--z-o", type=float, required=True, help="height of the observation plane (m)")
    s.add_argument("--t60", type=float, default=0.6, help="reverberation time (s)")
    s.add_argument("--c", type=float, default=343.0, help="speed of sound (m/s)")
    s.add_argument("--margin", type=float, default=DEFAULT_MARGIN, help="mode truncation margin")
    s.add_argument("--grid", type=int, nargs=2, default=(32, 32), metavar=("I", "J"), help="grid size")
    s.add_argument("--title", default=None, help="heatmap title")
    s.add_argument("--out", help="output directory")
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("dataset", help="generate a training or test corpus")
    d.add_argument("split", choices=("train", "test"))
    d.add_argument("--n-rooms", type=int, required=True, help="number of rooms")
    d.add_argument("--n-freqs", type=int, default=40, help="frequencies per test room")
    d.add_argument("--freq-range", type=float, nargs=2, metavar=("LO", "HI"), help="override frequency range (Hz)")
    d.add_argument("--allow-out-of-band", action="store_true", help="permit frequencies outside [30, 300] Hz")
    d.add_argument("--out", help="output directory")
    d.set_defaults(func=cmd_dataset)

    t = sub.add_parser("train", help="train the diffusion denoiser")
    t.add_argument("--corpus", required=True, help="training manifest, corpus directory or .sfd file")
    t.add_argument("--out", help="checkpoint path")
    t.add_argument("--log", help="loss CSV path (default: <checkpoint>.loss.csv)")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--epochs", type=int, help="training epochs")
    t.add_argument("--batch-size", type=int, help="batch size")
    t.add_argument("--lr", type=float, help="Adam learning rate")
    t.add_argument("--loss-mask", choices=("observed", "full"), help="cells contributing to the loss")
    t.add_argument("--max-steps", type=int, help="stop after this many optimiser steps")
    t.add_argument("--checkpoint-every", type=int, help="save a checkpoint every N steps")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("reconstruct", help="reconstruct fields with the diffusion model or the kernel baseline")
    r.add_argument("--method", choices=("sf-diff", "kernel"), default="sf-diff", help="reconstruction method")
    r.add_argument("--checkpoint", help="trained checkpoint (sf-diff)")
    r.add_argument("--corpus", required=True, help="test manifest, corpus directory or .sfd file")
    r.add_argument("--out", help="output directory")
    r.add_argument("--steps", type=int, help="reverse sampling steps (sf-diff)")
    r.add_argument("--ridge", help="kernel ridge: a number or 'loo'")
    r.add_argument("--mode", choices=("complex", "magnitude"), help="kernel baseline input")
    r.add_argument("--limit", type=int, default=0, help="use only the first N samples of each shard")
    r.add_argument("--figures", type=int, default=2, help="heatmaps and panels per shard")
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("eval", help="NMSE sweep over reconstructions")
    e.add_argument("--reconstructions", nargs="+", required=True, help="recon .sfd files or directories")
    e.add_argument("--truths", required=True, help="test manifest, corpus directory or .sfd file")
    e.add_argument("--region", choices=REGIONS + ("both",), help="cells entering the norm")
    e.add_argument("--name", default="method", help="method label")
    e.add_argument("--strict", action="store_true", help="require a reconstruction for every truth sample")
    e.add_argument("--out", help="sweep CSV path")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    from .diffusion.checkpoint import CheckpointError
    from .diffusion.training import NonFiniteLossError
    from .kernel_baseline import KernelSolveError

    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is None:
            args.seed = cfg.seed
        return args.func(args, cfg)
    # numerical errors first: the solver error is itself a ValueError
    except (NonFiniteLossError, FloatingPointError, KernelSolveError, ModeLimitError) as e:
        print(f"sfdiff {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, CheckpointError, ValueError, KeyError) as e:
        print(f"sfdiff {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"sfdiff {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
