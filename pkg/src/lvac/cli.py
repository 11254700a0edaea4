"""Command-line front end: generation, training, coding, sweeps, reporting.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 training
divergence.  Every command is deterministic under ``--seed`` (default taken
from the LVAC_SEED environment variable).  Option precedence is flags over
``--config`` file entries over built-in defaults; the config file is flat
``key=value`` lines using the long option names.
"""

from __future__ import annotations

import argparse
import multiprocessing as mp
import os
import sys

from . import cbn as cbn_mod
from . import codec, metrics, trainer
from .entmodel import FactorizedCdf
from .partition import build_tree
from .pcio import GENERATOR_KINDS, PlyError, load_ply, save_ply, synthesize_cloud
from .rlgr import DecodeError

__all__ = ["main"]

CBN_CHOICES = {
    "linear": ("linear3x3", 3, 0),
    "mlp256": ("mlp", 32, 256),
    "mlp64": ("mlp", 32, 64),
    "pa": ("pa", 32, 0),
}


def _spec_from_choice(choice: str) -> cbn_mod.CbnSpec:
    family, channels, hidden = CBN_CHOICES[choice]
    return cbn_mod.CbnSpec(family, channels=channels, hidden=hidden or 64)


def _default_seed() -> int:
    return int(os.environ.get("LVAC_SEED", "0"))


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="master seed (default: $LVAC_SEED or 0)")
    p.add_argument("--config", type=str, default=None, help="key=value defaults file")


def _parse_lambdas(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok.strip()]


def _parse_delta_grid(text: str) -> list[float]:
    """'0..10' means step sizes 2^0 .. 2^10; a comma list gives them directly."""
    if ".." in text:
        lo, hi = text.split("..")
        return [float(2 ** n) for n in range(int(lo), int(hi) + 1)]
    return [float(tok) for tok in text.split(",") if tok.strip()]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lvac", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic PLY cloud")
    p.add_argument("--kind", choices=GENERATOR_KINDS, required=True)
    p.add_argument("--depth", type=int, default=8)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("info", help="tree and model statistics for a cloud")
    p.add_argument("--input", required=True)
    p.add_argument("--depth", type=int, default=10, help="voxel bits of the grid")
    p.add_argument("--level", type=int, default=None, help="target level to summarize")
    _add_common(p)
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("train", help="rate-distortion optimize latents for one cloud")
    p.add_argument("--input", required=True)
    p.add_argument("--depth", type=int, default=10)
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--cbn", choices=sorted(CBN_CHOICES), required=True)
    p.add_argument("--lam", type=float, default=1e-3, help="Lagrange multiplier")
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    p.add_argument("--no-normalization", action="store_true")
    p.add_argument("--freeze-cbn", action="store_true")
    p.add_argument("--cbn-weights", type=str, default=None)
    p.add_argument("--out", required=True, help="checkpoint path")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="freeze a checkpoint into a bitstream")
    p.add_argument("--input", required=True, help="the cloud the state was trained on")
    p.add_argument("--depth", type=int, default=10)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--side-bits", type=int, choices=(0, 8, 32), default=32)
    p.add_argument("--baseline", action="store_true", help="non-learned RAHT+RLGR path")
    p.add_argument("--delta", type=float, default=1.0, help="baseline scalar step size")
    p.add_argument("--colorspace", choices=("rgb", "yuv"), default="rgb")
    p.add_argument("--level", type=int, default=None, help="baseline target level (default voxel)")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="reconstruct attributes from a bitstream")
    p.add_argument("--input", required=True, help="bitstream path")
    p.add_argument("--geometry", required=True, help="PLY supplying the decoded geometry")
    p.add_argument("--depth", type=int, default=10)
    p.add_argument("--cbn-weights", type=str, default=None)
    p.add_argument("--out", required=True, help="output PLY")
    _add_common(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("rd-sweep", help="rate-distortion curve over a lambda or step grid")
    p.add_argument("--input", required=True)
    p.add_argument("--depth", type=int, default=10)
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--cbn", choices=sorted(CBN_CHOICES), default="mlp64")
    p.add_argument("--lambdas", type=str, default="1e-4,3e-4,1e-3,3e-3,1e-2,3e-2,1e-1")
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    p.add_argument("--side-bits", type=int, choices=(0, 8, 32), default=32)
    p.add_argument("--no-normalization", action="store_true")
    p.add_argument("--freeze-cbn", action="store_true")
    p.add_argument("--cbn-weights", type=str, default=None)
    p.add_argument("--baseline", action="store_true")
    p.add_argument("--delta-grid", type=str, default="0..10")
    p.add_argument("--colorspace", choices=("rgb", "yuv"), default="rgb")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True, help="CSV path")
    _add_common(p)
    p.set_defaults(func=cmd_rd_sweep)

    p = sub.add_parser("ablate-norm", help="paired sweeps with and without normalization")
    p.add_argument("--inputs", required=True, help="comma-separated PLY paths")
    p.add_argument("--depth", type=int, default=10)
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--cbn", choices=sorted(CBN_CHOICES), default="mlp64")
    p.add_argument("--lambdas", type=str, default="3e-4,1e-3,3e-3,1e-2")
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    p.add_argument("--side-bits", type=int, choices=(0, 8, 32), default=32)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True, help="CSV path for all points")
    _add_common(p)
    p.set_defaults(func=cmd_ablate_norm)

    p = sub.add_parser("bd-rate", help="Bjontegaard delta rate between two CSV curves")
    p.add_argument("csv_a")
    p.add_argument("csv_b")
    _add_common(p)
    p.set_defaults(func=cmd_bd_rate)

    return ap


# ---------------------------------------------------------------------------
# command bodies
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cloud = synthesize_cloud(args.kind, args.depth, args.seed)
    save_ply(cloud, args.out)
    print(f"wrote {args.out}: {len(cloud)} points at depth {args.depth}")
    return 0


def cmd_info(args) -> int:
    cloud = load_ply(args.input, depth=args.depth)
    print(f"points: {len(cloud)}")
    print(f"voxel depth: {cloud.depth}")
    print(f"binary levels: {3 * cloud.depth}")
    level = args.level if args.level is not None else 3 * cloud.depth
    tree = build_tree(cloud, level)
    print(f"target level: {level}")
    print(f"blocks: {tree.num_blocks}")
    print(f"coefficients: {tree.num_coefficients}")
    counts = [int(link.branching.shape[0]) for link in tree.links]
    print("coefficients per level:")
    for lvl, n in enumerate(counts, start=1):
        if n:
            print(f"  level {lvl:2d}: {n}")
    print("CBN parameter counts:")
    for choice in ("linear", "mlp256", "mlp64", "pa"):
        spec = _spec_from_choice(choice)
        print(f"  {spec.label}: {cbn_mod.param_count(spec)}")
    ent = FactorizedCdf([0], 1)
    print(f"entropy model parameters per (level, channel): {ent.params_per_model()}")
    return 0


def _train_config(args, lam: float, no_norm: bool) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        spec=_spec_from_choice(args.cbn),
        target_level=args.level,
        lam=lam,
        steps=args.steps,
        lr=args.lr,
        seed=args.seed,
        freeze_cbn=getattr(args, "freeze_cbn", False),
        freeze_normalization=no_norm,
        dtype=args.dtype,
    )


def cmd_train(args) -> int:
    cloud = load_ply(args.input, depth=args.depth)
    tree = build_tree(cloud, args.level)
    pretrained = cbn_mod.load_params(args.cbn_weights) if args.cbn_weights else None
    config = _train_config(args, args.lam, args.no_normalization)
    state = trainer.train(cloud, tree, config, pretrained_cbn=pretrained)
    trainer.save_checkpoint(state, args.out)
    rng = trainer.step_rng(config.seed, config.steps + 1)
    J, D, R = trainer.loss(state, cloud, tree, config, rng)
    print(f"trained {config.steps} steps: J={J:.4f} D={D:.4f} R={R:.1f} bits (proxy)")
    print(f"checkpoint: {args.out}")
    return 0


def cmd_encode(args) -> int:
    cloud = load_ply(args.input, depth=args.depth)
    if args.baseline:
        level = args.level if args.level is not None else 3 * cloud.depth
        tree = build_tree(cloud, level)
        stream, recon = codec.raht_baseline_encode(cloud, tree, args.delta, args.colorspace)
        stream.save(args.out)
        bits = stream.total_bits
        print(f"bpp: {bits / len(cloud):.6f}")
        print(f"psnr_rgb: {metrics.psnr_rgb(cloud, recon):.4f} dB")
        return 0
    if not args.checkpoint:
        print("error: --checkpoint is required unless --baseline", file=sys.stderr)
        return 1
    state = trainer.load_checkpoint(args.checkpoint)
    tree = build_tree(cloud, state.config.target_level)
    policy = codec.SideInfoPolicy(bits_per_parameter=args.side_bits)
    stream = codec.encode(cloud, tree, state, policy)
    stream.save(args.out)
    model = codec.decode(stream, tree, external_cbn=state.cbn)
    recon = codec.reconstruct_cloud(model, tree, cloud.positions)
    bits = codec.accounted_bits(stream, policy)
    print(f"bpp: {bits / len(cloud):.6f}")
    print(f"stream bpp (file bits only): {stream.total_bits / len(cloud):.6f}")
    print(f"psnr_rgb: {metrics.psnr_rgb(cloud, recon):.4f} dB")
    return 0


def cmd_decode(args) -> int:
    geometry = load_ply(args.geometry, depth=args.depth)
    stream = codec.Bitstream.load(args.input)
    tree = build_tree(geometry, stream.target_level)
    external = cbn_mod.load_params(args.cbn_weights) if args.cbn_weights else None
    model = codec.decode(stream, tree, external_cbn=external)
    recon = codec.reconstruct_cloud(model, tree, geometry.positions)
    save_ply(recon, args.out)
    print(f"decoded {len(recon)} points -> {args.out}")
    print(f"psnr_rgb vs geometry colors: {metrics.psnr_rgb(geometry, recon):.4f} dB")
    return 0


def _sweep_one(task) -> metrics.RdPoint:
    """One (train, encode, measure) unit; runs in a worker process."""
    (path, depth, level, cbn_choice, lam, steps, lr, dtype, side_bits,
     no_norm, freeze_cbn, cbn_weights, seed) = task
    cloud = load_ply(path, depth=depth)
    tree = build_tree(cloud, level)
    spec = _spec_from_choice(cbn_choice)
    config = trainer.TrainConfig(
        spec=spec, target_level=level, lam=lam, steps=steps, lr=lr, seed=seed,
        freeze_cbn=freeze_cbn, freeze_normalization=no_norm, dtype=dtype,
    )
    pretrained = cbn_mod.load_params(cbn_weights) if cbn_weights else None
    state = trainer.train(cloud, tree, config, pretrained_cbn=pretrained)
    policy = codec.SideInfoPolicy(bits_per_parameter=side_bits)
    stream = codec.encode(cloud, tree, state, policy)
    model = codec.decode(stream, tree, external_cbn=state.cbn)
    recon = codec.reconstruct_cloud(model, tree, cloud.positions)
    label = f"{spec.label}@L{level}" + ("" if not no_norm else "+noS")
    return metrics.RdPoint(
        label=label, cbn=spec.label, level=level, lambda_or_delta=lam, B=side_bits,
        bpp=codec.accounted_bits(stream, policy) / len(cloud),
        psnr_rgb=metrics.psnr_rgb(cloud, recon),
    )


def _run_pool(tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [_sweep_one(t) for t in tasks]
    # one BLAS thread per worker: the runs themselves are the parallelism
    saved = os.environ.get("OPENBLAS_NUM_THREADS")
    os.environ["OPENBLAS_NUM_THREADS"] = "1"
    try:
        ctx = mp.get_context("spawn")
        with ctx.Pool(processes=min(jobs, len(tasks))) as pool:
            return pool.map(_sweep_one, tasks)
    finally:
        if saved is None:
            os.environ.pop("OPENBLAS_NUM_THREADS", None)
        else:
            os.environ["OPENBLAS_NUM_THREADS"] = saved


def cmd_rd_sweep(args) -> int:
    if args.baseline:
        cloud = load_ply(args.input, depth=args.depth)
        tree = build_tree(cloud, args.level)
        points = []
        for delta in _parse_delta_grid(args.delta_grid):
            stream, recon = codec.raht_baseline_encode(cloud, tree, delta, args.colorspace)
            points.append(
                metrics.RdPoint(
                    label=f"raht+rlgr({args.colorspace})@L{args.level}",
                    cbn="raht", level=args.level, lambda_or_delta=delta, B=0,
                    bpp=stream.total_bits / len(cloud),
                    psnr_rgb=metrics.psnr_rgb(cloud, recon),
                )
            )
    else:
        tasks = [
            (args.input, args.depth, args.level, args.cbn, lam, args.steps, args.lr,
             args.dtype, args.side_bits, args.no_normalization, args.freeze_cbn,
             args.cbn_weights, args.seed)
            for lam in _parse_lambdas(args.lambdas)
        ]
        points = _run_pool(tasks, args.jobs)
    metrics.write_csv(args.out, points)
    for p in points:
        print(f"{p.label} lam/delta={p.lambda_or_delta:g} bpp={p.bpp:.4f} psnr={p.psnr_rgb:.2f}")
    print(f"wrote {args.out}")
    return 0


def cmd_ablate_norm(args) -> int:
    paths = [tok for tok in args.inputs.split(",") if tok.strip()]
    lambdas = _parse_lambdas(args.lambdas)
    tasks = []
    for path in paths:
        for no_norm in (False, True):
            for lam in lambdas:
                tasks.append(
                    (path, args.depth, args.level, args.cbn, lam, args.steps, args.lr,
                     args.dtype, args.side_bits, no_norm, False, None, args.seed)
                )
    points = _run_pool(tasks, args.jobs)
    metrics.write_csv(args.out, points)
    per_curve = len(lambdas)
    gains = []
    idx = 0
    for path in paths:
        on = points[idx : idx + per_curve]
        off = points[idx + per_curve : idx + 2 * per_curve]
        idx += 2 * per_curve
        gain = metrics.bd_rate(on, off)
        gains.append(gain)
        print(f"{path}: BD-rate(normalized vs identity scales) = {gain:.1f}%")
    print(f"mean BD-rate: {sum(gains) / len(gains):.1f}%")
    print(f"wrote {args.out}")
    return 0


def cmd_bd_rate(args) -> int:
    a = metrics.read_csv(args.csv_a)
    b = metrics.read_csv(args.csv_b)
    print(f"{metrics.bd_rate(a, b):.1f}%")
    return 0


# ---------------------------------------------------------------------------

def _apply_config_file(argv: list[str]) -> list[str]:
    """Inject key=value pairs from --config as defaults (flags still win)."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        return argv
    path = argv[i + 1]
    injected = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            key, value = line.split("=", 1)
            flag = "--" + key.strip().replace("_", "-")
            if flag not in argv:
                injected += [flag, value.strip()]
    # defaults go right after the subcommand so explicit flags override them
    return argv[:1] + injected + argv[1:]


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(_apply_config_file(argv) if argv else argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    if getattr(args, "seed", None) is None:
        args.seed = _default_seed()
    try:
        return args.func(args)
    except trainer.TrainingDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (PlyError, codec.CodecError, DecodeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
