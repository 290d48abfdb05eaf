"""Command-line entry point (``finola <subcommand> [flags]``).

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Commands that take ``--checkpoint`` fall back to an untrained model built
from the config seed when none is given.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..core import generate_parallel, save_grid
from ..models import Checkpoint, FingerprintMismatch, coeffs_from_params, decode_grid, encode, init_params, reconstruct
from ..numerics import make_rng
from ..pde import compatible_coeffs, curvature_histogram, residual_table, write_csv
from .bench import bench
from .config import ConfigError, RunConfig, from_dict, load_config
from .data import psnr, synth_dataset, tile, write_ppm
from .experiments import channel_sweep, curvature_reports, embedding_experiments, frozen_norm_eval
from .train import masks_for, train

log = logging.getLogger("finola")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", type=Path, help="JSON run config")
    g.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
    g.add_argument("--seed", type=int, help="seed for model init, masks and data")
    g.add_argument("--out-dir", type=Path, default=Path("out"))
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def _with_checkpoint(p):
    p.add_argument("--checkpoint", type=Path, help="FNLA checkpoint (default: untrained model)")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="finola", description="FINOLA toy-scale training and analysis")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--resume", type=Path, help="checkpoint to resume from")
    p.add_argument("--stop-step", type=int, help="stop early at this step (schedule unchanged)")

    _with_checkpoint(sub.add_parser("reconstruct", parents=[common], help="reconstruct the dataset"))

    p = _with_checkpoint(sub.add_parser("generate", parents=[common], help="dump a generated grid and its decoding"))
    p.add_argument("--image", type=int, default=0, help="dataset index to encode")

    p = sub.add_parser("analyze-pde", parents=[common], help="PDE residual convergence table")
    p.add_argument("--h", type=float, action="append", dest="hs", help="step size (repeatable)")
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--extent", type=int, default=5)

    p = _with_checkpoint(sub.add_parser("curvature", parents=[common], help="rank channels by Gaussian curvature"))
    p.add_argument("--top-k", type=int, default=4)

    p = _with_checkpoint(sub.add_parser("embed", parents=[common], help="embedding-space experiments"))
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--k", type=int, action="append", dest="ks", help="PCA rank (repeatable)")

    p = sub.add_parser("sweep-channels", parents=[common], help="train one model per channel count")
    p.add_argument("--channels", type=int, action="append", dest="cs", help="channel count (repeatable)")

    _with_checkpoint(sub.add_parser("frozen-norm", parents=[common], help="frozen vs per-sample normalization"))

    p = sub.add_parser("bench", parents=[common], help="time sequential vs two-pass generation")
    p.add_argument("--channels", type=int, action="append", dest="cs")
    p.add_argument("--sizes", type=int, action="append")
    p.add_argument("--threads", type=int, action="append")
    p.add_argument("--repeats", type=int, default=3)
    return parser


def _run_config(args) -> RunConfig:
    if args.config is not None:
        return load_config(args.config, args.set, args.seed)
    return from_dict({}, args.set, args.seed)


def _model(args, rc: RunConfig) -> Checkpoint:
    if args.checkpoint is not None:
        return Checkpoint.load(args.checkpoint, rc.model)
    return Checkpoint(rc.model, init_params(rc.model), None, 0)


def _finola_only(ckpt: Checkpoint):
    if ckpt.config.variant != "finola":
        raise ConfigError(f"this command needs model.variant=finola, got {ckpt.config.variant!r}")


def cmd_train(args, rc, out):
    images = synth_dataset(rc.data)
    resume = Checkpoint.load(args.resume, rc.model) if args.resume else None
    ckpt, m = train(rc.model, rc.train, images, resume=resume, out_dir=out, stop_step=args.stop_step)
    ckpt.save(out / "checkpoint.fnla")
    write_csv(m.loss_rows(), out / "loss.csv", ["step", "loss", "lr"])
    metric = "psnr" if rc.model.variant == "finola" else "masked_mse"
    write_csv(m.eval_rows(metric), out / "eval.csv", ["step", metric])
    (out / "run.json").write_text(json.dumps({"config": rc.to_dict(), "final_step": ckpt.step, "wall_clock_s": m.wall_clock}, indent=2))
    final = f"{m.evals[-1][1]:.4f}" if m.evals else "n/a"
    print(f"trained to step {ckpt.step}; final eval {metric}={final}")


def cmd_reconstruct(args, rc, out):
    ckpt = _model(args, rc)
    images = synth_dataset(rc.data)
    specs = masks_for(rc.model, 0, range(len(images)))
    recon = np.clip(reconstruct(ckpt.params, rc.model, images, specs), 0.0, 1.0)
    write_ppm(out / "originals.ppm", tile(images))
    write_ppm(out / "reconstruction.ppm", tile(recon))
    write_csv([{"image": i, "psnr": psnr(r, x)} for i, (r, x) in enumerate(zip(recon, images))], out / "psnr.csv")


def cmd_generate(args, rc, out):
    ckpt = _model(args, rc)
    _finola_only(ckpt)
    cfg = ckpt.config
    images = synth_dataset(rc.data)
    if not 0 <= args.image < len(images):
        raise ConfigError(f"--image must be in [0, {len(images)})")
    q = encode(ckpt.params, cfg, images[args.image:args.image + 1])[0]
    grid = generate_parallel(q, coeffs_from_params(ckpt.params, cfg), cfg.grid, cfg.grid)
    save_grid(grid, out / "grid.fgrd")
    img = np.clip(decode_grid(ckpt.params, cfg, grid.data[None])[0], 0.0, 1.0)
    write_ppm(out / "generated.ppm", img)
    print(f"psnr {psnr(img, images[args.image]):.4f} dB")


def cmd_analyze_pde(args, rc, out):
    hs = args.hs or [0.2, 0.1, 0.05]
    seed = rc.model.seed
    tables = []
    for i in range(args.instances):
        rng = make_rng(seed, 11, i)
        coeffs = compatible_coeffs(args.channels, rng)
        tables.append(residual_table(rng.standard_normal(args.channels), coeffs, hs, (args.extent, args.extent)))
    rows = []
    for j, h in enumerate(hs):
        rows.append({
            "h": float(h),
            "clairaut": float(np.mean([t[j]["clairaut"] for t in tables])),
            "laplacian": float(np.mean([t[j]["laplacian"] for t in tables])),
        })
    write_csv(rows, out / "pde_residuals.csv")


def cmd_curvature(args, rc, out):
    ckpt = _model(args, rc)
    images = synth_dataset(rc.data)
    specs = masks_for(rc.model, 0, range(len(images)))
    reports = curvature_reports(ckpt.params, rc.model, images, specs)
    rows = [
        {"image": i, "rank": r, "channel": int(c), "score": float(rep.score[c])}
        for i, rep in enumerate(reports)
        for r, c in enumerate(rep.ranking)
    ]
    write_csv(rows, out / "curvature_channels.csv")
    write_csv(curvature_histogram(reports, min(args.top_k, rc.model.channels)), out / "curvature_hist.csv")


def cmd_embed(args, rc, out):
    ckpt = _model(args, rc)
    _finola_only(ckpt)
    images = synth_dataset(rc.data)
    res = embedding_experiments(ckpt, images, make_rng(rc.model.seed, 13), out, n_samples=args.samples, ks=args.ks)
    stats = res["stats"]
    write_csv([{"channel": i, "mean": float(m)} for i, m in enumerate(stats.mean)], out / "embedding_mean.csv")
    c = stats.cov.shape[0]
    write_csv([{"i": i, "j": j, "cov": float(stats.cov[i, j])} for i in range(c) for j in range(c)], out / "embedding_cov.csv")


def cmd_sweep(args, rc, out):
    rows = channel_sweep(rc.model, rc.train, synth_dataset(rc.data), args.cs or [8, 16, 32])
    write_csv(rows, out / "sweep.csv")


def cmd_frozen(args, rc, out):
    ckpt = _model(args, rc)
    _finola_only(ckpt)
    normal, frozen = frozen_norm_eval(ckpt, synth_dataset(rc.data))
    write_csv([{"psnr_normalized": normal, "psnr_frozen": frozen, "gap": normal - frozen}], out / "frozen_norm.csv")


def cmd_bench(args, rc, out):
    rows = bench(args.cs or [16, 64], args.sizes or [16, 32], args.threads or [1, 2], seed=rc.model.seed, repeats=args.repeats)
    write_csv(rows, out / "bench.csv")


COMMANDS = {
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "generate": cmd_generate,
    "analyze-pde": cmd_analyze_pde,
    "curvature": cmd_curvature,
    "embed": cmd_embed,
    "sweep-channels": cmd_sweep,
    "frozen-norm": cmd_frozen,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        rc = _run_config(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"finola: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, rc, args.out_dir)
    except (ConfigError, FingerprintMismatch) as e:
        print(f"finola: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - any failure past parsing is a runtime error
        log.debug("failure", exc_info=True)
        print(f"finola {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
