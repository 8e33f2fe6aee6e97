"""Command-line entry point: ``featsr synth | train | sr | eval | check``.

Exit codes: 0 success, 1 usage or configuration error, 2 divergence during
training or sampling, 3 diagnostic failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import diagnostics, pipeline, scorenet, synthdata
from .config import ENV_PREFIX, RunConfig
from .errors import ConfigError, DivergenceError, FormatError
from .numerics import write_tensor
from .solver import write_trace

log = logging.getLogger("featsr")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECK = 0, 1, 2, 3


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="featsr",
        description="Feature-conditioned score-SDE super-resolution on synthetic faces.",
        epilog=f"Any config key can also be set through the environment as {ENV_PREFIX}<KEY>.",
    )
    ap.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic identity dataset")
    _common(p)
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")

    p = sub.add_parser("train", help="train the score network")
    _common(p)
    p.add_argument("--out", required=True, help="run directory (checkpoint, loss trace, figures)")
    p.add_argument("--dataset", help="dataset directory (required when train_source = dataset)")
    p.add_argument("--resume", help="training checkpoint to continue from")

    p = sub.add_parser("sr", help="super-resolve one LR probe")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--probe", required=True, help="LR probe image (PGM)")
    p.add_argument("--features", nargs="*", default=[], help="LR images to extract and merge features from")
    p.add_argument("--out", required=True, help="output PGM")
    p.add_argument("--features-only", action="store_true", help="condition on the features alone (LR zeroed)")
    p.add_argument("--trace", help="write a per-step solver trace CSV")

    p = sub.add_parser("eval", help="super-resolve all probes of a dataset and report identity metrics")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--single-feature", action="store_true", help="add the N=1 feature ablation row")
    p.add_argument("--unconditional-features", action="store_true", help="add the zeroed-feature ablation row")
    p.add_argument("--trace", help="write the solver trace of the first chunk (FASR row)")

    p = sub.add_parser("check", help="run the diagnostic suite")
    _common(p)
    p.add_argument("--corrupt-layer", help=argparse.SUPPRESS)
    return ap


def _load_net(cfg: RunConfig, path) -> scorenet.ScoreNetwork:
    net = scorenet.load(path, cfg.schedule(), use_ema=cfg["use_ema"])
    if net.arch != cfg.arch():
        raise ConfigError(f"checkpoint architecture {net.arch} does not match the configured {cfg.arch()}")
    return net


def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"{out} is not empty (use --force)")
    try:
        ds = synthdata.build_dataset(cfg["n_identities"], cfg["n_images_per_identity"], cfg["data_seed"],
                                     cfg["scale"], cfg["image_size"], cfg["extractor_seed"])
    except ValueError as e:
        raise ConfigError(str(e)) from None
    out.mkdir(parents=True, exist_ok=True)
    synthdata.save_dataset(ds, out)
    cfg.write(out)
    print(f"wrote {len(ds)} identities to {out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    from . import plots, training

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = None
    if args.dataset is not None:
        if not (Path(args.dataset) / "identities.csv").exists():
            raise ConfigError(f"{args.dataset} is not a dataset directory")
        dataset = synthdata.load_dataset(args.dataset, cfg["scale"], cfg["extractor_seed"], cfg["data_seed"])
    source = cfg.training_source(dataset)
    arch = cfg.arch()
    net = scorenet.ScoreNetwork.create(arch, seed=cfg["init_seed"], sched=cfg.schedule())
    cfg.write(out)
    try:
        state, _ = training.train(net, source, cfg.train_config(), out_dir=out, resume=args.resume)
    except DivergenceError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    plots.loss_curve(training.read_trace(out / "loss_trace.csv"), out / "loss.png")
    print(f"trained to step {state.step}; checkpoint {out / 'checkpoint.fasr'}")
    return EXIT_OK


def cmd_sr(args, cfg: RunConfig) -> int:
    net = _load_net(cfg, args.checkpoint)
    probe = synthdata.read_pgm(args.probe)
    feats = [synthdata.read_pgm(p) for p in args.features]
    F = pipeline.condition_feature(feats, "merged", cfg["extractor_seed"], net.arch.feature_dim, probe,
                                   cfg["renormalize"])
    trace = [] if args.trace else None
    sr = pipeline.super_resolve(net, probe[None], F[None], cfg.sampler_config(), cfg["sample_seed"],
                                features_only=args.features_only, trace=trace)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    synthdata.write_pgm(out, sr[0])
    if trace is not None:
        write_trace(args.trace, trace)
    cfg.write(out.parent, out.stem + ".config.txt")
    print(f"wrote {out}")
    return EXIT_OK


def _print_table(reports: dict) -> None:
    cols = ("AUC", "Rank-1", "Rank-5", "Rank-10", "PSNR")
    print(f"{'row':<24}" + "".join(f"{c:>9}" for c in cols))
    for row, rep in reports.items():
        print(f"{row:<24}" + "".join(f"{rep[c]:>9.4f}" for c in cols))


def write_report(path, reports: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "AUC", "Rank-1", "Rank-5", "Rank-10", "PSNR"])
        for row, rep in reports.items():
            w.writerow([row] + [repr(float(rep[c])) for c in ("AUC", "Rank-1", "Rank-5", "Rank-10", "PSNR")])


def cmd_eval(args, cfg: RunConfig) -> int:
    from . import evalkit, plots

    net = _load_net(cfg, args.checkpoint)
    if not (Path(args.dataset) / "identities.csv").exists():
        raise ConfigError(f"{args.dataset} is not a dataset directory")
    ds = synthdata.load_dataset(args.dataset, cfg["scale"], cfg["extractor_seed"], cfg["data_seed"])
    rows = [pipeline.ROW_FASR]
    if args.single_feature:
        rows.append(pipeline.ROW_SINGLE)
    if args.unconditional_features:
        rows.append(pipeline.ROW_UNCOND)
    res = pipeline.evaluate(net, ds, cfg.sampler_config(), cfg["sample_seed"], rows, cfg["sample_chunk"],
                            cfg["renormalize"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "report.csv", res.reports)
    for row, sim in res.sims.items():
        write_tensor(out / f"similarity_{row}.tnsr", sim.values)
    for row, imgs in res.images.items():
        if row != pipeline.ROW_LR:
            np.save(out / f"sr_{row}.npy", imgs)
    plots.cmc_curves({row: evalkit.cmc_curve(sim) for row, sim in res.sims.items()}, out / "cmc.png")
    grid = {"gallery": ds.gallery, "probe HR": ds.probe_hr}
    grid.update(res.images)
    plots.sample_grid(grid, out / "samples.png")
    if args.trace:
        trace: list = []
        F = pipeline.condition_feature(ds.records[0].feature_images, "merged", ds.extractor_seed,
                                       net.arch.feature_dim, renormalize=cfg["renormalize"])
        pipeline.super_resolve(net, ds.probes[:1], F[None], cfg.sampler_config(), cfg["sample_seed"], trace=trace)
        write_trace(args.trace, trace)
    cfg.write(out)
    _print_table(res.reports)
    return EXIT_OK


def cmd_check(args, cfg: RunConfig) -> int:
    results = diagnostics.run_all(cfg.schedule, corrupt=args.corrupt_layer)
    failed = [r for r in results if not r.ok]
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name}  {r.detail}")
    if failed:
        print("failed checks: " + ", ".join(r.name for r in failed), file=sys.stderr)
        return EXIT_CHECK
    print(f"all {len(results)} checks passed")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "sr": cmd_sr, "eval": cmd_eval, "check": cmd_check}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.load(args.config, args.set)
        if args.command != "check":
            cfg.schedule()
        return COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
