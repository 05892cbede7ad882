"""Command line: ``drgraduate {synth,train,predict,explain,eval,stats,report}``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import autodiff as ad
from . import imageio, pipeline, records, synthdata
from .backbone import CheckpointError
from .config import ConfigError, RunConfig
from .train import TrainingAborted, load_images, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "GRADUATE_THREADS"

log = logging.getLogger("drgraduate")


def _limit_threads():
    """Cap BLAS and compiled-kernel threads at $GRADUATE_THREADS; returns a context to keep alive."""
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    import numba
    from threadpoolctl import threadpool_limits
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return threadpool_limits(limits=n)


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def cmd_synth(args, cfg):
    if not 0 <= args.defocus_fraction <= 1:
        raise ConfigError(f"--defocus-fraction must lie in [0, 1], got {args.defocus_fraction}")
    mix = synthdata.BALANCED if args.mix == "balanced" else synthdata.SCREENING_SKEW
    spec = synthdata.SynthSpec(side=args.side or cfg.input_side, mix=mix, counting_mode=args.counting_mode,
                               defocus_fraction=args.defocus_fraction, seed=cfg.seed)
    deg = None
    if args.blur or args.contrast_factor:
        deg = synthdata.DegradationSpec(blur_std=args.blur, contrast_factor=args.contrast_factor)
    path = synthdata.write_dataset(spec, args.count, args.out_dir, masks=not args.no_masks,
                                   comment=f"config_digest={cfg.digest()}", degradation=deg)
    print(path)


def cmd_train(args, cfg):
    rows = imageio.read_manifest(args.manifest)
    images = load_images([p for _, p, _ in rows], cfg.input_side)
    res = train(cfg, images, [g for _, _, g in rows], args.out_dir,
                progress=lambda r: print(f"epoch {r['epoch']:3d}  loss {r['train_loss']:.4f}  "
                                         f"val_kappa {r['val_kappa']}", flush=True))
    print(f"final checkpoint {res.final_path}; best val kappa {res.best_kappa} at epoch {res.best_epoch}")


def cmd_predict(args, cfg):
    net = pipeline.load_model(cfg, args.checkpoint)
    recs, _, _ = pipeline.predict_manifest(net, cfg, args.manifest)
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, "predictions.csv")
    records.write_predictions(path, recs, cfg.digest())
    print(path)


def cmd_explain(args, cfg):
    net = pipeline.load_model(cfg, args.checkpoint)
    _, report = pipeline.explain_manifest(net, cfg, args.manifest, args.out_dir, args.masks, args.threshold)
    if report is not None:
        for k, v in report.values().items():
            print(f"{k} {v:.3f}")


def cmd_eval(args, cfg):
    recs = records.read_predictions(args.predictions)
    # outputs carry the digest of the run that made the predictions, else that of the current config
    digest = imageio.csv_comment(args.predictions) or ""
    digest = digest.split("=", 1)[1] if digest.startswith("config_digest=") else cfg.digest()
    summary = pipeline.write_eval(recs, args.out_dir, cfg, digest)
    for k, v in summary.items():
        print(f"{k} {v}")


def cmd_stats(args, cfg):
    if len(args.predictions) < 2:
        raise ConfigError("stats needs at least two prediction files (reference first)")
    names = args.names or args.predictions
    if len(names) != len(args.predictions) or len(set(names)) != len(names):
        raise ConfigError("--names needs one distinct name per prediction file")
    groups = {n: np.array([r.u for r in records.read_predictions(p)]) for n, p in zip(names, args.predictions)}
    for row in pipeline.write_stats(groups, args.out_dir, cfg.digest()):
        print(",".join(str(row[k]) for k in row))


def cmd_report(args, cfg):
    net = pipeline.load_model(cfg, args.checkpoint)
    os.makedirs(args.out_dir, exist_ok=True)
    cfg.save(os.path.join(args.out_dir, "run_config.txt"))
    recs, report = pipeline.explain_manifest(net, cfg, args.manifest, os.path.join(args.out_dir, "explain"),
                                             args.masks)
    records.write_predictions(os.path.join(args.out_dir, "predictions.csv"), recs, cfg.digest())
    if any(r.true is not None for r in recs):
        pipeline.write_eval(recs, os.path.join(args.out_dir, "eval"), cfg, cfg.digest())
    print(args.out_dir)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value run configuration file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out-dir", default=".", help="directory for outputs")
    p = argparse.ArgumentParser(prog="drgraduate", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--side", type=int)
    s.add_argument("--mix", choices=("skew", "balanced"), default="skew")
    s.add_argument("--counting-mode", action="store_true")
    s.add_argument("--no-masks", action="store_true")
    s.add_argument("--defocus-fraction", type=float, default=0.0,
                   help="share of images rendered out of focus, labels unchanged")
    s.add_argument("--blur", type=float, default=0.0, help="Gaussian blur std at 640 px")
    s.add_argument("--contrast-factor", type=float, help="new maximum intensity as a fraction of the old")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_train)

    for name, func, helptext in (("predict", cmd_predict, "write predictions.csv"),
                                 ("explain", cmd_explain, "write explanation maps"),
                                 ("report", cmd_report, "predictions, evaluation and maps in one directory")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--manifest", required=True)
        if name != "predict":
            s.add_argument("--masks", help="directory of <id>_g<c>.pbm ground-truth masks")
        if name == "explain":
            s.add_argument("--threshold", type=float)
        s.set_defaults(func=func)

    s = sub.add_parser("eval", parents=[common], help="kappa, confusion and uncertainty tables")
    s.add_argument("--predictions", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("stats", parents=[common], help="Kruskal-Wallis and Cohen's d on uncertainties")
    s.add_argument("--predictions", nargs="+", required=True, help="reference file first")
    s.add_argument("--names", nargs="+", help="group names, default the file paths")
    s.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    limiter = None
    try:
        limiter = _limit_threads()
        cfg = _config(args)
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (imageio.DataError, CheckpointError, synthdata.PlacementError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingAborted, ad.NonFiniteError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        if limiter is not None:
            limiter.unregister()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
