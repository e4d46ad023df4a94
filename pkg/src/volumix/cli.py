"""Command-line entry point.

Exit codes: 0 ok, 1 usage, 2 verification failure, 3 runtime or data error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_RUNTIME = 0, 1, 2, 3
VARIANTS = ("tsmamba", "tshydra", "mamba_swin", "mambaout")


class UsageError(Exception):
    pass


class VerificationFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _apply_thread_cap():
    n = os.environ.get("VOLUMIX_THREADS", "1")
    if not n.isdigit() or int(n) < 1:
        raise UsageError(f"VOLUMIX_THREADS must be a positive integer, got {n!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = n


def _run_config(args):
    from .config import RunConfig

    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    for key, attr in (("variant", "variant"), ("epochs", "epochs"), ("lr", "lr"), ("precision", "precision"),
                      ("regime", "regime"), ("size", "size"), ("num_classes", "num_classes"),
                      ("noise_std", "noise_std"), ("roi_fraction", "roi_fraction"),
                      ("n_distractors", "n_distractors"), ("n_train", "n_train"), ("n_val", "n_val"),
                      ("n_test", "n_test"), ("seed", "seed")):
        val = getattr(args, attr, None)
        if val is not None:
            cfg.set(key, tuple(val) if isinstance(val, list) else val)
    return cfg


def _preamble(args, cfg) -> None:
    """First output line of every command: seed and a digest of the effective configuration."""
    skip = {"func", "config"}
    blob = json.dumps({"command": args.command, "args": {k: str(v) for k, v in sorted(vars(args).items())
                                                         if k not in skip},
                       "config": cfg.digest()}, sort_keys=True)
    digest = hashlib.sha256(blob.encode()).hexdigest()[:12]
    print(f"# seed={cfg.seed} config_digest={digest}", flush=True)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg):
    from .synthdata import dataset

    spec = cfg.phantom_spec()
    n_train, n_val, n_test = cfg.splits()
    manifest = dataset(spec, n_train, n_val, n_test, args.out)
    print(f"wrote {n_train + n_val + n_test} volumes, manifest {manifest}")
    return EXIT_OK


def cmd_train(args, cfg):
    from .trainer import train

    seg, tc = cfg.seg_config(), cfg.train_config()
    seg.validate()
    tc.validate()
    res = train(tc, seg, args.manifest, args.out, log=print)
    print(f"best val DSC {res.best_val_dsc:.4f} at epoch {res.best_epoch}; checkpoint {res.checkpoint}; "
          f"log {res.log}; params {res.n_params}")
    return EXIT_OK


def cmd_eval(args, cfg):
    import numpy as np

    from . import metrics
    from .synthdata import VolumeFile, read_manifest
    from .trainer import load_model, predict

    if (args.ckpt is None) == (args.pred is None):
        raise UsageError("eval needs exactly one of --ckpt or --pred")
    gt = [e for e in read_manifest(args.manifest) if e.split == args.split]
    if not gt:
        raise ValueError(f"manifest {args.manifest} has no {args.split!r} volumes")
    net = None
    if args.ckpt:
        net = load_model(args.ckpt)
        num_classes = net.cfg.num_classes
    else:
        preds = [e for e in read_manifest(args.pred) if e.split == args.split]
        if len(preds) != len(gt):
            raise ValueError(f"--pred lists {len(preds)} {args.split} volumes, ground truth has {len(gt)}")
    reports = []
    for i, e in enumerate(gt):
        lab = VolumeFile.load(e.label)
        if net is not None:
            p = predict(net, VolumeFile.load(e.image).data)
        else:
            p = VolumeFile.load(preds[i].label).data
        if net is None:
            num_classes = args.num_classes or int(max(lab.data.max(), p.max())) + 1
            num_classes = max(num_classes, 2)
        reports.append(metrics.evaluate(p, lab.data, num_classes, lab.spacing, args.tau))
    rep = metrics.average_reports(reports)
    csv_text = metrics.report_csv({args.name: rep})
    print(csv_text, end="")
    if args.out:
        Path(args.out).write_text(csv_text)
    m = rep.mean
    print(f"mean foreground: DSC {m['dsc']:.4f}  mIoU {m['miou']:.4f}  NSD {m['nsd']:.4f} (tau {rep.tau_mm:g} mm)")
    if not all(np.isfinite(v) for v in m.values()):
        raise ValueError("non-finite metric")
    return EXIT_OK


def cmd_gradcheck(args, cfg):
    from . import gradchecks

    names = None if args.module == "all" else [args.module]
    failed = []
    for name in (list(gradchecks.CHECKS) if names is None else names):
        err, tol = gradchecks.run([name], seed=cfg.seed)[name]
        ok = err < tol
        print(f"{name:12s} max_rel_err {err:.3e}  tol {tol:.0e}  {'ok' if ok else 'FAIL'}", flush=True)
        if not ok:
            failed.append(name)
    if failed:
        raise VerificationFailure(f"gradient check failed: {', '.join(failed)}")
    return EXIT_OK


def cmd_oracle_check(args, cfg):
    from . import oracles

    tol = args.tol
    failed = []
    for name, fn in oracles.ORACLES.items():
        err = float(fn())
        ok = err < tol
        print(f"{name:36s} max_abs_err {err:.3e}  {'ok' if ok else 'FAIL'}", flush=True)
        if not ok:
            failed.append(name)
    if failed:
        raise VerificationFailure(f"oracle mismatch: {', '.join(failed)}")
    return EXIT_OK


def cmd_bench(args, cfg):
    from . import bench

    kernels = bench.KERNELS if args.kernel == ["all"] else args.kernel
    rows = bench.run(kernels, args.lengths, N=args.N, d=args.d, seed=cfg.seed)
    text = bench.to_csv(rows)
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


def cmd_compare(args, cfg):
    from .metrics import table_grid
    from .trainer import compare_variants

    seg, tc = cfg.seg_config(), cfg.train_config()
    seg.validate()
    tc.validate()
    rows = compare_variants(seg, tc, args.manifest, args.out,
                            variants=args.variants, tau=args.tau, log=print)
    print(table_grid(rows, ("dsc", "miou", "nsd", "params", "seconds")), end="")
    return EXIT_OK


def cmd_report(args, cfg):
    import csv

    from . import plotting
    from .metrics import table_grid
    from .trainer import COMPARE_HEADER, write_compare_csv

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    compare_rows, bench_rows, logs = [], [], {}
    for p in map(Path, args.inputs):
        with open(p, newline="") as fh:
            rows = list(csv.DictReader(fh))
        head = set(rows[0]) if rows else set()
        if set(COMPARE_HEADER) <= head:
            from .trainer import read_compare_csv

            new = read_compare_csv(p)
            compare_rows += new
            for r in new:
                log = p.parent / r["variant"] / "train_log.csv"
                if log.exists():
                    logs[r["variant"]] = log
        elif {"kernel", "L", "wall_ns"} <= head:
            bench_rows += rows
        elif {"epoch", "train_loss", "val_dsc"} <= head:
            logs[p.parent.name or p.stem] = p
        else:
            raise ValueError(f"{p}: unrecognised CSV (columns {sorted(head)})")
    written = []
    if compare_rows:
        grid = table_grid(compare_rows, ("dsc", "miou", "nsd", "params", "seconds"))
        print(grid, end="")
        (out / "report.txt").write_text(grid)
        write_compare_csv(compare_rows, out / "report.csv")
        written += [out / "report.txt", out / "report.csv",
                    plotting.metric_bars(compare_rows, out / "report_metrics.png")]
    if logs:
        written.append(plotting.training_curves(logs, out / "report_training.png"))
    if bench_rows:
        written.append(plotting.bench_scaling(bench_rows, out / "report_bench.png"))
    if not written:
        raise ValueError("no report inputs")
    for w in written:
        print(f"wrote {w}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="volumix", description="Volumetric segmentation lab with state-space and convolutional mixers.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        sp.add_argument("--seed", type=int, help="global seed (default 0 or config value)")
        if config:
            sp.add_argument("--config", help="key = value run configuration file")

    g = sub.add_parser("gen-data", help="write a synthetic phantom dataset and manifest")
    common(g)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--regime", choices=["small_roi", "multi_organ"])
    g.add_argument("--size", type=int, nargs="+", help="D H W (or one value for a cube)")
    g.add_argument("--num-classes", dest="num_classes", type=int)
    g.add_argument("--noise-std", dest="noise_std", type=float)
    g.add_argument("--roi-fraction", dest="roi_fraction", type=float, nargs=2, metavar=("LO", "HI"))
    g.add_argument("--n-distractors", dest="n_distractors", type=int)
    g.add_argument("--n-train", dest="n_train", type=int)
    g.add_argument("--n-val", dest="n_val", type=int)
    g.add_argument("--n-test", dest="n_test", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one variant, keep the best-validation checkpoint")
    common(t)
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True, help="output directory (best.ckpt, train_log.csv)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--precision", choices=["train", "verify"])
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint (or saved predictions) on a manifest split")
    common(e)
    e.add_argument("--ckpt", help="checkpoint to evaluate")
    e.add_argument("--pred", help="manifest whose label column holds predictions")
    e.add_argument("--manifest", required=True)
    e.add_argument("--tau", type=float, help="NSD tolerance in mm (default: largest voxel spacing)")
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--num-classes", dest="num_classes", type=int, help="class count for --pred scoring")
    e.add_argument("--name", default="eval", help="row label in the CSV")
    e.add_argument("--out", help="also write the metrics CSV here")
    e.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    common(gc, config=False)
    gc.add_argument("--module", default="all",
                    choices=["all", "gsc", "tom", "tsmamba", "tshydra", "mamba_swin", "mambaout", "fue",
                             "decoder", "loss_model"])
    gc.set_defaults(func=cmd_gradcheck)

    o = sub.add_parser("oracle-check", help="compare fast kernels against dense oracles")
    common(o, config=False)
    o.add_argument("--tol", type=float, default=1e-10)
    o.set_defaults(func=cmd_oracle_check)

    b = sub.add_parser("bench", help="time mixer kernels over sequence lengths (CSV on stdout)")
    common(b, config=False)
    b.add_argument("--kernel", nargs="+", default=["all"], choices=["all", "scan", "qs", "dense"])
    b.add_argument("--lengths", type=int, nargs="+", default=[256, 512, 1024, 2048])
    b.add_argument("--N", type=int, default=4, help="state dimension")
    b.add_argument("--d", type=int, default=8, help="channels")
    b.add_argument("--out", help="also write the CSV here")
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("compare", help="train and test all variants under one configuration")
    common(c)
    c.add_argument("--manifest", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--variants", nargs="+", choices=VARIANTS)
    c.add_argument("--epochs", type=int)
    c.add_argument("--lr", type=float)
    c.add_argument("--tau", type=float)
    c.set_defaults(func=cmd_compare)

    r = sub.add_parser("report", help="merge result CSVs into a comparison grid with figures")
    common(r, config=False)
    r.add_argument("inputs", nargs="+", help="compare / bench / train_log CSV files")
    r.add_argument("--out", required=True, help="directory for report.txt, report.csv and figures")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _apply_thread_cap()
        from .config import ConfigError

        try:
            cfg = _run_config(args)
        except (ConfigError, OSError) as exc:
            raise UsageError(str(exc)) from None
        _preamble(args, cfg)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"volumix: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except VerificationFailure as exc:
        print(f"volumix: verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # data, I/O and numerical errors
        print(f"volumix: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
