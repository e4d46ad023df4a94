"""End-to-end acceptance checks; each test records one PASS/FAIL line shown in the terminal summary."""
import csv
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from volumix import bench, gradchecks, oracles, seqmix
from volumix import metrics as M
from volumix import tensor as T
from volumix.cli import main
from volumix.rng import SplitMix64
from volumix.segnet import SegConfig, Stem, build_model
from volumix.synthdata import PhantomSpec, dataset
from volumix.tensor import Tensor
from volumix.trainer import TrainConfig, evaluate_split, load_model, load_split, train


def record(n: int, title: str, ok: bool, detail: str):
    line = f"criterion {n} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line


def test_1_oracle_equivalence():
    t0 = time.perf_counter()
    with T.no_grad():
        scan = oracles.scan_vs_dense(200)
        qs = oracles.quasi_vs_dense(200)
    secs = time.perf_counter() - t0
    record(1, "scan / quasiseparable vs dense (200 cases, f64)", scan < 1e-10 and qs < 1e-10 and secs < 60,
           f"scan {scan:.2e}, qs {qs:.2e}, {secs:.1f}s")


def test_2_decomposition():
    with T.no_grad():
        vs_dense, vs_matmul = oracles.decomposition_vs_dense(200)
    record(2, "shift/flip/semiseparable composition", max(vs_dense, vs_matmul) < 1e-10,
           f"vs dense {vs_dense:.2e}, vs matmul {vs_matmul:.2e}")


def test_3_gradient_suite():
    t0 = time.perf_counter()
    res = gradchecks.run("all")
    secs = time.perf_counter() - t0
    ok = all(err < tol for err, tol in res.values()) and secs < 600
    worst = max(res, key=lambda k: res[k][0] / res[k][1])
    record(3, f"finite-difference checks ({len(res)} modules)", ok,
           f"worst {worst} {res[worst][0]:.1e} (tol {res[worst][1]:g}), {secs:.0f}s")


def _mask_pair(seed):
    r = SplitMix64(seed)
    return (r.uniform((9, 8, 7)) < 0.4).astype(np.uint8), (r.uniform((9, 8, 7)) < 0.4).astype(np.uint8)


def test_4_metric_identities():
    ident = 0.0
    for s in range(100):
        a, b = _mask_pair(s)
        iou = M.miou(a, b, 1)
        ident = max(ident, abs(M.dsc(a, b, 1) - 2 * iou / (1 + iou)))
    mono = True
    for s in range(20):
        a, b = _mask_pair(1000 + s)
        vals = [M.nsd(a, b, 1, t, (1.0, 1.5, 0.7)) for t in (0.3, 0.8, 1.2, 2.0, 3.5)]
        mono &= all(x <= y for x, y in zip(vals, vals[1:]))
    a, b = _mask_pair(7)
    axioms = (M.dsc(a, a, 1) == M.miou(a, a, 1) == M.nsd(a, a, 1, 1.0) == 1.0
              and M.dsc(a, b, 1) == M.dsc(b, a, 1)
              and M.nsd(a, b, 1, 1.0) == M.nsd(b, a, 1, 1.0)
              and all(0 <= f(a, b, 1) <= 1 for f in (M.dsc, M.miou)))
    record(4, "DSC/IoU identity, NSD monotone in tau, axioms", ident < 1e-12 and mono and axioms,
           f"identity err {ident:.1e}, monotone {mono}, axioms {axioms}")


def test_5_structure():
    stem = Stem(SplitMix64(0), 1, 48, np.float32)
    with T.no_grad():
        out = stem(Tensor(np.zeros((1, 32, 32, 32), np.float32))).shape
    _, p_out = build_model(SegConfig(variant="mambaout"))
    _, p_ts = build_model(SegConfig(variant="tsmamba"))
    record(5, "stem shape and MambaOut < TSMamba params", out == (48, 16, 16, 16) and p_out < p_ts,
           f"stem {out}, params mambaout {p_out:,} < tsmamba {p_ts:,}")


def test_6_causality():
    rng = SplitMix64(6)
    L, d = 16, 3
    scan_causal, qs_noncausal = True, True
    for t in range(1, L):
        p = seqmix.random_ssm_params(rng, L, d, 4)
        q = seqmix.random_quasi_params(rng, L, 4, d)
        x = rng.normal((L, d))
        x2 = x.copy()
        x2[t] += 1.0
        with T.no_grad():
            y, y2 = seqmix.ssm_scan(x, p).data, seqmix.ssm_scan(x2, p).data
            z, z2 = seqmix.quasiseparable_matmul(x, q).data, seqmix.quasiseparable_matmul(x2, q).data
        scan_causal &= bool(np.array_equal(y[:t], y2[:t]))
        qs_noncausal &= bool(np.abs(z[:t] - z2[:t]).max() > 1e-8)
    record(6, "scan causal, quasiseparable bidirectional", scan_causal and qs_noncausal,
           f"scan prefix unchanged {scan_causal}, qs prefix changed {qs_noncausal}")


@pytest.mark.slow
def test_7_learning_smoke_and_compare(tmp_path):
    man = dataset(PhantomSpec(seed=0), 32, 4, 4, tmp_path / "data")
    t0 = time.perf_counter()
    res = train(TrainConfig(epochs=50, seed=0), SegConfig(variant="mambaout"), man, tmp_path / "mambaout")
    test = evaluate_split(load_model(res.checkpoint), load_split(man, "test")).mean["dsc"]
    minutes = (time.perf_counter() - t0) / 60

    # full-size four-variant training is hours on one core; the compare path runs at reduced width and size
    small = tmp_path / "small"
    assert main(["gen-data", "--out", str(small), "--size", "16", "--roi-fraction", "0.01", "0.03",
                 "--n-train", "4", "--n-val", "1", "--n-test", "2"]) == 0
    cfg = tmp_path / "small.cfg"
    cfg.write_text("channels = 8 16\nstate_dim = 2\nwindow = 2\nheads = 2\nepochs = 2\n")
    cmp_dir, rep = tmp_path / "cmp", tmp_path / "rep"
    rc = main(["compare", "--config", str(cfg), "--manifest", str(small / "manifest.tsv"), "--out", str(cmp_dir)])
    rc = rc or main(["report", str(cmp_dir / "compare.csv"), "--out", str(rep)])
    rows = list(csv.DictReader(open(rep / "report.csv"))) if rc == 0 else []
    grid_ok = rc == 0 and len(rows) == 4 and (rep / "report_metrics.png").exists()
    order = " > ".join(r["variant"] for r in sorted(rows, key=lambda r: -float(r["dsc"])))
    record(7, "MambaOut test DSC >= 0.60 in 50 epochs; compare grid", test >= 0.60 and minutes <= 45 and grid_ok,
           f"test DSC {test:.3f} (best epoch {res.best_epoch}), {minutes:.1f} min on this host, "
           f"compare rows {len(rows)}, reduced-scale order {order}")


@pytest.mark.slow
def test_8_scaling():
    rows = bench.run(lengths=bench.DEFAULT_LENGTHS)
    g = {k: bench.growth_ratios(rows, k) for k in bench.KERNELS}
    ok = max(g["scan"]) <= 2.5 and max(g["qs"]) <= 2.5 and min(g["dense"]) >= 3.5
    detail = ", ".join(f"{k} x{'/'.join(f'{r:.2f}' for r in v)}" for k, v in g.items())
    record(8, "per-doubling growth (scan, qs <= 2.5; dense >= 3.5)", ok, detail)
