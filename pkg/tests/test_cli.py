import csv
import io
from pathlib import Path

import pytest

from volumix.cli import build_parser, main

SUBCOMMANDS = ["gen-data", "train", "eval", "gradcheck", "oracle-check", "bench", "compare", "report"]
TINY = ["--size", "16", "--roi-fraction", "0.01", "0.03", "--n-train", "2", "--n-val", "1", "--n-test", "1"]


def _flags(sub):
    sp = build_parser()._subparsers._group_actions[0].choices[sub]
    return [o for a in sp._actions for o in a.option_strings if o.startswith("--")]


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen-data", "--out", str(out), *TINY]) == 0
    return out


@pytest.mark.parametrize("sub", SUBCOMMANDS)
def test_help_lists_every_flag(sub, capsys):
    assert main([sub, "--help"]) == 0
    text = capsys.readouterr().out
    for flag in _flags(sub):
        assert flag in text


@pytest.mark.parametrize("sub", SUBCOMMANDS)
def test_unknown_flag_exits_1_without_work(sub, tmp_path, capsys):
    out = tmp_path / "never"
    assert main([sub, "--out", str(out), "--bogus"]) == 1
    assert not out.exists()
    assert "error" in capsys.readouterr().err


def test_no_subcommand_is_usage_error():
    assert main([]) == 1


def test_preamble_printed_first(tiny_data, capsys):
    main(["eval", "--pred", str(tiny_data / "manifest.tsv"), "--manifest", str(tiny_data / "manifest.tsv")])
    first = capsys.readouterr().out.splitlines()[0]
    assert first.startswith("# seed=0 config_digest=")


def test_gen_data_idempotent(tiny_data, tmp_path):
    again = tmp_path / "again"
    assert main(["gen-data", "--out", str(again), *TINY]) == 0
    names = sorted(p.name for p in tiny_data.iterdir())
    assert names == sorted(p.name for p in again.iterdir())
    for n in names:
        if n != "manifest.tsv":
            assert (tiny_data / n).read_bytes() == (again / n).read_bytes()


def test_eval_pred_equals_gt_is_perfect(tiny_data, tmp_path, capsys):
    man = str(tiny_data / "manifest.tsv")
    out = tmp_path / "m.csv"
    assert main(["eval", "--pred", man, "--manifest", man, "--out", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert rows
    for r in rows:
        for k in ("dsc", "miou", "nsd"):
            if k in r:
                assert float(r[k]) == 1.0
    assert "DSC 1.0000  mIoU 1.0000  NSD 1.0000" in capsys.readouterr().out


def test_eval_needs_one_source(tiny_data):
    assert main(["eval", "--manifest", str(tiny_data / "manifest.tsv")]) == 1


def test_bad_config_key_exit_1(tmp_path, capsys):
    cfg = tmp_path / "r.cfg"
    cfg.write_text("epochs = 1\nwarmup = 3\n")
    out = tmp_path / "o"
    assert main(["gen-data", "--config", str(cfg), "--out", str(out)]) == 1
    assert f"{cfg}:2" in capsys.readouterr().err
    assert not out.exists()


def test_missing_manifest_is_runtime_error(tmp_path):
    assert main(["eval", "--pred", "x", "--manifest", str(tmp_path / "none.tsv")]) == 3


def test_gradcheck_single_module(capsys):
    assert main(["gradcheck", "--module", "fue"]) == 0
    assert "fue" in capsys.readouterr().out


def test_bench_csv_and_idempotent_checksums(capsys):
    argv = ["bench", "--kernel", "scan", "qs", "--lengths", "32", "64", "--N", "2", "--d", "2"]
    assert main(argv) == 0
    first = capsys.readouterr().out
    assert main(argv) == 0
    second = capsys.readouterr().out
    rows = [r for r in csv.DictReader(l for l in first.splitlines() if not l.startswith("#"))]
    assert [(r["kernel"], r["L"]) for r in rows] == [("scan", "32"), ("scan", "64"), ("qs", "32"), ("qs", "64")]
    again = [r for r in csv.DictReader(l for l in second.splitlines() if not l.startswith("#"))]
    assert [r["checksum"] for r in rows] == [r["checksum"] for r in again]


def test_train_compare_report(tiny_data, tmp_path, capsys):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text("channels = 4 8\nstate_dim = 2\nwindow = 2\nheads = 2\nepochs = 1\n")
    man = str(tiny_data / "manifest.tsv")
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--variant", "mambaout", "--manifest", man, "--out", str(run)]) == 0
    assert main(["eval", "--config", str(cfg), "--ckpt", str(run / "best.ckpt"), "--manifest", man]) == 0
    cmp_dir = tmp_path / "cmp"
    assert main(["compare", "--config", str(cfg), "--manifest", man, "--out", str(cmp_dir),
                 "--variants", "tsmamba", "mambaout"]) == 0
    bench = tmp_path / "bench.csv"
    assert main(["bench", "--kernel", "scan", "--lengths", "16", "32", "--out", str(bench)]) == 0
    rep = tmp_path / "rep"
    assert main(["report", str(cmp_dir / "compare.csv"), str(bench), "--out", str(rep)]) == 0
    for name in ("report.txt", "report.csv", "report_metrics.png", "report_training.png", "report_bench.png"):
        assert (rep / name).stat().st_size > 0
    assert "mambaout" in (rep / "report.txt").read_text()


def test_report_rejects_unknown_csv(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    assert main(["report", str(p), "--out", str(tmp_path / "r")]) == 3


def test_oracle_check_cli_passes(capsys):
    assert main(["oracle-check"]) == 0
    out = capsys.readouterr().out
    lines = [l for l in out.splitlines() if "max_abs_err" in l]
    assert len(lines) >= 6 and all(l.endswith("ok") for l in lines)
