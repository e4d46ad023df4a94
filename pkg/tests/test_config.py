import pytest

from volumix.config import ConfigError, RunConfig


def test_parse_comments_and_sections():
    cfg = RunConfig.parse("# run\nvariant = mambaout\nchannels = 4, 8  # small\nepochs = 3\nseed = 7\n"
                          "regime = multi_organ\nsize = 16\n")
    seg = cfg.seg_config()
    assert seg.variant.value == "mambaout" and seg.channels == [4, 8]
    assert seg.stem_channels == 4 and seg.stage_depths == [1, 1] and seg.seed == 7
    assert cfg.train_config().epochs == 3 and cfg.train_config().seed == 7
    spec = cfg.phantom_spec()
    assert spec.size == (16, 16, 16) and spec.num_classes == 5 and spec.seed == 7
    assert cfg.splits() == (32, 4, 4)


def test_unknown_key_reports_line_number():
    with pytest.raises(ConfigError, match=r"run\.cfg:3: unknown key 'learning_rate'"):
        RunConfig.parse("epochs = 2\n\nlearning_rate = 0.1\n", "run.cfg")


def test_bad_value_and_missing_equals():
    with pytest.raises(ConfigError, match=r"c:1: bad value for 'epochs'"):
        RunConfig.parse("epochs = many\n", "c")
    with pytest.raises(ConfigError, match=r"c:2: expected key = value"):
        RunConfig.parse("seed = 1\nepochs\n", "c")


def test_flag_override_and_digest():
    a = RunConfig.parse("epochs = 3\nlr = 0.01\n")
    b = RunConfig.parse("lr = 0.01\nepochs = 3\n")
    assert a.digest() == b.digest() and len(a.digest()) == 12
    b.set("epochs", 4)
    b.set("size", [20])
    assert b.phantom_spec().size == (20, 20, 20)
    assert b.train_config().epochs == 4 and a.digest() != b.digest()
    with pytest.raises(ConfigError, match="flag: unknown key"):
        b.set("nope", 1)


def test_load_from_file(tmp_path):
    p = tmp_path / "x.cfg"
    p.write_text("n_train = 2\nn_val = 1\nn_test = 1\nroi_fraction = 0.01 0.03\n", encoding="utf-8")
    cfg = RunConfig.load(p)
    assert cfg.splits() == (2, 1, 1) and cfg.phantom_spec().roi_fraction == (0.01, 0.03)
