import numpy as np
import pytest

from volumix.synthdata import (DTYPE_IMAGE, DTYPE_LABELS, PhantomSpec, Regime, VolumeFile, VolumeFormatError,
                               dataset, gen_phantom, read_manifest)


def test_determinism_bitwise():
    a = gen_phantom(PhantomSpec(seed=4))
    b = gen_phantom(PhantomSpec(seed=4))
    assert a[0].to_bytes() == b[0].to_bytes() and a[1].to_bytes() == b[1].to_bytes()
    c = gen_phantom(PhantomSpec(seed=5))
    assert c[0].to_bytes() != a[0].to_bytes()


def test_small_roi_fraction_100_phantoms():
    for seed in range(100):
        img, lab = gen_phantom(PhantomSpec(seed=seed))
        frac = lab.data.mean()
        assert 0.001 <= frac <= 0.015, (seed, frac)
        assert set(np.unique(lab.data)) <= {0, 1}
        assert img.data.shape == (1, 32, 32, 32) and img.data.dtype == np.float32
        assert img.spacing == (3.75, 1.0, 1.0)


def test_small_roi_custom_range():
    spec = PhantomSpec(size=(16, 24, 32), roi_fraction=(0.02, 0.03), seed=1)
    _, lab = gen_phantom(spec)
    assert 0.02 <= lab.data.mean() <= 0.03


def test_distractors_are_bright_but_unlabelled():
    img, lab = gen_phantom(PhantomSpec(seed=3, noise_std=0.0))
    bright = img.data[0] > 0.5
    assert (bright & (lab.data == 0)).sum() > lab.data.sum()


@pytest.mark.parametrize("seed", range(10))
def test_multi_organ_size_spread(seed):
    img, lab = gen_phantom(PhantomSpec(regime="multi_organ", num_classes=5, seed=seed))
    counts = np.bincount(lab.data.ravel(), minlength=5)[1:]
    assert counts.min() > 0
    assert counts.max() >= 4 * counts.min()
    assert lab.data.max() < 5 and img.spacing == (1.0, 1.0, 1.0)
    means = [img.data[0][lab.data == c].mean() for c in range(1, 5)]
    assert min(np.diff(sorted(means))) > 0.1


@pytest.mark.parametrize("bad", [dict(size=(8, 32, 32)), dict(roi_fraction=(0.0, 0.1)),
                                 dict(roi_fraction=(0.2, 0.1)), dict(roi_fraction=(0.0001, 0.0002)),
                                 dict(regime="multi_organ", num_classes=2)])
def test_infeasible_specs(bad):
    with pytest.raises(ValueError):
        gen_phantom(PhantomSpec(**bad))


def test_volx_round_trip_and_header(tmp_path):
    img, lab = gen_phantom(PhantomSpec(seed=0, size=(16, 20, 24), roi_fraction=(0.005, 0.02)))
    for v, kind in ((img, DTYPE_IMAGE), (lab, DTYPE_LABELS)):
        p = tmp_path / f"{kind}.volx"
        v.save(p)
        raw = p.read_bytes()
        assert raw[:4] == b"VOLX" and raw[4] == 1 and raw[5] == kind
        back = VolumeFile.load(p)
        assert back.to_bytes() == raw
        assert np.array_equal(back.data, v.data)
    assert len(lab.to_bytes()) == 4 + 2 + 4 * 4 + 12 + 16 * 20 * 24


def test_volx_rejects_corruption():
    raw = gen_phantom(PhantomSpec(seed=0))[1].to_bytes()
    with pytest.raises(VolumeFormatError, match="magic"):
        VolumeFile.from_bytes(b"NOPE" + raw[4:])
    with pytest.raises(VolumeFormatError, match="length"):
        VolumeFile.from_bytes(raw[:-1])
    with pytest.raises(VolumeFormatError):
        VolumeFile.from_bytes(raw[:10])


def test_dataset_manifest(tmp_path):
    spec = PhantomSpec(seed=10, size=(16, 16, 16), roi_fraction=(0.005, 0.02))
    man = dataset(spec, 3, 2, 1, tmp_path / "d")
    lines = man.read_text().splitlines()
    assert len(lines) == 6
    entries = read_manifest(man)
    assert [e.split for e in entries] == ["train"] * 3 + ["val"] * 2 + ["test"]
    payloads = set()
    for i, e in enumerate(entries):
        img = VolumeFile.load(e.image)
        lab = VolumeFile.load(e.label)
        ref_img, ref_lab = gen_phantom(PhantomSpec(seed=10 + i, size=(16, 16, 16), roi_fraction=(0.005, 0.02)))
        assert img.to_bytes() == e.image.read_bytes() == ref_img.to_bytes()
        assert lab.to_bytes() == ref_lab.to_bytes()
        payloads.add(e.image.read_bytes())
    assert len(payloads) == 6  # distinct seeds across all splits


def test_dataset_requires_each_split(tmp_path):
    with pytest.raises(ValueError):
        dataset(PhantomSpec(), 1, 0, 1, tmp_path)


def test_dataset_io_error_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        dataset(PhantomSpec(size=(16, 16, 16), roi_fraction=(0.005, 0.02)), 1, 1, 1, blocker / "sub")


def test_manifest_malformed(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("train\ta.volx\n")
    with pytest.raises(ValueError, match=":1:"):
        read_manifest(p)


def test_regime_enum():
    assert PhantomSpec(regime="small_roi").regime is Regime.SMALL_ROI
