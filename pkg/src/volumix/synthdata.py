"""Seeded synthetic phantoms and the VOLX volume format.

small_roi: smooth background, 1-3 small irregular labelled blobs and
unlabelled distractor blobs of similar brightness.  multi_organ: 3-5 large
smooth structures with distinct mean intensities, one label each.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .rng import SplitMix64

MAGIC = b"VOLX"
_HEADER = struct.Struct("<4sBBI3I3f")
DTYPE_IMAGE, DTYPE_LABELS = 0, 1
_DTYPES = {DTYPE_IMAGE: np.dtype("<f4"), DTYPE_LABELS: np.dtype("u1")}


class VolumeFormatError(ValueError):
    pass


class Regime(enum.Enum):
    SMALL_ROI = "small_roi"
    MULTI_ORGAN = "multi_organ"


@dataclass
class PhantomSpec:
    regime: Regime = Regime.SMALL_ROI
    size: tuple = (32, 32, 32)
    num_classes: int = 2
    seed: int = 0
    noise_std: float = 0.1
    roi_fraction: tuple = (0.001, 0.015)
    n_distractors: int = 2

    def __post_init__(self):
        self.regime = Regime(self.regime) if not isinstance(self.regime, Regime) else self.regime
        self.size = tuple(int(s) for s in self.size)
        self.roi_fraction = tuple(float(f) for f in self.roi_fraction)

    @property
    def spacing(self) -> tuple:
        return (3.75, 1.0, 1.0) if self.regime is Regime.SMALL_ROI else (1.0, 1.0, 1.0)

    def validate(self):
        if len(self.size) != 3 or min(self.size) < 16:
            raise ValueError(f"phantom size must be at least 16^3, got {self.size}")
        lo, hi = self.roi_fraction
        if not (0 < lo <= hi < 1):
            raise ValueError(f"roi fraction range must lie in (0, 1), got {self.roi_fraction}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        V = int(np.prod(self.size))
        if self.regime is Regime.SMALL_ROI:
            if self.num_classes != 2:
                raise ValueError("small_roi phantoms have exactly 2 classes")
            if lo * V < 8 or hi > 0.2:
                raise ValueError(f"infeasible roi fraction {self.roi_fraction} for size {self.size}")
        else:
            if not 4 <= self.num_classes <= 6:
                raise ValueError("multi_organ phantoms need num_classes in [4, 6] (3-5 structures)")


@dataclass
class VolumeFile:
    data: np.ndarray  # (C, D, H, W) float32 image or (D, H, W) uint8 labels
    spacing: tuple = (1.0, 1.0, 1.0)
    kind: int = DTYPE_IMAGE

    def to_bytes(self) -> bytes:
        arr = self.data if self.kind == DTYPE_IMAGE else self.data[None]
        if arr.ndim != 4:
            raise VolumeFormatError(f"volume must be 4-d (C, D, H, W), got {self.data.shape}")
        C, D, H, W = arr.shape
        head = _HEADER.pack(MAGIC, 1, self.kind, C, D, H, W, *self.spacing)
        return head + np.ascontiguousarray(arr, dtype=_DTYPES[self.kind]).tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "VolumeFile":
        if len(buf) < _HEADER.size:
            raise VolumeFormatError("truncated VOLX header")
        magic, version, kind, C, D, H, W, sz, sy, sx = _HEADER.unpack_from(buf)
        if magic != MAGIC:
            raise VolumeFormatError("bad magic: not a VOLX file")
        if version != 1 or kind not in _DTYPES:
            raise VolumeFormatError(f"unsupported VOLX version {version} / dtype {kind}")
        dt = _DTYPES[kind]
        n = C * D * H * W
        if len(buf) != _HEADER.size + n * dt.itemsize:
            raise VolumeFormatError(
                f"VOLX length mismatch: expected {_HEADER.size + n * dt.itemsize} bytes, got {len(buf)}")
        arr = np.frombuffer(buf, dtype=dt, offset=_HEADER.size).reshape(C, D, H, W)
        arr = arr.astype(np.float32) if kind == DTYPE_IMAGE else arr[0].copy()
        return cls(arr, (sz, sy, sx), kind)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "VolumeFile":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# geometry helpers


def _grid(size):
    return np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in size], indexing="ij"))


def _smooth_noise(rng: SplitMix64, size, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.normal(size), sigma, mode="wrap")
    return f / (f.std() + 1e-12)


def _warped_grid(rng: SplitMix64, size, amplitude: float, sigma: float = 4.0) -> np.ndarray:
    g = _grid(size)
    return g + np.stack([amplitude * _smooth_noise(rng, size, sigma) for _ in range(3)])


def _ellipsoid_level(coords: np.ndarray, center, radii) -> np.ndarray:
    c = np.asarray(center, dtype=np.float64)[:, None, None, None]
    r = np.asarray(radii, dtype=np.float64)[:, None, None, None]
    return np.sqrt((((coords - c) / r) ** 2).sum(axis=0))


def _blob_level(rng: SplitMix64, coords, center, scale: float) -> np.ndarray:
    """Union of 1-3 jittered ellipsoids around ``center`` as a level function (<= 1 inside)."""
    k = int(rng.integers(1, 4))
    level = None
    for _ in range(k):
        off = rng.normal((3,), 0.0, 0.6 * scale)
        radii = scale * rng.uniform((3,), 0.6, 1.4)
        e = _ellipsoid_level(coords, np.asarray(center) + off, radii)
        level = e if level is None else np.minimum(level, e)
    return level


def _threshold_to_count(level: np.ndarray, count: int) -> np.ndarray:
    """Mask of the ``count`` lowest-level voxels (ties broken by flat index)."""
    flat = level.ravel()
    order = np.argsort(flat, kind="stable")
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:count]] = True
    return mask.reshape(level.shape)


def _pick_centers(rng: SplitMix64, size, n, margin, min_sep, avoid=()):
    """Rejection-sample ``n`` centres; the separation shrinks when space runs out."""
    centers = []
    for _round in range(8):
        for _ in range(300):
            if len(centers) == n:
                return centers
            c = np.array([rng.uniform((), margin, s - 1 - margin) for s in size])
            if all(np.linalg.norm(c - o) >= min_sep for o in list(centers) + list(avoid)):
                centers.append(c)
        min_sep *= 0.8
    if len(centers) < n:
        raise ValueError(f"could not place {n} structures in volume {size}")
    return centers


# ---------------------------------------------------------------------------
# generators


def _small_roi(spec: PhantomSpec, rng: SplitMix64):
    size = spec.size
    V = int(np.prod(size))
    lo, hi = spec.roi_fraction
    target = int(round(rng.uniform((), lo, hi) * V))
    target = min(max(target, int(np.ceil(lo * V))), int(np.floor(hi * V)))

    background = 0.2 + 0.08 * _smooth_noise(rng, size, 2.0)
    coords = _warped_grid(rng, size, amplitude=1.5)
    n_blobs = int(rng.integers(1, 4))
    scale = max(1.5, (target / n_blobs * 3 / (4 * np.pi)) ** (1 / 3))
    margin = min(s // 4 for s in size)
    centers = _pick_centers(rng, size, n_blobs, margin, 3 * scale)
    level = None
    for c in centers:
        lv = _blob_level(rng, coords, c, scale)
        level = lv if level is None else np.minimum(level, lv)
    tumor = _threshold_to_count(level, target)

    image = background.copy()
    image[tumor] = 1.0 + 0.05 * _smooth_noise(rng, size, 1.0)[tumor]

    # distractors: elongated, slightly dimmer, kept clear of the tumour
    grid = _grid(size)
    dist_to_tumor = ndimage.distance_transform_edt(~tumor)
    dcenters = _pick_centers(rng, size, spec.n_distractors, margin // 2 + 2, 2 * scale + 4, avoid=centers)
    for c in dcenters:
        radii = scale * np.array([rng.uniform((), 0.6, 1.0), rng.uniform((), 0.6, 1.0), rng.uniform((), 1.8, 2.6)])
        radii = radii[rng.permutation(3)]
        mask = (_ellipsoid_level(grid, c, radii) <= 1.0) & (dist_to_tumor > 3)
        image[mask] = 0.7
    image = image + rng.normal(size, 0.0, spec.noise_std)
    return image, tumor.astype(np.uint8)


def _multi_organ(spec: PhantomSpec, rng: SplitMix64):
    size = spec.size
    V = int(np.prod(size))
    k = spec.num_classes - 1
    for _attempt in range(20):
        fracs = np.geomspace(0.012, 0.09, k)[rng.permutation(k)]
        coords = _warped_grid(rng, size, amplitude=1.0, sigma=6.0)
        scales = [(f * V * 3 / (4 * np.pi)) ** (1 / 3) for f in fracs]
        centers = _pick_centers(rng, size, k, min(size) // 5, 0.9 * float(np.median(scales)) + 2)
        labels = np.zeros(size, dtype=np.uint8)
        # paint largest first so smaller structures stay whole
        for idx in np.argsort(-fracs):
            lv = _blob_level(rng, coords, centers[idx], scales[idx])
            labels[_threshold_to_count(lv, int(fracs[idx] * V))] = idx + 1
        counts = np.array([(labels == c).sum() for c in range(1, k + 1)])
        if counts.min() > 0 and counts.max() >= 4 * counts.min():
            break
    else:
        raise ValueError("could not generate multi_organ phantom with the required size spread")
    means = np.linspace(0.35, 1.0, k)[rng.permutation(k)]
    image = 0.1 + 0.05 * _smooth_noise(rng, size, 3.0)
    for c in range(1, k + 1):
        image[labels == c] = means[c - 1] + 0.03 * _smooth_noise(rng, size, 2.0)[labels == c]
    image = image + rng.normal(size, 0.0, spec.noise_std)
    return image, labels


def gen_phantom(spec: PhantomSpec) -> tuple[VolumeFile, VolumeFile]:
    spec.validate()
    rng = SplitMix64(spec.seed)
    if spec.regime is Regime.SMALL_ROI:
        image, labels = _small_roi(spec, rng)
    else:
        image, labels = _multi_organ(spec, rng)
    return (VolumeFile(image[None].astype(np.float32), spec.spacing, DTYPE_IMAGE),
            VolumeFile(labels.astype(np.uint8), spec.spacing, DTYPE_LABELS))


@dataclass
class ManifestEntry:
    split: str
    image: Path
    label: Path


def dataset(spec: PhantomSpec, n_train: int = 32, n_val: int = 4, n_test: int = 4, out_dir="data") -> Path:
    """Write a split dataset; volume ``i`` (over all splits) uses seed ``spec.seed + i``.

    Returns the manifest path (one ``split<TAB>image<TAB>label`` line per volume).
    """
    if min(n_train, n_val, n_test) < 1:
        raise ValueError("every split needs at least one volume")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    lines = []
    i = 0
    for split, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        for _ in range(n):
            s = PhantomSpec(spec.regime, spec.size, spec.num_classes, spec.seed + i, spec.noise_std,
                            spec.roi_fraction, spec.n_distractors)
            img, lab = gen_phantom(s)
            ip, lp = out / f"{split}_{i:03d}_img.volx", out / f"{split}_{i:03d}_lab.volx"
            try:
                img.save(ip)
                lab.save(lp)
            except OSError as exc:
                raise OSError(f"failed writing {ip}: {exc}") from exc
            lines.append(f"{split}\t{ip.name}\t{lp.name}")
            i += 1
    manifest = out / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def read_manifest(path) -> list[ManifestEntry]:
    """Paths in the manifest are resolved relative to the manifest's directory."""
    path = Path(path)
    base = path.parent
    entries = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[0] not in ("train", "val", "test"):
            raise ValueError(f"{path}:{n}: malformed manifest line {line!r}")
        entries.append(ManifestEntry(parts[0], base / parts[1], base / parts[2]))
    return entries
