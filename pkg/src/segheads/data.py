"""Synthetic datasets, preprocessing, augmentation, splits, and volume I/O.

Two generators live here: the low-contrast cardiac phantom used as the
finetuning target (elliptical blood pool, thin muscle ring, crescent
chamber) and a high-contrast convex-blob source distribution used to
pretrain the promptable model, so a domain gap exists by construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .tensor import _cached_interp

_M64 = (1 << 64) - 1

# label ids for the cardiac phantom
BG, RV, MYO, LV = 0, 1, 2, 3
CLASS_NAMES = ("RV", "Myo", "LV")


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _M64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return z ^ (z >> 31)


def mix64(*parts) -> int:
    """Deterministic 64-bit hash of a tuple of integers (seed derivation)."""
    h = 0
    for p in parts:
        h = _splitmix64(h ^ (int(p) & _M64))
    return h


@dataclass
class Volume:
    """A 3D scalar image with integer labels, the unit of evaluation."""
    image: np.ndarray    # (D, H, W) float32
    labels: np.ndarray   # (D, H, W) uint8
    patient_id: int

    def __post_init__(self):
        if self.image.shape != self.labels.shape:
            raise ValueError("image and labels extents differ")


class DegenerateVolumeError(ValueError):
    """Volume intensity is constant; normalization is undefined."""


class PhantomGeometryError(RuntimeError):
    """Could not place the phantom inside the frame after many retries."""


# -- phantom generation ----------------------------------------------------------


def _ellipse_mask(h: int, w: int, cy: float, cx: float, ry: float, rx: float,
                  angle: float) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    dy = ys - cy
    dx = xs - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = dx * ca + dy * sa
    v = -dx * sa + dy * ca
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _disk_mask(h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    return (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r


def _smooth_field(rng: np.random.Generator, img: int, coarse: int,
                  amplitude: float) -> np.ndarray:
    grid = rng.normal(0.0, 1.0, (coarse, coarse))
    ry = _cached_interp(coarse, img, np.float64)
    return amplitude * (ry @ grid @ ry.T)


def _phantom_slice(rng: np.random.Generator, img: int, params: dict,
                   slice_frac: float) -> tuple[np.ndarray, np.ndarray]:
    """One 2D section; the heart tapers away from the mid slice."""
    taper = 1.0 - 0.3 * abs(slice_frac * 2.0 - 1.0)
    for _ in range(100):
        cy = params["cy"] + rng.normal(0, 1.0)
        cx = params["cx"] + rng.normal(0, 1.0)
        ry = params["ry"] * taper * rng.uniform(0.95, 1.05)
        rx = params["rx"] * taper * rng.uniform(0.95, 1.05)
        thick = params["thick"]
        r_rv = params["r_rv"] * taper
        theta = params["theta"] + rng.normal(0, 0.1)
        reach = max(ry, rx) + thick + 2.0 * r_rv
        if (min(cy, cx) - reach < 2 or max(cy, cx) + reach > img - 3):
            continue

        inner = _ellipse_mask(img, img, cy, cx, ry, rx, params["angle"])
        outer = _ellipse_mask(img, img, cy, cx, ry + thick, rx + thick, params["angle"])
        ring = outer & ~inner
        rv_cy = cy + np.sin(theta) * (max(ry, rx) + thick + r_rv * 0.55)
        rv_cx = cx + np.cos(theta) * (max(ry, rx) + thick + r_rv * 0.55)
        crescent = _disk_mask(img, img, rv_cy, rv_cx, r_rv) & ~outer

        if inner.sum() < 8 or ring.sum() < 8 or crescent.sum() < 8:
            continue

        labels = np.zeros((img, img), dtype=np.uint8)
        labels[crescent] = RV
        labels[ring] = MYO
        labels[inner] = LV

        image = np.full((img, img), params["i_bg"], dtype=np.float64)
        image += _smooth_field(rng, img, 5, params["bias_amp"])
        image[crescent] = params["i_rv"]
        image[ring] = params["i_myo"]
        image[inner] = params["i_lv"]
        image += rng.normal(0.0, params["noise"], (img, img))
        return image.astype(np.float32), labels
    raise PhantomGeometryError("phantom geometry does not fit the frame")


def generate_phantom_dataset(n_patients: int, slices_per_volume: int, img: int,
                             seed: int) -> list[Volume]:
    """Cardiac phantom: per patient two volumes of low-contrast sections.

    Every slice contains all three foreground classes; the muscle ring is
    thin relative to the blood pools and its boundaries sit close to the
    neighboring intensities.
    """
    volumes = []
    for pid in range(n_patients):
        prng = np.random.default_rng(mix64(seed, 0xA1, pid))
        params = {
            "cy": img / 2 + prng.uniform(-img / 10, img / 10),
            "cx": img / 2 + prng.uniform(-img / 10, img / 10),
            "ry": img * prng.uniform(0.10, 0.14),
            "rx": img * prng.uniform(0.10, 0.14),
            "thick": prng.uniform(2.2, 3.2),
            "r_rv": img * prng.uniform(0.07, 0.10),
            "theta": prng.uniform(0, 2 * np.pi),
            "angle": prng.uniform(0, np.pi),
            # inverted polarity relative to the source blobs: chambers darker
            # than background, muscle ring close to both of its neighbors
            "i_bg": prng.normal(0.60, 0.03),
            "i_lv": prng.normal(0.40, 0.03),
            "i_rv": prng.normal(0.43, 0.03),
            "i_myo": prng.normal(0.50, 0.02),
            "noise": 0.05,
            "bias_amp": 0.05,
        }
        for vol_idx in range(2):
            vrng = np.random.default_rng(mix64(seed, 0xA2, pid, vol_idx))
            imgs, labs = [], []
            for s in range(slices_per_volume):
                frac = s / max(slices_per_volume - 1, 1)
                im, lb = _phantom_slice(vrng, img, params, frac)
                imgs.append(im)
                labs.append(lb)
            volumes.append(Volume(np.stack(imgs), np.stack(labs), patient_id=pid))
    return volumes


def generate_blob_dataset(n_patients: int, slices_per_volume: int, img: int,
                          seed: int) -> list[Volume]:
    """Source distribution for pretraining: bright convex blobs on a dark
    background, deliberately unlike the cardiac phantom.

    Each slice holds one to three non-overlapping blobs stored under
    distinct label ids, so a box prompt singles out one instance among
    distractors and segmenting it requires reading the image.
    """
    volumes = []
    for pid in range(n_patients):
        for vol_idx in range(2):
            vrng = np.random.default_rng(mix64(seed, 0xB1, pid, vol_idx))
            imgs, labs = [], []
            for _ in range(slices_per_volume):
                image = np.full((img, img), vrng.normal(0.15, 0.03))
                image += _smooth_field(vrng, img, 4, 0.02)
                labels = np.zeros((img, img), dtype=np.uint8)
                n_blobs = int(vrng.integers(1, 4))
                placed = 0
                for _ in range(30):
                    if placed == n_blobs:
                        break
                    cy = vrng.uniform(img * 0.15, img * 0.85)
                    cx = vrng.uniform(img * 0.15, img * 0.85)
                    ry = vrng.uniform(img * 0.07, img * 0.18)
                    rx = vrng.uniform(img * 0.07, img * 0.18)
                    angle = vrng.uniform(0, np.pi)
                    blob = _ellipse_mask(img, img, cy, cx, ry + 1.5, rx + 1.5, angle)
                    if (labels[blob] != 0).any():
                        continue
                    core = _ellipse_mask(img, img, cy, cx, ry, rx, angle)
                    placed += 1
                    labels[core] = placed
                    image[core] = vrng.normal(0.85, 0.03)
                image += vrng.normal(0.0, 0.03, (img, img))
                imgs.append(image.astype(np.float32))
                labs.append(labels)
            volumes.append(Volume(np.stack(imgs), np.stack(labs), patient_id=pid))
    return volumes


# -- preprocessing ---------------------------------------------------------------


def normalize_volume(v: Volume) -> Volume:
    """Whole-volume zero-mean / unit-variance intensity normalization."""
    mean = float(v.image.mean())
    std = float(v.image.std())
    if std < 1e-8:
        raise DegenerateVolumeError("volume intensity is constant")
    image = ((v.image - mean) / std).astype(np.float32)
    return Volume(image, v.labels, v.patient_id)


def slice_to_rgb(v: Volume, index: int) -> np.ndarray:
    """One slice min-max rescaled to [0, 1] and replicated to 3 channels."""
    if not 0 <= index < v.image.shape[0]:
        raise IndexError(f"slice {index} out of range")
    sl = v.image[index]
    lo, hi = float(sl.min()), float(sl.max())
    if hi - lo < 1e-12:
        plane = np.full_like(sl, 0.5)
    else:
        plane = (sl - lo) / (hi - lo)
    return np.repeat(plane[None].astype(np.float32), 3, axis=0)


# -- augmentation ----------------------------------------------------------------


@dataclass
class AugmentConfig:
    noise_sigma: float = 0.05
    brightness_delta_range: float = 0.1
    rotation_degree_range: float = 15.0
    elastic_alpha: float = 10.0
    elastic_sigma: float = 4.0
    prob: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError("application probability must lie in [0, 1]")
        if self.elastic_sigma <= 0:
            raise ValueError("elastic_sigma must be positive")


def _sample_bilinear(plane: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(plane.dtype)
    fx = (xs - x0).astype(plane.dtype)
    top = plane[y0, x0] * (1 - fx) + plane[y0, x1] * fx
    bot = plane[y1, x0] * (1 - fx) + plane[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _sample_nearest(plane: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    yi = np.clip(np.rint(ys), 0, h - 1).astype(np.int64)
    xi = np.clip(np.rint(xs), 0, w - 1).astype(np.int64)
    return plane[yi, xi]


def augment(image: np.ndarray, labels: np.ndarray, cfg: AugmentConfig,
            sample_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded per-sample augmentation; geometry warps image and labels with
    the identical transform (bilinear vs nearest), intensity ops touch the
    image only. A pure function of its arguments."""
    rng = np.random.default_rng(sample_seed & _M64)
    h, w = labels.shape

    rotate = rng.random() < cfg.prob and cfg.rotation_degree_range > 0
    angle = np.deg2rad(rng.uniform(-cfg.rotation_degree_range,
                                   cfg.rotation_degree_range)) if rotate else 0.0
    elastic = rng.random() < cfg.prob and cfg.elastic_alpha > 0
    if elastic:
        disp = np.stack([
            gaussian_filter(rng.uniform(-1, 1, (h, w)), cfg.elastic_sigma),
            gaussian_filter(rng.uniform(-1, 1, (h, w)), cfg.elastic_sigma),
        ]) * cfg.elastic_alpha
    add_noise = rng.random() < cfg.prob and cfg.noise_sigma > 0
    noise = rng.normal(0.0, cfg.noise_sigma, (h, w)) if add_noise else None
    brighten = rng.random() < cfg.prob and cfg.brightness_delta_range > 0
    delta = rng.uniform(-cfg.brightness_delta_range,
                        cfg.brightness_delta_range) if brighten else 0.0

    if rotate or elastic:
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        if rotate:
            dy, dx = ys - cy, xs - cx
            ca, sa = np.cos(angle), np.sin(angle)
            src_y = cy + dy * ca - dx * sa
            src_x = cx + dy * sa + dx * ca
        else:
            src_y, src_x = ys, xs
        if elastic:
            src_y = src_y + disp[0]
            src_x = src_x + disp[1]
        image = np.stack([_sample_bilinear(ch.astype(np.float64), src_y, src_x)
                          for ch in image]).astype(np.float32)
        labels = _sample_nearest(labels, src_y, src_x)

    if add_noise:
        image = (image + noise[None]).astype(np.float32)
    if brighten:
        image = (image + np.float32(delta)).astype(np.float32)
    return image, labels


# -- patient-level splits ---------------------------------------------------------


@dataclass
class SplitSpec:
    """Patient-level partition; ``order`` records the shuffled patient
    sequence so few-shot subsets are reproducible."""
    seed: int
    ratios: tuple[float, float, float]
    assignment: dict[int, str]
    order: list[int] = field(default_factory=list)

    def patients(self, part: str) -> list[int]:
        return [p for p in self.order if self.assignment[p] == part]

    def volumes(self, volumes: list[Volume], part: str) -> list[Volume]:
        wanted = set(self.patients(part))
        return [v for v in volumes if v.patient_id in wanted]


def split_patients(patient_ids, ratios=(70, 15, 15), seed: int = 0) -> SplitSpec:
    """Seeded shuffle cut at rounded ratio boundaries, every part nonempty."""
    ids = sorted(set(int(p) for p in patient_ids))
    n = len(ids)
    if n < 3:
        raise ValueError("need at least 3 patients to split")
    total = float(sum(ratios))
    fr = [r / total for r in ratios]
    counts = [round(n * fr[0]), round(n * fr[1])]
    counts.append(n - counts[0] - counts[1])
    while min(counts) < 1:
        counts[int(np.argmax(counts))] -= 1
        counts[int(np.argmin(counts))] += 1
    order = [ids[i] for i in np.random.default_rng(seed).permutation(n)]
    assignment = {}
    for i, pid in enumerate(order):
        if i < counts[0]:
            assignment[pid] = "train"
        elif i < counts[0] + counts[1]:
            assignment[pid] = "val"
        else:
            assignment[pid] = "test"
    return SplitSpec(seed=seed, ratios=tuple(ratios), assignment=assignment,
                     order=order)


# -- SVOL binary format -----------------------------------------------------------

_SVOL_MAGIC = b"SVOL"
_SVOL_VERSION = 1


class FormatError(ValueError):
    """File does not follow the SVOL layout."""


class TruncationError(FormatError):
    """Declared extents disagree with the actual payload length."""


def write_svol(v: Volume, path) -> None:
    d, h, w = v.image.shape
    with open(path, "wb") as f:
        f.write(_SVOL_MAGIC)
        f.write(struct.pack("<B", _SVOL_VERSION))
        f.write(struct.pack("<III", d, h, w))
        f.write(np.ascontiguousarray(v.image, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(v.labels, dtype=np.uint8).tobytes())
        f.write(struct.pack("<I", int(v.patient_id)))


def read_svol(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < 17:
        raise TruncationError(f"{path}: header incomplete")
    if raw[:4] != _SVOL_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version = raw[4]
    if version != _SVOL_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    d, h, w = struct.unpack("<III", raw[5:17])
    n = d * h * w
    expected = 17 + 4 * n + n + 4
    if len(raw) != expected:
        raise TruncationError(
            f"{path}: extents ({d},{h},{w}) need {expected} bytes, file has {len(raw)}")
    image = np.frombuffer(raw, dtype="<f4", count=n, offset=17).reshape(d, h, w)
    labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=17 + 4 * n).reshape(d, h, w)
    (patient_id,) = struct.unpack("<I", raw[-4:])
    return Volume(image.astype(np.float32), labels.copy(), patient_id=patient_id)


def save_dataset(volumes: list[Volume], directory) -> list[Path]:
    """One SVOL file per volume, named for patient and acquisition order."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    counters: dict[int, int] = {}
    paths = []
    for v in volumes:
        idx = counters.get(v.patient_id, 0)
        counters[v.patient_id] = idx + 1
        p = directory / f"patient{v.patient_id:04d}_vol{idx}.svol"
        write_svol(v, p)
        paths.append(p)
    return paths


def load_dataset(directory) -> list[Volume]:
    paths = sorted(Path(directory).glob("*.svol"))
    if not paths:
        raise FileNotFoundError(f"no .svol files under {directory}")
    return [read_svol(p) for p in paths]


def export_volume_png(v: Volume, directory, num_classes: int = 3) -> None:
    """Debug exporter: grayscale slice PNGs plus paletted label maps."""
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    palette = [0, 0, 0, 230, 60, 60, 60, 200, 90, 80, 110, 235]
    palette += [0] * (768 - len(palette))
    for i in range(v.image.shape[0]):
        sl = v.image[i]
        lo, hi = float(sl.min()), float(sl.max())
        scale = 255.0 / (hi - lo) if hi > lo else 0.0
        gray = ((sl - lo) * scale).astype(np.uint8)
        Image.fromarray(gray, mode="L").save(directory / f"slice{i:03d}.png")
        lab = Image.fromarray(v.labels[i], mode="P")
        lab.putpalette(palette)
        lab.save(directory / f"slice{i:03d}_labels.png")
