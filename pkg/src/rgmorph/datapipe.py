"""Image preprocessing, augmentation, splitting and synthetic galaxies.

Real cutouts go through ``sigma_clip -> center_crop -> minmax_normalize``;
train/validation originals are then multiplied by flip + rotation
augmentation. ``synth_galaxy`` draws FRI/FRII-like sources for desk-scale
runs when no survey images are at hand.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ValidationError
from .rng import TAG_AUGMENT, TAG_ORDER, TAG_SPLIT, RngStream

FRI, FRII = 0, 1
CLASS_NAMES = {FRI: "FRI", FRII: "FRII"}
SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST = 0, 1, 2
SPLIT_NAMES = {SPLIT_TRAIN: "train", SPLIT_VAL: "val", SPLIT_TEST: "test"}
FLIPS = ("none", "lr", "ud", "diag")


def parse_class(value):
    """Accept 0/1 or 'FRI'/'FRII' (any case)."""
    if isinstance(value, (int, np.integer)) and int(value) in CLASS_NAMES:
        return int(value)
    key = str(value).strip().upper()
    for k, name in CLASS_NAMES.items():
        if key == name or key == str(k):
            return k
    raise ValidationError(f"unknown class label {value!r}; expected FRI or FRII")


# ---------------------------------------------------------------------------
# preprocessing


def sigma_clip(img, nsigma=3.0, max_iters=5):
    """Zero out background pixels below ``mean + nsigma * std``.

    The background statistics are re-estimated over pixels at or below
    the current threshold until the retained set stops changing (or
    ``max_iters`` passes). Pixels at or above the final threshold are kept
    unchanged.
    """
    img = np.asarray(img, dtype=np.float64)
    keep = np.ones(img.shape, dtype=bool)
    thresh = None
    for _ in range(max_iters):
        vals = img[keep]
        thresh = vals.mean() + nsigma * vals.std()
        new_keep = img <= thresh
        if np.array_equal(new_keep, keep):
            break
        keep = new_keep
    vals = img[keep]
    thresh = vals.mean() + nsigma * vals.std()
    out = img.copy()
    out[out < thresh] = 0.0
    return out


def center_crop(img, size=40):
    img = np.asarray(img)
    h, w = img.shape[:2]
    if h < size or w < size:
        raise ValidationError(f"cannot crop {size}x{size} from a {h}x{w} image")
    r0 = (h - size) // 2
    c0 = (w - size) // 2
    return img[r0 : r0 + size, c0 : c0 + size]


def minmax_normalize(img):
    """Linear map to [0, 1]; a constant image maps to zeros."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi == lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def preprocess(img, size=40, nsigma=3.0, max_iters=5):
    return minmax_normalize(center_crop(sigma_clip(img, nsigma, max_iters), size))


class Preprocessor(TransformerMixin, BaseEstimator):
    """Stateless transformer applying clip, crop and normalization per image."""

    def __init__(self, size=40, nsigma=3.0, max_iters=5):
        self.size = size
        self.nsigma = nsigma
        self.max_iters = max_iters

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return np.stack([preprocess(x, self.size, self.nsigma, self.max_iters) for x in X])


# ---------------------------------------------------------------------------
# augmentation


def flip(img, kind):
    if kind == "none":
        return img
    if kind == "lr":
        return img[:, ::-1]
    if kind == "ud":
        return img[::-1, :]
    if kind == "diag":
        return img.T
    raise ValidationError(f"unknown flip {kind!r}")


def rotate(img, degrees):
    """Counter-clockwise rotation about the image center.

    Bilinear interpolation, zero fill outside the source. Multiples of 90
    degrees are exact index permutations.
    """
    img = np.asarray(img, dtype=np.float64)
    q, rem = divmod(float(degrees) % 360.0, 90.0)
    if rem == 0.0:
        return np.rot90(img, int(q)).copy()
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    x, y = cc - cx, cy - rr
    th = math.radians(degrees)
    cos, sin = math.cos(th), math.sin(th)
    src_c = cos * x + sin * y + cx
    src_r = cy - (-sin * x + cos * y)
    r0 = np.floor(src_r).astype(int)
    c0 = np.floor(src_c).astype(int)
    fr = src_r - r0
    fc = src_c - c0
    padded = np.pad(img, 1)
    out = np.zeros_like(img)
    for dr, dc, wgt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc), (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        r = np.clip(r0 + dr + 1, 0, h + 1)
        c = np.clip(c0 + dc + 1, 0, w + 1)
        out += wgt * padded[r, c]
    return out


def augment(img, rng, flip_kind=None, angle=None):
    """Random flip then random rotation; output clamped to [0, 1].

    ``flip_kind`` and ``angle`` override the random draws (both are still
    drawn so the stream advances identically).
    """
    gen = rng.generator
    drawn_flip = FLIPS[int(gen.integers(len(FLIPS)))]
    drawn_angle = float(gen.uniform(0.0, 360.0))
    out = flip(np.asarray(img, dtype=np.float64), drawn_flip if flip_kind is None else flip_kind)
    out = rotate(out, drawn_angle if angle is None else angle)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# splitting and dataset assembly


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def split_sizes(n, test_frac=0.2, val_frac=0.16):
    """``(train, val, test)`` counts for a class of ``n`` samples."""
    test = _round_half_up(test_frac * n)
    val = _round_half_up(val_frac * n)
    return n - val - test, val, test


def stratified_split(labels, seed, test_frac=0.2, val_frac=0.16, min_per_class=5):
    """Per-class seeded shuffle into train/val/test; returns split codes."""
    labels = np.asarray(labels)
    split = np.empty(labels.shape[0], dtype=np.uint8)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if idx.size < min_per_class:
            raise ValidationError(f"class {cls} has {idx.size} samples; at least {min_per_class} needed")
        perm = RngStream(seed, (TAG_SPLIT, int(cls))).generator.permutation(idx)
        n_train, n_val, _ = split_sizes(idx.size, test_frac, val_frac)
        split[perm[:n_train]] = SPLIT_TRAIN
        split[perm[n_train : n_train + n_val]] = SPLIT_VAL
        split[perm[n_train + n_val :]] = SPLIT_TEST
    return split


@dataclass
class Dataset:
    """Packed samples: images ``(N, H, W)`` float32 in [0, 1] plus metadata."""

    images: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    origin_id: np.ndarray
    aug_index: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 3:
            raise ValidationError("dataset images must be an (N, H, W) array")
        n = self.images.shape[0]
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.split = np.asarray(self.split, dtype=np.uint8)
        self.origin_id = np.asarray(self.origin_id, dtype=np.uint32)
        self.aug_index = np.asarray(self.aug_index, dtype=np.uint32)
        for name in ("labels", "split", "origin_id", "aug_index"):
            if getattr(self, name).shape != (n,):
                raise ValidationError(f"dataset field {name} must have {n} entries")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, split=None, label=None):
        sel = np.ones(len(self), dtype=bool)
        if split is not None:
            sel &= self.split == split
        if label is not None:
            sel &= self.labels == label
        return Dataset(self.images[sel], self.labels[sel], self.split[sel], self.origin_id[sel], self.aug_index[sel])

    def xy(self, split=None):
        """``(images float64, labels int64)`` for a split (all if None)."""
        d = self if split is None else self.subset(split)
        return d.images.astype(np.float64), d.labels.astype(np.int64)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("images", "labels", "split", "origin_id", "aug_index")
        )


def assemble(images, labels, split, aug_factors, seed, shuffle=True):
    """Expand preprocessed originals into a :class:`Dataset`.

    Each train/val original yields ``aug_factors[label]`` records: the
    original itself (``aug_index`` 0) and augmented copies 1..k-1. Test
    originals are kept once and never augmented. Record order within each
    split is a seeded permutation so sequential batches mix classes.
    """
    recs = {SPLIT_TRAIN: [], SPLIT_VAL: [], SPLIT_TEST: []}
    for origin, (img, lab, sp) in enumerate(zip(images, labels, split)):
        lab, sp = int(lab), int(sp)
        img = np.asarray(img, dtype=np.float64)
        factor = 1 if sp == SPLIT_TEST else int(aug_factors.get(lab, 1))
        if factor < 1:
            raise ValidationError(f"augmentation factor must be >= 1, got {factor}")
        recs[sp].append((img, lab, origin, 0))
        for a in range(1, factor):
            out = augment(img, RngStream(seed, (TAG_AUGMENT, origin, a)))
            recs[sp].append((out, lab, origin, a))
    rows = []
    for sp in (SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST):
        block = recs[sp]
        order = np.arange(len(block))
        if shuffle and len(block) > 1:
            order = RngStream(seed, (TAG_ORDER, sp)).generator.permutation(len(block))
        rows.extend((block[i], sp) for i in order)
    if not rows:
        raise ValidationError("no samples to assemble")
    return Dataset(
        images=np.stack([r[0][0] for r in rows]),
        labels=[r[0][1] for r in rows],
        split=[r[1] for r in rows],
        origin_id=[r[0][2] for r in rows],
        aug_index=[r[0][3] for r in rows],
    )


def build_dataset(raw_images, labels, aug_factors, seed, size=40, nsigma=3.0, max_iters=5):
    """Full pipeline from raw cutouts to a :class:`Dataset`.

    Parameters
    ----------
    raw_images : sequence of 2-D arrays
    labels : sequence of class codes (0 = FRI, 1 = FRII)
    aug_factors : dict
        Records per train/val original, keyed by class code.
    seed : int
    """
    labels = np.array([parse_class(v) for v in labels])
    if len(raw_images) != labels.shape[0]:
        raise ValidationError("one label per raw image required")
    prepped = [preprocess(img, size, nsigma, max_iters) for img in raw_images]
    split = stratified_split(labels, seed)
    return assemble(prepped, labels, split, aug_factors, seed)


# ---------------------------------------------------------------------------
# synthetic galaxies


@dataclass
class SynthParams:
    position_angle: float
    lobe_length: float
    core_flux: float
    lobe_flux: float
    hotspot_flux: float
    noise_sigma: float
    core_width: float
    lobe_width: float
    asymmetry: float


def draw_params(label, gen):
    """Source parameters in pixels; sources always fit a 40x40 center crop."""
    scale = 1.0
    if label == FRI:
        return SynthParams(
            position_angle=float(gen.uniform(0, 180)),
            lobe_length=float(gen.uniform(7, 14)) * scale,
            core_flux=1.0,
            lobe_flux=float(gen.uniform(0.35, 0.6)),
            hotspot_flux=0.0,
            noise_sigma=float(gen.uniform(0.01, 0.03)),
            core_width=float(gen.uniform(1.2, 1.8)) * scale,
            lobe_width=float(gen.uniform(1.8, 3.0)) * scale,
            asymmetry=float(gen.uniform(0.6, 1.0)),
        )
    return SynthParams(
        position_angle=float(gen.uniform(0, 180)),
        lobe_length=float(gen.uniform(9, 16)) * scale,
        core_flux=float(gen.uniform(0.2, 0.45)),
        lobe_flux=float(gen.uniform(0.1, 0.2)),
        hotspot_flux=1.0,
        noise_sigma=float(gen.uniform(0.01, 0.03)),
        core_width=float(gen.uniform(0.9, 1.3)) * scale,
        lobe_width=float(gen.uniform(1.0, 1.6)) * scale,
        asymmetry=float(gen.uniform(0.75, 1.0)),
    )


def _blob(rr, cc, r, c, sr, sc, angle):
    """Elliptical Gaussian with major axis ``sr`` along ``angle``."""
    dy, dx = rr - r, cc - c
    ca, sa = math.cos(angle), math.sin(angle)
    u = dx * ca - dy * sa
    v = dx * sa + dy * ca
    return np.exp(-0.5 * ((u / sr) ** 2 + (v / sc) ** 2))


def render_source(label, params, size=40):
    """Noise-free source model on a ``size`` x ``size`` grid."""
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
    c0 = (size - 1) / 2.0
    th = math.radians(params.position_angle)
    ux, uy = math.cos(th), -math.sin(th)
    img = params.core_flux * _blob(rr, cc, c0, c0, params.core_width, params.core_width, 0.0)
    for side, amp in ((1.0, 1.0), (-1.0, params.asymmetry)):
        if label == FRI:
            # plume: chain of blobs fading with distance from the core
            n_steps = 8
            for s in range(1, n_steps + 1):
                d = params.lobe_length * s / n_steps
                fade = amp * params.lobe_flux * (1.0 - 0.85 * s / n_steps)
                width = params.lobe_width * (1.0 + 0.6 * s / n_steps)
                img += fade * _blob(rr, cc, c0 + side * d * uy, c0 + side * d * ux, width * 1.4, width, th)
        else:
            # faint bridge plus a compact terminal hotspot
            for s in range(1, 7):
                d = params.lobe_length * s / 7
                img += amp * params.lobe_flux * _blob(
                    rr, cc, c0 + side * d * uy, c0 + side * d * ux, params.lobe_width * 1.8, params.lobe_width * 1.2, th
                )
            d = params.lobe_length
            img += amp * params.hotspot_flux * _blob(
                rr, cc, c0 + side * d * uy, c0 + side * d * ux, params.lobe_width, params.lobe_width, 0.0
            )
    return img


def synth_raw(label, rng, size=40, background=1.0):
    """Noisy raw cutout: source on a positive noisy background."""
    gen = rng.generator
    params = draw_params(label, gen)
    src = render_source(label, params, size)
    noise = gen.normal(0.0, params.noise_sigma, src.shape)
    return np.maximum(background + src + noise, 0.0), params


def synth_galaxy(label, rng, size=40):
    """One preprocessed 40x40 synthetic FRI or FRII image in [0, 1]."""
    label = parse_class(label)
    raw, _ = synth_raw(label, rng, size)
    return preprocess(raw, size=size)
