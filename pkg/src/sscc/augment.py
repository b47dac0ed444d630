"""Spectral-spatial augmentation pool and two-view generation.

Sampling and application are split: :func:`sample_plan` draws which
transforms fire and their parameters, :func:`apply_plan` is a pure function
of ``(plan, patch)``. Transforms whose randomness depends on the patch shape
(crop offset, erased positions, band-group order) carry their own integer
seed inside the plan.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np
from scipy import ndimage

from .data import Patch

SPATIAL_TRANSFORMS = ("crop", "flip", "rotate", "blur", "erase_pixel")
SPECTRAL_TRANSFORMS = ("erase_band", "permute_band")
TRANSFORMS = SPATIAL_TRANSFORMS + SPECTRAL_TRANSFORMS


class AugmentationError(ValueError):
    pass


@dataclass
class AugmentationPool:
    """Configurable pool of transforms.

    Spatial transforms fire independently with their own probability. The
    spectral ones are gated as a group by ``spectral_prob`` and then each
    fires with its own probability.
    """

    crop_prob: float = 0.8
    crop_scale_range: tuple[float, float] = (0.6, 1.0)
    flip_prob: float = 0.5
    rotate_prob: float = 0.5
    rotation_set: tuple[int, ...] = (90, 180, 270)
    blur_prob: float = 0.3
    blur_sigma_range: tuple[float, float] = (0.1, 1.0)
    erase_pixel_prob: float = 0.2
    pixel_erase_fraction: float = 0.1
    spectral_prob: float = 0.1
    erase_band_prob: float = 1.0
    band_erase_fraction: float = 0.1
    permute_band_prob: float = 1.0
    band_group_count: int = 4

    def __post_init__(self):
        self.crop_scale_range = tuple(float(v) for v in self.crop_scale_range)
        self.blur_sigma_range = tuple(float(v) for v in self.blur_sigma_range)
        self.rotation_set = tuple(int(v) for v in self.rotation_set)
        for name in ("crop_prob", "flip_prob", "rotate_prob", "blur_prob", "erase_pixel_prob",
                     "spectral_prob", "erase_band_prob", "permute_band_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise AugmentationError(f"{name}={p} is not a probability")
        lo, hi = self.crop_scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise AugmentationError(f"crop_scale_range {self.crop_scale_range} must satisfy 0 < lo <= hi <= 1")
        lo, hi = self.blur_sigma_range
        if not 0.0 < lo <= hi:
            raise AugmentationError(f"blur_sigma_range {self.blur_sigma_range} invalid")
        if not self.rotation_set or any(a % 90 or not 0 < a < 360 for a in self.rotation_set):
            raise AugmentationError("rotation_set must hold multiples of 90 in (0, 360)")
        for name in ("pixel_erase_fraction", "band_erase_fraction"):
            f = getattr(self, name)
            if not 0.0 <= f < 1.0:
                raise AugmentationError(f"{name}={f} must lie in [0, 1)")
        if self.band_group_count < 1:
            raise AugmentationError("band_group_count must be positive")

    @classmethod
    def disabled(cls, **overrides) -> "AugmentationPool":
        """A pool where nothing fires unless re-enabled through ``overrides``."""
        probs = {f"{name}_prob": 0.0 for name in ("crop", "flip", "rotate", "blur", "erase_pixel",
                                                  "erase_band", "permute_band")}
        probs["spectral_prob"] = 0.0
        probs.update(overrides)
        return cls(**probs)

    @classmethod
    def only(cls, *transforms: str) -> "AugmentationPool":
        """A pool that always applies exactly the given transforms (in pool order)."""
        overrides = {}
        for name in transforms:
            if name not in TRANSFORMS:
                raise AugmentationError(f"unknown transform {name!r}")
            overrides[f"{name}_prob"] = 1.0
            if name in SPECTRAL_TRANSFORMS:
                overrides["spectral_prob"] = 1.0
        return cls.disabled(**overrides)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class Transform:
    name: str
    params: tuple = ()

    def param(self, key):
        return dict(self.params)[key]


@dataclass
class AugmentationPlan:
    transforms: list[Transform] = field(default_factory=list)
    seed: int | None = None

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.transforms]

    def __len__(self):
        return len(self.transforms)


def _t(name, **params):
    return Transform(name, tuple(sorted(params.items())))


def sample_plan(pool: AugmentationPool, rng: np.random.Generator) -> AugmentationPlan:
    """Draw one augmentation composition from ``pool``.

    The number of draws from ``rng`` does not depend on which transforms
    fire, so plans drawn in sequence stay aligned across pool settings.
    """
    seed = int(rng.integers(2**63 - 1))
    draws = rng.random(8)
    child = np.random.default_rng(seed)
    plan = []

    scale = child.uniform(*pool.crop_scale_range)
    crop_seed = int(child.integers(2**31))
    if draws[0] < pool.crop_prob:
        plan.append(_t("crop", scale=float(scale), seed=crop_seed))

    flip_mode = int(child.integers(3))
    if draws[1] < pool.flip_prob:
        plan.append(_t("flip", horizontal=flip_mode in (0, 2), vertical=flip_mode in (1, 2)))

    angle = int(pool.rotation_set[child.integers(len(pool.rotation_set))])
    if draws[2] < pool.rotate_prob:
        plan.append(_t("rotate", quarter_turns=angle // 90))

    sigma = child.uniform(*pool.blur_sigma_range)
    if draws[3] < pool.blur_prob:
        plan.append(_t("blur", sigma=float(sigma)))

    pixel_seed = int(child.integers(2**31))
    if draws[4] < pool.erase_pixel_prob:
        plan.append(_t("erase_pixel", fraction=pool.pixel_erase_fraction, seed=pixel_seed))

    band_seed = int(child.integers(2**31))
    perm_seed = int(child.integers(2**31))
    if draws[5] < pool.spectral_prob:
        if draws[6] < pool.erase_band_prob:
            plan.append(_t("erase_band", fraction=pool.band_erase_fraction, seed=band_seed))
        if draws[7] < pool.permute_band_prob:
            plan.append(_t("permute_band", groups=pool.band_group_count, seed=perm_seed))
    return AugmentationPlan(plan, seed)


# --------------------------------------------------------------------------
# individual transforms on (side, side, channels) arrays


def resize_bilinear(values: np.ndarray, side: int) -> np.ndarray:
    """Resize the two spatial axes to ``side`` with bilinear interpolation.

    Corner pixels of the input map onto corner pixels of the output.
    """
    h, w = values.shape[:2]
    rows = np.linspace(0.0, h - 1, side)
    cols = np.linspace(0.0, w - 1, side)
    r0 = np.floor(rows).astype(int).clip(0, h - 1)
    c0 = np.floor(cols).astype(int).clip(0, w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0)[:, None, None]
    fc = (cols - c0)[None, :, None]
    top = values[r0][:, c0] * (1 - fc) + values[r0][:, c1] * fc
    bottom = values[r1][:, c0] * (1 - fc) + values[r1][:, c1] * fc
    return top * (1 - fr) + bottom * fr


def _crop(values, scale, seed):
    side = values.shape[0]
    window = int(math.floor(scale * side))
    if window < 2:
        raise AugmentationError(f"crop window {window} < 2 for side {side} and scale {scale}")
    rng = np.random.default_rng(seed)
    top, left = rng.integers(side - window + 1, size=2)
    return resize_bilinear(values[top:top + window, left:left + window], side)


def _flip(values, horizontal, vertical):
    if horizontal:
        values = values[:, ::-1]
    if vertical:
        values = values[::-1]
    return values


def _blur(values, sigma):
    return ndimage.gaussian_filter(values, sigma=(sigma, sigma, 0.0), mode="reflect")


def erased_pixel_count(side: int, fraction: float) -> int:
    total = side * side
    return total - math.ceil((1.0 - fraction) * total - 1e-9)


def erased_band_count(channels: int, fraction: float) -> int:
    if fraction <= 0.0:
        return 0
    return min(channels - 1, max(1, int(round(fraction * channels))))


def _erase_pixel(values, fraction, seed):
    side = values.shape[0]
    count = erased_pixel_count(side, fraction)
    out = values.copy()
    if count:
        flat = np.random.default_rng(seed).choice(side * side, size=count, replace=False)
        r, c = np.unravel_index(flat, (side, side))
        out[r, c, :] = values.reshape(-1, values.shape[2]).mean(axis=0)
    return out


def _erase_band(values, fraction, seed):
    channels = values.shape[2]
    count = erased_band_count(channels, fraction)
    out = values.copy()
    if count:
        bands = np.random.default_rng(seed).choice(channels, size=count, replace=False)
        out[:, :, bands] = values[:, :, bands].mean(axis=(0, 1))
    return out


def band_group_permutation(channels: int, groups: int, seed: int) -> np.ndarray:
    """Band order after shuffling ``groups`` runs of adjacent bands."""
    chunks = np.array_split(np.arange(channels), min(groups, channels))
    order = np.random.default_rng(seed).permutation(len(chunks))
    return np.concatenate([chunks[i] for i in order])


def _permute_band(values, groups, seed):
    return values[:, :, band_group_permutation(values.shape[2], groups, seed)]


def apply_transform(transform: Transform, values: np.ndarray) -> np.ndarray:
    p = dict(transform.params)
    name = transform.name
    if name == "crop":
        return _crop(values, p["scale"], p["seed"])
    if name == "flip":
        return _flip(values, p["horizontal"], p["vertical"])
    if name == "rotate":
        return np.rot90(values, k=p["quarter_turns"], axes=(0, 1))
    if name == "blur":
        return _blur(values, p["sigma"])
    if name == "erase_pixel":
        return _erase_pixel(values, p["fraction"], p["seed"])
    if name == "erase_band":
        return _erase_band(values, p["fraction"], p["seed"])
    if name == "permute_band":
        return _permute_band(values, p["groups"], p["seed"])
    raise AugmentationError(f"unknown transform {name!r}")


def apply_plan_array(plan: AugmentationPlan, values: np.ndarray) -> np.ndarray:
    out = values
    for transform in plan.transforms:
        out = apply_transform(transform, out)
    return np.ascontiguousarray(out)


def apply_plan(plan: AugmentationPlan, patch: Patch) -> Patch:
    """Apply every transform of ``plan`` in order; shape is preserved."""
    return Patch(apply_plan_array(plan, patch.values), patch.center_row, patch.center_col)


def view_rng(base_seed: int, sample_index: int, view_index: int) -> np.random.Generator:
    """Generator for one view of one sample, independent of batch order."""
    return np.random.default_rng([base_seed, sample_index, view_index])


def two_views(patch: Patch, pool: AugmentationPool, rng: np.random.Generator,
              pool_b: AugmentationPool | None = None) -> tuple[Patch, Patch]:
    """Two independently augmented views of ``patch``.

    ``pool_b`` (defaults to ``pool``) lets the second branch use a different
    pool, as in the single-transform-per-branch composition study.
    """
    plan_a = sample_plan(pool, rng)
    plan_b = sample_plan(pool if pool_b is None else pool_b, rng)
    return apply_plan(plan_a, patch), apply_plan(plan_b, patch)


def augment_batch(batch: np.ndarray, pool: AugmentationPool, base_seed: int, indices,
                  pool_b: AugmentationPool | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Two views of every patch in an ``(M, side, side, channels)`` array.

    View ``v`` of sample ``indices[i]`` uses :func:`view_rng` so the result
    does not depend on how samples were grouped into batches.
    """
    pool_b = pool if pool_b is None else pool_b
    view_a = np.empty_like(batch)
    view_b = np.empty_like(batch)
    for i, idx in enumerate(indices):
        view_a[i] = apply_plan_array(sample_plan(pool, view_rng(base_seed, int(idx), 0)), batch[i])
        view_b[i] = apply_plan_array(sample_plan(pool_b, view_rng(base_seed, int(idx), 1)), batch[i])
    return view_a, view_b
