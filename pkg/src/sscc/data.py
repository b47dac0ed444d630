"""Hyperspectral cube model, binary IO, PCA reduction and patch extraction."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

UNLABELED = np.iinfo(np.uint32).max

CUBE_MAGIC = b"SSC1"
LABEL_MAGIC = b"SSL1"
_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    """Raised when a cube or label file does not decode."""


@dataclass
class Cube:
    """An ``height x width x bands`` hyperspectral image."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ValueError(f"cube values must be a non-empty 3-D array, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("cube values must be finite")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def bands(self) -> int:
        return self.values.shape[2]

    def __eq__(self, other):
        if not isinstance(other, Cube):
            return NotImplemented
        return self.values.shape == other.values.shape and np.array_equal(self.values, other.values)


@dataclass
class LabelMap:
    """Per-pixel class labels; ``UNLABELED`` marks pixels without ground truth."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint32)
        if self.labels.ndim != 2:
            raise ValueError("label map must be 2-D")
        known = self.labels[self.labels != UNLABELED]
        if known.size and int(known.max()) >= self.num_classes:
            raise ValueError(f"label {int(known.max())} out of range for {self.num_classes} classes")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def labeled_mask(self) -> np.ndarray:
        return self.labels != UNLABELED

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return self.num_classes == other.num_classes and np.array_equal(self.labels, other.labels)


@dataclass
class Patch:
    """A ``side x side x channels`` window centred on ``(center_row, center_col)``."""

    values: np.ndarray
    center_row: int = 0
    center_col: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3 or self.values.shape[0] != self.values.shape[1]:
            raise ValueError(f"patch must be square side x side x channels, got {self.values.shape}")
        if self.values.shape[0] % 2 == 0:
            raise ValueError("patch side must be odd")

    @property
    def side(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    @property
    def n_bands(self) -> int:
        return self.components.shape[1]


# --------------------------------------------------------------------------
# IO


def _read_payload(path, magic: bytes):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    got, a, b, c = _HEADER.unpack_from(raw)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    return (a, b, c), raw[_HEADER.size:]


def save_cube(cube: Cube, path) -> None:
    h, w, b = cube.values.shape
    payload = np.ascontiguousarray(cube.values, dtype="<f4").tobytes()
    Path(path).write_bytes(_HEADER.pack(CUBE_MAGIC, h, w, b) + payload)


def load_cube(path) -> Cube:
    """Read a cube written by :func:`save_cube`.

    Raises:
        FileNotFoundError: ``path`` does not exist.
        FormatError: wrong magic, or payload length disagrees with the header.
    """
    (h, w, b), payload = _read_payload(path, CUBE_MAGIC)
    expected = h * w * b * 4
    if len(payload) != expected:
        raise FormatError(
            f"{path}: header says {h}x{w}x{b} ({h * w * b} floats) but payload holds {len(payload) / 4:g}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(h, w, b).astype(np.float32)
    return Cube(values)


def save_labels(labels: LabelMap, path) -> None:
    h, w = labels.labels.shape
    payload = np.ascontiguousarray(labels.labels, dtype="<u4").tobytes()
    Path(path).write_bytes(_HEADER.pack(LABEL_MAGIC, h, w, labels.num_classes) + payload)


def load_labels(path) -> LabelMap:
    (h, w, c), payload = _read_payload(path, LABEL_MAGIC)
    if len(payload) != h * w * 4:
        raise FormatError(f"{path}: header says {h}x{w} labels but payload holds {len(payload) / 4:g}")
    labels = np.frombuffer(payload, dtype="<u4").reshape(h, w).astype(np.uint32)
    try:
        return LabelMap(labels, c)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


# --------------------------------------------------------------------------
# PCA


def pca_fit(cube: Cube, k: int) -> PcaModel:
    """Fit a ``k``-component PCA on every pixel spectrum of ``cube``.

    Components are the leading eigenvectors of the band covariance, each
    signed so that its largest-magnitude entry is nonnegative.
    """
    pixels = cube.values.reshape(-1, cube.bands).astype(np.float64)
    if not 1 <= k <= min(cube.bands, pixels.shape[0]):
        raise ValueError(f"k={k} outside [1, {min(cube.bands, pixels.shape[0])}]")
    mean = pixels.mean(axis=0)
    centered = pixels - mean
    cov = centered.T @ centered / pixels.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:k]
    components = eigvecs[:, order].T.copy()
    variance = np.clip(eigvals[order], 0.0, None)

    pivot = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(k), pivot])
    signs[signs == 0] = 1.0
    components *= signs[:, None]
    return PcaModel(mean=mean, components=components, explained_variance=variance)


def pca_transform(model: PcaModel, cube: Cube) -> Cube:
    if cube.bands != model.n_bands:
        raise ValueError(f"cube has {cube.bands} bands, PCA model expects {model.n_bands}")
    pixels = cube.values.reshape(-1, cube.bands).astype(np.float64)
    reduced = (pixels - model.mean) @ model.components.T
    return Cube(reduced.reshape(cube.height, cube.width, model.n_components))


def pca_inverse(model: PcaModel, cube: Cube) -> Cube:
    pixels = cube.values.reshape(-1, cube.bands).astype(np.float64)
    restored = pixels @ model.components + model.mean
    return Cube(restored.reshape(cube.height, cube.width, model.n_bands))


# --------------------------------------------------------------------------
# patches


def mirror_pad(values: np.ndarray, margin: int) -> np.ndarray:
    """Pad the two spatial axes by ``margin`` with edge-excluding reflection."""
    if margin == 0:
        return values
    return np.pad(values, ((margin, margin), (margin, margin), (0, 0)), mode="reflect")


def extract_patches(cube: Cube, labels: LabelMap | None = None, side: int = 13):
    """Cut one ``side x side`` patch around every pixel.

    With ``labels`` given only labelled pixels are used, and the aligned
    label array is returned as the second item (otherwise ``None``).
    Borders are mirrored without repeating the edge pixel, so the patch at
    ``(0, 0)`` holds ``cube[1, 1]`` at its top-left for ``side == 3``.
    """
    if side < 1 or side % 2 == 0:
        raise ValueError(f"patch side must be a positive odd integer, got {side}")
    margin = side // 2
    if margin >= min(cube.height, cube.width):
        raise ValueError(
            f"patch side {side} too large for mirror padding of a {cube.height}x{cube.width} cube"
        )
    if labels is not None and (labels.height, labels.width) != (cube.height, cube.width):
        raise ValueError("label map dimensions do not match the cube")

    padded = mirror_pad(cube.values, margin)
    if labels is None:
        rows, cols = np.indices((cube.height, cube.width)).reshape(2, -1)
        aligned = None
    else:
        rows, cols = np.nonzero(labels.labeled_mask())
        aligned = labels.labels[rows, cols].astype(np.int64)

    patches = [
        Patch(padded[r:r + side, c:c + side].copy(), int(r), int(c))
        for r, c in zip(rows, cols)
    ]
    return patches, aligned


def stack_patches(patches) -> np.ndarray:
    """Stack patches into an ``(N, side, side, channels)`` array."""
    return np.stack([p.values for p in patches])


# --------------------------------------------------------------------------
# synthetic data


def _voronoi_layout(c, height, width, rng, relax_steps=10):
    """Voronoi cells around ``c`` distinct seed pixels.

    A few Lloyd steps move every seed to its cell centroid so regions end up
    with comparable area. Seeds always remain distinct pixels, so every cell
    keeps at least its own seed.
    """
    grid = np.indices((height, width)).reshape(2, -1).T.astype(np.float64)
    seeds = grid[rng.choice(height * width, size=c, replace=False)]

    def assign(points):
        return ((grid[:, None, :] - points[None, :, :]) ** 2).sum(-1).argmin(axis=1)

    for _ in range(relax_steps):
        owner = assign(seeds)
        moved = np.stack([grid[owner == k].mean(axis=0) for k in range(c)])
        moved = np.rint(moved)
        if len(np.unique(moved, axis=0)) < c or np.array_equal(moved, seeds):
            break
        seeds = moved
    return assign(seeds).reshape(height, width)


def _smooth_signature(bands, rng):
    axis = np.linspace(0.0, 1.0, bands)
    spectrum = np.full(bands, rng.uniform(0.1, 0.3))
    for _ in range(3):
        center = rng.uniform(-0.1, 1.1)
        width = rng.uniform(0.08, 0.3)
        spectrum += rng.uniform(0.2, 0.8) * np.exp(-0.5 * ((axis - center) / width) ** 2)
    return spectrum


def synth_cube(c: int, height: int, width: int, bands: int, noise_sigma: float, seed: int):
    """Generate a piecewise-constant cube with ``c`` spatially contiguous classes.

    Regions are a Voronoi partition around ``c`` distinct seed pixels. Each
    class gets a smooth signature (a baseline plus three Gaussian bumps);
    signatures are redrawn until every pair is at least ``0.25 * sqrt(bands)``
    apart so classes stay separable under moderate noise.
    """
    if c < 2:
        raise ValueError("need at least 2 classes")
    if min(height, width, bands) < 1:
        raise ValueError("dimensions must be positive")
    if c > height * width:
        raise ValueError(f"{c} classes do not fit in {height}x{width} pixels")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be nonnegative")

    rng = np.random.default_rng(seed)
    layout = _voronoi_layout(c, height, width, rng)

    min_gap = 0.25 * np.sqrt(bands)
    for _ in range(1000):
        signatures = np.stack([_smooth_signature(bands, rng) for _ in range(c)])
        gaps = np.linalg.norm(signatures[:, None] - signatures[None], axis=-1)
        if gaps[np.triu_indices(c, 1)].min() >= min_gap:
            break

    values = signatures[layout] + noise_sigma * rng.standard_normal((height, width, bands))
    return Cube(values.astype(np.float32)), LabelMap(layout.astype(np.uint32), c)
