"""Procedural training phantoms (ellipses) and out-of-distribution volumes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

OOD_KINDS = ("rectangles", "disks+bars", "smooth-blobs")


@dataclass(frozen=True)
class EllipseSpec:
    """Random ellipses painted back-to-front on a constant background.

    Geometry is in normalised coordinates where the image spans [-1, 1]^2.
    """

    image_size: int = 32
    min_count: int = 1
    max_count: int = 6
    center_range: float = 0.6
    axis_range: tuple[float, float] = (0.1, 0.5)
    intensity_range: tuple[float, float] = (0.2, 1.0)
    background: float = 0.0

    def validate(self) -> None:
        if not 1 <= self.min_count <= self.max_count:
            raise ValueError("need 1 <= min_count <= max_count")
        if not 0 < self.axis_range[0] <= self.axis_range[1]:
            raise ValueError("ellipse axes must be positive")
        lo, hi = self.intensity_range
        if not 0 <= lo <= hi <= 1 or not 0 <= self.background <= 1:
            raise ValueError("intensities must lie in [0, 1]")


def pixel_grid(n: int) -> tuple[np.ndarray, np.ndarray]:
    c = (2 * np.arange(n) + 1) / n - 1
    return np.meshgrid(c, c, indexing="xy")


def _draw_ellipses(spec: EllipseSpec, rng: np.random.Generator, count: int):
    r = spec.center_range
    return [
        dict(
            cx=rng.uniform(-r, r),
            cy=rng.uniform(-r, r),
            a=rng.uniform(*spec.axis_range),
            b=rng.uniform(*spec.axis_range),
            angle=rng.uniform(0, np.pi),
            value=rng.uniform(*spec.intensity_range),
        )
        for _ in range(count)
    ]


def inside_ellipse(x, y, e) -> np.ndarray:
    c, s = np.cos(e["angle"]), np.sin(e["angle"])
    dx, dy = x - e["cx"], y - e["cy"]
    u = (c * dx + s * dy) / e["a"]
    v = (-s * dx + c * dy) / e["b"]
    return u * u + v * v <= 1.0


def sample_ellipse_image(spec: EllipseSpec, seed, count: int | None = None) -> np.ndarray:
    spec.validate()
    rng = np.random.default_rng(seed)
    if count is None:
        count = int(rng.integers(spec.min_count, spec.max_count + 1))
    X, Y = pixel_grid(spec.image_size)
    img = np.full((spec.image_size, spec.image_size), spec.background)
    for e in _draw_ellipses(spec, rng, count):
        img[inside_ellipse(X, Y, e)] = e["value"]
    return np.clip(img, 0.0, 1.0)


def ellipse_batch(spec: EllipseSpec, rng: np.random.Generator, batch: int, channels: int = 1):
    """Training batch of shape (batch, channels, n, n).

    With ``channels == 2`` each image gets a random smooth phase and is
    returned as (real, imag) planes.
    """
    imgs = np.stack([sample_ellipse_image(spec, rng.integers(2**63)) for _ in range(batch)])
    if channels == 1:
        return imgs[:, None]
    if channels != 2:
        raise ValueError("channels must be 1 or 2")
    X, Y = pixel_grid(spec.image_size)
    out = np.empty((batch, 2) + imgs.shape[1:])
    for i, img in enumerate(imgs):
        k = rng.uniform(-1.5, 1.5, size=3)
        phase = k[0] + k[1] * X + k[2] * Y
        out[i, 0] = img * np.cos(phase)
        out[i, 1] = img * np.sin(phase)
    return out


@dataclass(frozen=True)
class OODVolumeSpec:
    """Piecewise-constant shapes drifting smoothly along the slice axis.

    ``correlation`` is the AR(1) coefficient of the latent shape parameters
    between neighbouring slices: 0 gives independent slices, 1 identical ones.
    """

    kind: str = "rectangles"
    n_slices: int = 16
    image_size: int = 32
    correlation: float = 0.8
    max_shapes: int = 6
    p_visible: float = 0.75
    intensity_range: tuple[float, float] = (0.2, 1.0)
    background: float = 0.0

    def validate(self) -> None:
        if self.kind not in OOD_KINDS:
            raise ValueError(f"unknown OOD kind {self.kind!r}; expected one of {OOD_KINDS}")
        if self.n_slices < 2:
            raise ValueError("an OOD volume needs at least 2 slices")
        if not 0.0 <= self.correlation <= 1.0:
            raise ValueError("correlation must lie in [0, 1]")


_N_LATENT = 6  # cx, cy, size1, size2, intensity, visibility


def _latents(spec: OODVolumeSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform(0,1) latents of shape (n_slices, max_shapes, _N_LATENT)."""
    rho = spec.correlation
    z = np.empty((spec.n_slices, spec.max_shapes, _N_LATENT))
    z[0] = rng.standard_normal((spec.max_shapes, _N_LATENT))
    for i in range(1, spec.n_slices):
        fresh = rng.standard_normal((spec.max_shapes, _N_LATENT))
        z[i] = rho * z[i - 1] + np.sqrt(max(0.0, 1.0 - rho * rho)) * fresh
    return ndtr(z)


def _lerp(u, lo, hi):
    return lo + (hi - lo) * u


def _render_slice(spec: OODVolumeSpec, lat: np.ndarray) -> np.ndarray:
    n = spec.image_size
    X, Y = pixel_grid(n)
    img = np.full((n, n), spec.background)
    visible = lat[:, 5] < spec.p_visible
    if not visible.any():
        visible[np.argmin(lat[:, 5])] = True
    for k in np.flatnonzero(visible):
        cx, cy = _lerp(lat[k, 0], -0.6, 0.6), _lerp(lat[k, 1], -0.6, 0.6)
        val = _lerp(lat[k, 4], *spec.intensity_range)
        bar = k % 2 == 1
        if spec.kind == "rectangles":
            if bar:
                long, thin = _lerp(lat[k, 2], 0.3, 0.7), _lerp(lat[k, 3], 0.03, 0.08)
                hw, hh = (long, thin) if k % 4 == 1 else (thin, long)
            else:
                hw, hh = _lerp(lat[k, 2], 0.1, 0.45), _lerp(lat[k, 3], 0.1, 0.45)
            mask = (np.abs(X - cx) <= hw) & (np.abs(Y - cy) <= hh)
            img[mask] = val
        elif spec.kind == "disks+bars":
            if bar:
                long, thin = _lerp(lat[k, 2], 0.3, 0.7), _lerp(lat[k, 3], 0.03, 0.08)
                hw, hh = (long, thin) if k % 4 == 1 else (thin, long)
                mask = (np.abs(X - cx) <= hw) & (np.abs(Y - cy) <= hh)
            else:
                r = _lerp(lat[k, 2], 0.1, 0.4)
                mask = (X - cx) ** 2 + (Y - cy) ** 2 <= r * r
            img[mask] = val
        else:
            sx, sy = _lerp(lat[k, 2], 0.1, 0.3), _lerp(lat[k, 3], 0.1, 0.3)
            img += val * np.exp(-0.5 * (((X - cx) / sx) ** 2 + ((Y - cy) / sy) ** 2))
    return np.clip(img, 0.0, 1.0)


def sample_ood_volume(spec: OODVolumeSpec, seed) -> np.ndarray:
    """Volume of shape (n_slices, n, n) with values in [0, 1]."""
    spec.validate()
    rng = np.random.default_rng(seed)
    lat = _latents(spec, rng)
    return np.stack([_render_slice(spec, lat[i]) for i in range(spec.n_slices)])


# -- distribution distance --------------------------------------------------
def _features(images: np.ndarray, bins: int = 8) -> np.ndarray:
    """Mean intensity histogram and gradient-orientation histogram."""
    images = np.asarray(images, dtype=np.float64)
    feats = []
    for img in images:
        ih, _ = np.histogram(img, bins=bins, range=(0.0, 1.0))
        ih = ih / ih.sum()
        gx = np.diff(img, axis=1)[:-1, :]
        gy = np.diff(img, axis=0)[:, :-1]
        mag = np.hypot(gx, gy)
        theta = np.mod(np.arctan2(gy, gx), np.pi)
        oh, _ = np.histogram(theta, bins=bins, range=(0.0, np.pi), weights=mag)
        oh = oh / oh.sum() if oh.sum() > 0 else np.full(bins, 1.0 / bins)
        feats.append(np.concatenate([ih, oh]))
    return np.mean(feats, axis=0)


def shape_distance(a: np.ndarray, b: np.ndarray) -> float:
    """L1 distance between mean intensity/edge-orientation histograms.

    ``a`` and ``b`` are stacks of 2D images from the two distributions.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 3 or b.ndim != 3 or not len(a) or not len(b):
        raise ValueError("shape_distance expects non-empty (count, n, n) stacks")
    return float(np.abs(_features(a) - _features(b)).sum())
