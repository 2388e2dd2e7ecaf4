"""Forward operators with exact adjoints, measurement simulation and CG solvers.

Conventions
-----------
* Images carry a channel axis: real images are (1, n, n); complex MRI images
  are (2, n, n) holding real and imaginary planes. Any number of leading
  batch axes is allowed.
* CT measurements are sinograms (n_angles, n_detectors). Line integrals use
  normalised length units in which the image spans [-1, 1]^2.
* MRI measurements are stored as real arrays (coils, 2, n, n) with real and
  imaginary k-space planes in unshifted FFT layout. The DFT is unitary
  (``norm="ortho"``), so a fully sampled single-coil acquisition preserves
  the squared norm exactly (Parseval constant 1).
"""
from __future__ import annotations

import functools
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor

KINDS = ("identity", "matrix", "ct_parallel", "mri_single", "mri_multicoil")


@dataclass(frozen=True, eq=False)
class OperatorSpec:
    kind: str
    image_size: int
    channels: int = 1
    angles: tuple[float, ...] = ()
    n_detectors: int | None = None
    mask: np.ndarray | None = None
    coils: np.ndarray | None = None
    matrix: np.ndarray | None = None
    sigma_y: float = 0.01

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown operator kind {self.kind!r}")
        if self.channels not in (1, 2):
            raise ValueError("channels must be 1 (real) or 2 (complex)")
        if self.sigma_y < 0:
            raise ValueError("sigma_y must be non-negative")
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        if self.kind == "ct_parallel":
            if not self.angles:
                raise ValueError("ct_parallel needs at least one angle")
            if self.channels != 1:
                raise ValueError("ct_parallel acts on real images")
            if self.n_detectors is None:
                object.__setattr__(self, "n_detectors", self.image_size)
        if self.kind.startswith("mri"):
            m = np.asarray(self.mask, dtype=np.float64)
            if m.shape != (self.image_size,) * 2 or not np.isin(m, (0.0, 1.0)).all():
                raise ValueError("MRI mask must be an (n, n) array of zeros and ones")
            object.__setattr__(self, "mask", m)
        if self.kind == "mri_multicoil":
            c = np.asarray(self.coils, dtype=np.complex128)
            if c.ndim != 3 or c.shape[1:] != (self.image_size,) * 2:
                raise ValueError("coil maps must have shape (C, n, n)")
            if np.min(np.sum(np.abs(c) ** 2, axis=0)) <= 0:
                raise ValueError("coil maps must be jointly nonzero everywhere")
            object.__setattr__(self, "coils", c)
        if self.kind == "matrix":
            A = np.asarray(self.matrix, dtype=np.float64)
            if A.ndim != 2 or A.shape[1] != self.channels * self.image_size**2:
                raise ValueError("matrix operator must be (m, channels * n * n)")
            object.__setattr__(self, "matrix", A)

    @property
    def domain_shape(self) -> tuple[int, ...]:
        return (self.channels, self.image_size, self.image_size)

    @property
    def range_shape(self) -> tuple[int, ...]:
        n = self.image_size
        if self.kind == "identity":
            return self.domain_shape
        if self.kind == "matrix":
            return (self.matrix.shape[0],)
        if self.kind == "ct_parallel":
            return (len(self.angles), self.n_detectors)
        coils = 1 if self.kind == "mri_single" else self.coils.shape[0]
        return (coils, 2, n, n)

    def describe(self) -> dict:
        """JSON-friendly summary used in sidecars and manifests."""
        d = {
            "kind": self.kind,
            "image_size": self.image_size,
            "channels": self.channels,
            "sigma_y": self.sigma_y,
        }
        if self.kind == "ct_parallel":
            d["angles"] = list(self.angles)
            d["n_detectors"] = self.n_detectors
        if self.mask is not None:
            d["mask_sha256"] = _digest(self.mask)
            d["mask_fraction"] = float(self.mask.mean())
        if self.coils is not None:
            d["coils"] = int(self.coils.shape[0])
            d["coils_sha256"] = _digest(self.coils)
        if self.matrix is not None:
            d["matrix_sha256"] = _digest(self.matrix)
        return d


def _digest(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()[:16]


# -- constructors -----------------------------------------------------------
def ct_spec(image_size: int, n_angles: int, sigma_y: float = 0.01, n_detectors=None,
            arc: float = 180.0) -> OperatorSpec:
    angles = np.linspace(0.0, arc, n_angles, endpoint=False)
    return OperatorSpec("ct_parallel", image_size, angles=tuple(angles),
                        n_detectors=n_detectors, sigma_y=sigma_y)


def mri_spec(mask: np.ndarray, sigma_y: float = 0.01, coils=None, channels: int = 1) -> OperatorSpec:
    kind = "mri_single" if coils is None else "mri_multicoil"
    return OperatorSpec(kind, mask.shape[0], channels=channels, mask=mask, coils=coils,
                        sigma_y=sigma_y)


def vd_mask(n: int, acceleration: float = 8.0, center_fraction: float = 0.08,
            seed=0, power: float = 2.0) -> np.ndarray:
    """Variable-density Bernoulli mask (centred layout) with a full central disc.

    Stands in for variable-density Poisson-disc sampling.
    """
    rng = np.random.default_rng(seed)
    c = np.arange(n) - n // 2
    r = np.hypot(*np.meshgrid(c, c, indexing="ij")) / (n / np.sqrt(2))
    center = r <= center_fraction
    target = n * n / acceleration
    pdf = (1.0 - np.clip(r, 0, 1)) ** power
    lo, hi = 0.0, 1e6
    for _ in range(60):
        s = 0.5 * (lo + hi)
        expected = center.sum() + np.minimum(s * pdf, 1.0)[~center].sum()
        lo, hi = (s, hi) if expected < target else (lo, s)
    prob = np.minimum(lo * pdf, 1.0)
    mask = (rng.random((n, n)) < prob) | center
    return mask.astype(np.float64)


def uniform1d_mask(n: int, acceleration: int = 4, center_fraction: float = 0.08) -> np.ndarray:
    """Every ``acceleration``-th phase-encode column plus a fully sampled centre band."""
    cols = np.zeros(n, dtype=bool)
    cols[::acceleration] = True
    half = max(1, int(round(n * center_fraction / 2)))
    cols[n // 2 - half : n // 2 + half] = True
    return np.tile(cols, (n, 1)).astype(np.float64)


def coil_maps(n: int, n_coils: int = 4, width: float = 0.9) -> np.ndarray:
    """Smooth complex Gaussian sensitivities normalised to sum |s_c|^2 = 1."""
    c = (2 * np.arange(n) + 1) / n - 1
    X, Y = np.meshgrid(c, c, indexing="xy")
    maps = []
    for k in range(n_coils):
        phi = 2 * np.pi * k / n_coils
        cx, cy = 1.2 * np.cos(phi), 1.2 * np.sin(phi)
        mag = np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * width**2))
        phase = 0.5 * (np.cos(phi) * X + np.sin(phi) * Y) + phi
        maps.append(mag * np.exp(1j * phase))
    maps = np.array(maps)
    return maps / np.sqrt(np.sum(np.abs(maps) ** 2, axis=0, keepdims=True))


# -- CT projector -------------------------------------------------------------
@functools.lru_cache(maxsize=32)
def _ct_matrix(n: int, angles: tuple[float, ...], n_det: int) -> sp.csr_matrix:
    """Ray-driven projector: bilinear samples every half pixel along each ray."""
    half = (n - 1) / 2.0
    det = (np.arange(n_det) - (n_det - 1) / 2.0) * (n / n_det)
    radius = n / np.sqrt(2.0) + 1.0
    du = 0.5
    u = np.arange(-radius, radius + du / 2, du)
    pix_len = 2.0 / n  # normalised length of one pixel
    rows, cols, vals = [], [], []
    for a_idx, deg in enumerate(angles):
        th = np.deg2rad(deg)
        c, s = np.cos(th), np.sin(th)
        px = det[:, None] * c - u[None, :] * s + half
        py = det[:, None] * s + u[None, :] * c + half
        ray = a_idx * n_det + np.repeat(np.arange(n_det), len(u))
        px, py = px.ravel(), py.ravel()
        x0, y0 = np.floor(px).astype(int), np.floor(py).astype(int)
        fx, fy = px - x0, py - y0
        for dx, dy, w in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                          (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < n) & (yi >= 0) & (yi < n) & (w > 0)
            rows.append(ray[ok])
            cols.append(yi[ok] * n + xi[ok])
            vals.append(w[ok] * du * pix_len)
    m = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(angles) * n_det, n * n),
    )
    return m.tocsr()


def ct_matrix(spec: OperatorSpec) -> sp.csr_matrix:
    return _ct_matrix(spec.image_size, spec.angles, spec.n_detectors)


# -- apply / adjoint ------------------------------------------------------
def _lead(x: np.ndarray, trailing: tuple[int, ...], op: str, what: str) -> tuple[int, ...]:
    k = len(trailing)
    if x.ndim < k or x.shape[x.ndim - k :] != trailing:
        raise ValueError(f"{op}: {what} shape {x.shape} does not end with {trailing}")
    return x.shape[: x.ndim - k]


def _to_complex(x: np.ndarray, channels: int) -> np.ndarray:
    # x: (..., channels, n, n) -> complex (..., n, n)
    return x[..., 0, :, :] + 1j * x[..., 1, :, :] if channels == 2 else x[..., 0, :, :]


def _from_complex(z: np.ndarray, channels: int) -> np.ndarray:
    if channels == 2:
        return np.stack([z.real, z.imag], axis=-3)
    return z.real[..., None, :, :]


def apply(spec: OperatorSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    lead = _lead(x, spec.domain_shape, "apply", "image")
    if spec.kind == "identity":
        return x.copy()
    if spec.kind == "matrix":
        return (x.reshape(lead + (-1,)) @ spec.matrix.T).reshape(lead + spec.range_shape)
    if spec.kind == "ct_parallel":
        flat = x.reshape(-1, spec.image_size**2)
        return (ct_matrix(spec) @ flat.T).T.reshape(lead + spec.range_shape)
    z = _to_complex(x, spec.channels)[..., None, :, :]
    if spec.kind == "mri_multicoil":
        z = z * spec.coils
    k = np.fft.fft2(z, norm="ortho") * np.fft.ifftshift(spec.mask)
    return np.stack([k.real, k.imag], axis=-3)


def adjoint(spec: OperatorSpec, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    lead = _lead(y, spec.range_shape, "adjoint", "measurement")
    if spec.kind == "identity":
        return y.copy()
    if spec.kind == "matrix":
        return (y.reshape(lead + (-1,)) @ spec.matrix).reshape(lead + spec.domain_shape)
    if spec.kind == "ct_parallel":
        flat = y.reshape(-1, int(np.prod(spec.range_shape)))
        out = (ct_matrix(spec).T @ flat.T).T
        return out.reshape(lead + spec.domain_shape)
    k = (y[..., 0, :, :] + 1j * y[..., 1, :, :]) * np.fft.ifftshift(spec.mask)
    z = np.fft.ifft2(k, norm="ortho")
    if spec.kind == "mri_multicoil":
        z = np.conj(spec.coils) * z
    return _from_complex(z.sum(axis=-3), spec.channels)


# -- linear maps ----------------------------------------------------------
@dataclass(frozen=True, eq=False)
class LinearMap:
    """A linear action usable on numpy arrays and on autodiff tensors."""

    forward: Callable[[np.ndarray], np.ndarray]
    adjoint: Callable[[np.ndarray], np.ndarray]
    domain_shape: tuple[int, ...]
    range_shape: tuple[int, ...]
    name: str = "linear_map"

    def __call__(self, x):
        if isinstance(x, Tensor):
            return ad.linear_map(x, self.forward, self.adjoint, self.name)
        return self.forward(np.asarray(x, dtype=np.float64))

    def T(self, y):
        if isinstance(y, Tensor):
            return ad.linear_map(y, self.adjoint, self.forward, self.name + ".T")
        return self.adjoint(np.asarray(y, dtype=np.float64))


def as_linear_map(spec: OperatorSpec) -> LinearMap:
    return LinearMap(
        functools.partial(apply, spec),
        functools.partial(adjoint, spec),
        spec.domain_shape,
        spec.range_shape,
        f"A[{spec.kind}]",
    )


def normal_map(spec: OperatorSpec, gamma: float = 1.0, delta: float = 0.0) -> LinearMap:
    """Self-adjoint map x -> gamma * A^T A x + delta * x."""

    def f(x):
        out = adjoint(spec, apply(spec, x))
        if gamma != 1.0:
            out = gamma * out
        if delta:
            out = out + delta * x
        return out

    return LinearMap(f, f, spec.domain_shape, spec.domain_shape, f"N[{spec.kind}]")


def matrix_map(M: np.ndarray) -> LinearMap:
    M = np.asarray(M, dtype=np.float64)
    return LinearMap(
        lambda x: x @ M.T, lambda y: y @ M, (M.shape[1],), (M.shape[0],), "matrix"
    )


# -- CG -------------------------------------------------------------------
def _dot(u, v, batch_axes: int):
    if isinstance(u, Tensor) or isinstance(v, Tensor):
        return ad.batch_dot(u, v, batch_axes)
    axes = tuple(range(batch_axes, np.ndim(u)))
    return np.sum(u * v, axis=axes, keepdims=True)


def _val(a) -> np.ndarray:
    return a.data if isinstance(a, Tensor) else np.asarray(a)


_CG_FLOOR = 1e-28  # squared relative residual treated as converged


def cg_solve(
    A: Callable,
    b,
    max_iters: int,
    tol: float = 0.0,
    init=None,
    batch_axes: int = 0,
    history: list | None = None,
    reorthogonalize: bool = True,
):
    """Conjugate gradients for SPD ``A``, stopping at ``max_iters`` or when
    ``||r|| <= tol * ||b||`` for every system.

    With ``batch_axes = k`` the leading k axes index independent systems, each
    with its own step sizes. Passing tensors unrolls every iteration into the
    autodiff graph. ``history`` (if given) receives the residual norms.

    ``reorthogonalize`` projects each new residual off all earlier ones (two
    passes). Exact-arithmetic iterates are unchanged, but finite termination in
    n steps survives rounding, which plain CG loses on spread spectra.
    """
    if max_iters < 1:
        raise ValueError("cg_solve: max_iters must be >= 1")
    x = init if init is not None else (Tensor(np.zeros(b.shape)) if isinstance(b, Tensor) else np.zeros(np.shape(b)))
    r = b - A(x)
    p = r
    rr = _dot(r, r, batch_axes)
    bb = _val(_dot(b, b, batch_axes))
    # systems at round-off level stop updating; another step would divide noise by noise
    floor = np.maximum(tol * tol, _CG_FLOOR) * bb
    basis: list = []  # earlier residuals with their squared norms
    for _ in range(max_iters):
        rr_v = _val(rr)
        if not np.all(np.isfinite(rr_v)):
            raise FloatingPointError("cg_solve: non-finite residual")
        if history is not None:
            history.append(np.sqrt(rr_v).ravel().copy())
        active = rr_v > floor
        if not np.any(active) or np.all(rr_v <= tol * tol * bb):
            break
        Ap = A(p)
        pAp = _dot(p, Ap, batch_axes)
        alpha = rr / (pAp + (_val(pAp) == 0))
        if not np.all(active):
            alpha = alpha * active
        x = x + alpha * p
        if reorthogonalize:
            basis.append((r, rr + (rr_v == 0)))
        r = r - alpha * Ap
        if reorthogonalize:
            for _ in range(2):
                for q, qq in basis:
                    r = r - (_dot(q, r, batch_axes) / qq) * q
        rr_new = _dot(r, r, batch_axes)
        beta = rr_new / (rr + (rr_v == 0))
        p = r + beta * p
        rr = rr_new
    else:
        if history is not None:
            history.append(np.sqrt(_val(rr)).ravel().copy())
    return x


def pseudo_inverse(spec: OperatorSpec, y, M: int = 30, damping: float = 0.0, init=None):
    """Approximate A^+ y by M CG steps on (A^T A + damping I) x = A^T y.

    Leading axes of ``y`` are independent slices.
    """
    y = np.asarray(y, dtype=np.float64)
    lead = _lead(y, spec.range_shape, "pseudo_inverse", "measurement")
    rhs = adjoint(spec, y)
    return cg_solve(normal_map(spec, 1.0, damping), rhs, M, init=init, batch_axes=len(lead))


def simulate_measurement(spec: OperatorSpec, x, seed) -> np.ndarray:
    """y = A x + n with n ~ N(0, sigma_y^2) on every acquired real entry."""
    y = apply(spec, x)
    if spec.sigma_y == 0:
        return y
    noise = np.random.default_rng(seed).standard_normal(y.shape) * spec.sigma_y
    if spec.kind.startswith("mri"):
        noise = noise * np.fft.ifftshift(spec.mask)
    return y + noise


# -- measurement files ------------------------------------------------------
def write_measurement(prefix, y: np.ndarray, spec: OperatorSpec, seed=None) -> tuple[Path, Path]:
    """Raw little-endian data (float32 for CT, complex64 for MRI) plus a JSON sidecar."""
    prefix = Path(prefix)
    y = np.asarray(y)
    if spec.kind.startswith("mri"):
        data = (y[..., 0, :, :] + 1j * y[..., 1, :, :]).astype("<c8")
        dtype = "complex64"
    else:
        data = y.astype("<f4")
        dtype = "float32"
    raw = prefix.with_suffix(".raw")
    side = prefix.with_suffix(".json")
    raw.write_bytes(data.tobytes())
    meta = {"shape": list(data.shape), "dtype": dtype, "byte_order": "little",
            "seed": seed, "operator": spec.describe()}
    if spec.mask is not None:
        np.save(prefix.with_suffix(".mask.npy"), spec.mask)
    if spec.coils is not None:
        np.save(prefix.with_suffix(".coils.npy"), spec.coils)
    side.write_text(json.dumps(meta, indent=2))
    return raw, side


def read_measurement(prefix) -> tuple[np.ndarray, dict]:
    prefix = Path(prefix)
    meta = json.loads(prefix.with_suffix(".json").read_text())
    dt = "<c8" if meta["dtype"] == "complex64" else "<f4"
    data = np.frombuffer(prefix.with_suffix(".raw").read_bytes(), dtype=dt).reshape(meta["shape"])
    if meta["dtype"] == "complex64":
        y = np.stack([data.real, data.imag], axis=-3).astype(np.float64)
    else:
        y = data.astype(np.float64)
    return y, meta


def spec_from_meta(meta: dict, prefix=None) -> OperatorSpec:
    op = meta["operator"]
    kind = op["kind"]
    if kind == "ct_parallel":
        return OperatorSpec(kind, op["image_size"], angles=tuple(op["angles"]),
                            n_detectors=op["n_detectors"], sigma_y=op["sigma_y"])
    if kind.startswith("mri"):
        prefix = Path(prefix)
        mask = np.load(prefix.with_suffix(".mask.npy"))
        coils = np.load(prefix.with_suffix(".coils.npy")) if kind == "mri_multicoil" else None
        return OperatorSpec(kind, op["image_size"], channels=op["channels"], mask=mask,
                            coils=coils, sigma_y=op["sigma_y"])
    if kind == "identity":
        return OperatorSpec(kind, op["image_size"], channels=op["channels"], sigma_y=op["sigma_y"])
    raise ValueError(f"cannot rebuild operator of kind {kind!r} from a sidecar")
