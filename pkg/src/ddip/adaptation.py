"""Test-time adaptation of LoRA adapters along the reverse diffusion trajectory.

* ``ddip_reconstruct``: independent adapters per slice.
* ``d3ip_reconstruct``: one adapter set shared by the whole volume, fitted on
  K sampled slices per timestep (random or contiguous).
* ``d3ip_meta_reconstruct``: the shared fit with a decaying Reptile step,
  followed by per-slice fine-tuning from the resulting meta-adapter.
* ``dip_baseline``: an untrained conv net fitted to one measurement.

Randomness is split into independent streams keyed by (seed, purpose, slice
index), so a slice sees the same noise regardless of processing order.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .approximators import ApproximatorConfig, estimate
from .autodiff import Tensor
from .denoiser import DenoiserParams, inject_lora
from .operators import OperatorSpec, apply, as_linear_map, pseudo_inverse
from .schedule import NoiseSchedule, ddim_step

SAMPLING_MODES = ("random", "neighbor")

# stream purposes for np.random.default_rng([seed, purpose, ...])
_S_ENDPOINTS, _S_DDIM, _S_MC, _S_IID_INIT = 0, 1, 2, 3


@dataclass(frozen=True)
class MetaConfig:
    enabled: bool = False
    alpha_start: float = 1.0
    alpha_end: float = 0.5
    finetune_steps: int | None = None  # None: same L as the shared phase
    finetune_lr: float | None = None


@dataclass(frozen=True)
class AdaptConfig:
    K: int = 6
    L: int = 10
    lr: float = 1e-3
    zeta: int = 40
    t_start: int = 980
    sampling_mode: str = "random"
    approximator: ApproximatorConfig = field(default_factory=ApproximatorConfig)
    adapt_cg: int | None = None  # CG steps inside the adaptation loss; None = sampling M
    horizon: bool = True
    init_pinv: bool = True
    init_slerp: bool = True
    pinv_iters: int = 30
    lora_rank: int = 4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    meta: MetaConfig = field(default_factory=MetaConfig)
    reset_optimizer: bool = False  # fresh AdamW state at every adapted timestep

    def validate(self, n_slices: int | None = None) -> None:
        if self.sampling_mode not in SAMPLING_MODES:
            raise ValueError(f"sampling_mode must be one of {SAMPLING_MODES}")
        if self.K < 1 or self.L < 0 or self.lr < 0:
            raise ValueError("need K >= 1, L >= 0 and lr >= 0")
        if not 0 <= self.zeta < self.t_start / 2:
            raise ValueError("need 0 <= zeta < t_start / 2")
        if n_slices is not None and self.K > n_slices:
            raise ValueError(f"K={self.K} exceeds the number of slices {n_slices}")
        if self.adapt_cg is not None and self.adapt_cg < 1:
            raise ValueError("adapt_cg must be >= 1")
        m = self.meta
        if not (0 < m.alpha_end <= 1 and 0 < m.alpha_start <= 1):
            raise ValueError("Reptile step sizes must lie in (0, 1]")
        self.approximator.validate()

    def adapt_approximator(self) -> ApproximatorConfig:
        if self.adapt_cg is None:
            return self.approximator
        return replace(self.approximator, M=self.adapt_cg, inner_cg_iters=self.adapt_cg)


@dataclass
class VolumeState:
    X: np.ndarray  # (N, C, n, n) current x_t
    Y: np.ndarray  # (N, *range_shape)
    t: int
    adapters: list[np.ndarray] | None = None
    noise_rngs: list[np.random.Generator] = field(default_factory=list)

    def __post_init__(self):
        if len(self.X) < 1 or len(self.X) != len(self.Y):
            raise ValueError("VolumeState needs N >= 1 slices and one measurement per slice")

    @property
    def n_slices(self) -> int:
        return len(self.X)


@dataclass
class Reconstruction:
    X0: np.ndarray
    adapters: list[list[np.ndarray]]  # one entry (d3ip) or one per slice (ddip)
    adapt_steps: int
    loss_trace: list[tuple[int, int, int, float]]  # (group, t, inner_step, loss)
    final_loss: np.ndarray  # per-slice data loss after the last adapted timestep
    seconds: dict[str, float] = field(default_factory=dict)
    theta_vol: list[np.ndarray] | None = None
    reference_loss: np.ndarray | None = None  # meta: theta_vol loss at the same state


# -- small building blocks ------------------------------------------------
def horizon_gate(t: int, zeta: int, T: int = 1000) -> bool:
    """Adapt only on zeta <= t <= T - zeta."""
    return zeta <= t <= T - zeta


def slerp(a: np.ndarray, b: np.ndarray, frac: float) -> np.ndarray:
    """Spherical interpolation of flattened directions with norm |a|^(1-f) |b|^f.

    Endpoints are returned exactly; nearly antiparallel inputs fall back to
    linear interpolation of the directions.
    """
    if frac == 0.0:
        return np.array(a, dtype=np.float64, copy=True)
    if frac == 1.0:
        return np.array(b, dtype=np.float64, copy=True)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    ua, ub = a.ravel() / na, b.ravel() / nb
    cos = float(np.clip(ua @ ub, -1.0, 1.0))
    omega = np.arccos(cos)
    if np.sin(omega) < 1e-6:
        d = (1 - frac) * ua + frac * ub
        nd = np.linalg.norm(d)
        d = d / nd if nd > 0 else ua
    else:
        d = (np.sin((1 - frac) * omega) * ua + np.sin(frac * omega) * ub) / np.sin(omega)
    return (d * na ** (1 - frac) * nb**frac).reshape(a.shape)


def slerp_init(Y, spec: OperatorSpec, schedule: NoiseSchedule, seed, use_pinv: bool = True,
               use_slerp: bool = True, pinv_iters: int = 30) -> np.ndarray:
    """Initial x_{T'} for every slice from the pseudo-inverse and interpolated noise.

    Slice i of N uses the fraction i / (N - 1) between the two endpoint draws.
    Without slerp each slice gets its own independent noise.
    """
    Y = np.asarray(Y, dtype=np.float64)
    N = len(Y)
    shape = spec.domain_shape
    if use_slerp:
        rng = np.random.default_rng([seed, _S_ENDPOINTS])
        e1, eN = rng.standard_normal(shape), rng.standard_normal(shape)
        eps = np.stack([slerp(e1, eN, i / (N - 1) if N > 1 else 0.0) for i in range(N)])
    else:
        eps = np.stack([np.random.default_rng([seed, _S_IID_INIT, i]).standard_normal(shape)
                        for i in range(N)])
    a = schedule.alpha_bar(schedule.t_start)
    X = np.sqrt(1 - a) * eps
    if use_pinv:
        X = X + np.sqrt(a) * pseudo_inverse(spec, Y, M=pinv_iters)
    return X


def mc_sample(n: int, K: int, mode: str, rng: np.random.Generator) -> np.ndarray:
    """K distinct slice indices: uniform (random) or a contiguous block (neighbor)."""
    if not 1 <= K <= n:
        raise ValueError(f"mc_sample needs 1 <= K <= N, got K={K}, N={n}")
    if mode == "random":
        return np.sort(rng.choice(n, size=K, replace=False))
    if mode == "neighbor":
        start = int(rng.integers(0, n - K + 1))
        return np.arange(start, start + K)
    raise ValueError(f"unknown sampling mode {mode!r}")


def reptile_update(theta: Sequence[np.ndarray], theta_tilde: Sequence[np.ndarray], alpha: float):
    """theta + alpha * (theta_tilde - theta), elementwise per array."""
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    if len(theta) != len(theta_tilde):
        raise ValueError("reptile_update: parameter lists differ in length")
    out = []
    for a, b in zip(theta, theta_tilde):
        if np.shape(a) != np.shape(b):
            raise ValueError(f"reptile_update: shape {np.shape(a)} vs {np.shape(b)}")
        out.append(b.copy() if alpha == 1.0 else a + alpha * (b - a))
    return out


def alpha_schedule(n: int, start: float = 1.0, end: float = 0.5) -> np.ndarray:
    """Linear Reptile step sizes over n adapted timesteps."""
    if n <= 1:
        return np.full(n, start)
    return np.linspace(start, end, n)


def data_loss(x_hat, Y, spec: OperatorSpec):
    """Per-slice ||y_i - A x_i||^2 (tensor in, tensor out)."""
    A = as_linear_map(spec)
    r = ad.sub(A(x_hat), Y)
    return ad.sq_norm(r, axis=tuple(range(1, r.ndim)))


def adapt_step(params: DenoiserParams, x_t, y, spec: OperatorSpec, schedule: NoiseSchedule,
               t: int, approx: ApproximatorConfig, opt: ad.AdamW, L: int) -> list[float]:
    """L optimizer steps on the mean data loss of the given slices; adapters only.

    Returns the loss recorded before each step.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    losses = []
    for _ in range(L):
        est = estimate(Tensor(x_t), y, spec, params, schedule, t, approx)
        loss = ad.mean(data_loss(est.x_hat, y, spec))
        value = float(loss.data)
        if not np.isfinite(value):
            raise FloatingPointError(f"adaptation loss is not finite at t={t}")
        opt.zero_grad()
        ad.backward(loss, opt.params)
        opt.step()
        losses.append(value)
    return losses


def _fresh_adapters(params: DenoiserParams, cfg: AdaptConfig, seed) -> DenoiserParams:
    if params.adapters:
        return params.with_adapter_arrays()
    return inject_lora(params, cfg.lora_rank, seed=int(np.random.default_rng([seed, 9]).integers(2**31)))


def _noise_rngs(seed, indices) -> list[np.random.Generator]:
    return [np.random.default_rng([seed, _S_DDIM, int(i)]) for i in indices]


def _sample_estimate(params, X, Y, spec, schedule, t, approx):
    with ad.no_grad():
        est = estimate(Tensor(X), Y, spec, params, schedule, t, approx)
    return est.x_hat.data, est.eps.data


def _trajectory(params: DenoiserParams, X: np.ndarray, Y: np.ndarray, spec: OperatorSpec,
                schedule: NoiseSchedule, cfg: AdaptConfig, noise_rngs, mc_rng, *, L: int,
                lr: float, adapt: bool = True, reptile: bool = False,
                trace: list | None = None, group: int = -1,
                reference: DenoiserParams | None = None):
    """Shared reverse loop. Returns (X0, per-slice final loss, step count, ref loss)."""
    N = len(X)
    approx = cfg.approximator
    approx_adapt = cfg.adapt_approximator()
    zeta = cfg.zeta if cfg.horizon else 0
    gates = [adapt and L > 0 and horizon_gate(t, zeta, schedule.T) for t, _ in schedule.pairs()]
    alphas = iter(alpha_schedule(sum(gates), cfg.meta.alpha_start, cfg.meta.alpha_end))
    opt = ad.AdamW(params.adapter_parameters(), lr=lr, betas=cfg.betas,
                   weight_decay=cfg.weight_decay) if any(gates) else None
    final = np.full(N, np.nan)
    ref = np.full(N, np.nan) if reference is not None else None
    steps = 0
    for (t, t_prev), gate in zip(schedule.pairs(), gates):
        if gate:
            idx = mc_sample(N, min(cfg.K, N), cfg.sampling_mode, mc_rng)
            if reference is not None:
                xr, _ = _sample_estimate(reference, X[idx], Y[idx], spec, schedule, t, approx)
                ref[idx] = _np_loss(xr, Y[idx], spec)
            start = params.adapter_arrays() if reptile else None
            if cfg.reset_optimizer:
                opt = ad.AdamW(params.adapter_parameters(), lr=lr, betas=cfg.betas,
                               weight_decay=cfg.weight_decay)
            losses = adapt_step(params, X[idx], Y[idx], spec, schedule, t, approx_adapt, opt, L)
            steps += L
            if trace is not None:
                trace.extend((group, t, k, v) for k, v in enumerate(losses))
            if reptile:
                params.load_adapter_arrays(
                    reptile_update(start, params.adapter_arrays(), float(next(alphas))))
        x_hat, eps = _sample_estimate(params, X, Y, spec, schedule, t, approx)
        if gate:
            final = _np_loss(x_hat, Y, spec)
        noise = None
        if schedule.eta > 0:
            noise = np.stack([r.standard_normal(X.shape[1:]) for r in noise_rngs])
        X = ddim_step(X, x_hat, eps, t, t_prev, schedule, noise)
    return X, final, steps, ref


def _np_loss(x, Y, spec) -> np.ndarray:
    r = apply(spec, x) - Y
    return (r**2).reshape(len(r), -1).sum(axis=1)


# -- reconstructions --------------------------------------------------------
def _prepare(Y, spec, params, schedule, cfg, seed):
    Y = np.asarray(Y, dtype=np.float64)
    if Y.shape[1:] != spec.range_shape:
        raise ValueError(f"measurements {Y.shape} do not match operator range {spec.range_shape}")
    if schedule.t_start != cfg.t_start:
        raise ValueError(f"schedule starts at {schedule.t_start}, config expects T'={cfg.t_start}")
    if params.config.in_channels != spec.channels:
        raise ValueError("denoiser channels do not match the operator domain")
    X = slerp_init(Y, spec, schedule, seed, cfg.init_pinv, cfg.init_slerp, cfg.pinv_iters)
    return Y, X


def sample_volume(Y, spec: OperatorSpec, params: DenoiserParams, schedule: NoiseSchedule,
                  cfg: AdaptConfig, seed=0) -> Reconstruction:
    """Plain diffusion solver (no adaptation) with the configured approximator."""
    t0 = time.perf_counter()
    Y, X = _prepare(Y, spec, params, schedule, cfg, seed)
    X0, _, _, _ = _trajectory(params, X, Y, spec, schedule, cfg, _noise_rngs(seed, range(len(Y))),
                              None, L=0, lr=0.0, adapt=False)
    return Reconstruction(X0, [], 0, [], np.full(len(Y), np.nan),
                          {"sample": time.perf_counter() - t0})


def d3ip_reconstruct(Y, spec: OperatorSpec, params: DenoiserParams, schedule: NoiseSchedule,
                     cfg: AdaptConfig, seed=0) -> Reconstruction:
    """One shared adapter set fitted on K sampled slices at every gated timestep."""
    cfg.validate(len(Y))
    if cfg.approximator.method == "mbir":
        if cfg.K < 2:
            raise ValueError("mbir adaptation needs K >= 2 contiguous slices")
        if cfg.sampling_mode != "neighbor":
            raise ValueError("mbir adaptation needs neighbor sampling (TV couples adjacent slices)")
    t0 = time.perf_counter()
    Y, X = _prepare(Y, spec, params, schedule, cfg, seed)
    p = _fresh_adapters(params, cfg, seed)
    trace: list = []
    X0, final, steps, _ = _trajectory(
        p, X, Y, spec, schedule, cfg, _noise_rngs(seed, range(len(Y))),
        np.random.default_rng([seed, _S_MC]), L=cfg.L, lr=cfg.lr,
        reptile=cfg.meta.enabled, trace=trace, group=-1)
    return Reconstruction(X0, [p.adapter_arrays()], steps, trace, final,
                          {"adapt+sample": time.perf_counter() - t0})


def ddip_reconstruct(Y, spec: OperatorSpec, params: DenoiserParams, schedule: NoiseSchedule,
                     cfg: AdaptConfig, seed=0, init_adapters: list[np.ndarray] | None = None,
                     order: Sequence[int] | None = None, L: int | None = None,
                     lr: float | None = None, reference: list[np.ndarray] | None = None
                     ) -> Reconstruction:
    """Independent adaptation per slice; every slice restarts from the same adapters.

    ``order`` only changes the processing order; results are keyed by slice index.
    ``reference`` adapters, if given, are scored on each slice's state for comparison.
    """
    cfg = replace(cfg, K=1, sampling_mode="random")
    cfg.validate()
    if cfg.approximator.method == "mbir":
        raise ValueError("mbir couples slices and cannot run slice by slice")
    t0 = time.perf_counter()
    Y, X = _prepare(Y, spec, params, schedule, cfg, seed)
    N = len(Y)
    template = _fresh_adapters(params, cfg, seed)
    if init_adapters is not None:
        template.load_adapter_arrays(init_adapters)
    ref_params = template.with_adapter_arrays(reference) if reference is not None else None
    L = cfg.L if L is None else L
    lr = cfg.lr if lr is None else lr
    order = list(range(N)) if order is None else list(order)
    if sorted(order) != list(range(N)):
        raise ValueError("order must be a permutation of the slice indices")
    X0 = np.empty_like(X)
    final = np.full(N, np.nan)
    ref = np.full(N, np.nan) if reference is not None else None
    adapters: list = [None] * N
    trace: list = []
    steps = 0
    for i in order:
        p = template.with_adapter_arrays()
        xi, fi, si, ri = _trajectory(
            p, X[i : i + 1], Y[i : i + 1], spec, schedule, cfg, _noise_rngs(seed, [i]),
            np.random.default_rng([seed, _S_MC, i]), L=L, lr=lr, trace=trace, group=i,
            reference=ref_params)
        X0[i], final[i], adapters[i] = xi[0], fi[0], p.adapter_arrays()
        if ref is not None:
            ref[i] = ri[0]
        steps += si
    trace.sort(key=lambda r: r[0])
    return Reconstruction(X0, adapters, steps, trace, final,
                          {"adapt+sample": time.perf_counter() - t0}, reference_loss=ref)


def d3ip_meta_reconstruct(Y, spec: OperatorSpec, params: DenoiserParams, schedule: NoiseSchedule,
                          cfg: AdaptConfig, seed=0) -> Reconstruction:
    """Reptile-style shared fit giving theta_vol, then per-slice fine-tuning from it.

    With zero fine-tune steps the shared-phase reconstruction is returned.
    """
    meta = cfg.meta if cfg.meta.enabled else replace(cfg.meta, enabled=True)
    cfg = replace(cfg, meta=meta)
    t0 = time.perf_counter()
    phase1 = d3ip_reconstruct(Y, spec, params, schedule, cfg, seed)
    t1 = time.perf_counter()
    theta_vol = phase1.adapters[0]
    L2 = cfg.L if meta.finetune_steps is None else meta.finetune_steps
    if L2 == 0:
        phase1.theta_vol = theta_vol
        phase1.seconds = {"meta": t1 - t0}
        return phase1
    lr2 = cfg.lr if meta.finetune_lr is None else meta.finetune_lr
    base_cfg = replace(cfg, meta=replace(meta, enabled=False))
    phase2 = ddip_reconstruct(Y, spec, params, schedule, base_cfg, seed, init_adapters=theta_vol,
                              L=L2, lr=lr2, reference=theta_vol)
    trace = phase1.loss_trace + phase2.loss_trace
    return Reconstruction(
        phase2.X0, phase2.adapters, phase1.adapt_steps + phase2.adapt_steps, trace,
        phase2.final_loss, {"meta": t1 - t0, "finetune": time.perf_counter() - t1},
        theta_vol=theta_vol, reference_loss=phase2.reference_loss)


# -- deep image prior baseline ---------------------------------------------
def build_dip_net(channels: int, width: int = 16, depth: int = 4, z_channels: int = 8,
                  image_size: int = 32, seed=0) -> dict:
    rng = np.random.default_rng(seed)
    net = {"z": rng.uniform(0, 0.1, size=(1, z_channels, image_size, image_size))}
    c_in = z_channels
    for d in range(depth):
        c_out = channels if d == depth - 1 else width
        b = 1.0 / np.sqrt(9 * c_in)
        net[f"w{d}"] = Tensor(rng.uniform(-b, b, (c_out, c_in, 3, 3)), requires_grad=True)
        net[f"b{d}"] = Tensor(np.zeros(c_out), requires_grad=True)
        c_in = c_out
    return net


def dip_forward(net: dict) -> Tensor:
    depth = sum(1 for k in net if k.startswith("w"))
    h = Tensor(net["z"])
    for d in range(depth):
        h = ad.conv2d(h, net[f"w{d}"], net[f"b{d}"])
        if d < depth - 1:
            h = ad.silu(h)
    return h


def dip_baseline(y, spec: OperatorSpec, net: dict | None = None, steps: int = 500,
                 lr: float = 1e-2, early_stop: bool = True, holdout: float = 0.1, seed=0,
                 history: list | None = None) -> np.ndarray:
    """Fit G(z) to one measurement. With ``early_stop`` a random ``holdout``
    fraction of measurement entries is withheld and the output with the best
    held-out error is returned; otherwise the last iterate.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != spec.range_shape:
        raise ValueError(f"dip_baseline: expected a single measurement of shape {spec.range_shape}")
    rng = np.random.default_rng([seed, 7])
    net = net or build_dip_net(spec.channels, image_size=spec.image_size, seed=seed)
    weights = [v for k, v in sorted(net.items()) if k != "z"]
    opt = ad.AdamW(weights, lr=lr)
    acquired = np.ones(y.shape)
    if spec.kind.startswith("mri"):
        acquired = np.broadcast_to(np.fft.ifftshift(spec.mask), y.shape).astype(float)
    held = (rng.random(y.shape) < holdout) * acquired if early_stop else np.zeros(y.shape)
    train = acquired - held
    A = as_linear_map(spec)
    best, best_err = None, np.inf
    for step in range(steps):
        out = dip_forward(net)
        pred = A(out)
        loss = ad.sq_norm(ad.mul(ad.sub(pred, y[None]), train))
        value = float(loss.data)
        if not np.isfinite(value):
            raise FloatingPointError(f"dip_baseline diverged at step {step}")
        if history is not None:
            history.append(value)
        err = float(((pred.data - y) ** 2 * held).sum()) if early_stop else -step
        if err < best_err:
            best, best_err = out.data[0].copy(), err
        opt.zero_grad()
        ad.backward(loss, weights)
        opt.step()
    return best
