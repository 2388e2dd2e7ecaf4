"""VP noise schedule, forward noising, DSM training and the DDIM update."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .denoiser import DenoiserParams, predict_eps

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Discrete VP schedule on t = 1..T.

    ``alpha_bars[t]`` is the cumulative product up to t; index 0 holds 1.0 so
    the final DDIM step to t_prev = 0 lands on the clean estimate.
    """

    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray
    timesteps: np.ndarray
    eta: float
    t_start: int

    @property
    def nfe(self) -> int:
        return len(self.timesteps)

    def alpha_bar(self, t):
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [0, {self.T}]")
        return self.alpha_bars[t]

    def prev(self, t: int) -> int:
        """Next (smaller) timestep of the sampling sub-schedule, 0 after the last."""
        idx = np.flatnonzero(self.timesteps == t)
        if not idx.size:
            raise ValueError(f"t={t} is not on the sampling sub-schedule")
        i = int(idx[0])
        return int(self.timesteps[i + 1]) if i + 1 < len(self.timesteps) else 0

    def pairs(self) -> list[tuple[int, int]]:
        ts = [int(t) for t in self.timesteps] + [0]
        return list(zip(ts[:-1], ts[1:]))


def make_vp_schedule(
    T: int = 1000,
    beta_min: float = 1e-4,
    beta_max: float = 2e-2,
    nfe: int = 50,
    eta: float = 0.85,
    t_start: int | None = None,
) -> NoiseSchedule:
    """Linear-beta VP schedule with a uniform DDIM sub-schedule over [1, t_start]."""
    t_start = T if t_start is None else t_start
    if not 0 < beta_min < beta_max < 1:
        raise ValueError(f"need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")
    if not 1 <= nfe <= t_start <= T:
        raise ValueError(f"need 1 <= nfe <= t_start <= T, got {nfe}, {t_start}, {T}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    betas = np.concatenate([[0.0], np.linspace(beta_min, beta_max, T)])
    alpha_bars = np.cumprod(1.0 - betas)
    if nfe == 1:
        steps = np.array([t_start])
    else:
        steps = np.round(np.linspace(t_start, 1, nfe)).astype(int)
    return NoiseSchedule(T, betas, alpha_bars, steps, float(eta), int(t_start))


def _bcast(coef, ndim: int):
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 1:
        return coef.reshape((-1,) + (1,) * (ndim - 1))
    return coef


def perturb(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(a_t) x0 + sqrt(1 - a_t) eps, with per-sample t allowed."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"perturb: incompatible shapes {x0.shape} and {eps.shape}")
    a = _bcast(schedule.alpha_bar(t), x0.ndim)
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps


def ddim_step(x_t, x0_hat, eps_hat, t: int, t_prev: int, schedule: NoiseSchedule,
              noise=None, eta: float | None = None) -> np.ndarray:
    """x_prev = sqrt(a') x0_hat + sqrt(1 - a') (eta * noise + (1 - eta) * eps_hat).

    ``x_t`` is accepted for interface symmetry; the update depends on it only
    through ``x0_hat`` and ``eps_hat``.
    """
    eta = schedule.eta if eta is None else eta
    if not t > t_prev >= 0:
        raise ValueError(f"ddim_step needs t > t_prev >= 0, got {t}, {t_prev}")
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if eta > 0:
        if noise is None:
            raise ValueError("ddim_step: noise is required when eta > 0")
        direction = eta * np.asarray(noise, dtype=np.float64) + (1.0 - eta) * eps_hat
    else:
        direction = eps_hat
    a = schedule.alpha_bar(t_prev)
    return np.sqrt(a) * x0_hat + np.sqrt(1.0 - a) * direction


def dsm_train(
    params: DenoiserParams,
    sampler: Callable[[np.random.Generator, int], np.ndarray],
    schedule: NoiseSchedule,
    steps: int,
    lr: float = 2e-3,
    batch: int = 16,
    seed: int = 0,
    loss_csv: str | Path | None = None,
    log_every: int = 100,
    lr_final_fraction: float = 0.1,
) -> tuple[DenoiserParams, list[float]]:
    """Train the noise predictor by denoising score matching (eps-MSE).

    ``sampler(rng, batch)`` returns clean images of shape (batch, C, n, n).
    The learning rate decays by cosine annealing to ``lr * lr_final_fraction``.
    """
    rng = np.random.default_rng(seed)
    weights = params.base_parameters()
    for p in weights:
        p.requires_grad = True
    opt = ad.AdamW(weights, lr=lr)
    trace: list[float] = []
    for step in range(steps):
        x0 = np.asarray(sampler(rng, batch), dtype=np.float64)
        t = rng.integers(1, schedule.T + 1, size=batch)
        eps = rng.standard_normal(x0.shape)
        x_t = perturb(x0, t, eps, schedule)
        pred = predict_eps(params, ad.Tensor(x_t), t)
        loss = ad.mean(ad.square(ad.sub(pred, eps)))
        value = float(loss.data)
        if not np.isfinite(value):
            raise FloatingPointError(f"dsm_train: non-finite loss at step {step}")
        opt.zero_grad()
        ad.backward(loss)
        frac = step / max(steps - 1, 1)
        opt.lr = lr * (lr_final_fraction + (1 - lr_final_fraction) * 0.5 * (1 + np.cos(np.pi * frac)))
        opt.step()
        trace.append(value)
        if log_every and step % log_every == 0:
            log.info("dsm step %d loss %.5f", step, value)
    if loss_csv is not None:
        write_loss_trace(loss_csv, trace)
    return params, trace


def write_loss_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])


def moving_average(values, window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    window = max(1, min(window, len(v)))
    return np.convolve(v, np.ones(window) / window, mode="valid")
