"""Experiment wiring: prior training with caching, phantom -> measurement ->
reconstruction -> evaluation, on-disk artifacts and method comparisons."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import adaptation as ada
from . import operators as ops
from .approximators import ApproximatorConfig, admm_tv_baseline, default_config
from .denoiser import (
    DenoiserConfig,
    DenoiserParams,
    build_denoiser,
    load_checkpoint,
    save_adapters,
    save_checkpoint,
)
from .metrics import volume_metrics
from .phantoms import EllipseSpec, OODVolumeSpec, ellipse_batch, sample_ood_volume
from .schedule import dsm_train, make_vp_schedule

log = logging.getLogger(__name__)

TASKS = ("ct3d", "mri3d", "csmri2d")
METHODS = ("ddnm", "dps", "dds", "mbir", "admm_tv", "dip",
           "ddip", "d3ip_base", "d3ip_mbir", "d3ip_meta")
ADAPTIVE = ("ddip", "d3ip_base", "d3ip_mbir", "d3ip_meta")
DIFFUSION = ("ddnm", "dps", "dds", "mbir") + ADAPTIVE
CSV_HEADER = ["volume", "slice", "method", "psnr", "ssim", "adapt_steps", "seconds"]


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage


# -- prior training ---------------------------------------------------------
@dataclass(frozen=True)
class TrainConfig:
    image_size: int = 32
    channels: int = 1
    base_channels: int = 16
    channel_multipliers: tuple[int, ...] = (1, 2, 2)
    num_res_blocks: int = 1
    steps: int = 2500
    batch: int = 16
    lr: float = 2e-3
    seed: int = 0

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            image_size=self.image_size,
            in_channels=self.channels,
            base_channels=self.base_channels,
            channel_multipliers=tuple(self.channel_multipliers),
            num_res_blocks=self.num_res_blocks,
        )

    def key(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def default_cache_dir() -> Path:
    return Path(os.environ.get("DDIP_CACHE", Path.home() / ".cache" / "ddip"))


def train_prior(cfg: TrainConfig, out: str | Path | None = None) -> tuple[DenoiserParams, list[float]]:
    """Train the ellipse prior by denoising score matching; optionally save it."""
    params = build_denoiser(cfg.denoiser_config(), seed=cfg.seed)
    spec = EllipseSpec(image_size=cfg.image_size)
    schedule = make_vp_schedule()
    loss_csv = None if out is None else Path(out).with_suffix(".loss.csv")
    params, trace = dsm_train(
        params, lambda rng, b: ellipse_batch(spec, rng, b, cfg.channels), schedule,
        cfg.steps, lr=cfg.lr, batch=cfg.batch, seed=cfg.seed, loss_csv=loss_csv)
    if out is not None:
        save_checkpoint(out, params)
    return params, trace


def ensure_prior(cfg: TrainConfig, cache_dir: str | Path | None = None) -> DenoiserParams:
    """Load the cached prior for ``cfg`` or train and cache it."""
    cache = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    cache.mkdir(parents=True, exist_ok=True)
    path = cache / f"prior-{cfg.key()}.npz"
    if path.exists():
        return load_checkpoint(path)
    log.info("training prior %s (%d steps)", path.name, cfg.steps)
    tmp = path.with_name(path.stem + ".partial.npz")
    params, _ = train_prior(cfg, tmp)
    os.replace(tmp, path)
    loss = tmp.with_suffix(".loss.csv")
    if loss.exists():
        os.replace(loss, path.with_suffix(".loss.csv"))
    return params


# -- experiment configuration ---------------------------------------------------
# Desk-scale adaptation: the timestep loss scale spans about three decades, so
# AdamW moments carried over from the noisiest steps stall the later ones.
DESK_ADAPT = ada.AdaptConfig(lr=3e-3, reset_optimizer=True)

@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "ct3d"
    method: str = "d3ip_base"
    phantom: OODVolumeSpec = field(default_factory=OODVolumeSpec)
    n_angles: int = 15
    acceleration: float = 8.0
    n_coils: int = 4
    sigma_y: float = 0.01
    nfe: int = 50
    eta: float = 0.85
    adapt: ada.AdaptConfig = field(default_factory=lambda: DESK_ADAPT)
    tv_lambda: float = 0.002
    tv_iters: int = 100
    dip_steps: int = 500
    dip_lr: float = 1e-2
    train: TrainConfig = field(default_factory=TrainConfig)
    checkpoint: str | None = None
    seed: int = 0
    sample_seed: int = 0
    volume: str = "vol0"
    reference_mode: bool = True
    out_dir: str | None = None

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.checkpoint is not None and self.method in DIFFUSION:
            if not Path(self.checkpoint).exists():
                raise FileNotFoundError(f"checkpoint {self.checkpoint} does not exist")
        if self.phantom.image_size != self.train.image_size:
            raise ValueError("phantom and prior image sizes differ")
        if self.train.channels != self.channels:
            raise ValueError(f"task {self.task} needs a {self.channels}-channel prior")
        self.phantom.validate()
        self.adapt.approximator.validate()

    @property
    def modality(self) -> str:
        return "ct" if self.task == "ct3d" else "mri"

    @property
    def channels(self) -> int:
        return 2 if self.task == "mri3d" else 1

    def shared_key(self) -> tuple:
        """Everything that fixes the ground truth and the measurements."""
        return (self.task, self.phantom, self.n_angles, self.acceleration, self.n_coils,
                self.sigma_y, self.seed)


def for_task(task: str, **overrides) -> ExperimentConfig:
    """Defaults per task (K = 3 for the 2D CS-MRI task, complex prior for 3D MRI)."""
    cfg = ExperimentConfig(task=task)
    if task == "csmri2d":
        cfg = replace(cfg, adapt=replace(cfg.adapt, K=3, L=5))
    if task == "mri3d":
        cfg = replace(cfg, train=replace(cfg.train, channels=2))
    return replace(cfg, **overrides)


def build_operator(cfg: ExperimentConfig) -> ops.OperatorSpec:
    n = cfg.phantom.image_size
    if cfg.task == "ct3d":
        return ops.ct_spec(n, cfg.n_angles, sigma_y=cfg.sigma_y)
    if cfg.task == "csmri2d":
        return ops.mri_spec(ops.uniform1d_mask(n, 4, 0.08), sigma_y=cfg.sigma_y)
    mask = ops.vd_mask(n, cfg.acceleration, seed=cfg.seed)
    return ops.mri_spec(mask, sigma_y=cfg.sigma_y, coils=ops.coil_maps(n, cfg.n_coils), channels=2)


def make_ground_truth(cfg: ExperimentConfig) -> np.ndarray:
    """(N, C, n, n) target; the complex task gets a smooth per-slice phase."""
    vol = sample_ood_volume(cfg.phantom, cfg.seed)
    if cfg.channels == 1:
        return vol[:, None]
    rng = np.random.default_rng([cfg.seed, 11])
    c = (2 * np.arange(vol.shape[-1]) + 1) / vol.shape[-1] - 1
    X, Y = np.meshgrid(c, c, indexing="xy")
    k = rng.uniform(-1.0, 1.0, size=3)
    out = np.empty((len(vol), 2) + vol.shape[1:])
    for i, img in enumerate(vol):
        phase = k[0] + k[1] * X + k[2] * Y + 0.05 * i
        out[i, 0], out[i, 1] = img * np.cos(phase), img * np.sin(phase)
    return out


def magnitude(x: np.ndarray) -> np.ndarray:
    """(N, C, n, n) -> (N, n, n): the real plane or the complex magnitude."""
    return x[:, 0] if x.shape[1] == 1 else np.hypot(x[:, 0], x[:, 1])


def adapt_config_for(cfg: ExperimentConfig) -> ada.AdaptConfig:
    a = cfg.adapt
    if cfg.method == "d3ip_mbir":
        approx = a.approximator
        if approx.method != "mbir":
            approx = default_config("mbir", cfg.modality)
        return replace(a, approximator=approx, sampling_mode="neighbor")
    if cfg.method == "d3ip_base":
        return replace(a, sampling_mode="random")
    if cfg.method in ("ddnm", "dps", "dds", "mbir"):
        return replace(a, approximator=default_config(cfg.method, cfg.modality))
    return a


# -- report -------------------------------------------------------------
@dataclass
class Report:
    method: str
    volume: str
    per_slice: np.ndarray  # (N, 2) psnr, ssim
    adapt_steps: int
    seconds: dict[str, float]
    config: dict
    input_hash: str
    reconstruction: np.ndarray | None = None
    final_loss: np.ndarray | None = None
    reference_loss: np.ndarray | None = None
    timed_csv: bool = False
    files: list[str] = field(default_factory=list)

    @property
    def psnr(self) -> float:
        return float(self.per_slice[:, 0].mean())

    @property
    def ssim(self) -> float:
        return float(self.per_slice[:, 1].mean())

    @property
    def total_seconds(self) -> float:
        return float(sum(self.seconds.values()))

    def rows(self) -> list[list]:
        sec = f"{self.total_seconds:.3f}" if self.timed_csv else ""
        return [[self.volume, i, self.method, f"{p:.6f}", f"{s:.6f}", self.adapt_steps, sec]
                for i, (p, s) in enumerate(self.per_slice)]

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerows(self.rows())
        return buf.getvalue()


# -- the pipeline -----------------------------------------------------------
def _stage(name):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, et, ev, tb):
            if ev is not None and not isinstance(ev, StageError):
                raise StageError(name, ev) from ev
            return False

    return _Ctx()


def _config_echo(cfg: ExperimentConfig) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg), default=str))


def load_prior(cfg: ExperimentConfig, cache_dir=None) -> DenoiserParams:
    if cfg.checkpoint is not None:
        return load_checkpoint(cfg.checkpoint)
    return ensure_prior(cfg.train, cache_dir)


def reconstruct(cfg: ExperimentConfig, Y: np.ndarray, spec: ops.OperatorSpec,
                prior: DenoiserParams | None):
    """Dispatch one method; returns an adaptation.Reconstruction."""
    if cfg.method == "admm_tv":
        t0 = time.perf_counter()
        X = admm_tv_baseline(Y, spec, cfg.tv_lambda, cfg.tv_iters)
        return ada.Reconstruction(X, [], 0, [], np.full(len(Y), np.nan),
                                  {"admm_tv": time.perf_counter() - t0})
    if cfg.method == "dip":
        t0 = time.perf_counter()
        X = np.stack([ada.dip_baseline(y, spec, steps=cfg.dip_steps, lr=cfg.dip_lr,
                                       seed=[cfg.sample_seed, i]) for i, y in enumerate(Y)])
        return ada.Reconstruction(X, [], 0, [], np.full(len(Y), np.nan),
                                  {"dip": time.perf_counter() - t0})
    acfg = adapt_config_for(cfg)
    schedule = make_vp_schedule(nfe=cfg.nfe, eta=cfg.eta, t_start=acfg.t_start)
    seed = cfg.sample_seed
    if cfg.method in ("ddnm", "dps", "dds", "mbir"):
        return ada.sample_volume(Y, spec, prior, schedule, acfg, seed)
    if cfg.method == "ddip":
        return ada.ddip_reconstruct(Y, spec, prior, schedule, acfg, seed)
    if cfg.method == "d3ip_meta":
        return ada.d3ip_meta_reconstruct(Y, spec, prior, schedule, acfg, seed)
    return ada.d3ip_reconstruct(Y, spec, prior, schedule, acfg, seed)


def run_experiment(cfg: ExperimentConfig, prior: DenoiserParams | None = None,
                   cache_dir=None) -> Report:
    """phantom -> measure -> reconstruct -> evaluate, writing artifacts if
    ``cfg.out_dir`` is set. Failures raise StageError naming the stage."""
    with _stage("config"):
        cfg.validate()
    with _stage("phantom"):
        gt = make_ground_truth(cfg)
    with _stage("measure"):
        spec = build_operator(cfg)
        Y = ops.simulate_measurement(spec, gt, [cfg.seed, 1])
    with _stage("prior"):
        if cfg.method in DIFFUSION and prior is None:
            prior = load_prior(cfg, cache_dir)
    with _stage("reconstruct"):
        base_hash = prior.base_hash() if prior is not None else None
        rec = reconstruct(cfg, Y, spec, prior)
        if prior is not None and prior.base_hash() != base_hash:
            raise RuntimeError("base weights changed during reconstruction")
    with _stage("evaluate"):
        mag = magnitude(rec.X0)
        per_slice = volume_metrics(mag, magnitude(gt))
        h = hashlib.sha256()
        for a in (gt, Y):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update((base_hash or "").encode())
        h.update(json.dumps(_config_echo(cfg), sort_keys=True).encode())
        report = Report(cfg.method, cfg.volume, per_slice, rec.adapt_steps, rec.seconds,
                        _config_echo(cfg), h.hexdigest(), rec.X0, rec.final_loss,
                        rec.reference_loss, timed_csv=not cfg.reference_mode)
    if cfg.out_dir is not None:
        with _stage("write"):
            write_artifacts(Path(cfg.out_dir), cfg, report, rec, gt, Y, spec)
    return report


# -- artifacts ---------------------------------------------------------------
def save_png16(path, img: np.ndarray) -> None:
    """16-bit grayscale PNG of ``img`` clamped to [0, 1]."""
    from PIL import Image

    q = np.round(np.clip(img, 0.0, 1.0) * 65535).astype(np.uint16)
    Image.fromarray(q).save(path)


def load_png16(path) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(path), dtype=np.float64) / 65535


def write_loss_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "inner_step", "loss"])
        for _, t, k, v in rows:
            w.writerow([t, k, repr(float(v))])


def write_artifacts(out: Path, cfg, report: Report, rec, gt, Y, spec) -> None:
    out.mkdir(parents=True, exist_ok=True)
    files = []
    (out / "metrics.csv").write_text(report.csv_text())
    files.append("metrics.csv")
    ops.write_measurement(out / "measurement", Y, spec, seed=cfg.seed)
    files += ["measurement.raw", "measurement.json"]
    img_dir = out / "slices"
    img_dir.mkdir(exist_ok=True)
    for i, img in enumerate(magnitude(rec.X0)):
        save_png16(img_dir / f"slice_{i:03d}.png", img)
        img.astype("<f4").tofile(img_dir / f"slice_{i:03d}.raw")
    files.append("slices/")
    groups = sorted({r[0] for r in rec.loss_trace})
    for g in groups:
        name = "losses.csv" if g < 0 else f"losses_slice{g:03d}.csv"
        write_loss_csv(out / name, [r for r in rec.loss_trace if r[0] == g])
        files.append(name)
    if rec.adapters:
        ad_dir = out / "adapters"
        ad_dir.mkdir(exist_ok=True)
        shell = _adapter_shell(cfg)
        names = ["shared"] if len(rec.adapters) == 1 and cfg.method != "ddip" else \
            [f"slice{i:03d}" for i in range(len(rec.adapters))]
        for name, arrays in zip(names, rec.adapters):
            shell.load_adapter_arrays(arrays)
            save_adapters(ad_dir / f"{name}.npz", shell)
        if rec.theta_vol is not None:
            shell.load_adapter_arrays(rec.theta_vol)
            save_adapters(ad_dir / "theta_vol.npz", shell)
        files.append("adapters/")
    report.files = files
    manifest = {
        "method": cfg.method,
        "volume": cfg.volume,
        "config": report.config,
        "seeds": {"phantom": cfg.seed, "sample": cfg.sample_seed},
        "input_sha256": report.input_hash,
        "psnr": report.psnr,
        "ssim": report.ssim,
        "adapt_steps": report.adapt_steps,
        "seconds": report.seconds,
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))


def _adapter_shell(cfg: ExperimentConfig) -> DenoiserParams:
    from .denoiser import inject_lora

    return inject_lora(build_denoiser(cfg.train.denoiser_config()), cfg.adapt.lora_rank)


# -- comparisons -----------------------------------------------------------
@dataclass
class ComparisonRow:
    label: str
    method: str
    psnr: float
    ssim: float
    adapt_steps: int
    seconds: float


def compare_methods(configs: Sequence[ExperimentConfig], labels: Sequence[str] | None = None,
                    prior: DenoiserParams | None = None, cache_dir=None) -> list[ComparisonRow]:
    """One row per config, in input order. All configs must share phantom and
    operator seeds so the rows describe the same measurements."""
    if not configs:
        raise ValueError("compare_methods needs at least one config")
    keys = {c.shared_key() for c in configs}
    if len(keys) != 1:
        raise ValueError("configs do not share phantom/operator settings and seeds")
    labels = list(labels) if labels is not None else [c.method for c in configs]
    rows = []
    priors: dict[str, DenoiserParams] = {}
    for label, c in zip(labels, configs):
        p = prior
        if p is None and c.method in DIFFUSION:
            key = c.checkpoint or c.train.key()
            if key not in priors:
                priors[key] = load_prior(c, cache_dir)
            p = priors[key]
        r = run_experiment(c, p, cache_dir)
        rows.append(ComparisonRow(label, c.method, r.psnr, r.ssim, r.adapt_steps, r.total_seconds))
    return rows


def comparison_csv(rows: Sequence[ComparisonRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "method", "psnr", "ssim", "adapt_steps", "seconds"])
    for r in rows:
        w.writerow([r.label, r.method, f"{r.psnr:.4f}", f"{r.ssim:.4f}", r.adapt_steps,
                    f"{r.seconds:.2f}"])
    return buf.getvalue()
