"""Small time-conditioned UNet that predicts noise, with low-rank adapters.

Parameters live in a flat name -> Tensor mapping. Adapters attach to conv
layers by name: for a conv weight ``W`` of shape (out, in, k, k) the adapted
weight is ``W + scale * (up @ down).reshape(W.shape)`` with ``up`` (out, r)
zero-initialised, so a freshly injected adapter leaves the output unchanged.
"""
from __future__ import annotations

import fnmatch
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_VERSION = "ddip-ckpt/1"
ADAPTER_VERSION = "ddip-lora/1"

# conv layers inside residual and attention blocks
DEFAULT_LORA_TARGETS = ("*.conv1", "*.conv2", "*.skip", "*.qkv", "*.proj")


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 32
    in_channels: int = 1
    base_channels: int = 16
    channel_multipliers: tuple[int, ...] = (1, 2)
    num_res_blocks: int = 1
    time_embed_dim: int = 64
    use_attention_at: tuple[int, ...] = ()
    num_groups: int = 4
    T: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))
        object.__setattr__(self, "use_attention_at", tuple(self.use_attention_at))

    def validate(self) -> None:
        n = self.image_size
        if n < 4 or n > 64 or n & (n - 1):
            raise ValueError(f"image_size must be a power of two in [4, 64], got {n}")
        if not self.channel_multipliers or min(self.channel_multipliers) < 1:
            raise ValueError("channel_multipliers must be non-empty positive integers")
        levels = len(self.channel_multipliers)
        if n % (2 ** (levels - 1)):
            raise ValueError(
                f"image_size {n} not divisible by 2^{levels - 1} for {levels} resolutions"
            )
        if self.base_channels < 1 or self.num_res_blocks < 1 or self.in_channels < 1:
            raise ValueError("base_channels, num_res_blocks and in_channels must be >= 1")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be an even integer >= 2")
        valid = {n >> i for i in range(levels)}
        bad = set(self.use_attention_at) - valid
        if bad:
            raise ValueError(f"attention resolutions {sorted(bad)} not in {sorted(valid)}")

    @property
    def resolutions(self) -> list[int]:
        return [self.image_size >> i for i in range(len(self.channel_multipliers))]


@dataclass
class LoraAdapter:
    down: Tensor  # (r, fan_in)
    up: Tensor  # (out, r)

    @property
    def rank(self) -> int:
        return self.down.shape[0]


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    base: dict[str, Tensor]
    adapters: dict[str, LoraAdapter] = field(default_factory=dict)
    lora_scale: float = 1.0

    # -- parameter bookkeeping ------------------------------------------
    def base_parameters(self) -> list[Tensor]:
        return [self.base[k] for k in sorted(self.base)]

    def adapter_parameters(self) -> list[Tensor]:
        out = []
        for name in sorted(self.adapters):
            a = self.adapters[name]
            out += [a.down, a.up]
        return out

    def adapter_arrays(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.adapter_parameters()]

    def load_adapter_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        params = self.adapter_parameters()
        if len(arrays) != len(params):
            raise ValueError("adapter array count does not match")
        for p, a in zip(params, arrays):
            if p.shape != np.shape(a):
                raise ValueError(f"adapter shape mismatch {p.shape} vs {np.shape(a)}")
            p.data = np.array(a, dtype=np.float64, copy=True)

    def with_adapter_arrays(self, arrays: Sequence[np.ndarray] | None = None) -> "DenoiserParams":
        """Copy sharing frozen base weights, with independent adapter tensors."""
        adapters = {
            name: LoraAdapter(
                Tensor(a.down.data.copy(), requires_grad=True),
                Tensor(a.up.data.copy(), requires_grad=True),
            )
            for name, a in self.adapters.items()
        }
        out = DenoiserParams(self.config, self.base, adapters, self.lora_scale)
        if arrays is not None:
            out.load_adapter_arrays(arrays)
        return out

    @property
    def lora_rank(self) -> int:
        return next(iter(self.adapters.values())).rank if self.adapters else 0

    def count(self) -> dict[str, float]:
        n_base = sum(p.size for p in self.base.values())
        n_lora = sum(p.size for p in self.adapter_parameters())
        return {
            "base": n_base,
            "adapter": n_lora,
            "total": n_base + n_lora,
            "adapter_fraction": n_lora / (n_base + n_lora),
        }

    def base_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.base):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.base[k].data).tobytes())
        return h.hexdigest()

    def freeze_base(self, frozen: bool = True) -> None:
        for p in self.base.values():
            p.requires_grad = not frozen
            p.grad = None


# -- construction ---------------------------------------------------------
def _layer_shapes(cfg: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    C0, tdim = cfg.base_channels, cfg.time_embed_dim

    def conv(name, cin, cout, k=3):
        shapes[name + ".weight"] = (cout, cin, k, k)
        shapes[name + ".bias"] = (cout,)

    def norm(name, c):
        shapes[name + ".weight"] = (c,)
        shapes[name + ".bias"] = (c,)

    def res(name, cin, cout):
        norm(name + ".norm1", cin)
        conv(name + ".conv1", cin, cout)
        shapes[name + ".temb.weight"] = (cout, tdim)
        shapes[name + ".temb.bias"] = (cout,)
        norm(name + ".norm2", cout)
        conv(name + ".conv2", cout, cout)
        if cin != cout:
            conv(name + ".skip", cin, cout, k=1)

    def attn(name, c):
        norm(name + ".norm", c)
        conv(name + ".qkv", c, 3 * c, k=1)
        conv(name + ".proj", c, c, k=1)

    shapes["temb.lin1.weight"] = (tdim, C0)
    shapes["temb.lin1.bias"] = (tdim,)
    shapes["temb.lin2.weight"] = (tdim, tdim)
    shapes["temb.lin2.bias"] = (tdim,)
    conv("conv_in", cfg.in_channels, C0)

    ch = C0
    skips = []
    for lvl, (mult, res_px) in enumerate(zip(cfg.channel_multipliers, cfg.resolutions)):
        out = C0 * mult
        for b in range(cfg.num_res_blocks):
            res(f"down.{lvl}.res.{b}", ch, out)
            ch = out
            if res_px in cfg.use_attention_at:
                attn(f"down.{lvl}.attn.{b}", ch)
        skips.append(ch)
    res("mid.res", ch, ch)
    if cfg.resolutions[-1] in cfg.use_attention_at:
        attn("mid.attn", ch)
    for lvl in reversed(range(len(cfg.channel_multipliers))):
        out = C0 * cfg.channel_multipliers[lvl]
        for b in range(cfg.num_res_blocks):
            cin = ch + skips[lvl] if b == 0 else ch
            res(f"up.{lvl}.res.{b}", cin, out)
            ch = out
            if cfg.resolutions[lvl] in cfg.use_attention_at:
                attn(f"up.{lvl}.attn.{b}", ch)
    norm("out.norm", ch)
    conv("out.conv", ch, cfg.in_channels)
    return shapes


def build_denoiser(config: DenoiserConfig, seed: int = 0) -> DenoiserParams:
    config.validate()
    rng = np.random.default_rng(seed)
    base = {}
    for name, shape in _layer_shapes(config).items():
        if name.endswith(".bias"):
            arr = np.zeros(shape)
        elif ".norm" in name or name.startswith("out.norm"):
            arr = np.ones(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / math.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        base[name] = Tensor(arr, requires_grad=True)
    return DenoiserParams(config, base)


def conv_layers(params: DenoiserParams) -> list[str]:
    return sorted(
        k[: -len(".weight")]
        for k, v in params.base.items()
        if k.endswith(".weight") and v.ndim == 4
    )


def inject_lora(
    params: DenoiserParams,
    rank: int,
    targets: Iterable[str] = DEFAULT_LORA_TARGETS,
    seed: int = 0,
    scale: float = 1.0,
) -> DenoiserParams:
    """Attach zero-initialised low-rank adapters and freeze the base weights."""
    if rank <= 0:
        raise ValueError(f"LoRA rank must be positive, got {rank}")
    patterns = list(targets)
    layers = [n for n in conv_layers(params) if any(fnmatch.fnmatch(n, p) for p in patterns)]
    if not layers:
        raise ValueError(f"no layer matches LoRA targets {patterns}")
    rng = np.random.default_rng(seed)
    adapters = {}
    for name in layers:
        w = params.base[name + ".weight"]
        fan_in = int(np.prod(w.shape[1:]))
        bound = 1.0 / math.sqrt(fan_in)
        down = rng.uniform(-bound, bound, size=(rank, fan_in))
        up = np.zeros((w.shape[0], rank))
        adapters[name] = LoraAdapter(Tensor(down, requires_grad=True), Tensor(up, requires_grad=True))
    out = DenoiserParams(params.config, params.base, adapters, scale)
    out.freeze_base()
    return out


# -- forward --------------------------------------------------------------
def _weight(params: DenoiserParams, layer: str) -> Tensor:
    w = params.base[layer + ".weight"]
    lora = params.adapters.get(layer)
    if lora is None:
        return w
    delta = ad.reshape(ad.matmul(lora.up, lora.down), w.shape)
    if params.lora_scale != 1.0:
        delta = ad.scale(delta, params.lora_scale)
    return ad.add(w, delta)


def _conv(params, layer, x):
    return ad.conv2d(x, _weight(params, layer), params.base[layer + ".bias"])


def _linear(params, layer, x):
    w = params.base[layer + ".weight"]
    return ad.add(ad.matmul(x, ad.transpose(w)), params.base[layer + ".bias"])


def _groups(cfg: DenoiserConfig, channels: int) -> int:
    return math.gcd(cfg.num_groups, channels)


def _norm(params, layer, x):
    g = _groups(params.config, x.shape[1])
    return ad.group_norm(x, g, params.base[layer + ".weight"], params.base[layer + ".bias"])


def timestep_embedding(t: np.ndarray, dim: int) -> Tensor:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = Tensor(np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :])
    return ad.concat([ad.sin(args), ad.cos(args)], axis=1)


def _resblock(params, name, x, temb):
    h = _conv(params, name + ".conv1", ad.silu(_norm(params, name + ".norm1", x)))
    tp = _linear(params, name + ".temb", ad.silu(temb))
    h = ad.add(h, ad.reshape(tp, tp.shape + (1, 1)))
    h = _conv(params, name + ".conv2", ad.silu(_norm(params, name + ".norm2", h)))
    skip = _conv(params, name + ".skip", x) if name + ".skip.weight" in params.base else x
    return ad.add(skip, h)


def _attention(params, name, x):
    B, C, H, W = x.shape
    qkv = _conv(params, name + ".qkv", _norm(params, name + ".norm", x))
    qkv = ad.reshape(qkv, (B, 3, C, H * W))
    q, k, v = qkv[:, 0], qkv[:, 1], qkv[:, 2]
    logits = ad.scale(ad.matmul(ad.transpose(q, (0, 2, 1)), k), 1.0 / math.sqrt(C))
    attn = ad.softmax(logits, axis=-1)
    h = ad.matmul(v, ad.transpose(attn, (0, 2, 1)))
    h = _conv(params, name + ".proj", ad.reshape(h, (B, C, H, W)))
    return ad.add(x, h)


def _check_t(params: DenoiserParams, t) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t))
    T = params.config.T
    if np.any(t < 1) or np.any(t > T):
        raise ValueError(f"timestep out of range [1, {T}]: {t.min()}..{t.max()}")
    return t


def predict_eps(params: DenoiserParams, x_t, t) -> Tensor:
    """Noise prediction for a batch ``x_t`` of shape (B, C, n, n)."""
    cfg = params.config
    x = ad.as_tensor(x_t)
    if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
        raise ValueError(
            f"predict_eps: expected (B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}), "
            f"got {x.shape}"
        )
    t = _check_t(params, t)
    if t.size == 1:
        t = np.full(x.shape[0], t[0])
    temb = timestep_embedding(t, cfg.base_channels)
    temb = _linear(params, "temb.lin2", ad.silu(_linear(params, "temb.lin1", temb)))

    h = _conv(params, "conv_in", x)
    skips = []
    levels = len(cfg.channel_multipliers)
    for lvl, res_px in enumerate(cfg.resolutions):
        for b in range(cfg.num_res_blocks):
            h = _resblock(params, f"down.{lvl}.res.{b}", h, temb)
            if res_px in cfg.use_attention_at:
                h = _attention(params, f"down.{lvl}.attn.{b}", h)
        skips.append(h)
        if lvl < levels - 1:
            h = ad.avg_pool2x(h)
    h = _resblock(params, "mid.res", h, temb)
    if cfg.resolutions[-1] in cfg.use_attention_at:
        h = _attention(params, "mid.attn", h)
    for lvl in reversed(range(levels)):
        for b in range(cfg.num_res_blocks):
            if b == 0:
                h = ad.concat([h, skips[lvl]], axis=1)
            h = _resblock(params, f"up.{lvl}.res.{b}", h, temb)
            if cfg.resolutions[lvl] in cfg.use_attention_at:
                h = _attention(params, f"up.{lvl}.attn.{b}", h)
        if lvl > 0:
            h = ad.upsample_nearest2x(h)
    h = ad.silu(_norm(params, "out.norm", h))
    return _conv(params, "out.conv", h)


def x0_from_eps(x_t, eps, alpha_bar):
    """Tweedie estimate in VP form: (x_t - sqrt(1 - a) eps) / sqrt(a).

    Works on arrays or tensors; ``alpha_bar`` may be per-sample (broadcast).
    """
    a = np.asarray(alpha_bar, dtype=np.float64)
    if np.any(a <= 0) or np.any(a > 1):
        raise ValueError("alpha_bar must lie in (0, 1]")
    if a.ndim == 1:
        a = a.reshape((-1,) + (1,) * (np.ndim(x_t.data if isinstance(x_t, Tensor) else x_t) - 1))
    c_eps = np.sqrt(1.0 - a)
    c_x = 1.0 / np.sqrt(a)
    if isinstance(x_t, Tensor) or isinstance(eps, Tensor):
        return ad.mul(ad.sub(x_t, ad.mul(eps, c_eps)), c_x)
    return (x_t - c_eps * eps) * c_x


def tweedie_x0(params: DenoiserParams, x_t, t, schedule) -> tuple[Tensor, Tensor]:
    """Return (x0_hat, eps_hat) for ``x_t`` at integer timestep ``t``."""
    eps = predict_eps(params, x_t, t)
    ab = schedule.alpha_bar(t)
    return x0_from_eps(x_t, eps, ab), eps


# -- serialisation ------------------------------------------------------
def _write_npz(path, arrays: dict[str, np.ndarray], meta: dict) -> int:
    buf = io.BytesIO()
    payload = {k: np.ascontiguousarray(v, dtype="<f8") for k, v in arrays.items()}
    payload["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(buf, **payload)
    data = buf.getvalue()
    if path is not None:
        Path(path).write_bytes(data)
    return len(data)


def _read_npz(path, version: str) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("version") != version:
            raise ValueError(f"{path}: expected version {version}, got {meta.get('version')}")
        arrays = {k: z[k].astype(np.float64) for k in z.files if k != "__meta__"}
    return arrays, meta


def save_checkpoint(path, params: DenoiserParams) -> int:
    """Base weights only, as little-endian float64 arrays in an npz archive."""
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(params.config)}
    return _write_npz(path, {k: v.data for k, v in params.base.items()}, meta)


def load_checkpoint(path) -> DenoiserParams:
    arrays, meta = _read_npz(path, CHECKPOINT_VERSION)
    cfg = DenoiserConfig(**meta["config"])
    expected = _layer_shapes(cfg)
    if set(expected) != set(arrays):
        raise ValueError(f"{path}: parameter names do not match config")
    base = {k: Tensor(arrays[k], requires_grad=True) for k in expected}
    return DenoiserParams(cfg, base)


def save_adapters(path, params: DenoiserParams) -> int:
    """Adapters only; returns the serialized size in bytes (path may be None)."""
    arrays = {}
    for name, a in params.adapters.items():
        arrays[name + ".down"] = a.down.data
        arrays[name + ".up"] = a.up.data
    meta = {
        "version": ADAPTER_VERSION,
        "rank": params.lora_rank,
        "scale": params.lora_scale,
        "layers": sorted(params.adapters),
    }
    return _write_npz(path, arrays, meta)


def load_adapters(path, params: DenoiserParams) -> DenoiserParams:
    arrays, meta = _read_npz(path, ADAPTER_VERSION)
    adapters = {}
    for name in meta["layers"]:
        if name + ".weight" not in params.base:
            raise ValueError(f"{path}: adapter for unknown layer {name}")
        adapters[name] = LoraAdapter(
            Tensor(arrays[name + ".down"], requires_grad=True),
            Tensor(arrays[name + ".up"], requires_grad=True),
        )
    out = DenoiserParams(params.config, params.base, adapters, meta["scale"])
    out.freeze_base()
    return out
