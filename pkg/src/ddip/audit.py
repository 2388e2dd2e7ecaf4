"""Gradient audit over the autodiff op catalog and a few small networks."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check


@dataclass
class AuditEntry:
    name: str
    max_rel_error: float
    checked: int
    excluded: int


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return ad.tsum(ad.mul(out, w))


def _cases(rng: np.random.Generator) -> list[tuple[str, Callable[[Tensor], Tensor], np.ndarray]]:
    r = rng.standard_normal
    W = {s: r(s) for s in [(3, 4), (4, 3), (12,), (2, 2), (2, 3, 4), (3, 3), (2, 3)]}
    b34 = r((3, 4))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    away = r((3, 4))
    away[np.abs(away) < 0.2] += 0.5  # keep |.| and thresholds away from kinks

    def w_like(x):
        return W[tuple(x.shape)] if tuple(x.shape) in W else np.ones(x.shape)

    def un(op):
        return lambda x: _weighted(op(x), w_like(op(x)))

    w64, w34, w24 = r((6, 4)), r((3, 4)), r((2, 4))
    cases = [
        ("add", lambda x: _weighted(ad.add(x, b34), W[(3, 4)]), r((3, 4))),
        ("add_broadcast", lambda x: _weighted(ad.add(b34, x), W[(3, 4)]), r((4,))),
        ("sub", lambda x: _weighted(ad.sub(b34, x), W[(3, 4)]), r((3, 4))),
        ("mul", lambda x: _weighted(ad.mul(x, b34), W[(3, 4)]), r((3, 4))),
        ("scale", lambda x: _weighted(ad.scale(x, -2.5), W[(3, 4)]), r((3, 4))),
        ("div", lambda x: _weighted(ad.div(b34, x), W[(3, 4)]), pos),
        ("neg", un(ad.neg), r((3, 4))),
        ("square", un(ad.square), r((3, 4))),
        ("sqrt", un(ad.sqrt), pos),
        ("exp", un(ad.exp), r((3, 4))),
        ("sin", un(ad.sin), r((3, 4))),
        ("cos", un(ad.cos), r((3, 4))),
        ("abs", un(ad.absolute), away),
        ("relu", un(ad.relu), away),
        ("sigmoid", un(ad.sigmoid), r((3, 4))),
        ("silu", un(ad.silu), r((3, 4))),
        ("softmax", lambda x: _weighted(ad.softmax(x, axis=-1), W[(3, 4)]), r((3, 4))),
        ("soft_threshold", lambda x: _weighted(ad.soft_threshold(x, 0.1), W[(3, 4)]), away),
        ("sum", lambda x: ad.tsum(ad.square(ad.tsum(x, axis=0))), r((3, 4))),
        ("mean", lambda x: ad.tsum(ad.square(ad.mean(x, axis=1))), r((3, 4))),
        ("sq_norm", lambda x: ad.sq_norm(x), r((3, 4))),
        ("l1_norm", lambda x: ad.l1_norm(x), away),
        ("norm", lambda x: ad.tsum(ad.norm(x, axis=1)), r((3, 4))),
        ("batch_dot", lambda x: ad.tsum(ad.square(ad.batch_dot(x, b34, 1))), r((3, 4))),
        ("reshape", lambda x: _weighted(ad.reshape(x, (12,)), W[(12,)]), r((3, 4))),
        ("transpose", lambda x: _weighted(ad.transpose(x), W[(4, 3)]), r((3, 4))),
        ("broadcast", lambda x: _weighted(ad.broadcast_to(x, (2, 3, 4)), W[(2, 3, 4)]), r((3, 4))),
        ("concat", lambda x: _weighted(ad.concat([x, ad.square(x)], axis=0), w64), r((3, 4))),
        ("stack", lambda x: _weighted(ad.stack([x, ad.sin(x)], axis=0), W[(2, 3, 4)]), r((3, 4))),
        ("slice", lambda x: _weighted(x[1:, ::2], W[(2, 2)]), r((3, 4))),
        ("gather", lambda x: _weighted(x[np.array([0, 2, 0])], w34), r((3, 4))),
        ("matmul", lambda x: _weighted(ad.matmul(x, W[(4, 3)]), W[(3, 3)]), r((3, 4))),
        ("matmul_rhs", lambda x: _weighted(ad.matmul(W[(2, 3)], x), w24), r((3, 4))),
    ]
    img = r((2, 3, 6, 6))
    ker = r((4, 3, 3, 3)) * 0.3
    gw, g444, g333, g3_12, g366 = r((4, 6, 6)), r((4, 4, 4)), r((3, 3, 3)), r((3, 12, 12)), r((3, 6, 6))
    cases += [
        ("conv2d_x", lambda x: _weighted(ad.conv2d(x, ker, np.ones(4)), gw), img),
        ("conv2d_w", lambda x: _weighted(ad.conv2d(img, x), gw), ker),
        ("conv2d_valid", lambda x: _weighted(ad.conv2d(x, ker, padding=0), g444), img),
        ("avg_pool2x", lambda x: _weighted(ad.avg_pool2x(x), g333), img),
        ("upsample2x", lambda x: _weighted(ad.upsample_nearest2x(x), g3_12), img),
        ("group_norm_x", lambda x: _weighted(ad.group_norm(x, 1, np.ones(3), np.zeros(3)), g366), img),
        ("group_norm_w", lambda x: _weighted(ad.group_norm(img, 1, x, np.zeros(3)), g366), r((3,))),
    ]
    M = r((5, 4))
    cases.append(("linear_map", lambda x: ad.sq_norm(ad.linear_map(x, lambda v: v @ M.T, lambda g: g @ M)),
                  r((2, 4))))
    return cases


def _cg_case(rng):
    from .operators import cg_solve, matrix_map

    Q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    S = Q @ np.diag([1.0, 2.0, 3.0, 5.0]) @ Q.T
    A = rng.standard_normal((4, 4))
    y = rng.standard_normal(4)
    Smap = matrix_map(S)

    def f(b):
        x = cg_solve(Smap, b, 4)
        return ad.sq_norm(ad.sub(y, ad.matmul(A, x)))

    return "cg_unrolled", f, rng.standard_normal(4)


def _networks(rng):
    from .denoiser import DenoiserConfig, build_denoiser, inject_lora, predict_eps

    r = rng.standard_normal
    W1, W2, X = r((6, 5)) * 0.5, r((5, 1)) * 0.5, r((7, 6))

    def mlp(w):
        h = ad.silu(ad.matmul(X, w))
        return ad.sq_norm(ad.matmul(h, W2))

    img = r((2, 2, 8, 8))
    k2 = r((4, 4, 3, 3)) * 0.3
    tgt = r((2, 4, 8, 8))

    def convnet(w):
        h = ad.silu(ad.group_norm(ad.conv2d(img, w), 2, np.ones(4), np.zeros(4)))
        h = ad.upsample_nearest2x(ad.avg_pool2x(ad.conv2d(h, k2)))
        return ad.sq_norm(ad.sub(h, tgt))

    cfg = DenoiserConfig(image_size=8, base_channels=8, channel_multipliers=(1, 2), num_groups=2,
                         time_embed_dim=16, use_attention_at=(4,))
    base = build_denoiser(cfg, seed=int(rng.integers(1000)))
    lora = inject_lora(base, 2, seed=1)
    for a in lora.adapters.values():
        a.up.data = rng.standard_normal(a.up.shape) * 0.1
    layer = sorted(lora.adapters)[0]
    x_t = r((2, 1, 8, 8))
    t = np.array([10, 500])
    eps = r((2, 1, 8, 8))

    def unet(w):
        p = replace(lora, adapters=dict(lora.adapters))
        p.adapters[layer] = replace(lora.adapters[layer], up=w)
        return ad.sq_norm(ad.sub(predict_eps(p, x_t, t), eps))

    return [
        ("net_mlp", mlp, W1),
        ("net_conv", convnet, r((4, 2, 3, 3)) * 0.3),
        ("net_unet_lora", unet, lora.adapters[layer].up.data.copy()),
    ]


def run_audit(seed: int = 0, eps: float = 1e-5, max_coords: int = 40) -> list[AuditEntry]:
    """Grad-check every catalog op, unrolled CG and three small networks."""
    rng = np.random.default_rng(seed)
    cases = _cases(rng) + [_cg_case(rng)] + _networks(rng)
    out = []
    for name, f, point in cases:
        res = grad_check(f, point, eps=eps, coords=max_coords, seed=seed)
        checked = min(point.size, max_coords) - len(res.excluded)
        out.append(AuditEntry(name, res.max_rel_error, checked, len(res.excluded)))
    return out
