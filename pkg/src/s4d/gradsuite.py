"""Finite-difference gradient checks for every differentiable op and a small model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import ModelConfig, S4DModel, moae_layer, standard_layer
from .masking import masked_mse, sample_mask
from .moae import AdapterParams, GateParams, adapter_forward, moae_forward

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    n_params: int

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def tiny_config() -> ModelConfig:
    """Two encoder layers, the second one MoAE."""
    return ModelConfig(clip_frames=2, image_size=8, channels=2, tubelet_t=2, patch=4, dim=16, depth=2,
                       heads=2, moae_layers=1, n_experts=4, top_k=2, decoder_depth=1, decoder_width=8,
                       decoder_heads=2, n_classes_sfer=3, n_classes_dfer=4)


Case = tuple[Callable[[], Tensor], list[Tensor], Callable[[], object] | None]


def _cases(rng: np.random.Generator) -> dict[str, Case]:
    """``(loss, params, guard)`` per op; guards report the top-k branch taken."""
    def u(*shape, lo=-2.0, hi=2.0):
        return rng.uniform(lo, hi, size=shape)

    a = ad.parameter(u(4, 5))
    b = ad.parameter(u(1, 5))
    m = ad.parameter(u(5, 3))
    pos = ad.parameter(u(4, 5, lo=0.5))
    g = ad.parameter(u(5))
    beta = ad.parameter(u(5))
    w3 = Tensor(u(4, 3))
    w4 = Tensor(u(4, 5))
    w5 = Tensor(u(5, 5))
    w6 = Tensor(u(6, 5))
    idx = np.array([3, 0, 0, 2])
    drop_seed = int(rng.integers(2**31))

    d, r, n = 8, 2, 4
    experts = [AdapterParams(ad.parameter(u(d, r) * 0.5), ad.parameter(u(r) * 0.1),
                             ad.parameter(u(r, d) * 0.5), ad.parameter(u(d) * 0.1)) for _ in range(n)]
    gate = GateParams(ad.parameter(u(d, n)), k=2)
    tok = Tensor(u(6, d))
    wt = Tensor(u(6, d))

    target = u(6, 5)
    mask = sample_mask(6, 0.5, seed=int(rng.integers(2**31)))
    pred = ad.parameter(u(6, 5))

    return {
        "add": (lambda: ((a + b) * w4).sum(), [a, b], None),
        "sub": (lambda: ((a - b) * w4).sum(), [a, b], None),
        "mul": (lambda: ((a * b) * w4).sum(), [a, b], None),
        "div": (lambda: ((a / pos) * w4).sum(), [a, pos], None),
        "scale": (lambda: (ad.scale(a, -1.7) * w4).sum(), [a], None),
        "exp": (lambda: (ad.exp(a) * w4).sum(), [a], None),
        "gelu": (lambda: (ad.gelu(a) * w4).sum(), [a], None),
        "matmul": (lambda: ((a @ m) * w3).sum(), [a, m], None),
        "rowstable_matmul": (lambda: (ad.rowstable_matmul(a, m) * w3).sum(), [a, m], None),
        "reshape": (lambda: (a.reshape(5, 4) * Tensor(w4.data.reshape(5, 4))).sum(), [a], None),
        "transpose": (lambda: (a.transpose() * Tensor(w4.data.T)).sum(), [a], None),
        "concat": (lambda: (ad.concat([a, b], axis=0) * w5).sum(), [a, b], None),
        "getitem": (lambda: (a[1:3, ::2] * a[1:3, ::2]).sum(), [a], None),
        "sum": (lambda: (a.sum(axis=0) * b.reshape(5)).sum(), [a, b], None),
        "mean": (lambda: (a.mean(axis=1, keepdims=True) * a).sum(), [a], None),
        "take_rows": (lambda: (ad.take_rows(a, idx) * w4).sum(), [a], None),
        "scatter_rows": (lambda: (ad.scatter_rows(a, idx, 6) * w6).sum(), [a], None),
        "softmax": (lambda: (ad.softmax(a) * w4).sum(), [a], None),
        "log_softmax": (lambda: (ad.log_softmax(a) * w4).sum(), [a], None),
        "layernorm": (lambda: (ad.layernorm(a, g, beta) * w4).sum(), [a, g, beta], None),
        "cross_entropy": (lambda: ad.cross_entropy(a, np.array([0, 4, 2, 2])), [a], None),
        "topk": (lambda: ad.topk(a, 2)[0].sum() * 1.3, [a], lambda: ad.topk(a, 2)[1].tobytes()),
        "dropout": (lambda: (ad.dropout(a, 0.3, np.random.default_rng(drop_seed), True) * w4).sum(), [a], None),
        "adapter": (lambda: (adapter_forward(tok, experts[0]) * wt).sum(), experts[0].tensors(), None),
        "moae": (lambda: (moae_forward(tok, gate, experts)[0] * wt).sum(),
                 [gate.w_g] + [t for e in experts for t in e.tensors()],
                 lambda: moae_forward(tok, gate, experts)[1].selected.tobytes()),
        "masked_mse": (lambda: masked_mse(pred, target, mask), [pred], None),
    }


def _model_case(seed: int, max_coords: int) -> tuple[float, int]:
    """Classification plus reconstruction loss through a 1 standard + 1 MoAE layer model."""
    cfg = tiny_config()
    model = S4DModel(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    clips = rng.uniform(0, 1, size=(2, cfg.clip_frames, cfg.image_size, cfg.image_size, cfg.channels))
    labels = np.array([0, 2])
    mask = sample_mask(model.tokenize(clips[:1]).n_tokens, 0.5, seed=seed, batch=2)
    patches = rng.uniform(0, 1, size=(2, mask.n_tokens, cfg.patch_dim))

    def loss():
        phi, _ = model.embed(clips)
        cls = ad.cross_entropy(model.classify(phi, "sfer"), labels)
        tb = model.tokenize(clips)
        vis_idx = mask.visible_index()
        flat = (np.arange(2)[:, None] * mask.n_tokens + vis_idx).ravel()
        vis = ad.take_rows(tb.tokens.reshape(-1, cfg.dim), flat, unique=True).reshape(2, -1, cfg.dim)
        enc = model.encode(vis, use_moae=False)
        rec = masked_mse(model.decode(enc.latent, vis_idx, mask, tb.grid), patches, mask)
        return cls + rec

    params = [t for k, t in model.params.items() if not k.startswith("head_dfer")]
    def routing():
        return tuple(dec.selected.tobytes() for _, dec in model.embed(clips)[1].gates)

    err = ad.gradcheck(loss, params, max_coords=max_coords, rng=np.random.default_rng(seed), guard=routing)
    return err, len(params)


def _layer_case(seed: int) -> dict[str, float]:
    cfg = tiny_config()
    model = S4DModel(cfg, seed=seed)
    x = Tensor(np.random.default_rng(seed).uniform(-2, 2, size=(2, 4, cfg.dim)))
    wx = Tensor(np.random.default_rng(seed + 1).uniform(-2, 2, size=(2, 4, cfg.dim)))
    std = [t for k, t in model.params.items() if k.startswith("enc.0.")]
    moe = [t for k, t in model.params.items() if k.startswith("enc.1.")]
    return {
        "standard_layer": ad.gradcheck(lambda: (standard_layer(x, model.params, "enc.0", cfg.heads) * wx).sum(),
                                       std, max_coords=24),
        "moae_layer": ad.gradcheck(lambda: (moae_layer(x, model.params, "enc.1", cfg)[0] * wx).sum(),
                                   moe, max_coords=24,
                                   guard=lambda: moae_layer(x, model.params, "enc.1", cfg)[1].selected.tobytes()),
    }


def run_suite(seed: int = 0, max_coords: int = 24) -> list[CheckResult]:
    """Every check in float64; returns one result per op or model."""
    out = []
    with ad.precision(np.float64):
        for name, (f, params, guard) in _cases(np.random.default_rng(seed)).items():
            err = ad.gradcheck(f, params, guard=guard)
            out.append(CheckResult(name, err, len(params)))
        for name, err in _layer_case(seed).items():
            out.append(CheckResult(name, err, 0))
        err, n = _model_case(seed, max_coords)
        out.append(CheckResult("model_2layer", err, n))
    return out
