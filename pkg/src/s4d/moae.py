"""Mixture of adapter experts: noisy top-k gating over bottleneck adapters."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class GateConfigError(ValueError):
    pass


@dataclass
class GateParams:
    w_g: Tensor  # [d, n]
    k: int = 2
    sigma: float = 1.0
    train_mode: bool = False

    def __post_init__(self):
        n = self.w_g.shape[1]
        if not 1 <= self.k <= n:
            raise GateConfigError(f"k={self.k} must be in [1, {n}]")
        if self.sigma < 0:
            raise GateConfigError(f"sigma must be >= 0, got {self.sigma}")

    @property
    def n(self) -> int:
        return self.w_g.shape[1]


@dataclass
class AdapterParams:
    w1: Tensor  # [d, r]
    b1: Tensor  # [r]
    w2: Tensor  # [r, d]
    b2: Tensor  # [d]

    @property
    def bottleneck(self) -> int:
        return self.w1.shape[1]

    def tensors(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass
class GateDecision:
    """Per-token routing: ``weights [N, n]`` with exactly k nonzeros, ``selected [N, k]``."""

    weights: np.ndarray
    selected: np.ndarray
    probs: Tensor | None = field(default=None, repr=False)


def noisy_logits(x: Tensor, gate: GateParams, rng: np.random.Generator | None = None) -> Tensor:
    """``x @ W_g`` plus N(0, sigma^2) noise when the gate is in train mode."""
    h = x @ gate.w_g if x.ndim > 1 else (x.reshape(1, -1) @ gate.w_g).reshape(-1)
    if gate.train_mode and gate.sigma > 0:
        if rng is None:
            raise GateConfigError("train-mode gating needs an rng for the noise")
        h = h + ad.Tensor(rng.standard_normal(h.shape) * gate.sigma)
    return h


def topk_gate(h: Tensor, k: int) -> tuple[Tensor, GateDecision]:
    """Softmax over the k largest logits per row; the rest are set to -inf first.

    Ties go to the lower expert index. Returns the differentiable weight tensor
    and the decision record.
    """
    squeeze = h.ndim == 1
    if squeeze:
        h = h.reshape(1, -1)
    n = h.shape[-1]
    if not 1 <= k <= n:
        raise GateConfigError(f"k={k} must be in [1, {n}]")
    _, idx = ad.topk(h, k, axis=-1)
    suppress = np.full(h.shape, -np.inf, dtype=h.data.dtype)
    np.put_along_axis(suppress, idx, 0.0, axis=-1)
    w = ad.softmax(h + ad.Tensor(suppress), axis=-1)
    decision = GateDecision(w.data[0] if squeeze else w.data, idx[0] if squeeze else idx, w)
    return (w.reshape(-1) if squeeze else w), decision


def adapter_forward(x: Tensor, a: AdapterParams) -> Tensor:
    """``x + W2 GELU(W1 x + b1) + b2`` on rows of ``x [M, d]``."""
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, -1)
    hidden = ad.gelu(ad.rowstable_matmul(x, a.w1) + a.b1)
    out = x + ad.rowstable_matmul(hidden, a.w2) + a.b2
    return out.reshape(-1) if squeeze else out


def moae_forward(x: Tensor, gate: GateParams, experts: Sequence[AdapterParams],
                 rng: np.random.Generator | None = None) -> tuple[Tensor, GateDecision]:
    """Gate-weighted sum of adapter outputs for tokens ``x [N, d]``.

    Each expert runs only on the tokens routed to it; results are accumulated
    in expert-index order.
    """
    if len(experts) != gate.n:
        raise GateConfigError(f"{len(experts)} experts for a gate over {gate.n}")
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, -1)
    n_tok = x.shape[0]
    w, decision = topk_gate(noisy_logits(x, gate, rng), gate.k)
    out = None
    for i, expert in enumerate(experts):
        rows = np.flatnonzero((decision.selected == i).any(axis=1))
        if rows.size == 0:
            continue
        y = adapter_forward(ad.take_rows(x, rows, unique=True), expert)
        wi = w[rows, i].reshape(-1, 1)
        contrib = ad.scatter_rows(wi * y, rows, n_tok, unique=True)
        out = contrib if out is None else out + contrib
    if squeeze:
        out = out.reshape(-1)
        decision = GateDecision(decision.weights[0], decision.selected[0], decision.probs)
    return out, decision


def importance_loss(decisions: Iterable[GateDecision]) -> Tensor | None:
    """Squared coefficient of variation of per-expert total gate weight, summed over layers."""
    total = None
    for dec in decisions:
        if dec.probs is None:
            continue
        imp = dec.probs.sum(axis=0)
        mu = imp.mean()
        dev = imp - mu
        cv2 = (dev * dev).mean() / (mu * mu + 1e-10)
        total = cv2 if total is None else total + cv2
    return total


def gate_rows(decision: GateDecision, layer: int, dataset: str, token_offset: int = 0):
    """Yield ``(layer, token, dataset, expert, weight)`` for every selected expert."""
    weights = np.atleast_2d(decision.weights)
    selected = np.atleast_2d(decision.selected)
    for t in range(selected.shape[0]):
        for e in selected[t]:
            yield layer, token_offset + t, dataset, int(e), float(weights[t, e])


def export_gate_csv(path, rows: Iterable[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "token", "dataset", "expert", "weight"])
        for r in rows:
            writer.writerow([r[0], r[1], r[2], r[3], repr(r[4])])
