"""Random token masking and the masked reconstruction loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class MaskConfigError(ValueError):
    pass


@dataclass
class MaskSpec:
    """``keep`` is 1 for visible tokens and 0 for dropped ones; shape ``[N]`` or ``[B, N]``."""

    ratio: float
    keep: np.ndarray
    seed: int | None = None

    @property
    def n_tokens(self) -> int:
        return self.keep.shape[-1]

    @property
    def n_masked(self) -> int:
        return int((self.keep == 0).sum(axis=-1).reshape(-1)[0])

    def visible_index(self) -> np.ndarray:
        """Sorted indices of visible tokens, ``[Nv]`` or ``[B, Nv]``."""
        return _index_where(self.keep == 1)

    def masked_index(self) -> np.ndarray:
        return _index_where(self.keep == 0)


def _index_where(sel: np.ndarray) -> np.ndarray:
    if sel.ndim == 1:
        return np.flatnonzero(sel)
    counts = sel.sum(axis=1)
    if np.any(counts != counts[0]):
        raise MaskConfigError("per-sample masks must drop the same number of tokens")
    return np.nonzero(sel)[1].reshape(sel.shape[0], counts[0])


def n_dropped(n_tokens: int, ratio: float) -> int:
    if not 0.0 <= ratio < 1.0:
        raise MaskConfigError(f"mask ratio must be in [0, 1), got {ratio}")
    drop = int(np.floor(ratio * n_tokens + 0.5))
    if ratio > 0.0 and n_tokens >= 2:
        drop = min(max(drop, 1), n_tokens - 1)
    return drop


def sample_mask(n_tokens: int, ratio: float, seed=None, batch: int | None = None) -> MaskSpec:
    """Drop exactly ``round(ratio * n_tokens)`` tokens chosen uniformly at random.

    ``seed`` may be an int or a ``numpy.random.Generator``. With ``batch`` set,
    each row gets an independent mask with the same drop count.
    """
    drop = n_dropped(n_tokens, ratio)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    rows = 1 if batch is None else batch
    keep = np.ones((rows, n_tokens), dtype=np.int8)
    for i in range(rows):
        keep[i, rng.permutation(n_tokens)[:drop]] = 0
    if batch is None:
        keep = keep[0]
    return MaskSpec(ratio, keep, seed if isinstance(seed, (int, np.integer)) else None)


def _flat_index(idx: np.ndarray, n: int) -> np.ndarray:
    if idx.ndim == 1:
        return idx
    return (np.arange(idx.shape[0])[:, None] * n + idx).ravel()


def gather_tokens(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select token rows ``idx`` (``[M]`` or ``[B, M]``) from ``x`` (``[N, d]`` or ``[B, N, d]``)."""
    if idx.ndim == 1 and x.ndim == 2:
        return ad.take_rows(x, idx, unique=True)
    b, n, d = x.shape
    flat = ad.take_rows(x.reshape(b * n, d), _flat_index(idx, n), unique=True)
    return flat.reshape(b, idx.shape[1], d)


def apply_mask(tokens: Tensor, mask: MaskSpec) -> tuple[Tensor, np.ndarray]:
    """Keep the visible tokens; returns them with their grid indices.

    Same as multiplying by the mask and dropping zeroed rows, without ever
    materialising the zeros.
    """
    if tokens.shape[-2] != mask.n_tokens:
        raise MaskConfigError(f"mask over {mask.n_tokens} tokens applied to {tokens.shape[-2]}")
    idx = mask.visible_index()
    return gather_tokens(tokens, idx), idx


def masked_mse(pred: Tensor, target: np.ndarray, mask: MaskSpec, denominator: str = "masked") -> Tensor:
    """Mean squared error over the dropped tokens only.

    ``denominator="masked"`` divides by the number of dropped elements;
    ``"literal"`` divides by the number of visible elements instead.
    Predictions at visible positions never enter the computation.
    """
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ad.ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    if pred.shape[-2] != mask.n_tokens:
        raise MaskConfigError("mask length does not match token count")
    idx = mask.masked_index()
    if idx.size == 0:
        raise ad.DegenerateError("masked_mse: no masked tokens")
    sel = gather_tokens(pred, idx)
    if idx.ndim == 1:
        tgt = target[idx]
    else:
        tgt = np.take_along_axis(target, idx[..., None], axis=1)
    diff = sel - ad.Tensor(tgt)
    sq = (diff * diff).sum()
    if denominator == "masked":
        count = sel.size
    elif denominator == "literal":
        count = int(mask.keep.sum()) * pred.shape[-1]
        if count == 0:
            raise ad.DegenerateError("masked_mse: literal denominator is zero")
    else:
        raise MaskConfigError(f"unknown denominator {denominator!r}")
    return ad.scale(sq, 1.0 / count)
