"""Tubelet tokenization shared by images and videos.

An image is a one-frame clip; it is repeated along time up to the tubelet depth
so that both modalities go through the same patch projection.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class PatchGeometry:
    tubelet_t: int = 2
    patch_h: int = 8
    patch_w: int = 8
    embed_dim: int = 64

    def grid(self, t: int, h: int, w: int) -> tuple[int, int, int]:
        if t % self.tubelet_t or h % self.patch_h or w % self.patch_w:
            raise GeometryError(
                f"clip {t}x{h}x{w} not divisible by tubelet "
                f"{self.tubelet_t}x{self.patch_h}x{self.patch_w}")
        return t // self.tubelet_t, h // self.patch_h, w // self.patch_w

    def patch_dim(self, channels: int) -> int:
        return self.tubelet_t * self.patch_h * self.patch_w * channels


@dataclass
class TokenBatch:
    """Token embeddings ``[B, N, d]`` (or ``[N, d]``) with their grid coordinates."""

    tokens: Tensor
    coords: np.ndarray  # [N, 3] (t, h, w)
    grid: tuple[int, int, int]
    modality: str

    @property
    def n_tokens(self) -> int:
        return self.coords.shape[0]


def replicate_image(img: np.ndarray, geom: PatchGeometry) -> np.ndarray:
    """Repeat a single frame ``[1, H, W, C]`` (or batch ``[B, 1, H, W, C]``) to tubelet depth."""
    axis = img.ndim - 4
    if img.shape[axis] != 1:
        raise GeometryError(f"replicate_image expects T == 1, got T={img.shape[axis]}")
    return np.repeat(img, geom.tubelet_t, axis=axis)


def extract_patches(clips: np.ndarray, geom: PatchGeometry) -> np.ndarray:
    """``[B, T, H, W, C]`` -> ``[B, N, tubelet_t*patch_h*patch_w*C]``, row-major over (t, h, w).

    Each row is one tubelet flattened in (dt, dy, dx, c) order.
    """
    squeeze = clips.ndim == 4
    if squeeze:
        clips = clips[None]
    b, t, h, w, c = clips.shape
    gt, gh, gw = geom.grid(t, h, w)
    x = clips.reshape(b, gt, geom.tubelet_t, gh, geom.patch_h, gw, geom.patch_w, c)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6, 7)
    x = x.reshape(b, gt * gh * gw, geom.patch_dim(c))
    return x[0] if squeeze else x


def assemble_patches(patches: np.ndarray, geom: PatchGeometry,
                     shape: tuple[int, int, int, int]) -> np.ndarray:
    """Inverse of :func:`extract_patches` for a target ``(T, H, W, C)``."""
    t, h, w, c = shape
    gt, gh, gw = geom.grid(t, h, w)
    squeeze = patches.ndim == 2
    if squeeze:
        patches = patches[None]
    b, n, pd = patches.shape
    if n != gt * gh * gw or pd != geom.patch_dim(c):
        raise GeometryError(f"{n} patches of size {pd} do not fill grid {gt}x{gh}x{gw} (patch {geom.patch_dim(c)})")
    x = patches.reshape(b, gt, gh, gw, geom.tubelet_t, geom.patch_h, geom.patch_w, c)
    x = x.transpose(0, 1, 4, 2, 5, 3, 6, 7).reshape(b, t, h, w, c)
    return x[0] if squeeze else x


def detokenize(patches, geom: PatchGeometry, shape: tuple[int, int, int, int]) -> np.ndarray:
    data = patches.data if isinstance(patches, Tensor) else np.asarray(patches)
    return assemble_patches(data, geom, shape)


def grid_coords(grid: tuple[int, int, int]) -> np.ndarray:
    gt, gh, gw = grid
    t, h, w = np.meshgrid(np.arange(gt), np.arange(gh), np.arange(gw), indexing="ij")
    return np.stack([t.ravel(), h.ravel(), w.ravel()], axis=1)


def _axis_dims(d: int) -> tuple[int, int, int]:
    dh = 2 * (d // 6)
    dt = d - 2 * dh
    if dh == 0 or dt <= 0:
        raise GeometryError(f"embed dim {d} too small for 3-axis position codes")
    return dt, dh, dh


def _sincos(pos: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freq = 1.0 / 10000.0 ** (np.arange(half, dtype=np.float64) / max(half, 1))
    ang = pos[:, None].astype(np.float64) * freq[None]
    out = np.zeros((pos.shape[0], dim))
    out[:, 0:2 * half:2] = np.sin(ang)
    out[:, 1:2 * half:2] = np.cos(ang)
    return out


@lru_cache(maxsize=64)
def _position_codes(grid: tuple[int, int, int], d: int) -> np.ndarray:
    coords = grid_coords(grid)
    dt, dh, dw = _axis_dims(d)
    pe = np.concatenate([_sincos(coords[:, 0], dt), _sincos(coords[:, 1], dh),
                         _sincos(coords[:, 2], dw)], axis=1)
    pe.setflags(write=False)
    return pe


def position_codes(grid: tuple[int, int, int], d: int) -> np.ndarray:
    """Fixed separable sine/cosine codes ``[N, d]``; the width is split over the t, h, w axes."""
    return _position_codes(tuple(int(g) for g in grid), int(d))


def tokenize(clips: np.ndarray, geom: PatchGeometry, proj_w: Tensor, proj_b: Tensor,
             modality: str | None = None) -> TokenBatch:
    """Project tubelets of ``[B, T, H, W, C]`` clips to ``d``-dim tokens plus position codes.

    Single-frame inputs are replicated to the tubelet depth first.
    """
    squeeze = clips.ndim == 4
    if squeeze:
        clips = clips[None]
    if modality is None:
        modality = "image" if clips.shape[1] == 1 else "video"
    if clips.shape[1] == 1 and geom.tubelet_t > 1:
        clips = replicate_image(clips, geom)
    _, t, h, w, c = clips.shape
    grid = geom.grid(t, h, w)
    patches = ad.Tensor(extract_patches(clips, geom))
    tokens = patches @ proj_w + proj_b
    tokens = tokens + ad.Tensor(position_codes(grid, proj_w.shape[1]))
    if squeeze:
        tokens = tokens[0]
    return TokenBatch(tokens, grid_coords(grid), grid, modality)
