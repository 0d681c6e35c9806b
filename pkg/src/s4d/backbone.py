"""Transformer encoder/decoder with optional MoAE layers and two task heads."""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .masking import MaskSpec
from .moae import AdapterParams, GateDecision, GateParams, moae_forward
from .patchify import PatchGeometry, TokenBatch, position_codes, tokenize

MOAE_POSITIONS = ("early", "middle", "later", "alternate")
HEADS = ("sfer", "dfer")


class ModelConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    clip_frames: int = 8
    image_size: int = 32
    channels: int = 3
    tubelet_t: int = 2
    patch: int = 8
    dim: int = 64
    depth: int = 6
    heads: int = 4
    mlp_ratio: int = 4
    moae_position: str = "later"
    moae_layers: int = 3
    n_experts: int = 8
    top_k: int = 2
    gate_sigma: float = 1.0
    adapter_div: int = 4
    decoder_depth: int = 2
    decoder_width: int = 32
    decoder_heads: int = 4
    n_classes_sfer: int = 6
    n_classes_dfer: int = 6
    head_hidden: int = 0
    dropout: float = 0.0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ModelConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.decoder_width % self.decoder_heads:
            raise ModelConfigError("decoder_width not divisible by decoder_heads")
        if self.moae_position not in MOAE_POSITIONS:
            raise ModelConfigError(f"moae_position must be one of {MOAE_POSITIONS}")
        if not 0 <= self.moae_layers <= self.depth:
            raise ModelConfigError(f"moae_layers {self.moae_layers} outside [0, {self.depth}]")
        if self.moae_layers and not 1 <= self.top_k <= self.n_experts:
            raise ModelConfigError("top_k must be in [1, n_experts]")
        self.moae_layer_indices()

    @property
    def geometry(self) -> PatchGeometry:
        return PatchGeometry(self.tubelet_t, self.patch, self.patch, self.dim)

    @property
    def bottleneck(self) -> int:
        return self.dim // self.adapter_div

    @property
    def ffn_hidden(self) -> int:
        return self.dim * self.mlp_ratio

    @property
    def patch_dim(self) -> int:
        return self.geometry.patch_dim(self.channels)

    def moae_layer_indices(self) -> list[int]:
        m, depth = self.moae_layers, self.depth
        if m == 0:
            return []
        if self.moae_position == "early":
            return list(range(m))
        if self.moae_position == "later":
            return list(range(depth - m, depth))
        if self.moae_position == "middle":
            start = (depth - m) // 2
            return list(range(start, start + m))
        if 2 * m - 1 > depth:
            raise ModelConfigError(f"cannot alternate {m} MoAE layers in depth {depth}")
        return sorted(depth - 1 - 2 * j for j in range(m))

    def layer_kinds(self) -> list[str]:
        moae = set(self.moae_layer_indices())
        return ["moae" if i in moae else "standard" for i in range(self.depth)]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderOutput:
    latent: Tensor
    gates: list[tuple[int, GateDecision]] = field(default_factory=list)
    attention: list[np.ndarray] = field(default_factory=list)


def _xavier(rng, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Fresh parameter table; names are unique and stable across runs."""
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    d = cfg.dim

    def linear(name, fi, fo):
        p[f"{name}.w"] = _xavier(rng, fi, fo)
        p[f"{name}.b"] = np.zeros(fo)

    def norm(name, width):
        p[f"{name}.g"] = np.ones(width)
        p[f"{name}.b"] = np.zeros(width)

    def block(prefix, width, hidden):
        norm(f"{prefix}.ln1", width)
        for proj in ("q", "k", "v", "o"):
            linear(f"{prefix}.attn.{proj}", width, width)
        norm(f"{prefix}.ln2", width)
        linear(f"{prefix}.ffn.fc1", width, hidden)
        linear(f"{prefix}.ffn.fc2", hidden, width)

    linear("patch", cfg.patch_dim, d)
    for i, kind in enumerate(cfg.layer_kinds()):
        block(f"enc.{i}", d, cfg.ffn_hidden)
        if kind == "moae":
            r = cfg.bottleneck
            p[f"enc.{i}.moae.gate.w"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, cfg.n_experts))
            for j in range(cfg.n_experts):
                e = f"enc.{i}.moae.expert{j}"
                p[f"{e}.w1"] = _xavier(rng, d, r)
                p[f"{e}.b1"] = np.zeros(r)
                p[f"{e}.w2"] = rng.normal(0.0, 0.02, size=(r, d))
                p[f"{e}.b2"] = np.zeros(d)
    norm("enc.norm", d)

    dw = cfg.decoder_width
    linear("dec.embed", d, dw)
    p["dec.mask_token"] = rng.normal(0.0, 0.02, size=(dw,))
    for i in range(cfg.decoder_depth):
        block(f"dec.{i}", dw, dw * cfg.mlp_ratio)
    norm("dec.norm", dw)
    linear("dec.pred", dw, cfg.patch_dim)

    for head, n_cls in (("sfer", cfg.n_classes_sfer), ("dfer", cfg.n_classes_dfer)):
        if cfg.head_hidden:
            linear(f"head_{head}.fc1", d, cfg.head_hidden)
            linear(f"head_{head}.fc2", cfg.head_hidden, n_cls)
        else:
            linear(f"head_{head}.fc", d, n_cls)
    return {k: ad.parameter(v) for k, v in p.items()}


def count_params(params: dict[str, Tensor], prefix: str = "") -> int:
    return sum(t.size for k, t in params.items() if k.startswith(prefix))


def _linear(x: Tensor, params, name) -> Tensor:
    return x @ params[f"{name}.w"] + params[f"{name}.b"]


def _norm(x: Tensor, params, name) -> Tensor:
    return ad.layernorm(x, params[f"{name}.g"], params[f"{name}.b"])


def mhsa(x: Tensor, params, prefix: str, heads: int, attn_log: list | None = None) -> Tensor:
    b, n, d = x.shape
    dh = d // heads

    def split(t):
        return t.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)

    q = split(_linear(x, params, f"{prefix}.q"))
    k = split(_linear(x, params, f"{prefix}.k"))
    v = split(_linear(x, params, f"{prefix}.v"))
    att = ad.softmax(ad.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(dh)), axis=-1)
    if attn_log is not None:
        attn_log.append(att.data.mean(axis=1))
    out = (att @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    return _linear(out, params, f"{prefix}.o")


def ffn(x: Tensor, params, prefix: str, p_drop=0.0, rng=None, train=False) -> Tensor:
    h = ad.gelu(_linear(x, params, f"{prefix}.fc1"))
    h = ad.dropout(h, p_drop, rng, train)
    return _linear(h, params, f"{prefix}.fc2")


def standard_layer(x: Tensor, params, prefix: str, heads: int, p_drop=0.0, rng=None,
                   train=False, attn_log=None) -> Tensor:
    x = x + mhsa(_norm(x, params, f"{prefix}.ln1"), params, f"{prefix}.attn", heads, attn_log)
    return x + ffn(_norm(x, params, f"{prefix}.ln2"), params, f"{prefix}.ffn", p_drop, rng, train)


def layer_gate(params, prefix: str, cfg: ModelConfig, train: bool) -> tuple[GateParams, list[AdapterParams]]:
    gate = GateParams(params[f"{prefix}.moae.gate.w"], cfg.top_k, cfg.gate_sigma, train)
    experts = [AdapterParams(*(params[f"{prefix}.moae.expert{j}.{n}"] for n in ("w1", "b1", "w2", "b2")))
               for j in range(cfg.n_experts)]
    return gate, experts


def moae_layer(x: Tensor, params, prefix: str, cfg: ModelConfig, rng=None, train=False,
               attn_log=None, probe: dict | None = None) -> tuple[Tensor, GateDecision]:
    """x' = x + MHSA(LN(x)); out = x' + FFN(LN(x')) + MoAE(LN(x')), routed per token."""
    b, n, d = x.shape
    x1 = x + mhsa(_norm(x, params, f"{prefix}.ln1"), params, f"{prefix}.attn", cfg.heads, attn_log)
    shared = _norm(x1, params, f"{prefix}.ln2")
    x_g = ffn(shared, params, f"{prefix}.ffn", cfg.dropout, rng, train)
    gate, experts = layer_gate(params, prefix, cfg, train)
    x_s, decision = moae_forward(shared.reshape(b * n, d), gate, experts, rng)
    x_s = x_s.reshape(b, n, d)
    if probe is not None:
        probe.update(shared=shared, x_g=x_g, x_s=x_s, x1=x1)
    return x1 + x_g + x_s, decision


class S4DModel:
    """Parameter table plus the forward passes of both training stages."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    # -- tokens ---------------------------------------------------------------
    def tokenize(self, clips: np.ndarray) -> TokenBatch:
        return tokenize(clips, self.cfg.geometry, self.params["patch.w"], self.params["patch.b"])

    # -- encoder --------------------------------------------------------------
    def encode(self, tokens: Tensor, *, use_moae: bool = True, rng=None, train: bool = False,
               record_attention: bool = False) -> EncoderOutput:
        """Run all encoder layers on ``tokens [B, N, d]``; returns normalised latents and gate logs."""
        cfg = self.cfg
        out = EncoderOutput(tokens)
        attn_log = out.attention if record_attention else None
        x = tokens
        for i, kind in enumerate(cfg.layer_kinds()):
            prefix = f"enc.{i}"
            if kind == "moae" and use_moae:
                x, dec = moae_layer(x, self.params, prefix, cfg, rng, train, attn_log)
                out.gates.append((i, dec))
            else:
                x = standard_layer(x, self.params, prefix, cfg.heads, cfg.dropout, rng, train, attn_log)
        out.latent = _norm(x, self.params, "enc.norm")
        return out

    # -- decoder --------------------------------------------------------------
    def decode(self, latent: Tensor, visible_idx: np.ndarray, mask: MaskSpec,
               grid: tuple[int, int, int]) -> Tensor:
        """Predict tubelet pixels ``[B, N, patch_dim]`` for every grid position."""
        cfg, p = self.cfg, self.params
        b, nv, _ = latent.shape
        n = mask.n_tokens
        dw = cfg.decoder_width
        emb = _linear(latent, p, "dec.embed")
        flat = (np.arange(b)[:, None] * n + visible_idx).ravel()
        full = ad.scatter_rows(emb.reshape(b * nv, dw), flat, b * n, unique=True).reshape(b, n, dw)
        dropped = (np.atleast_2d(mask.keep) == 0)
        if dropped.any():
            full = full + p["dec.mask_token"] * ad.Tensor(dropped[..., None].astype(np.float64))
        x = full + ad.Tensor(position_codes(grid, dw))
        for i in range(cfg.decoder_depth):
            x = standard_layer(x, p, f"dec.{i}", cfg.decoder_heads)
        return _linear(_norm(x, p, "dec.norm"), p, "dec.pred")

    # -- fine-tuning ----------------------------------------------------------
    def embed(self, clips: np.ndarray, *, use_moae: bool = True, rng=None, train: bool = False,
              record_attention: bool = False) -> tuple[Tensor, EncoderOutput]:
        """Mean-pooled unified embedding ``[B, d]`` of unmasked clips."""
        tb = self.tokenize(clips)
        tokens = tb.tokens if tb.tokens.ndim == 3 else tb.tokens.reshape(1, *tb.tokens.shape)
        enc = self.encode(tokens, use_moae=use_moae, rng=rng, train=train,
                          record_attention=record_attention)
        return enc.latent.mean(axis=1), enc

    def classify(self, phi: Tensor, head: str) -> Tensor:
        if head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {head!r}")
        p = self.params
        if self.cfg.head_hidden:
            return _linear(ad.gelu(_linear(phi, p, f"head_{head}.fc1")), p, f"head_{head}.fc2")
        return _linear(phi, p, f"head_{head}.fc")

    def head_params(self, head: str) -> list[str]:
        return [k for k in self.params if k.startswith(f"head_{head}.")]

    def trainable(self, stage: str) -> dict[str, Tensor]:
        """Parameters that receive updates in ``stage`` ("pretrain" or "finetune")."""
        if stage == "pretrain":
            return {k: v for k, v in self.params.items()
                    if not k.startswith("head_") and ".moae." not in k}
        return {k: v for k, v in self.params.items() if not k.startswith("dec.")}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def load_matching(self, other: dict[str, Tensor], prefixes: Iterable[str] = ("patch.", "enc.")) -> list[str]:
        """Copy values for names present in both tables under ``prefixes``; returns copied names."""
        copied = []
        for k, v in other.items():
            if k in self.params and any(k.startswith(pf) for pf in prefixes):
                if self.params[k].shape != v.shape:
                    raise CheckpointError(f"{k}: shape {v.shape} vs {self.params[k].shape}")
                self.params[k].data = np.array(v.data, dtype=self.params[k].data.dtype)
                copied.append(k)
        return copied


# -------------------------------------------------------------- checkpoints

MAGIC = b"S4DC"
VERSION = 1


def save_checkpoint(path, params: dict[str, Tensor], meta: dict | None = None) -> None:
    """Write tensors as: magic, u16 version, u32 meta length + JSON, u32 count, then per tensor
    u16 name length, name, u8 rank, u32 dims, f32 payload (all little-endian)."""
    meta_b = json.dumps(meta or {}, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(meta_b)), meta_b, struct.pack("<I", len(params))]
    for name, t in params.items():
        nb = name.encode()
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        chunks.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, Tensor], dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    version, meta_len = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 10
    meta = json.loads(buf[off:off + meta_len].decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack_from("<B", buf, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=off).reshape(dims)
        off += nbytes
        if name in params:
            raise CheckpointError(f"{path}: duplicate tensor {name}")
        params[name] = ad.Tensor(arr.astype(np.float32), requires_grad=True)
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return params, meta


def model_from_checkpoint(path) -> S4DModel:
    params, meta = load_checkpoint(path)
    if "model" not in meta:
        raise CheckpointError(f"{path}: no model config in metadata")
    return S4DModel(ModelConfig(**meta["model"]), params)
