"""Synthetic stand-ins for static (image) and dynamic (video) expression corpora.

Every frame is a shared face-like template plus a class pattern: a vertical
intensity ramp whose slope is keyed to the class and a coloured blob whose row
is keyed to the class. Clips add a horizontal bar that drifts vertically and
wraps around. With temporal coding, classes ``2c`` and ``2c+1`` share pattern
``c`` and differ only in the bar's drift direction (the same frames played
forward or reversed), so no single frame identifies them.

All features are left-right symmetric, so horizontal flips never change a label.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

NTSR_MAGIC = b"NTSR"


@dataclass
class SynthSpec:
    n_classes: int = 6
    samples_per_class: int = 50
    image_size: int = 32
    clip_length: int = 8
    channels: int = 3
    noise: float = 0.05
    temporal_coding: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.temporal_coding and self.n_classes % 2:
            raise ValueError("temporal coding pairs classes; n_classes must be even")


@dataclass
class Dataset:
    """Clips ``x [n, T, H, W, C]`` in [0, 1] with integer labels."""

    x: np.ndarray
    y: np.ndarray
    task: str
    n_classes: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.task, self.n_classes, self.meta)


# ---------------------------------------------------------------- rendering


def _grid(size: int):
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, size), np.linspace(0.0, 1.0, size), indexing="ij")
    return yy, xx


def face_template(size: int, channels: int) -> np.ndarray:
    yy, xx = _grid(size)
    face = np.exp(-(((xx - 0.5) / 0.38) ** 2 + ((yy - 0.5) / 0.46) ** 2) ** 2)
    eyes = sum(np.exp(-(((xx - cx) ** 2 + (yy - 0.38) ** 2) / 0.004)) for cx in (0.33, 0.67))
    img = 0.25 * face - 0.12 * eyes
    return np.repeat(img[..., None], channels, axis=-1)


def class_color(c: int, n: int, channels: int) -> np.ndarray:
    ch = np.arange(channels)
    return 0.5 + 0.5 * np.cos(2.0 * np.pi * (c / max(n, 1) + ch / max(channels, 1)))


def render_pattern(ramp_class: int, blob_class: int, n_ramp: int, n_blob: int,
                   size: int, channels: int, amp: float = 1.0) -> np.ndarray:
    """Ramp slope keyed to ``ramp_class`` plus a blob whose row and colour follow ``blob_class``."""
    yy, xx = _grid(size)
    slope = -1.0 + 2.0 * ramp_class / (n_ramp - 1) if n_ramp > 1 else 0.0
    ramp = 0.15 * slope * (yy - 0.5) * 2.0
    row = 0.2 + 0.6 * blob_class / (n_blob - 1) if n_blob > 1 else 0.5
    blob = np.exp(-(((xx - 0.5) ** 2 + (yy - row) ** 2) / 0.012))
    color = class_color(blob_class, n_blob, channels)
    return amp * (ramp[..., None] + 0.3 * blob[..., None] * color)


def drifting_bar(size: int, length: int, phase: float, direction: int, channels: int) -> np.ndarray:
    """``[T, H, W, C]`` horizontal bar advancing ``size/length`` rows per frame, wrapping around."""
    rows = np.arange(size, dtype=np.float64)
    frames = []
    for t in range(length):
        centre = (phase + direction * t * size / length) % size
        dist = np.abs(rows - centre)
        dist = np.minimum(dist, size - dist)
        profile = 0.3 * np.exp(-(dist / 1.5) ** 2)
        frames.append(np.broadcast_to(profile[:, None, None], (size, size, channels)))
    return np.stack(frames)


def _finish(x: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    if noise > 0:
        x = x + rng.normal(0.0, noise, size=x.shape)
    return np.clip(x + 0.3, 0.0, 1.0).astype(np.float32)


def gen_static(spec: SynthSpec) -> Dataset:
    """Labelled single-frame clips ``[n, 1, H, W, C]``; class c shows pattern c."""
    rng = np.random.default_rng(spec.seed)
    s, ch = spec.image_size, spec.channels
    tmpl = face_template(s, ch)
    xs, ys = [], []
    for c in range(spec.n_classes):
        for _ in range(spec.samples_per_class):
            amp = rng.uniform(0.8, 1.2) if spec.noise > 0 else 1.0
            bar = drifting_bar(s, 1, rng.uniform(0, s), 1, ch)[0] if spec.noise > 0 else 0.0
            img = tmpl + render_pattern(c, c, spec.n_classes, spec.n_classes, s, ch, amp) + bar
            xs.append(_finish(img, spec.noise, rng)[None])
            ys.append(c)
    return _shuffled(Dataset(np.stack(xs), np.array(ys), "sfer", spec.n_classes), rng)


def gen_dynamic(spec: SynthSpec) -> Dataset:
    """Labelled clips ``[n, T, H, W, C]``.

    Without temporal coding, class j shows pattern j and a bar drifting in a
    random direction. With temporal coding, classes 2c / 2c+1 show pattern c;
    the clip is rendered with a downward drift and reversed in time for 2c+1.
    """
    rng = np.random.default_rng(spec.seed)
    s, ch, length = spec.image_size, spec.channels, spec.clip_length
    tmpl = face_template(s, ch)
    n_patterns = spec.n_classes // 2 if spec.temporal_coding else spec.n_classes
    xs, ys = [], []
    for j in range(spec.n_classes):
        pat = j // 2 if spec.temporal_coding else j
        for _ in range(spec.samples_per_class):
            amp = rng.uniform(0.8, 1.2) if spec.noise > 0 else 1.0
            phase = rng.uniform(0, s) if spec.noise > 0 else 0.0
            direction = 1 if spec.temporal_coding else int(rng.choice([-1, 1]))
            still = tmpl + render_pattern(pat, pat, n_patterns, n_patterns, s, ch, amp)
            clip = still[None] + drifting_bar(s, length, phase, direction, ch)
            clip = _finish(clip, spec.noise, rng)
            if spec.temporal_coding and j % 2:
                clip = clip[::-1].copy()
            xs.append(clip)
            ys.append(j)
    meta = {"label_map": label_map(spec)}
    return _shuffled(Dataset(np.stack(xs), np.array(ys), "dfer", spec.n_classes, meta), rng)


def gen_conflicting(n_classes: int, samples: int, image_size: int = 32, clip_length: int = 8,
                    channels: int = 3, noise: float = 0.05, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Same content shown as an image (labelled by blob row) and as a still clip (labelled by ramp slope).

    Both labels are drawn independently, so the two tasks need different
    features of identical inputs.
    """
    rng = np.random.default_rng(seed)
    tmpl = face_template(image_size, channels)
    imgs, clips, ya, yb = [], [], [], []
    for _ in range(samples):
        a, b = int(rng.integers(n_classes)), int(rng.integers(n_classes))
        frame = tmpl + render_pattern(b, a, n_classes, n_classes, image_size, channels,
                                      rng.uniform(0.8, 1.2))
        frame = _finish(frame, noise, rng)
        imgs.append(frame[None])
        clips.append(np.repeat(frame[None], clip_length, axis=0))
        ya.append(a)
        yb.append(b)
    return (Dataset(np.stack(imgs), np.array(ya), "sfer", n_classes),
            Dataset(np.stack(clips), np.array(yb), "dfer", n_classes))


def label_map(spec: SynthSpec) -> list[int]:
    """Static class for every dynamic class (pairs collapse under temporal coding)."""
    if spec.temporal_coding:
        return [j // 2 for j in range(spec.n_classes)]
    return list(range(spec.n_classes))


def _shuffled(ds: Dataset, rng: np.random.Generator) -> Dataset:
    return ds.subset(rng.permutation(len(ds)))


def split(ds: Dataset, test_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified train/test split."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(ds.y):
        idx = rng.permutation(np.flatnonzero(ds.y == c))
        n_test = int(round(test_fraction * idx.size))
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return ds.subset(np.sort(train)), ds.subset(np.sort(test))


def channel_stats(*datasets: Dataset) -> tuple[list[float], list[float]]:
    """Per-channel mean and std over all pixels (float64 accumulation)."""
    c = datasets[0].x.shape[-1]
    flat = np.concatenate([d.x.reshape(-1, c).astype(np.float64) for d in datasets])
    return flat.mean(axis=0).tolist(), flat.std(axis=0).tolist()


def standardize(x: np.ndarray, mean, std) -> np.ndarray:
    return ((x - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)).astype(np.float32)


# ---------------------------------------------------------------- file format


def write_tensor(path, arr: np.ndarray) -> None:
    """NTSR file: magic, u8 rank, u32 LE dims, f32 LE row-major payload. Written atomically."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = NTSR_MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header + arr.tobytes())
    os.replace(tmp, path)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != NTSR_MAGIC:
        raise ValueError(f"{path}: not an NTSR file")
    rank = buf[4]
    dims = struct.unpack_from(f"<{rank}I", buf, 5)
    off = 5 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) != off + 4 * count:
        raise ValueError(f"{path}: payload size mismatch")
    return np.frombuffer(buf, dtype="<f4", offset=off, count=count).reshape(dims).astype(np.float32)


def write_dataset(root, splits: dict[tuple[str, str], Dataset], meta: dict | None = None) -> Path:
    """Write ``{(task, split): Dataset}`` as NTSR files plus ``manifest.csv`` and ``meta.json``.

    ``meta.json`` carries the per-channel normalisation statistics (from the
    train splits), class counts and the dynamic-to-static label map.
    """
    root = Path(root)
    rows = []
    for (task, part), ds in sorted(splits.items()):
        sub = root / task / part
        sub.mkdir(parents=True, exist_ok=True)
        for i in range(len(ds)):
            rel = f"{task}/{part}/{i:05d}.ntsr"
            write_tensor(root / rel, ds.x[i])
            rows.append((rel, int(ds.y[i]), task, part))
    tmp = root / "manifest.csv.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label", "task", "split"])
        w.writerows(rows)
    os.replace(tmp, root / "manifest.csv")
    train = [ds for (task, part), ds in splits.items() if part == "train"]
    mean, std = channel_stats(*(train or list(splits.values())))
    full_meta = {"mean": mean, "std": std,
                 "n_classes": {task: ds.n_classes for (task, _), ds in splits.items()}}
    full_meta.update(meta or {})
    (root / "meta.json").write_text(json.dumps(full_meta, indent=2, sort_keys=True) + "\n")
    return root


def read_dataset(root, task: str, part: str) -> Dataset:
    root = Path(root)
    meta = json.loads((root / "meta.json").read_text())
    xs, ys = [], []
    with open(root / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            if row["task"] == task and row["split"] == part:
                xs.append(read_tensor(root / row["path"]))
                ys.append(int(row["label"]))
    if not xs:
        raise FileNotFoundError(f"no {task}/{part} entries in {root / 'manifest.csv'}")
    return Dataset(np.stack(xs), np.array(ys), task, meta["n_classes"][task], meta)


def synth_spec_dict(spec: SynthSpec) -> dict:
    return asdict(spec)
