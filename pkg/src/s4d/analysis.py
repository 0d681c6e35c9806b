"""Evaluation metrics and the cross-task / embedding / routing diagnostics."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import S4DModel
from .synthdata import Dataset
from .training import prepare, sample_window, window_starts


@dataclass
class EvalReport:
    confusion: np.ndarray  # [true, pred]
    per_class_recall: list[float | None]
    uar: float
    war: float
    n_samples: int
    excluded: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"confusion": self.confusion.tolist(), "per_class_recall": self.per_class_recall,
                "uar": self.uar, "war": self.war, "n_samples": self.n_samples,
                "excluded_classes": self.excluded}


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.intp), np.asarray(y_pred, dtype=np.intp)), 1)
    return cm


def uar_war(confusion) -> tuple[float, float]:
    """Unweighted (mean per-class recall) and weighted (overall accuracy) average recall.

    Classes without true samples are left out of the UAR mean.
    """
    cm = np.asarray(confusion)
    if cm.size == 0 or cm.sum() == 0:
        raise ValueError("uar_war: empty confusion matrix")
    support = cm.sum(axis=1)
    diag = np.diag(cm)
    has = support > 0
    uar = float(np.mean(diag[has] / support[has]))
    war = float(diag.sum() / cm.sum())
    return uar, war


def report(confusion: np.ndarray) -> EvalReport:
    cm = np.asarray(confusion, dtype=np.int64)
    uar, war = uar_war(cm)
    support = cm.sum(axis=1)
    recall = [float(cm[i, i] / support[i]) if support[i] else None for i in range(cm.shape[0])]
    excluded = [i for i in range(cm.shape[0]) if support[i] == 0]
    return EvalReport(cm, recall, uar, war, int(cm.sum()), excluded)


def write_confusion_csv(path, cm: np.ndarray, labels: Sequence[str] | None = None) -> None:
    labels = list(labels) if labels is not None else [str(i) for i in range(cm.shape[0])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred"] + labels)
        for name, row in zip(labels, cm):
            w.writerow([name] + [int(v) for v in row])


# ---------------------------------------------------------------- forward passes


def _batches(n: int, size: int):
    return [np.arange(i, min(i + size, n)) for i in range(0, n, size)]


def _map(fn, items, workers: int):
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def head_logits(model: S4DModel, ds: Dataset, head: str, stats=None, batch: int = 64,
                n_clips: int = 2, workers: int = 1) -> np.ndarray:
    """Logits ``[n, classes]``; multi-frame clips average over ``n_clips`` uniform windows."""
    frames = model.cfg.clip_frames
    t = ds.x.shape[1]
    starts = window_starts(t, frames, n_clips) if t > 1 else [0]
    uniq = sorted(set(starts))

    def run(idx):
        total = None
        for s in starts if len(uniq) > 1 else uniq:
            clips = ds.x[idx] if t == 1 else np.stack([sample_window(c, frames, s) for c in ds.x[idx]])
            phi, _ = model.embed(prepare(clips, stats))
            lg = model.classify(phi, head).data.astype(np.float64)
            total = lg if total is None else total + lg
        return total / (len(starts) if len(uniq) > 1 else 1)

    return np.concatenate(_map(run, _batches(len(ds), batch), workers))


def embeddings(model: S4DModel, ds: Dataset, stats=None, batch: int = 64, workers: int = 1) -> np.ndarray:
    """Unified embeddings of every sample (first window for clips)."""
    frames = model.cfg.clip_frames

    def run(idx):
        clips = ds.x[idx]
        if clips.shape[1] > 1:
            clips = np.stack([sample_window(c, frames, 0) for c in clips])
        phi, _ = model.embed(prepare(clips, stats))
        return phi.data.astype(np.float64)

    return np.concatenate(_map(run, _batches(len(ds), batch), workers))


def to_shared(labels: np.ndarray, task: str, label_map: Sequence[int] | None) -> np.ndarray:
    """Map labels into the static-task vocabulary (dynamic labels go through ``label_map``)."""
    labels = np.asarray(labels)
    if task == "sfer" or label_map is None:
        return labels
    return np.asarray(label_map)[labels]


def evaluate(model: S4DModel, ds: Dataset, head: str | None = None, stats=None, batch: int = 64,
             workers: int = 1) -> EvalReport:
    """Ordinary evaluation: the dataset's own head on its own labels."""
    head = head or ds.task
    n = model.cfg.n_classes_sfer if head == "sfer" else model.cfg.n_classes_dfer
    pred = np.argmax(head_logits(model, ds, head, stats, batch, workers=workers), axis=1)
    return report(confusion_matrix(ds.y, pred, n))


def cross_task_eval(model: S4DModel, source_head: str, target: Dataset, label_map: Sequence[int] | None = None,
                    stats=None, batch: int = 64, workers: int = 1) -> EvalReport:
    """Score ``source_head`` on ``target`` through the shared encoder.

    Labels and predictions are compared in the static-task vocabulary; with the
    same head as the target's task this is ordinary evaluation.
    """
    if source_head == target.task:
        return evaluate(model, target, source_head, stats, batch, workers)
    pred = np.argmax(head_logits(model, target, source_head, stats, batch, workers=workers), axis=1)
    pred_shared = to_shared(pred, source_head, label_map)
    true_shared = to_shared(target.y, target.task, label_map)
    return report(confusion_matrix(true_shared, pred_shared, model.cfg.n_classes_sfer))


# ---------------------------------------------------------------- embedding geometry


def class_centers(emb: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    centers = np.full((n_classes, emb.shape[1]), np.nan)
    for c in range(n_classes):
        sel = labels == c
        if sel.any():
            centers[c] = emb[sel].mean(axis=0)
    return centers


def class_center_similarity(emb_a: np.ndarray, labels_a: np.ndarray, emb_b: np.ndarray,
                            labels_b: np.ndarray, n_classes: int) -> np.ndarray:
    """Cosine similarity between per-class mean embeddings of two sets ``[n_classes, n_classes]``."""
    ca = class_centers(emb_a, labels_a, n_classes)
    cb = class_centers(emb_b, labels_b, n_classes)
    na = ca / np.linalg.norm(ca, axis=1, keepdims=True)
    nb = cb / np.linalg.norm(cb, axis=1, keepdims=True)
    return np.clip(na @ nb.T, -1.0, 1.0)


def write_matrix_csv(path, mat: np.ndarray, rows: Sequence[str], cols: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + list(cols))
        for name, row in zip(rows, mat):
            w.writerow([name] + [repr(float(v)) for v in row])


# ---------------------------------------------------------------- expert routing


@dataclass
class ExpertUsage:
    """Per MoAE layer: selection counts and summed gate weight for every expert."""

    dataset: str
    k: int
    n_experts: int
    counts: dict[int, np.ndarray] = field(default_factory=dict)
    weight_sum: dict[int, np.ndarray] = field(default_factory=dict)
    n_tokens: dict[int, int] = field(default_factory=dict)

    def add(self, layer: int, weights: np.ndarray, selected: np.ndarray) -> None:
        if layer not in self.counts:
            self.counts[layer] = np.zeros(self.n_experts, dtype=np.int64)
            self.weight_sum[layer] = np.zeros(self.n_experts)
            self.n_tokens[layer] = 0
        self.counts[layer] += np.bincount(selected.ravel(), minlength=self.n_experts)
        self.weight_sum[layer] += weights.astype(np.float64).sum(axis=0)
        self.n_tokens[layer] += weights.shape[0]

    def merge(self, other: "ExpertUsage") -> "ExpertUsage":
        out = ExpertUsage(self.dataset, self.k, self.n_experts)
        for src in (self, other):
            for layer in src.counts:
                if layer not in out.counts:
                    out.counts[layer] = np.zeros(self.n_experts, dtype=np.int64)
                    out.weight_sum[layer] = np.zeros(self.n_experts)
                    out.n_tokens[layer] = 0
                out.counts[layer] += src.counts[layer]
                out.weight_sum[layer] += src.weight_sum[layer]
                out.n_tokens[layer] += src.n_tokens[layer]
        return out

    def mean_weight(self, layer: int) -> np.ndarray:
        return self.weight_sum[layer] / max(self.n_tokens[layer], 1)

    def rows(self):
        for layer in sorted(self.counts):
            mw = self.mean_weight(layer)
            for e in range(self.n_experts):
                yield self.dataset, layer, e, int(self.counts[layer][e]), float(mw[e])


def expert_usage(model: S4DModel, ds: Dataset, name: str | None = None, stats=None, batch: int = 64,
                 workers: int = 1) -> ExpertUsage:
    """Routing statistics over evaluation forwards (no gating noise)."""
    name = name or ds.task
    frames = model.cfg.clip_frames

    def run(idx):
        usage = ExpertUsage(name, model.cfg.top_k, model.cfg.n_experts)
        clips = ds.x[idx]
        if clips.shape[1] > 1:
            clips = np.stack([sample_window(c, frames, 0) for c in clips])
        _, enc = model.embed(prepare(clips, stats))
        for layer, dec in enc.gates:
            usage.add(layer, dec.weights, dec.selected)
        return usage

    total = ExpertUsage(name, model.cfg.top_k, model.cfg.n_experts)
    for part in _map(run, _batches(len(ds), batch), workers):
        total = total.merge(part)
    return total


def write_usage_csv(path, usages: Sequence[ExpertUsage]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "layer", "expert", "count", "mean_weight"])
        for u in usages:
            for r in u.rows():
                w.writerow([r[0], r[1], r[2], r[3], repr(r[4])])


# ---------------------------------------------------------------- attention


def attention_export(model: S4DModel, clip: np.ndarray, stats=None) -> list[np.ndarray]:
    """Head-averaged attention received by each token, per layer, under a uniform query.

    A proxy for the pooled representation's attention: rows of the attention
    matrix are averaged, giving one weight per token that sums to 1.
    """
    clips = clip[None] if clip.ndim == 4 else clip
    if clips.shape[1] > 1:
        clips = clips[:, : model.cfg.clip_frames]
    _, enc = model.embed(prepare(clips, stats), record_attention=True)
    return [att[0].mean(axis=0).astype(np.float64) for att in enc.attention]


def write_attention_csv(path, maps: Sequence[np.ndarray], coords: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "t", "h", "w", "weight"])
        for layer, m in enumerate(maps):
            for (t, h, ww), v in zip(coords, m):
                w.writerow([layer, int(t), int(h), int(ww), repr(float(v))])


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
