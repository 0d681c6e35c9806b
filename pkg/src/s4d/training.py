"""Stage-1 masked pre-training and stage-2 joint fine-tuning."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import S4DModel, save_checkpoint
from .masking import apply_mask, masked_mse, sample_mask
from .moae import importance_loss
from .patchify import extract_patches, replicate_image
from .synthdata import Dataset, read_tensor, standardize

SFER, DFER = 0, 1
HEAD_FOR_ALPHA = {SFER: "sfer", DFER: "dfer"}

# reference constants of the full-scale setup
REF_LR_BASE = 1.6e-3
REF_BATCH = 384
REF_BETAS = (0.9, 0.95)
REF_WEIGHT_DECAY = 0.05
REF_FINETUNE_LR = 4e-5
MASK_RATIO = {"video": 0.95, "image": 0.90}


class DivergenceError(RuntimeError):
    """Raised when a training loss becomes non-finite."""


@dataclass
class TrainConfig:
    lr_base: float = 1.6e-2
    batch_size: int = 32
    batch_size_sfer: int = 64
    betas: tuple[float, float] = REF_BETAS
    weight_decay: float = REF_WEIGHT_DECAY
    eps: float = 1e-8
    epochs: int = 10
    steps: int = 0
    warmup_frac: float = 0.1
    schedule: str = "cosine"
    seed: int = 0
    sfer_proportion: float = 0.5
    mask_ratio_video: float = MASK_RATIO["video"]
    mask_ratio_image: float = MASK_RATIO["image"]
    loss_denominator: str = "masked"
    scale_lr: bool = True
    hflip: bool = True
    load_balance: float = 0.0
    grad_isolation_check: bool = True

    def __post_init__(self):
        if not 0.0 <= self.sfer_proportion <= 1.0:
            raise ValueError(f"sfer_proportion must be in [0, 1], got {self.sfer_proportion}")
        if self.lr_base <= 0:
            raise ValueError("lr_base must be positive")

    @property
    def lr(self) -> float:
        return compute_lr(self.lr_base, self.batch_size) if self.scale_lr else self.lr_base


@dataclass
class BatchSource:
    """One single-source mini-batch: ``alpha`` 0 = static (SFER), 1 = dynamic (DFER)."""

    alpha: int
    indices: np.ndarray


def compute_lr(lr_base: float, batch_size: int) -> float:
    """Linear scaling ``lr_base * batch_size / 512``, evaluated in decimal so 1.6e-3 @ 384 is 1.2e-3."""
    return float(Decimal(repr(float(lr_base))) * batch_size / 512)


def lr_at(step: int, total: int, peak: float, warmup: int, kind: str = "cosine", min_lr: float = 0.0) -> float:
    """Linear warmup to ``peak`` at step ``warmup``, then cosine decay reaching ``min_lr`` at the last step."""
    if kind == "constant":
        return peak
    if step < warmup:
        return peak * (step + 1) / (warmup + 1)
    span = max(total - 1 - warmup, 1)
    progress = min((step - warmup) / span, 1.0)
    return min_lr + 0.5 * (peak - min_lr) * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay; decay skips 1-d tensors (biases, norms, tokens)."""

    def __init__(self, params: dict[str, Tensor], lr: float, betas=REF_BETAS,
                 weight_decay: float = REF_WEIGHT_DECAY, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.wd = weight_decay
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.wd and p.data.ndim >= 2:
                p.data *= 1.0 - self.lr * self.wd
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class MetricsLog:
    """JSON-lines metrics: ``{stage, epoch, step, source, loss, lr, wall_ms}`` per step.

    With ``wall_clock=False`` the ``wall_ms`` field is written as 0 so repeated
    runs produce identical files.
    """

    def __init__(self, path: str | Path | None, wall_clock: bool = True):
        self.path = Path(path) if path else None
        self.wall_clock = wall_clock
        self.records: list[dict] = []
        self._t0 = time.perf_counter()
        if self.path:
            self.path.write_text("")

    def log(self, **rec) -> None:
        rec = {k: rec.get(k) for k in ("stage", "epoch", "step", "source", "loss", "lr")} | {
            k: v for k, v in rec.items() if k not in ("stage", "epoch", "step", "source", "loss", "lr")}
        rec["wall_ms"] = int((time.perf_counter() - self._t0) * 1000) if self.wall_clock else 0
        self.records.append(rec)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")


def _check_finite(loss: Tensor, where: dict, dump_dir: Path | None) -> float:
    value = float(loss.data)
    if not math.isfinite(value):
        if dump_dir is not None:
            (dump_dir / "divergence.json").write_text(json.dumps(where | {"loss": repr(value)}, indent=2))
        raise DivergenceError(f"non-finite loss {value} at {where}")
    return value


def prepare(clips: np.ndarray, stats: tuple | None) -> np.ndarray:
    return clips if stats is None else standardize(clips, *stats)


# ---------------------------------------------------------------- stage 1


def pretrain_step(model: S4DModel, opt: AdamW, clips: np.ndarray, modality: str, cfg: TrainConfig,
                  rng: np.random.Generator, lr: float | None = None) -> tuple[float, int]:
    """One masked-reconstruction update on standardised clips; returns (loss, visible tokens per clip)."""
    ratio = cfg.mask_ratio_video if modality == "video" else cfg.mask_ratio_image
    geom = model.cfg.geometry
    full = replicate_image(clips, geom) if clips.shape[1] == 1 else clips
    tb = model.tokenize(full)
    mask = sample_mask(tb.n_tokens, ratio, rng, batch=clips.shape[0])
    visible, vis_idx = apply_mask(tb.tokens, mask)
    enc = model.encode(visible, use_moae=False, rng=rng, train=True)
    pred = model.decode(enc.latent, vis_idx, mask, tb.grid)
    loss = masked_mse(pred, extract_patches(full, geom), mask, cfg.loss_denominator)
    value = _check_finite(loss, {"stage": "pretrain", "modality": modality}, None)
    opt.zero_grad()
    loss.backward()
    if lr is not None:
        opt.lr = lr
    opt.step()
    return value, visible.shape[1]


def reconstruction_loss(model: S4DModel, clips: np.ndarray, modality: str, cfg: TrainConfig,
                        seed: int = 0) -> float:
    """Masked loss on a fixed mask draw, without updating anything."""
    ratio = cfg.mask_ratio_video if modality == "video" else cfg.mask_ratio_image
    full = replicate_image(clips, model.cfg.geometry) if clips.shape[1] == 1 else clips
    tb = model.tokenize(full)
    mask = sample_mask(tb.n_tokens, ratio, np.random.default_rng(seed), batch=clips.shape[0])
    visible, vis_idx = apply_mask(tb.tokens, mask)
    pred = model.decode(model.encode(visible, use_moae=False).latent, vis_idx, mask, tb.grid)
    return float(masked_mse(pred, extract_patches(full, model.cfg.geometry), mask, cfg.loss_denominator).data)


def pretrain_schedule(n_images: int, n_videos: int, batch: int, image_proportion: float,
                      rng: np.random.Generator) -> list[tuple[str, np.ndarray]]:
    """Single-modality batches over all videos and an ``image_proportion`` subset of images, shuffled."""
    vids = rng.permutation(n_videos)
    imgs = rng.permutation(n_images)[: int(round(image_proportion * n_images))]
    batches = [("video", vids[i:i + batch]) for i in range(0, len(vids), batch)]
    batches += [("image", imgs[i:i + batch]) for i in range(0, len(imgs), batch)]
    return [batches[i] for i in rng.permutation(len(batches))]


def pretrain(model: S4DModel, images: Dataset | None, videos: Dataset | None, cfg: TrainConfig,
             stats: tuple | None = None, log: MetricsLog | None = None,
             image_proportion: float = 1.0, on_epoch: Callable | None = None) -> list[float]:
    """Stage 1. Runs ``cfg.steps`` updates if set, otherwise ``cfg.epochs`` passes."""
    rng = np.random.default_rng(cfg.seed)
    n_img = len(images) if images is not None else 0
    n_vid = len(videos) if videos is not None else 0
    per_epoch = len(pretrain_schedule(n_img, n_vid, cfg.batch_size, image_proportion,
                                      np.random.default_rng(0)))
    total = cfg.steps or cfg.epochs * per_epoch
    opt = AdamW(model.trainable("pretrain"), cfg.lr, cfg.betas, cfg.weight_decay, cfg.eps)
    warmup = int(cfg.warmup_frac * total)
    losses: list[float] = []
    step, epoch = 0, 0
    while step < total:
        for modality, idx in pretrain_schedule(n_img, n_vid, cfg.batch_size, image_proportion, rng):
            if step >= total:
                break
            ds = images if modality == "image" else videos
            clips = prepare(ds.x[idx], stats)
            lr = lr_at(step, total, cfg.lr, warmup, cfg.schedule)
            loss, _ = pretrain_step(model, opt, clips, modality, cfg, rng, lr)
            losses.append(loss)
            if log:
                log.log(stage="pretrain", epoch=epoch, step=step, source=modality, loss=loss, lr=lr)
            step += 1
        if on_epoch:
            on_epoch(epoch, model)
        epoch += 1
    return losses


# ---------------------------------------------------------------- stage 2


def joint_loss(logits: Tensor, labels: np.ndarray, alpha: int) -> Tensor:
    """``(1 - alpha) * CE_sfer + alpha * CE_dfer`` for a single-source batch.

    ``logits`` come from the head matching ``alpha``; the other term is zero
    and not part of the graph, so the idle head gets no gradient.
    """
    if alpha not in (SFER, DFER):
        raise ValueError(f"alpha must be 0 or 1, got {alpha}")
    return ad.cross_entropy(logits, labels)


def epoch_schedule(sfer_size: int, dfer_size: int, p: float, seed, batch_dfer: int,
                   batch_sfer: int | None = None) -> list[BatchSource]:
    """All dynamic batches plus a fresh random ``p`` fraction of the static set, interleaved at random."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"proportion must be in [0, 1], got {p}")
    batch_sfer = batch_sfer or batch_dfer
    rng = np.random.default_rng(seed)
    dfer = rng.permutation(dfer_size)
    sfer = rng.permutation(sfer_size)[: int(round(p * sfer_size))]
    batches = [BatchSource(DFER, dfer[i:i + batch_dfer]) for i in range(0, len(dfer), batch_dfer)]
    batches += [BatchSource(SFER, sfer[i:i + batch_sfer]) for i in range(0, len(sfer), batch_sfer)]
    return [batches[i] for i in rng.permutation(len(batches))]


def sample_window(clip: np.ndarray, frames: int, start: int) -> np.ndarray:
    """``frames`` consecutive frames from ``start``; shorter clips are looped to length."""
    n = clip.shape[0]
    return clip[(start + np.arange(frames)) % n] if n < frames else clip[start:start + frames]


def random_windows(clips: np.ndarray, frames: int, rng) -> np.ndarray:
    n = clips.shape[1]
    if n == frames or clips.shape[1] == 1:
        return clips
    if n < frames:
        return np.stack([sample_window(c, frames, 0) for c in clips])
    starts = rng.integers(0, n - frames + 1, size=clips.shape[0])
    return np.stack([c[s:s + frames] for c, s in zip(clips, starts)])


def hflip(clips: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    flip = rng.random(clips.shape[0]) < 0.5
    out = clips.copy()
    out[flip] = out[flip][:, :, :, ::-1]
    return out


@dataclass
class TaskMeter:
    loss_sum: float = 0.0
    batches: int = 0
    correct: int = 0
    seen: int = 0

    def merge(self, other: "TaskMeter") -> "TaskMeter":
        return TaskMeter(self.loss_sum + other.loss_sum, self.batches + other.batches,
                         self.correct + other.correct, self.seen + other.seen)

    @property
    def accuracy(self) -> float:
        return self.correct / self.seen if self.seen else float("nan")


@dataclass
class FinetuneState:
    opt: AdamW
    step: int = 0
    total: int = 1
    warmup: int = 0
    peak_lr: float = 1e-3


def finetune_epoch(model: S4DModel, state: FinetuneState, schedule: list[BatchSource],
                   sfer: Dataset | None, dfer: Dataset | None, cfg: TrainConfig,
                   rng: np.random.Generator, stats: tuple | None = None, epoch: int = 0,
                   log: MetricsLog | None = None, use_moae: bool = True) -> dict[str, TaskMeter]:
    """One pass over ``schedule`` with the alpha-toggled loss; cosine lr with warmup."""
    meters = {"sfer": TaskMeter(), "dfer": TaskMeter()}
    heads = {h: model.head_params(h) for h in ("sfer", "dfer")}
    for bs in schedule:
        head = HEAD_FOR_ALPHA[bs.alpha]
        ds = sfer if bs.alpha == SFER else dfer
        clips = ds.x[bs.indices]
        if bs.alpha == DFER:
            clips = random_windows(clips, model.cfg.clip_frames, rng)
        if cfg.hflip:
            clips = hflip(clips, rng)
        labels = ds.y[bs.indices]
        phi, enc = model.embed(prepare(clips, stats), use_moae=use_moae, rng=rng, train=True)
        logits = model.classify(phi, head)
        loss = joint_loss(logits, labels, bs.alpha)
        if cfg.load_balance > 0 and enc.gates:
            aux = importance_loss(dec for _, dec in enc.gates)
            loss = loss + ad.scale(aux, cfg.load_balance)
        value = _check_finite(loss, {"stage": "finetune", "epoch": epoch, "step": state.step}, None)
        state.opt.zero_grad()
        loss.backward()
        if cfg.grad_isolation_check:
            idle = heads["dfer" if head == "sfer" else "sfer"]
            if any(model.params[k].grad is not None and np.any(model.params[k].grad) for k in idle):
                raise AssertionError(f"{head} batch produced gradient on the other head")
        lr = lr_at(state.step, state.total, state.peak_lr, state.warmup, cfg.schedule)
        state.opt.lr = lr
        state.opt.step()
        m = meters[head]
        m.loss_sum += value
        m.batches += 1
        m.correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
        m.seen += len(labels)
        if log:
            log.log(stage="finetune", epoch=epoch, step=state.step, source=head, loss=value, lr=lr)
        state.step += 1
    return meters


@dataclass
class FinetuneResult:
    history: list[dict] = field(default_factory=list)
    best_war: float = -1.0
    best_epoch: int = -1


def finetune(model: S4DModel, sfer: Dataset | None, dfer: Dataset | None, cfg: TrainConfig,
             stats: tuple | None = None, log: MetricsLog | None = None, use_moae: bool = True,
             evaluate: Callable[[S4DModel], float] | None = None,
             out_dir: Path | None = None) -> FinetuneResult:
    """Stage 2 over ``cfg.epochs``; checkpoints each epoch and at the best dynamic-task WAR."""
    rng = np.random.default_rng(cfg.seed)
    n_s = len(sfer) if sfer is not None else 0
    n_d = len(dfer) if dfer is not None else 0
    p = cfg.sfer_proportion if sfer is not None else 0.0
    per_epoch = len(epoch_schedule(n_s, n_d, p, 0, cfg.batch_size, cfg.batch_size_sfer))
    total = cfg.epochs * per_epoch
    opt = AdamW(model.trainable("finetune"), cfg.lr, cfg.betas, cfg.weight_decay, cfg.eps)
    state = FinetuneState(opt, 0, total, int(cfg.warmup_frac * total), cfg.lr)
    result = FinetuneResult()
    meta = {"model": model.cfg.to_dict()}
    for epoch in range(cfg.epochs):
        sched = epoch_schedule(n_s, n_d, p, [cfg.seed, epoch], cfg.batch_size, cfg.batch_size_sfer)
        meters = finetune_epoch(model, state, sched, sfer, dfer, cfg, rng, stats, epoch, log, use_moae)
        rec = {"epoch": epoch, **{f"{h}_train_acc": m.accuracy for h, m in meters.items() if m.seen}}
        if evaluate is not None:
            war = evaluate(model)
            rec["dfer_war"] = war
            if war > result.best_war:
                result.best_war, result.best_epoch = war, epoch
                if out_dir:
                    save_checkpoint(out_dir / "best.s4dc", model.params, meta | {"epoch": epoch})
        if out_dir:
            save_checkpoint(out_dir / f"epoch{epoch:03d}.s4dc", model.params, meta | {"epoch": epoch})
        result.history.append(rec)
    return result


# ---------------------------------------------------------------- inference


def window_starts(n_frames: int, window: int, n_clips: int = 2) -> list[int]:
    """Starts of ``n_clips`` windows spread uniformly over the video (first and last when two)."""
    if n_frames <= window:
        return [0] * n_clips
    if n_clips == 1:
        return [(n_frames - window) // 2]
    return [int(round(i * (n_frames - window) / (n_clips - 1))) for i in range(n_clips)]


def video_logits(model: S4DModel, clip: np.ndarray, head: str = "dfer", n_clips: int = 2,
                 stats: tuple | None = None) -> np.ndarray:
    """Average of the head's logits over uniformly placed temporal windows of one video."""
    frames = model.cfg.clip_frames
    if clip.shape[0] == 1:
        windows = clip[None]
    else:
        windows = np.stack([sample_window(clip, frames, s) for s in window_starts(clip.shape[0], frames, n_clips)])
    phi, _ = model.embed(prepare(windows, stats))
    logits = model.classify(phi, head).data.astype(np.float64)
    return logits.sum(axis=0) / len(windows)


def infer_video(clip_path, model: S4DModel, stats: tuple | None = None, n_clips: int = 2) -> int:
    """Predicted dynamic class for the video stored at ``clip_path`` (ties -> lower index)."""
    logits = video_logits(model, read_tensor(clip_path), "dfer", n_clips, stats)
    return int(np.argmax(logits))
