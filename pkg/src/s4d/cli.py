"""``s4d`` command line: synth, pretrain, finetune, eval, analyze, gradcheck."""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import analysis
from .backbone import MOAE_POSITIONS, ModelConfigError, S4DModel, load_checkpoint, model_from_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load
from .gradsuite import TOLERANCE, run_suite
from .patchify import grid_coords
from .synthdata import SynthSpec, gen_dynamic, gen_static, read_dataset, split, write_dataset
from .training import MetricsLog, finetune, pretrain


def threads() -> int:
    raw = os.environ.get("S4D_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"S4D_THREADS must be an integer, got {raw!r}") from None


def _stats(meta: dict) -> tuple[list[float], list[float]]:
    return meta["mean"], meta["std"]


def _model_config(cfg: RunConfig):
    m = dataclasses.replace(cfg.model, n_classes_sfer=cfg.synth.sfer_classes,
                            n_classes_dfer=cfg.synth.dfer_classes, image_size=cfg.synth.image_size,
                            channels=cfg.synth.channels)
    if cfg.baseline_mtl:
        m = dataclasses.replace(m, moae_layers=0)
    return m


def _echo(cfg: RunConfig, command: str) -> Path:
    run = cfg.run_dir
    run.mkdir(parents=True, exist_ok=True)
    cfg.write(run / f"config.{command}.txt")
    return run


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig) -> int:
    _echo(cfg, "synth")
    d = cfg.synth
    static = gen_static(SynthSpec(d.sfer_classes, d.sfer_per_class, d.image_size, 1, d.channels, d.noise,
                                  False, cfg.seed))
    dynamic = gen_dynamic(SynthSpec(d.dfer_classes, d.dfer_per_class, d.image_size, d.video_length, d.channels,
                                    d.noise, d.temporal_coding, cfg.seed + 1))
    s_tr, s_te = split(static, d.test_fraction, cfg.seed)
    d_tr, d_te = split(dynamic, d.test_fraction, cfg.seed)
    root = write_dataset(cfg.data_path, {("sfer", "train"): s_tr, ("sfer", "test"): s_te,
                                         ("dfer", "train"): d_tr, ("dfer", "test"): d_te},
                         {"label_map": dynamic.meta["label_map"]})
    print(f"wrote {len(s_tr)}+{len(s_te)} images and {len(d_tr)}+{len(d_te)} clips to {root}")
    return 0


def cmd_pretrain(cfg: RunConfig) -> int:
    run = _echo(cfg, "pretrain")
    images = read_dataset(cfg.data_path, "sfer", "train")
    videos = read_dataset(cfg.data_path, "dfer", "train")
    model = S4DModel(_model_config(cfg), seed=cfg.seed)
    log = MetricsLog(run / "metrics.pretrain.jsonl", cfg.wall_clock)
    losses = pretrain(model, images, videos, cfg.pretrain, _stats(images.meta), log, cfg.pretrain_image_prop)
    save_checkpoint(run / "pretrain.s4dc", model.params, {"model": model.cfg.to_dict(), "stage": "pretrain"})
    k = max(1, len(losses) // 10)
    summary = {"steps": len(losses), "loss_first": float(np.mean(losses[:k])),
               "loss_last": float(np.mean(losses[-k:]))}
    analysis.write_json(run / "pretrain.json", summary)
    print(f"pretrain: {summary['steps']} steps, loss {summary['loss_first']:.4f} -> {summary['loss_last']:.4f}")
    return 0


def cmd_finetune(cfg: RunConfig) -> int:
    run = _echo(cfg, "finetune")
    sfer = read_dataset(cfg.data_path, "sfer", "train")
    dfer = read_dataset(cfg.data_path, "dfer", "train")
    dfer_test = read_dataset(cfg.data_path, "dfer", "test")
    stats = _stats(sfer.meta)
    model = S4DModel(_model_config(cfg), seed=cfg.seed)
    ckpt = cfg.checkpoint or (str(run / "pretrain.s4dc") if (run / "pretrain.s4dc").exists() else "")
    if cfg.no_pretrain:
        source = "random init"
    elif ckpt:
        params, _ = load_checkpoint(ckpt)
        model.load_matching(params)
        source = ckpt
    else:
        raise ConfigError("finetune needs a stage-1 checkpoint (--checkpoint) or --no-pretrain")
    ckpt_dir = run / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    log = MetricsLog(run / "metrics.finetune.jsonl", cfg.wall_clock)
    workers = threads()
    result = finetune(model, sfer, dfer, cfg.finetune, stats, log, use_moae=not cfg.baseline_mtl,
                      evaluate=lambda m: analysis.evaluate(m, dfer_test, stats=stats, workers=workers).war,
                      out_dir=ckpt_dir)
    save_checkpoint(run / "finetune.s4dc", model.params, {"model": model.cfg.to_dict(), "stage": "finetune"})
    analysis.write_json(run / "finetune.json", {"init": source, "history": result.history,
                                                "best_war": result.best_war, "best_epoch": result.best_epoch})
    print(f"finetune from {source}: best dynamic WAR {result.best_war:.4f} at epoch {result.best_epoch}")
    return 0


def _load_eval_model(cfg: RunConfig) -> S4DModel:
    path = cfg.checkpoint or str(cfg.run_dir / "finetune.s4dc")
    if not Path(path).exists():
        raise ConfigError(f"checkpoint {path} not found")
    return model_from_checkpoint(path)


def cmd_eval(cfg: RunConfig) -> int:
    run = _echo(cfg, "eval")
    model = _load_eval_model(cfg)
    sfer = read_dataset(cfg.data_path, "sfer", "test")
    dfer = read_dataset(cfg.data_path, "dfer", "test")
    stats, lmap = _stats(sfer.meta), sfer.meta.get("label_map")
    workers = threads()
    reports = {
        "sfer_on_sfer": analysis.cross_task_eval(model, "sfer", sfer, lmap, stats, workers=workers),
        "dfer_on_dfer": analysis.cross_task_eval(model, "dfer", dfer, lmap, stats, workers=workers),
        "sfer_on_dfer": analysis.cross_task_eval(model, "sfer", dfer, lmap, stats, workers=workers),
        "dfer_on_sfer": analysis.cross_task_eval(model, "dfer", sfer, lmap, stats, workers=workers),
    }
    reports_dir = run / "reports"
    reports_dir.mkdir(exist_ok=True)
    for name, rep in reports.items():
        analysis.write_confusion_csv(reports_dir / f"confusion_{name}.csv", rep.confusion)
        print(f"{name}: UAR {rep.uar:.4f} WAR {rep.war:.4f} (n={rep.n_samples})")
    analysis.write_json(reports_dir / "eval.json", {k: r.to_dict() for k, r in reports.items()})
    return 0


def cmd_analyze(cfg: RunConfig) -> int:
    run = _echo(cfg, "analyze")
    model = _load_eval_model(cfg)
    sfer = read_dataset(cfg.data_path, "sfer", "test")
    dfer = read_dataset(cfg.data_path, "dfer", "test")
    stats, lmap = _stats(sfer.meta), sfer.meta.get("label_map")
    workers = threads()
    reports_dir = run / "reports"
    reports_dir.mkdir(exist_ok=True)

    n = model.cfg.n_classes_sfer
    emb_s = analysis.embeddings(model, sfer, stats, workers=workers)
    emb_d = analysis.embeddings(model, dfer, stats, workers=workers)
    y_d = analysis.to_shared(dfer.y, "dfer", lmap)
    sim = analysis.class_center_similarity(emb_s, sfer.y, emb_d, y_d, n)
    names = [str(i) for i in range(n)]
    analysis.write_matrix_csv(reports_dir / "class_center_similarity.csv", sim,
                              [f"sfer_{c}" for c in names], [f"dfer_{c}" for c in names])

    usages = [analysis.expert_usage(model, ds, ds.task, stats, workers=workers) for ds in (sfer, dfer)]
    analysis.write_usage_csv(reports_dir / "expert_usage.csv", usages)

    clip = dfer.x[0]
    maps = analysis.attention_export(model, clip, stats)
    grid = model.tokenize(clip[None, : model.cfg.clip_frames]).grid
    analysis.write_attention_csv(reports_dir / "attention.csv", maps, grid_coords(grid))

    summary = {
        "class_center_similarity": sim.tolist(),
        "diagonal_mean": float(np.mean(np.diag(sim))),
        "off_diagonal_mean": float((sim.sum() - np.trace(sim)) / max(n * n - n, 1)),
        "expert_usage": {u.dataset: {str(l): u.counts[l].tolist() for l in sorted(u.counts)} for u in usages},
    }
    analysis.write_json(reports_dir / "analysis.json", summary)
    print(f"class-center similarity: diagonal {summary['diagonal_mean']:.4f}, "
          f"off-diagonal {summary['off_diagonal_mean']:.4f}")
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    run = _echo(cfg, "gradcheck")
    t0 = time.perf_counter()
    results = run_suite(cfg.seed)
    ok = True
    for r in results:
        ok &= r.passed
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<18} rel.err {r.error:.3e}")
    analysis.write_json(run / "gradcheck.json", {
        "tolerance": TOLERANCE, "passed": ok, "seconds": round(time.perf_counter() - t0, 2),
        "results": {r.name: r.error for r in results}})
    return 0 if ok else 1


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "eval": cmd_eval,
            "analyze": cmd_analyze, "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="s4d", description="Unified image/video expression learning at desk scale.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="key = value file")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out-dir")
    ap.add_argument("--data-dir")
    ap.add_argument("--checkpoint")
    ap.add_argument("--no-pretrain", action="store_true")
    ap.add_argument("--moae-pos", choices=MOAE_POSITIONS)
    ap.add_argument("--experts", type=int)
    ap.add_argument("--moae-layers", type=int)
    ap.add_argument("--sfer-prop", type=float, help="fraction of static batches per fine-tuning epoch")
    ap.add_argument("--pretrain-image-prop", type=float, help="fraction of images used per pre-training epoch")
    ap.add_argument("--baseline-mtl", action="store_true", help="two heads, no MoAE layers")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    return ap


def overrides_from(args) -> dict[str, str]:
    flag_keys = {"seed": "seed", "out_dir": "out_dir", "data_dir": "data_dir", "checkpoint": "checkpoint",
                 "moae_pos": "model.moae_position", "experts": "model.n_experts",
                 "moae_layers": "model.moae_layers", "sfer_prop": "finetune.sfer_proportion",
                 "pretrain_image_prop": "pretrain_image_prop"}
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for attr, key in flag_keys.items():
        value = getattr(args, attr)
        if value is not None:
            out[key] = str(value)
    if args.no_pretrain:
        out["no_pretrain"] = "true"
    if args.baseline_mtl:
        out["baseline_mtl"] = "true"
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load(args.config, overrides_from(args))
        with threadpool_limits(limits=threads()):
            return COMMANDS[args.command](cfg)
    except (ConfigError, ModelConfigError, FileNotFoundError) as exc:
        print(f"s4d {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
