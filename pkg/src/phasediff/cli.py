"""Command-line orchestration.

Subcommands: gen-data, train, infer, eval, uncertainty, ablate, info.
Every run directory archives the exact configuration, seeds and build id
(run.json), so any artifact is re-creatable from the directory alone.
Wall-clock measurements go to timing sidecars; all other outputs are
bit-deterministic for a fixed config and seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import _kernels as K
from . import rng as prng
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_to_dict, load_config
from .data import (
    BackgroundMode,
    Corpus,
    apply_background_mode,
    apply_label_dropout,
    build_meta_set,
    class_frequencies,
    generate,
    load_corpus,
    save_corpus,
)
from .diffusion import infer_video
from .errors import CheckpointError, ConfigError, DataError, PhasediffError
from .evaluation import frame_metrics, ribbon, ribbon_csv, uncertainty_report
from .meta_opt import ModelState, frame_weight_report, init_model_state, train
from .networks import EncoderSpec, PredictorSpec, WeightNetSpec
from .schedule import build_linear_schedule
from .diffusion import TrajectorySet

_FMT = ".17g"


def build_id() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).parent)
        if out.returncode == 0 and out.stdout.strip():
            return f"phasediff-{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"phasediff-{__version__}"


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _archive_run(out: Path, command: str, cfg: RunConfig | None, seed: int, extra=None) -> None:
    _write_json(out / "run.json", {
        "command": command,
        "config": config_to_dict(cfg) if cfg is not None else None,
        "seed": int(seed),
        "build_id": build_id(),
        "kernel_backend": K.backend(),
        "extra": extra or {},
    })


def _config_for(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = int(args.seed)
    cfg.validate()
    return cfg


def _prepared_corpus(cfg: RunConfig, corpus: Corpus) -> Corpus:
    corpus = apply_background_mode(corpus, BackgroundMode(cfg.background_mode))
    if cfg.label_dropout > 0.0:
        corpus = apply_label_dropout(corpus, cfg.label_dropout,
                                     prng.spawn_seed(cfg.seed, "label-dropout"))
    return corpus


def _specs(cfg: RunConfig, corpus: Corpus):
    enc = EncoderSpec(corpus.feature_dim, corpus.classes, cfg.networks.hidden)
    pred = PredictorSpec(corpus.classes, cfg.networks.predictor_width)
    wnet = WeightNetSpec(cfg.networks.weightnet_hidden)
    return enc, pred, wnet


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _config_for(args)
    if args.seed is not None:
        cfg.gen = dataclasses.replace(cfg.gen, synth=dataclasses.replace(cfg.gen.synth, seed=int(args.seed)))
    out = Path(args.out)
    g = cfg.gen
    total = g.train_videos + g.test_videos + g.val_videos
    videos = generate(g.synth, total)
    splits = {}
    for i, v in enumerate(videos):
        if i < g.train_videos:
            splits[v.video_id] = "train"
        elif i < g.train_videos + g.test_videos:
            splits[v.video_id] = "test"
        else:
            splits[v.video_id] = "val"
    corpus = Corpus(g.synth.classes, g.synth.feature_dim, g.synth.fps, videos, splits)
    save_corpus(corpus, out)

    counts = class_frequencies(videos, g.synth.classes)
    summary = {
        "videos": total,
        "frames": int(sum(v.length for v in videos)),
        "class_frames": [int(c) for c in counts],
        "empirical_imbalance": float(np.max(counts) / max(np.min(counts), 1)),
        "configured_imbalance": float(g.synth.imbalance),
    }
    _write_json(out / "summary.json", summary)
    _archive_run(out, "gen-data", cfg, cfg.seed)
    print(f"wrote {total} videos to {out} "
          f"(imbalance {summary['empirical_imbalance']:.2f} vs configured {g.synth.imbalance:.2f})")
    return 0


def _train_once(cfg: RunConfig, corpus: Corpus, out: Path, resume: str | None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    corpus = _prepared_corpus(cfg, corpus)
    sched = build_linear_schedule(cfg.schedule.timesteps, cfg.schedule.beta_start,
                                  cfg.schedule.beta_end)
    sched_desc = {"timesteps": cfg.schedule.timesteps, "beta_start": cfg.schedule.beta_start,
                  "beta_end": cfg.schedule.beta_end}

    rng_state = None
    if resume:
        ms, ck_sched, rng_state, _ = load_checkpoint(resume)
        if ck_sched != sched_desc:
            raise CheckpointError(f"checkpoint schedule {ck_sched} != config {sched_desc}")
        enc, pred, wnet = _specs(cfg, corpus)
        if (ms.enc_spec, ms.pred_spec, ms.wnet_spec) != (enc, pred, wnet):
            raise CheckpointError("checkpoint network dimensions do not match the config/corpus")
    else:
        enc, pred, wnet = _specs(cfg, corpus)
        ms = init_model_state(enc, pred, wnet, cfg.seed, cfg.trainer.optimizer)
        if cfg.precision == "float32":
            ms.theta.data = ms.theta.data.astype(np.float32)
            ms.w.data = ms.w.data.astype(np.float32)

    meta_set = None
    if cfg.trainer.use_mlo:
        meta_set = build_meta_set(corpus.split("train"), corpus.classes, cfg.meta_quota,
                                  prng.spawn_seed(cfg.seed, "meta"))
        _write_json(out / "meta_set.json", {
            "quota": meta_set.quota,
            "seed": meta_set.seed,
            "per_class": {str(k): v for k, v in meta_set.per_class.items()},
            "exhausted": list(meta_set.exhausted),
            "frames": [[f.video_index, f.frame_index, f.label] for f in meta_set.frames],
        })

    extra = {"use_cdm": cfg.trainer.use_cdm, "use_mlo": cfg.trainer.use_mlo,
             "decision_rule": cfg.inference.decision_rule}

    saver_state = {"rng": rng_state}

    def on_step(model, record, state):
        saver_state["rng"] = state
        if cfg.checkpoint_every and model.step % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"checkpoint_step{model.step}.ckpt", model, sched_desc,
                            state, extra)

    logs, final_state = train(ms, corpus, meta_set, sched, cfg.trainer, cfg.seed,
                              rng_state=rng_state, on_step=on_step)
    save_checkpoint(out / "checkpoint.ckpt", ms, sched_desc, final_state, extra)

    with (out / "train_log.jsonl").open("a") as log_f, (out / "timing.jsonl").open("a") as time_f:
        for rec in logs:
            rec = dict(rec)
            wall = rec.pop("wall_time_s", None)
            log_f.write(json.dumps(rec, sort_keys=True) + "\n")
            time_f.write(json.dumps({"step": rec["step"], "wall_time_s": wall}) + "\n")

    if cfg.trainer.use_mlo:
        rows = frame_weight_report(ms, sched, corpus, per_phase=30,
                                   seed=prng.spawn_seed(cfg.seed, "weight-report"),
                                   cap=cfg.trainer.meta_context_cap,
                                   use_cdm=cfg.trainer.use_cdm)
        lines = ["phase,video,frame,loss,weight"]
        lines += [f"{r['phase']},{r['video']},{r['frame']},{r['loss']:{_FMT}},{r['weight']:{_FMT}}"
                  for r in rows]
        (out / "weights.csv").write_text("\n".join(lines) + "\n")

    _archive_run(out, "train", cfg, cfg.seed, extra={"resumed_from": resume})


def cmd_train(args) -> int:
    cfg = _config_for(args)
    corpus = load_corpus(args.corpus)
    out = Path(args.out)
    if args.label_dropout_sweep:
        fractions = [float(x) for x in args.label_dropout_sweep.split(",")]
        for frac in fractions:
            sub_cfg = dataclasses.replace(cfg, label_dropout=frac)
            _train_once(sub_cfg, corpus, out / f"dropout_{frac:g}", None)
        print(f"label-dropout sweep over {fractions} written to {out}")
        return 0
    _train_once(cfg, corpus, out, args.resume)
    print(f"trained to step {cfg.trainer.pretrain_steps + cfg.trainer.train_steps}, "
          f"artifacts in {out}")
    return 0


def cmd_infer(args) -> int:
    ms, sched_desc, _, extra = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    if corpus.classes != ms.enc_spec.classes:
        raise DataError(f"corpus has {corpus.classes} classes, checkpoint expects {ms.enc_spec.classes}")
    if corpus.feature_dim != ms.enc_spec.feature_dim:
        raise DataError(f"corpus feature dim {corpus.feature_dim} != checkpoint {ms.enc_spec.feature_dim}")
    sched = build_linear_schedule(sched_desc["timesteps"], sched_desc["beta_start"],
                                  sched_desc["beta_end"])
    steps = "full" if args.steps in (None, "full") else int(args.steps)
    if steps != "full" and not (1 <= steps <= sched.T):
        raise ConfigError(f"steps {steps} outside [1, {sched.T}]")
    m = int(args.m)
    if m < 1:
        raise ConfigError("need at least one trajectory (--m >= 1)")
    seed = int(args.seed or 0)
    use_cdm = bool(extra.get("use_cdm", True))
    rule = args.rule or extra.get("decision_rule", "majority")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    videos = corpus.split(args.split)
    if not videos:
        raise DataError(f"no videos in split {args.split!r}")
    timing = []
    for video in videos:
        t0 = time.perf_counter()
        res = infer_video(sched, ms.enc_spec, ms.pred_spec, ms.theta, video.features,
                          m=m, steps=steps, seed=seed, video_id=video.video_id,
                          use_cdm=use_cdm, rule=rule)
        elapsed = time.perf_counter() - t0
        timing.append({"video": video.video_id, "frames": int(video.length),
                       "seconds": elapsed, "seconds_per_frame": elapsed / video.length})
        header = "frame,pred," + ",".join(f"p{c}" for c in range(corpus.classes))
        lines = [header]
        for i in range(video.length):
            probs = ",".join(format(p, _FMT) for p in res.mean_probs[i])
            lines.append(f"{i},{int(res.labels[i])},{probs}")
        (out / f"predictions_{video.video_id}.csv").write_text("\n".join(lines) + "\n")
        if res.trajectories is not None:
            stack = np.stack([t.outcomes for t in res.trajectories])
            np.save(out / f"trajectories_{video.video_id}.npy", stack)
    with (out / "timing.jsonl").open("w") as fh:
        for row in timing:
            fh.write(json.dumps(row) + "\n")
    _archive_run(out, "infer", None, seed, extra={
        "checkpoint": str(args.checkpoint), "split": args.split, "m": m,
        "steps": steps, "rule": rule, "use_cdm": use_cdm,
    })
    total = sum(r["seconds"] for r in timing)
    frames = sum(r["frames"] for r in timing)
    print(f"inferred {frames} frames in {total:.1f}s ({1e3 * total / frames:.1f} ms/frame), "
          f"outputs in {out}")
    return 0


def _read_predictions(directory: Path, video_id: str) -> np.ndarray:
    path = directory / f"predictions_{video_id}.csv"
    if not path.exists():
        raise DataError("predictions file missing", path=path)
    lines = path.read_text().splitlines()[1:]
    return np.asarray([int(line.split(",")[1]) for line in lines], dtype=np.int64)


def cmd_eval(args) -> int:
    corpus = load_corpus(args.corpus)
    pred_dir = Path(args.predictions)
    videos = corpus.split(args.split)
    if not videos:
        raise DataError(f"no videos in split {args.split!r}")
    preds = [_read_predictions(pred_dir, v.video_id) for v in videos]
    labels = [v.labels for v in videos]
    report = frame_metrics(preds, labels, relaxed=args.relaxed, fps=corpus.fps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "metrics.json", report.to_dict())
    text = (
        f"videos: {len(videos)}  relaxed: {report.relaxed}\n"
        f"accuracy: {report.accuracy_mean:.4f} +/- {report.accuracy_std:.4f}\n"
        f"macro precision: {report.macro_precision:.4f}\n"
        f"macro recall:    {report.macro_recall:.4f}\n"
        f"macro jaccard:   {report.macro_jaccard:.4f}\n"
    )
    (out / "metrics.txt").write_text(text)
    if args.ribbon:
        for v, p in zip(videos, preds):
            (out / f"ribbon_{v.video_id}_pred.csv").write_text(ribbon_csv(ribbon(p)))
            (out / f"ribbon_{v.video_id}_true.csv").write_text(ribbon_csv(ribbon(v.labels)))
    _archive_run(out, "eval", None, 0, extra={
        "predictions": str(pred_dir), "split": args.split, "relaxed": bool(args.relaxed),
    })
    print(text, end="")
    return 0


def cmd_uncertainty(args) -> int:
    corpus = load_corpus(args.corpus)
    traj_dir = Path(args.trajectories)
    videos = corpus.split(args.split)
    if not videos:
        raise DataError(f"no videos in split {args.split!r}")
    sets, labels = [], []
    for v in videos:
        path = traj_dir / f"trajectories_{v.video_id}.npy"
        if not path.exists():
            raise DataError("trajectories file missing (was infer run with the diffusion head?)",
                            path=path)
        stack = np.load(path)
        if stack.shape[0] != v.length:
            raise DataError(f"{stack.shape[0]} trajectory frames vs {v.length} labels", path=path)
        sets.extend(TrajectorySet(stack[i]) for i in range(stack.shape[0]))
        labels.append(v.labels)
    report = uncertainty_report(sets, np.concatenate(labels), corpus.classes,
                                rho=args.rho, piw_column=args.piw_column, rule=args.rule)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "uncertainty.json", report.to_dict())
    (out / "uncertainty.txt").write_text(report.to_text() + "\n")
    _archive_run(out, "uncertainty", None, 0, extra={
        "trajectories": str(traj_dir), "split": args.split, "rho": args.rho,
        "piw_column": args.piw_column,
    })
    print(report.to_text())
    return 0


def cmd_ablate(args) -> int:
    cfg = _config_for(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [int(s) for s in args.seeds.split(",")]

    if args.corpus:
        corpus_dir = Path(args.corpus)
    else:
        corpus_dir = out / "corpus"
        gen_args = argparse.Namespace(config=args.config, seed=cfg.seed, out=corpus_dir)
        cmd_gen_data(gen_args)
    corpus = load_corpus(corpus_dir)

    cells = [(False, False), (True, False), (False, True), (True, True)]
    results = []
    for seed in seeds:
        for use_cdm, use_mlo in cells:
            name = f"seed{seed}_cdm{int(use_cdm)}_mlo{int(use_mlo)}"
            cell_dir = out / name
            cell_cfg = dataclasses.replace(
                cfg, seed=seed,
                trainer=dataclasses.replace(cfg.trainer, use_cdm=use_cdm, use_mlo=use_mlo))
            _train_once(cell_cfg, corpus, cell_dir / "train", None)
            infer_args = argparse.Namespace(
                checkpoint=cell_dir / "train" / "checkpoint.ckpt", corpus=corpus_dir,
                split="test", out=cell_dir / "infer", m=cfg.inference.trajectories,
                steps=cfg.inference.steps, seed=seed, rule=cfg.inference.decision_rule)
            cmd_infer(infer_args)
            eval_args = argparse.Namespace(
                predictions=cell_dir / "infer", corpus=corpus_dir, split="test",
                out=cell_dir / "eval", relaxed=cfg.evaluation.relaxed, ribbon=False)
            cmd_eval(eval_args)
            metrics = json.loads((cell_dir / "eval" / "metrics.json").read_text())
            results.append({"seed": seed, "use_cdm": use_cdm, "use_mlo": use_mlo,
                            "accuracy": metrics["accuracy_mean"],
                            "macro_jaccard": metrics["macro_jaccard"]})

    def cell_value(seed, cdm, mlo):
        for r in results:
            if r["seed"] == seed and r["use_cdm"] == cdm and r["use_mlo"] == mlo:
                return r["macro_jaccard"]
        raise PhasediffError("missing ablation cell")

    directions = []
    for seed in seeds:
        base = cell_value(seed, False, False)
        cdm = cell_value(seed, True, False)
        mlo = cell_value(seed, False, True)
        both = cell_value(seed, True, True)
        directions.append({
            "seed": seed,
            "cdm_beats_baseline": cdm > base,
            "mlo_beats_baseline": mlo > base,
            "both_beats_cdm": both > cdm,
            "both_beats_mlo": both > mlo,
        })
    summary = {"cells": results, "directions": directions}
    _write_json(out / "summary.json", summary)
    _archive_run(out, "ablate", cfg, cfg.seed, extra={"seeds": seeds})
    for d in directions:
        print(d)
    return 0


def cmd_info(args) -> int:
    print(json.dumps({"version": __version__, "kernel_backend": K.backend(),
                      "build_id": build_id()}))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phasediff",
                                     description="Online phase recognition with a "
                                                 "prior-conditioned classification diffusion model")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", default=None, help="run configuration JSON")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a corpus")
    common(p)
    p.add_argument("--corpus", required=True, help="corpus directory or manifest path")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--label-dropout-sweep", default=None,
                   help="comma-separated fractions; runs one training per value")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="online per-frame inference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--m", type=int, default=100, help="trajectories per frame")
    p.add_argument("--steps", default="full", help="'full' or subsequence length (e.g. 10/100/500)")
    p.add_argument("--rule", default=None, choices=[None, "majority", "max_prob"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="recognition metrics from saved predictions")
    p.add_argument("--predictions", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--relaxed", action="store_true", help="forgive boundary-window predictions")
    p.add_argument("--ribbon", action="store_true", help="export run-length phase bands")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("uncertainty", help="PIW / paired-t-test report from trajectories")
    p.add_argument("--trajectories", required=True, help="infer output directory")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--rho", type=float, default=0.05)
    p.add_argument("--piw-column", dest="piw_column", default="true",
                   choices=["true", "predicted"])
    p.add_argument("--rule", default="majority", choices=["majority", "max_prob"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_uncertainty)

    p = sub.add_parser("ablate", help="run the 2x2 component grid over seeds")
    common(p)
    p.add_argument("--corpus", default=None, help="existing corpus (default: generate one)")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("info", help="print version and active kernel backend")
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PhasediffError as e:
        sys.stderr.write(json.dumps({"error": type(e).__name__, "message": str(e)}) + "\n")
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
