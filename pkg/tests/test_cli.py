"""Command-line surface: artifacts, determinism, resume, error contract."""

import dataclasses
import json
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from phasediff import data as pdata
from phasediff.checkpoint import load_checkpoint, save_checkpoint
from phasediff.cli import main
from phasediff.config import RunConfig, config_from_dict, config_to_dict
from phasediff.errors import CheckpointError, ConfigError
from phasediff.meta_opt import init_model_state
from phasediff.networks import EncoderSpec, PredictorSpec, WeightNetSpec


def _cfg_dict(**over):
    base = {
        "seed": 0,
        "schedule": {"timesteps": 10, "beta_start": 1e-3, "beta_end": 0.05},
        "networks": {"hidden": 8, "predictor_width": 12, "weightnet_hidden": 10},
        "trainer": {"alpha": 0.01, "beta": 0.01, "train_window": 32, "meta_batch": 4,
                    "pretrain_steps": 1, "train_steps": 3, "optimizer": "adam"},
        "gen": {"synth": {"classes": 3, "feature_dim": 5, "base_duration": 4.0,
                          "imbalance": 3.0, "ambiguity": 0.8, "seed": 0},
                "train_videos": 3, "test_videos": 2, "val_videos": 0},
        "inference": {"trajectories": 3, "steps": "full"},
        "meta_quota": 2,
    }
    base.update(over)
    return base


def _write_cfg(tmp_path, name="cfg.json", **over):
    path = tmp_path / name
    path.write_text(json.dumps(_cfg_dict(**over)))
    return path


def _run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture()
def pipeline(tmp_path):
    cfg = _write_cfg(tmp_path)
    corpus = tmp_path / "corpus"
    assert _run("gen-data", "--config", cfg, "--out", corpus) == 0
    return tmp_path, cfg, corpus


def _tree_bytes(directory, exclude=("timing.jsonl",)):
    out = {}
    for p in sorted(Path(directory).rglob("*")):
        if p.is_file() and p.name not in exclude:
            out[str(p.relative_to(directory))] = p.read_bytes()
    return out


class TestGenData:
    def test_round_trip_loadable(self, pipeline):
        _, _, corpus = pipeline
        loaded = pdata.load_corpus(corpus)
        assert loaded.classes == 3
        assert len(loaded.split("train")) == 3
        assert len(loaded.split("test")) == 2

    def test_same_seed_byte_identical(self, tmp_path):
        cfg = _write_cfg(tmp_path)
        for sub in ("a", "b"):
            assert _run("gen-data", "--config", cfg, "--out", tmp_path / sub) == 0
        assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")

    def test_imbalance_summary_within_twenty_percent(self, tmp_path):
        cfg = _write_cfg(
            tmp_path,
            gen={"synth": {"classes": 7, "feature_dim": 8, "base_duration": 3.0,
                           "imbalance": 10.0, "skip_prob": 0.0, "return_prob": 0.0,
                           "ambiguity": 0.8, "seed": 0},
                 "train_videos": 50, "test_videos": 0, "val_videos": 0},
        )
        out = tmp_path / "big"
        assert _run("gen-data", "--config", cfg, "--out", out) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert abs(summary["empirical_imbalance"] - 10.0) / 10.0 < 0.2

    def test_run_archive_present(self, pipeline):
        _, _, corpus = pipeline
        run = json.loads((corpus / "run.json").read_text())
        assert run["command"] == "gen-data"
        assert run["seed"] == 0
        assert "build_id" in run and run["config"] is not None


class TestTrain:
    def test_artifacts_and_log(self, pipeline, tmp_path):
        _, cfg, corpus = pipeline
        out = tmp_path / "run"
        assert _run("train", "--config", cfg, "--corpus", corpus, "--out", out) == 0
        assert (out / "checkpoint.ckpt").exists()
        records = [json.loads(line) for line in (out / "train_log.jsonl").read_text().splitlines()]
        assert records[0]["phase"] == "pretrain"
        assert records[-1]["step"] == 3
        assert all("wall_time_s" not in r for r in records)
        assert (out / "timing.jsonl").exists()
        assert (out / "weights.csv").read_text().startswith("phase,video,frame,loss,weight")

    def test_all_four_toggle_combinations_run(self, pipeline, tmp_path):
        _, _, corpus = pipeline
        for cdm in (False, True):
            for mlo in (False, True):
                cfg = _write_cfg(tmp_path, name=f"cfg_{cdm}_{mlo}.json",
                                 trainer={"alpha": 0.01, "beta": 0.01, "train_window": 16,
                                          "meta_batch": 3, "pretrain_steps": 0,
                                          "train_steps": 2, "use_cdm": cdm, "use_mlo": mlo})
                out = tmp_path / f"run_{cdm}_{mlo}"
                assert _run("train", "--config", cfg, "--corpus", corpus, "--out", out) == 0

    def test_repeat_run_bit_identical(self, pipeline, tmp_path):
        _, cfg, corpus = pipeline
        for sub in ("r1", "r2"):
            assert _run("train", "--config", cfg, "--corpus", corpus,
                        "--out", tmp_path / sub) == 0
        assert _tree_bytes(tmp_path / "r1") == _tree_bytes(tmp_path / "r2")

    def test_resume_reproduces_uninterrupted(self, pipeline, tmp_path):
        base, _, corpus = pipeline
        full_cfg = _write_cfg(tmp_path, name="full.json",
                              trainer={"alpha": 0.01, "beta": 0.01, "train_window": 16,
                                       "meta_batch": 3, "pretrain_steps": 1, "train_steps": 5})
        half_cfg = _write_cfg(tmp_path, name="half.json",
                              trainer={"alpha": 0.01, "beta": 0.01, "train_window": 16,
                                       "meta_batch": 3, "pretrain_steps": 1, "train_steps": 2})
        assert _run("train", "--config", full_cfg, "--corpus", corpus,
                    "--out", tmp_path / "full") == 0
        assert _run("train", "--config", half_cfg, "--corpus", corpus,
                    "--out", tmp_path / "half") == 0
        assert _run("train", "--config", full_cfg, "--corpus", corpus,
                    "--out", tmp_path / "resumed",
                    "--resume", tmp_path / "half" / "checkpoint.ckpt") == 0
        a = (tmp_path / "full" / "checkpoint.ckpt").read_bytes()
        b = (tmp_path / "resumed" / "checkpoint.ckpt").read_bytes()
        assert a == b

    def test_label_dropout_sweep_runs_grid(self, pipeline, tmp_path):
        _, cfg, corpus = pipeline
        out = tmp_path / "sweep"
        assert _run("train", "--config", cfg, "--corpus", corpus, "--out", out,
                    "--label-dropout-sweep", "0,0.5") == 0
        assert (out / "dropout_0" / "checkpoint.ckpt").exists()
        assert (out / "dropout_0.5" / "checkpoint.ckpt").exists()


class TestInfer:
    @pytest.fixture()
    def trained(self, pipeline, tmp_path):
        _, cfg, corpus = pipeline
        out = tmp_path / "run"
        assert _run("train", "--config", cfg, "--corpus", corpus, "--out", out) == 0
        return corpus, out / "checkpoint.ckpt"

    def test_step_counts_accepted(self, tmp_path, pipeline):
        _, _, corpus = pipeline
        cfg = _write_cfg(tmp_path, name="t500.json",
                         schedule={"timesteps": 500, "beta_start": 1e-4, "beta_end": 0.02},
                         trainer={"alpha": 0.01, "beta": 0.01, "train_window": 16,
                                  "meta_batch": 3, "pretrain_steps": 0, "train_steps": 1})
        run = tmp_path / "t500"
        assert _run("train", "--config", cfg, "--corpus", corpus, "--out", run) == 0
        for steps in (10, 100, 500):
            out = tmp_path / f"inf{steps}"
            assert _run("infer", "--checkpoint", run / "checkpoint.ckpt", "--corpus", corpus,
                        "--out", out, "--m", 2, "--steps", steps) == 0

    def test_truncated_prefix_predictions_identical(self, trained, tmp_path):
        corpus_dir, ckpt = trained
        full = tmp_path / "inf_full"
        assert _run("infer", "--checkpoint", ckpt, "--corpus", corpus_dir,
                    "--out", full, "--m", 3) == 0

        corpus = pdata.load_corpus(corpus_dir)
        cut = {}
        videos = []
        for v in corpus.videos:
            if corpus.splits[v.video_id] == "test":
                k = max(1, v.length // 2)
                cut[v.video_id] = k
                videos.append(pdata.PhaseSequence(v.video_id, v.features[:k], v.labels[:k], v.fps))
            else:
                videos.append(v)
        trunc = pdata.Corpus(corpus.classes, corpus.feature_dim, corpus.fps, videos, corpus.splits)
        trunc_dir = tmp_path / "corpus_trunc"
        pdata.save_corpus(trunc, trunc_dir)
        part = tmp_path / "inf_part"
        assert _run("infer", "--checkpoint", ckpt, "--corpus", trunc_dir,
                    "--out", part, "--m", 3) == 0
        for vid, k in cut.items():
            full_lines = (full / f"predictions_{vid}.csv").read_text().splitlines()
            part_lines = (part / f"predictions_{vid}.csv").read_text().splitlines()
            assert part_lines == full_lines[: k + 1]

    def test_class_mismatch_rejected(self, trained, tmp_path, capsys):
        corpus_dir, ckpt = trained
        other = pdata.SynthConfig(classes=4, feature_dim=5, seed=1)
        videos = pdata.generate(other, 2)
        corpus = pdata.Corpus(4, 5, 1.0, videos, {v.video_id: "test" for v in videos})
        other_dir = tmp_path / "other"
        pdata.save_corpus(corpus, other_dir)
        code = _run("infer", "--checkpoint", ckpt, "--corpus", other_dir,
                    "--out", tmp_path / "x", "--m", 2)
        assert code != 0
        err = json.loads(capsys.readouterr().err.strip())
        assert err["error"] == "DataError"

    def test_m1_uncertainty_notice(self, trained, tmp_path):
        corpus_dir, ckpt = trained
        inf = tmp_path / "inf_m1"
        assert _run("infer", "--checkpoint", ckpt, "--corpus", corpus_dir,
                    "--out", inf, "--m", 1) == 0
        unc = tmp_path / "unc_m1"
        assert _run("uncertainty", "--trajectories", inf, "--corpus", corpus_dir,
                    "--out", unc) == 0
        report = json.loads((unc / "uncertainty.json").read_text())
        assert report["notice"] is not None
        assert report["rows"][0]["piw_correct"] is None


class TestReports:
    @pytest.fixture()
    def full_outputs(self, pipeline, tmp_path):
        _, cfg, corpus = pipeline
        run = tmp_path / "run"
        assert _run("train", "--config", cfg, "--corpus", corpus, "--out", run) == 0
        inf = tmp_path / "inf"
        assert _run("infer", "--checkpoint", run / "checkpoint.ckpt", "--corpus", corpus,
                    "--out", inf, "--m", 3) == 0
        ev = tmp_path / "ev"
        assert _run("eval", "--predictions", inf, "--corpus", corpus, "--out", ev,
                    "--ribbon") == 0
        unc = tmp_path / "unc"
        assert _run("uncertainty", "--trajectories", inf, "--corpus", corpus,
                    "--out", unc) == 0
        return corpus, inf, ev, unc

    def test_metrics_json_validates_against_schema(self, full_outputs):
        _, _, ev, _ = full_outputs
        schema = json.loads(
            resources.files("phasediff.schemas").joinpath("metrics_report.schema.json").read_text())
        jsonschema.validate(json.loads((ev / "metrics.json").read_text()), schema)

    def test_uncertainty_json_validates_against_schema(self, full_outputs):
        _, _, _, unc = full_outputs
        schema = json.loads(
            resources.files("phasediff.schemas").joinpath("uncertainty_report.schema.json").read_text())
        jsonschema.validate(json.loads((unc / "uncertainty.json").read_text()), schema)

    def test_uncertainty_table_structure(self, full_outputs):
        _, _, _, unc = full_outputs
        report = json.loads((unc / "uncertainty.json").read_text())
        assert len(report["rows"]) == 3 + 1
        assert report["rows"][0]["phase"] == "all"
        for key in ("accuracy", "piw_correct", "piw_incorrect", "acc_reject",
                    "acc_not_reject", "n_not_reject"):
            assert key in report["rows"][1]

    def test_perfect_predictions_all_ones(self, pipeline, tmp_path):
        _, _, corpus_dir = pipeline
        corpus = pdata.load_corpus(corpus_dir)
        inf = tmp_path / "perfect"
        inf.mkdir()
        for v in corpus.split("test"):
            lines = ["frame,pred," + ",".join(f"p{c}" for c in range(3))]
            for i in range(v.length):
                lines.append(f"{i},{int(v.labels[i])},1,0,0")
            (inf / f"predictions_{v.video_id}.csv").write_text("\n".join(lines) + "\n")
        ev = tmp_path / "ev_perfect"
        assert _run("eval", "--predictions", inf, "--corpus", corpus_dir, "--out", ev) == 0
        metrics = json.loads((ev / "metrics.json").read_text())
        assert metrics["accuracy_mean"] == 1.0
        assert metrics["macro_jaccard"] == 1.0

    def test_ribbon_files_decode(self, full_outputs):
        corpus_dir, _, ev, _ = full_outputs
        corpus = pdata.load_corpus(corpus_dir)
        vid = corpus.split("test")[0]
        text = (ev / f"ribbon_{vid.video_id}_true.csv").read_text().splitlines()[1:]
        total = sum(int(line.split(",")[2]) for line in text)
        assert total == vid.length


class TestConfigAndCheckpoint:
    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown keys"):
            config_from_dict({"seed": 0, "learning_rate": 1.0})

    def test_nested_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown keys"):
            config_from_dict({"trainer": {"alpha": 0.1, "momentum": 0.9}})

    def test_config_round_trip(self):
        cfg = config_from_dict(_cfg_dict())
        again = config_from_dict(config_to_dict(cfg))
        assert config_to_dict(again) == config_to_dict(cfg)

    def test_checkpoint_round_trip_bitwise(self, tmp_path):
        ms = init_model_state(EncoderSpec(4, 3, 6), PredictorSpec(3, 8),
                              WeightNetSpec(5), seed=0, optimizer="adam")
        ms.opt.m[:] = 0.25
        ms.step = 17
        desc = {"timesteps": 10, "beta_start": 1e-3, "beta_end": 0.05}
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, ms, desc, rng_state=None, extra={"use_cdm": True})
        back, sched, state, extra = load_checkpoint(path)
        assert np.array_equal(back.theta.data, ms.theta.data)
        assert np.array_equal(back.w.data, ms.w.data)
        assert np.array_equal(back.opt.m, ms.opt.m)
        assert back.step == 17 and sched == desc and extra == {"use_cdm": True}
        path2 = tmp_path / "b.ckpt"
        save_checkpoint(path2, back, sched, state, extra)
        assert path.read_bytes() == path2.read_bytes()

    def test_version_mismatch_rejected(self, tmp_path):
        ms = init_model_state(EncoderSpec(4, 3, 6), PredictorSpec(3, 8),
                              WeightNetSpec(5), seed=0)
        path = tmp_path / "v.ckpt"
        save_checkpoint(path, ms, {"timesteps": 10, "beta_start": 1e-3, "beta_end": 0.05}, None)
        blob = bytearray(path.read_bytes())
        head_len = int.from_bytes(blob[4:8], "little")
        head = json.loads(blob[8 : 8 + head_len].decode())
        head["version"] = 99
        new_head = json.dumps(head, sort_keys=True).encode()
        path.write_bytes(blob[:4] + len(new_head).to_bytes(4, "little") + new_head
                         + bytes(blob[8 + head_len:]))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_bad_config_exit_code_and_json_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"seed": 0, "nope": 1}))
        code = _run("gen-data", "--config", bad, "--out", tmp_path / "x")
        assert code != 0
        err = json.loads(capsys.readouterr().err.strip())
        assert err["error"] == "ConfigError"
        assert "nope" in err["message"]


class TestInfo:
    def test_info_reports_backend(self, capsys):
        assert _run("info") == 0
        out = json.loads(capsys.readouterr().out.strip())
        assert out["kernel_backend"] in ("python", "cython")
