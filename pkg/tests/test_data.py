"""Synthetic generator statistics, corpus round-trips, meta sets, masking."""

import numpy as np
import pytest

from phasediff import data as pdata
from phasediff.errors import DataError


def _corpus(videos, cfg, split="train"):
    return pdata.Corpus(cfg.classes, cfg.feature_dim, cfg.fps, videos,
                        {v.video_id: split for v in videos})


class TestGenerate:
    def test_same_seed_identical(self):
        cfg = pdata.SynthConfig(classes=3, feature_dim=4, seed=7)
        a = pdata.generate(cfg, 3)
        b = pdata.generate(cfg, 3)
        for va, vb in zip(a, b):
            assert va.video_id == vb.video_id
            assert np.array_equal(va.features, vb.features)
            assert np.array_equal(va.labels, vb.labels)

    def test_balanced_config_near_uniform(self):
        cfg = pdata.SynthConfig(classes=4, feature_dim=6, base_duration=8.0,
                                imbalance=1.0, skip_prob=0.0, return_prob=0.0, seed=1)
        videos = pdata.generate(cfg, 100)
        counts = pdata.class_frequencies(videos, 4)
        assert np.max(counts) / np.min(counts) < 1.1

    def test_imbalance_ratio_within_twenty_percent(self):
        cfg = pdata.SynthConfig(classes=5, feature_dim=8, base_duration=4.0,
                                imbalance=10.0, skip_prob=0.0, return_prob=0.0, seed=2)
        videos = pdata.generate(cfg, 60)
        counts = pdata.class_frequencies(videos, 5)
        ratio = np.max(counts) / np.min(counts)
        assert abs(ratio - 10.0) / 10.0 < 0.2

    def test_low_noise_is_linearly_separable(self):
        from sklearn.linear_model import LogisticRegression

        cfg = pdata.SynthConfig(classes=4, feature_dim=6, ambiguity=1e-3,
                                base_duration=5.0, imbalance=2.0, seed=3)
        videos = pdata.generate(cfg, 20)
        x = np.concatenate([v.features for v in videos])
        y = np.concatenate([v.labels for v in videos])
        clf = LogisticRegression(max_iter=500).fit(x, y)
        assert clf.score(x, y) > 0.99

    def test_degenerate_config_rejected(self):
        with pytest.raises(DataError):
            pdata.generate(pdata.SynthConfig(classes=1), 1)

    def test_overlap_pair_means_close(self):
        cfg = pdata.SynthConfig(classes=4, feature_dim=6, ambiguity=1.0,
                                overlap_pairs=((1, 2),), seed=4)
        means = pdata.phase_means(cfg)
        assert np.linalg.norm(means[1] - means[2]) == pytest.approx(0.5, rel=1e-12)


class TestCorpusFiles:
    def test_round_trip_exact(self, tmp_path):
        cfg = pdata.SynthConfig(classes=3, feature_dim=4, seed=5)
        videos = pdata.generate(cfg, 2)
        videos[0].labels[3] = pdata.MASKED
        corpus = _corpus(videos, cfg)
        pdata.save_corpus(corpus, tmp_path)
        back = pdata.load_corpus(tmp_path / "manifest.json")
        assert back.classes == 3 and back.feature_dim == 4
        for va, vb in zip(corpus.videos, back.videos):
            assert np.array_equal(va.features, vb.features)
            assert np.array_equal(va.labels, vb.labels)

    def test_same_seed_identical_bytes(self, tmp_path):
        cfg = pdata.SynthConfig(classes=3, feature_dim=4, seed=6)
        blobs = []
        for sub in ("a", "b"):
            corpus = _corpus(pdata.generate(cfg, 2), cfg)
            d = tmp_path / sub
            pdata.save_corpus(corpus, d)
            blobs.append(b"".join(sorted(p.read_bytes() for p in d.iterdir())))
        assert blobs[0] == blobs[1]

    def test_missing_file_reported(self, tmp_path):
        cfg = pdata.SynthConfig(classes=3, feature_dim=4, seed=7)
        corpus = _corpus(pdata.generate(cfg, 2), cfg)
        pdata.save_corpus(corpus, tmp_path)
        (tmp_path / "vid0001.csv").unlink()
        with pytest.raises(DataError, match="missing"):
            pdata.load_corpus(tmp_path)

    def test_header_mismatch_reported(self, tmp_path):
        cfg = pdata.SynthConfig(classes=3, feature_dim=4, seed=8)
        corpus = _corpus(pdata.generate(cfg, 1), cfg)
        pdata.save_corpus(corpus, tmp_path)
        csv = tmp_path / "vid0000.csv"
        text = csv.read_text().splitlines()
        text[0] = "label,f0,f1,f2"
        csv.write_text("\n".join(text) + "\n")
        with pytest.raises(DataError, match="header"):
            pdata.load_corpus(tmp_path)

    def test_row_width_mismatch_reported(self, tmp_path):
        cfg = pdata.SynthConfig(classes=3, feature_dim=4, seed=9)
        corpus = _corpus(pdata.generate(cfg, 1), cfg)
        pdata.save_corpus(corpus, tmp_path)
        csv = tmp_path / "vid0000.csv"
        lines = csv.read_text().splitlines()
        lines[2] = lines[2] + ",0.0"
        csv.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match="row width"):
            pdata.load_corpus(tmp_path)


class TestMetaSet:
    def _videos(self, seed=0):
        cfg = pdata.SynthConfig(classes=4, feature_dim=5, base_duration=4.0,
                                imbalance=4.0, seed=seed)
        return pdata.generate(cfg, 8)

    def test_quota_met_and_balanced(self):
        meta = pdata.build_meta_set(self._videos(), 4, quota=3, seed=0)
        assert all(count == 3 for count in meta.per_class.values())
        assert meta.exhausted == ()
        assert len(meta.frames) == 12

    def test_exhausted_class_flagged(self):
        videos = [pdata.PhaseSequence("v", np.zeros((5, 2)),
                                      np.array([0, 0, 0, 1, 1]))]
        meta = pdata.build_meta_set(videos, 2, quota=4, seed=1)
        assert meta.per_class == {0: 3, 1: 2}
        assert meta.exhausted == (0, 1)

    def test_quota_one_gives_one_per_class(self):
        videos = [pdata.PhaseSequence("v", np.zeros((7, 2)), np.arange(7))]
        meta = pdata.build_meta_set(videos, 7, quota=1, seed=2)
        assert len(meta.frames) == 7

    def test_two_seeds_same_counts_different_frames(self):
        videos = self._videos(1)
        a = pdata.build_meta_set(videos, 4, quota=3, seed=10)
        b = pdata.build_meta_set(videos, 4, quota=3, seed=11)
        assert a.per_class == b.per_class
        fa = {(f.video_index, f.frame_index) for f in a.frames}
        fb = {(f.video_index, f.frame_index) for f in b.frames}
        assert fa != fb

    def test_empty_class_rejected(self):
        videos = [pdata.PhaseSequence("v", np.zeros((4, 2)), np.array([0, 0, 1, 1]))]
        with pytest.raises(DataError, match=r"\[2\]"):
            pdata.build_meta_set(videos, 3, quota=1, seed=3)


class TestLabelDropout:
    def _corpus(self, length=1000):
        video = pdata.PhaseSequence("v", np.zeros((length, 2)),
                                    np.zeros(length, dtype=np.int64))
        return pdata.Corpus(2, 2, 1.0, [video], {"v": "train"})

    def test_zero_fraction_unchanged(self):
        corpus = self._corpus()
        out = pdata.apply_label_dropout(corpus, 0.0, seed=0)
        assert np.array_equal(out.videos[0].labels, corpus.videos[0].labels)

    def test_full_fraction_masks_all(self):
        out = pdata.apply_label_dropout(self._corpus(), 1.0, seed=0)
        assert np.all(out.videos[0].labels == pdata.MASKED)

    def test_exact_count(self):
        out = pdata.apply_label_dropout(self._corpus(1000), 0.25, seed=1)
        assert int(np.sum(out.videos[0].labels == pdata.MASKED)) == 250

    def test_masked_frames_keep_features(self):
        corpus = self._corpus(10)
        corpus.videos[0].features[:] = 3.14
        out = pdata.apply_label_dropout(corpus, 0.5, seed=2)
        assert np.all(out.videos[0].features == 3.14)

    def test_seeded_determinism(self):
        a = pdata.apply_label_dropout(self._corpus(), 0.5, seed=3)
        b = pdata.apply_label_dropout(self._corpus(), 0.5, seed=3)
        assert np.array_equal(a.videos[0].labels, b.videos[0].labels)

    def test_test_split_untouched(self):
        video = pdata.PhaseSequence("t", np.zeros((10, 2)), np.zeros(10, dtype=np.int64))
        corpus = pdata.Corpus(2, 2, 1.0, [video], {"t": "test"})
        out = pdata.apply_label_dropout(corpus, 1.0, seed=0)
        assert np.all(out.videos[0].labels == 0)


class TestBackgroundModes:
    def _corpus(self):
        video = pdata.PhaseSequence("v", np.arange(12.0).reshape(6, 2),
                                    np.array([0, pdata.MASKED, 1, pdata.MASKED, 1, 0]))
        return pdata.Corpus(2, 2, 1.0, [video], {"v": "train"})

    def test_context_only_is_identity(self):
        corpus = self._corpus()
        out = pdata.apply_background_mode(corpus, pdata.BackgroundMode.CONTEXT_ONLY)
        assert out is corpus

    def test_drop_frames_removes_masked(self):
        out = pdata.apply_background_mode(self._corpus(), pdata.BackgroundMode.DROP_FRAMES)
        v = out.videos[0]
        assert v.length == 4
        assert np.array_equal(v.labels, [0, 1, 1, 0])
        assert np.array_equal(v.features[1], [4.0, 5.0])

    def test_single_pseudo_label_grows_classes(self):
        out = pdata.apply_background_mode(self._corpus(),
                                          pdata.BackgroundMode.SINGLE_PSEUDO_LABEL)
        assert out.classes == 3
        assert np.array_equal(out.videos[0].labels, [0, 2, 1, 2, 1, 0])
