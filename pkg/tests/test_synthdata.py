from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ppg_uq import calib, synthdata as sd
from ppg_uq.rng import RngStream


def _rhythm(n, seed=0, **kw):
    return sd.gen_rhythm_task(n, rng=RngStream(seed, "data"), **kw)


def _pressure(n, seed=0, render=True, **cfg):
    return sd.gen_hetero_regression(n, rng=RngStream(seed, "data"), cfg=sd.PressureConfig(**cfg), render=render)


class TestRhythm:
    def test_zero_jitter_is_periodic(self):
        gen = np.random.default_rng(0)
        x = sd.rhythm_signal(0.0, 1.0, 0.0, gen)
        # 1 Hz at 32 Hz sampling repeats every 32 samples
        np.testing.assert_allclose(x[64:700], x[96:732], atol=1e-9)

    def test_label_rule(self):
        for s in _rhythm(200):
            assert s.label == int(s.meta["cv"] >= 0.15)

    def test_high_cv_is_irregular(self):
        cfg = sd.RhythmConfig(easy_irregular_cv=(0.5, 0.5), boundary_fraction=0.0)
        sigs = sd.gen_rhythm_task(50, class_balance=1.0, rng=RngStream(0, "data"), cfg=cfg)
        assert all(s.label == 1 and s.meta["cv"] == 0.5 for s in sigs)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(5, 60), st.floats(0.0, 0.6), st.floats(0.3, 2.0))
    def test_interval_cv_exact(self, n, cv, mean):
        iv = sd.beat_intervals(n, mean, cv, np.random.default_rng(n))
        assert iv.mean() == pytest.approx(mean, rel=1e-12)
        assert iv.std() / iv.mean() == pytest.approx(cv, abs=1e-12)

    def test_shape_and_normalisation(self):
        s = _rhythm(3)[0]
        assert s.samples.shape == (800,) and s.samples.dtype == np.float32
        assert abs(float(s.samples.mean())) < 1e-5 and float(s.samples.std()) == pytest.approx(1.0, rel=1e-4)

    def test_class_balance(self):
        y = np.array([s.label for s in _rhythm(2000)])
        assert abs(y.mean() - 0.4) < 4 * np.sqrt(0.24 / 2000)

    def test_deterministic(self):
        a, b = _rhythm(5, seed=3), _rhythm(5, seed=3)
        assert all(x.samples.tobytes() == y.samples.tobytes() for x, y in zip(a, b))

    @pytest.mark.parametrize("kw", [{"n": 0}, {"n": 5, "class_balance": 1.5}])
    def test_bad_arguments_rejected(self, kw):
        with pytest.raises(ValueError):
            sd.gen_rhythm_task(**kw)


class TestPressure:
    def test_zero_noise_targets_recoverable(self):
        for s in _pressure(50, noise_scale=0.0):
            sbp, dbp = sd.decode_pressure(s.meta["rise_time"], s.meta["diastolic_ratio"])
            assert s.label == pytest.approx((float(sbp), float(dbp)), abs=1e-9)
            assert s.true_noise_sigma == (0.0, 0.0)

    def test_encoding_round_trip(self):
        sbp, dbp = np.linspace(80, 180, 7), np.linspace(35, 115, 7)
        back = sd.decode_pressure(*sd.encode_pressure(sbp, dbp))
        np.testing.assert_allclose(back, (sbp, dbp), atol=1e-10)

    def test_noise_schedule_quantiles(self):
        # quality ~ U(0, 1) maps linearly onto the configured SBP noise range
        sig = np.array([s.true_noise_sigma[0] for s in _pressure(3000)])
        lo, hi = sd.PressureConfig().target_sigma
        assert stats.kstest((sig - lo) / (hi - lo), "uniform").pvalue > 1e-3

    def test_oracle_predictor_is_calibrated(self):
        sigs = _pressure(20_000, render=False)
        y = np.array([s.label for s in sigs])
        mu = np.array([[s.meta["sbp_latent"], s.meta["dbp_latent"]] for s in sigs])
        s2 = np.array([s.true_noise_sigma for s in sigs]) ** 2
        for h in range(2):
            assert calib.coverage_curve(y[:, h], mu[:, h], s2[:, h]).value < 1e-3

    def test_unrendered_targets_match_rendered(self):
        a, b = _pressure(60, render=False), _pressure(60)
        assert all(x.label == y.label and x.meta == y.meta for x, y in zip(a, b))
        assert a[0].samples.size == 0

    def test_oracle_on_generated_examples(self):
        sigs = _pressure(400)
        y = np.array([s.label[0] for s in sigs])
        mu = np.array([s.meta["sbp_latent"] for s in sigs])
        s2 = np.array([s.true_noise_sigma[0] for s in sigs]) ** 2
        z = (y - mu) / np.sqrt(s2)
        assert abs(z.mean()) < 0.2 and abs(z.std() - 1.0) < 0.1

    def test_dbp_below_sbp(self):
        assert all(s.meta["dbp_latent"] <= s.meta["sbp_latent"] - 15.0 for s in _pressure(300))


class TestWeightedSampler:
    def test_balanced_labels_uniform(self):
        idx = sd.weighted_sampler(np.repeat([0, 1], 5), RngStream(0, "data").child(3), 100_000)
        counts = np.bincount(idx, minlength=10) / 100_000
        assert np.all(np.abs(counts - 0.1) < 0.005)

    def test_imbalance_corrected(self):
        labels = np.array([0] * 90 + [1] * 10)
        idx = sd.weighted_sampler(labels, RngStream(1, "data").child(3), 100_000)
        assert abs(labels[idx].mean() - 0.5) < 0.01

    def test_deterministic(self):
        labels = np.array([0, 0, 1])
        a = sd.weighted_sampler(labels, RngStream(2, "data").child(3), 20)
        assert np.array_equal(a, sd.weighted_sampler(labels, RngStream(2, "data").child(3), 20))

    def test_missing_class_rejected(self):
        with pytest.raises(ValueError):
            sd.weighted_sampler(np.array([0, 2, 2]), RngStream(0, "data").child(3))


class TestSplit:
    def test_pooled_sizes(self):
        tr, va, te = sd.split_indices(100, sd.SplitSpec())
        assert (len(tr), len(va), len(te)) == (80, 10, 10)
        assert len(np.unique(np.concatenate([tr, va, te]))) == 100

    def test_by_subject_disjoint(self):
        ds = sd.to_dataset(_rhythm(300), "af")
        parts = sd.split(ds, sd.SplitSpec(grouping="by-subject"))
        subj = [set(p.subject.tolist()) for p in parts]
        assert not (subj[0] & subj[1] or subj[0] & subj[2] or subj[1] & subj[2])
        assert sum(len(p) for p in parts) == 300

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 1000), st.integers(0, 1000), st.integers(10, 500))
    def test_seed_preserves_sizes(self, s1, s2, n):
        a = sd.split_indices(n, sd.SplitSpec(seed=s1))
        b = sd.split_indices(n, sd.SplitSpec(seed=s2))
        assert [len(p) for p in a] == [len(p) for p in b]

    def test_seed_changes_membership(self):
        assert not np.array_equal(sd.split_indices(100, sd.SplitSpec(seed=0))[0],
                                  sd.split_indices(100, sd.SplitSpec(seed=1))[0])

    @pytest.mark.parametrize("kw", [{"fractions": (0.5, 0.5, 0.5)}, {"grouping": "random"},
                                    {"fractions": (1.2, -0.1, -0.1)}])
    def test_bad_spec_rejected(self, kw):
        with pytest.raises(ValueError):
            sd.SplitSpec(**kw)


class TestSerialisation:
    @pytest.mark.parametrize("task", ["af", "bp"])
    def test_round_trip(self, task, tmp_path):
        sigs = _rhythm(6) if task == "af" else _pressure(6)
        ds = sd.to_dataset(sigs, task)
        sd.save_dataset(ds, tmp_path / "d.ppgds")
        back = sd.load_dataset(tmp_path / "d.ppgds", task)
        assert back.x.tobytes() == ds.x.tobytes()
        np.testing.assert_allclose(back.y, ds.y, rtol=1e-6)
        np.testing.assert_array_equal(back.ids, ds.ids)
        assert set(back.meta) == set(ds.meta)

    def test_same_seed_same_bytes(self, tmp_path):
        for name in ("a", "b"):
            sd.save_dataset(sd.to_dataset(_pressure(4, seed=9), "bp"), tmp_path / name)
        assert sd.file_sha256(tmp_path / "a") == sd.file_sha256(tmp_path / "b")
