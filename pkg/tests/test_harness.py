import math

import numpy as np
import pytest

from bimba.core import make_rng
from bimba.harness import (BenchConfig, BenchmarkRecord, NeedleDefaults, NeedleResult,
                           bench_scaling, capacity_threshold, default_positions, doubling_ratios,
                           fd_check, gen_needle_dataset, loglog_slope, method_name, one_hot,
                           probe_predict, random_scan_point, read_bench_csv, read_needle_csv,
                           ridge_probe, run_needle_eval, write_bench_csv, write_needle_csv)
from bimba.selector import SelectorConfig

FAST_BENCH = BenchConfig(min_batch_seconds=0.0)


class TestNeedleData:
    def test_deterministic(self):
        a = gen_needle_dataset(4, 2, 2, 3, 6, [0, 3], make_rng(1))
        b = gen_needle_dataset(4, 2, 2, 3, 6, [0, 3], make_rng(1))
        assert all(za == zb and la == lb for (za, la), (zb, lb) in zip(a, b))

    def test_balanced(self):
        ds = gen_needle_dataset(5, 2, 2, 2, 10, [0, 1, 2, 3, 4], make_rng(2))
        assert np.bincount(ds.labels).tolist() == [2, 2, 2, 2, 2]

    def test_uneven_balance(self):
        ds = gen_needle_dataset(8, 2, 2, 2, 11, [0, 2, 5], make_rng(3))
        counts = np.bincount(ds.labels)
        assert counts.max() - counts.min() <= 1

    def test_needle_frame_stands_out(self):
        alpha, sigma = 4.0, 0.5
        ds = gen_needle_dataset(8, 4, 4, 16, 20, default_positions(8, 4), make_rng(4),
                                amplitude=alpha, noise=sigma)
        for (Z, lab), spec in zip(ds, ds.specs):
            proj = Z.data @ spec.direction
            needle = proj[spec.frame, spec.y, spec.x]
            others = np.delete(proj[:, spec.y, spec.x], spec.frame)
            assert needle - others.mean() >= alpha / 2
            assert spec.frame == ds.positions[lab]

    def test_rejects_bad_position(self):
        with pytest.raises(ValueError):
            gen_needle_dataset(4, 2, 2, 2, 4, [4], make_rng(0))

    def test_default_positions(self):
        assert default_positions(32, 8) == [0, 4, 9, 13, 18, 22, 27, 31]


class TestRidge:
    def test_heavy_shrinkage(self):
        F = make_rng(0).standard_normal((10, 4))
        W = ridge_probe(F, one_hot(np.arange(10) % 2, 2), 1e12)
        assert np.abs(W).max() < 1e-10

    def test_orthogonal_rows(self):
        F = np.array([[1.0, 0.0], [0.0, 1.0]])
        Y = one_hot(np.array([0, 1]), 2)
        W = ridge_probe(F, Y, 1e-8)
        # (I + lam I)^-1 I = I / (1 + lam)
        np.testing.assert_allclose(W, np.eye(2) / (1 + 1e-8), rtol=1e-15)
        assert probe_predict(F, W).tolist() == [0, 1]

    def test_zero_features_constant_prediction(self):
        labels = np.arange(12) % 4
        W = ridge_probe(np.zeros((12, 3)), one_hot(labels, 4), 1e-3)
        pred = probe_predict(np.zeros((12, 3)), W)
        assert len(set(pred.tolist())) == 1
        assert np.mean(pred == labels) == 0.25

    def test_dual_form_matches_primal(self):
        rng = make_rng(1)
        F = rng.standard_normal((6, 9))
        Y = rng.standard_normal((6, 2))
        lam = 0.3
        primal = np.linalg.solve(F.T @ F + lam * np.eye(9), F.T @ Y)
        np.testing.assert_allclose(ridge_probe(F, Y, lam), primal, rtol=1e-10, atol=1e-12)

    def test_singular_without_regularisation(self):
        F = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
        with pytest.raises(np.linalg.LinAlgError):
            ridge_probe(F, one_hot(np.array([0, 1, 0]), 2), 0.0)

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            ridge_probe(np.ones((2, 1)), np.ones((2, 1)), -1.0)


@pytest.fixture(scope="module")
def dataset():
    cfg = NeedleDefaults()
    return gen_needle_dataset(cfg.T, cfg.h, cfg.w, cfg.d, cfg.n_samples,
                              default_positions(cfg.T, cfg.n_positions), make_rng(10))


class TestNeedleEval:
    def test_shuffled_labels_near_chance(self, dataset):
        res = run_needle_eval("pool", dataset, 1e-3, make_rng(11), shuffle_labels=True)
        k = len(dataset.positions)
        n_test = len(dataset) - round(0.7 * len(dataset))
        sigma = math.sqrt((1 / k) * (1 - 1 / k) / n_test)
        assert abs(res.accuracy - 1 / k) <= 3 * sigma

    def test_per_position_vector(self, dataset):
        res = run_needle_eval(SelectorConfig(state_size=4), dataset, 1e-3, make_rng(12))
        assert len(res.per_position) == len(dataset.positions)
        assert all(0.0 <= v <= 1.0 for v in res.per_position)
        assert res.method == "bimba-interleave-bi"

    def test_deterministic(self, dataset):
        a = run_needle_eval("pool", dataset, 1e-3, make_rng(13))
        b = run_needle_eval("pool", dataset, 1e-3, make_rng(13))
        assert a == b

    def test_unknown_method(self, dataset):
        with pytest.raises(ValueError):
            run_needle_eval("bogus", dataset, 1e-3, make_rng(0))

    def test_method_names(self):
        assert method_name(SelectorConfig(layout="append", direction="uni")) == "bimba-append-uni"
        assert method_name(SelectorConfig(question=True)) == "bimba-interleave-bi-q"

    def test_csv_round_trip(self, tmp_path):
        rs = [NeedleResult("pool", 3, 0.25, (0.0, 0.5, 1.0 / 3)),
              NeedleResult("bimba-interleave-bi", 4, 0.125, (1.0, 0.1, 0.2))]
        write_needle_csv(tmp_path / "n.csv", rs)
        assert read_needle_csv(tmp_path / "n.csv") == rs
        header = (tmp_path / "n.csv").read_text().splitlines()[0]
        assert header == "method,seed,accuracy,pos_0,pos_1,pos_2"


class TestBench:
    def test_records_and_accounting(self):
        recs = bench_scaling(["selector", "pool", "attention", "vanilla", "perceiver"],
                             [1024, 2048], make_rng(0), FAST_BENCH)
        by = {(r.method, r.tokens): r for r in recs}
        assert len(recs) == 10
        for L in (1024, 2048):
            n = L + L // 16
            assert by[("attention", n)].peak_bytes == n * n * 8
            assert ("selector", n) in by and ("pool", L) in by
        assert all(r.status == "ok" and r.median_seconds > 0 for r in recs)

    def test_capacity_marker(self):
        cfg = BenchConfig(min_batch_seconds=0.0, budget_bytes=10 * 2**20)
        recs = bench_scaling(["attention"], [1024, 2048], make_rng(1), cfg)
        assert [r.status for r in recs] == ["ok", "capacity"]
        assert recs[1].peak_bytes == 2176 ** 2 * 8
        assert math.isnan(recs[1].median_seconds)

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            bench_scaling(["nope"], [1024], make_rng(0), FAST_BENCH)

    def test_sizes_must_ascend(self):
        with pytest.raises(ValueError):
            bench_scaling(["pool"], [2048, 1024], make_rng(0), FAST_BENCH)

    def test_needs_five_repeats(self):
        with pytest.raises(ValueError):
            bench_scaling(["pool"], [1024], make_rng(0), BenchConfig(repeats=3))

    def test_csv_round_trip(self, tmp_path):
        recs = [BenchmarkRecord("pool", 1024, 0.001234, 65536),
                BenchmarkRecord("attention", 17408, float("nan"), 2424307712, "capacity"),
                BenchmarkRecord("selector", 8704, 0.5, 100, accuracy=0.75)]
        write_bench_csv(tmp_path / "b.csv", recs)
        back = read_bench_csv(tmp_path / "b.csv")
        assert back[0] == recs[0] and back[2] == recs[2]
        assert back[1].status == "capacity" and math.isnan(back[1].median_seconds)
        assert back[1].peak_bytes == recs[1].peak_bytes

    def test_record_validation(self):
        with pytest.raises(ValueError):
            BenchmarkRecord("pool", 10, 0.0, 8)
        with pytest.raises(ValueError):
            BenchmarkRecord("pool", 10, 1.0, 0)
        with pytest.raises(ValueError):
            BenchmarkRecord("pool", 10, 1.0, 8, accuracy=1.5)

    def test_capacity_threshold(self):
        n = capacity_threshold(2**30)
        assert n == 11586
        assert n * n * 8 > 2**30 >= (n - 1) ** 2 * 8

    def test_ratio_helpers(self):
        recs = [BenchmarkRecord("m", 100, 1.0, 1), BenchmarkRecord("m", 200, 4.0, 1),
                BenchmarkRecord("m", 400, 16.0, 1), BenchmarkRecord("m", 500, 20.0, 1)]
        assert doubling_ratios(recs, "m") == {100: 4.0, 200: 4.0}
        assert loglog_slope([100, 200, 400], [1.0, 4.0, 16.0]) == pytest.approx(2.0)


class TestFdCheck:
    def test_quadratic_calibration(self):
        x = make_rng(0).standard_normal(12)
        assert fd_check("quadratic", x, 1e-5) <= 1e-10

    def test_scan_small(self):
        for seed in range(3):
            pt = random_scan_point(make_rng(seed), 3, 1, 1)
            assert fd_check("scan", pt, 1e-5, seed=seed) <= 1e-5

    def test_large_step_is_reported(self):
        pt = random_scan_point(make_rng(0), 3, 1, 1)
        assert fd_check("scan", pt, 1e-1) > 1e-3

    def test_zero_cotangent_gives_zero_gradient(self):
        from bimba.ssm import scan_vjp
        pt = random_scan_point(make_rng(1), 4, 2, 3)
        dx, g = scan_vjp(pt.x, pt.params, np.zeros_like(pt.dy))
        assert not dx.any() and not g.w_B.any() and g.delta_bias == 0.0

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            fd_check("quadratic", np.ones(2), 0.0)
        with pytest.raises(ValueError):
            fd_check("cubic", np.ones(2))

    def test_non_finite_is_an_error(self):
        with pytest.raises(FloatingPointError):
            fd_check("quadratic", np.array([1e200, 1.0]), 1e-5)
