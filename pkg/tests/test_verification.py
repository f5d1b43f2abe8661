import csv
import json
import math

import numpy as np
import pytest

from enspost.verification import bias, case_crps, rank_histogram, rmse, ser, spread_fortin, verify, write_report


class TestScalars:
    def test_bias_examples(self):
        assert bias(np.full(4, 2.0), np.ones(4)) == 1.0
        assert bias([1.0, 3.0], [2.0, 2.0]) == 0.0
        with pytest.raises(ValueError):
            bias([], [])

    def test_spread_examples(self):
        assert spread_fortin([[0.0, 2.0], [0.0, 2.0]]) == pytest.approx(math.sqrt(2))
        assert spread_fortin(np.full((3, 4), 1.5)) == 0.0
        assert spread_fortin([[1.0, 2.0, 6.0]]) == pytest.approx(np.std([1, 2, 6], ddof=1))
        with pytest.raises(ValueError):
            spread_fortin([[1.0]])

    def test_ser_examples(self):
        ens = np.array([[0.0, 2.0]] * 3)
        obs = np.full(3, 1 + math.sqrt(2))
        assert ser(ens, obs) == pytest.approx(1.0)
        half = 1 + (ens - 1) / 2
        assert ser(half, obs) == pytest.approx(0.5)
        with pytest.raises(ZeroDivisionError):
            ser(ens, np.ones(3))

    def test_ser_exchangeable_members(self):
        rng = np.random.default_rng(0)
        n, k = 10_000, 11
        draws = rng.standard_normal((n, k + 1))
        assert 0.85 <= ser(draws[:, :k], draws[:, k]) <= 1.15

    def test_rmse(self):
        assert rmse([1.0, 3.0], [2.0, 2.0]) == 1.0


class TestRankHistogram:
    def test_bins(self):
        assert rank_histogram([[1.0, 2.0, 3.0]], [0.0]).tolist() == [1, 0, 0, 0]
        assert rank_histogram([[1.0, 2.0, 3.0]], [2.5]).tolist() == [0, 0, 1, 0]

    def test_ties_spread_over_positions(self):
        h = rank_histogram(np.ones((3000, 2)), np.ones(3000), seed=1)
        assert h.sum() == 3000
        assert np.all(np.abs(h - 1000) < 4 * math.sqrt(3000 * (1 / 3) * (2 / 3)))

    def test_permutation_and_seed(self):
        rng = np.random.default_rng(2)
        x = np.round(rng.normal(size=(500, 6)), 1)
        y = np.round(rng.normal(size=500), 1)
        a = rank_histogram(x, y, seed=4)
        b = rank_histogram(x[:, rng.permutation(6)], y, seed=4)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(a, rank_histogram(x, y, seed=4))

    def test_uniform_for_exchangeable(self):
        rng = np.random.default_rng(3)
        n, k = 100_000, 10
        draws = rng.standard_normal((n, k + 1))
        h = rank_histogram(draws[:, :k], draws[:, k])
        p = 1 / (k + 1)
        assert np.all(np.abs(h - n * p) < 4 * math.sqrt(n * p * (1 - p)))


@pytest.fixture(scope="module")
def sample():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 5, 3, 2, 3)) + 0.3
    y = rng.normal(size=(4, 3, 2, 3))
    return x, y


class TestVerify:
    def test_aggregation(self, sample):
        r = verify(*sample)
        assert r.overall["crps"] == pytest.approx(r.crps.mean(), abs=1e-12)
        assert r.overall["crps"] == pytest.approx(r.crps_map.mean(), abs=1e-6)
        assert r.overall["bias"] == pytest.approx(r.bias_map.mean(), abs=1e-6)
        assert r.rank_histogram.sum() == r.metadata["verifications"] == 4 * 18

    def test_gaussian_crps_matches_scoring(self, sample):
        x, y = sample
        per_case = case_crps(x, y, "gaussian_target")
        from enspost.scoring import crps_gaussian

        assert per_case[1, 2, 0, 1] == pytest.approx(crps_gaussian(x[1, :, 2, 0, 1].mean(), x[1, :, 2, 0, 1].std(ddof=1), y[1, 2, 0, 1]))

    def test_nonnegative_uses_fair(self, sample):
        from enspost.scoring import crps_fair

        x, y = np.abs(sample[0]), np.abs(sample[1])
        r = verify(x, y, "nonnegative_target")
        assert r.crps[0] == pytest.approx(crps_fair(np.moveaxis(x, 1, -1), y)[:, 0].mean())

    def test_perfect(self):
        y = np.random.default_rng(0).normal(size=(3, 2, 2, 2))
        x = np.repeat(y[:, None], 4, axis=1)
        r = verify(x, y)
        assert r.overall["crps"] == 0 and r.overall["bias"] == 0

    def test_shape_mismatch(self, sample):
        with pytest.raises(ValueError):
            verify(sample[0], sample[1][:, :2])
        with pytest.raises(ValueError):
            verify(sample[0], sample[1], "other")

    def test_write_report(self, sample, tmp_path):
        x, y = sample
        reports = {"raw": verify(x, y, method="raw"), "shifted": verify(x - 0.3, y, method="shifted")}
        write_report(reports, tmp_path)
        with open(tmp_path / "per_lead.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 6 and rows[0]["method"] == "raw"
        assert float(rows[4]["crps"]) == reports["shifted"].crps[1]
        with open(tmp_path / "rank_hist.csv") as fh:
            assert len(list(csv.reader(fh))) == 1 + 2 * 6
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["shifted"]["overall"]["crps"] == reports["shifted"].overall["crps"]
        first = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
        write_report(reports, tmp_path)
        assert first == {p.name: p.read_bytes() for p in tmp_path.iterdir()}
