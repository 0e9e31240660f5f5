import json
import math

import numpy as np
import pytest

from ionthermo import neuralnet as nn
from ionthermo import physics
from ionthermo.dataset import ParamBox, generate_dataset
from ionthermo.evaluation import (
    HeatingLine,
    ScanTrace,
    comparison_to_csv,
    evaluate_model,
    fit_heating_rate,
    gaussian_peak_fit,
    monte_carlo_errorbar,
    noise_sweep,
    verify_against_heating_line,
)
from ionthermo.exceptions import FitFailureError, InvalidInputError, QMismatchError

BOX = ParamBox(n_sidebands=4)


class LookupStub:
    """Returns the registered answer for each exact input row."""

    def __init__(self, n_sidebands, table=None):
        self.n_sidebands = n_sidebands
        self.table = dict(table or {})

    def register(self, x, nbar, omega_t):
        self.table[np.asarray(x, dtype=np.float64).tobytes()] = (nbar, omega_t)

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.array([self.table[row.tobytes()] for row in X])


class ConstantStub:
    def __init__(self, n_sidebands, nbar=500.0, omega_t=math.pi):
        self.n_sidebands = n_sidebands
        self.value = (nbar, omega_t)

    def predict(self, X):
        return np.tile(self.value, (len(np.atleast_2d(X)), 1))


class LinearStub:
    """Smooth, nonconstant map from inputs to predictions."""

    def __init__(self, n_sidebands):
        self.n_sidebands = n_sidebands

    def predict(self, X):
        X = np.atleast_2d(X)
        return np.column_stack([1 + 1499 * X[:, 1:].mean(axis=1), np.full(len(X), math.pi)])


@pytest.fixture(scope="module")
def test_set():
    return generate_dataset(BOX, 400, seed=5, mode="test", tail_epsilon=1e-3)


def oracle_for(dataset):
    stub = LookupStub(dataset.n_sidebands)
    for x, nbar, w in zip(dataset.inputs, dataset.nbar, dataset.omega_t):
        stub.register(x, nbar, w)
    return stub


class TestEvaluate:
    def test_oracle_stub_zero_error(self, test_set):
        rep = evaluate_model(oracle_for(test_set), test_set)
        assert rep.overall_mean_rel_error == 0
        assert rep.mean_abs_omega_t_error == 0
        assert rep.window_mean_rel_error == 0

    def test_conservation(self, test_set):
        rep = evaluate_model(ConstantStub(4), test_set)
        assert sum(rep.bin_counts) == len(test_set)
        assert len(rep.bin_edges) == 25
        weighted = sum(c * e for c, e in zip(rep.bin_counts, rep.bin_mean_rel_error) if c)
        assert rep.overall_mean_rel_error == pytest.approx(weighted / len(test_set), rel=0, abs=1e-12)
        assert all(e >= 0 for c, e in zip(rep.bin_counts, rep.bin_mean_rel_error) if c)

    def test_constant_stub_error(self, test_set):
        rep = evaluate_model(ConstantStub(4, nbar=500.0), test_set)
        expected = np.mean(np.abs(500.0 - test_set.nbar) / test_set.nbar)
        assert rep.overall_mean_rel_error == pytest.approx(expected, rel=1e-14)
        window = (test_set.nbar >= 100) & (test_set.nbar <= 1400)
        assert rep.window_count == window.sum()

    def test_q_mismatch(self, test_set):
        with pytest.raises(QMismatchError):
            evaluate_model(ConstantStub(5), test_set)

    def test_report_json(self, test_set, tmp_path):
        rep = evaluate_model(ConstantStub(4), test_set)
        rep.save(tmp_path / "r.json", extra={"seed": 1})
        data = json.loads((tmp_path / "r.json").read_text())
        assert data["seed"] == 1
        assert data["dataset"]["count"] == len(test_set)
        assert data["model"]["n_sidebands"] == 4

    def test_works_with_mlp(self, test_set):
        rep = evaluate_model(nn.init_model(4, 8, seed=0), test_set)
        assert math.isfinite(rep.overall_mean_rel_error)


class TestNoiseSweep:
    def test_reference_point(self, test_set):
        model = LinearStub(4)
        sweep = noise_sweep(model, test_set, [100, 1000], seed=1)
        ref = evaluate_model(model, test_set)
        assert sweep.points[0].n_measurements is None
        assert sweep.points[0].mean_rel_error == ref.overall_mean_rel_error
        assert [p.n_measurements for p in sweep.points[1:]] == [100, 1000]
        assert len(sweep.errors()) == 2

    def test_deterministic(self, test_set):
        a = noise_sweep(LinearStub(4), test_set, [50], seed=2)
        b = noise_sweep(LinearStub(4), test_set, [50], seed=2)
        assert a.to_dict() == b.to_dict()

    def test_validation(self, test_set):
        with pytest.raises(InvalidInputError):
            noise_sweep(LinearStub(4), test_set, [])
        with pytest.raises(InvalidInputError):
            noise_sweep(LinearStub(4), test_set, [0])

    def test_csv(self, test_set, tmp_path):
        noise_sweep(LinearStub(4), test_set, [10], seed=0).to_csv(tmp_path / "s.csv")
        rows = (tmp_path / "s.csv").read_text().splitlines()
        assert rows[0].startswith("n_measurements") and rows[1].startswith("inf") and len(rows) == 3


class TestMonteCarlo:
    pops = np.array([0.3, 0.5, 0.6, 0.4])

    def test_zero_sigma(self):
        model = LinearStub(4)
        res = monte_carlo_errorbar(model, 0.1, self.pops, 0.0, draws=100)
        mean, std = res
        assert std == 0 and res.clamp_fraction == 0
        assert mean == model.predict(np.concatenate(([0.1], self.pops)))[0, 0]

    def test_nonzero_sigma_positive(self):
        assert monte_carlo_errorbar(LinearStub(4), 0.1, self.pops, 0.01, draws=100).nbar_std > 0

    def test_monotone_in_sigma(self):
        draws = 10_000
        for sigma in (0.005, 0.02, 0.05):
            small = monte_carlo_errorbar(LinearStub(4), 0.1, self.pops, sigma, draws=draws, seed=1).nbar_std
            large = monte_carlo_errorbar(LinearStub(4), 0.1, self.pops, 2 * sigma, draws=draws, seed=2).nbar_std
            # sd of a sample sd is about s / sqrt(2 (draws - 1))
            slack = 3 * math.hypot(small, large) / math.sqrt(2 * (draws - 1))
            assert large >= small - slack

    def test_linear_propagation(self):
        # LinearStub: nbar = 1 + 1499 * mean(p), so std = 1499 * sigma / sqrt(4)
        res = monte_carlo_errorbar(LinearStub(4), 0.1, self.pops, 0.01, draws=20_000, seed=3)
        assert res.nbar_std == pytest.approx(1499 * 0.01 / 2, rel=0.03)

    def test_clamp_flag(self):
        # half the draws at each of the two edge populations leave [0, 1]
        res = monte_carlo_errorbar(LinearStub(4), 0.1, [0.0, 1.0, 0.5, 0.5], 0.05, draws=1000)
        assert 0.2 < res.clamp_fraction < 0.3

    def test_deterministic(self):
        a = monte_carlo_errorbar(LinearStub(4), 0.1, self.pops, 0.02, draws=500, seed=9)
        b = monte_carlo_errorbar(LinearStub(4), 0.1, self.pops, 0.02, draws=500, seed=9)
        assert tuple(a) == tuple(b)

    def test_validation(self):
        with pytest.raises(InvalidInputError):
            monte_carlo_errorbar(LinearStub(4), 0.1, self.pops, 0.01, draws=1)
        with pytest.raises(InvalidInputError):
            monte_carlo_errorbar(LinearStub(4), 0.1, self.pops, -0.01)
        with pytest.raises(QMismatchError):
            monte_carlo_errorbar(LinearStub(5), 0.1, self.pops, 0.01)


def gaussian_trace(a=0.8, f0=0.0, sigma=5e3, b=0.05, n=41, noise=0.0, seed=0, span=40e3):
    f = np.linspace(-span / 2, span / 2, n)
    y = a * np.exp(-0.5 * ((f - f0) / sigma) ** 2) + b
    if noise:
        y = np.clip(y + np.random.default_rng(seed).normal(0, noise, n), 0, 1)
    return ScanTrace(f, y, 100)


class TestPeakFit:
    def test_noiseless_recovery(self):
        fit = gaussian_peak_fit(gaussian_trace())
        assert fit.amplitude == pytest.approx(0.8, abs=1e-6)
        assert fit.center == pytest.approx(0.0, abs=1e-6 * 5e3)
        assert fit.width == pytest.approx(5e3, rel=1e-6)
        assert fit.baseline == pytest.approx(0.05, abs=1e-6)
        assert fit.population == pytest.approx(0.85, abs=1e-6)

    def test_off_center_noiseless(self):
        fit = gaussian_peak_fit(gaussian_trace(a=0.4, f0=3.2e3, sigma=4e3, b=0.1, n=61))
        assert fit.center == pytest.approx(3.2e3, rel=1e-6)
        assert fit.width == pytest.approx(4e3, rel=1e-6)

    def test_noisy_recovery(self):
        good = 0
        for seed in range(100):
            try:
                fit = gaussian_peak_fit(gaussian_trace(noise=0.02, seed=seed))
            except FitFailureError:
                continue
            good += abs(fit.center) < 500 and abs(fit.amplitude - 0.8) < 0.03
        assert good >= 95

    def test_standard_errors_scale_with_noise(self):
        low = gaussian_peak_fit(gaussian_trace(noise=0.005, seed=1))
        high = gaussian_peak_fit(gaussian_trace(noise=0.05, seed=1))
        assert 0 < low.center_se < high.center_se

    def test_flat_trace(self):
        rng = np.random.default_rng(0)
        f = np.linspace(-20e3, 20e3, 41)
        for seed in range(10):
            y = np.clip(0.3 + np.random.default_rng(seed).normal(0, 0.01, 41), 0, 1)
            try:
                fit = gaussian_peak_fit(ScanTrace(f, y, 100))
            except FitFailureError:
                continue
            # no confident peak: amplitude is small or its error bar swallows it
            assert abs(fit.amplitude) < 0.05 or fit.amplitude_se > abs(fit.amplitude) / 3
        assert rng is not None

    def test_trace_validation(self):
        with pytest.raises(InvalidInputError):
            ScanTrace([0, 1, 2, 3], [0.1] * 4, 10)
        with pytest.raises(InvalidInputError):
            ScanTrace([0, 1, 2, 3, 3], [0.1] * 5, 10)
        with pytest.raises(InvalidInputError):
            ScanTrace([0, 1, 2, 3, 4], [0.1, 0.2, 1.2, 0.1, 0.1], 10)

    def test_csv_ingest(self, tmp_path):
        trace = gaussian_trace()
        path = tmp_path / "scan.csv"
        lines = ["frequency_hz,population,n_measurements"]
        lines += [f"{float(f)!r},{float(p)!r},100" for f, p in zip(trace.frequency, trace.population)]
        path.write_text("\n".join(lines) + "\n")
        loaded = ScanTrace.from_csv(path)
        np.testing.assert_array_equal(loaded.population, trace.population)
        path.write_text("freq,population\n1,0.5\n")
        with pytest.raises(InvalidInputError):
            ScanTrace.from_csv(path)


class TestHeatingFit:
    def test_exact_line(self):
        t = np.array([0.5, 1.0, 2.0, 4.0, 7.0])
        line = fit_heating_rate(t, 10 + 182 * t)
        assert line.rate == pytest.approx(182, rel=1e-12)
        assert line.intercept == pytest.approx(10, abs=1e-9)
        assert line.rate_se == pytest.approx(0, abs=1e-9)
        assert line.intercept_se == pytest.approx(0, abs=1e-9)

    def test_two_points(self):
        line = fit_heating_rate([1.0, 3.0], [20.0, 26.0])
        assert (line.rate, line.intercept) == (3.0, 17.0)
        assert line.rate_se == 0 and line.intercept_se == 0
        np.testing.assert_allclose(line([1.0, 3.0]), [20.0, 26.0])

    def test_noisy_coverage(self):
        t = np.linspace(0.1, 5.0, 8)
        hits = 0
        for seed in range(100):
            y = 10 + 182 * t + np.random.default_rng(seed).normal(0, 30, len(t))
            line = fit_heating_rate(t, y)
            hits += abs(line.rate - 182) <= 3 * line.rate_se
        assert hits >= 95

    def test_validation(self):
        with pytest.raises(InvalidInputError):
            fit_heating_rate([1.0, 1.0], [2.0, 3.0])
        with pytest.raises(InvalidInputError):
            fit_heating_rate([1.0, 2.0], [2.0])


class TestVerifyLine:
    def oracle(self, line, durations, eta=0.122, omega_t=math.pi):
        stub = LookupStub(4)
        for t in durations:
            nbar = float(line(t))
            pops = physics.spectrum(nbar, eta, omega_t, 4).populations
            stub.register(np.concatenate(([eta], pops)), nbar, omega_t)
        return stub

    def test_oracle_zero_deviation(self, tmp_path):
        line = HeatingLine(182.0, 10.0)
        durations = [0.5, 1.0, 3.0, 7.0]
        rows = verify_against_heating_line(self.oracle(line, durations), line, durations, seed=0)
        assert [r.nbar_reference for r in rows] == [101.0, 192.0, 556.0, 1284.0]
        assert all(r.relative_deviation == 0 for r in rows)
        comparison_to_csv(rows, tmp_path / "c.csv")
        assert len((tmp_path / "c.csv").read_text().splitlines()) == 5

    def test_noise_is_seeded(self):
        line = HeatingLine(100.0, 20.0)
        a = verify_against_heating_line(LinearStub(4), line, [1, 2, 3], seed=4, noise_n=50)
        b = verify_against_heating_line(LinearStub(4), line, [1, 2, 3], seed=4, noise_n=50)
        clean = verify_against_heating_line(LinearStub(4), line, [1, 2, 3], seed=4)
        assert a == b
        assert a != clean
