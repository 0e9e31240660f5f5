"""Test-set metrics, noise sweeps, error bars, and the analysis of scan data.

Anything with a ``predict(X) -> (n, 2)`` method and an ``n_sidebands``
attribute can be evaluated: :class:`~ionthermo.neuralnet.MlpModel`,
:class:`~ionthermo.estimator.SidebandThermometer`, or a test stub.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import physics
from .dataset import Dataset, apply_projection_noise, binomial_noise
from .exceptions import FitFailureError, InvalidInputError, QMismatchError

N_BINS = 24
NBAR_BIN_RANGE = (1.0, 1500.0)
LOW_NBAR = 8.0
WINDOW = (100.0, 1400.0)


def _check_q(model, n_sidebands):
    if model.n_sidebands != n_sidebands:
        raise QMismatchError(f"model expects Q={model.n_sidebands}, data has Q={n_sidebands}")


def _model_identity(model):
    meta = getattr(model, "meta", None) or {}
    ident = {"type": type(model).__name__, "n_sidebands": model.n_sidebands}
    for key in ("init_seed", "epochs_trained", "final_loss", "noise_n"):
        if key in meta:
            ident[key] = meta[key]
    return ident


@dataclass
class EvalReport:
    bin_edges: list
    bin_counts: list
    bin_mean_rel_error: list
    overall_mean_rel_error: float
    overall_sem: float
    mean_abs_omega_t_error: float
    window: tuple
    window_count: int
    window_mean_rel_error: float
    window_sem: float
    low_nbar_count: int
    low_nbar_fraction_ge_10pct: float
    model: dict
    dataset: dict
    rel_errors: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("rel_errors")
        d["bin_mean_rel_error"] = [None if math.isnan(v) else v for v in self.bin_mean_rel_error]
        return d

    def save(self, path, extra: dict | None = None):
        Path(path).write_text(json.dumps({**self.to_dict(), **(extra or {})}, indent=2, default=str))


def relative_errors(model, dataset: Dataset):
    _check_q(model, dataset.n_sidebands)
    pred = np.asarray(model.predict(dataset.inputs), dtype=np.float64).reshape(len(dataset), 2)
    rel = np.abs(pred[:, 0] - dataset.nbar) / dataset.nbar
    return rel, np.abs(pred[:, 1] - dataset.omega_t)


def _sem(x):
    return float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else float("nan")


def evaluate_model(model, test_dataset: Dataset, n_bins: int = N_BINS, window=WINDOW) -> EvalReport:
    """Mean ``|nbar_hat - nbar| / nbar`` overall, per geometric nbar bin, and in ``window``."""
    rel, d_omega = relative_errors(model, test_dataset)
    nbar = test_dataset.nbar
    edges = np.geomspace(*NBAR_BIN_RANGE, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, nbar, side="right") - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    sums = np.bincount(idx, weights=rel, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        bin_mean = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    in_window = (nbar >= window[0]) & (nbar <= window[1])
    low = nbar < LOW_NBAR
    empty = float("nan")
    return EvalReport(
        bin_edges=edges.tolist(),
        bin_counts=counts.tolist(),
        bin_mean_rel_error=bin_mean.tolist(),
        overall_mean_rel_error=float(rel.mean()) if len(rel) else empty,
        overall_sem=_sem(rel),
        mean_abs_omega_t_error=float(d_omega.mean()) if len(rel) else empty,
        window=tuple(window),
        window_count=int(in_window.sum()),
        window_mean_rel_error=float(rel[in_window].mean()) if in_window.any() else empty,
        window_sem=_sem(rel[in_window]),
        low_nbar_count=int(low.sum()),
        low_nbar_fraction_ge_10pct=float((rel[low] >= 0.1).mean()) if low.any() else empty,
        model=_model_identity(model),
        dataset=test_dataset.header(),
        rel_errors=rel,
    )


@dataclass
class SweepPoint:
    n_measurements: int | None  # None for the noise-free reference
    mean_rel_error: float
    sem: float
    window_mean_rel_error: float


@dataclass
class NoiseSweep:
    seed: int
    points: list

    def errors(self):
        return [p.mean_rel_error for p in self.points if p.n_measurements is not None]

    def to_dict(self):
        return {"seed": self.seed, "points": [asdict(p) for p in self.points]}

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["n_measurements", "mean_rel_error", "sem", "window_mean_rel_error"])
            for p in self.points:
                writer.writerow(
                    ["inf" if p.n_measurements is None else p.n_measurements,
                     p.mean_rel_error, p.sem, p.window_mean_rel_error]
                )


def noise_sweep(model, test_dataset: Dataset, Ns, seed: int = 0) -> NoiseSweep:
    """Re-evaluate with binomial projection noise for each measurement count in ``Ns``.

    The first point is the noise-free reference.
    """
    Ns = list(Ns)
    if not Ns:
        raise InvalidInputError("need at least one measurement count")
    if any(int(n) < 1 for n in Ns):
        raise InvalidInputError("measurement counts must be at least 1")
    ref = evaluate_model(model, test_dataset)
    points = [SweepPoint(None, ref.overall_mean_rel_error, ref.overall_sem, ref.window_mean_rel_error)]
    for n in Ns:
        rep = evaluate_model(model, apply_projection_noise(test_dataset, int(n), seed))
        points.append(SweepPoint(int(n), rep.overall_mean_rel_error, rep.overall_sem, rep.window_mean_rel_error))
    return NoiseSweep(seed, points)


@dataclass
class MonteCarloResult:
    nbar_mean: float
    nbar_std: float
    omega_t_mean: float
    omega_t_std: float
    clamp_fraction: float

    def __iter__(self):
        yield self.nbar_mean
        yield self.nbar_std


def monte_carlo_errorbar(model, eta, populations, sigmas, draws: int = 1000, seed: int = 0) -> MonteCarloResult:
    """Spread of predictions under independent normal perturbations of the populations.

    Perturbed values are clipped to [0, 1]; ``clamp_fraction`` reports how many
    population values needed it.
    """
    populations = np.asarray(populations, dtype=np.float64).ravel()
    sigmas = np.broadcast_to(np.asarray(sigmas, dtype=np.float64), populations.shape)
    _check_q(model, len(populations))
    if draws < 2:
        raise InvalidInputError(f"need at least 2 draws, got {draws}")
    if np.any(sigmas < 0):
        raise InvalidInputError("standard deviations must be non-negative")
    x0 = np.concatenate(([eta], populations))
    if not np.any(sigmas > 0):
        nbar, omega_t = np.asarray(model.predict(x0[None, :]), dtype=float).reshape(2)
        return MonteCarloResult(float(nbar), 0.0, float(omega_t), 0.0, 0.0)
    rng = np.random.default_rng(seed)
    raw = populations + sigmas * rng.standard_normal((draws, len(populations)))
    pops = np.clip(raw, 0.0, 1.0)
    X = np.column_stack([np.full(draws, eta), pops])
    out = np.asarray(model.predict(X), dtype=float)
    return MonteCarloResult(
        float(out[:, 0].mean()),
        float(out[:, 0].std(ddof=1)),
        float(out[:, 1].mean()),
        float(out[:, 1].std(ddof=1)),
        float((pops != raw).mean()),
    )


# --- scan traces and Gaussian peaks -----------------------------------------

@dataclass
class ScanTrace:
    frequency: np.ndarray  # Hz offset
    population: np.ndarray
    n_measurements: np.ndarray

    def __post_init__(self):
        self.frequency = np.asarray(self.frequency, dtype=np.float64).ravel()
        self.population = np.asarray(self.population, dtype=np.float64).ravel()
        self.n_measurements = np.broadcast_to(
            np.asarray(self.n_measurements, dtype=np.int64), self.frequency.shape
        ).copy()
        if not len(self.frequency) == len(self.population):
            raise InvalidInputError("frequency and population columns differ in length")
        if len(self.frequency) < 5:
            raise InvalidInputError(f"need at least 5 scan points, got {len(self.frequency)}")
        if np.any((self.population < 0) | (self.population > 1)):
            raise InvalidInputError("populations must lie in [0, 1]")
        if np.any(np.diff(self.frequency) <= 0):
            raise InvalidInputError("frequencies must be strictly increasing")

    @classmethod
    def from_csv(cls, path) -> "ScanTrace":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"frequency_hz", "population", "n_measurements"} - set(reader.fieldnames or ())
            if missing:
                raise InvalidInputError(f"scan CSV lacks columns {sorted(missing)}")
            try:
                rows = [(float(r["frequency_hz"]), float(r["population"]), int(float(r["n_measurements"])))
                        for r in reader]
            except (TypeError, ValueError) as exc:
                raise InvalidInputError(f"malformed scan CSV row: {exc}") from None
        f, p, n = zip(*rows) if rows else ((), (), ())
        return cls(np.array(f), np.array(p), np.array(n))


@dataclass
class PeakFit:
    amplitude: float
    center: float
    width: float
    baseline: float
    amplitude_se: float
    center_se: float
    width_se: float
    baseline_se: float
    iterations: int
    residual: float

    @property
    def population(self) -> float:
        """Peak height ``amplitude + baseline`` used as the sideband population."""
        return self.amplitude + self.baseline

    @property
    def population_se(self) -> float:
        return math.hypot(self.amplitude_se, self.baseline_se)


def _gauss_jac(p, u):
    a, c, s, _ = p
    d = u - c
    g = np.exp(-0.5 * (d / s) ** 2)
    model = a * g + p[3]
    jac = np.column_stack([g, a * g * d / s**2, a * g * d**2 / s**3, np.ones_like(u)])
    return model, jac


def gaussian_peak_fit(trace: ScanTrace, max_iter: int = 200, gtol: float = 1e-10) -> PeakFit:
    """Levenberg-Marquardt fit of ``a exp(-(f - f0)^2 / (2 w^2)) + b``.

    Frequencies are rescaled to the unit interval for the solve.  Standard
    errors come from ``s^2 (J^T J)^-1`` with ``s^2`` the residual variance.
    """
    f, y = trace.frequency, trace.population
    f_mid = 0.5 * (f[0] + f[-1])
    span = f[-1] - f[0]
    u = (f - f_mid) / span
    k = int(np.argmax(y))
    b0 = float(y.min())
    p = np.array([float(y[k]) - b0, u[k], 1.0 / 6.0, b0])
    lam = 1e-3
    model, jac = _gauss_jac(p, u)
    r = model - y
    cost = float(r @ r)
    for it in range(1, max_iter + 1):
        grad = jac.T @ r
        if np.max(np.abs(grad)) < gtol:
            break
        jtj = jac.T @ jac
        diag = np.maximum(np.diag(jtj), 1e-12)
        while True:
            try:
                step = np.linalg.solve(jtj + lam * np.diag(diag), -grad)
            except np.linalg.LinAlgError:
                step = None
            if step is not None:
                trial = p + step
                if trial[2] != 0:
                    t_model, t_jac = _gauss_jac(trial, u)
                    t_r = t_model - y
                    t_cost = float(t_r @ t_r)
                    if t_cost < cost:
                        break
            lam *= 10.0
            if lam > 1e16:
                break
        if lam > 1e16:
            # no descent direction left at working precision
            break
        p, model, jac, r, cost = trial, t_model, t_jac, t_r, t_cost
        lam = max(lam / 10.0, 1e-12)
    else:
        raise FitFailureError(f"no convergence after {max_iter} iterations", residual=math.sqrt(cost))
    p[2] = abs(p[2])
    _, jac = _gauss_jac(p, u)
    dof = len(y) - 4
    s2 = cost / dof if dof > 0 else float("nan")
    try:
        cov = s2 * np.linalg.inv(jac.T @ jac)
        se = np.sqrt(np.abs(np.diag(cov)))
    except np.linalg.LinAlgError:
        se = np.full(4, np.inf)
    se = np.where(np.isfinite(se), se, np.inf)
    return PeakFit(
        amplitude=float(p[0]),
        center=float(f_mid + span * p[1]),
        width=float(span * p[2]),
        baseline=float(p[3]),
        amplitude_se=float(se[0]),
        center_se=float(span * se[1]),
        width_se=float(span * se[2]),
        baseline_se=float(se[3]),
        iterations=it,
        residual=math.sqrt(cost),
    )


# --- heating line -------------------------------------------------------------

@dataclass
class HeatingLine:
    """``nbar(t) = intercept + rate * t`` with ``t`` in milliseconds."""

    rate: float
    intercept: float
    rate_se: float = 0.0
    intercept_se: float = 0.0

    def __call__(self, t):
        return self.intercept + self.rate * np.asarray(t, dtype=float)


def fit_heating_rate(durations, nbars) -> HeatingLine:
    """Ordinary least squares line through ``(duration_ms, nbar)`` points.

    With exactly two distinct durations the line interpolates and both
    standard errors are reported as 0.
    """
    t = np.asarray(durations, dtype=np.float64).ravel()
    y = np.asarray(nbars, dtype=np.float64).ravel()
    if len(t) != len(y):
        raise InvalidInputError("durations and nbar values differ in length")
    if len(np.unique(t)) < 2:
        raise InvalidInputError("need at least two distinct durations")
    t_mean, y_mean = t.mean(), y.mean()
    sxx = float(((t - t_mean) ** 2).sum())
    rate = float(((t - t_mean) * (y - y_mean)).sum() / sxx)
    intercept = float(y_mean - rate * t_mean)
    dof = len(t) - 2
    if dof > 0:
        s2 = float(((y - intercept - rate * t) ** 2).sum()) / dof
        rate_se = math.sqrt(s2 / sxx)
        intercept_se = math.sqrt(s2 * (1.0 / len(t) + t_mean**2 / sxx))
    else:
        rate_se = intercept_se = 0.0
    return HeatingLine(rate, intercept, rate_se, intercept_se)


@dataclass
class LineComparison:
    duration_ms: float
    nbar_reference: float
    nbar_predicted: float
    omega_t_predicted: float
    relative_deviation: float
    clamped: bool


def verify_against_heating_line(
    model,
    line: HeatingLine,
    durations,
    seed: int = 0,
    noise_n: int | None = None,
    eta: float = 0.122,
    omega_t: float = math.pi,
    tail_epsilon: float = physics.DEFAULT_TAIL_EPSILON,
):
    """Predict nbar from synthetic spectra prepared at ``line(t)`` for each duration."""
    rows = []
    for i, t in enumerate(durations):
        nbar_ref = float(line(t))
        spec = physics.spectrum(nbar_ref, eta, omega_t, model.n_sidebands, tail_epsilon)
        pops = spec.populations
        if noise_n:
            pops = binomial_noise(pops, noise_n, seed, record_offset=i)
        x = np.concatenate(([eta], pops))[None, :]
        nbar_hat, omega_hat = np.asarray(model.predict(x), dtype=float).reshape(2)
        rows.append(
            LineComparison(
                float(t), nbar_ref, float(nbar_hat), float(omega_hat),
                abs(nbar_hat - nbar_ref) / nbar_ref,
                bool(nbar_hat <= 1.0 or nbar_hat >= 1500.0),
            )
        )
    return rows


def comparison_to_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f.name for f in fields(LineComparison)])
        for row in rows:
            writer.writerow(list(asdict(row).values()))
