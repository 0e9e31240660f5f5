"""Forward model of blue-sideband excitation for a thermal motional state.

The coupling of Fock state ``n`` to ``n + q`` relative to the bare Rabi
frequency is

    k(n, q) = exp(-eta**2 / 2) * eta**q * sqrt(n! / (n + q)!) * L_n^q(eta**2)

and the excited-state population after a pulse of area ``omega_t`` is

    P(q) = sum_n p_n * sin(k(n, q) * omega_t)**2

with ``p_n`` the (truncated, renormalized) thermal distribution.  Relaxation
during the pulse (a factor ``exp(-gamma_n t)`` per Fock state) is neglected;
no decay rates enter anywhere in this module.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .exceptions import InvalidInputError, ResourceLimitError

HBAR = 1.054571817e-34  # J s
ATOMIC_MASS_UNIT = 1.66053906660e-27  # kg
CA40_ION_MASS = 39.962590863 * ATOMIC_MASS_UNIT

MAX_FOCK = 20000
MAX_NBAR = 2000.0
DEFAULT_TAIL_EPSILON = 1e-4
MAX_OMEGA_T = 4 * math.pi

_MIN_TRAP = 2 * math.pi * 10e3
_MAX_TRAP = 2 * math.pi * 100e6


@dataclass(frozen=True)
class ExperimentGeometry:
    """Ion mass (kg), laser wavenumber (rad/m), beam angle (rad), trap frequency (rad/s)."""

    ion_mass: float
    wavenumber: float
    angle: float
    trap_frequency: float

    def __post_init__(self):
        if not self.ion_mass > 0:
            raise InvalidInputError(f"ion_mass must be positive, got {self.ion_mass}")
        if not self.wavenumber > 0:
            raise InvalidInputError(f"wavenumber must be positive, got {self.wavenumber}")
        if not 0 <= self.angle <= math.pi / 2:
            raise InvalidInputError(f"angle must lie in [0, pi/2], got {self.angle}")
        if not _MIN_TRAP <= self.trap_frequency <= _MAX_TRAP:
            raise InvalidInputError(
                f"trap_frequency {self.trap_frequency:g} rad/s outside "
                "[2pi*10 kHz, 2pi*100 MHz]"
            )

    @classmethod
    def from_wavelength(cls, ion_mass, wavelength, angle, trap_frequency_hz):
        """Build from a wavelength in metres and an ordinary trap frequency in Hz."""
        return cls(ion_mass, 2 * math.pi / wavelength, angle, 2 * math.pi * trap_frequency_hz)


def lamb_dicke(geometry: ExperimentGeometry) -> float:
    eta = math.cos(geometry.angle) * geometry.wavenumber * math.sqrt(
        HBAR / (2 * geometry.ion_mass * geometry.trap_frequency)
    )
    if eta >= 1:
        raise InvalidInputError(f"Lamb-Dicke parameter {eta:g} is not below 1")
    # cos(pi/2) is 6e-17, not 0
    return 0.0 if eta < 1e-15 else eta


def laguerre(n: int, alpha: int, x: float, cap: int = MAX_FOCK) -> float:
    """Generalized Laguerre polynomial ``L_n^alpha(x)`` by upward recurrence.

    Uses ``(k + 1) L_{k+1} = (2k + 1 + alpha - x) L_k - (k + alpha) L_{k-1}``.
    Unscaled values overflow for large ``n``; see :func:`coupling_table` for
    the bounded form used by the forward model.
    """
    if n < 0 or alpha < 0:
        raise InvalidInputError("n and alpha must be non-negative")
    if n > cap:
        raise ResourceLimitError(f"Laguerre degree {n} exceeds cap {cap}")
    prev, cur = 0.0, 1.0
    for k in range(n):
        prev, cur = cur, ((2 * k + 1 + alpha - x) * cur - (k + alpha) * prev) / (k + 1)
    return cur


@njit(cache=True)
def _fill_coupling(eta, q, n_max, out):
    # Recurrence on c_n = e^{-x/2} eta^q sqrt(n!/(n+q)!) L_n^q(x), x = eta^2.
    # Folding the factorial ratio into the three-term Laguerre recurrence gives
    #   c_{n+1} sqrt((n+1)(n+q+1)) = (2n+1+q-x) c_n - sqrt(n(n+q)) c_{n-1},
    # whose iterates stay bounded by 1.
    x = eta * eta
    if eta == 0.0:
        out[: n_max + 1] = 0.0
        return
    c = math.exp(-0.5 * x + q * math.log(eta) - 0.5 * math.lgamma(q + 1.0))
    prev = 0.0
    for n in range(n_max + 1):
        out[n] = c
        nxt = ((2.0 * n + 1.0 + q - x) * c - math.sqrt(n * (n + q + 0.0)) * prev) / math.sqrt(
            (n + 1.0) * (n + q + 1.0)
        )
        prev = c
        c = nxt


@njit(cache=True)
def _thermal_probs(nbar, n_max, out):
    log_ratio = -math.log1p(1.0 / nbar)
    log_p0 = -math.log1p(nbar)
    total = 0.0
    for n in range(n_max + 1):
        p = math.exp(log_p0 + n * log_ratio)
        out[n] = p
        total += p
    for n in range(n_max + 1):
        out[n] /= total


@njit(cache=True)
def _spectra_kernel(nbar, eta, omega_t, n_max, n_sidebands, out):
    size = 0
    for i in range(n_max.shape[0]):
        size = max(size, n_max[i] + 1)
    probs = np.empty(size)
    coupling = np.empty(size)
    for i in range(nbar.shape[0]):
        m = n_max[i]
        _thermal_probs(nbar[i], m, probs)
        for j in range(n_sidebands):
            _fill_coupling(eta[i], j + 1, m, coupling)
            acc = 0.0
            for n in range(m + 1):
                s = math.sin(coupling[n] * omega_t[i])
                acc += probs[n] * s * s
            out[i, j] = acc


def _check_eta(eta):
    if not 0 <= eta < 1:
        raise InvalidInputError(f"eta must lie in [0, 1), got {eta}")


def _check_fock(n_max, cap):
    if n_max > cap:
        raise ResourceLimitError(f"Fock-space cutoff {n_max} exceeds cap {cap}")


@dataclass(frozen=True)
class CouplingTable:
    """Coupling ratios ``k(n, q)`` for ``n = 0..n_max`` at fixed ``eta`` and ``q``."""

    eta: float
    q: int
    values: np.ndarray

    @property
    def n_max(self) -> int:
        return len(self.values) - 1


def coupling_table(eta: float, q: int, n_max: int, cap: int = MAX_FOCK) -> CouplingTable:
    _check_eta(eta)
    if q < 1:
        raise InvalidInputError(f"sideband order must be positive, got {q}")
    if n_max < 0:
        raise InvalidInputError("n_max must be non-negative")
    _check_fock(n_max, cap)
    values = np.empty(n_max + 1)
    _fill_coupling(float(eta), int(q), int(n_max), values)
    values.flags.writeable = False
    return CouplingTable(float(eta), int(q), values)


def coupling_ratio(n: int, q: int, eta: float, cap: int = MAX_FOCK) -> float:
    """Coupling of ``|n>`` to ``|n + q>`` in units of the bare Rabi frequency."""
    if n < 0:
        raise InvalidInputError("n must be non-negative")
    return float(coupling_table(eta, q, n, cap=cap).values[n])


@dataclass(frozen=True)
class ThermalDistribution:
    nbar: float
    probs: np.ndarray
    tail_epsilon: float

    @property
    def n_max(self) -> int:
        return len(self.probs) - 1

    def __len__(self):
        return len(self.probs)


def thermal_cutoff(nbar: float, tail_epsilon: float) -> int:
    """Smallest ``n_max`` whose discarded tail ``(nbar/(nbar+1))**(n_max+1)`` is below ``tail_epsilon``."""
    log_ratio = -math.log1p(1.0 / nbar)
    n_max = max(int(math.floor(math.log(tail_epsilon) / log_ratio)), 0)
    # guard the floor against rounding on either side
    while n_max > 0 and n_max * log_ratio < math.log(tail_epsilon):
        n_max -= 1
    while (n_max + 1) * log_ratio >= math.log(tail_epsilon):
        n_max += 1
    return n_max


def _check_thermal_args(nbar, tail_epsilon):
    if not 0 < nbar <= MAX_NBAR:
        raise InvalidInputError(f"nbar must lie in (0, {MAX_NBAR:g}], got {nbar}")
    if not 0 < tail_epsilon <= 0.1:
        raise InvalidInputError(f"tail_epsilon must lie in (0, 0.1], got {tail_epsilon}")


def thermal_pmf(
    nbar: float, tail_epsilon: float = DEFAULT_TAIL_EPSILON, cap: int = MAX_FOCK
) -> ThermalDistribution:
    """Thermal phonon distribution ``nbar**n / (nbar + 1)**(n + 1)``, truncated and renormalized."""
    _check_thermal_args(nbar, tail_epsilon)
    n_max = thermal_cutoff(nbar, tail_epsilon)
    _check_fock(n_max, cap)
    probs = np.empty(n_max + 1)
    _thermal_probs(float(nbar), n_max, probs)
    probs.flags.writeable = False
    return ThermalDistribution(float(nbar), probs, float(tail_epsilon))


def sideband_population(
    dist: ThermalDistribution, table: CouplingTable, omega_t: float
) -> float:
    if len(table.values) < len(dist.probs):
        raise InvalidInputError(
            f"coupling table ({len(table.values)} entries) shorter than distribution "
            f"({len(dist.probs)} entries)"
        )
    if not abs(omega_t) <= MAX_OMEGA_T:
        raise InvalidInputError(f"|omega_t| must be at most 4 pi, got {omega_t}")
    s = np.sin(table.values[: len(dist.probs)] * omega_t)
    return float(np.clip(np.dot(dist.probs, s * s), 0.0, 1.0))


@dataclass(frozen=True)
class SidebandSpectrum:
    """Excitation probabilities of blue sidebands ``1..Q`` together with ``eta``."""

    eta: float
    populations: np.ndarray

    @property
    def n_sidebands(self) -> int:
        return len(self.populations)

    def as_input(self) -> np.ndarray:
        """Network input vector ``[eta, P(1), ..., P(Q)]``."""
        return np.concatenate(([self.eta], self.populations))


def spectrum(
    nbar: float,
    eta: float,
    omega_t: float,
    n_sidebands: int,
    tail_epsilon: float = DEFAULT_TAIL_EPSILON,
) -> SidebandSpectrum:
    if n_sidebands < 1:
        raise InvalidInputError("n_sidebands must be at least 1")
    dist = thermal_pmf(nbar, tail_epsilon)
    pops = np.array(
        [
            sideband_population(dist, coupling_table(eta, q, dist.n_max), omega_t)
            for q in range(1, n_sidebands + 1)
        ]
    )
    pops.flags.writeable = False
    return SidebandSpectrum(float(eta), pops)


def spectra(
    nbar,
    eta,
    omega_t,
    n_sidebands: int,
    tail_epsilon: float = DEFAULT_TAIL_EPSILON,
    cap: int = MAX_FOCK,
) -> np.ndarray:
    """Vectorized :func:`spectrum` over parameter arrays; returns shape ``(len(nbar), Q)``.

    Raises :class:`ResourceLimitError` carrying the offending record index in
    its message when a cutoff exceeds ``cap``.
    """
    nbar = np.ascontiguousarray(nbar, dtype=np.float64).ravel()
    eta = np.ascontiguousarray(eta, dtype=np.float64).ravel()
    omega_t = np.ascontiguousarray(omega_t, dtype=np.float64).ravel()
    if not len(nbar) == len(eta) == len(omega_t):
        raise InvalidInputError("parameter arrays differ in length")
    if n_sidebands < 1:
        raise InvalidInputError("n_sidebands must be at least 1")
    n_max = np.empty(len(nbar), dtype=np.int64)
    for i, (nb, e, w) in enumerate(zip(nbar, eta, omega_t)):
        try:
            _check_thermal_args(nb, tail_epsilon)
            _check_eta(e)
            if not abs(w) <= MAX_OMEGA_T:
                raise InvalidInputError(f"|omega_t| must be at most 4 pi, got {w}")
            n_max[i] = thermal_cutoff(nb, tail_epsilon)
            _check_fock(n_max[i], cap)
        except (InvalidInputError, ResourceLimitError) as exc:
            raise type(exc)(f"record {i}: {exc}") from exc
    out = np.empty((len(nbar), n_sidebands))
    if len(nbar):
        _spectra_kernel(nbar, eta, omega_t, n_max, n_sidebands, out)
    return out
