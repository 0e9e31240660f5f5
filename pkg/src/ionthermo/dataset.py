"""Synthetic training and test sets over the (nbar, eta, omega_t) parameter box.

Every random draw is keyed by ``(seed, record index, ...)`` through
:class:`numpy.random.SeedSequence`, so a record's content does not depend on
how the index range is split between workers.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import physics
from .exceptions import FormatError, InvalidInputError, QMismatchError

FORMAT_VERSION = 1
MAGIC = b"PNDS"
_HEADER = struct.Struct("<4sIHBBIQQ6d")
_CHUNK = 1024

MODES = ("train", "test")


@dataclass(frozen=True)
class ParamBox:
    nbar_range: tuple = (1.0, 1500.0)
    eta_range: tuple = (0.069, 0.217)
    omega_t_range: tuple = (0.5 * math.pi, 2 * math.pi)
    n_sidebands: int = 15

    def __post_init__(self):
        for name, (lo, hi) in (
            ("nbar_range", self.nbar_range),
            ("eta_range", self.eta_range),
            ("omega_t_range", self.omega_t_range),
        ):
            if not lo <= hi:
                raise InvalidInputError(f"{name} is empty: {lo} > {hi}")
        if not (0 < self.nbar_range[0] and self.nbar_range[1] <= physics.MAX_NBAR):
            raise InvalidInputError(f"nbar_range outside (0, {physics.MAX_NBAR:g}]")
        if not (0 < self.eta_range[0] and self.eta_range[1] < 1):
            raise InvalidInputError("eta_range outside (0, 1)")
        if not (0 <= self.omega_t_range[0] and self.omega_t_range[1] <= physics.MAX_OMEGA_T):
            raise InvalidInputError("omega_t_range outside [0, 4 pi]")
        if self.n_sidebands < 1:
            raise InvalidInputError("n_sidebands must be at least 1")

    def bounds(self):
        return (*self.nbar_range, *self.eta_range, *self.omega_t_range)


def _record_rng(*key):
    if any(int(k) < 0 for k in key):
        raise InvalidInputError(f"seeds and indices must be non-negative, got {key}")
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def sample_params(box: ParamBox, seed: int, index: int, mode: str = "train"):
    """Draw ``(nbar, eta, omega_t)`` for one record.

    Training records take integer ``nbar`` uniformly from the box; test records
    take real ``nbar``.
    """
    if mode not in MODES:
        raise InvalidInputError(f"mode must be one of {MODES}, got {mode!r}")
    rng = _record_rng(seed, index)
    lo, hi = box.nbar_range
    if mode == "train":
        nbar = float(rng.integers(math.ceil(lo), math.floor(hi), endpoint=True))
    else:
        nbar = float(rng.uniform(lo, hi))
    eta = float(rng.uniform(*box.eta_range))
    omega_t = float(rng.uniform(*box.omega_t_range))
    return nbar, eta, omega_t


def scale_targets(nbar, omega_t):
    """Map targets onto the network's output scale.

    ``y1 = nbar/75 - 10`` and ``y2 = 7.5 (omega_t/pi - 1/2) - 10``; the second
    map takes [0.5 pi, 2 pi] onto [-10, 1.25], not onto [-10, 10].
    """
    y1 = np.asarray(nbar, dtype=float) / 75.0 - 10.0
    y2 = 7.5 * (np.asarray(omega_t, dtype=float) / math.pi - 0.5) - 10.0
    return y1, y2


def unscale_targets(y1, y2):
    nbar = 75.0 * (np.asarray(y1, dtype=float) + 10.0)
    omega_t = math.pi * ((np.asarray(y2, dtype=float) + 10.0) / 7.5 + 0.5)
    return nbar, omega_t


@dataclass
class Dataset:
    """Column-oriented store of spectra and their generating parameters."""

    box: ParamBox
    seed: int
    mode: str
    eta: np.ndarray
    populations: np.ndarray
    nbar: np.ndarray
    omega_t: np.ndarray
    noise_n: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        pops = np.asarray(self.populations)
        if pops.ndim == 2 and pops.shape[1] != self.box.n_sidebands:
            raise QMismatchError(
                f"populations have {pops.shape[1]} columns, box declares Q={self.box.n_sidebands}"
            )
        self.eta = np.asarray(self.eta, dtype=np.float64).reshape(-1)
        self.nbar = np.asarray(self.nbar, dtype=np.float64).reshape(-1)
        self.omega_t = np.asarray(self.omega_t, dtype=np.float64).reshape(-1)
        self.populations = np.asarray(self.populations, dtype=np.float64).reshape(
            len(self.eta), self.box.n_sidebands
        )
        n = len(self.eta)
        if not len(self.nbar) == len(self.omega_t) == len(self.populations) == n:
            raise InvalidInputError("dataset columns differ in length")


    @property
    def n_sidebands(self) -> int:
        return self.box.n_sidebands

    def __len__(self):
        return len(self.eta)

    @property
    def inputs(self) -> np.ndarray:
        """Network inputs, one row ``[eta, P(1), ..., P(Q)]`` per record."""
        return np.column_stack([self.eta, self.populations])

    @property
    def targets(self) -> np.ndarray:
        return np.column_stack([self.nbar, self.omega_t])

    @property
    def scaled_targets(self) -> np.ndarray:
        return np.column_stack(scale_targets(self.nbar, self.omega_t))

    def with_sidebands(self, n_sidebands: int) -> "Dataset":
        """Keep only sidebands ``1..n_sidebands``; each column is independent of Q."""
        if not 1 <= n_sidebands <= self.n_sidebands:
            raise QMismatchError(
                f"cannot take {n_sidebands} sidebands from a Q={self.n_sidebands} dataset"
            )
        return replace(
            self,
            box=replace(self.box, n_sidebands=n_sidebands),
            populations=self.populations[:, :n_sidebands].copy(),
        )

    def subset(self, mask) -> "Dataset":
        return replace(
            self,
            eta=self.eta[mask],
            populations=self.populations[mask],
            nbar=self.nbar[mask],
            omega_t=self.omega_t[mask],
        )

    def header(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "n_sidebands": self.n_sidebands,
            "mode": self.mode,
            "noise_n": self.noise_n or "noise-free",
            "count": len(self),
            "seed": self.seed,
            "box": asdict(self.box),
        }

    # --- serialization -------------------------------------------------

    def _record_dtype(self):
        return np.dtype(
            [("eta", "<f8"), ("populations", "<f8", (self.n_sidebands,)),
             ("nbar", "<f8"), ("omega_t", "<f8")]
        )

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(
            MAGIC,
            FORMAT_VERSION,
            self.n_sidebands,
            MODES.index(self.mode),
            1 if self.noise_n else 0,
            self.noise_n,
            len(self),
            self.seed,
            *self.box.bounds(),
        )
        rec = np.empty(len(self), dtype=self._record_dtype())
        rec["eta"] = self.eta
        rec["populations"] = self.populations
        rec["nbar"] = self.nbar
        rec["omega_t"] = self.omega_t
        return head + rec.tobytes()

    def save(self, path, meta: dict | None = None):
        """Write the binary file and a ``.json`` sidecar with header and run metadata."""
        path = Path(path)
        path.write_bytes(self.to_bytes())
        sidecar = {"header": self.header(), "meta": {**self.meta, **(meta or {})}}
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Dataset":
        if len(data) < _HEADER.size:
            raise FormatError(f"file holds {len(data)} bytes, header needs {_HEADER.size}", "header")
        magic, version, q, mode, noisy, noise_n, count, seed, *bounds = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise FormatError(f"expected {MAGIC!r}, found {magic!r}", "magic")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported version {version}", "version")
        if mode >= len(MODES):
            raise FormatError(f"unknown mode flag {mode}", "mode")
        if q < 1:
            raise FormatError("Q must be positive", "n_sidebands")
        box = ParamBox(tuple(bounds[0:2]), tuple(bounds[2:4]), tuple(bounds[4:6]), q)
        ds_dtype = np.dtype(
            [("eta", "<f8"), ("populations", "<f8", (q,)), ("nbar", "<f8"), ("omega_t", "<f8")]
        )
        expected = _HEADER.size + count * ds_dtype.itemsize
        if len(data) != expected:
            raise FormatError(f"expected {expected} bytes for {count} records, got {len(data)}", "count")
        rec = np.frombuffer(data, dtype=ds_dtype, offset=_HEADER.size, count=count)
        return cls(
            box=box,
            seed=seed,
            mode=MODES[mode],
            eta=rec["eta"].copy(),
            populations=rec["populations"].copy(),
            nbar=rec["nbar"].copy(),
            omega_t=rec["omega_t"].copy(),
            noise_n=noise_n if noisy else 0,
        )

    @classmethod
    def load(cls, path) -> "Dataset":
        ds = cls.from_bytes(Path(path).read_bytes())
        sidecar = Path(str(path) + ".json")
        if sidecar.exists():
            ds.meta = json.loads(sidecar.read_text()).get("meta", {})
        return ds

    def to_csv(self, path):
        cols = ["eta"] + [f"p{q}" for q in range(1, self.n_sidebands + 1)] + ["nbar", "omega_t"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for row in np.column_stack([self.inputs, self.targets]):
                writer.writerow([repr(float(v)) for v in row])


def _generate_chunk(args):
    box, seed, mode, start, stop, tail_epsilon = args
    params = np.array([sample_params(box, seed, i, mode) for i in range(start, stop)]).reshape(-1, 3)
    try:
        pops = physics.spectra(params[:, 0], params[:, 1], params[:, 2], box.n_sidebands, tail_epsilon)
    except Exception as exc:
        # translate the chunk-local index in the message to the global one
        msg = str(exc)
        if msg.startswith("record "):
            local, _, rest = msg[len("record "):].partition(":")
            msg = f"record {start + int(local)}:{rest}"
        raise type(exc)(msg) from exc
    return params, pops


def generate_dataset(
    box: ParamBox,
    count: int,
    seed: int,
    mode: str = "train",
    tail_epsilon: float = physics.DEFAULT_TAIL_EPSILON,
    workers: int = 1,
    chunk_size: int = _CHUNK,
) -> Dataset:
    """Simulate ``count`` records; record ``i`` depends only on ``(seed, i)``.

    ``workers > 1`` spreads chunks of ``chunk_size`` records over processes;
    output is identical for every worker count and chunk size.
    """
    if count < 0:
        raise InvalidInputError("count must be non-negative")
    if mode not in MODES:
        raise InvalidInputError(f"mode must be one of {MODES}, got {mode!r}")
    jobs = [
        (box, seed, mode, start, min(start + chunk_size, count), tail_epsilon)
        for start in range(0, count, chunk_size)
    ]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_generate_chunk, jobs))
    else:
        parts = [_generate_chunk(job) for job in jobs]
    params = np.concatenate([p for p, _ in parts]) if parts else np.empty((0, 3))
    pops = np.concatenate([p for _, p in parts]) if parts else np.empty((0, box.n_sidebands))
    return Dataset(
        box=box,
        seed=seed,
        mode=mode,
        eta=params[:, 1],
        populations=pops,
        nbar=params[:, 0],
        omega_t=params[:, 2],
        meta={"tail_epsilon": tail_epsilon},
    )


def binomial_noise(populations, n_measurements: int, seed: int, record_offset: int = 0, epoch=None):
    """Replace each probability ``P`` by ``k / N`` with ``k ~ Binomial(N, P)``.

    Row ``i`` of ``populations`` draws from a generator keyed by
    ``(seed, [epoch,] record_offset + i)``; column ``j`` is the ``j``-th draw of
    that generator.
    """
    if n_measurements < 1:
        raise InvalidInputError(f"number of measurements must be at least 1, got {n_measurements}")
    pops = np.asarray(populations, dtype=np.float64)
    flat = np.atleast_2d(pops)
    probs = np.clip(flat, 0.0, 1.0)
    out = np.empty_like(flat)
    prefix = (seed,) if epoch is None else (seed, epoch)
    for i, row in enumerate(probs):
        rng = _record_rng(*prefix, record_offset + i)
        out[i] = rng.binomial(n_measurements, row) / n_measurements
    return out.reshape(pops.shape)


def apply_projection_noise(data, n_measurements: int, seed: int, epoch=None):
    """Noisy copy of a :class:`Dataset` or :class:`~ionthermo.physics.SidebandSpectrum`."""
    if isinstance(data, Dataset):
        noisy = binomial_noise(data.populations, n_measurements, seed, epoch=epoch)
        return replace(
            data,
            populations=noisy,
            noise_n=n_measurements,
            meta={**data.meta, "noise_seed": seed},
        )
    if isinstance(data, physics.SidebandSpectrum):
        return physics.SidebandSpectrum(
            data.eta, binomial_noise(data.populations, n_measurements, seed, epoch=epoch)
        )
    raise InvalidInputError(f"cannot apply noise to {type(data).__name__}")
