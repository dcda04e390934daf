"""Dataset files, synthetic generation and subsampling.

Datasets are JSON-lines: a header ``{"T": float, "classes": int}`` followed
by one ``{"times": [...], "values": [...], "label": int}`` record per series.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import InvalidArgumentError
from .exact_gp import TimeSeries
from .kernel import SE, GpParams
from .training import Dataset

__all__ = [
    "SynthConfig",
    "synthesize",
    "subsample",
    "write_dataset",
    "read_dataset",
    "read_two_column_csv",
    "read_ucr",
    "sample_prior",
]


def write_dataset(path, dataset: Dataset):
    with open(path, "w") as fh:
        fh.write(json.dumps({"T": float(dataset.T), "classes": int(dataset.n_classes)}) + "\n")
        for s in dataset.series:
            rec = {"times": s.times.tolist(), "values": s.values.tolist(), "label": s.label}
            fh.write(json.dumps(rec) + "\n")


def read_dataset(path) -> Dataset:
    path = Path(path)
    with open(path) as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        raise InvalidArgumentError(f"{path}: empty dataset file (missing header)")
    header = json.loads(lines[0])
    if "T" not in header or "classes" not in header:
        raise InvalidArgumentError(f"{path}: header must carry T and classes")
    T = float(header["T"])
    series = []
    for lineno, line in enumerate(lines[1:], start=2):
        rec = json.loads(line)
        try:
            s = TimeSeries(rec["times"], rec["values"], rec.get("label"))
        except (KeyError, InvalidArgumentError) as exc:
            raise InvalidArgumentError(f"{path}:{lineno}: {exc}") from exc
        if s.times[0] < 0 or s.times[-1] > T:
            raise InvalidArgumentError(f"{path}:{lineno}: times outside [0, {T}]")
        series.append(s)
    return Dataset(series, T, int(header["classes"]))


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic GP series.

    ``class_mode``:
      * ``none``: one class, zero-mean prior draws.
      * ``template``: class c adds the mean curve
        ``template_amp * sin(2 pi (c + 1) t / T + c pi / classes)``.
      * ``kernel``: class c uses length scale multiplied by ``2**c``.
    When ``amplitude``/``inv_length``/``noise`` are None they are drawn at
    random (log-uniform) once per dataset.
    """

    N: int = 100
    n_points: int = 100
    T: float = 1.0
    classes: int = 1
    class_mode: str = "none"
    amplitude: Optional[float] = 1.0
    inv_length: Optional[float] = None
    noise: Optional[float] = 0.01
    template_amp: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.N < 0 or self.n_points < 1 or self.classes < 1 or not self.T > 0:
            raise InvalidArgumentError("invalid synthetic dataset configuration")
        if self.class_mode not in ("none", "template", "kernel"):
            raise InvalidArgumentError(f"unknown class_mode {self.class_mode!r}")


def sample_prior(times, params: GpParams, rng, jitter: float = 1e-8) -> np.ndarray:
    """One draw of the zero-mean latent GP at ``times`` (no observation noise)."""
    gram = SE.matrix(times, times, params)
    gram[np.diag_indices_from(gram)] += jitter * params.amplitude
    chol = scipy.linalg.cholesky(gram, lower=True)
    return chol @ rng.standard_normal(len(times))


def _random_times(rng, n, T):
    while True:
        t = np.sort(rng.uniform(0.0, T, n))
        if n == 1 or np.all(np.diff(t) > 0):
            return t


def synthesize(cfg: SynthConfig) -> Dataset:
    rng = np.random.default_rng(cfg.seed)
    amplitude = cfg.amplitude if cfg.amplitude is not None else float(np.exp(rng.uniform(np.log(0.5), np.log(2.0))))
    if cfg.inv_length is not None:
        inv_length = cfg.inv_length
    else:
        length = cfg.T * float(np.exp(rng.uniform(np.log(0.02), np.log(0.1))))
        inv_length = 1.0 / (2 * length * length)
    noise = cfg.noise if cfg.noise is not None else float(np.exp(rng.uniform(np.log(1e-3), np.log(1e-1))))
    series = []
    for i in range(cfg.N):
        label = i % cfg.classes
        t = _random_times(rng, cfg.n_points, cfg.T)
        b = inv_length / 4.0**label if cfg.class_mode == "kernel" else inv_length
        params = GpParams.from_natural(amplitude, b, noise)
        f = sample_prior(t, params, rng)
        if cfg.class_mode == "template":
            phase = label * math.pi / cfg.classes
            f = f + cfg.template_amp * np.sin(2 * math.pi * (label + 1) * t / cfg.T + phase)
        v = f + math.sqrt(noise) * rng.standard_normal(t.size)
        series.append(TimeSeries(t, v, label))
    return Dataset(series, cfg.T, cfg.classes)


def subsample(dataset: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Keep ``floor(fraction * n)`` random observations of every series."""
    if not 0 < fraction <= 1:
        raise InvalidArgumentError("fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    out = []
    for s in dataset.series:
        keep = int(math.floor(fraction * len(s) + 1e-9))
        if keep < 1:
            raise InvalidArgumentError(f"fraction {fraction} leaves no observations of a {len(s)}-point series")
        if keep == len(s):
            out.append(s)
            continue
        idx = np.sort(rng.choice(len(s), size=keep, replace=False))
        out.append(TimeSeries(s.times[idx], s.values[idx], s.label))
    return Dataset(out, dataset.T, dataset.n_classes)


def read_two_column_csv(path, label: Optional[int] = None) -> TimeSeries:
    """One series from a ``time,value`` CSV; a non-numeric first row is a header."""
    times, values = [], []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or not "".join(row).strip():
                continue
            try:
                t, v = float(row[0]), float(row[1])
            except (ValueError, IndexError):
                if not times:
                    continue
                raise InvalidArgumentError(f"{path}: malformed row {row}")
            times.append(t)
            values.append(v)
    return TimeSeries.from_unsorted(times, values, label)


def read_ucr(paths: Sequence, T: Optional[float] = None) -> Dataset:
    """Import UCR/UEA-archive style files (e.g. UWaveGestureLibraryAll).

    Each line is a class label followed by the equally spaced series values,
    separated by whitespace or commas. Labels are remapped to 0..C-1 in
    sorted order; sample i of an L-point series sits at time ``i * T/(L-1)``
    (``T`` defaults to L - 1).
    """
    rows = []
    for path in paths:
        with open(path) as fh:
            for line in fh:
                fields = line.replace(",", " ").split()
                if fields:
                    rows.append((float(fields[0]), np.asarray(fields[1:], dtype=float)))
    if not rows:
        raise InvalidArgumentError("no series found")
    labels = sorted({lab for lab, _ in rows})
    index = {lab: i for i, lab in enumerate(labels)}
    length = max(v.size for _, v in rows)
    T = float(length - 1) if T is None else float(T)
    series = []
    for lab, v in rows:
        ok = np.isfinite(v)
        t = np.linspace(0.0, T, v.size)
        series.append(TimeSeries(t[ok], v[ok], index[lab]))
    return Dataset(series, T, len(labels))
