"""Scalar fields on regular 1D/2D grids and synthetic ensembles.

Field file format (UTF-8 text)::

    field <id> <d0> [<d1>]
    <value>
    <value>
    ...

One header per field followed by exactly ``d0 * d1`` values in row-major
order, one per line, written with ``repr(float)`` so that loading is a
bitwise round trip.  Ids may not contain whitespace.  Blank lines and lines
starting with ``#`` are ignored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ParseError
from .rng import Xoshiro256


@dataclass(eq=False)
class ScalarField:
    dims: tuple[int, ...]
    values: np.ndarray
    id: str = "field"

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if len(self.dims) not in (1, 2) or any(d <= 0 for d in self.dims):
            raise ConfigError(f"invalid grid dims {self.dims}")
        if self.values.size != math.prod(self.dims):
            raise ConfigError(
                f"field {self.id}: {self.values.size} values for dims {self.dims}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ConfigError(f"field {self.id}: non-finite values")
        if not self.id or any(c.isspace() for c in self.id):
            raise ConfigError(f"invalid field id {self.id!r}")

    def __eq__(self, other):
        if not isinstance(other, ScalarField):
            return NotImplemented
        return (
            self.id == other.id
            and self.dims == other.dims
            and self.values.tobytes() == other.values.tobytes()
        )

    @property
    def size(self) -> int:
        return self.values.size

    def grid(self) -> np.ndarray:
        return self.values.reshape(self.dims)


def grid_edges(dims: Sequence[int]) -> np.ndarray:
    """Undirected 4-connectivity (2-connectivity in 1D) edges as an (E, 2) array."""
    dims = tuple(dims)
    if len(dims) == 1:
        idx = np.arange(dims[0])
        return np.stack([idx[:-1], idx[1:]], axis=1)
    rows, cols = dims
    idx = np.arange(rows * cols).reshape(rows, cols)
    horiz = np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], axis=1)
    vert = np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], axis=1)
    return np.concatenate([horiz, vert], axis=0)


def neighbors(dims: Sequence[int]) -> list[list[int]]:
    """Adjacency lists of the grid graph."""
    n = math.prod(dims)
    adj: list[list[int]] = [[] for _ in range(n)]
    for a, b in grid_edges(dims).tolist():
        adj[a].append(b)
        adj[b].append(a)
    return adj


def normalize_field(f: ScalarField) -> ScalarField:
    """Affinely map values to [0, 1]; a constant field maps to zeros."""
    v = f.values
    lo, hi = v.min(), v.max()
    if hi > lo:
        out = (v - lo) / (hi - lo)
    else:
        out = np.zeros_like(v)
    return ScalarField(f.dims, out, f.id)


# --------------------------------------------------------------------------
# ensembles


@dataclass
class EnsembleSpec:
    """Parameters of a synthetic ensemble.

    gauss2d ensembles are made of runs of ``run_length`` consecutive fields.
    Each run draws a bump count from ``blobs`` and that many Gaussian bumps
    whose centres drift linearly (reflected at the grid border) by
    ``drift * min(grid)`` cells per field.  A bump is a well (negative
    amplitude) with probability ``well_fraction``.  Widths are fractions of
    ``min(grid)``.  rand1d ensembles are random Fourier series with
    ``modes`` harmonics and amplitudes scaled by ``amplitude[1]``.
    """

    kind: str
    count: int
    grid: tuple[int, ...]
    seed: int = 0
    blobs: tuple[int, int] = (3, 6)
    amplitude: tuple[float, float] = (0.5, 1.0)
    width: tuple[float, float] = (0.06, 0.12)
    drift: float = 0.01
    run_length: int = 20
    well_fraction: float = 0.75
    separation: float = 2.0
    modes: int = 6
    noise: float = 0.0
    prefix: str = ""

    def __post_init__(self):
        self.grid = tuple(int(d) for d in self.grid)
        self.blobs = tuple(int(b) for b in self.blobs)
        self.amplitude = tuple(float(a) for a in self.amplitude)
        self.width = tuple(float(w) for w in self.width)


def _check_spec(spec: EnsembleSpec, kind: str, ndim: int, min_len: int = 8):
    if spec.kind != kind:
        raise ConfigError(f"expected kind {kind!r}, got {spec.kind!r}")
    if len(spec.grid) != ndim or any(d < min_len for d in spec.grid):
        raise ConfigError(
            f"{kind} needs a {ndim}D grid with every dim >= {min_len}, got {spec.grid}"
        )
    if spec.count <= 0:
        raise ConfigError("count must be positive")
    if not 0 <= spec.seed < 2**64:
        raise ConfigError("seed must be a 64-bit unsigned integer")
    lo, hi = spec.blobs
    if lo < 1 or hi < lo:
        raise ConfigError(f"invalid blob-count range {spec.blobs}")
    if spec.run_length < 1:
        raise ConfigError("run_length must be >= 1")


def _reflect(x: np.ndarray, upper: float) -> np.ndarray:
    """Fold coordinates into [0, upper] by mirror reflection."""
    if upper <= 0:
        return np.zeros_like(x)
    period = 2.0 * upper
    y = np.mod(x, period)
    return np.where(y > upper, period - y, y)


def _draw_run(rng: Xoshiro256, spec: EnsembleSpec, steps: int):
    """Bump parameters for one run: amplitudes, sigmas, centres (steps, k, 2)."""
    rows, cols = spec.grid
    scale = min(rows, cols)
    k = rng.integers(*spec.blobs)
    tries = 0
    while True:
        tries += 1
        amps, sigmas, start, vel = [], [], [], []
        for _ in range(k):
            mag = rng.uniform(*spec.amplitude)
            sign = -1.0 if rng.uniform() < spec.well_fraction else 1.0
            amps.append(sign * mag)
            sigmas.append(rng.uniform(*spec.width) * scale)
            start.append((rng.uniform(0, rows - 1), rng.uniform(0, cols - 1)))
            angle = rng.uniform(0.0, 2.0 * math.pi)
            speed = spec.drift * scale
            vel.append((speed * math.sin(angle), speed * math.cos(angle)))
        amps = np.array(amps)
        sigmas = np.array(sigmas)
        t = np.arange(steps, dtype=np.float64)[:, None, None]
        raw = np.array(start)[None] + t * np.array(vel)[None]
        centres = np.stack(
            [_reflect(raw[..., 0], rows - 1), _reflect(raw[..., 1], cols - 1)], axis=-1
        )
        if k == 1 or tries >= 1000:
            return amps, sigmas, centres
        diff = centres[:, :, None, :] - centres[:, None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        need = spec.separation * (sigmas[:, None] + sigmas[None, :])
        iu = np.triu_indices(k, 1)
        if np.all(dist[:, iu[0], iu[1]] >= need[iu]):
            return amps, sigmas, centres


def gauss_mixture(amps, sigmas, centres, rows: int, cols: int, oversample: int = 1):
    """Evaluate a Gaussian bump mixture on a (possibly oversampled) grid."""
    y = np.arange((rows - 1) * oversample + 1) / oversample
    x = np.arange((cols - 1) * oversample + 1) / oversample
    out = np.zeros((y.size, x.size))
    for a, s, (cy, cx) in zip(amps, sigmas, centres):
        gy = np.exp(-((y - cy) ** 2) / (2 * s * s))
        gx = np.exp(-((x - cx) ** 2) / (2 * s * s))
        out += a * np.outer(gy, gx)
    return out


def gauss2d_runs(spec: EnsembleSpec):
    """Yield ``(amps, sigmas, centres)`` for each field of a gauss2d ensemble."""
    _check_spec(spec, "gauss2d", 2)
    rng = Xoshiro256(spec.seed)
    produced = 0
    while produced < spec.count:
        steps = min(spec.run_length, spec.count - produced)
        amps, sigmas, centres = _draw_run(rng, spec, steps)
        for t in range(steps):
            yield amps, sigmas, centres[t]
        produced += steps


def gen_gauss2d(spec: EnsembleSpec) -> list[ScalarField]:
    _check_spec(spec, "gauss2d", 2)
    rows, cols = spec.grid
    noise_rng = Xoshiro256(spec.seed ^ 0x5DEECE66D)
    fields = []
    for i, (amps, sigmas, centres) in enumerate(gauss2d_runs(spec)):
        values = gauss_mixture(amps, sigmas, centres, rows, cols).ravel()
        if spec.noise > 0:
            values = values + spec.noise * np.array(
                [noise_rng.uniform(-1.0, 1.0) for _ in range(values.size)]
            )
        fields.append(ScalarField((rows, cols), values, f"{spec.prefix}g{i:05d}"))
    return fields


def gen_rand1d(spec: EnsembleSpec) -> list[ScalarField]:
    """Random Fourier series ``sum_k a_k / k * sin(2 pi k x + phi_k)`` on [0, 1]."""
    _check_spec(spec, "rand1d", 1)
    if spec.modes < 1:
        raise ConfigError("modes must be >= 1")
    (n,) = spec.grid
    rng = Xoshiro256(spec.seed)
    x = np.arange(n) / n
    amp = spec.amplitude[1]
    fields = []
    for i in range(spec.count):
        values = np.zeros(n)
        for k in range(1, spec.modes + 1):
            a = amp * rng.uniform(-1.0, 1.0) / k
            phase = rng.uniform(0.0, 2.0 * math.pi)
            values += a * np.sin(2.0 * math.pi * k * x + phase)
        fields.append(ScalarField((n,), values, f"{spec.prefix}r{i:05d}"))
    return fields


def generate(spec: EnsembleSpec) -> list[ScalarField]:
    if spec.kind == "gauss2d":
        return gen_gauss2d(spec)
    if spec.kind == "rand1d":
        return gen_rand1d(spec)
    raise ConfigError(f"unknown ensemble kind {spec.kind!r}")


# --------------------------------------------------------------------------
# I/O


def save_fields(fields: Iterable[ScalarField], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in fields:
            fh.write(f"field {f.id} {' '.join(str(d) for d in f.dims)}\n")
            fh.write("".join(f"{v!r}\n" for v in f.values.tolist()))


def load_fields(path) -> list[ScalarField]:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    fields: list[ScalarField] = []
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        if not line or line.startswith("#"):
            i += 1
            continue
        tok = line.split()
        if tok[0] != "field" or len(tok) not in (3, 4):
            raise ParseError(f"expected 'field <id> <d0> [d1]', got {line!r}", path, i + 1)
        try:
            dims = tuple(int(d) for d in tok[2:])
        except ValueError:
            raise ParseError(f"bad dims in {line!r}", path, i + 1) from None
        if any(d <= 0 for d in dims):
            raise ParseError(f"non-positive dims in {line!r}", path, i + 1)
        n = math.prod(dims)
        header = i + 1
        values = []
        i += 1
        while len(values) < n:
            if i >= len(lines):
                raise ParseError(
                    f"field {tok[1]}: expected {n} values, file ended after {len(values)}",
                    path,
                    i,
                )
            s = lines[i].strip()
            try:
                values.append(float(s))
            except ValueError:
                raise ParseError(f"bad value {s!r}", path, i + 1) from None
            i += 1
        try:
            fields.append(ScalarField(dims, np.array(values), tok[1]))
        except ConfigError as e:
            raise ParseError(str(e), path, header) from None
    return fields
