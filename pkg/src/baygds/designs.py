"""Finite pool of periodic binary unit cells.

Each cell is a quadrant of a thresholded Gaussian random field, mirrored about
both midlines.  Pools are stored in a small packed-bitmap container (``.bgds``).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"BGDS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHII")  # magic, version, n, n_d, reserved


class DesignError(ValueError):
    pass


class DegenerateDesignError(DesignError):
    """All-solid or all-void cell; the caller should draw a new seed."""


class PoolFormatError(DesignError):
    """Header is not a valid pool header."""


class PoolSizeMismatchError(DesignError):
    """Payload is larger than the header declares."""


class PoolTruncatedError(DesignError):
    """Payload is shorter than the header declares."""


@dataclass(frozen=True)
class Microstructure:
    grid: np.ndarray
    id: int = 0

    def __post_init__(self):
        g = np.asarray(self.grid)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise DesignError(f"grid must be square, got shape {g.shape}")
        if g.shape[0] % 2:
            raise DesignError("grid side must be even")
        if not np.all((g == 0) | (g == 1)):
            raise DesignError("grid entries must be 0 or 1")
        object.__setattr__(self, "grid", g.astype(np.uint8))

    @property
    def n(self) -> int:
        return self.grid.shape[0]


@dataclass(frozen=True)
class DesignPool:
    designs: tuple[Microstructure, ...]

    def __post_init__(self):
        ids = [d.id for d in self.designs]
        if ids != list(range(1, len(ids) + 1)):
            raise DesignError("design ids must be contiguous from 1")
        if len({d.n for d in self.designs}) > 1:
            raise DesignError("all designs in a pool must share one grid size")

    def __len__(self) -> int:
        return len(self.designs)

    def __getitem__(self, design_id: int) -> Microstructure:
        return self.designs[design_id - 1]

    def __iter__(self):
        return iter(self.designs)

    @property
    def ids(self) -> np.ndarray:
        return np.arange(1, len(self.designs) + 1)

    @property
    def n(self) -> int:
        return self.designs[0].n if self.designs else 0

    def grids(self) -> np.ndarray:
        return np.stack([d.grid for d in self.designs])


def mirror_periodic(quadrant: np.ndarray, id: int = 0) -> Microstructure:
    q = np.asarray(quadrant)
    top = np.concatenate([q, q[:, ::-1]], axis=1)
    return Microstructure(np.concatenate([top, top[::-1, :]], axis=0), id)


def volume_fraction(m: Microstructure) -> float:
    return float(np.mean(m.grid))


def gaussian_random_field(shape: tuple[int, int], correlation_length: float, rng: np.random.Generator) -> np.ndarray:
    """Periodic field: white noise filtered by exp(-(|k| l)^2 / 2) in Fourier space."""
    noise = rng.standard_normal(shape)
    ky = 2 * np.pi * np.fft.fftfreq(shape[0])
    kx = 2 * np.pi * np.fft.fftfreq(shape[1])
    k2 = ky[:, None] ** 2 + kx[None, :] ** 2
    filt = np.exp(-0.5 * k2 * correlation_length**2)
    return np.real(np.fft.ifft2(np.fft.fft2(noise) * filt))


def generate_design(
    seed: int,
    n: int = 96,
    correlation_length: float = 3.0,
    threshold_quantile: float = 0.5,
    id: int = 0,
) -> Microstructure:
    if n % 2 or n < 8:
        raise DesignError(f"grid size must be even and >= 8, got {n}")
    if not 0.0 < threshold_quantile < 1.0:
        raise DesignError("threshold_quantile must lie in (0, 1)")
    if correlation_length < 1.0:
        raise DesignError("correlation_length must be >= 1 pixel")
    rng = np.random.default_rng(seed)
    field = gaussian_random_field((n // 2, n // 2), correlation_length, rng)
    quadrant = (field > np.quantile(field, threshold_quantile)).astype(np.uint8)
    m = mirror_periodic(quadrant, id)
    vf = volume_fraction(m)
    if vf <= 0.0 or vf >= 1.0:
        raise DegenerateDesignError(f"seed {seed} produced a uniform cell")
    return m


def default_correlation_range(n: int) -> tuple[float, float]:
    return 1.0, max(1.5, n / 16)


def generate_pool(
    count: int,
    n: int = 96,
    seed: int = 0,
    quantile_range: tuple[float, float] = (0.32, 0.70),
    correlation_range: tuple[float, float] | None = None,
) -> DesignPool:
    """Draw `count` cells; threshold quantile and correlation length vary per cell."""
    lo_c, hi_c = correlation_range or default_correlation_range(n)
    rng = np.random.default_rng(seed)
    designs = []
    while len(designs) < count:
        s = int(rng.integers(2**63 - 1))
        q = float(rng.uniform(*quantile_range))
        c = float(rng.uniform(lo_c, hi_c))
        try:
            designs.append(generate_design(s, n, c, q, id=len(designs) + 1))
        except DegenerateDesignError:
            continue
    return DesignPool(tuple(designs))


def pool_diagnostics(pool: DesignPool) -> dict:
    vf = np.array([volume_fraction(d) for d in pool])
    seen: dict[bytes, int] = {}
    duplicates = []
    for d in pool:
        key = np.packbits(d.grid).tobytes()
        if key in seen:
            duplicates.append((seen[key], d.id))
        else:
            seen[key] = d.id
    return {
        "count": len(pool),
        "n": pool.n,
        "volume_fraction_min": float(vf.min()) if len(vf) else float("nan"),
        "volume_fraction_max": float(vf.max()) if len(vf) else float("nan"),
        "volume_fraction_mean": float(vf.mean()) if len(vf) else float("nan"),
        "duplicate_pairs": duplicates,
    }


# ---------------------------------------------------------------- packed bitmap I/O

def _grid_nbytes(n: int) -> int:
    return (n * n + 7) // 8


def pack_grid(grid: np.ndarray) -> bytes:
    return np.packbits(np.asarray(grid, dtype=np.uint8).ravel()).tobytes()


def unpack_grid(buf: bytes, n: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), count=n * n)
    return bits.reshape(n, n)


def save_pool(pool: DesignPool, path, reserved: int = 0) -> None:
    n = pool.n
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, n, len(pool), reserved & 0xFFFFFFFF))
        for d in pool:
            fh.write(pack_grid(d.grid))


def read_pool_header(path) -> tuple[int, int, int]:
    """Return (n, n_d, reserved) from a pool file header."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    return _parse_header(head)[1:]


def _parse_header(head: bytes) -> tuple[int, int, int, int]:
    if len(head) < _HEADER.size:
        raise PoolFormatError("file too short for a pool header")
    magic, version, n, n_d, reserved = _HEADER.unpack(head[: _HEADER.size])
    if magic != MAGIC:
        raise PoolFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise PoolFormatError(f"unsupported pool format version {version}")
    if n == 0 or n % 2:
        raise PoolFormatError(f"invalid grid size {n} in header")
    return version, n, n_d, reserved


def load_pool(path) -> DesignPool:
    data = Path(path).read_bytes()
    _, n, n_d, _ = _parse_header(data)
    payload = data[_HEADER.size:]
    nb = _grid_nbytes(n)
    if len(payload) < n_d * nb:
        raise PoolTruncatedError(f"header declares {n_d} grids ({n_d * nb} bytes) but payload has {len(payload)} bytes")
    if len(payload) > n_d * nb:
        raise PoolSizeMismatchError(f"payload has {len(payload) - n_d * nb} bytes beyond the {n_d} declared grids")
    designs = tuple(
        Microstructure(unpack_grid(payload[k * nb:(k + 1) * nb], n), k + 1) for k in range(n_d)
    )
    return DesignPool(designs)


def subset_ids(pool: DesignPool, ids: Sequence[int]) -> list[Microstructure]:
    return [pool[i] for i in ids]
