"""High-fidelity response providers.

`SyntheticOracle` is a deterministic test bed: a hidden smooth map from
standardized features to material parameters, pushed through the effective
constitutive model, plus seeded Gaussian noise.  `ExternalOracle` speaks a
JSON request/response protocol to an outside solver, either over a
subprocess's stdin/stdout or through a watched directory.
"""
from __future__ import annotations

import base64
import json
import os
import subprocess
import threading
import time
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .designs import Microstructure, pack_grid, unpack_grid
from .mechanics import DeformationState, Schedule, basis_stresses, pk1_stress_mismatched

N_CENTERS = 8


class OracleError(RuntimeError):
    pass


class OracleTimeoutError(OracleError):
    pass


class MalformedResponseError(OracleError):
    pass


class ShapeMismatchError(OracleError):
    pass


class PlaneStressViolationError(OracleError):
    pass


@dataclass(frozen=True)
class SyntheticOracleConfig:
    seed: int = 0
    theta_I1_range: tuple[float, float] = (0.5, 4.0)
    theta_I4_range: tuple[float, float] = (0.05, 1.0)
    theta_I6_range: tuple[float, float] = (0.05, 1.0)
    noise_std: float = 1e-2
    mismatch: float = 0.0
    gain: float = 4.0
    n_z: int = 6

    def __post_init__(self):
        for lo, hi in self.ranges:
            if not 0 < lo < hi:
                raise ValueError(f"parameter range ({lo}, {hi}) must be positive and increasing")
        if self.theta_I1_range[1] <= max(self.theta_I4_range[1], self.theta_I6_range[1]):
            raise ValueError("theta_I1 upper bound must exceed the anisotropic upper bounds")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    @property
    def ranges(self) -> tuple[tuple[float, float], ...]:
        return (tuple(self.theta_I1_range), tuple(self.theta_I4_range), tuple(self.theta_I6_range))


def _hidden_map(config: SyntheticOracleConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng([config.seed, 0x5EED])
    centers = rng.standard_normal((N_CENTERS, config.n_z))
    weights = rng.standard_normal((3, N_CENTERS))
    bias = rng.normal(0.0, 0.5, size=3)
    return centers, weights, bias


def synthetic_ground_truth(z: np.ndarray, config: SyntheticOracleConfig) -> np.ndarray:
    """theta_true for standardized features z (n_z,) or (N, n_z)."""
    centers, weights, bias = _hidden_map(config)
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    Z = np.atleast_2d(z)
    d2 = ((Z[:, None, :] - centers[None]) ** 2).sum(-1)
    g = np.exp(-0.5 * d2) @ weights.T  # (N, 3)
    s = 1.0 / (1.0 + np.exp(-(config.gain * g + bias)))
    lo = np.array([r[0] for r in config.ranges])
    hi = np.array([r[1] for r in config.ranges])
    theta = lo + (hi - lo) * s
    return theta[0] if single else theta


def _noise(config: SyntheticOracleConfig, design_id: int, schedule: Schedule) -> np.ndarray:
    tag = zlib.crc32(schedule.key().encode())
    rng = np.random.default_rng([config.seed, 0x0A11, int(design_id), tag])
    return rng.standard_normal((len(schedule), 2, 2)) * config.noise_std


def synthetic_evaluate(z: np.ndarray, design_id: int, schedule: Schedule, config: SyntheticOracleConfig) -> np.ndarray:
    """Stresses (n_f, 3, 3) for a design with standardized features z."""
    theta = synthetic_ground_truth(z, config)
    if config.mismatch:
        P = np.stack([pk1_stress_mismatched(s.F, theta, config.mismatch) for s in schedule])
    else:
        P = np.stack([np.tensordot(theta, basis_stresses(s.F), axes=1) for s in schedule])
    if config.noise_std > 0:
        P[:, :2, :2] += _noise(config, design_id, schedule)
    P[:, 2, 2] = 0.0
    return P


class Oracle:
    """Counts queries; subclasses implement `_evaluate`."""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    @property
    def count(self) -> int:
        return self._count

    def reset_count(self) -> None:
        with self._lock:
            self._count = 0

    def evaluate(self, design: Microstructure, schedule: Schedule) -> np.ndarray:
        with self._lock:
            self._count += 1
        return self._evaluate(design, schedule)

    def _evaluate(self, design: Microstructure, schedule: Schedule) -> np.ndarray:
        raise NotImplementedError


class SyntheticOracle(Oracle):
    def __init__(self, config: SyntheticOracleConfig, feature_fn: Callable[[Microstructure], np.ndarray]):
        super().__init__()
        self.config = config
        self.feature_fn = feature_fn

    def theta_true(self, design: Microstructure) -> np.ndarray:
        return synthetic_ground_truth(self.feature_fn(design), self.config)

    def _evaluate(self, design, schedule):
        _check_schedule(schedule)
        return synthetic_evaluate(self.feature_fn(design), design.id, schedule, self.config)


class CallableOracle(Oracle):
    """Wrap any function (design, schedule) -> stresses, with counting."""

    def __init__(self, fn: Callable[[Microstructure, Schedule], np.ndarray]):
        super().__init__()
        self.fn = fn

    def _evaluate(self, design, schedule):
        return np.asarray(self.fn(design, schedule), dtype=float)


def _check_schedule(schedule: Schedule, tol: float = 1e-10) -> None:
    for s in schedule:
        if abs(np.linalg.det(s.F) - 1.0) > tol:
            raise OracleError(f"state {s.path}:{s.h} is not isochoric")


# ---------------------------------------------------------------- external adapter

def encode_request(design: Microstructure, schedule: Schedule) -> dict:
    return {
        "design_id": int(design.id),
        "n": int(design.n),
        "grid": base64.b64encode(pack_grid(design.grid)).decode("ascii"),
        "states": [{"F": [float(v) for v in s.F.ravel()]} for s in schedule],
    }


def decode_request(req: dict) -> tuple[Microstructure, np.ndarray]:
    grid = unpack_grid(base64.b64decode(req["grid"]), int(req["n"]))
    F = np.array([st["F"] for st in req["states"]], dtype=float).reshape(-1, 3, 3)
    return Microstructure(grid, int(req["design_id"])), F


def encode_response(design_id: int, P: np.ndarray) -> dict:
    return {"design_id": int(design_id), "stresses": [{"P": [float(v) for v in p.ravel()]} for p in P]}


def parse_response(resp: dict, design_id: int, n_states: int, p33_tol: float) -> np.ndarray:
    if not isinstance(resp, dict) or "stresses" not in resp:
        raise MalformedResponseError("response lacks 'stresses'")
    if int(resp.get("design_id", -1)) != int(design_id):
        raise MalformedResponseError(f"response design_id {resp.get('design_id')} != request {design_id}")
    stresses = resp["stresses"]
    if len(stresses) != n_states:
        raise MalformedResponseError(f"expected {n_states} stresses, got {len(stresses)}")
    out = np.empty((n_states, 3, 3))
    for k, entry in enumerate(stresses):
        vals = entry.get("P") if isinstance(entry, dict) else None
        if vals is None or len(vals) != 9:
            raise ShapeMismatchError(f"stress {k} is not 9 values")
        out[k] = np.asarray(vals, dtype=float).reshape(3, 3)
    worst = np.max(np.abs(out[:, 2, 2])) if n_states else 0.0
    if worst > p33_tol:
        raise PlaneStressViolationError(f"|P33| = {worst:g} exceeds tolerance {p33_tol:g}")
    return out


class ExternalOracle(Oracle):
    """Delegate to an outside program.

    transport="subprocess": `command` gets the request JSON on stdin and must
    print the response JSON on stdout.
    transport="directory": requests are written to `directory` as
    ``request_<id>_<k>.json``; the solver must write ``response_<id>_<k>.json``.
    """

    def __init__(
        self,
        transport: str,
        command: Sequence[str] | None = None,
        directory: str | os.PathLike | None = None,
        timeout: float = 600.0,
        poll_interval: float = 0.05,
        p33_tol: float = 1e-6,
    ):
        super().__init__()
        if transport not in ("subprocess", "directory"):
            raise ValueError("transport must be 'subprocess' or 'directory'")
        if transport == "subprocess" and not command:
            raise ValueError("subprocess transport needs a command")
        if transport == "directory" and directory is None:
            raise ValueError("directory transport needs a directory")
        self.transport = transport
        self.command = list(command or [])
        self.directory = Path(directory) if directory is not None else None
        self.timeout = timeout
        self.poll_interval = poll_interval
        self.p33_tol = p33_tol
        self._seq = 0

    def _evaluate(self, design, schedule):
        req = encode_request(design, schedule)
        raw = self._exchange_subprocess(req) if self.transport == "subprocess" else self._exchange_directory(req)
        try:
            resp = json.loads(raw)
        except ValueError as exc:
            raise MalformedResponseError("response is not valid JSON") from exc
        return parse_response(resp, design.id, len(schedule), self.p33_tol)

    def _exchange_subprocess(self, req: dict) -> str:
        try:
            proc = subprocess.run(
                self.command, input=json.dumps(req), capture_output=True, text=True, timeout=self.timeout
            )
        except subprocess.TimeoutExpired as exc:
            raise OracleTimeoutError(f"external oracle exceeded {self.timeout} s") from exc
        if proc.returncode != 0:
            raise OracleError(f"external oracle exited with {proc.returncode}: {proc.stderr.strip()[:500]}")
        return proc.stdout

    def _exchange_directory(self, req: dict) -> str:
        with self._lock:
            self._seq += 1
            seq = self._seq
        stem = f"{req['design_id']}_{seq}"
        self.directory.mkdir(parents=True, exist_ok=True)
        tmp = self.directory / f".request_{stem}.json.tmp"
        tmp.write_text(json.dumps(req))
        tmp.replace(self.directory / f"request_{stem}.json")
        target = self.directory / f"response_{stem}.json"
        deadline = time.monotonic() + self.timeout
        while not target.exists():
            if time.monotonic() > deadline:
                raise OracleTimeoutError(f"no response at {target} within {self.timeout} s")
            time.sleep(self.poll_interval)
        return target.read_text()


def schedule_from_F(F: np.ndarray) -> Schedule:
    """Wrap raw deformation gradients (n, 3, 3) as a schedule (no path metadata)."""
    return Schedule([DeformationState(np.array(f), "external", k) for k, f in enumerate(F)])
