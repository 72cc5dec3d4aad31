"""Incompressible plane-stress orthotropic hyperelasticity and deformation sampling.

The effective energy is a linear combination of three invariant basis terms,

    W = theta_I1 (I1 - 3) + theta_I4 (I4 - 1)^2 + theta_I6 (I6 - 1)^2 - p (J - 1),

with preferred material axes a0 = e1 and b0 = e2.  Because the pressure that
enforces P33 = 0 is itself proportional to theta_I1, the first Piola-Kirchhoff
stress is linear in theta for a fixed F.  `basis_stresses` exposes that linear
map; everything downstream (likelihood, pushforward, screening) is built on it.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

A0 = np.array([1.0, 0.0, 0.0])
B0 = np.array([0.0, 1.0, 0.0])

#: Table of loading paths: name -> (lambda1_max, lambda2_max)
LOADING_PATHS: dict[str, tuple[float, float]] = {
    "Tension-x": (1.50, 1.00),
    "Off-x": (1.50, 1.25),
    "Equibiaxial": (1.50, 1.50),
    "Off-y": (1.25, 1.50),
    "Tension-y": (1.00, 1.50),
}

#: Stress components addressable by target extraction, in their fixed order.
COMPONENTS = ("11", "22", "12")
_COMPONENT_INDEX = {"11": (0, 0), "22": (1, 1), "12": (0, 1)}

SOFTPLUS_BRANCH = 30.0


class MechanicsError(ValueError):
    pass


class SingularStateError(MechanicsError):
    pass


@dataclass(frozen=True)
class DeformationState:
    F: np.ndarray
    path: str = ""
    h: int = 0
    lambda1: float = 1.0
    lambda2: float = 1.0
    beta_deg: float = 0.0

    @property
    def invariants(self) -> tuple[float, float, float]:
        return invariants(self.F)


@dataclass(frozen=True)
class LoadingPath:
    name: str
    lambda1_max: float
    lambda2_max: float
    n_increments: int = 20

    @classmethod
    def named(cls, name: str, n_increments: int = 20) -> "LoadingPath":
        try:
            l1, l2 = LOADING_PATHS[name]
        except KeyError:
            raise MechanicsError(f"unknown loading path {name!r}; expected one of {sorted(LOADING_PATHS)}") from None
        return cls(name, l1, l2, n_increments)


@dataclass
class Schedule:
    """Ordered list of deformation states shared by all designs."""

    states: list[DeformationState] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.states)

    def __iter__(self):
        return iter(self.states)

    def __getitem__(self, item):
        return self.states[item]

    @property
    def F(self) -> np.ndarray:
        return np.stack([s.F for s in self.states])

    def key(self) -> str:
        """Digest of the deformation gradients; seeds per-schedule oracle noise."""
        F = np.ascontiguousarray(self.F, dtype="<f8") if self.states else np.zeros(0)
        return hashlib.sha256(F.tobytes()).hexdigest()


# ---------------------------------------------------------------- positivity map

def softplus(xi):
    xi = np.asarray(xi, dtype=float)
    safe = np.minimum(xi, SOFTPLUS_BRANCH)
    return np.where(xi > SOFTPLUS_BRANCH, xi + np.exp(-np.abs(xi)), np.log1p(np.exp(safe)))


def softplus_inverse(theta):
    theta = np.asarray(theta, dtype=float)
    if np.any(~(theta > 0)):
        raise MechanicsError("softplus_inverse requires strictly positive input")
    # log(exp(t) - 1) = t + log(1 - exp(-t))
    return theta + np.log(-np.expm1(-theta))


# ---------------------------------------------------------------- kinematics

def invariants(F, det_tol: float = 1e-8) -> tuple[float, float, float]:
    F = np.asarray(F, dtype=float)
    det = np.linalg.det(F)
    if abs(det - 1.0) > det_tol:
        raise MechanicsError(f"det F = {det:.12g} violates incompressibility (tolerance {det_tol:g})")
    C = F.T @ F
    return float(np.trace(C)), float(C[0, 0]), float(C[1, 1])


def diagonal_F(lambda1: float, lambda2: float, path: str = "", h: int = 0) -> DeformationState:
    if lambda1 <= 0 or lambda2 <= 0:
        raise MechanicsError("principal stretches must be positive")
    F = np.diag([lambda1, lambda2, 1.0 / (lambda1 * lambda2)])
    return DeformationState(F, path, h, float(lambda1), float(lambda2), 0.0)


def rotation_e3(beta: float) -> np.ndarray:
    c, s = np.cos(beta), np.sin(beta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotate_F(state: DeformationState, beta: float) -> DeformationState:
    """Re-express the stretch in a loading frame rotated by `beta` radians about e3."""
    R = rotation_e3(beta)
    F = R.T @ state.F @ R
    if beta == 0.0:
        F = state.F.copy()
    return DeformationState(F, state.path, state.h, state.lambda1, state.lambda2, float(np.degrees(beta)))


def sample_path(path: LoadingPath) -> list[DeformationState]:
    n = path.n_increments
    states = []
    for h in range(n + 1):
        l1 = 1.0 + h / n * (path.lambda1_max - 1.0)
        l2 = 1.0 + h / n * (path.lambda2_max - 1.0)
        states.append(diagonal_F(l1, l2, path.name, h))
    return states


def build_schedule(
    paths: Sequence[str] = tuple(LOADING_PATHS),
    n_increments: int = 20,
    beta_deg: float = 0.0,
    include_identity: bool = True,
) -> Schedule:
    states = []
    for name in paths:
        for s in sample_path(LoadingPath.named(name, n_increments)):
            if s.h == 0 and not include_identity:
                continue
            states.append(rotate_F(s, np.radians(beta_deg)) if beta_deg else s)
    return Schedule(states)


# ---------------------------------------------------------------- constitutive model

def strain_energy(F, theta) -> float:
    I1, I4, I6 = invariants(F)
    t1, t4, t6 = np.asarray(theta, dtype=float)
    return float(t1 * (I1 - 3.0) + t4 * (I4 - 1.0) ** 2 + t6 * (I6 - 1.0) ** 2)


def unconstrained_energy(F, theta) -> float:
    """Q(F) . theta for arbitrary (not necessarily isochoric) F."""
    F = np.asarray(F, dtype=float)
    C = F.T @ F
    t1, t4, t6 = np.asarray(theta, dtype=float)
    return float(t1 * (np.trace(C) - 3.0) + t4 * (C[0, 0] - 1.0) ** 2 + t6 * (C[1, 1] - 1.0) ** 2)


def unconstrained_stress(F, theta) -> np.ndarray:
    """Derivative of `unconstrained_energy` with respect to F."""
    F = np.asarray(F, dtype=float)
    C = F.T @ F
    t1, t4, t6 = np.asarray(theta, dtype=float)
    return (
        2.0 * t1 * F
        + 4.0 * t4 * (C[0, 0] - 1.0) * F @ np.outer(A0, A0)
        + 4.0 * t6 * (C[1, 1] - 1.0) * F @ np.outer(B0, B0)
    )


def _cof33(F: np.ndarray) -> float:
    return F[0, 0] * F[1, 1] - F[0, 1] * F[1, 0]


def hydrostatic_pressure(F, theta_I1: float, iso_coefficient: float | None = None) -> float:
    """Pressure enforcing P33 = 0; `iso_coefficient` overrides 2*theta_I1."""
    F = np.asarray(F, dtype=float)
    cof = _cof33(F)
    if abs(cof) < 1e-14:
        raise SingularStateError("in-plane cofactor of F vanishes")
    c = 2.0 * theta_I1 if iso_coefficient is None else iso_coefficient
    return float(c * F[2, 2] / cof)


def basis_stresses(F) -> np.ndarray:
    """Stress per unit parameter: array (3, 3, 3), P = sum_m theta_m * G[m].

    The pressure term is folded into G[0] since p is proportional to theta_I1.
    """
    F = np.asarray(F, dtype=float)
    C = F.T @ F
    Finv_T = np.linalg.inv(F).T
    G = np.empty((3, 3, 3))
    G[0] = 2.0 * F - hydrostatic_pressure(F, 1.0) * Finv_T
    G[1] = 4.0 * (C[0, 0] - 1.0) * F @ np.outer(A0, A0)
    G[2] = 4.0 * (C[1, 1] - 1.0) * F @ np.outer(B0, B0)
    return G


def pk1_stress(F, theta) -> np.ndarray:
    return np.tensordot(np.asarray(theta, dtype=float), basis_stresses(F), axes=1)


def pk1_stress_mismatched(F, theta, amplitude: float) -> np.ndarray:
    """Stress of the energy augmented by amplitude * theta_I1 * (I1 - 3)^2.

    Lies outside the three-term model class whenever amplitude != 0.
    """
    F = np.asarray(F, dtype=float)
    theta = np.asarray(theta, dtype=float)
    I1 = float(np.trace(F.T @ F))
    extra = 4.0 * amplitude * theta[0] * (I1 - 3.0)
    iso = 2.0 * theta[0] + extra
    P = unconstrained_stress(F, theta) + extra * F
    return P - hydrostatic_pressure(F, theta[0], iso_coefficient=iso) * np.linalg.inv(F).T


# ---------------------------------------------------------------- extraction

def extract_obs(P) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    return np.array([P[0, 0], P[1, 1]])


def normalize_active(active: Iterable[str]) -> tuple[str, ...]:
    active = {str(a).upper().lstrip("P") for a in active}
    if not active:
        raise MechanicsError("active component set must not be empty")
    unknown = active - set(COMPONENTS)
    if unknown:
        raise MechanicsError(f"unknown stress components {sorted(unknown)}")
    return tuple(c for c in COMPONENTS if c in active)


def extract_tar(P, active: Iterable[str]) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    return np.array([P[_COMPONENT_INDEX[c]] for c in normalize_active(active)])


def observation_matrix(schedule: Schedule) -> np.ndarray:
    """Linear map theta -> stacked (P11, P22) over the schedule, shape (2 n_f, 3)."""
    rows = [np.stack([extract_obs(G) for G in basis_stresses(s.F)], axis=1) for s in schedule]
    return np.concatenate(rows, axis=0)


def target_matrix(schedule: Schedule, active: Iterable[str]) -> np.ndarray:
    """Linear map theta -> stacked target components, shape (n_f, n_tar, 3)."""
    active = normalize_active(active)
    return np.stack([np.stack([extract_tar(G, active) for G in basis_stresses(s.F)], axis=1) for s in schedule])


def stress_components(P_stack: np.ndarray) -> np.ndarray:
    """(n_f, 3, 3) stresses -> (n_f, 3) columns P11, P22, P12."""
    P_stack = np.asarray(P_stack)
    return np.stack([P_stack[:, 0, 0], P_stack[:, 1, 1], P_stack[:, 0, 1]], axis=1)


# ---------------------------------------------------------------- CSV interchange

def write_schedule_csv(schedule: Schedule, path, comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["path", "h", "lambda1", "lambda2", "beta_deg"])
        for s in schedule:
            w.writerow([s.path, s.h, repr(s.lambda1), repr(s.lambda2), repr(s.beta_deg)])


def read_schedule_csv(path) -> Schedule:
    states = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(line for line in fh if not line.startswith("#")):
            base = diagonal_F(float(row["lambda1"]), float(row["lambda2"]), row["path"], int(row["h"]))
            beta = float(row["beta_deg"])
            states.append(rotate_F(base, np.radians(beta)) if beta else base)
    return Schedule(states)


def write_stress_csv(rows: Iterable[tuple[int, DeformationState, np.ndarray]], path, comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["design_id", "path", "h", "P11", "P22", "P12"])
        for design_id, state, P in rows:
            w.writerow([design_id, state.path, state.h, repr(float(P[0, 0])), repr(float(P[1, 1])), repr(float(P[0, 1]))])


def read_stress_csv(path) -> dict[int, list[tuple[str, int, np.ndarray]]]:
    """Return design_id -> list of (path, h, (P11, P22, P12)) in file order."""
    out: dict[int, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(line for line in fh if not line.startswith("#")):
            vals = np.array([float(row["P11"]), float(row["P22"]), float(row["P12"])])
            out.setdefault(int(row["design_id"]), []).append((row["path"], int(row["h"]), vals))
    return out
