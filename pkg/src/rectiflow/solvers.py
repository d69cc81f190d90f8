"""ODE integration of dz/dt = v(z, t) over t in [0, 1].

Two integrators: fixed-step explicit Euler (the field is evaluated at each
step's left endpoint) and the adaptive Dormand-Prince 5(4) pair with the
first-same-as-last (FSAL) property. Both count every vector-field
evaluation into ``Trajectory.nfe``, including evaluations on rejected RK45
steps and the two evaluations the initial-step heuristic spends, so for
RK45 the exact accounting is

    nfe = 2 + 6 * (accepted + rejected)

(one fresh evaluation seeds both the heuristic and the first stage; each
attempt then needs stages 2..7, with stage 1 reused from FSAL or from the
rejected attempt it retries).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import ConfigError, IntegrationError
from .fusion import FusionEncoder

MIN_STEP = 1e-12

# Dormand-Prince 5(4) tableau. Row sums of A equal the nodes C; B are the
# 5th-order weights; E = B - B_hat feeds the embedded error estimate.
DOPRI_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
DOPRI_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
DOPRI_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
DOPRI_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])


def tableau_self_test() -> None:
    """Each A row must sum to its node; B must sum to one."""
    for i, row in enumerate(DOPRI_A):
        if abs(row.sum() - DOPRI_C[i]) > 1e-14:
            raise AssertionError(f"tableau row {i} sums to {row.sum()}, node is {DOPRI_C[i]}")
    if abs(DOPRI_B.sum() - 1.0) > 1e-14:
        raise AssertionError("quadrature weights do not sum to 1")


@dataclass
class SolverConfig:
    kind: str  # "euler" | "rk45"
    n_steps: int | None = None
    atol: float | None = None
    rtol: float | None = None
    max_steps: int = 100_000
    record_trajectory: bool = False

    def __post_init__(self):
        if self.kind == "euler":
            if self.n_steps is None or self.n_steps < 1:
                raise ConfigError(f"euler requires n_steps >= 1, got {self.n_steps}")
            if self.atol is not None or self.rtol is not None:
                raise ConfigError("euler takes n_steps only; atol/rtol belong to rk45")
        elif self.kind == "rk45":
            if self.atol is None or self.rtol is None:
                raise ConfigError("rk45 requires both atol and rtol")
            if self.atol < 1e-12 or self.rtol < 1e-12:
                raise ConfigError(f"tolerances must be >= 1e-12, got atol={self.atol} rtol={self.rtol}")
            if self.n_steps is not None:
                raise ConfigError("rk45 is adaptive; n_steps is not accepted")
        else:
            raise ConfigError(f"unknown solver kind '{self.kind}' (euler or rk45)")

    def label(self) -> str:
        return f"euler-{self.n_steps}" if self.kind == "euler" else "rk45"


@dataclass
class Trajectory:
    times: np.ndarray            # increasing, times[0]=0, times[-1]=1
    states: list[np.ndarray]     # matching states; states[-1] is the sample
    nfe: int
    accepted: int = 0
    rejected: int = 0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.times[0] != 0.0 or self.times[-1] != 1.0:
            raise IntegrationError(f"trajectory must span [0, 1], got {self.times[0]}..{self.times[-1]}")
        if np.any(np.diff(self.times) <= 0):
            raise IntegrationError("trajectory times must be strictly increasing")


def euler_integrate(field, z0: np.ndarray, n_steps: int, record: bool = False) -> Trajectory:
    """Fixed-grid Euler: z_{k+1} = z_k + (1/n) v(z_k, k/n). nfe == n_steps."""
    if n_steps < 1:
        raise ConfigError(f"n_steps must be >= 1, got {n_steps}")
    z = np.array(z0, dtype=np.float64)
    h = 1.0 / n_steps
    times = [0.0]
    states = [z.copy()]
    for k in range(n_steps):
        v = field(z, k * h)
        z = z + h * v
        if not np.all(np.isfinite(z)):
            raise IntegrationError(f"non-finite state after euler step {k + 1}/{n_steps}")
        if record or k == n_steps - 1:
            times.append((k + 1) * h)
            states.append(z.copy())
    times[-1] = 1.0
    return Trajectory(times=np.array(times), states=states, nfe=n_steps, accepted=n_steps)


def _error_norm(err: np.ndarray, z: np.ndarray, z_new: np.ndarray, atol: float, rtol: float) -> float:
    scale = atol + rtol * np.maximum(np.abs(z), np.abs(z_new))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def _initial_step(field, z0, f0, atol, rtol):
    """Hairer's starting-step heuristic (one extra field evaluation)."""
    scale = atol + rtol * np.abs(z0)
    d0 = np.sqrt(np.mean((z0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    z1 = z0 + h0 * f0
    f1 = field(z1, h0)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100.0 * h0, h1, 1.0)


def rk45_integrate(
    field,
    z0: np.ndarray,
    atol: float,
    rtol: float,
    max_steps: int = 100_000,
    record: bool = False,
) -> Trajectory:
    """Adaptive Dormand-Prince 5(4) from t=0 to t=1.

    Error norm: RMS of componentwise errors scaled by
    atol + rtol * max(|z|, |z_new|); a step is accepted when the norm is
    <= 1 and the next step is scaled by 0.9 * norm^(-1/5), clamped to
    [0.2, 5]. The whole batch advances on one shared step size.
    """
    z = np.array(z0, dtype=np.float64)
    t = 0.0
    nfe = 1
    f0 = field(z, t)
    h = _initial_step(field, z, f0, atol, rtol)
    nfe += 1

    times = [0.0]
    states = [z.copy()]
    k1 = f0
    accepted = 0
    rejected = 0

    while t < 1.0:
        if h < MIN_STEP:
            raise IntegrationError(f"step size underflow ({h:.3e}) at t={t:.6f}")
        if accepted + rejected >= max_steps:
            raise IntegrationError(f"exceeded max_steps={max_steps} at t={t:.6f}")
        last = h >= 1.0 - t
        h_step = 1.0 - t if last else h

        ks = [k1]
        for i in range(1, 7):
            zi = z + h_step * sum(a * k for a, k in zip(DOPRI_A[i], ks))
            ks.append(field(zi, t + DOPRI_C[i] * h_step))
        nfe += 6

        z_new = z + h_step * sum(b * k for b, k in zip(DOPRI_B, ks))
        err = h_step * sum(e * k for e, k in zip(DOPRI_E, ks))
        if not np.all(np.isfinite(z_new)):
            raise IntegrationError(f"non-finite state in rk45 step at t={t:.6f}")
        norm = _error_norm(err, z, z_new, atol, rtol)

        if norm <= 1.0:
            accepted += 1
            t = 1.0 if last else t + h_step
            z = z_new
            k1 = ks[6]  # FSAL: stage 7 is next step's stage 1
            if record or t >= 1.0:
                times.append(t)
                states.append(z.copy())
        else:
            rejected += 1

        factor = 5.0 if norm == 0.0 else min(5.0, max(0.2, 0.9 * norm ** -0.2))
        h = h_step * factor
    return Trajectory(
        times=np.array(times), states=states, nfe=nfe, accepted=accepted, rejected=rejected
    )


def integrate(model, z0: np.ndarray, config: SolverConfig, c: np.ndarray | None = None) -> Trajectory:
    """Integrate a (frozen) velocity model from noise to data time."""

    def field(z, t):
        return model.velocity(z, t, c)

    if config.kind == "euler":
        return euler_integrate(field, z0, config.n_steps, record=config.record_trajectory)
    return rk45_integrate(
        field,
        z0,
        atol=config.atol,
        rtol=config.rtol,
        max_steps=config.max_steps,
        record=config.record_trajectory,
    )


@dataclass
class SampleResult:
    samples: np.ndarray
    trajectory: Trajectory
    nfe: int
    wall_time_s: float
    conditions: np.ndarray | None = None


def sample(
    model,
    n: int,
    solver_config: SolverConfig,
    rng: np.random.Generator,
    fusion: FusionEncoder | None = None,
    cond_source=None,
    bundles=None,
) -> SampleResult:
    """Draw z0 ~ N(0, I), fuse conditions if any, and integrate to t=1."""
    z0 = rng.standard_normal((n, model.dim))
    c = None
    if model.cond_dim > 0:
        if fusion is None:
            raise ConfigError("conditional model requires its fusion encoder for sampling")
        if bundles is None:
            if cond_source is None:
                raise ConfigError("conditional sampling needs bundles or a condition source")
            bundles = cond_source.draw_bundles(n, rng)
        if len(bundles) == 1 and n > 1:
            with ag.no_grad():
                c = np.repeat(fusion.fuse_batch(bundles).data, n, axis=0)
        else:
            if len(bundles) != n:
                raise ConfigError(f"{len(bundles)} bundles for {n} samples")
            with ag.no_grad():
                c = fusion.fuse_batch(bundles).data
    start = time.perf_counter()
    traj = integrate(model, z0, solver_config, c=c)
    wall = time.perf_counter() - start
    return SampleResult(
        samples=traj.states[-1], trajectory=traj, nfe=traj.nfe, wall_time_s=wall, conditions=c
    )


def write_trajectory_csv(traj: Trajectory, path) -> None:
    """Dump a recorded trajectory as rows of row,t,dim0,dim1,..."""
    dim = traj.states[0].shape[1]
    with open(path, "w") as fh:
        fh.write("row,t," + ",".join(f"dim{i}" for i in range(dim)) + "\n")
        for row in range(traj.states[0].shape[0]):
            for t, state in zip(traj.times, traj.states):
                vals = ",".join(repr(float(v)) for v in state[row])
                fh.write(f"{row},{float(t)!r},{vals}\n")
