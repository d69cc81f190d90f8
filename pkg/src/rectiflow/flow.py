"""Rectified-flow mathematics: interpolation, objective, training, reflow.

Training fits a velocity field v(x_t, t, c) to the straight-line
displacement x1 - x0 of coupled samples, where x_t = t*x1 + (1-t)*x0 and t
is drawn uniformly per batch row. Round 0 couples noise and data
independently; rectification rounds re-pair each noise point with the ODE
endpoint the trained flow transports it to, and retrain from scratch on
those pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError, DomainError, NumericError
from .fusion import BundleBatch, FusionEncoder
from .vectorfield import Adam, VectorFieldModel

SOURCE_TAGS = ("noise", "data", "generated")


@dataclass
class SampleBatch:
    """N x D matrix of points plus the role they play in a coupling."""

    data: np.ndarray
    source_tag: str = "data"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise DimensionError(f"expected a nonempty (N, D) matrix, got shape {self.data.shape}")
        if self.source_tag not in SOURCE_TAGS:
            raise ConfigError(f"source_tag must be one of {SOURCE_TAGS}, got '{self.source_tag}'")
        if not np.all(np.isfinite(self.data)):
            raise NumericError("sample batch contains non-finite entries")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def _as_rows(x) -> np.ndarray:
    return x.data if isinstance(x, SampleBatch) else np.asarray(x, dtype=np.float64)


@dataclass
class CoupledDataset:
    """Paired (z0, z1) samples; round k >= 1 means z1 was generated from z0."""

    z0: SampleBatch
    z1: SampleBatch
    rectification_round: int = 0
    condition: BundleBatch | None = None

    def __post_init__(self):
        if self.z0.data.shape != self.z1.data.shape:
            raise DimensionError(
                f"z0 shape {self.z0.data.shape} != z1 shape {self.z1.data.shape}"
            )
        if self.rectification_round < 0:
            raise ConfigError(f"rectification_round must be >= 0, got {self.rectification_round}")
        if self.condition is not None and len(self.condition) != self.z0.n:
            raise DimensionError(
                f"{len(self.condition)} conditions for {self.z0.n} coupled rows"
            )

    @property
    def n(self) -> int:
        return self.z0.n


@dataclass
class TrainConfig:
    dim: int
    batch_size: int = 256
    steps: int = 20_000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    condition: str = "unconditional"  # or "fused"
    hidden: tuple[int, ...] = (256, 256)
    time_embed_dim: int = 32

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.condition not in ("unconditional", "fused"):
            raise ConfigError(f"condition must be 'unconditional' or 'fused', got '{self.condition}'")
        self.hidden = tuple(int(h) for h in self.hidden)


# -- the objective ----------------------------------------------------------


def interpolate(x0, x1, t) -> SampleBatch:
    """Per-row linear interpolation t*x1 + (1-t)*x0."""
    a = _as_rows(x0)
    b = _as_rows(x1)
    if a.shape != b.shape:
        raise DimensionError(f"x0 shape {a.shape} != x1 shape {b.shape}")
    tv = np.asarray(t, dtype=np.float64).reshape(-1)
    if tv.shape[0] != a.shape[0]:
        raise DimensionError(f"need one t per row: {tv.shape[0]} times for {a.shape[0]} rows")
    if np.any(tv < 0.0) or np.any(tv > 1.0):
        raise DomainError("interpolation times must lie in [0, 1]")
    mixed = tv[:, None] * b + (1.0 - tv)[:, None] * a
    return SampleBatch(mixed, source_tag="data")


def flow_loss(v_pred, x0, x1) -> float:
    """Mean over rows of ||(x1 - x0) - v_pred||^2 (summed over coordinates)."""
    v = _as_rows(v_pred)
    a = _as_rows(x0)
    b = _as_rows(x1)
    if not (v.shape == a.shape == b.shape):
        raise DimensionError(f"shape mismatch: v {v.shape}, x0 {a.shape}, x1 {b.shape}")
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise NumericError("flow_loss received non-finite input")
    resid = (b - a) - v
    return float(np.mean(np.sum(resid * resid, axis=1)))


def _flow_loss_tensor(v_pred: Tensor, x0: np.ndarray, x1: np.ndarray) -> Tensor:
    target = Tensor(x1 - x0)
    resid = target - v_pred
    return (resid * resid).sum(axis=1).mean()


# -- pair sources -------------------------------------------------------------


class IndependentPairs:
    """Round-0 coupling: fresh Gaussian noise against i.i.d. data rows."""

    def __init__(self, data_source, conditional: bool = False):
        if data_source is None:
            raise ConfigError("independent coupling requires a data source")
        self.data_source = data_source
        self.conditional = conditional
        self.dim = data_source.dim
        self.rectification_round = 0

    def draw(self, n: int, rng: np.random.Generator):
        x0 = rng.standard_normal((n, self.dim))
        if self.conditional:
            x1, bundles = self.data_source.draw(n, rng)
            return x0, x1, bundles
        return x0, self.data_source.sample(n, rng), None


class CoupledPairs:
    """Minibatches from a fixed coupled dataset (rectification rounds)."""

    def __init__(self, dataset: CoupledDataset):
        self.dataset = dataset
        self.dim = dataset.z0.dim
        self.rectification_round = dataset.rectification_round

    def draw(self, n: int, rng: np.random.Generator):
        idx = rng.integers(0, self.dataset.n, size=n)
        cond = None if self.dataset.condition is None else self.dataset.condition.subset(idx)
        return self.dataset.z0.data[idx], self.dataset.z1.data[idx], cond


def draw_pair(
    data_source, noise, rng: np.random.Generator, n: int
) -> tuple[SampleBatch, SampleBatch]:
    """Independent round-0 coupling: (noise rows, data rows)."""
    if data_source is None:
        raise ConfigError("draw_pair requires a data source")
    x0 = noise.sample(n, rng)
    x1 = data_source.sample(n, rng)
    return SampleBatch(x0, source_tag="noise"), SampleBatch(x1, source_tag="data")


# -- training -----------------------------------------------------------------


def train_step(
    model: VectorFieldModel,
    x0: np.ndarray,
    x1: np.ndarray,
    t: np.ndarray,
    optimizer: Adam,
    fusion: FusionEncoder | None = None,
    bundles: BundleBatch | None = None,
    step_index: int = 0,
) -> float:
    """One gradient step on the flow objective; returns the pre-update loss."""
    optimizer.zero_grad()
    xt = interpolate(x0, x1, t).data
    c = fusion.fuse_batch(bundles) if fusion is not None else None
    v = model.forward(xt, t, c)
    loss_t = _flow_loss_tensor(v, x0, x1)
    loss = loss_t.item()
    if not np.isfinite(loss):
        norms = ", ".join(
            f"{name}={np.linalg.norm(p.data):.3e}" for name, p in model.parameters()[:4]
        )
        raise NumericError(
            f"non-finite loss at step {step_index} (leading parameter norms: {norms})"
        )
    loss_t.backward()
    optimizer.step()
    return loss


@dataclass
class TrainResult:
    model: VectorFieldModel
    fusion: FusionEncoder | None
    history: list[tuple[int, float]] = field(default_factory=list)


def train(
    config: TrainConfig,
    data_source,
    fusion_config=None,
    pair_source=None,
) -> TrainResult:
    """Train a fresh velocity field; deterministic given (config, sources).

    For condition mode "fused" a fresh :class:`FusionEncoder` is built from
    ``fusion_config`` and trained jointly with the field. ``pair_source``
    overrides the default independent coupling (used by rectification).
    """
    conditional = config.condition == "fused"
    if conditional and fusion_config is None:
        raise ConfigError("condition mode 'fused' requires a fusion config")
    if not conditional and fusion_config is not None:
        raise ConfigError("fusion config supplied but condition mode is 'unconditional'")
    if pair_source is None:
        pair_source = IndependentPairs(data_source, conditional=conditional)
    if pair_source.dim != config.dim:
        raise ConfigError(f"config dim {config.dim} != data dim {pair_source.dim}")

    rng = np.random.default_rng(config.seed)
    fusion = FusionEncoder(fusion_config, rng) if conditional else None
    model = VectorFieldModel(
        dim=config.dim,
        hidden=config.hidden,
        time_embed_dim=config.time_embed_dim,
        cond_dim=fusion.config.cond_dim if conditional else 0,
        rng=rng,
    )
    params = list(model.parameters())
    if conditional:
        params += fusion.parameters()
    optimizer = Adam(params, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)

    history: list[tuple[int, float]] = []
    for step in range(config.steps):
        x0, x1, bundles = pair_source.draw(config.batch_size, rng)
        t = rng.uniform(0.0, 1.0, size=config.batch_size)
        loss = train_step(
            model, x0, x1, t, optimizer, fusion=fusion, bundles=bundles, step_index=step
        )
        history.append((step, loss))
    model.rectification_round = pair_source.rectification_round + 1
    return TrainResult(model=model, fusion=fusion, history=history)


def write_loss_csv(history: list[tuple[int, float]], path) -> None:
    with open(path, "w") as fh:
        fh.write("step,loss\n")
        for step, loss in history:
            fh.write(f"{step},{loss!r}\n")


# -- rectification ------------------------------------------------------------


def build_reflow_dataset(
    model: VectorFieldModel,
    solver_config,
    n: int,
    rng: np.random.Generator,
    fusion: FusionEncoder | None = None,
    cond_source=None,
) -> CoupledDataset:
    """Pair fresh noise with the flow endpoints it is transported to."""
    from .solvers import integrate  # local import to avoid a cycle

    z0 = rng.standard_normal((n, model.dim))
    bundles = None
    c = None
    if model.cond_dim > 0:
        if fusion is None or cond_source is None:
            raise ConfigError("conditional model needs fusion and a condition source for reflow")
        bundles = cond_source.draw_bundles(n, rng)
        with ag.no_grad():
            c = fusion.fuse_batch(bundles).data

    try:
        traj = integrate(model, z0, solver_config, c=c)
    except Exception:
        _locate_failing_row(model, z0, solver_config, c)
        raise
    z1 = traj.states[-1]
    return CoupledDataset(
        z0=SampleBatch(z0, source_tag="noise"),
        z1=SampleBatch(z1, source_tag="generated"),
        rectification_round=model.rectification_round,
        condition=bundles,
    )


def _locate_failing_row(model, z0, solver_config, c):
    """Re-integrate row by row so integration errors name the offending row."""
    from .errors import IntegrationError
    from .solvers import integrate

    for i in range(z0.shape[0]):
        ci = None if c is None else c[i : i + 1]
        try:
            integrate(model, z0[i : i + 1], solver_config, c=ci)
        except IntegrationError as exc:
            raise IntegrationError(f"row {i}: {exc}") from exc


def rectify(
    model: VectorFieldModel,
    config: TrainConfig,
    n_pairs: int = 8192,
    solver_config=None,
    fusion: FusionEncoder | None = None,
    cond_source=None,
    pair_seed: int | None = None,
) -> tuple[TrainResult, CoupledDataset]:
    """One rectification round: generate pairs with ``model``, retrain fresh.

    The new model (and, when conditional, a new fusion encoder) is trained
    from scratch on the generated coupling; nothing is warm-started from the
    parent weights.
    """
    from .solvers import SolverConfig

    if solver_config is None:
        solver_config = SolverConfig(kind="rk45", atol=1e-5, rtol=1e-5)
    pair_rng = np.random.default_rng(config.seed if pair_seed is None else pair_seed)
    dataset = build_reflow_dataset(
        model, solver_config, n_pairs, pair_rng, fusion=fusion, cond_source=cond_source
    )
    result = train(
        config,
        data_source=None,
        fusion_config=fusion.config if fusion is not None else None,
        pair_source=CoupledPairs(dataset),
    )
    return result, dataset
