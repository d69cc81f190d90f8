"""Quantitative evaluation of trained flows.

Distributional quality is measured with the energy distance (exact O(n^2)
V-statistic), path quality with a straightness score (mean squared residual
between trajectory displacement and the local drift), plus a one-step gap,
a conversion-accuracy oracle for the toy-mel task, and a wall-time / NFE
benchmark harness.
"""

from __future__ import annotations

import hashlib
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .solvers import SolverConfig, euler_integrate, integrate, sample


def thread_count() -> int:
    """Worker cap from RECTIFLOW_THREADS (default 1, for determinism)."""
    raw = os.environ.get("RECTIFLOW_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"RECTIFLOW_THREADS must be an integer, got '{raw}'") from exc
    if n < 1:
        raise ConfigError(f"RECTIFLOW_THREADS must be >= 1, got {n}")
    return n


@dataclass
class MetricReport:
    metric: str
    value: float
    n: int
    seed: int
    config_hash: str

    def __post_init__(self):
        self.value = float(self.value)
        if not np.isfinite(self.value):
            raise ConfigError(f"metric '{self.metric}' produced a non-finite value")


def config_fingerprint(*parts) -> str:
    text = "|".join(str(p) for p in parts)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def write_metric_csv(reports: list[MetricReport], path, append: bool = False) -> None:
    mode = "a" if append and os.path.exists(path) else "w"
    with open(path, mode) as fh:
        if mode == "w":
            fh.write("metric,value,n,seed,config_hash\n")
        for r in reports:
            fh.write(f"{r.metric},{r.value!r},{r.n},{r.seed},{r.config_hash}\n")


# -- straightness -------------------------------------------------------------


def straightness(
    model,
    n: int,
    rng: np.random.Generator,
    n_eval_steps: int = 100,
    fusion=None,
    cond_source=None,
) -> float:
    """Mean squared drift residual along Euler trajectories of the model.

    Integrates n noise points with m = n_eval_steps Euler steps and returns
    the mean over trajectories of (1/m) sum_k ||(z1 - z0) - v(z_k, t_k)||^2.
    Zero iff every trajectory is a straight line traversed at constant speed.
    """
    z0 = rng.standard_normal((n, model.dim))
    c = None
    if model.cond_dim > 0:
        if fusion is None or cond_source is None:
            raise ConfigError("conditional model needs fusion and a condition source")
        from . import autograd as ag

        with ag.no_grad():
            c = fusion.fuse_batch(cond_source.draw_bundles(n, rng)).data
    return straightness_of_field(lambda z, t: model.velocity(z, t, c), z0, n_eval_steps)


def straightness_of_field(field, z0: np.ndarray, m: int) -> float:
    h = 1.0 / m
    z = np.array(z0, dtype=np.float64)
    drifts = []
    for k in range(m):
        v = field(z, k * h)
        drifts.append(v)
        z = z + h * v
    disp = z - z0
    total = np.zeros(z0.shape[0])
    for v in drifts:
        total += np.sum((disp - v) ** 2, axis=1)
    return float(np.mean(total / m))


# -- energy distance ----------------------------------------------------------


def _mean_pairwise_norm(a: np.ndarray, b: np.ndarray, workers: int, block: int = 512) -> float:
    """Exact mean of ||a_i - b_j|| over all n_a * n_b pairs, blockwise."""

    def block_sum(i):
        chunk = a[i : i + block]
        d = chunk[:, None, :] - b[None, :, :]
        return float(np.sqrt(np.sum(d * d, axis=2)).sum())

    starts = range(0, a.shape[0], block)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            sums = list(pool.map(block_sum, starts))
    else:
        sums = [block_sum(i) for i in starts]
    # Fixed, chunk-ordered reduction keeps the result thread-count independent.
    return sum(sums) / (a.shape[0] * b.shape[0])


def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    """E = 2 E||a - b|| - E||a - a'|| - E||b - b'|| over all index pairs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] == 0 or b.shape[0] == 0:
        raise DimensionError("energy_distance needs two nonempty (n, d) arrays")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    w = thread_count()
    ab = _mean_pairwise_norm(a, b, w)
    aa = _mean_pairwise_norm(a, a, w)
    bb = _mean_pairwise_norm(b, b, w)
    return 2.0 * ab - aa - bb


# -- one-step gap --------------------------------------------------------------


def one_step_gap(
    model,
    data_source,
    n: int,
    rng: np.random.Generator,
    fusion=None,
    cond_source=None,
    atol: float = 1e-5,
    rtol: float = 1e-5,
) -> float:
    """Energy-distance penalty of 1-step Euler sampling versus RK45 sampling.

    Both solvers start from the same z0 draw; positive values mean one-step
    generation is worse than the accurate solution of the same flow.
    """
    z0 = rng.standard_normal((n, model.dim))
    data = data_source.sample(n, rng)
    c = None
    if model.cond_dim > 0:
        if fusion is None or cond_source is None:
            raise ConfigError("conditional model needs fusion and a condition source")
        from . import autograd as ag

        with ag.no_grad():
            c = fusion.fuse_batch(cond_source.draw_bundles(n, rng)).data
    one = euler_integrate(lambda z, t: model.velocity(z, t, c), z0, 1).states[-1]
    full = integrate(model, z0, SolverConfig(kind="rk45", atol=atol, rtol=rtol), c=c).states[-1]
    return energy_distance(one, data) - energy_distance(full, data)


# -- conversion accuracy --------------------------------------------------------


def conversion_accuracy(
    model,
    fusion,
    toy_source,
    n_trials: int,
    rng: np.random.Generator,
    solver_config: SolverConfig | None = None,
) -> float:
    """Fraction of conversions whose regressed envelope is nearer the target
    speaker's envelope than the source speaker's.

    Each trial draws a source utterance, swaps in a different target
    speaker's vector (keeping the source content and pitch), samples one
    patch column from the conditional flow, and regresses its envelope with
    the generator's cosine-basis oracle.
    """
    if solver_config is None:
        solver_config = SolverConfig(kind="euler", n_steps=30)
    specs = toy_source.speakers
    if len(specs) < 2:
        raise ConfigError("conversion needs at least two speakers")

    from .fusion import BundleBatch

    bundles = []
    pairs = []
    for _ in range(n_trials):
        src = int(rng.integers(0, len(specs)))
        tgt = int(rng.integers(0, len(specs) - 1))
        if tgt >= src:
            tgt += 1
        if np.allclose(specs[src].envelope_coefs, specs[tgt].envelope_coefs):
            warnings.warn(f"speakers {src} and {tgt} have identical envelopes; trial excluded")
            continue
        utt = toy_source.draw_utterance(rng, speaker_idx=src)
        bundles.append(toy_source.make_bundle(specs[tgt], utt.content_codes, utt.pitch_contour))
        pairs.append((src, tgt))
    if not pairs:
        raise ConfigError("every conversion trial was degenerate")

    result = sample(
        model,
        len(pairs),
        solver_config,
        rng,
        fusion=fusion,
        bundles=BundleBatch.from_bundles(bundles),
    )
    hits = 0
    for x, (src, tgt) in zip(result.samples, pairs):
        env = toy_source.envelope_of(x)
        d_tgt = np.linalg.norm(env - specs[tgt].envelope_coefs)
        d_src = np.linalg.norm(env - specs[src].envelope_coefs)
        hits += int(d_tgt < d_src)
    return hits / len(pairs)


def conversion_accuracy_oracle_only(toy_source, n_trials: int, rng: np.random.Generator) -> float:
    """Self-test: run the oracle on generator ground-truth patches."""
    specs = toy_source.speakers
    hits = 0
    for _ in range(n_trials):
        src = int(rng.integers(0, len(specs)))
        tgt = int(rng.integers(0, len(specs) - 1))
        if tgt >= src:
            tgt += 1
        utt = toy_source.draw_utterance(rng, speaker_idx=tgt)
        env = toy_source.envelope_of(utt.patch[:, utt.frame])
        d_tgt = np.linalg.norm(env - specs[tgt].envelope_coefs)
        d_src = np.linalg.norm(env - specs[src].envelope_coefs)
        hits += int(d_tgt < d_src)
    return hits / n_trials


# -- benchmark -------------------------------------------------------------------


@dataclass
class BenchRow:
    method: str
    iters: int
    nfe: int
    seconds_median: float


def bench(
    model,
    solver_configs: list[SolverConfig],
    n: int,
    rng_seed: int,
    repeats: int = 5,
    fusion=None,
    cond_source=None,
) -> list[BenchRow]:
    """Median sampling wall time per solver; one untimed warm-up run each.

    For Euler rows ``iters`` is the step count; for RK45 it is the NFE the
    run consumed (adaptive solvers have no fixed step count).
    """
    if repeats < 3:
        raise ConfigError(f"repeats must be >= 3, got {repeats}")
    rows = []
    for cfg in solver_configs:
        sample(model, n, cfg, np.random.default_rng(rng_seed), fusion=fusion, cond_source=cond_source)
        times = []
        nfe = 0
        for _ in range(repeats):
            res = sample(
                model, n, cfg, np.random.default_rng(rng_seed), fusion=fusion, cond_source=cond_source
            )
            times.append(res.wall_time_s)
            nfe = res.nfe
        iters = cfg.n_steps if cfg.kind == "euler" else nfe
        rows.append(
            BenchRow(
                method=cfg.label(), iters=iters, nfe=nfe, seconds_median=float(np.median(times))
            )
        )
    return rows


def write_bench_csv(rows: list[BenchRow], path) -> None:
    with open(path, "w") as fh:
        fh.write("method,iter,nfe,seconds_median\n")
        for r in rows:
            fh.write(f"{r.method},{r.iters},{r.nfe},{r.seconds_median!r}\n")
