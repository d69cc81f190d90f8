"""The parametric drift network v(x, t, c) and its optimizer.

The network is a plain tanh MLP over the concatenation
``[x, time_embedding(t), c]``. The output layer is zero-initialized so a
fresh model is exactly the zero field, which keeps the first ODE losses and
samples well behaved. All parameters and arithmetic are float64.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError, NumericError

TIME_FREQ_MIN = 2.0 * np.pi
TIME_FREQ_MAX = 2.0 * np.pi * 1.0e4


def time_frequencies(dim: int) -> np.ndarray:
    """Geometric ladder of dim/2 angular frequencies from 2*pi to 2*pi*1e4."""
    if dim % 2 != 0 or dim < 2:
        raise ConfigError(f"time embedding dimension must be even and >= 2, got {dim}")
    half = dim // 2
    if half == 1:
        return np.array([TIME_FREQ_MIN])
    return TIME_FREQ_MIN * (TIME_FREQ_MAX / TIME_FREQ_MIN) ** (np.arange(half) / (half - 1))


def time_embed(t: float, dim: int) -> np.ndarray:
    """Sinusoidal features [sin(w_j t), cos(w_j t)] for a single time value."""
    w = time_frequencies(dim)
    return np.concatenate([np.sin(w * t), np.cos(w * t)])


def embed_times(t: np.ndarray, dim: int) -> np.ndarray:
    """Vectorized :func:`time_embed`: (n,) times -> (n, dim) features."""
    w = time_frequencies(dim)
    arg = np.asarray(t, dtype=np.float64)[:, None] * w[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def _uniform_fan_in(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class VectorFieldModel:
    """tanh MLP mapping (x, t, c) to a velocity with the dimension of x.

    Input width is ``dim + time_embed_dim + cond_dim``; ``cond_dim == 0``
    means the model is unconditional and ``forward`` must not receive a
    condition matrix.
    """

    def __init__(
        self,
        dim: int,
        hidden: tuple[int, ...] = (256, 256),
        time_embed_dim: int = 32,
        cond_dim: int = 0,
        rng: np.random.Generator | None = None,
        zero_init_output: bool = True,
    ):
        if dim < 1:
            raise ConfigError(f"dim must be >= 1, got {dim}")
        if cond_dim < 0:
            raise ConfigError(f"cond_dim must be >= 0, got {cond_dim}")
        time_frequencies(time_embed_dim)  # validates evenness
        rng = rng if rng is not None else np.random.default_rng(0)

        self.dim = dim
        self.hidden = tuple(int(h) for h in hidden)
        self.time_embed_dim = time_embed_dim
        self.cond_dim = cond_dim
        self.rectification_round = 0

        widths = [dim + time_embed_dim + cond_dim, *self.hidden, dim]
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            if last and zero_init_output:
                w = np.zeros((fan_in, fan_out))
            else:
                w = _uniform_fan_in(rng, fan_in, fan_out)
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(np.zeros(fan_out), requires_grad=True))

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"layers.{i}.weight", w))
            out.append((f"layers.{i}.bias", b))
        return out

    @property
    def param_count(self) -> int:
        return sum(p.size for _, p in self.parameters())

    def zero_grad(self):
        for _, p in self.parameters():
            p.zero_grad()

    def forward(self, x, t, c=None) -> Tensor:
        """Velocity prediction for a batch.

        x: (n, dim) positions; t: (n,) times in [0, 1]; c: (n, cond_dim)
        condition rows, required iff the model is conditional. Records the
        tape unless called under ``autograd.no_grad``.
        """
        x = ag.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimensionError(f"expected x of shape (n, {self.dim}), got {x.shape}")
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        if t.shape[0] != x.shape[0]:
            raise DimensionError(f"expected {x.shape[0]} time values, got {t.shape[0]}")
        emb = Tensor(embed_times(t, self.time_embed_dim))

        if self.cond_dim == 0:
            if c is not None:
                raise DimensionError("model is unconditional but a condition was supplied")
            h = ag.concatenate([x, emb], axis=1)
        else:
            if c is None:
                raise DimensionError("model is conditional: a condition matrix is required")
            c = ag.as_tensor(c)
            if c.ndim != 2 or c.shape != (x.shape[0], self.cond_dim):
                raise DimensionError(
                    f"expected condition of shape ({x.shape[0]}, {self.cond_dim}), got {c.shape}"
                )
            h = ag.concatenate([x, emb, c], axis=1)

        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i != last:
                h = ag.tanh(h)
        return h

    def velocity(self, x: np.ndarray, t, c: np.ndarray | None = None) -> np.ndarray:
        """Tape-free forward pass returning a plain array (for samplers)."""
        if np.isscalar(t):
            t = np.full(x.shape[0], float(t))
        with ag.no_grad():
            return self.forward(x, t, c).data


class Adam:
    """Bias-corrected Adam over a fixed parameter list."""

    def __init__(
        self,
        params: list[tuple[str, Tensor]],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {lr}")
        if not (0 < beta1 < 1 and 0 < beta2 < 1):
            raise ConfigError(f"betas must lie in (0, 1), got {beta1}, {beta2}")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self):
        """Apply one update: theta -= lr * m_hat / (sqrt(v_hat) + eps)."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in parameter '{name}'")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def state_tensors(self) -> list[tuple[str, np.ndarray]]:
        """Moment buffers in declared parameter order (for checkpointing)."""
        out = []
        for name, _ in self.params:
            out.append((f"adam.{name}.m", self.m[name]))
            out.append((f"adam.{name}.v", self.v[name]))
        return out
