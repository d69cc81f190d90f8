"""Synthetic data sources.

Two kinds: classic 2-D benchmark densities (two_gaussians, two_moons,
checkerboard), each shipping an independent membership oracle, and a
parametric "toy mel" generator with controllable speaker / content / pitch
factors that stands in for the speech front-end.

The toy patch is built in an orthonormal cosine (DCT-II) basis over the D
bands. The speaker envelope occupies the lowest E basis coefficients; the
pitch bump and the per-content-code offsets live strictly in the remaining
high coefficients. Projection onto the first E basis vectors therefore
recovers the envelope exactly on noise-free patches, which is what the
conversion oracle in :mod:`rectiflow.metrics` relies on.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, DimensionError
from .fusion import BundleBatch, ConditionBundle, uniform_codebook, vq_quantize

TWO_MOONS_NOISE = 0.08


@dataclass
class Distribution:
    """Unlimited i.i.d. sampler with a membership oracle."""

    name: str
    dim: int
    sampler: Callable[[int, np.random.Generator], np.ndarray]
    membership: Callable[[np.ndarray], np.ndarray] | None = None

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise ConfigError(f"sample count must be >= 1, got {n}")
        out = self.sampler(n, rng)
        if out.shape != (n, self.dim):
            raise DimensionError(f"sampler produced {out.shape}, expected ({n}, {self.dim})")
        return out


def noise_source(dim: int) -> Distribution:
    """Standard Gaussian rows in R^dim."""
    return Distribution(
        name="standard_gaussian",
        dim=dim,
        sampler=lambda n, rng: rng.standard_normal((n, dim)),
    )


def _two_gaussians(n: int, rng: np.random.Generator) -> np.ndarray:
    centers = np.array([[-4.0, 0.0], [4.0, 0.0]])
    which = rng.integers(0, 2, size=n)
    return centers[which] + rng.standard_normal((n, 2))


def _two_moons(n: int, rng: np.random.Generator) -> np.ndarray:
    # Upper moon: unit semicircle; lower moon: shifted mirror image.
    # Radial noise is resampled until within 3 sigma, so the band oracle
    # below is exact on the generator's support.
    phi = rng.uniform(0.0, np.pi, size=n)
    lower = rng.integers(0, 2, size=n).astype(bool)
    x = np.where(lower, 1.0 - np.cos(phi), np.cos(phi))
    y = np.where(lower, 0.5 - np.sin(phi), np.sin(phi))
    pts = np.stack([x, y], axis=1)
    noise = rng.standard_normal((n, 2)) * TWO_MOONS_NOISE
    bad = np.linalg.norm(noise, axis=1) > 3.0 * TWO_MOONS_NOISE
    while np.any(bad):
        noise[bad] = rng.standard_normal((int(bad.sum()), 2)) * TWO_MOONS_NOISE
        bad = np.linalg.norm(noise, axis=1) > 3.0 * TWO_MOONS_NOISE
    return pts + noise


def _two_moons_member(points: np.ndarray) -> np.ndarray:
    """True iff the point is within 3 sigma of one of the two semicircular arcs."""

    def dist_to_arc(p, cx, cy, upper):
        v = p - np.array([cx, cy])
        r = np.linalg.norm(v, axis=1)
        on_arc = v[:, 1] >= 0 if upper else v[:, 1] <= 0
        d_radial = np.abs(r - 1.0)
        # Off the half-plane of the arc: nearest points are its endpoints.
        e1 = np.linalg.norm(p - np.array([cx - 1.0, cy]), axis=1)
        e2 = np.linalg.norm(p - np.array([cx + 1.0, cy]), axis=1)
        return np.where(on_arc, d_radial, np.minimum(e1, e2))

    p = np.asarray(points, dtype=np.float64)
    d_up = dist_to_arc(p, 0.0, 0.0, upper=True)
    d_lo = dist_to_arc(p, 1.0, 0.5, upper=False)
    return np.minimum(d_up, d_lo) <= 3.0 * TWO_MOONS_NOISE + 1e-12


def _checkerboard(n: int, rng: np.random.Generator) -> np.ndarray:
    # Uniform over the black squares of a 4x4 board covering [-4, 4]^2
    # (unit cells with even floor-parity).
    pts = np.empty((n, 2))
    filled = 0
    while filled < n:
        cand = rng.uniform(-4.0, 4.0, size=(2 * (n - filled), 2))
        keep = ((np.floor(cand[:, 0]) + np.floor(cand[:, 1])) % 2 == 0)
        sel = cand[keep]
        take = min(len(sel), n - filled)
        pts[filled : filled + take] = sel[:take]
        filled += take
    return pts


def _checkerboard_member(points: np.ndarray) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    inside = np.all(np.abs(p) <= 4.0, axis=1)
    parity = (np.floor(p[:, 0]) + np.floor(p[:, 1])) % 2 == 0
    return inside & parity


_DISTRIBUTIONS = {
    "two_gaussians": (_two_gaussians, None, 2),
    "two_moons": (_two_moons, _two_moons_member, 2),
    "checkerboard": (_checkerboard, _checkerboard_member, 2),
}


def make_distribution(name: str) -> Distribution:
    if name not in _DISTRIBUTIONS:
        raise ConfigError(
            f"unknown distribution '{name}'; valid names: {', '.join(sorted(_DISTRIBUTIONS))}"
        )
    sampler, member, dim = _DISTRIBUTIONS[name]
    return Distribution(name=name, dim=dim, sampler=sampler, membership=member)


# -- toy mel generator ----------------------------------------------------


def cosine_basis(d: int) -> np.ndarray:
    """Orthonormal DCT-II basis, columns basis[:, k] over d bands."""
    j = np.arange(d)[:, None]
    k = np.arange(d)[None, :]
    basis = np.cos(np.pi * (2 * j + 1) * k / (2 * d))
    basis *= np.sqrt(2.0 / d)
    basis[:, 0] = np.sqrt(1.0 / d)
    return basis


@dataclass
class ToySpeakerSpec:
    speaker_id: int
    envelope_coefs: np.ndarray  # (E,), coefficients on the low cosine basis
    base_pitch_offset: float


@dataclass
class ToyUtterance:
    speaker: ToySpeakerSpec
    content_codes: np.ndarray   # (L,) ints
    pitch_contour: np.ndarray   # (L,) normalized values
    patch: np.ndarray           # (D, L)
    frame: int                  # designated column used as the flow target


@dataclass
class ToyMelConfig:
    n_speakers: int = 4
    bands: int = 16
    envelope_coefs: int = 4
    n_codes: int = 8
    frames: int = 8
    noise: float = 0.05
    envelope_scale: float = 2.0
    bump_amp: float = 0.8
    content_amp: float = 0.3
    d_model: int = 32
    seed: int = 11

    def __post_init__(self):
        if self.n_speakers < 2:
            raise ConfigError(f"need >= 2 speakers, got {self.n_speakers}")
        if self.envelope_coefs > self.bands:
            raise ConfigError(
                f"envelope coefficients ({self.envelope_coefs}) exceed bands ({self.bands})"
            )


class ToyMelSource:
    """Conditional data source emitting (patch column, condition bundle) pairs.

    All frozen structure (speaker specs, content-code offsets, embedding
    tables) derives from ``config.seed`` alone; draw-time randomness comes
    from the rng passed to :meth:`draw`.
    """

    def __init__(self, config: ToyMelConfig):
        self.config = config
        c = config
        rng = np.random.default_rng(c.seed)
        self.basis = cosine_basis(c.bands)
        self.low = self.basis[:, : c.envelope_coefs]
        self.high = self.basis[:, c.envelope_coefs :]
        self.n_high = c.bands - c.envelope_coefs

        self.speakers = [
            ToySpeakerSpec(
                speaker_id=i,
                envelope_coefs=rng.standard_normal(c.envelope_coefs) * c.envelope_scale,
                base_pitch_offset=rng.uniform(-1.0, 1.0),
            )
            for i in range(c.n_speakers)
        ]
        # Per-code offsets in the high-coefficient space only.
        self.code_offsets = rng.standard_normal((c.n_codes, self.n_high)) * c.content_amp
        # Frozen embedding tables standing in for pretrained encoders.
        self.speaker_embed = rng.standard_normal((c.envelope_coefs + 1, c.d_model))
        self.content_embed = rng.standard_normal((c.n_codes, c.d_model))
        self.pitch_codebook = uniform_codebook(64, -3.0, 3.0)

    @property
    def dim(self) -> int:
        return self.config.bands

    @property
    def name(self) -> str:
        return "toy_mel"

    # -- closed-form pieces (these double as the test oracles) ---------

    def bump_coefs(self, pitch: np.ndarray) -> np.ndarray:
        """High-coefficient weights of the harmonic bump at each pitch value."""
        p = np.asarray(pitch, dtype=np.float64)
        centers = (np.clip(p, -3.0, 3.0) + 3.0) / 6.0 * max(self.n_high - 1, 1)
        idx = np.arange(self.n_high)
        return self.config.bump_amp * np.exp(
            -0.5 * ((idx[None, :] - centers[..., None]) / 1.5) ** 2
        )

    def clean_column(self, speaker: ToySpeakerSpec, code: int, pitch: float) -> np.ndarray:
        """Noise-free patch column for one frame."""
        high = self.bump_coefs(np.array([pitch]))[0] + self.code_offsets[code]
        return self.low @ speaker.envelope_coefs + self.high @ high

    def clean_patch(self, speaker: ToySpeakerSpec, codes: np.ndarray, pitch: np.ndarray) -> np.ndarray:
        cols = [self.clean_column(speaker, int(c), float(p)) for c, p in zip(codes, pitch)]
        return np.stack(cols, axis=1)

    def envelope_of(self, column: np.ndarray) -> np.ndarray:
        """Least-squares envelope coefficients of a patch column."""
        return self.low.T @ np.asarray(column, dtype=np.float64)

    def speaker_vector(self, spec: ToySpeakerSpec) -> np.ndarray:
        raw = np.concatenate([spec.envelope_coefs, [spec.base_pitch_offset]])
        return raw @ self.speaker_embed

    # -- draws ----------------------------------------------------------

    def draw_contour(self, spec: ToySpeakerSpec, rng: np.random.Generator) -> np.ndarray:
        c = self.config
        j = np.arange(c.frames)
        amp = rng.uniform(0.4, 1.2)
        freq = rng.uniform(0.5, 2.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        contour = spec.base_pitch_offset + amp * np.sin(2.0 * np.pi * freq * j / c.frames + phase)
        return np.clip(contour, -3.0, 3.0)

    def make_bundle(
        self, spec: ToySpeakerSpec, codes: np.ndarray, contour: np.ndarray
    ) -> ConditionBundle:
        idx, _ = vq_quantize(contour, self.pitch_codebook)
        return ConditionBundle(
            speaker=self.speaker_vector(spec),
            content=self.content_embed[codes],
            pitch_raw=contour.reshape(-1, 1),
            pitch_quantized=idx,
        )

    def draw_utterance(self, rng: np.random.Generator, speaker_idx: int | None = None) -> ToyUtterance:
        c = self.config
        if speaker_idx is None:
            speaker_idx = int(rng.integers(0, c.n_speakers))
        spec = self.speakers[speaker_idx]
        codes = rng.integers(0, c.n_codes, size=c.frames)
        contour = self.draw_contour(spec, rng)
        patch = self.clean_patch(spec, codes, contour)
        if c.noise > 0:
            patch = patch + rng.standard_normal(patch.shape) * c.noise
        frame = int(rng.integers(0, c.frames))
        return ToyUtterance(
            speaker=spec, content_codes=codes, pitch_contour=contour, patch=patch, frame=frame
        )

    def draw(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, BundleBatch]:
        """Draw n (target column, bundle) pairs for conditional training."""
        xs = np.empty((n, self.config.bands))
        bundles = []
        for i in range(n):
            utt = self.draw_utterance(rng)
            xs[i] = utt.patch[:, utt.frame]
            bundles.append(self.make_bundle(utt.speaker, utt.content_codes, utt.pitch_contour))
        return xs, BundleBatch.from_bundles(bundles)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.draw(n, rng)[0]

    def draw_bundles(self, n: int, rng: np.random.Generator) -> BundleBatch:
        return self.draw(n, rng)[1]


def make_toy_mel(config: ToyMelConfig | None = None) -> ToyMelSource:
    return ToyMelSource(config if config is not None else ToyMelConfig())


# -- dataset CSV ------------------------------------------------------------


def save_dataset_csv(data: np.ndarray, path) -> None:
    data = np.asarray(data, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"dim{i}" for i in range(data.shape[1])])
        for row in data:
            w.writerow([repr(float(v)) for v in row])


def load_dataset_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or not header[0].startswith("dim"):
            raise ConfigError(f"{path}: expected a header row of dim0,dim1,...")
        rows = [[float(v) for v in row] for row in reader if row]
    if not rows:
        raise ConfigError(f"{path}: dataset file contains no rows")
    return np.array(rows)


def fixed_dataset(data: np.ndarray, name: str = "csv") -> Distribution:
    """Wrap a fixed array as a data source (draws rows with replacement)."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ConfigError("dataset must be a nonempty (n, d) array")
    return Distribution(
        name=name,
        dim=data.shape[1],
        sampler=lambda n, rng: data[rng.integers(0, data.shape[0], size=n)],
    )
