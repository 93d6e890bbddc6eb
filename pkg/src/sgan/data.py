"""Analytic 2-D toy distributions and seeded minibatch streams."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError

KINDS = ("gmm_circle", "gmm_grid", "swiss_roll")

# Swiss Roll parameter range and output scale
SWISS_T_MIN = 1.5 * math.pi
SWISS_T_MAX = 4.5 * math.pi
SWISS_SCALE = 3.0


@dataclass(frozen=True)
class DatasetSpec:
    """Toy distribution description.

    ``None`` fields are filled with per-kind defaults: circle radius 2 with
    std 0.02, grid extent 4 with std 0.05, Swiss Roll noise 0.05.
    """

    kind: str = "gmm_circle"
    M: int = 8
    radius: float | None = None
    grid_extent: float | None = None
    std: float | None = None
    swiss_noise: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"dataset kind must be one of {KINDS}, got {self.kind!r}", key="dataset.kind")
        fill = {}
        if self.kind == "gmm_circle":
            fill = {"radius": 2.0, "std": 0.02}
        elif self.kind == "gmm_grid":
            fill = {"grid_extent": 4.0, "std": 0.05}
        else:
            fill = {"swiss_noise": 0.05}
        for k, v in fill.items():
            if getattr(self, k) is None:
                object.__setattr__(self, k, v)
        if self.kind != "swiss_roll":
            if int(self.M) < 1:
                raise ConfigError(f"M must be positive, got {self.M}", key="dataset.M")
            if self.std <= 0:
                raise ConfigError("component std must be positive", key="dataset.std")
        if self.kind == "gmm_circle" and self.radius <= 0:
            raise ConfigError("radius must be positive", key="dataset.radius")
        if self.kind == "gmm_grid":
            if math.isqrt(self.M) ** 2 != self.M:
                raise ConfigError(f"gmm_grid needs a perfect-square M, got {self.M}", key="dataset.M")
            if self.grid_extent <= 0:
                raise ConfigError("grid_extent must be positive", key="dataset.grid_extent")
        if self.kind == "swiss_roll" and self.swiss_noise < 0:
            raise ConfigError("swiss_noise must be non-negative", key="dataset.swiss_noise")

    @property
    def has_modes(self) -> bool:
        return self.kind != "swiss_roll"

    @property
    def scale(self) -> float:
        """Length scale used for metric defaults (KDE bandwidths, assignment radius)."""
        if self.has_modes:
            return float(self.std)
        return float(self.swiss_noise) if self.swiss_noise > 0 else 0.05

    def bounds(self) -> tuple[float, float, float, float]:
        """Bounding box holding essentially all of the data mass."""
        if self.kind == "gmm_circle":
            r = self.radius + max(1.0, 8 * self.std)
        elif self.kind == "gmm_grid":
            r = self.grid_extent + max(1.0, 8 * self.std)
        else:
            r = SWISS_SCALE + max(0.5, 8 * self.swiss_noise)
        return (-r, r, -r, r)


def mode_centers(spec: DatasetSpec) -> np.ndarray:
    """``M x 2`` array of mixture means."""
    if spec.kind == "gmm_circle":
        k = np.arange(spec.M)
        ang = 2.0 * np.pi * k / spec.M
        return spec.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    if spec.kind == "gmm_grid":
        side = math.isqrt(spec.M)
        ticks = np.linspace(-spec.grid_extent, spec.grid_extent, side)
        xx, yy = np.meshgrid(ticks, ticks, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel()], axis=1)
    raise ContractError("swiss_roll has no mode centers")


def gmm_log_density(spec: DatasetSpec, x) -> np.ndarray:
    """Exact log-density of an equal-weight isotropic mixture."""
    from scipy.special import logsumexp

    centers = mode_centers(spec)
    x = np.asarray(x, dtype=np.float64)
    var = spec.std ** 2
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    log_comp = -d2 / (2 * var) - np.log(2 * np.pi * var)
    return logsumexp(log_comp, axis=1) - np.log(spec.M)


class RngStream:
    """Seeded generator that counts the batches it has produced."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.counter = 0
        self.rng = np.random.Generator(np.random.PCG64(self.seed))

    def get_state(self) -> dict:
        return {"seed": self.seed, "counter": self.counter, "bit_generator": self.rng.bit_generator.state}

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self.counter = int(state["counter"])
        self.rng.bit_generator.state = state["bit_generator"]

    def normal(self, B: int, dim: int) -> np.ndarray:
        if B < 1 or dim < 1:
            raise ContractError(f"batch size and dimension must be positive, got {B}, {dim}")
        self.counter += 1
        return self.rng.standard_normal((B, dim))


class NoiseStream(RngStream):
    """Latent prior: i.i.d. standard normal."""

    def next_batch(self, B: int, z_dim: int = 100) -> np.ndarray:
        return self.normal(B, z_dim)


class SampleStream(RngStream):
    """The i.i.d. minibatch operator over a toy distribution."""

    def __init__(self, spec: DatasetSpec, seed: int):
        super().__init__(seed)
        self.spec = spec
        self._centers = mode_centers(spec) if spec.has_modes else None

    def next_batch(self, B: int) -> np.ndarray:
        if B < 1:
            raise ContractError(f"batch size must be positive, got {B}")
        self.counter += 1
        return sample(self.spec, B, self.rng, self._centers)

    def next_batch_with_labels(self, B: int) -> tuple[np.ndarray, np.ndarray]:
        self.counter += 1
        return sample_with_labels(self.spec, B, self.rng, self._centers)


def sample_with_labels(spec: DatasetSpec, B: int, rng: np.random.Generator,
                       centers: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    if not spec.has_modes:
        raise ContractError("swiss_roll samples carry no component labels")
    if centers is None:
        centers = mode_centers(spec)
    comp = rng.integers(0, spec.M, size=B)
    x = centers[comp] + spec.std * rng.standard_normal((B, 2))
    return x, comp


def sample(spec: DatasetSpec, B: int, rng: np.random.Generator,
           centers: np.ndarray | None = None) -> np.ndarray:
    if spec.has_modes:
        return sample_with_labels(spec, B, rng, centers)[0]
    t = rng.uniform(SWISS_T_MIN, SWISS_T_MAX, size=B)
    x = np.stack([t * np.cos(t), t * np.sin(t)], axis=1) * (SWISS_SCALE / SWISS_T_MAX)
    return x + spec.swiss_noise * rng.standard_normal((B, 2))


def next_batch(stream: SampleStream, B: int) -> np.ndarray:
    return stream.next_batch(B)


def noise_batch(stream: NoiseStream, B: int, z_dim: int = 100) -> np.ndarray:
    return stream.next_batch(B, z_dim)
