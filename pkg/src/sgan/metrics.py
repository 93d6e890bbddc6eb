"""Evaluation of generators on 2-D toy mixtures.

Mode bookkeeping (assignment, coverage, entropy, total variation), the
uncovered-mode curve over ensemble sizes, Gaussian KDE log-likelihood with a
cross-validated bandwidth, the KDE-threshold coverage ``C`` and discriminator
level-set grids. Apart from the curve, which trains pairs, everything here is
a pure function of its array inputs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .data import DatasetSpec, mode_centers
from .ensemble import _make_pair, make_streams, train_local_pair
from .errors import ConfigError, ContractError, TrainingError
from .seeds import derive_seed


@dataclass(frozen=True)
class ModeAssignment:
    counts: np.ndarray
    unassigned: int
    eps: float

    @property
    def n_modes(self) -> int:
        return len(self.counts)

    @property
    def assigned(self) -> int:
        return int(self.counts.sum())

    @property
    def total(self) -> int:
        return self.assigned + self.unassigned


def default_eps(dataset: DatasetSpec) -> float:
    """Assignment radius: three standard deviations of a mixture component."""
    return 3.0 * dataset.std


def default_threshold(n_samples: int, n_modes: int) -> int:
    """Minimum count for a mode to be covered: 20% of its fair share, at least one."""
    return max(1, int(math.floor(0.2 * n_samples / n_modes)))


def assign_modes(samples: np.ndarray, centers: np.ndarray, eps: float) -> ModeAssignment:
    """Assign each sample to its nearest center when it lies within ``eps`` of it."""
    centers = np.asarray(centers, dtype=float)
    if centers.size == 0:
        raise ConfigError("assign_modes needs at least one center")
    if not eps > 0:
        raise ContractError(f"eps must be positive, got {eps}")
    samples = np.asarray(samples, dtype=float).reshape(-1, centers.shape[1])
    d2 = ((samples[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
    nearest = d2.argmin(axis=1)
    ok = d2[np.arange(len(samples)), nearest] <= eps * eps
    counts = np.bincount(nearest[ok], minlength=len(centers))
    return ModeAssignment(counts, int((~ok).sum()), float(eps))


def mode_coverage(assignment: ModeAssignment, threshold_count: int) -> tuple[frozenset[int], float]:
    if threshold_count < 1:
        raise ContractError("threshold_count must be at least 1")
    covered = frozenset(int(m) for m in np.flatnonzero(assignment.counts >= threshold_count))
    return covered, len(covered) / assignment.n_modes


def mode_entropy(assignment: ModeAssignment) -> float | None:
    """Entropy in nats of the assigned-sample mode frequencies; None if nothing was assigned."""
    if assignment.assigned == 0:
        return None
    p = assignment.counts[assignment.counts > 0] / assignment.assigned
    return float(-(p * np.log(p)).sum())


def total_variation(assignment: ModeAssignment) -> float | None:
    """Total variation distance to the uniform mode distribution; None if nothing was assigned."""
    if assignment.assigned == 0:
        return None
    p = assignment.counts / assignment.assigned
    return float(0.5 * np.abs(p - 1.0 / assignment.n_modes).sum())


# -- kernel density estimation -----------------------------------------------

def bandwidth_grid(dataset: DatasetSpec, n: int = 9) -> np.ndarray:
    """Log-spaced bandwidths over [scale/4, 4*scale]."""
    return np.geomspace(dataset.scale / 4.0, 4.0 * dataset.scale, n)


def kde_log_density(points: np.ndarray, centers: np.ndarray, bandwidth: float) -> np.ndarray:
    """Log-density of an isotropic Gaussian KDE with kernels at ``centers``."""
    points = np.atleast_2d(points)
    d = centers.shape[1]
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
    log_norm = math.log(len(centers)) + 0.5 * d * math.log(2 * math.pi * bandwidth ** 2)
    return logsumexp(-d2 / (2 * bandwidth ** 2), axis=1) - log_norm


def select_bandwidth(samples: np.ndarray, grid, folds: int = 5) -> float:
    """Bandwidth with the best ``folds``-fold held-out log-likelihood on ``samples``."""
    grid = np.asarray(grid, dtype=float)
    fold_of = np.arange(len(samples)) % folds
    scores = np.zeros(len(grid))
    for k in range(folds):
        train, test = samples[fold_of != k], samples[fold_of == k]
        if len(train) == 0 or len(test) == 0:
            continue
        for i, h in enumerate(grid):
            scores[i] += kde_log_density(test, train, h).sum()
    return float(grid[int(np.argmax(scores))])


@dataclass(frozen=True)
class KdeResult:
    loglik: float
    bandwidth: float
    degenerate: bool = False


def kde_loglik(gen_samples: np.ndarray, held_out_real: np.ndarray, bandwidth_grid, folds: int = 5) -> KdeResult:
    """Mean log-density of ``held_out_real`` under a KDE fitted to ``gen_samples``.

    All-identical generator samples make cross-validation meaningless; the
    smallest bandwidth is used and the result is flagged ``degenerate``.
    """
    grid = np.asarray(bandwidth_grid, dtype=float)
    if grid.size == 0 or np.any(grid <= 0):
        raise ContractError("bandwidth grid must be non-empty and positive")
    gen_samples = np.asarray(gen_samples, dtype=float)
    if np.all(gen_samples == gen_samples[0]):
        h, degenerate = float(grid.min()), True
    else:
        h, degenerate = select_bandwidth(gen_samples, grid, folds), False
    ll = float(kde_log_density(held_out_real, gen_samples, h).mean())
    return KdeResult(ll, h, degenerate)


def log_coverage_threshold(gen_samples: np.ndarray, bandwidth: float, quantile: float = 0.05) -> float:
    """Log of the density level above which the model itself puts ``1 - quantile`` of its mass.

    Estimated as a quantile of the leave-one-out KDE over the generator samples.
    """
    n = len(gen_samples)
    d2 = ((gen_samples[:, None, :] - gen_samples[None, :, :]) ** 2).sum(axis=-1)
    logk = -d2 / (2 * bandwidth ** 2)
    np.fill_diagonal(logk, -np.inf)
    d = gen_samples.shape[1]
    log_norm = math.log(n - 1) + 0.5 * d * math.log(2 * math.pi * bandwidth ** 2)
    loo = logsumexp(logk, axis=1) - log_norm
    return float(np.quantile(loo, quantile))


def coverage_threshold(gen_samples: np.ndarray, bandwidth: float, quantile: float = 0.05) -> float:
    return math.exp(log_coverage_threshold(gen_samples, bandwidth, quantile))


def coverage_C(gen_samples: np.ndarray, dataset: DatasetSpec, t: float | None, probe_real: np.ndarray,
               bandwidth: float | None = None) -> float:
    """Fraction of real probe points where the generator KDE exceeds ``t``.

    Without an explicit ``bandwidth`` one is cross-validated on ``gen_samples``;
    ``t=None`` uses :func:`coverage_threshold`.
    """
    gen_samples = np.asarray(gen_samples, dtype=float)
    if bandwidth is None:
        bandwidth = select_bandwidth(gen_samples, bandwidth_grid(dataset))
    if t is None:
        log_t = log_coverage_threshold(gen_samples, bandwidth)
    elif t > 0:
        log_t = math.log(t)
    else:
        raise ContractError(f"coverage threshold must be positive, got {t}")
    log_p = kde_log_density(probe_real, gen_samples, bandwidth)
    return float(np.mean(log_p > log_t))


# -- level sets ----------------------------------------------------------------

@dataclass(frozen=True)
class LevelSetGrid:
    """Discriminator outputs on a lattice; ``values[i, j]`` sits at ``(xs[j], ys[i])``."""

    bounds: tuple[float, float, float, float]
    resolution: int
    values: np.ndarray

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(self.bounds[0], self.bounds[1], self.resolution)

    @property
    def ys(self) -> np.ndarray:
        return np.linspace(self.bounds[2], self.bounds[3], self.resolution)

    def to_csv(self) -> str:
        xmin, xmax, ymin, ymax = self.bounds
        head = f"# xmin={xmin!r} xmax={xmax!r} ymin={ymin!r} ymax={ymax!r} resolution={self.resolution}\n"
        rows = "\n".join(",".join(repr(float(v)) for v in row) for row in self.values)
        return head + rows + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "LevelSetGrid":
        lines = text.strip().splitlines()
        meta = dict(item.split("=") for item in lines[0].lstrip("# ").split())
        bounds = tuple(float(meta[k]) for k in ("xmin", "xmax", "ymin", "ymax"))
        values = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
        return cls(bounds, int(meta["resolution"]), values)


def level_set_grid(disc, bounds, resolution: int) -> LevelSetGrid:
    """Evaluate a discriminator (any callable on an n x 2 array) over an R x R lattice."""
    if resolution < 2:
        raise ContractError("grid resolution must be at least 2")
    xmin, xmax, ymin, ymax = (float(b) for b in bounds)
    xs = np.linspace(xmin, xmax, resolution)
    ys = np.linspace(ymin, ymax, resolution)
    gx, gy = np.meshgrid(xs, ys)
    points = np.column_stack([gx.ravel(), gy.ravel()])
    values = np.asarray(disc(points), dtype=float).reshape(resolution, resolution)
    return LevelSetGrid((xmin, xmax, ymin, ymax), resolution, values)


# -- per-generator evaluation ------------------------------------------------------

@dataclass(frozen=True)
class MetricSettings:
    eps: float | None = None
    threshold: int | None = None
    n_gen: int = 500
    n_probe: int = 1000
    bandwidths: tuple[float, ...] | None = None
    folds: int = 5
    coverage_t: float | None = None
    burn_in: float = 0.5
    curve_points: int = 5

    def resolve(self, dataset: DatasetSpec) -> "MetricSettings":
        """Fill dataset-dependent defaults."""
        eps = self.eps if self.eps is not None else (default_eps(dataset) if dataset.has_modes else None)
        threshold = self.threshold
        if threshold is None and dataset.has_modes:
            threshold = default_threshold(self.n_gen, dataset.M)
        bw = self.bandwidths if self.bandwidths is not None else tuple(bandwidth_grid(dataset).tolist())
        return MetricSettings(eps, threshold, self.n_gen, self.n_probe, bw, self.folds,
                              self.coverage_t, self.burn_in, self.curve_points)


@dataclass
class MetricRecord:
    iteration: int
    generator_id: int
    coverage_fraction: float | None
    coverage_C: float
    kde_loglik: float
    entropy_nats: float | None
    tv: float | None
    d_loss: float | None = None
    g_loss: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_samples(gen_samples: np.ndarray, probe_real: np.ndarray, dataset: DatasetSpec,
                     settings: MetricSettings) -> dict:
    """All sample-based metrics for one generator's samples."""
    s = settings.resolve(dataset)
    kde = kde_loglik(gen_samples, probe_real, s.bandwidths, s.folds)
    out = {
        "coverage_C": coverage_C(gen_samples, dataset, s.coverage_t, probe_real, kde.bandwidth),
        "kde_loglik": kde.loglik,
        "coverage_fraction": None, "entropy_nats": None, "tv": None,
        "extra": {"bandwidth": kde.bandwidth, "kde_degenerate": kde.degenerate},
    }
    if dataset.has_modes:
        a = assign_modes(gen_samples, mode_centers(dataset), s.eps)
        out["coverage_fraction"] = mode_coverage(a, s.threshold)[1]
        out["entropy_nats"] = mode_entropy(a)
        out["tv"] = total_variation(a)
        out["extra"].update(unassigned=a.unassigned, counts=a.counts.tolist())
    return out


# -- uncovered-mode curve -------------------------------------------------------

@dataclass(frozen=True)
class UncoveredCurve:
    N_values: tuple[int, ...]
    mean: tuple[float, ...]
    stderr: tuple[float, ...]
    n_seeds: int
    n_failed: int = 0

    def rows(self) -> list[tuple[int, float, float]]:
        return list(zip(self.N_values, self.mean, self.stderr))


def eval_iterations(iterations: int, burn_in: float, points: int) -> list[int]:
    """``points`` evenly spaced iterations after the burn-in fraction, ending at the last one."""
    start = int(math.floor(burn_in * iterations))
    its = np.linspace(start, iterations, points + 1)[1:]
    return sorted({max(1, int(round(i))) for i in its})


def uncovered_from_coverage(covered: np.ndarray, n: int) -> float:
    """Mean fraction of modes covered by none of the first ``n`` generators.

    ``covered`` is a boolean array (pairs, eval points, modes).
    """
    union = covered[:n].any(axis=0)
    return float(1.0 - union.mean())


def summarize_curve(coverages: list[np.ndarray], N_values, n_failed: int = 0) -> UncoveredCurve:
    means, errs = [], []
    for n in N_values:
        vals = np.array([uncovered_from_coverage(c, n) for c in coverages])
        means.append(float(vals.mean()))
        errs.append(float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0)
    return UncoveredCurve(tuple(int(n) for n in N_values), tuple(means), tuple(errs), len(coverages), n_failed)


def stub_coverage(seed: int, n_pairs: int, n_points: int, n_modes: int, p: float = 0.5) -> np.ndarray:
    """Synthetic generators that miss each mode independently with probability ``p``."""
    rng = np.random.default_rng(seed)
    return rng.random((n_pairs, n_points, n_modes)) >= p


def stub_sigma(p: float, n: int, n_seeds: int, n_points: int, n_modes: int) -> float:
    """Standard error of the stub curve's mean at ensemble size ``n``."""
    q = p ** n
    return math.sqrt(q * (1 - q) / (n_seeds * n_points * n_modes))


def uncovered_curve_stub(N_values, seeds, *, p: float = 0.5, n_points: int = 5, n_modes: int = 8) -> UncoveredCurve:
    n_max = max(N_values)
    covs = [stub_coverage(s, n_max, n_points, n_modes, p) for s in seeds]
    return summarize_curve(covs, N_values)


def training_coverage(config, seed: int, n_pairs: int, settings: MetricSettings) -> np.ndarray:
    """Train ``n_pairs`` independent pairs and record which modes each covers.

    Returns a boolean array (pairs, eval points, modes). Pair ``n`` depends only on
    ``(seed, n)``, so a prefix of the result equals a run with fewer pairs.
    """
    if not config.dataset.has_modes:
        raise ConfigError("the uncovered-mode curve needs a mixture dataset", key="dataset.kind")
    cfg = replace(config, master_seed=seed, N=n_pairs, mode="full")
    s = settings.resolve(cfg.dataset)
    centers = mode_centers(cfg.dataset)
    evals = eval_iterations(cfg.iterations, s.burn_in, s.curve_points)
    out = np.zeros((n_pairs, len(evals), len(centers)), dtype=bool)
    for n in range(1, n_pairs + 1):
        pair = _make_pair(cfg, n)
        streams = make_streams(cfg.dataset, seed, "", n)
        k = 0
        for it in range(1, cfg.iterations + 1):
            train_local_pair(pair, streams, cfg, iteration=it)
            if k < len(evals) and it == evals[k]:
                rng = np.random.default_rng(derive_seed(seed, "eval_noise", n * 1_000_003 + it))
                x = pair.generator(rng.standard_normal((s.n_gen, cfg.z_dim)))
                a = assign_modes(x, centers, s.eps)
                out[n - 1, k] = a.counts >= s.threshold
                k += 1
    return out


def uncovered_curve(config, N_values, seeds, settings: MetricSettings | None = None,
                    log=None) -> UncoveredCurve:
    """Mean fraction of modes that no generator of an N-pair ensemble covers.

    Seeds whose training diverges are dropped and counted in ``n_failed``.
    """
    settings = settings or MetricSettings()
    n_max = max(N_values)
    covs, failed = [], 0
    for seed in seeds:
        try:
            covs.append(training_coverage(config, seed, n_max, settings))
        except TrainingError as exc:
            failed += 1
            if log is not None:
                log(f"seed {seed} excluded: {exc}")
    if not covs:
        raise ConfigError("every seed diverged; no curve to report")
    return summarize_curve(covs, N_values, failed)
