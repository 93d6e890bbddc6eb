"""SGAN training: N independent local pairs supervise a global pair.

One iteration runs, in order:

1. every local pair takes ``I_D`` discriminator steps and one generator step
   against its own opponent;
2. (full mode) each local discriminator is cloned into a messenger, which
   takes ``I_D`` steps against the global generator G0;
3. G0 takes one step on the averaged gradient against all messengers (or, in
   simplified mode, against the untouched local discriminators);
4. the global discriminator D0 takes one step on the averaged gradient against
   fakes from all local generators.

Nothing in steps 2-4 writes to a local pair; :func:`sgan_iteration` verifies
this with checksums when ``verify_isolation`` is on.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetSpec, NoiseStream, RngStream, SampleStream
from .errors import ConfigError, IsolationError, TrainingError
from .nn import MlpSpec, Net, ParamStore, build_net
from .objectives import (ObjectiveSpec, d_loss, discriminator_step, generator_grads,
                         generator_step)
from .seeds import derive_seed

MODES = ("full", "simplified", "paired_baseline", "single_pair")
AGGREGATIONS = ("mean", "sum")
MESSENGER_STATES = ("clone", "reset")
GLOBAL_INITS = ("independent", "mirror_first_local")


@dataclass(frozen=True)
class NetworkConfig:
    hidden: tuple[int, ...] = (512, 512, 512)
    slope: float = 0.01
    optimizer: str = "adam"
    lr: float = 1e-5
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    rms_decay: float = 0.99

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def optimizer_kwargs(self) -> dict:
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "decay": self.rms_decay}


@dataclass(frozen=True)
class SganConfig:
    N: int = 5
    iterations: int = 1000
    batch_size: int = 64
    z_dim: int = 100
    mode: str = "full"
    master_seed: int = 0
    eval_every: int = 100
    objective: ObjectiveSpec = field(default_factory=ObjectiveSpec)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    aggregation: str = "mean"
    messenger_state: str = "clone"
    shared_batches: bool = False
    global_init: str = "independent"
    workers: int = 1
    deterministic: bool = True
    verify_isolation: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}", key="mode")
        for name in ("N", "iterations", "batch_size", "z_dim", "eval_every", "workers"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer", key=name)
        if self.mode == "single_pair" and self.N != 1:
            raise ConfigError("single_pair mode trains exactly one pair; set N=1", key="N")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}", key="aggregation")
        if self.messenger_state not in MESSENGER_STATES:
            raise ConfigError(f"messenger_state must be one of {MESSENGER_STATES}", key="messenger_state")
        if self.global_init not in GLOBAL_INITS:
            raise ConfigError(f"global_init must be one of {GLOBAL_INITS}", key="global_init")

    @property
    def I(self) -> int:
        return self.iterations

    @property
    def I_D(self) -> int:
        return self.objective.d_steps

    @property
    def data_dim(self) -> int:
        return 2

    def generator_spec(self) -> MlpSpec:
        sizes = (self.z_dim, *self.network.hidden, self.data_dim)
        return MlpSpec(sizes, self.network.slope, "linear")

    def discriminator_spec(self) -> MlpSpec:
        sizes = (self.data_dim, *self.network.hidden, 1)
        return MlpSpec(sizes, self.network.slope, self.objective.head)


@dataclass
class AdversarialPair:
    generator: Net
    discriminator: Net
    objective: ObjectiveSpec
    pair_index: int

    def clone(self, pair_index: int | None = None) -> "AdversarialPair":
        idx = self.pair_index if pair_index is None else pair_index
        return AdversarialPair(self.generator.clone(), self.discriminator.clone(), self.objective, idx)

    def checksum(self) -> str:
        return hashlib.sha256(
            (self.generator.checksum() + self.discriminator.checksum()).encode()).hexdigest()


@dataclass
class PairStreams:
    data: SampleStream
    noise: NoiseStream
    aux: RngStream

    def get_state(self) -> dict:
        return {k: getattr(self, k).get_state() for k in ("data", "noise", "aux")}

    def set_state(self, state: dict) -> None:
        for k in ("data", "noise", "aux"):
            getattr(self, k).set_state(state[k])


def make_streams(dataset: DatasetSpec, master_seed: int, prefix: str, index: int) -> PairStreams:
    return PairStreams(
        data=SampleStream(dataset, derive_seed(master_seed, f"{prefix}data", index)),
        noise=NoiseStream(derive_seed(master_seed, f"{prefix}noise", index)),
        aux=RngStream(derive_seed(master_seed, f"{prefix}aux", index)),
    )


@dataclass
class BatchPlan:
    """All minibatches one standard training step consumes."""

    real: list[np.ndarray]
    noise_d: list[np.ndarray]
    noise_g: np.ndarray


def draw_plan(streams: PairStreams, config: SganConfig) -> BatchPlan:
    B, z = config.batch_size, config.z_dim
    real, noise_d = [], []
    for _ in range(config.I_D):
        real.append(streams.data.next_batch(B))
        noise_d.append(streams.noise.next_batch(B, z))
    return BatchPlan(real, noise_d, streams.noise.next_batch(B, z))


class BatchLedger:
    """Digests of every batch a pair was handed during one iteration."""

    def __init__(self):
        self._seen = {"real": set(), "noise": set()}

    def record(self, kind: str, batch: np.ndarray) -> np.ndarray:
        self._seen[kind].add(hashlib.sha256(np.ascontiguousarray(batch).tobytes()).hexdigest())
        return batch

    def digest(self, kind: str) -> str:
        return hashlib.sha256("".join(sorted(self._seen[kind])).encode()).hexdigest()


@dataclass
class Ensemble:
    config: SganConfig
    locals: list[AdversarialPair]
    global_pair: AdversarialPair | None
    local_streams: list[PairStreams]
    global_streams: PairStreams | None
    messenger_streams: list[PairStreams]
    baseline: AdversarialPair | None = None
    baseline_streams: PairStreams | None = None
    iteration: int = 0

    def networks(self) -> list[Net]:
        nets = [n for p in self.locals for n in (p.generator, p.discriminator)]
        for p in (self.global_pair, self.baseline):
            if p is not None:
                nets += [p.generator, p.discriminator]
        return nets

    def all_streams(self) -> dict[str, PairStreams]:
        out = {f"local{p.pair_index}": s for p, s in zip(self.locals, self.local_streams)}
        if self.global_streams is not None:
            out["global"] = self.global_streams
        for n, s in enumerate(self.messenger_streams, start=1):
            out[f"msg{n}"] = s
        if self.baseline_streams is not None:
            out["baseline"] = self.baseline_streams
        return out

    def local_checksums(self) -> list[str]:
        return [p.checksum() for p in self.locals]


def _make_pair(config: SganConfig, index: int) -> AdversarialPair:
    net = config.network
    seed = config.master_seed
    g = build_net(config.generator_spec(), derive_seed(seed, "g_init", index), net.optimizer,
                  net.lr, name=f"G{index}", **net.optimizer_kwargs())
    d = build_net(config.discriminator_spec(), derive_seed(seed, "d_init", index), net.optimizer,
                  net.lr, name=f"D{index}", **net.optimizer_kwargs())
    return AdversarialPair(g, d, config.objective, index)


def seed_roles(config: SganConfig) -> list[tuple[str, int]]:
    """Every ``(role, index)`` the ensemble draws a seed for."""
    roles = []
    for n in range(1, config.N + 1):
        roles += [("g_init", n), ("d_init", n), ("data", n), ("noise", n), ("aux", n)]
    if config.mode != "single_pair":
        roles += [("g_init", 0), ("d_init", 0), ("data", 0), ("noise", 0), ("aux", 0)]
        roles += [(r, n) for n in range(1, config.N + 1) for r in ("msg_data", "msg_noise", "msg_aux")]
    if config.mode == "paired_baseline":
        roles += [("baseline_data", 0), ("baseline_noise", 0), ("baseline_aux", 0)]
    return roles


def init(config: SganConfig) -> Ensemble:
    """Build N local pairs (indices 1..N) and, outside single_pair mode, the
    global pair (index 0). Every network and stream has its own derived seed."""
    if not isinstance(config, SganConfig):
        raise ConfigError("init expects an SganConfig")
    seed = config.master_seed
    locals_ = [_make_pair(config, n) for n in range(1, config.N + 1)]
    local_streams = [make_streams(config.dataset, seed, "", n) for n in range(1, config.N + 1)]
    if config.mode == "single_pair":
        return Ensemble(config, locals_, None, local_streams, None, [])

    if config.global_init == "mirror_first_local":
        global_pair = locals_[0].clone(pair_index=0)
        global_pair.generator.name, global_pair.discriminator.name = "G0", "D0"
    else:
        global_pair = _make_pair(config, 0)
    ens = Ensemble(
        config, locals_, global_pair, local_streams,
        global_streams=make_streams(config.dataset, seed, "", 0),
        messenger_streams=[make_streams(config.dataset, seed, "msg_", n) for n in range(1, config.N + 1)],
    )
    if config.mode == "paired_baseline":
        # identical initialization; only the opponents differ
        ens.baseline = global_pair.clone(pair_index=config.N + 1)
        ens.baseline.generator.name, ens.baseline.discriminator.name = "Gstd", "Dstd"
        ens.baseline_streams = make_streams(config.dataset, seed, "baseline_", 0)
    return ens


@dataclass
class LocalResult:
    d_losses: list[float]
    g_loss: float
    plan: BatchPlan


def train_local_pair(pair: AdversarialPair, streams: PairStreams, config: SganConfig,
                     *, iteration: int | None = None, plan: BatchPlan | None = None) -> LocalResult:
    """``I_D`` discriminator updates, each on fresh batches, then one generator update."""
    if plan is None:
        plan = draw_plan(streams, config)
    ctx = {"pair_index": pair.pair_index, "iteration": iteration, "phase": "local"}
    d_losses = []
    for real, noise in zip(plan.real, plan.noise_d):
        d_losses.append(discriminator_step(pair.objective, pair.generator, pair.discriminator,
                                           real, noise, streams.aux.rng, ctx))
    g = generator_step(pair.objective, pair.generator, pair.discriminator, plan.noise_g, ctx)
    return LocalResult(d_losses, g, plan)


def spawn_messengers(ensemble: Ensemble) -> list[Net]:
    """Fresh, storage-independent clones of the local discriminators."""
    messengers = []
    for pair in ensemble.locals:
        m = pair.discriminator.clone(name=f"Dmsg{pair.pair_index}")
        if ensemble.config.messenger_state == "reset":
            m.opt.reset()
        messengers.append(m)
    return messengers


def train_messengers(G0: Net, messengers: list[Net], streams: list[PairStreams], config: SganConfig,
                     *, iteration: int | None = None, shared: BatchPlan | None = None,
                     ledger: BatchLedger | None = None) -> list[float]:
    """``I_D`` steps per messenger against fakes from G0; G0 is only read.

    Returns the mean loss of each messenger.
    """
    obj = config.objective

    def train_one(n: int) -> float:
        m, s = messengers[n], streams[n]
        ctx = {"pair_index": n + 1, "iteration": iteration, "phase": "messenger"}
        losses = []
        for j in range(config.I_D):
            if shared is not None:
                real, noise = shared.real[j], shared.noise_d[j]
            else:
                real = s.data.next_batch(config.batch_size)
                noise = s.noise.next_batch(config.batch_size, config.z_dim)
            if ledger is not None:
                ledger.record("real", real)
                ledger.record("noise", noise)
            losses.append(discriminator_step(obj, G0, m, real, noise, s.aux.rng, ctx))
        return float(np.mean(losses))

    return _map(train_one, range(len(messengers)), config)


def _map(fn, items, config: SganConfig) -> list:
    items = list(items)
    if config.workers > 1 and not config.deterministic and len(items) > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _aggregate(acc: ParamStore, n_terms: int, config: SganConfig) -> ParamStore:
    return acc.scale(1.0 / n_terms) if config.aggregation == "mean" else acc


def update_global_generator(G0: Net, opponents: list[Net], streams: PairStreams, config: SganConfig,
                            *, iteration: int | None = None, shared: BatchPlan | None = None,
                            ledger: BatchLedger | None = None) -> float:
    """Accumulate G0's gradient against every opponent, then one update.

    Each term uses a fresh noise batch unless ``shared`` supplies one.
    """
    acc = None
    losses = []
    for disc in opponents:
        noise = shared.noise_g if shared is not None else streams.noise.next_batch(config.batch_size, config.z_dim)
        if ledger is not None:
            ledger.record("noise", noise)
        loss, grads = generator_grads(config.objective, G0, disc, noise)
        losses.append(loss)
        acc = grads if acc is None else acc.iadd(grads)
    mean_loss = float(np.mean(losses))
    ctx = {"pair_index": 0, "iteration": iteration, "phase": "global_generator"}
    if not np.isfinite(mean_loss):
        raise TrainingError("non-finite global generator loss", **ctx)
    G0.step(_aggregate(acc, len(opponents), config), ctx)
    return mean_loss


def update_global_discriminator(D0: Net, local_generators: list[Net], streams: PairStreams,
                                config: SganConfig, *, iteration: int | None = None,
                                shared: BatchPlan | None = None,
                                ledger: BatchLedger | None = None) -> float:
    """Accumulate D0's gradient against fakes from every local generator, one update.

    Each term draws its own real and noise batch unless ``shared`` supplies them.
    """
    obj = config.objective
    acc = None
    losses = []
    for gen in local_generators:
        if shared is not None:
            real, noise = shared.real[0], shared.noise_d[0]
        else:
            real = streams.data.next_batch(config.batch_size)
            noise = streams.noise.next_batch(config.batch_size, config.z_dim)
        if ledger is not None:
            ledger.record("real", real)
            ledger.record("noise", noise)
        loss, grads = d_loss(obj, D0, real, gen(noise), streams.aux.rng)
        losses.append(loss)
        acc = grads if acc is None else acc.iadd(grads)
    mean_loss = float(np.mean(losses))
    ctx = {"pair_index": 0, "iteration": iteration, "phase": "global_discriminator"}
    if not np.isfinite(mean_loss):
        raise TrainingError("non-finite global discriminator loss", **ctx)
    D0.step(_aggregate(acc, len(local_generators), config), ctx)
    return mean_loss


@dataclass
class IterationRecord:
    iteration: int
    local_d_losses: list[float]
    local_g_losses: list[float]
    messenger_d_losses: list[float] = field(default_factory=list)
    global_g_loss: float | None = None
    global_d_loss: float | None = None
    baseline_d_loss: float | None = None
    baseline_g_loss: float | None = None
    batch_checksums: dict[str, str] = field(default_factory=dict)
    local_checksums: list[str] = field(default_factory=list)


def sgan_iteration(ensemble: Ensemble, config: SganConfig | None = None) -> IterationRecord:
    """One pass of the outer loop; mutates ``ensemble`` and returns its losses."""
    config = config or ensemble.config
    it = ensemble.iteration + 1

    def local(n: int) -> LocalResult:
        return train_local_pair(ensemble.locals[n], ensemble.local_streams[n], config, iteration=it)

    results = _map(local, range(len(ensemble.locals)), config)
    rec = IterationRecord(
        iteration=it,
        local_d_losses=[float(np.mean(r.d_losses)) for r in results],
        local_g_losses=[r.g_loss for r in results],
    )

    shared = None
    if ensemble.baseline is not None:
        std_ledger = BatchLedger()
        b = train_local_pair(ensemble.baseline, ensemble.baseline_streams, config, iteration=it)
        for real, noise in zip(b.plan.real, b.plan.noise_d):
            std_ledger.record("real", real)
            std_ledger.record("noise", noise)
        std_ledger.record("noise", b.plan.noise_g)
        rec.baseline_d_loss = float(np.mean(b.d_losses))
        rec.baseline_g_loss = b.g_loss
        rec.batch_checksums["standard_real"] = std_ledger.digest("real")
        rec.batch_checksums["standard_noise"] = std_ledger.digest("noise")
        shared = b.plan
    elif config.shared_batches and results:
        shared = results[0].plan

    if ensemble.global_pair is not None:
        before = ensemble.local_checksums() if config.verify_isolation else None
        ledger = BatchLedger() if shared is not None else None
        _global_phase(ensemble, config, rec, it, shared, ledger)
        if ledger is not None:
            rec.batch_checksums["sgan_real"] = ledger.digest("real")
            rec.batch_checksums["sgan_noise"] = ledger.digest("noise")
        if before is not None:
            after = ensemble.local_checksums()
            for pair, b0, b1 in zip(ensemble.locals, before, after):
                if b0 != b1:
                    raise IsolationError("local pair modified during the global phase",
                                         pair_index=pair.pair_index, iteration=it, phase="global")
            rec.local_checksums = after

    ensemble.iteration = it
    return rec


def _global_phase(ens: Ensemble, config: SganConfig, rec: IterationRecord, it: int,
                  shared: BatchPlan | None, ledger: BatchLedger | None) -> None:
    G0, D0 = ens.global_pair.generator, ens.global_pair.discriminator
    if config.mode == "simplified":
        opponents = [p.discriminator for p in ens.locals]
    else:
        opponents = spawn_messengers(ens)
        rec.messenger_d_losses = train_messengers(G0, opponents, ens.messenger_streams, config,
                                                  iteration=it, shared=shared, ledger=ledger)
    rec.global_g_loss = update_global_generator(G0, opponents, ens.global_streams, config,
                                                iteration=it, shared=shared, ledger=ledger)
    rec.global_d_loss = update_global_discriminator(D0, [p.generator for p in ens.locals],
                                                    ens.global_streams, config, iteration=it,
                                                    shared=shared, ledger=ledger)


def train(ensemble: Ensemble, iterations: int, callback=None) -> list[IterationRecord]:
    records = []
    for _ in range(iterations):
        rec = sgan_iteration(ensemble)
        records.append(rec)
        if callback is not None:
            callback(ensemble, rec)
    return records


def run_paired_baseline(config: SganConfig, callback=None) -> dict[str, list[dict]]:
    """Train the SGAN global pair next to a standard pair fed the same batches.

    Returns one trace per pair with losses and batch checksums per iteration.
    """
    if config.mode != "paired_baseline":
        raise ConfigError("run_paired_baseline needs mode='paired_baseline'", key="mode")
    ens = init(config)
    traces = {"sgan": [], "standard": []}

    def record(ensemble, rec):
        bc = rec.batch_checksums
        traces["sgan"].append({"iteration": rec.iteration, "d_loss": rec.global_d_loss,
                               "g_loss": rec.global_g_loss, "real_checksum": bc["sgan_real"],
                               "noise_checksum": bc["sgan_noise"]})
        traces["standard"].append({"iteration": rec.iteration, "d_loss": rec.baseline_d_loss,
                                   "g_loss": rec.baseline_g_loss, "real_checksum": bc["standard_real"],
                                   "noise_checksum": bc["standard_noise"]})
        if callback is not None:
            callback(ensemble, rec)

    train(ens, config.iterations, record)
    return traces
