"""Run orchestration and artifact emission.

A run directory holds::

    config.echo                 the exact, re-parseable config
    seeds.log                   every derived seed, one per line
    losses.jsonl                per-iteration training losses
    metrics.jsonl               one MetricRecord per evaluation per generator
    traces.jsonl                paired_baseline only: both compared pairs
    samples/iter_XXXX_genY.csv  generator samples used for evaluation
    grids/iter_XXXX_dY.csv      discriminator level sets
    checkpoints/iter_XXXX.ckpt  resumable state
    summary.json                end-of-run metrics per generator
    error.json                  written instead of summary.json on divergence

Generator and discriminator ids: 0 is the global pair, 1..N the local pairs and
N+1 the standard pair of a paired-baseline run.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, parse_config
from .data import sample
from .ensemble import Ensemble, IterationRecord, init, seed_roles, sgan_iteration
from .errors import CheckpointError, ConfigError, TrainingError
from .metrics import (MetricRecord, evaluate_samples, level_set_grid, uncovered_curve,
                      uncovered_curve_stub)
from .nn import Net
from .seeds import derive_seed, seed_table

EVAL_STRIDE = 10_000


def _gen_index(iteration: int, gen_id: int) -> int:
    return iteration * EVAL_STRIDE + gen_id


def eval_noise(master_seed: int, iteration: int, gen_id: int, n: int, z_dim: int) -> np.ndarray:
    """Evaluation noise depends only on (seed, iteration, generator), never on training state."""
    rng = np.random.default_rng(derive_seed(master_seed, "eval_noise", _gen_index(iteration, gen_id)))
    return rng.standard_normal((n, z_dim))


def probe_real(cfg: RunConfig, iteration: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(cfg.sgan.master_seed, "eval_data", iteration))
    return sample(cfg.sgan.dataset, cfg.metrics.n_probe, rng)


def generators(ens: Ensemble) -> list[tuple[int, Net]]:
    out = []
    if ens.global_pair is not None:
        out.append((0, ens.global_pair.generator))
    out += [(p.pair_index, p.generator) for p in ens.locals]
    if ens.baseline is not None:
        out.append((ens.baseline.pair_index, ens.baseline.generator))
    return out


def discriminators(ens: Ensemble) -> list[tuple[int, Net]]:
    out = []
    if ens.global_pair is not None:
        out.append((0, ens.global_pair.discriminator))
    out += [(p.pair_index, p.discriminator) for p in ens.locals]
    if ens.baseline is not None:
        out.append((ens.baseline.pair_index, ens.baseline.discriminator))
    return out


def _losses_for(rec: IterationRecord | None, gen_id: int, ens: Ensemble) -> tuple[float | None, float | None]:
    if rec is None:
        return None, None
    if gen_id == 0 and ens.global_pair is not None:
        return rec.global_d_loss, rec.global_g_loss
    if ens.baseline is not None and gen_id == ens.baseline.pair_index:
        return rec.baseline_d_loss, rec.baseline_g_loss
    k = gen_id - 1
    return rec.local_d_losses[k], rec.local_g_losses[k]


def _json_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False) + "\n"


def write_points_csv(path: Path, points: np.ndarray) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y"])
    for x, y in points:
        w.writerow([repr(float(x)), repr(float(y))])
    path.write_text(buf.getvalue())


def read_points_csv(path: Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["x", "y"]:
        raise ConfigError(f"{path} is not a sample dump (bad header)")
    return np.array([[float(a), float(b)] for a, b in rows[1:]])


def evaluate_generator(cfg: RunConfig, gen_id: int, gen: Net, iteration: int,
                       probe: np.ndarray) -> tuple[dict, np.ndarray]:
    noise = eval_noise(cfg.sgan.master_seed, iteration, gen_id, cfg.metrics.n_gen, cfg.sgan.z_dim)
    samples = gen(noise)
    return evaluate_samples(samples, probe, cfg.sgan.dataset, cfg.metrics), samples


@dataclass
class RunState:
    cfg: RunConfig
    ens: Ensemble
    out: Path
    last_metrics: dict[int, dict] = field(default_factory=dict)


class Runner:
    """Drives an ensemble through training and writes all artifacts from one thread."""

    def __init__(self, cfg: RunConfig, log=None):
        self.cfg = cfg
        self.log = log or (lambda msg: None)
        self.out = cfg.output_dir

    # -- setup --------------------------------------------------------------
    def prepare(self, fresh: bool = True) -> Ensemble:
        out = self.out
        for sub in ("samples", "grids", "checkpoints"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        sg = self.cfg.sgan
        if fresh:
            (out / "config.echo").write_text(self.cfg.echo())
            roles = seed_roles(sg)
            table = seed_table(sg.master_seed, roles)
            lines = [f"master_seed {sg.master_seed}"] + [f"{k} {v}" for k, v in table.items()]
            lines.append("eval_noise derive_seed(master, 'eval_noise', iteration*10000 + generator_id)")
            lines.append("eval_data derive_seed(master, 'eval_data', iteration)")
            (out / "seeds.log").write_text("\n".join(lines) + "\n")
            for name in ("metrics.jsonl", "losses.jsonl", "traces.jsonl"):
                (out / name).unlink(missing_ok=True)
            for name in ("summary.json", "error.json"):
                (out / name).unlink(missing_ok=True)
        return init(sg)

    # -- per-iteration hooks ---------------------------------------------------
    def _log_losses(self, rec: IterationRecord) -> None:
        row = {
            "iteration": rec.iteration,
            "local_d": rec.local_d_losses, "local_g": rec.local_g_losses,
            "messenger_d": rec.messenger_d_losses,
            "global_d": rec.global_d_loss, "global_g": rec.global_g_loss,
        }
        with open(self.out / "losses.jsonl", "a") as fh:
            fh.write(_json_line(row))
        if rec.baseline_d_loss is not None:
            bc = rec.batch_checksums
            rows = [
                {"iteration": rec.iteration, "pair": "sgan", "d_loss": rec.global_d_loss,
                 "g_loss": rec.global_g_loss, "real_checksum": bc["sgan_real"], "noise_checksum": bc["sgan_noise"]},
                {"iteration": rec.iteration, "pair": "standard", "d_loss": rec.baseline_d_loss,
                 "g_loss": rec.baseline_g_loss, "real_checksum": bc["standard_real"],
                 "noise_checksum": bc["standard_noise"]},
            ]
            with open(self.out / "traces.jsonl", "a") as fh:
                fh.writelines(_json_line(r) for r in rows)

    def evaluate(self, ens: Ensemble, rec: IterationRecord | None, dump: bool) -> dict[int, dict]:
        it = ens.iteration
        probe = probe_real(self.cfg, it)
        results = {}
        lines = []
        for gen_id, gen in generators(ens):
            m, samples = evaluate_generator(self.cfg, gen_id, gen, it, probe)
            d_l, g_l = _losses_for(rec, gen_id, ens)
            record = MetricRecord(it, gen_id, m["coverage_fraction"], m["coverage_C"], m["kde_loglik"],
                                  m["entropy_nats"], m["tv"], d_l, g_l, m["extra"])
            results[gen_id] = record.to_dict()
            lines.append(_json_line(record.to_dict()))
            if dump:
                write_points_csv(self.out / "samples" / f"iter_{it:04d}_gen{gen_id}.csv", samples)
        if dump:
            self.emit_grids(ens)
        with open(self.out / "metrics.jsonl", "a") as fh:
            fh.writelines(lines)
        return results

    def emit_grids(self, ens: Ensemble, out_dir: Path | None = None) -> list[Path]:
        out_dir = out_dir or self.out / "grids"
        out_dir.mkdir(parents=True, exist_ok=True)
        bounds = self.cfg.sgan.dataset.bounds()
        paths = []
        for d_id, disc in discriminators(ens):
            grid = level_set_grid(disc, bounds, self.cfg.output.grid_resolution)
            path = out_dir / f"iter_{ens.iteration:04d}_d{d_id}.csv"
            path.write_text(grid.to_csv())
            paths.append(path)
        return paths

    # -- main loop ---------------------------------------------------------------
    def train(self, ens: Ensemble, until: int) -> RunState:
        sg, out_cfg = self.cfg.sgan, self.cfg.output
        state = RunState(self.cfg, ens, self.out)
        rec = None
        try:
            while ens.iteration < until:
                rec = sgan_iteration(ens)
                it = rec.iteration
                self._log_losses(rec)
                if it % sg.eval_every == 0:
                    dump = out_cfg.sample_dump_every == 0 or it % out_cfg.sample_dump_every == 0
                    state.last_metrics = self.evaluate(ens, rec, dump)
                if out_cfg.checkpoint_every and it % out_cfg.checkpoint_every == 0:
                    self.checkpoint(ens)
        except TrainingError as exc:
            err = {"error": type(exc).__name__, "message": str(exc), **exc.context(),
                   "completed_iterations": ens.iteration}
            (self.out / "error.json").write_text(json.dumps(err, indent=2, sort_keys=True) + "\n")
            self.log(f"training diverged: {exc}")
            raise
        self.checkpoint(ens)
        self.write_summary(state, rec)
        return state

    def checkpoint(self, ens: Ensemble) -> Path:
        path = self.out / "checkpoints" / f"iter_{ens.iteration:04d}.ckpt"
        return save_checkpoint(ens, path, self.cfg.config_hash())

    def write_summary(self, state: RunState, rec: IterationRecord | None) -> None:
        ens = state.ens
        final = state.last_metrics
        if not final or next(iter(final.values()))["iteration"] != ens.iteration:
            probe = probe_real(self.cfg, ens.iteration)
            final = {}
            for gen_id, gen in generators(ens):
                m, _ = evaluate_generator(self.cfg, gen_id, gen, ens.iteration, probe)
                d_l, g_l = _losses_for(rec, gen_id, ens)
                final[gen_id] = MetricRecord(ens.iteration, gen_id, m["coverage_fraction"], m["coverage_C"],
                                             m["kde_loglik"], m["entropy_nats"], m["tv"], d_l, g_l,
                                             m["extra"]).to_dict()
        summary = {
            "iterations": ens.iteration,
            "mode": self.cfg.sgan.mode,
            "N": self.cfg.sgan.N,
            "config_hash": self.cfg.config_hash(),
            "generators": {str(k): v for k, v in final.items()},
            "step_counts": {n.name: n.opt.step_count for n in ens.networks()},
            "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        }
        (self.out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def run(cfg: RunConfig, log=None) -> RunState:
    runner = Runner(cfg, log)
    ens = runner.prepare(fresh=True)
    return runner.train(ens, cfg.sgan.iterations)


def _truncate_jsonl(path: Path, iteration: int) -> None:
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines(keepends=True)
            if json.loads(line)["iteration"] <= iteration]
    path.write_text("".join(keep))


def resume(checkpoint_path, *, iterations: int | None = None, allow_config_mismatch: bool = False,
           cfg: RunConfig | None = None, log=None) -> RunState:
    """Continue a run from one of its checkpoints, in the run's own directory.

    Rows logged after the checkpoint's iteration are dropped first, so the
    resumed run appends exactly what an unbroken run would have written.
    """
    ckpt = Path(checkpoint_path)
    run_dir = ckpt.parent.parent
    if cfg is None:
        echo = run_dir / "config.echo"
        if not echo.exists():
            raise CheckpointError(f"no config.echo next to {ckpt}; pass --config")
        cfg = parse_config(echo)
        cfg = replace(cfg, output=replace(cfg.output, dir=str(run_dir)))
    if iterations is not None:
        cfg = replace(cfg, sgan=replace(cfg.sgan, iterations=iterations))
    runner = Runner(cfg, log)
    ens = runner.prepare(fresh=False)
    load_checkpoint(ckpt, ens, cfg.config_hash(), allow_config_mismatch=allow_config_mismatch, warn=runner.log)
    for name in ("metrics.jsonl", "losses.jsonl", "traces.jsonl"):
        _truncate_jsonl(run_dir / name, ens.iteration)
    (run_dir / "summary.json").unlink(missing_ok=True)
    (run_dir / "error.json").unlink(missing_ok=True)
    if iterations is not None:
        (run_dir / "config.echo").write_text(cfg.echo())
    return runner.train(ens, cfg.sgan.iterations)


def sweep_n(cfg: RunConfig, N_values, seeds, *, stub_p: float | None = None, log=None) -> Path:
    """Uncovered-mode curve over ensemble sizes, written as ``sweep.csv`` (N, mean, stderr)."""
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(cfg.echo())
    if stub_p is not None:
        curve = uncovered_curve_stub(N_values, seeds, p=stub_p, n_points=cfg.metrics.curve_points,
                                     n_modes=cfg.sgan.dataset.M)
    else:
        curve = uncovered_curve(cfg.sgan, N_values, seeds, cfg.metrics, log=log)
    path = out / "sweep.csv"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["N", "mean", "stderr"])
    for n, mean, se in curve.rows():
        w.writerow([n, repr(mean), repr(se)])
    path.write_text(buf.getvalue())
    meta = {"seeds": list(seeds), "n_failed": curve.n_failed, "stub_p": stub_p}
    (out / "sweep_meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return path


def read_sweep(path) -> list[tuple[int, float, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["N", "mean", "stderr"]:
        raise ConfigError(f"{path} is not a sweep table")
    return [(int(n), float(m), float(s)) for n, m, s in rows[1:]]


def eval_run(run_dir) -> list[dict]:
    """Recompute metrics from a run's sample dumps; writes ``eval.jsonl``.

    Returns the recomputed records. Loss fields are not recoverable from
    samples and are left empty.
    """
    run_dir = Path(run_dir)
    cfg = parse_config(run_dir / "config.echo")
    records = []
    for path in sorted((run_dir / "samples").glob("iter_*_gen*.csv")):
        stem = path.stem
        it = int(stem.split("_")[1])
        gen_id = int(stem.split("_gen")[1])
        m = evaluate_samples(read_points_csv(path), probe_real(cfg, it), cfg.sgan.dataset, cfg.metrics)
        records.append(MetricRecord(it, gen_id, m["coverage_fraction"], m["coverage_C"], m["kde_loglik"],
                                    m["entropy_nats"], m["tv"], None, None, m["extra"]).to_dict())
    records.sort(key=lambda r: (r["iteration"], r["generator_id"]))
    (run_dir / "eval.jsonl").write_text("".join(_json_line(r) for r in records))
    return records


def emit_grid(checkpoint_path, *, cfg: RunConfig | None = None, resolution: int | None = None,
              out: Path | None = None) -> list[Path]:
    """Write level-set grids for every discriminator stored in a checkpoint."""
    ckpt = Path(checkpoint_path)
    run_dir = ckpt.parent.parent
    cfg = cfg or parse_config(run_dir / "config.echo")
    if resolution is not None:
        cfg = replace(cfg, output=replace(cfg.output, grid_resolution=resolution))
    runner = Runner(cfg)
    ens = init(cfg.sgan)
    load_checkpoint(ckpt, ens, cfg.config_hash(), allow_config_mismatch=True)
    return runner.emit_grids(ens, Path(out) if out is not None else run_dir / "grids")


def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
