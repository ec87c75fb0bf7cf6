"""Experiment orchestration: active-learning runs, bias curves and aggregation.

Every repetition draws its randomness from named streams keyed on
``(seed, repetition, stream[, n_train])`` so any single query can be replayed
in isolation.  Results are plain row dicts; :func:`write_results` turns them
into CSV with fixed column order and 17-significant-digit floats, which makes
reruns byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import subprocess
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, acquisition, data, dun, estimators, mcdo
from .config import ExperimentConfig
from .dun import TrainSchedule
from .network import NetworkConfig

log = logging.getLogger(__name__)

STREAMS = {"split": 0, "init": 1, "acquire": 2, "train": 3, "fit": 4, "eval": 5, "alb": 6}


def stream(cfg: ExperimentConfig, rep: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, rep, STREAMS[name], *extra])


def split_seed(cfg: ExperimentConfig, rep: int) -> int:
    return int(stream(cfg, rep, "split").integers(2**31))


def load_dataset(cfg: ExperimentConfig) -> data.Dataset:
    spec = data.DATASET_SPECS.get(cfg.dataset)
    directory = Path(cfg.data_dir) if cfg.data_dir else data.default_data_dir()
    return data.load(cfg.dataset, directory / (spec.filename if spec else f"{cfg.dataset}.csv"))


def schedule_of(cfg: ExperimentConfig) -> TrainSchedule:
    return TrainSchedule(cfg.iterations, cfg.learning_rate, cfg.momentum, cfg.weight_decay, cfg.checkpoint_every)


def al_schedule(cfg: ExperimentConfig) -> tuple[int, int, int]:
    spec = data.DATASET_SPECS.get(cfg.dataset)
    init = cfg.init_train_size if cfg.init_train_size is not None else (spec.init_train_size if spec else 20)
    nq = cfg.n_queries if cfg.n_queries is not None else (spec.n_queries if spec else 10)
    qs = cfg.query_size if cfg.query_size is not None else (spec.query_size if spec else 20)
    return init, nq, qs


# ---------------------------------------------------------------------------
# models behind one interface


@dataclass
class Fitted:
    kind: str
    model: object
    eval_rng_seed: tuple

    def _rng(self):
        return np.random.default_rng(list(self.eval_rng_seed))

    def example_nll(self, x, y) -> np.ndarray:
        if self.kind == "dun":
            return dun.example_nll(self.model, x, y)
        return mcdo.example_nll(self.model, x, y, self._rng())

    def bald(self, x) -> np.ndarray:
        if self.kind == "dun":
            return acquisition.bald_dun(self.model, x)
        return acquisition.bald_mcdo(self.model, x, self._rng())


def fit_model(cfg: ExperimentConfig, kind: str, rep: int, train_xy, val_xy, weights=None) -> Fitted:
    """Train a fresh model; the result depends only on (seed, rep, training data, weights)."""
    n_train = len(train_xy[1])
    init_rng = stream(cfg, rep, "train", n_train)
    input_dim = train_xy[0].shape[1]
    sched = schedule_of(cfg)
    if kind == "dun":
        ncfg = NetworkConfig(input_dim=input_dim, width=cfg.width, n_hidden=cfg.dun_depth)
        model = dun.create(ncfg, init_rng, prior=cfg.depth_prior)
        dun.train(model, train_xy, val_xy, weights=weights, schedule=sched)
    elif kind == "mcdo":
        model = mcdo.create(input_dim, init_rng, width=cfg.width, n_hidden=cfg.mcdo_hidden,
                            dropout_p=cfg.dropout_p, n_mc_samples=cfg.mc_samples)
        mcdo.train(model, train_xy, val_xy, stream(cfg, rep, "fit", n_train), weights=weights, schedule=sched)
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return Fitted(kind, model, (cfg.seed, rep, STREAMS["eval"], n_train))


def training_weights(cfg: ExperimentConfig, objective: str, state: data.PoolState) -> np.ndarray | None:
    if cfg.force_unit_weights:
        return np.ones(len(state.train))
    if objective == "lure":
        return estimators.lure_weights(state.trace)
    return None


def fit_for_state(cfg: ExperimentConfig, kind: str, objective: str, rep: int,
                  views: data.StandardizedViews, state: data.PoolState) -> Fitted:
    return fit_model(cfg, kind, rep, views.subset(state.train), views.subset(state.val),
                     training_weights(cfg, objective, state))


def prepare(cfg: ExperimentConfig, rep: int) -> tuple[data.Dataset, data.PoolState, data.StandardizedViews]:
    ds = load_dataset(cfg)
    state = data.split(ds, split_seed(cfg, rep))
    views = data.standardize(state, ds)
    return ds, state, views


# ---------------------------------------------------------------------------
# active-learning loop


def _fmt_posterior(p) -> str:
    return ";".join(format(v, ".17g") for v in p)


def active_run(cfg: ExperimentConfig, rep: int, kind: str, objective: str, temperature: float,
               artifacts: dict | None = None) -> list[dict]:
    """One active-learning run, retraining from scratch after every query.

    Returns one row per trained model (after the initial draw and after each
    query) with test NLL, the three risk estimates and B_OFB.  If
    ``artifacts`` is given it receives the final acquisition trace CSV under
    ``"trace"`` and the proposal snapshot of every query under ``"proposals"``.
    """
    proposals = ["query," + PROPOSAL_HEADER]
    ds, state, views = prepare(cfg, rep)
    init, n_queries, qsize = al_schedule(cfg)
    init = min(init, len(state.pool))
    idx, recs = acquisition.uniform_batch(state.pool, init, stream(cfg, rep, "init"), start_m=1)
    data.acquire(state, idx, recs)
    acq_rng = stream(cfg, rep, "acquire")
    xt, yt = views.subset(state.test)
    rows = []
    for q in range(n_queries + 1):
        fitted = fit_for_state(cfg, kind, objective, rep, views, state)
        test_losses = fitted.example_nll(xt, yt)
        train_losses = fitted.example_nll(*views.subset(state.train))
        r = estimators.empirical_risk(test_losses)
        rl = estimators.r_lure(train_losses, state.trace)
        row = {
            "rep": rep,
            "seed": cfg.seed,
            "split_seed": split_seed(cfg, rep),
            "model": kind,
            "objective": objective,
            "temperature": temperature,
            "query": q,
            "n_train": len(state.train),
            "test_nll": r,
            "r": r,
            "r_tilde": estimators.r_tilde(train_losses, state.trace),
            "r_lure": rl,
            "b_ofb": estimators.ofb_bias(r, rl),
            "expected_depth": "",
            "posterior": "",
        }
        if kind == "dun":
            post = dun.exact_posterior(fitted.model, *views.subset(state.train))
            row["expected_depth"] = post.expected_depth()
            row["posterior"] = _fmt_posterior(post.probs)
        rows.append(row)
        if q == n_queries or not state.pool:
            break
        batch = min(qsize, len(state.pool))
        xp, _ = views.subset(state.pool)
        if cfg.proposal == "uniform":
            scores = np.zeros(len(state.pool))
        else:
            scores = fitted.bald(xp)
        if artifacts is not None:
            snap = acquisition.relax(scores, temperature, candidates=state.pool).to_csv()
            proposals.extend(f"{q},{line}" for line in snap.splitlines()[1:])
        idx, recs = acquisition.sample_batch(scores, state.pool, batch, acq_rng, temperature, start_m=state.m + 1)
        data.acquire(state, idx, recs)
        state.check_partition(ds.n)
    if artifacts is not None:
        artifacts["trace"] = state.trace.to_csv()
        artifacts["proposals"] = "\n".join(proposals) + "\n"
    return rows


def alb_rep(cfg: ExperimentConfig, rep: int) -> list[dict]:
    """Active-learning bias curves for one frozen model over the test set."""
    ds, state, views = prepare(cfg, rep)
    n_fit = min(cfg.alb_train_size, len(state.pool))
    idx, recs = acquisition.uniform_batch(state.pool, n_fit, stream(cfg, rep, "init"), start_m=1)
    data.acquire(state, idx, recs)
    fitted = fit_model(cfg, cfg.model, rep, views.subset(state.train), views.subset(state.val))
    xt, yt = views.subset(state.test)
    losses = fitted.example_nll(xt, yt)
    n_test = len(losses)
    scores = np.zeros(n_test) if cfg.proposal == "uniform" else fitted.bald(xt)
    sampler = acquisition.trace_sampler(scores, cfg.temperature)
    grid = list(range(cfg.alb_m_step, n_test + 1, cfg.alb_m_step))
    if not grid or grid[-1] != n_test:
        grid.append(n_test)
    rows = []
    for m in grid:
        est = estimators.alb_bias(losses, sampler, m, cfg.alb_draws, stream(cfg, rep, "alb", m))
        rows.append({
            "rep": rep,
            "seed": cfg.seed,
            "split_seed": split_seed(cfg, rep),
            "model": cfg.model,
            "temperature": cfg.temperature,
            "proposal": cfg.proposal,
            "M": m,
            "N": n_test,
            "r": estimators.empirical_risk(losses),
            "bias_r_tilde": est.bias_r_tilde,
            "bias_r_lure": est.bias_r_lure,
            "se_r_tilde": est.se_r_tilde,
            "se_r_lure": est.se_r_lure,
            "var_r_tilde": est.var_r_tilde,
            "var_r_lure": est.var_r_lure,
        })
    return rows


# ---------------------------------------------------------------------------
# repetition jobs


@dataclass(frozen=True)
class Job:
    kind: str  # "active" or "alb"
    rep: int
    model: str = "dun"
    objective: str = "standard"
    temperature: float = 10.0


def artifact_name(job: Job, what: str) -> str:
    return f"{job.model}_{job.objective}_T{job.temperature:g}_rep{job.rep}_{what}.csv"


def _run_job(cfg: ExperimentConfig, job: Job) -> tuple[Job, list[dict] | None, dict, str | None, float]:
    t0 = time.perf_counter()
    artifacts: dict = {}
    try:
        if job.kind == "alb":
            rows = alb_rep(cfg, job.rep)
        else:
            rows = active_run(cfg, job.rep, job.model, job.objective, job.temperature, artifacts)
        files = {artifact_name(job, what): text for what, text in artifacts.items()}
        return job, rows, files, None, time.perf_counter() - t0
    except (dun.TrainingError, ArithmeticError, ValueError, RuntimeError) as exc:
        log.error("repetition %d (%s/%s) failed: %s", job.rep, job.model, job.objective, exc)
        return job, None, {}, f"{type(exc).__name__}: {exc}", time.perf_counter() - t0


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list[dict]
    failures: list[dict] = field(default_factory=list)
    wall_times: list[dict] = field(default_factory=list)
    columns: list[str] = field(default_factory=list)
    # file name -> CSV text (acquisition traces and proposal snapshots)
    artifacts: dict[str, str] = field(default_factory=dict)

    @property
    def n_failed(self) -> int:
        return len(self.failures)


def run_jobs(cfg: ExperimentConfig, jobs: list[Job]) -> ExperimentResult:
    # data problems should surface before any work is scheduled
    load_dataset(cfg)
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            outcomes = list(pool.map(_run_job, [cfg] * len(jobs), jobs))
    else:
        outcomes = [_run_job(cfg, j) for j in jobs]
    rows, failures, times, artifacts = [], [], [], {}
    for job, job_rows, files, err, secs in outcomes:
        artifacts.update(files)
        times.append({"rep": job.rep, "model": job.model, "objective": job.objective,
                      "temperature": job.temperature, "seconds": secs})
        if err is not None:
            failures.append({"rep": job.rep, "model": job.model, "objective": job.objective, "error": err})
        else:
            rows.extend(job_rows)
    h = cfg.config_hash()
    for row in rows:
        row["experiment"] = cfg.kind
        row["dataset"] = cfg.dataset
        row["config_hash"] = h
    return ExperimentResult(cfg, rows, failures, times, artifacts=artifacts)


PROPOSAL_HEADER = "pool_index,score,temperature,probability"
ACTIVE_COLUMNS = ["experiment", "dataset", "model", "objective", "temperature", "rep", "seed", "split_seed",
                  "config_hash", "query", "n_train", "test_nll", "r", "r_tilde", "r_lure", "b_ofb",
                  "expected_depth", "posterior"]
ALB_COLUMNS = ["experiment", "dataset", "model", "proposal", "temperature", "rep", "seed", "split_seed",
               "config_hash", "M", "N", "r", "bias_r_tilde", "bias_r_lure", "se_r_tilde", "se_r_lure",
               "var_r_tilde", "var_r_lure"]


def run_alb(cfg: ExperimentConfig) -> ExperimentResult:
    res = run_jobs(cfg, [Job("alb", rep, cfg.model) for rep in range(cfg.repetitions)])
    res.columns = ALB_COLUMNS
    return res


def run_ofb(cfg: ExperimentConfig) -> ExperimentResult:
    jobs = [Job("active", rep, m, cfg.objective, cfg.temperature)
            for m in cfg.ofb_models for rep in range(cfg.repetitions)]
    res = run_jobs(cfg, jobs)
    res.columns = ACTIVE_COLUMNS
    return res


def run_downstream(cfg: ExperimentConfig, temperatures=None, objectives=("standard", "lure")) -> ExperimentResult:
    temps = [cfg.temperature] if temperatures is None else list(temperatures)
    jobs = [Job("active", rep, cfg.model, obj, t) for t in temps for obj in objectives for rep in range(cfg.repetitions)]
    res = run_jobs(cfg, jobs)
    res.columns = ACTIVE_COLUMNS
    return res


def run_temperature_sweep(cfg: ExperimentConfig, temps=None) -> ExperimentResult:
    temps = list(cfg.temperatures if temps is None else temps)
    if any(not t > 0 for t in temps):
        raise ValueError("temperatures must be positive")
    return run_downstream(cfg, temperatures=temps, objectives=("standard",))


def snapshot_depth_posteriors(cfg: ExperimentConfig) -> ExperimentResult:
    """Active DUN runs; the first and last rows per repetition hold the posteriors."""
    res = run_jobs(cfg, [Job("active", rep, "dun", cfg.objective, cfg.temperature) for rep in range(cfg.repetitions)])
    res.columns = ACTIVE_COLUMNS
    return res


RUNNERS = {
    "alb": run_alb,
    "ofb": run_ofb,
    "downstream": run_downstream,
    "temp-sweep": run_temperature_sweep,
    "posteriors": snapshot_depth_posteriors,
}


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    return RUNNERS[cfg.kind](cfg)


# ---------------------------------------------------------------------------
# aggregation and output


def aggregate(rows: list[dict], keys: list[str], values: list[str]) -> list[dict]:
    """Mean, sample std (0 for one repetition) and count per group, in sorted group order."""
    if not rows:
        raise ValueError("nothing to aggregate")
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in keys), []).append(row)
    out = []
    for gkey in sorted(groups, key=lambda t: tuple(_sort_key(v) for v in t)):
        members = groups[gkey]
        agg = dict(zip(keys, gkey))
        agg["count"] = len(members)
        for v in values:
            arr = np.array([float(m[v]) for m in members if m[v] != ""], dtype=np.float64)
            if arr.size == 0:
                continue
            agg[f"{v}_mean"] = float(np.sort(arr).sum() / arr.size)
            agg[f"{v}_std"] = float(np.std(np.sort(arr), ddof=1)) if arr.size > 1 else 0.0
        out.append(agg)
    return out


def summarize(res: ExperimentResult) -> list[dict]:
    if not res.rows:
        return []
    if res.config.kind == "alb":
        return aggregate(res.rows, ["model", "M"], ["bias_r_tilde", "bias_r_lure", "var_r_tilde", "var_r_lure"])
    return aggregate(res.rows, ["model", "objective", "temperature", "query"],
                     ["n_train", "test_nll", "r_tilde", "r_lure", "b_ofb", "expected_depth"])


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def rows_to_csv(rows: list[dict], columns: list[str]) -> str:
    order = sorted(rows, key=lambda r: tuple(_sort_key(r.get(c)) for c in ("model", "objective", "temperature", "rep", "query", "M")))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in order:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def _sort_key(v):
    if v is None or v == "":
        return (0, "")
    if isinstance(v, (int, float)):
        return (1, v)
    return (2, str(v))


def atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def version_stamp() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def results_stem(cfg: ExperimentConfig) -> str:
    return f"{cfg.kind}_{cfg.dataset}"


def write_results(res: ExperimentResult, output_dir: str | Path | None = None) -> tuple[Path, Path]:
    out = Path(output_dir or res.config.output_dir)
    stem = results_stem(res.config)
    csv_path = out / f"{stem}.csv"
    summary_path = out / f"{stem}_summary.json"
    atomic_write(csv_path, rows_to_csv(res.rows, res.columns))
    for name, text in sorted(res.artifacts.items()):
        atomic_write(out / f"{stem}_traces" / name, text)
    summary = {
        "config": res.config.echo(),
        "config_hash": res.config.config_hash(),
        "version": version_stamp(),
        "n_rows": len(res.rows),
        "failures": res.failures,
        "artifacts": sorted(f"{stem}_traces/{name}" for name in res.artifacts),
        "wall_times": res.wall_times,
        "total_seconds": math.fsum(t["seconds"] for t in res.wall_times),
        "aggregate": summarize(res),
    }
    atomic_write(summary_path, json.dumps(summary, indent=2, sort_keys=True, default=str))
    return csv_path, summary_path


def read_results(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
