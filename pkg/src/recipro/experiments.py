"""End-to-end experiment pipelines behind the CLI subcommands."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .datamodel import Dataset, DenseSchema, FlowLedger, SparseSchema, SplitPair
from .influence import DiscrepancySeries, marginal_flows, tracin_flows_online
from .ingest import load_csv, load_movielens, normalize_features, random_split
from .models import (
    BatchData,
    ModelKind,
    ModelSpec,
    Parameters,
    batch_losses,
    dataset_rmse,
    init_params,
    train_index,
)
from .reciprocity import aggregate_ledgers, snr
from .training import Minibatch, Sampling, TrainConfig, train

log = logging.getLogger(__name__)

MARGINAL_GATE = 50  # retrainings above which MovieLens Marginal needs force=True


def job_seed(root: int, *keys: int) -> int:
    """Deterministic per-job seed derived from the root seed."""
    return int(np.random.SeedSequence([root, *keys]).generate_state(1)[0])


def _check_method(method: str) -> None:
    if method not in ("tracin", "marginal"):
        raise ValueError(f"unknown method {method!r}; choose tracin or marginal")


def _map(fn, jobs, workers: int):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(job) for job in jobs]


# ---------------------------------------------------------------------------
# MovieLens


@dataclass
class MovielensConfig:
    data: str
    splits: int = 10
    repeats: int = 10
    train_fraction: float = 0.8
    dim: int = 16
    reg: float = 1.0
    steps: int = 1000
    lr: float = 0.0002
    init_scale: float = 0.01
    seed: int = 0
    method: str = "tracin"
    clip_norm: Optional[float] = None
    workers: int = 1
    force: bool = False

    def __post_init__(self):
        _check_method(self.method)
        if self.splits < 1 or self.repeats < 1:
            raise ValueError("splits and repeats must be at least 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")

    @property
    def spec(self) -> ModelSpec:
        return ModelSpec(ModelKind.MF, self.dim, self.reg, self.init_scale)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.steps, self.lr, clip_norm=self.clip_norm, seed=seed)

    def marginal_cost(self, num_users: int) -> int:
        return self.splits * self.repeats * (num_users + 1)


@dataclass
class RunResult:
    split: int
    repeat: int
    ledger: FlowLedger
    rmse: float
    deploy_loss: float
    discrepancy: Optional[DiscrepancySeries] = None


_DATA_CACHE: dict = {}


def _movielens(path: str) -> Dataset:
    if path not in _DATA_CACHE:
        _DATA_CACHE[path] = load_movielens(path)
    return _DATA_CACHE[path]


def _movielens_job(args) -> RunResult:
    cfg, s, r = args
    d = _movielens(cfg.data)
    split = random_split(d, cfg.train_fraction, job_seed(cfg.seed, 1, s))
    tcfg = cfg.train_config(job_seed(cfg.seed, 2, s, r))
    spec = cfg.spec
    counts = train_index(spec, split.train)
    deploy = BatchData(split.deploy)
    if cfg.method == "tracin":
        res = tracin_flows_online(spec, split, tcfg)
        params, ledger, disc = res.params, res.ledger, res.discrepancy
    else:
        init = init_params(spec, split.train.schema, split.train, tcfg.seed)
        ledger = marginal_flows(spec, split, tcfg, init=init)
        params, _ = train(spec, split, tcfg, init=init)
        disc = None
    loss = float(batch_losses(spec, params, deploy, counts).mean())
    return RunResult(s, r, ledger, dataset_rmse(spec, params, split.deploy), loss, disc)


def run_movielens(cfg: MovielensConfig) -> list[RunResult]:
    d = _movielens(cfg.data)
    if cfg.method == "marginal":
        cost = cfg.marginal_cost(d.schema.num_users)
        if cost > MARGINAL_GATE and not cfg.force:
            raise PermissionError(
                f"Marginal on MovieLens needs ~{cost} full training runs "
                f"({cfg.splits} splits x {cfg.repeats} repeats x (users + 1)); pass --force to run it")
    jobs = [(cfg, s, r) for s in range(cfg.splits) for r in range(cfg.repeats)]
    return _map(_movielens_job, jobs, cfg.workers)


def per_split_ledgers(runs: list[RunResult]) -> list[FlowLedger]:
    splits = sorted({run.split for run in runs})
    return [aggregate_ledgers([run.ledger for run in runs if run.split == s]) for s in splits]


def rmse_only(cfg: MovielensConfig) -> np.ndarray:
    """Deployment RMSE of every (split, repeat) run without flow bookkeeping."""
    jobs = [(cfg, s, r) for s in range(cfg.splits) for r in range(cfg.repeats)]
    return np.array(_map(_rmse_job, jobs, cfg.workers))


def _rmse_job(args) -> float:
    cfg, s, r = args
    d = _movielens(cfg.data)
    split = random_split(d, cfg.train_fraction, job_seed(cfg.seed, 1, s))
    params, _ = train(cfg.spec, split, cfg.train_config(job_seed(cfg.seed, 2, s, r)))
    return dataset_rmse(cfg.spec, params, split.deploy)


# ---------------------------------------------------------------------------
# health data sets


TASKS = {
    "diabetes": dict(kind=ModelKind.LINEAR, steps=200, lr=0.01, task="regression"),
    "breastcancer": dict(kind=ModelKind.LOGISTIC, steps=600, lr=0.1, task="classification"),
}


@dataclass
class HealthConfig:
    data: str
    task: str = "diabetes"
    label_column: str = "target"
    splits: int = 100
    # each individual is a single example, so a balanced split gives both
    # sides of every individual's ledger the same number of appearances
    train_fraction: float = 0.5
    steps: Optional[int] = None
    lr: Optional[float] = None
    seed: int = 0
    method: str = "tracin"
    clip_norm: Optional[float] = None
    marginal_step: str = "held"
    workers: int = 1

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; choose from {sorted(TASKS)}")
        _check_method(self.method)
        if self.splits < 1:
            raise ValueError("splits must be at least 1")
        if self.marginal_step not in ("held", "literal"):
            raise ValueError("marginal_step must be 'held' or 'literal'")
        defaults = TASKS[self.task]
        if self.steps is None:
            self.steps = defaults["steps"]
        if self.lr is None:
            self.lr = defaults["lr"]

    @property
    def spec(self) -> ModelSpec:
        return ModelSpec(TASKS[self.task]["kind"])

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.steps, self.lr, clip_norm=self.clip_norm, seed=seed, reduction="mean")


@dataclass
class HealthSplitResult:
    split: int
    ledger: FlowLedger
    deploy_loss: float
    discrepancy: Optional[DiscrepancySeries] = None


def _health_job(args) -> HealthSplitResult:
    cfg, dataset, s = args
    raw = random_split(dataset, cfg.train_fraction, job_seed(cfg.seed, 1, s))
    train_set, deploy, _ = normalize_features(raw.train, raw.deploy)
    split = SplitPair(train_set, deploy, raw.seed, raw.train_fraction)
    spec = cfg.spec
    tcfg = cfg.train_config(job_seed(cfg.seed, 2, s))
    init = init_params(spec, train_set.schema, train_set, tcfg.seed)
    disc = None
    if cfg.method == "tracin":
        res = tracin_flows_online(spec, split, tcfg, init=init)
        ledger, params, disc = res.ledger, res.params, res.discrepancy
    else:
        ledger = marginal_flows(spec, split, tcfg, init=init, hold_step=cfg.marginal_step == "held")
        params, _ = train(spec, split, tcfg, init=init)
    loss = float(batch_losses(spec, params, BatchData(deploy)).mean())
    return HealthSplitResult(s, ledger, loss, disc)


def load_health(cfg: HealthConfig) -> Dataset:
    return load_csv(cfg.data, cfg.label_column, TASKS[cfg.task]["task"])


def run_health(cfg: HealthConfig, dataset: Dataset | None = None) -> list[HealthSplitResult]:
    if dataset is None:
        dataset = load_health(cfg)
    jobs = [(cfg, dataset, s) for s in range(cfg.splits)]
    return _map(_health_job, jobs, cfg.workers)


# ---------------------------------------------------------------------------
# Monte-Carlo check of expected reciprocity under independent batches


@dataclass
class Prop1Config:
    trials: int = 1000
    individuals: int = 8
    points_per_batch: int = 16
    steps: int = 20
    deploy_size: int = 64
    model: str = "linear"
    lr: float = 0.05
    seed: int = 0
    clip_norm: Optional[float] = None
    workers: int = 1

    def __post_init__(self):
        if self.model not in ("linear", "mf"):
            raise ValueError(f"unknown synthetic model {self.model!r}")
        if min(self.trials, self.individuals, self.points_per_batch, self.steps, self.deploy_size) < 1:
            raise ValueError("trials, individuals, points_per_batch, steps and deploy_size must be positive")


@dataclass
class SyntheticPopulation:
    """Per-individual Gaussian clusters; individuals differ in frequency and location."""

    model: str
    weights: np.ndarray
    centers: np.ndarray
    offsets: np.ndarray
    coef: np.ndarray
    item_factors: Optional[np.ndarray] = None
    num_items: int = 0
    noise: float = 0.3
    spread: float = 0.5

    @classmethod
    def make(cls, model: str, individuals: int, seed: int) -> "SyntheticPopulation":
        rng = np.random.default_rng([seed, 0xD15])
        weights = rng.dirichlet(np.full(individuals, 2.0))
        if model == "linear":
            return cls("linear", weights, rng.normal(0, 1, (individuals, 3)),
                       rng.normal(0, 1, individuals), rng.normal(0, 1, 3))
        if model == "mf":
            num_items = 6
            return cls("mf", weights, rng.normal(0, 1, (individuals, 2)), np.zeros(individuals),
                       np.zeros(0), item_factors=rng.normal(0, 1, (num_items, 2)), num_items=num_items)
        raise ValueError(f"unknown synthetic model {model!r}")

    @property
    def schema(self):
        if self.model == "mf":
            return SparseSchema(len(self.weights), self.num_items)
        return DenseSchema(self.centers.shape[1])

    def draw(self, n: int, rng: np.random.Generator) -> Dataset:
        who = rng.choice(len(self.weights), size=n, p=self.weights)
        if self.model == "mf":
            items = rng.integers(0, self.num_items, size=n)
            y = np.einsum("ij,ij->i", self.centers[who], self.item_factors[items])
            y = y + rng.normal(0, self.noise, n)
            return Dataset.from_arrays(who, np.stack([who, items], axis=1), y, self.schema)
        x = self.centers[who] + rng.normal(0, self.spread, (n, self.centers.shape[1]))
        y = x @ self.coef + self.offsets[who] + rng.normal(0, self.noise, n)
        return Dataset.from_arrays(who, x, y, self.schema)

    def spec(self) -> ModelSpec:
        if self.model == "mf":
            return ModelSpec(ModelKind.MF, embedding_dim=2, reg=0.0, init_scale=0.1)
        return ModelSpec(ModelKind.LINEAR)


def _prop1_init(pop: SyntheticPopulation, spec: ModelSpec, seed: int) -> Parameters:
    """Initialization independent of the sampled data (w_0 may not peek at future batches)."""
    if spec.is_factorization:
        schema = pop.schema
        shape = (schema.num_users, schema.num_items, spec.embedding_dim)
        flat = np.random.default_rng(seed).normal(0, spec.init_scale, Parameters.size_for(spec.kind, shape))
        return Parameters(flat, spec.kind, shape)
    return Parameters(np.zeros(pop.schema.dim + 1), spec.kind, (pop.schema.dim,))


def _prop1_trial(args) -> tuple[np.ndarray, np.ndarray]:
    cfg, pop, trial = args
    rng = np.random.default_rng([cfg.seed, 0x7121, trial])
    spec = pop.spec()
    train_set = pop.draw(cfg.steps * cfg.points_per_batch, rng)
    deploy = pop.draw(cfg.deploy_size, rng)
    split = SplitPair(train_set, deploy, trial, 0.5)
    # one shuffled pass: every step sees fresh, mutually independent examples
    tcfg = TrainConfig(cfg.steps, cfg.lr, batch=Minibatch(cfg.points_per_batch, Sampling.EPOCH_SHUFFLE),
                       clip_norm=cfg.clip_norm, seed=job_seed(cfg.seed, 3, trial), reduction="mean")
    ledger = tracin_flows_online(spec, split, tcfg, init=_prop1_init(pop, spec, tcfg.seed)).ledger
    k = len(pop.weights)
    inflow = np.zeros(k)
    outflow = np.zeros(k)
    inflow[ledger.individuals] = ledger.inflow
    outflow[ledger.individuals] = ledger.outflow
    return inflow, outflow


@dataclass
class Prop1Result:
    inflow: np.ndarray  # trials x individuals
    outflow: np.ndarray
    symmetry_gap: float
    symmetry_scale: float
    clipped_symmetry_gap: Optional[float] = None

    @property
    def mean_difference(self) -> np.ndarray:
        return (self.inflow - self.outflow).mean(axis=0)

    @property
    def standard_error(self) -> np.ndarray:
        diff = self.inflow - self.outflow
        return diff.std(axis=0, ddof=1) / math.sqrt(diff.shape[0])

    @property
    def z_scores(self) -> np.ndarray:
        se = self.standard_error
        return np.divide(np.abs(self.mean_difference), se, out=np.zeros_like(se), where=se > 0)

    @property
    def passed(self) -> bool:
        return bool(np.all(np.abs(self.mean_difference) <= 3.0 * self.standard_error))


def symmetry_gap(spec: ModelSpec, data: Dataset, config: TrainConfig, init: Parameters) -> tuple[float, float]:
    """max_u |I_u - O_u| and max_u max(|I_u|, |O_u|) when deployment = training set."""
    split = SplitPair(data, data, 0, 0.5)
    ledger = tracin_flows_online(spec, split, config, init=init).ledger
    gap = float(np.max(np.abs(ledger.inflow - ledger.outflow)))
    scale = float(max(np.max(np.abs(ledger.inflow)), np.max(np.abs(ledger.outflow))))
    return gap, scale


def run_prop1(cfg: Prop1Config) -> Prop1Result:
    pop = SyntheticPopulation.make(cfg.model, cfg.individuals, cfg.seed)
    out = _map(_prop1_trial, [(cfg, pop, t) for t in range(cfg.trials)], cfg.workers)
    inflow = np.array([o[0] for o in out])
    outflow = np.array([o[1] for o in out])
    # exact check: deploy = train, full batch
    rng = np.random.default_rng([cfg.seed, 0x5111])
    data = pop.draw(cfg.deploy_size, rng)
    spec = pop.spec()
    init = _prop1_init(pop, spec, job_seed(cfg.seed, 4))
    full = TrainConfig(cfg.steps, cfg.lr, reduction="mean")
    gap, scale = symmetry_gap(spec, data, full, init)
    clipped = None
    if cfg.clip_norm is not None:
        clip_cfg = TrainConfig(cfg.steps, cfg.lr, clip_norm=cfg.clip_norm, reduction="mean")
        clipped = symmetry_gap(spec, data, clip_cfg, init)[0]
    return Prop1Result(inflow, outflow, gap, scale, clipped)


# ---------------------------------------------------------------------------
# run-to-run variability of MovieLens flows


@dataclass
class FlowVarConfig(MovielensConfig):
    individuals: int = 5
    runs: int = 10
    split_index: int = 0


@dataclass
class FlowVarResult:
    selected: np.ndarray           # individual ids, by increasing average inflow
    normalized_inflow: np.ndarray  # runs x selected
    normalized_outflow: np.ndarray
    run_totals: np.ndarray
    ledgers: list = field(repr=False, default_factory=list)


def select_by_inflow_rank(ledger: FlowLedger, k: int) -> np.ndarray:
    """Individuals at evenly spaced ranks of inflow (min, quartiles, max for k=5)."""
    n = len(ledger)
    if k > n:
        raise ValueError(f"cannot select {k} individuals from a population of {n}")
    order = np.argsort(ledger.inflow, kind="stable")
    ranks = np.unique(np.round(np.linspace(0, n - 1, k)).astype(int))
    return ledger.individuals[order[ranks]]


def run_flow_variability(cfg: FlowVarConfig) -> FlowVarResult:
    d = _movielens(cfg.data)
    split = random_split(d, cfg.train_fraction, job_seed(cfg.seed, 1, cfg.split_index))
    if cfg.individuals > len(split.population):
        raise ValueError(f"--individuals {cfg.individuals} exceeds population {len(split.population)}")
    ledgers = []
    for r in range(cfg.runs):
        res = tracin_flows_online(cfg.spec, split, cfg.train_config(job_seed(cfg.seed, 2, cfg.split_index, r)))
        ledgers.append(res.ledger)
    mean_ledger = aggregate_ledgers(ledgers)
    chosen = select_by_inflow_rank(mean_ledger, cfg.individuals)
    totals = np.array([lg.inflow.sum() for lg in ledgers])
    nin = np.zeros((cfg.runs, len(chosen)))
    nout = np.zeros((cfg.runs, len(chosen)))
    for r, lg in enumerate(ledgers):
        idx = np.searchsorted(lg.individuals, chosen)
        nin[r] = lg.inflow[idx] / totals[r]
        nout[r] = lg.outflow[idx] / totals[r]
    return FlowVarResult(chosen, nin, nout, totals, ledgers)


def config_dict(cfg) -> dict:
    return {k: v for k, v in asdict(cfg).items() if k not in ("workers",)}


def health_snr(results: list[HealthSplitResult]):
    return snr([r.ledger for r in results])


def existing_file(path: str) -> str:
    if not Path(path).is_file():
        raise FileNotFoundError(f"data file not found: {path}")
    return path
