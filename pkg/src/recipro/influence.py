"""Per-individual inflow/outflow via TracIn (online and pairwise) and via Marginal retraining.

Both flows are in units of deployment-loss reduction: positive means the
training data helped. For individual ``u``

    inflow  I_u = sum over z not in Z_u,  z' in Z'_u     of Influence(z, z')
    outflow O_u = sum over z in Z_u,      z' not in Z'_u of Influence(z, z')

With TracIn, Influence(z, z') = sum_{t: z in B_t} lr_t * grad(w_t, z') . grad(w_t, z).
"""

from __future__ import annotations

import enum
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .datamodel import Dataset, FlowLedger, SplitPair
from .models import (
    BatchData,
    GroupPairPlan,
    ModelKind,
    ModelSpec,
    Parameters,
    _sigmoid,
    batch_losses,
    dense_grad,
    init_params,
    loss_example,
    train_index,
)
from .training import DivergenceError, StepView, TrainConfig, sample_batch, train

log = logging.getLogger(__name__)

UNDEFINED_CHANGE = 1e-12
NAIVE_BUDGET = 2e8


class Granularity(str, enum.Enum):
    INDIVIDUAL = "individual"
    EXAMPLE = "example"


def _codes(population: np.ndarray, individuals: np.ndarray) -> np.ndarray:
    return np.searchsorted(population, individuals)


def _sizes(population, d: Dataset) -> np.ndarray:
    return np.bincount(_codes(population, d.individuals), minlength=len(population))


# ---------------------------------------------------------------------------
# first-order discrepancy


def first_order_discrepancy(predicted_change, actual_change, tol: float = UNDEFINED_CHANGE) -> np.ndarray:
    """Relative gap |predicted - actual| / |actual| per step; NaN where |actual| < tol."""
    predicted = np.asarray(predicted_change, dtype=np.float64)
    actual = np.asarray(actual_change, dtype=np.float64)
    out = np.full(actual.shape, np.nan)
    ok = np.abs(actual) >= tol
    out[ok] = np.abs(predicted[ok] - actual[ok]) / np.abs(actual[ok])
    return out


@dataclass
class DiscrepancySeries:
    predicted: np.ndarray
    actual: np.ndarray

    @property
    def relative(self) -> np.ndarray:
        return first_order_discrepancy(self.predicted, self.actual)

    @property
    def n_undefined(self) -> int:
        return int(np.isnan(self.relative).sum())

    def percentiles(self, qs=(50, 80, 95)) -> dict:
        rel = self.relative
        rel = rel[~np.isnan(rel)]
        if len(rel) == 0:
            return {int(q): float("nan") for q in qs}
        return {int(q): float(np.percentile(rel, q)) for q in qs}


# ---------------------------------------------------------------------------
# TracIn, online path


class _OnlineAccumulator:
    """Training hook accumulating per-individual flows from per-step gradient sums."""

    def __init__(self, spec: ModelSpec, split: SplitPair):
        self.spec = spec
        self.population = split.population
        k = len(self.population)
        self.train_codes = _codes(self.population, split.train.individuals)
        self.deploy = BatchData(split.deploy)
        self.deploy_codes = _codes(self.population, split.deploy.individuals)
        self.inflow = np.zeros(k)
        self.outflow = np.zeros(k)
        self.selfflow = np.zeros(k)
        self.predicted = []
        self.deploy_loss = []
        self._plan_key = None
        self._plan = None

    def _plan_for(self, view: StepView) -> GroupPairPlan:
        if view.batch is not self._plan_key:
            w = view.params
            self._plan = GroupPairPlan(
                view.batch.row_index(w), self.train_codes[view.positions],
                self.deploy.row_index(w), self.deploy_codes,
                [pt.nrows for pt in view.grads.parts], len(self.population))
            self._plan_key = view.batch
        return self._plan

    def __call__(self, view: StepView) -> None:
        k = len(self.population)
        w = view.params
        eta = view.learning_rate
        train_grads = view.grads
        deploy_grads, deploy_losses = view.grads_for(self.deploy)
        G = view.update
        H = deploy_grads.total(self.deploy.summers(w))
        batch_codes = self.train_codes[view.positions]
        g_u_dot_h = np.bincount(batch_codes, weights=train_grads.dot(H), minlength=k)
        g_dot_h_u = np.bincount(self.deploy_codes, weights=deploy_grads.dot(G), minlength=k)
        g_u_dot_h_u = self._plan_for(view).group_dot(train_grads, deploy_grads)
        self.inflow += eta * (g_dot_h_u - g_u_dot_h_u)
        self.outflow += eta * (g_u_dot_h - g_u_dot_h_u)
        self.selfflow += eta * g_u_dot_h_u
        self.predicted.append(-eta * float(G @ H))
        self.deploy_loss.append(float(deploy_losses.sum()))


@dataclass
class TracInResult:
    ledger: FlowLedger
    params: Parameters
    discrepancy: DiscrepancySeries
    deploy_loss: np.ndarray = field(repr=False)
    train_summary: object = field(repr=False, default=None)


def tracin_flows_online(spec: ModelSpec, split: SplitPair, config: TrainConfig,
                        init: Parameters | None = None) -> TracInResult:
    """Train once and accumulate TracIn flows along the trajectory.

    Uses the rewrite O_u = sum_t lr_t G_t^u . (H_t - H_t^u) (and its inflow
    analogue), where G_t^u / H_t^u are u's summed batch / deployment
    gradients, so the cost per step is linear in |B_t| + |Z'|.
    """
    acc = _OnlineAccumulator(spec, split)
    params, summary = train(spec, split, config, hook=acc, init=init)
    counts = train_index(spec, split.train)
    final_loss = float(batch_losses(spec, params, acc.deploy, counts).sum())
    losses = np.array(acc.deploy_loss + [final_loss])
    discrepancy = DiscrepancySeries(np.array(acc.predicted), np.diff(losses))
    ledger = FlowLedger(acc.population, acc.inflow, acc.outflow, "tracin", selfflow=acc.selfflow,
                        n_train=_sizes(acc.population, split.train),
                        n_deploy=_sizes(acc.population, split.deploy))
    return TracInResult(ledger, params, discrepancy, losses, summary)


# ---------------------------------------------------------------------------
# TracIn, pairwise oracle


def tracin_influence_matrix(spec: ModelSpec, split: SplitPair, config: TrainConfig,
                            init: Parameters | None = None) -> np.ndarray:
    """Pairwise TracIn(z, z') for every training/deployment example pair.

    Replays gradient descent with one-example-at-a-time gradients, stores
    each checkpoint and sums lr_t * grad(w_t, z') . grad(w_t, z) literally.
    """
    train_set, deploy = split.train, split.deploy
    counts = train_index(spec, train_set)
    w = init.copy() if init is not None else init_params(spec, train_set.schema, train_set, config.seed)
    n_train, n_deploy = len(train_set), len(deploy)
    batch_len = n_train if config.full_batch else config.batch.size
    cost = float(config.steps) * (batch_len + n_deploy) * w.p + float(config.steps) * batch_len * n_deploy * w.p
    if cost > NAIVE_BUDGET:
        raise ValueError(f"instance too large for the pairwise oracle (~{cost:.2g} flops); "
                         "use tracin_flows_online")
    checkpoints = []
    for t in range(config.steps):
        positions = sample_batch(config, n_train, t)
        grads = np.array([dense_grad(spec, w, train_set[p], counts) for p in positions])
        if not np.all(np.isfinite(grads)):
            raise DivergenceError(t, "gradient")
        if config.clip_norm is not None:
            for row in grads:
                norm = np.linalg.norm(row)
                if norm > config.clip_norm:
                    row *= config.clip_norm / norm
        eta = config.learning_rate / len(positions) if config.reduction == "mean" else config.learning_rate
        checkpoints.append((eta, positions, w.copy(), grads))
        w = w.like(w.flat - eta * grads.sum(axis=0))
    influence = np.zeros((n_train, n_deploy))
    for eta, positions, w_t, grads in checkpoints:
        deploy_grads = np.array([dense_grad(spec, w_t, z, counts) for z in deploy.examples])
        for row, pos in enumerate(positions):
            influence[pos] += eta * (deploy_grads @ grads[row])
    return influence


def flows_from_matrix(influence: np.ndarray, split: SplitPair, method: str) -> FlowLedger:
    """Aggregate a pairwise influence matrix (train x deploy) into a ledger."""
    population = split.population
    tc = _codes(population, split.train.individuals)
    dc = _codes(population, split.deploy.individuals)
    k = len(population)
    inflow = np.zeros(k)
    outflow = np.zeros(k)
    selfflow = np.zeros(k)
    for a in range(influence.shape[0]):
        for b in range(influence.shape[1]):
            v = influence[a, b]
            if tc[a] == dc[b]:
                selfflow[tc[a]] += v
            else:
                outflow[tc[a]] += v
                inflow[dc[b]] += v
    return FlowLedger(population, inflow, outflow, method, selfflow=selfflow,
                      n_train=_sizes(population, split.train), n_deploy=_sizes(population, split.deploy))


def tracin_flows_naive(spec: ModelSpec, split: SplitPair, config: TrainConfig,
                       init: Parameters | None = None) -> FlowLedger:
    influence = tracin_influence_matrix(spec, split, config, init)
    ledger = flows_from_matrix(influence, split, "tracin")
    ledger.extra["influence"] = influence
    return ledger


# ---------------------------------------------------------------------------
# Marginal (leave-one-out retraining)


def _deletion_units(split: SplitPair, granularity: Granularity):
    """(owner individual, training positions removed) for every deletion unit."""
    train_set = split.train
    if granularity is Granularity.INDIVIDUAL:
        index = train_set.individual_index
        return [(u, np.asarray(index[u])) for u in sorted(index)]
    return [(int(train_set.individuals[p]), np.array([p])) for p in range(len(train_set))]


def retrain_config(config: TrainConfig, train_size: int, hold_step: bool = True) -> TrainConfig:
    """Config used for a leave-out retraining on a training set of ``train_size``.

    With full-batch mean reduction the step per example is lr / |Z|, so
    shrinking Z would also enlarge every surviving example's step. That
    global speed-up is not an effect of the deleted data and, before
    convergence, it dominates the per-unit differences. ``hold_step`` keeps
    the per-example step at the full-set value, so a deletion removes exactly
    one term from the objective being descended. ``hold_step=False`` reruns
    the config verbatim.
    """
    if hold_step and config.full_batch and config.reduction == "mean":
        return replace(config, learning_rate=config.learning_rate / train_size, reduction="sum")
    return config


def _batched_dense_retrain(spec: ModelSpec, train_set: Dataset, init: Parameters,
                           config: TrainConfig, keep: np.ndarray) -> np.ndarray:
    """Full-batch descent for many reduced training sets at once.

    ``keep`` is a (units x n) 0/1 mask; row k trains on the examples it keeps.
    Returns the final parameter vectors, one row per unit.
    """
    xa = np.hstack([train_set.dense, np.ones((len(train_set), 1))])
    y = train_set.labels
    W = np.tile(init.flat, (keep.shape[0], 1))
    if config.reduction == "mean":
        eta = (config.learning_rate / keep.sum(axis=1))[:, None]
    else:
        eta = config.learning_rate
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(config.steps):
            s = W @ xa.T
            coef = (s - y) if spec.kind is ModelKind.LINEAR else (_sigmoid(s) - y)
            coef *= keep
            if not np.all(np.isfinite(coef)):
                raise DivergenceError(t, "gradient")
            W = W - eta * (coef @ xa)
    return W


def _retrain_one(args):
    spec, split, config, init, removed = args
    keep = np.ones(len(split.train), dtype=bool)
    keep[removed] = False
    if not keep.any():
        raise ValueError("deleting this unit leaves an empty training set")
    reduced = SplitPair(split.train.subset(np.flatnonzero(keep)), split.deploy, split.seed,
                        split.train_fraction)
    params, _ = train(spec, reduced, config, init=init)
    return params.flat


def marginal_flows(spec: ModelSpec, split: SplitPair, config: TrainConfig,
                   granularity: Granularity | str = Granularity.INDIVIDUAL,
                   init: Parameters | None = None, workers: int = 1,
                   max_units: int | None = None, hold_step: bool = True) -> FlowLedger:
    """Leave-one-unit-out flows.

    Every retraining starts from the full model's initialization and uses the
    same config (see ``retrain_config`` for ``hold_step``). Deployment losses
    of every model are evaluated with the regularization bookkeeping of the
    full training set.
    """
    granularity = Granularity(granularity)
    train_set = split.train
    units = _deletion_units(split, granularity)
    if granularity is Granularity.EXAMPLE and max_units is None:
        max_units = 5000
    if max_units is not None and len(units) > max_units:
        raise ValueError(f"{len(units)} deletion units exceed the limit of {max_units}")
    if len(units) == 1 and len(units[0][1]) == len(train_set):
        raise ValueError("deleting the only training unit leaves an empty training set")
    if init is None:
        init = init_params(spec, train_set.schema, train_set, config.seed)
    counts = train_index(spec, train_set)
    full_params, _ = train(spec, split, config, init=init)
    config = retrain_config(config, len(train_set), hold_step)
    deploy = BatchData(split.deploy)
    base = batch_losses(spec, full_params, deploy, counts)

    vectorized = (not spec.is_factorization and config.full_batch and config.clip_norm is None)
    if vectorized:
        keep = np.ones((len(units), len(train_set)))
        for k, (_, removed) in enumerate(units):
            keep[k, removed] = 0.0
        chunk = max(1, int(4e6 // max(len(train_set), 1)))
        finals = np.vstack([_batched_dense_retrain(spec, train_set, init, config, keep[a:a + chunk])
                            for a in range(0, len(units), chunk)])
    else:
        jobs = [(spec, split, config, init, removed) for _, removed in units]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                finals = np.vstack(list(pool.map(_retrain_one, jobs, chunksize=8)))
        else:
            finals = np.vstack([_retrain_one(job) for job in jobs])

    population = split.population
    k = len(population)
    deploy_codes = _codes(population, split.deploy.individuals)
    inflow = np.zeros(k)
    outflow = np.zeros(k)
    selfflow = np.zeros(k)
    for (owner, _), flat in zip(units, finals):
        delta = batch_losses(spec, full_params.like(flat), deploy, counts) - base
        if not np.all(np.isfinite(delta)):
            raise DivergenceError(config.steps, "deployment loss")
        owner_code = int(np.searchsorted(population, owner))
        per_individual = np.bincount(deploy_codes, weights=delta, minlength=k)
        own = per_individual[owner_code]
        outflow[owner_code] += per_individual.sum() - own
        selfflow[owner_code] += own
        per_individual[owner_code] = 0.0
        inflow += per_individual
    return FlowLedger(population, inflow, outflow, "marginal", selfflow=selfflow,
                      n_train=_sizes(population, train_set), n_deploy=_sizes(population, split.deploy))


def marginal_influence_matrix(spec: ModelSpec, split: SplitPair, config: TrainConfig,
                              init: Parameters | None = None, hold_step: bool = True) -> np.ndarray:
    """Per-example Marginal(z, z') by one retraining per training example (small instances)."""
    train_set = split.train
    if init is None:
        init = init_params(spec, train_set.schema, train_set, config.seed)
    counts = train_index(spec, train_set)
    full_params, _ = train(spec, split, config, init=init)
    base = np.array([loss_example(spec, full_params, z, counts) for z in split.deploy.examples])
    config = retrain_config(config, len(train_set), hold_step)
    out = np.zeros((len(train_set), len(split.deploy)))
    for p in range(len(train_set)):
        flat = _retrain_one((spec, split, config, init, np.array([p])))
        w = full_params.like(flat)
        out[p] = [loss_example(spec, w, z, counts) for z in split.deploy.examples] - base
    return out
