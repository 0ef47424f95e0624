"""Linear, logistic and matrix-factorization models behind one loss/gradient interface.

Parameters of every model live in a single flat vector. Dense models store
``[weights..., bias]``; factorization stores the user matrix P then the item
matrix Q, both row-major.

Two gradient routes are provided: :func:`grad_example` differentiates one
example at a time and is kept deliberately simple, while :func:`grad_block`
produces all per-example gradients of a batch at once in row-sparse form for
the training loop and the online flow engine.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .datamodel import Dataset, DenseSchema, Example, FeatureSchema, SparseSchema

LOGIT_CLAMP = 1e-6


class ModelKind(str, enum.Enum):
    LINEAR = "linear"
    LOGISTIC = "logistic"
    MF = "mf"


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind
    embedding_dim: int = 16
    reg: float = 1.0
    init_scale: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")
        if self.reg < 0:
            raise ValueError("reg must be >= 0")
        if self.init_scale < 0:
            raise ValueError("init_scale must be >= 0")

    @property
    def is_factorization(self) -> bool:
        return self.kind is ModelKind.MF


@dataclass
class Parameters:
    flat: np.ndarray
    kind: ModelKind
    shape: tuple  # (num_users, num_items, dim) for MF, (dim,) for dense models

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.size_for(self.kind, self.shape),):
            raise ValueError(f"parameter vector has wrong length for {self.kind.value} {self.shape}")

    @staticmethod
    def size_for(kind: ModelKind, shape: tuple) -> int:
        if kind is ModelKind.MF:
            nu, ni, d = shape
            return (nu + ni) * d
        return shape[0] + 1

    @property
    def p(self) -> int:
        return self.flat.shape[0]

    @property
    def P(self) -> np.ndarray:
        nu, _, d = self.shape
        return self.flat[: nu * d].reshape(nu, d)

    @property
    def Q(self) -> np.ndarray:
        nu, ni, d = self.shape
        return self.flat[nu * d:].reshape(ni, d)

    @property
    def weights(self) -> np.ndarray:
        return self.flat[:-1]

    @property
    def bias(self) -> float:
        return float(self.flat[-1])

    def copy(self) -> "Parameters":
        return Parameters(self.flat.copy(), self.kind, self.shape)

    def like(self, flat: np.ndarray) -> "Parameters":
        return Parameters(flat, self.kind, self.shape)


@dataclass(frozen=True)
class FactorCounts:
    """Training-set occurrence counts |Z_u| and |Z_i| used to split regularization."""

    user_counts: np.ndarray
    item_counts: np.ndarray

    @cached_property
    def user_reg_weight(self) -> np.ndarray:
        c = self.user_counts
        return np.divide(1.0, c, out=np.zeros(len(c)), where=c > 0)

    @cached_property
    def item_reg_weight(self) -> np.ndarray:
        c = self.item_counts
        return np.divide(1.0, c, out=np.zeros(len(c)), where=c > 0)


def train_index(spec: ModelSpec, train: Dataset) -> FactorCounts | None:
    if not spec.is_factorization:
        return None
    schema = train.schema
    pairs = train.pairs
    return FactorCounts(np.bincount(pairs[:, 0], minlength=schema.num_users),
                        np.bincount(pairs[:, 1], minlength=schema.num_items))


def _check_schema(spec: ModelSpec, schema: FeatureSchema) -> None:
    if spec.is_factorization != isinstance(schema, SparseSchema):
        raise ValueError(f"{spec.kind.value} model is incompatible with schema {schema}")


def init_params(spec: ModelSpec, schema: FeatureSchema, train: Dataset, seed: int) -> Parameters:
    _check_schema(spec, schema)
    if spec.is_factorization:
        shape = (schema.num_users, schema.num_items, spec.embedding_dim)
        rng = np.random.default_rng(seed)
        flat = rng.normal(0.0, spec.init_scale, size=Parameters.size_for(spec.kind, shape))
        return Parameters(flat, spec.kind, shape)
    flat = np.zeros(schema.dim + 1)
    labels = train.labels
    if spec.kind is ModelKind.LINEAR:
        flat[-1] = labels.mean()
    else:
        rate = labels.mean()
        if rate <= 0.0 or rate >= 1.0:
            warnings.warn("training labels contain a single class; clamping the base rate",
                          RuntimeWarning, stacklevel=2)
        rate = min(max(rate, LOGIT_CLAMP), 1.0 - LOGIT_CLAMP)
        flat[-1] = math.log(rate / (1.0 - rate))
    return Parameters(flat, spec.kind, (schema.dim,))


def _sigmoid(s):
    return 0.5 * (1.0 + np.tanh(0.5 * s))


# ---------------------------------------------------------------------------
# per-example route


@dataclass(frozen=True)
class SparseGradient:
    """Gradient of one factorization example; nonzero only on rows p_u and q_i."""

    user_index: int
    item_index: int
    user_grad: np.ndarray
    item_grad: np.ndarray

    def to_dense(self, w: Parameters) -> np.ndarray:
        out = np.zeros(w.p)
        nu, _, d = w.shape
        out[self.user_index * d:(self.user_index + 1) * d] += self.user_grad
        start = nu * d + self.item_index * d
        out[start:start + d] += self.item_grad
        return out


def _score(w: Parameters, x) -> float:
    return float(np.dot(w.weights, np.asarray(x, dtype=np.float64)) + w.bias)


def predict(spec: ModelSpec, w: Parameters, x) -> float:
    if spec.is_factorization:
        u, i = x
        return float(np.dot(w.P[u], w.Q[i]))
    s = _score(w, x)
    if spec.kind is ModelKind.LOGISTIC:
        return float(_sigmoid(s))
    return s


def loss_example(spec: ModelSpec, w: Parameters, z: Example, counts: FactorCounts | None = None) -> float:
    if spec.is_factorization:
        u, i = z.features
        pu, qi = w.P[u], w.Q[i]
        resid = float(np.dot(pu, qi)) - z.label
        reg = 0.0
        if counts is not None and spec.reg > 0:
            if counts.user_counts[u] > 0:
                reg += spec.reg / counts.user_counts[u] * float(np.dot(pu, pu))
            if counts.item_counts[i] > 0:
                reg += spec.reg / counts.item_counts[i] * float(np.dot(qi, qi))
        return 0.5 * (resid * resid + reg)
    s = _score(w, z.features)
    if spec.kind is ModelKind.LINEAR:
        return 0.5 * (s - z.label) ** 2
    # log(1 + e^s) - y s, stable for large |s|
    return float(np.logaddexp(0.0, s) - z.label * s)


def grad_example(spec: ModelSpec, w: Parameters, z: Example, counts: FactorCounts | None = None):
    if spec.is_factorization:
        u, i = z.features
        pu, qi = w.P[u], w.Q[i]
        resid = float(np.dot(pu, qi)) - z.label
        gu = resid * qi
        gi = resid * pu
        if counts is not None and spec.reg > 0:
            if counts.user_counts[u] > 0:
                gu = gu + spec.reg / counts.user_counts[u] * pu
            if counts.item_counts[i] > 0:
                gi = gi + spec.reg / counts.item_counts[i] * qi
        return SparseGradient(int(u), int(i), np.array(gu), np.array(gi))
    x = np.asarray(z.features, dtype=np.float64)
    s = _score(w, x)
    coef = s - z.label if spec.kind is ModelKind.LINEAR else float(_sigmoid(s)) - z.label
    return np.append(coef * x, coef)


def dense_grad(spec: ModelSpec, w: Parameters, z: Example, counts: FactorCounts | None = None) -> np.ndarray:
    g = grad_example(spec, w, z, counts)
    return g.to_dense(w) if isinstance(g, SparseGradient) else g


# ---------------------------------------------------------------------------
# batched route


@dataclass
class GradPart:
    """Per-example gradient rows restricted to one parameter block.

    Example ``k`` contributes ``values[k] + reg_coef[k] * own[rows[k]]`` to row
    ``rows[k]`` of a block of shape ``(nrows, width)`` starting at ``offset``
    in the flat vector. ``own`` is the current parameter block itself, so the
    weight-decay share of a gradient is carried as one scalar per example.
    """

    offset: int
    nrows: int
    rows: np.ndarray
    values: np.ndarray
    reg_coef: np.ndarray | None = None
    own: np.ndarray | None = None

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def block_of(self, flat: np.ndarray) -> np.ndarray:
        return flat[self.offset:self.offset + self.nrows * self.width].reshape(self.nrows, self.width)

    def materialized(self) -> np.ndarray:
        if self.reg_coef is None:
            return self.values
        return self.values + self.reg_coef[:, None] * np.take(self.own, self.rows, axis=0)


def _row_sum_matrix(rows: np.ndarray, nrows: int) -> sp.csr_matrix:
    n = len(rows)
    return sp.csr_matrix((np.ones(n), (rows, np.arange(n))), shape=(nrows, n))


@dataclass
class GradBlock:
    """All per-example gradients of one batch, row-sparse."""

    parts: list
    n: int
    p: int

    def sq_norms(self) -> np.ndarray:
        out = np.zeros(self.n)
        for part in self.parts:
            g = part.materialized()
            out += np.einsum("ij,ij->i", g, g)
        return out

    def scaled(self, factors: np.ndarray) -> "GradBlock":
        parts = []
        for pt in self.parts:
            reg = None if pt.reg_coef is None else pt.reg_coef * factors
            parts.append(GradPart(pt.offset, pt.nrows, pt.rows, pt.values * factors[:, None], reg, pt.own))
        return GradBlock(parts, self.n, self.p)

    def total(self, summers: Sequence[sp.csr_matrix | None] | None = None) -> np.ndarray:
        """Sum of all per-example gradients as a flat vector."""
        out = np.zeros(self.p)
        for k, part in enumerate(self.parts):
            blk = part.block_of(out)
            if part.nrows == 1:
                blk[0] = part.values.sum(axis=0)
                if part.reg_coef is not None:
                    blk[0] += part.reg_coef.sum() * part.own[0]
                continue
            S = summers[k] if summers is not None and summers[k] is not None \
                else _row_sum_matrix(part.rows, part.nrows)
            blk[:] = S @ part.values
            if part.reg_coef is not None:
                blk += (S @ part.reg_coef)[:, None] * part.own
        return out

    def dot(self, flat: np.ndarray) -> np.ndarray:
        """Per-example dot product with a flat vector."""
        out = np.zeros(self.n)
        for part in self.parts:
            blk = part.block_of(flat)
            if part.nrows == 1:
                out += part.values @ blk[0]
            else:
                out += np.einsum("ij,ij->i", part.values, np.take(blk, part.rows, axis=0))
            if part.reg_coef is not None:
                row_dots = np.einsum("ij,ij->i", part.own, blk)
                out += part.reg_coef * np.take(row_dots, part.rows)
        return out

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.p))
        for part in self.parts:
            cols = part.offset + part.rows[:, None] * part.width + np.arange(part.width)
            np.add.at(out, (np.arange(self.n)[:, None], cols), part.materialized())
        return out


class GroupPairPlan:
    """Precomputed grouping for sum_g (sum_{z in A, grp z = g} grad z) . (sum_{z' in B, grp z' = g} grad z').

    Only (group, parameter-row) cells touched by both sides contribute, so the
    plan keeps just those cells and a summation matrix per side.
    """

    def __init__(self, rows_a: Sequence[np.ndarray], groups_a: np.ndarray,
                 rows_b: Sequence[np.ndarray], groups_b: np.ndarray,
                 nrows: Sequence[int], ngroups: int):
        self.ngroups = ngroups
        self.cells = []
        for ra, rb, nr in zip(rows_a, rows_b, nrows):
            key_a = groups_a.astype(np.int64) * nr + ra
            key_b = groups_b.astype(np.int64) * nr + rb
            shared = np.intersect1d(key_a, key_b)
            if len(shared) == 0:
                self.cells.append(None)
                continue
            self.cells.append((self._summer(key_a, shared), self._summer(key_b, shared),
                               shared // nr, shared % nr))

    @staticmethod
    def _summer(keys: np.ndarray, shared: np.ndarray) -> sp.csr_matrix:
        pos = np.minimum(np.searchsorted(shared, keys), len(shared) - 1)
        hit = shared[pos] == keys
        cols = np.flatnonzero(hit)
        return sp.csr_matrix((np.ones(len(cols)), (pos[hit], cols)), shape=(len(shared), len(keys)))

    @staticmethod
    def _cell_sums(S, part: GradPart, cell_rows: np.ndarray) -> np.ndarray:
        sums = S @ part.values
        if part.reg_coef is not None:
            sums = sums + (S @ part.reg_coef)[:, None] * part.own[cell_rows]
        return sums

    def group_dot(self, a: GradBlock, b: GradBlock) -> np.ndarray:
        out = np.zeros(self.ngroups)
        for cell, pa, pb in zip(self.cells, a.parts, b.parts):
            if cell is None:
                continue
            Sa, Sb, grp, cell_rows = cell
            prod = np.einsum("ij,ij->i", self._cell_sums(Sa, pa, cell_rows),
                             self._cell_sums(Sb, pb, cell_rows))
            out += np.bincount(grp, weights=prod, minlength=self.ngroups)
        return out


class BatchData:
    """Column arrays for a fixed selection of dataset positions."""

    def __init__(self, d: Dataset, positions: np.ndarray | None = None):
        self.dataset = d
        if positions is None:
            positions = np.arange(len(d))
        self.positions = np.asarray(positions, dtype=np.int64)
        self.labels = d.labels[self.positions]
        self.individuals = d.individuals[self.positions]
        if d.is_sparse:
            pairs = d.pairs[self.positions]
            self.users = np.ascontiguousarray(pairs[:, 0])
            self.items = np.ascontiguousarray(pairs[:, 1])
            self.x = None
        else:
            self.x = d.dense[self.positions]
            self.users = self.items = None
        self._summer_cache: dict = {}

    def __len__(self) -> int:
        return len(self.positions)

    def row_index(self, w: Parameters) -> list:
        """Parameter-block row touched by each example, per gradient part."""
        if w.kind is ModelKind.MF:
            return [self.users, self.items]
        return [np.zeros(len(self), dtype=np.int64)]

    def summers(self, w: Parameters) -> list:
        key = w.shape
        if key not in self._summer_cache:
            if w.kind is ModelKind.MF:
                nu, ni, _ = w.shape
                self._summer_cache[key] = [_row_sum_matrix(self.users, nu),
                                           _row_sum_matrix(self.items, ni)]
            else:
                self._summer_cache[key] = [None]
        return self._summer_cache[key]


def batch_losses(spec: ModelSpec, w: Parameters, data: BatchData,
                 counts: FactorCounts | None = None) -> np.ndarray:
    return _forward(spec, w, data, counts)[0]


def grad_block(spec: ModelSpec, w: Parameters, data: BatchData,
               counts: FactorCounts | None = None) -> tuple[GradBlock, np.ndarray]:
    """Per-example gradients of a batch together with the per-example losses."""
    losses, parts = _forward(spec, w, data, counts, want_grad=True)
    return GradBlock(parts, len(data), w.p), losses


def _forward(spec, w, data, counts, want_grad=False):
    if spec.is_factorization:
        nu, ni, d = w.shape
        P, Q = w.P, w.Q
        pu = np.take(P, data.users, axis=0)
        qi = np.take(Q, data.items, axis=0)
        resid = np.einsum("ij,ij->i", pu, qi) - data.labels
        losses = resid * resid
        cu = ci = None
        if counts is not None and spec.reg > 0:
            cu = spec.reg * np.take(counts.user_reg_weight, data.users)
            ci = spec.reg * np.take(counts.item_reg_weight, data.items)
            pn2 = np.einsum("ij,ij->i", P, P)
            qn2 = np.einsum("ij,ij->i", Q, Q)
            losses += cu * np.take(pn2, data.users) + ci * np.take(qn2, data.items)
        losses *= 0.5
        if not want_grad:
            return losses, None
        qi *= resid[:, None]
        pu *= resid[:, None]
        return losses, [GradPart(0, nu, data.users, qi, cu, P if cu is not None else None),
                        GradPart(nu * d, ni, data.items, pu, ci, Q if ci is not None else None)]
    s = data.x @ w.weights + w.bias
    if spec.kind is ModelKind.LINEAR:
        coef = s - data.labels
        losses = 0.5 * coef * coef
    else:
        losses = np.logaddexp(0.0, s) - data.labels * s
        coef = _sigmoid(s) - data.labels
    if not want_grad:
        return losses, None
    values = np.empty((len(data), w.p))
    values[:, :-1] = coef[:, None] * data.x
    values[:, -1] = coef
    return losses, [GradPart(0, 1, np.zeros(len(data), dtype=np.int64), values)]


def batch_predict(spec: ModelSpec, w: Parameters, data: BatchData) -> np.ndarray:
    if spec.is_factorization:
        return np.einsum("ij,ij->i", w.P[data.users], w.Q[data.items])
    s = data.x @ w.weights + w.bias
    return _sigmoid(s) if spec.kind is ModelKind.LOGISTIC else s


def dataset_loss(spec: ModelSpec, w: Parameters, d: Dataset, counts: FactorCounts | None = None) -> float:
    """Total (summed) loss over a dataset."""
    return float(batch_losses(spec, w, BatchData(d), counts).sum())


def dataset_rmse(spec: ModelSpec, w: Parameters, d: Dataset) -> float:
    if len(d) == 0:
        raise ValueError("empty dataset")
    if spec.kind is ModelKind.LOGISTIC:
        raise ValueError("RMSE is defined for regression-style models only")
    err = batch_predict(spec, w, BatchData(d)) - d.labels
    return float(np.sqrt(np.mean(err * err)))


def check_compatible(spec: ModelSpec, schema: FeatureSchema) -> None:
    _check_schema(spec, schema)
    if isinstance(schema, DenseSchema) and schema.dim < 1:
        raise ValueError("dense schema needs at least one feature")
