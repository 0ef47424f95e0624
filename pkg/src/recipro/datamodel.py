"""Core domain types: examples, datasets, splits and flow ledgers."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence, Union

import numpy as np

IndividualId = int


@dataclass(frozen=True)
class DenseSchema:
    dim: int


@dataclass(frozen=True)
class SparseSchema:
    num_users: int
    num_items: int


FeatureSchema = Union[DenseSchema, SparseSchema]


@dataclass(frozen=True)
class Example:
    """One labelled interaction.

    ``features`` is either a dense real vector or a ``(user_index, item_index)``
    pair for factorization models. Labels are always stored as floats.
    """

    individual: IndividualId
    features: Union[np.ndarray, tuple]
    label: float


def build_individual_index(examples: Sequence[Example]) -> dict[IndividualId, list[int]]:
    if len(examples) == 0:
        raise ValueError("empty dataset")
    index: dict[IndividualId, list[int]] = {}
    for pos, ex in enumerate(examples):
        index.setdefault(ex.individual, []).append(pos)
    return index


class Dataset:
    """Immutable ordered collection of examples sharing one feature schema.

    Columnar numpy views (``labels``, ``dense``, ``pairs``, ...) are built on
    first access; they assume the dataset passes :func:`validate_dataset`.
    ``source_positions`` records each example's position in the dataset it
    was split from and is the example identity used for split bookkeeping.
    """

    def __init__(self, examples: Iterable[Example], schema: FeatureSchema,
                 source_positions: Sequence[int] | None = None):
        self._examples = tuple(examples)
        self.schema = schema
        if source_positions is None:
            source_positions = np.arange(len(self._examples))
        self.source_positions = np.asarray(source_positions, dtype=np.int64)
        self.source_positions.setflags(write=False)
        if len(self.source_positions) != len(self._examples):
            raise ValueError("source_positions must align with examples")

    @classmethod
    def from_arrays(cls, individuals, features, labels, schema: FeatureSchema) -> "Dataset":
        individuals = np.asarray(individuals, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.float64)
        if isinstance(schema, SparseSchema):
            pairs = np.asarray(features, dtype=np.int64)
            examples = [Example(int(u), (int(a), int(b)), float(y))
                        for u, (a, b), y in zip(individuals, pairs, labels)]
        else:
            dense = np.asarray(features, dtype=np.float64)
            examples = [Example(int(u), row, float(y))
                        for u, row, y in zip(individuals, dense, labels)]
        return cls(examples, schema)

    @property
    def examples(self) -> tuple[Example, ...]:
        return self._examples

    def __len__(self) -> int:
        return len(self._examples)

    def __getitem__(self, pos: int) -> Example:
        return self._examples[pos]

    def __repr__(self) -> str:
        return f"Dataset(n={len(self)}, schema={self.schema})"

    @property
    def is_sparse(self) -> bool:
        return isinstance(self.schema, SparseSchema)

    @cached_property
    def individual_index(self) -> dict[IndividualId, list[int]]:
        return build_individual_index(self._examples)

    @cached_property
    def individuals(self) -> np.ndarray:
        out = np.fromiter((ex.individual for ex in self._examples), dtype=np.int64,
                          count=len(self))
        out.setflags(write=False)
        return out

    @cached_property
    def labels(self) -> np.ndarray:
        out = np.fromiter((ex.label for ex in self._examples), dtype=np.float64,
                          count=len(self))
        out.setflags(write=False)
        return out

    @cached_property
    def dense(self) -> np.ndarray:
        if self.is_sparse:
            raise TypeError("dataset has sparse (user, item) features")
        out = np.array([np.asarray(ex.features, dtype=np.float64) for ex in self._examples])
        out = out.reshape(len(self), self.schema.dim)
        out.setflags(write=False)
        return out

    @cached_property
    def pairs(self) -> np.ndarray:
        if not self.is_sparse:
            raise TypeError("dataset has dense features")
        out = np.array([ex.features for ex in self._examples], dtype=np.int64).reshape(len(self), 2)
        out.setflags(write=False)
        return out

    def subset(self, positions: Sequence[int]) -> "Dataset":
        positions = np.asarray(positions, dtype=np.int64)
        return Dataset((self._examples[p] for p in positions), self.schema,
                       self.source_positions[positions])

    def with_features(self, dense: np.ndarray) -> "Dataset":
        """Same examples with replaced dense feature rows."""
        if self.is_sparse:
            raise TypeError("dataset has sparse (user, item) features")
        dense = np.asarray(dense, dtype=np.float64)
        examples = [Example(ex.individual, row, ex.label)
                    for ex, row in zip(self._examples, dense)]
        return Dataset(examples, DenseSchema(dense.shape[1]), self.source_positions)


def validate_dataset(d: Dataset) -> list[str]:
    """Return human-readable invariant violations; empty when the dataset is sound."""
    problems: list[str] = []
    if len(d) == 0:
        return ["empty dataset"]
    schema = d.schema
    for pos, ex in enumerate(d.examples):
        if not np.isfinite(ex.label):
            problems.append(f"non-finite label at {pos}")
        if isinstance(schema, SparseSchema):
            feats = ex.features
            if len(feats) != 2:
                problems.append(f"expected (user, item) pair at {pos}")
                continue
            user, item = feats
            if not 0 <= user < schema.num_users:
                problems.append(f"user index out of vocabulary at {pos}")
            if not 0 <= item < schema.num_items:
                problems.append(f"item index out of vocabulary at {pos}")
        else:
            x = np.asarray(ex.features, dtype=np.float64)
            if x.ndim != 1 or x.shape[0] != schema.dim:
                problems.append(f"dimension mismatch at {pos}")
            elif not np.all(np.isfinite(x)):
                problems.append(f"non-finite feature at {pos}")
    covered = sorted(p for plist in d.individual_index.values() for p in plist)
    if covered != list(range(len(d))):
        problems.append("individual index does not cover every example exactly once")
    return problems


@dataclass(frozen=True)
class SplitPair:
    train: Dataset
    deploy: Dataset
    seed: int
    train_fraction: float

    @cached_property
    def population(self) -> np.ndarray:
        """Sorted ids of every individual appearing on either side."""
        return np.union1d(self.train.individuals, self.deploy.individuals)


METHODS = ("tracin", "marginal")


@dataclass
class FlowLedger:
    """Per-individual inflow/outflow for one run.

    Flows are in loss-reduction units, positive when beneficial. ``n_train`` and
    ``n_deploy`` count each individual's examples on each side: inflow is only
    meaningful where ``n_deploy > 0`` and outflow where ``n_train > 0`` (the
    stored value is the empty sum, 0, otherwise).
    """

    individuals: np.ndarray
    inflow: np.ndarray
    outflow: np.ndarray
    method: str
    selfflow: np.ndarray | None = None
    n_train: np.ndarray | None = None
    n_deploy: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.individuals = np.asarray(self.individuals, dtype=np.int64)
        self.inflow = np.asarray(self.inflow, dtype=np.float64)
        self.outflow = np.asarray(self.outflow, dtype=np.float64)
        k = len(self.individuals)
        if self.inflow.shape != (k,) or self.outflow.shape != (k,):
            raise ValueError("inflow and outflow must have one entry per individual")
        if self.method not in METHODS:
            raise ValueError(f"unknown influence method {self.method!r}")
        if self.n_train is None:
            self.n_train = np.ones(k, dtype=np.int64)
        if self.n_deploy is None:
            self.n_deploy = np.ones(k, dtype=np.int64)
        self.n_train = np.asarray(self.n_train, dtype=np.int64)
        self.n_deploy = np.asarray(self.n_deploy, dtype=np.int64)
        if self.selfflow is not None:
            self.selfflow = np.asarray(self.selfflow, dtype=np.float64)
        if not (np.all(np.isfinite(self.inflow)) and np.all(np.isfinite(self.outflow))):
            raise ValueError("flow values must be finite")

    def __len__(self) -> int:
        return len(self.individuals)

    @property
    def has_inflow(self) -> np.ndarray:
        return self.n_deploy > 0

    @property
    def has_outflow(self) -> np.ndarray:
        return self.n_train > 0

    def as_dict(self) -> dict[IndividualId, tuple[float, float]]:
        return {int(u): (float(i), float(o))
                for u, i, o in zip(self.individuals, self.inflow, self.outflow)}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["individual_id", "inflow", "outflow", "selfflow", "method",
                        "n_train", "n_deploy"])
            for k, u in enumerate(self.individuals):
                self_val = "" if self.selfflow is None else _fmt(self.selfflow[k])
                w.writerow([int(u), _fmt(self.inflow[k]), _fmt(self.outflow[k]), self_val,
                            self.method, int(self.n_train[k]), int(self.n_deploy[k])])

    @classmethod
    def from_csv(cls, path) -> "FlowLedger":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path}: ledger has no rows")
        methods = {r["method"] for r in rows}
        if len(methods) != 1:
            raise ValueError(f"{path}: mixed influence methods {sorted(methods)}")
        selfflow = None
        if all(r.get("selfflow") not in (None, "") for r in rows):
            selfflow = [float(r["selfflow"]) for r in rows]
        return cls(
            individuals=[int(r["individual_id"]) for r in rows],
            inflow=[float(r["inflow"]) for r in rows],
            outflow=[float(r["outflow"]) for r in rows],
            method=methods.pop(),
            selfflow=selfflow,
            n_train=[int(r.get("n_train") or 1) for r in rows],
            n_deploy=[int(r.get("n_deploy") or 1) for r in rows],
        )


def _fmt(x: float) -> str:
    return repr(float(x))
