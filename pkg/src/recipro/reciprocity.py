"""Reciprocity statistics over flow ledgers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .datamodel import FlowLedger

P_GRID = (0.5, 0.75, 0.9, 0.95)
SNR_PERCENTILES = (10, 50, 90)
SCORE_BIN_EDGES = tuple(np.round(np.linspace(0.0, 1.0, 21), 10))
SNR_BIN_EDGES = (0.0, 0.1, 0.25, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0,
                 1000.0, math.inf)


def reciprocity_score(inflow: float, outflow: float) -> float:
    """min(I/O, O/I) when signs agree, 0 when they differ, 1 when both vanish."""
    if not (math.isfinite(inflow) and math.isfinite(outflow)):
        raise ValueError("flows must be finite")
    if inflow == 0.0 and outflow == 0.0:
        return 1.0
    if np.sign(inflow) != np.sign(outflow):
        return 0.0
    a, b = abs(inflow), abs(outflow)
    return min(a, b) / max(a, b)


def reciprocity_scores(inflow, outflow) -> np.ndarray:
    inflow = np.asarray(inflow, dtype=np.float64)
    outflow = np.asarray(outflow, dtype=np.float64)
    a, b = np.abs(inflow), np.abs(outflow)
    hi = np.maximum(a, b)
    ratio = np.divide(np.minimum(a, b), hi, out=np.ones_like(hi), where=hi > 0)
    return np.where(np.sign(inflow) == np.sign(outflow), ratio, 0.0)


def p_alpha(scores, p: float) -> float:
    """Largest alpha such that at least a fraction p of individuals score >= alpha."""
    scores = np.sort(np.asarray(scores, dtype=np.float64))
    if len(scores) == 0:
        raise ValueError("no reciprocity scores")
    if not 0.0 < p <= 1.0:
        raise ValueError("p must lie in (0, 1]")
    n = len(scores)
    # need n - k >= p*n individuals at or above scores[k]
    k = int(math.floor(n - p * n + 1e-9))
    return float(scores[min(max(k, 0), n - 1)])


def flow_correlation(ledger: FlowLedger) -> float:
    mask = ledger.has_inflow & ledger.has_outflow
    inflow, outflow = ledger.inflow[mask], ledger.outflow[mask]
    if len(inflow) < 2 or np.ptp(inflow) == 0 or np.ptp(outflow) == 0:
        raise ValueError("undefined correlation: fewer than two individuals or constant flows")
    return float(np.corrcoef(inflow, outflow)[0, 1])


def negative_flow_fractions(ledger: FlowLedger) -> tuple[float, float]:
    if len(ledger) == 0:
        raise ValueError("empty ledger")
    inflow = ledger.inflow[ledger.has_inflow]
    outflow = ledger.outflow[ledger.has_outflow]
    neg_in = float(np.mean(inflow < 0)) if len(inflow) else 0.0
    neg_out = float(np.mean(outflow < 0)) if len(outflow) else 0.0
    return neg_in, neg_out


def aggregate_ledgers(ledgers: Sequence[FlowLedger]) -> FlowLedger:
    """Per-individual mean flows, each side averaged over the ledgers where it is defined.

    ``n_train``/``n_deploy`` of the result count the ledgers contributing to
    outflow/inflow respectively.
    """
    if not ledgers:
        raise ValueError("no ledgers to aggregate")
    methods = {lg.method for lg in ledgers}
    if len(methods) != 1:
        raise ValueError(f"cannot aggregate mixed methods {sorted(methods)}")
    population = np.unique(np.concatenate([lg.individuals for lg in ledgers]))
    k = len(population)
    sums = {name: np.zeros(k) for name in ("in", "out", "self")}
    n_in = np.zeros(k, dtype=np.int64)
    n_out = np.zeros(k, dtype=np.int64)
    n_self = np.zeros(k, dtype=np.int64)
    have_self = all(lg.selfflow is not None for lg in ledgers)
    # sort by a stable key so the result does not depend on list order
    for lg in sorted(ledgers, key=_ledger_key):
        idx = np.searchsorted(population, lg.individuals)
        hi, ho = lg.has_inflow, lg.has_outflow
        np.add.at(sums["in"], idx[hi], lg.inflow[hi])
        np.add.at(n_in, idx[hi], 1)
        np.add.at(sums["out"], idx[ho], lg.outflow[ho])
        np.add.at(n_out, idx[ho], 1)
        if have_self:
            both = hi & ho
            np.add.at(sums["self"], idx[both], lg.selfflow[both])
            np.add.at(n_self, idx[both], 1)
    inflow = np.divide(sums["in"], n_in, out=np.zeros(k), where=n_in > 0)
    outflow = np.divide(sums["out"], n_out, out=np.zeros(k), where=n_out > 0)
    selfflow = np.divide(sums["self"], n_self, out=np.zeros(k), where=n_self > 0) if have_self else None
    return FlowLedger(population, inflow, outflow, methods.pop(), selfflow=selfflow,
                      n_train=n_out, n_deploy=n_in)


def _ledger_key(lg: FlowLedger):
    return (lg.individuals.tobytes(), lg.inflow.tobytes(), lg.outflow.tobytes())


@dataclass
class SnrReport:
    individuals: np.ndarray
    outflow_snr: np.ndarray
    inflow_snr: np.ndarray
    excluded_outflow: int = 0
    excluded_inflow: int = 0

    def percentiles(self, which: str = "outflow", qs=SNR_PERCENTILES) -> dict:
        values = self.outflow_snr if which == "outflow" else self.inflow_snr
        values = values[~np.isnan(values)]
        if len(values) == 0:
            return {int(q): float("nan") for q in qs}
        return {int(q): float(np.percentile(values, q)) for q in qs}

    def median(self, which: str = "outflow") -> float:
        values = self.outflow_snr if which == "outflow" else self.inflow_snr
        return float(np.nanmedian(values))


def _snr(values: np.ndarray) -> float:
    mean = values.mean()
    std = values.std(ddof=1)
    if std == 0:
        return math.inf if mean != 0 else 0.0
    return abs(mean) / std


def snr(ledgers: Sequence[FlowLedger]) -> SnrReport:
    """|mean| / sample std of each individual's flows across ledgers.

    Individuals with fewer than two appearances on a side get NaN for that
    side and are counted in ``excluded_*``.
    """
    if len(ledgers) < 2:
        raise ValueError("SNR needs at least two ledgers")
    population = np.unique(np.concatenate([lg.individuals for lg in ledgers]))
    per_out = {int(u): [] for u in population}
    per_in = {int(u): [] for u in population}
    for lg in ledgers:
        for u, i, o, hi, ho in zip(lg.individuals, lg.inflow, lg.outflow, lg.has_inflow, lg.has_outflow):
            if ho:
                per_out[int(u)].append(o)
            if hi:
                per_in[int(u)].append(i)

    def side(table):
        out = np.full(len(population), np.nan)
        excluded = 0
        for k, u in enumerate(population):
            vals = np.asarray(table[int(u)])
            if len(vals) < 2:
                excluded += 1
                continue
            out[k] = _snr(vals)
        return out, excluded

    out_snr, ex_out = side(per_out)
    in_snr, ex_in = side(per_in)
    return SnrReport(population, out_snr, in_snr, ex_out, ex_in)


@dataclass
class ReciprocityReport:
    method: str
    individuals: np.ndarray
    scores: np.ndarray
    p_alpha_curve: list
    correlation: float
    negative_inflow_fraction: float
    negative_outflow_fraction: float
    n_excluded: int = 0
    snr: SnrReport | None = None
    extra: dict = field(default_factory=dict)

    def alpha(self, p: float) -> float:
        return p_alpha(self.scores, p)


def reciprocity_report(ledger: FlowLedger, snr_report: SnrReport | None = None,
                       p_grid=P_GRID) -> ReciprocityReport:
    """Scores for individuals with both flows defined, plus aggregate statistics."""
    mask = ledger.has_inflow & ledger.has_outflow
    scores = reciprocity_scores(ledger.inflow[mask], ledger.outflow[mask])
    try:
        corr = flow_correlation(ledger)
    except ValueError:
        corr = float("nan")
    neg_in, neg_out = negative_flow_fractions(ledger)
    curve = [(p, p_alpha(scores, p)) for p in p_grid] if len(scores) else []
    return ReciprocityReport(ledger.method, ledger.individuals[mask], scores, curve, corr,
                             neg_in, neg_out, n_excluded=int((~mask).sum()), snr=snr_report)


def histogram(values, edges) -> list[tuple[float, float, int]]:
    values = np.asarray(values, dtype=np.float64)
    values = values[~np.isnan(values)]
    edges = np.asarray(edges, dtype=np.float64)
    # right-closed last bin so that a score of exactly 1 is counted
    idx = np.searchsorted(edges, values, side="right") - 1
    idx = np.where(values == edges[-1], len(edges) - 2, idx)
    counts = np.bincount(idx[(idx >= 0) & (idx < len(edges) - 1)], minlength=len(edges) - 1)
    return [(float(edges[k]), float(edges[k + 1]), int(counts[k])) for k in range(len(edges) - 1)]
