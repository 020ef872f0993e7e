"""CSV interchange formats and the data preparation built on them.

Three UTF-8, comma-separated schemas are read and written:

* moment tables   ``experiment_id,metric_id,time_index,arm_id,mean,variance,n``
* unit outcomes   ``unit_id,arm_id,outcome,cluster_id,x0,...,x{p-1}``
* site summaries  ``site_id,mean,variance,n,significance``

Parsers either return everything or raise :class:`IngestionError` carrying the
1-based line number of the first bad row. Floats are written with 17
significant digits, so write-then-parse reproduces values exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .environments import EpochSchedule, MomentTable, SiteData, make_personalization_env
from .errors import ConfigError, IngestionError, InvalidInputError
from .linear_model import design_reset, design_update, ols_estimate

MOMENT_HEADER = ("experiment_id", "metric_id", "time_index", "arm_id", "mean", "variance", "n")
UNIT_HEADER_PREFIX = ("unit_id", "arm_id", "outcome", "cluster_id")
SUMMARY_HEADER = ("site_id", "mean", "variance", "n", "significance")

# two-sided critical |z| for each significance marker; "" is a conservative |z| >= 1
SIGNIFICANCE_Z = {"": 1.0, "*": 1.96, "**": 2.576, "***": 3.291}

IMPUTE_RIDGE = 1e-6


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def _float(text: str, what: str, line: int) -> float:
    try:
        val = float(text)
    except ValueError:
        raise IngestionError(f"{what} {text!r} is not a number", line) from None
    if not math.isfinite(val):
        raise IngestionError(f"{what} must be finite", line)
    return val


def _int(text: str, what: str, line: int) -> int:
    try:
        return int(text)
    except ValueError:
        raise IngestionError(f"{what} {text!r} is not an integer", line) from None


def _rows(path, header_check):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError("empty file", 1) from None
        header_check(header)
        for row in reader:
            if not row:
                continue
            yield reader.line_num, header, row


# -- moment tables -------------------------------------------------------------


@dataclass(frozen=True)
class MomentRow:
    experiment_id: str
    metric_id: str
    time_index: int
    arm_id: str
    mean: float
    variance: float
    n: int


@dataclass(frozen=True, eq=False)
class MomentData:
    """One (experiment, metric) group as a dense table."""

    experiment_id: str
    metric_id: str
    times: tuple
    arm_ids: tuple
    table: MomentTable
    n: np.ndarray

    def rows(self) -> list:
        out = []
        for i, t in enumerate(self.times):
            for j, arm in enumerate(self.arm_ids):
                out.append(
                    MomentRow(
                        self.experiment_id,
                        self.metric_id,
                        t,
                        arm,
                        float(self.table.means[i, j]),
                        float(self.table.vars[i, j]),
                        int(self.n[i, j]),
                    )
                )
        return out


def _check_moment_header(header):
    if tuple(header) != MOMENT_HEADER:
        raise IngestionError(f"header must be {','.join(MOMENT_HEADER)}", 1)


def read_moment_rows(path) -> list:
    rows = []
    seen = {}
    for line, _, row in _rows(path, _check_moment_header):
        if len(row) != len(MOMENT_HEADER):
            raise IngestionError(f"expected {len(MOMENT_HEADER)} fields, got {len(row)}", line)
        exp, metric, t, arm, mean, var, n = row
        t = _int(t, "time_index", line)
        if t < 0:
            raise IngestionError("time_index must be >= 0", line)
        mean = _float(mean, "mean", line)
        var = _float(var, "variance", line)
        if var <= 0:
            raise IngestionError(f"variance must be > 0, got {var}", line)
        n = _int(n, "n", line)
        if n <= 0:
            raise IngestionError(f"n must be > 0, got {n}", line)
        key = (exp, metric, t, arm)
        if key in seen:
            raise IngestionError(f"duplicate key {key} (first on line {seen[key]})", line)
        seen[key] = line
        rows.append(MomentRow(exp, metric, t, arm, mean, var, n))
    return rows


def parse_moment_csv(path) -> dict:
    """``{(experiment_id, metric_id): MomentData}`` with time-sorted rows.

    Arms keep their first-appearance order within each group. A group with
    any missing (time, arm) cell is rejected.
    """
    groups: dict = {}
    for r in read_moment_rows(path):
        groups.setdefault((r.experiment_id, r.metric_id), []).append(r)
    out = {}
    for key, rows in groups.items():
        times = sorted({r.time_index for r in rows})
        arms = list(dict.fromkeys(r.arm_id for r in rows))
        ti = {t: i for i, t in enumerate(times)}
        ai = {a: j for j, a in enumerate(arms)}
        means = np.full((len(times), len(arms)), np.nan)
        var = np.full_like(means, np.nan)
        n = np.zeros(means.shape, dtype=np.int64)
        for r in rows:
            i, j = ti[r.time_index], ai[r.arm_id]
            means[i, j], var[i, j], n[i, j] = r.mean, r.variance, r.n
        gaps = [(times[i], arms[j]) for i, j in zip(*np.nonzero(np.isnan(means)))]
        if gaps:
            raise IngestionError(f"experiment {key[0]!r} metric {key[1]!r} is missing (time, arm) cells {gaps}")
        out[key] = MomentData(key[0], key[1], tuple(times), tuple(arms), MomentTable(means, var), n)
    return out


def write_moment_csv(path, groups: Iterable[MomentData]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MOMENT_HEADER)
        for g in groups:
            for r in g.rows():
                w.writerow([r.experiment_id, r.metric_id, r.time_index, r.arm_id, fmt(r.mean), fmt(r.variance), r.n])


# -- unit-level outcomes ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class UnitRow:
    unit_id: str
    covariates: np.ndarray
    arm_id: str
    outcome: float
    cluster_id: Optional[str] = None


@dataclass(frozen=True, eq=False)
class UnitTable:
    rows: list
    clusters: dict  # cluster id -> row indices, first-appearance order

    @property
    def p(self) -> int:
        return self.rows[0].covariates.size if self.rows else 0

    def covariates(self) -> np.ndarray:
        return np.array([r.covariates for r in self.rows]).reshape(len(self.rows), self.p)


def _unit_header(p: int) -> tuple:
    return UNIT_HEADER_PREFIX + tuple(f"x{i}" for i in range(p))


def _check_unit_header(header):
    p = len(header) - len(UNIT_HEADER_PREFIX)
    if p < 0 or tuple(header) != _unit_header(p):
        raise IngestionError("header must be unit_id,arm_id,outcome,cluster_id,x0,...,x{p-1}", 1)


def parse_units_csv(path) -> UnitTable:
    rows = []
    clusters: dict = {}
    for line, header, row in _rows(path, _check_unit_header):
        if len(row) != len(header):
            raise IngestionError(f"expected {len(header)} fields, got {len(row)}", line)
        unit, arm, outcome, cluster = row[:4]
        cov = np.array([_float(v, f"x{i}", line) for i, v in enumerate(row[4:])])
        rows.append(UnitRow(unit, cov, arm, _float(outcome, "outcome", line), cluster or None))
        clusters.setdefault(cluster or None, []).append(len(rows) - 1)
    return UnitTable(rows, clusters)


def write_units_csv(path, rows: Sequence[UnitRow]) -> None:
    p = rows[0].covariates.size if rows else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_unit_header(p))
        for r in rows:
            if r.covariates.size != p:
                raise InvalidInputError(f"unit {r.unit_id!r} has {r.covariates.size} covariates, expected {p}")
            w.writerow([r.unit_id, r.arm_id, fmt(r.outcome), r.cluster_id or ""] + [fmt(v) for v in r.covariates])


def arm_ids(rows: Sequence[UnitRow]) -> list:
    """Distinct arm labels in index order (numeric when all labels are integers)."""
    labels = {r.arm_id for r in rows}
    try:
        return sorted(labels, key=int)
    except ValueError:
        return sorted(labels)


def arm_indices(rows: Sequence[UnitRow], labels=None) -> np.ndarray:
    labels = arm_ids(rows) if labels is None else list(labels)
    pos = {a: i for i, a in enumerate(labels)}
    return np.array([pos[r.arm_id] for r in rows], dtype=np.int64)


def impute_counterfactuals(rows: Sequence[UnitRow], k: int, labels=None) -> np.ndarray:
    """Complete the ``units x k`` outcome matrix.

    Each arm gets an affine ridge fit (intercept plus covariates) on the units
    observed under it; observed cells keep their recorded outcomes.
    """
    x = np.array([r.covariates for r in rows], dtype=float).reshape(len(rows), -1)
    arms = arm_indices(rows, labels)
    if arms.size and arms.max() >= k:
        raise ConfigError(f"found {arms.max() + 1} arms, expected {k}", "k")
    y = np.array([r.outcome for r in rows])
    design = np.hstack([np.ones((x.shape[0], 1)), x])
    d = design.shape[1]
    out = np.empty((len(rows), k))
    for a in range(k):
        obs = arms == a
        if obs.sum() < d:
            raise ConfigError(f"arm {a} has {int(obs.sum())} observations, needs at least {d}", f"arms[{a}]")
        state = design_update(design_reset(d, IMPUTE_RIDGE), design[obs], y[obs])
        out[:, a] = design @ ols_estimate(state)
    out[np.arange(len(rows)), arms] = y
    return out


def units_to_personalization(
    table: UnitTable, k: int, noise, schedule: EpochSchedule, seed: int = 0, intercept: bool = True
):
    """Personalization environment fit to the units' observed outcomes.

    With ``intercept`` each context gets a leading 1, so every arm has its own
    intercept.
    """
    labels = arm_ids(table.rows)
    if len(labels) > k:
        raise ConfigError(f"file has {len(labels)} arms, expected at most {k}", "environment.k")
    arms = arm_indices(table.rows, labels)
    lead = [1.0] if intercept else []
    units = [(np.concatenate([lead, r.covariates]), int(a), r.outcome) for r, a in zip(table.rows, arms)]
    return make_personalization_env(units, k, noise, schedule, seed)


def units_to_sites(table: UnitTable, treated_label: str = "1", intercept: bool = True) -> tuple:
    """Sites from clustered unit data: one site per cluster.

    Units labelled ``treated_label`` form the treated group; all others are
    controls. Site features are the mean unit covariates (with a leading 1
    when ``intercept``). Returns ``(SiteData, cluster ids)``.
    """
    feats, treated, control, ids = [], [], [], []
    for cid, idx in table.clusters.items():
        rs = [table.rows[i] for i in idx]
        t = [r.outcome for r in rs if r.arm_id == treated_label]
        c = [r.outcome for r in rs if r.arm_id != treated_label]
        f = np.mean([r.covariates for r in rs], axis=0) if table.p else np.zeros(0)
        feats.append(np.concatenate([[1.0], f]) if intercept else f)
        treated.append(t)
        control.append(c)
        ids.append(cid)
    try:
        return SiteData(np.array(feats), tuple(treated), tuple(control)), ids
    except InvalidInputError as exc:
        raise ConfigError(str(exc), "environment.units") from None


# -- site summaries ------------------------------------------------------------


@dataclass(frozen=True)
class SummaryStatRow:
    site_id: str
    mean: float
    variance: Optional[float]
    n: int
    significance: Optional[str] = None

    def resolved_variance(self, z_table=None) -> float:
        if self.variance is not None:
            return self.variance
        return variance_from_significance(self.mean, self.n, self.significance or "", z_table)


def variance_from_significance(mean: float, n: int, marker: str, z_table=None) -> float:
    """Unit-level variance implied by a significance marker on a mean.

    The marker is read as a two-sided critical value ``z``; the standard error
    is ``|mean| / z`` and the returned variance is ``n * se^2``.
    """
    table = SIGNIFICANCE_Z if z_table is None else z_table
    if marker not in table:
        raise InvalidInputError(f"unknown significance marker {marker!r}")
    if n < 1:
        raise InvalidInputError(f"n must be >= 1, got {n}")
    if mean == 0:
        raise InvalidInputError("a zero mean carries no variance information; give the variance explicitly")
    se = abs(mean) / table[marker]
    return n * se * se


def _check_summary_header(header):
    if tuple(header) != SUMMARY_HEADER:
        raise IngestionError(f"header must be {','.join(SUMMARY_HEADER)}", 1)


def parse_summary_csv(path, z_table=None) -> list:
    out = []
    for line, _, row in _rows(path, _check_summary_header):
        if len(row) != len(SUMMARY_HEADER):
            raise IngestionError(f"expected {len(SUMMARY_HEADER)} fields, got {len(row)}", line)
        site, mean, var, n, sig = row
        mean = _float(mean, "mean", line)
        n = _int(n, "n", line)
        variance = _float(var, "variance", line) if var else None
        if variance is not None and variance <= 0:
            raise IngestionError("variance must be > 0", line)
        r = SummaryStatRow(site, mean, variance, n, sig or None)
        if variance is None:
            try:
                r = SummaryStatRow(site, mean, r.resolved_variance(z_table), n, sig or None)
            except InvalidInputError as exc:
                raise IngestionError(str(exc), line) from None
        out.append(r)
    return out


def write_summary_csv(path, rows: Sequence[SummaryStatRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for r in rows:
            w.writerow([r.site_id, fmt(r.mean), "" if r.variance is None else fmt(r.variance), r.n, r.significance or ""])
