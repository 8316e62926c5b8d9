"""Sample-quality and conditioning metrics, grid selection, and the eval report."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

from .molecule import MoleculeGraph, canonical_hash, scaffold_hash

GRID = (1.0, 1.5, 2.0, 3.0, 5.0)
MIN_VALIDITY, MIN_UNIQUENESS, MIN_NOVELTY = 95.0, 10.0, 95.0


@dataclass(frozen=True)
class VUN:
    validity: float
    uniqueness: float
    novelty: float
    n_valid: int

    @property
    def degenerate(self) -> bool:
        return self.n_valid == 0


def vun(graphs: Sequence[MoleculeGraph], train_hashes: set[int], hashes: Sequence[int] | None = None) -> VUN:
    """Validity, uniqueness and novelty in percent.

    Empty decodes are invalid. Uniqueness and novelty are fractions of the
    valid molecules. ``hashes`` may carry precomputed canonical hashes.
    """
    if hashes is None:
        hashes = [canonical_hash(g) for g in graphs]
    return vun_from_flags([g.n_atoms > 0 and g.is_valid() for g in graphs], hashes, train_hashes)


def vun_from_flags(valid_flags: Sequence[bool], hashes: Sequence[int], train_hashes: set[int]) -> VUN:
    """Same as :func:`vun` with validity and hashes already computed."""
    valid = [h for ok, h in zip(valid_flags, hashes) if ok]
    n = len(valid_flags)
    if not valid:
        return VUN(0.0, 0.0, 0.0, 0)
    return VUN(
        100.0 * len(valid) / n if n else 0.0,
        100.0 * len(set(valid)) / len(valid),
        100.0 * sum(h not in train_hashes for h in valid) / len(valid),
        len(valid),
    )


def average_ranks(x: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(targets: Sequence[float], actuals: Sequence[float]) -> float:
    """Rank correlation; 0.0 when either input is constant."""
    if len(targets) != len(actuals) or len(targets) < 2:
        raise ValueError("spearman needs two equal-length sequences of length >= 2")
    a, b = average_ranks(targets), average_ranks(actuals)
    a, b = a - a.mean(), b - b.mean()
    denom = math.sqrt(float((a * a).sum()) * float((b * b).sum()))
    if denom == 0:
        return 0.0
    return float(np.clip((a * b).sum() / denom, -1.0, 1.0))


def mae_slope(targets: Sequence[float], actuals: Sequence[float]) -> tuple[float, float]:
    """Mean absolute error and the OLS slope of actual on target (NaN for constant targets)."""
    t, a = np.asarray(targets, dtype=np.float64), np.asarray(actuals, dtype=np.float64)
    if len(t) != len(a) or len(t) < 2:
        raise ValueError("mae_slope needs two equal-length sequences of length >= 2")
    mae = float(np.abs(a - t).mean())
    tc = t - t.mean()
    var = float((tc * tc).sum())
    slope = float((tc * (a - a.mean())).sum() / var) if var > 0 else math.nan
    return mae, slope


def tanimoto_matrix(fps: np.ndarray) -> np.ndarray:
    """Pairwise Tanimoto similarity of boolean fingerprints; two empty prints score 1."""
    x = np.asarray(fps, dtype=np.float64)
    inter = x @ x.T
    counts = x.sum(axis=1)
    union = counts[:, None] + counts[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 1.0)
    return sim


def intdiv(fps: np.ndarray) -> float:
    """1 - mean pairwise Tanimoto over unordered pairs; NaN with fewer than two prints."""
    n = len(fps)
    if n < 2:
        return math.nan
    sim = tanimoto_matrix(fps)
    iu = np.triu_indices(n, k=1)
    return float(np.clip(1.0 - sim[iu].mean(), 0.0, 1.0))


def scaffold_div(graphs: Sequence[MoleculeGraph], scaffold_hashes: Sequence[int] | None = None) -> float:
    """Distinct scaffolds per molecule. Acyclic molecules share the empty scaffold."""
    if scaffold_hashes is None:
        scaffold_hashes = [scaffold_hash(g) for g in graphs]
    if len(scaffold_hashes) == 0:
        return math.nan
    return len(set(scaffold_hashes)) / len(scaffold_hashes)


@dataclass
class EvalRow:
    alpha: float
    validity: float
    uniqueness: float
    novelty: float
    spearman: float
    mae: float
    slope: float
    intdiv: float
    scaffold_div: float
    n_samples: int

    @property
    def feasible(self) -> bool:
        return self.validity >= MIN_VALIDITY and self.uniqueness >= MIN_UNIQUENESS and self.novelty >= MIN_NOVELTY


ROW_FIELDS = tuple(f.name for f in fields(EvalRow))


def grid_select(rows: Sequence[EvalRow]) -> tuple[int, bool]:
    """Index of the best-correlation feasible row, or of the best row overall if none is feasible.

    Ties go to the earlier (smaller alpha) row. Returns ``(index, feasible)``.
    """
    if not rows:
        raise ValueError("grid_select: empty report")

    def key(i):
        rho = rows[i].spearman
        return (-(rho if math.isfinite(rho) else -math.inf), i)

    feasible = [i for i, r in enumerate(rows) if r.feasible]
    if feasible:
        return min(feasible, key=key), True
    return min(range(len(rows)), key=key), False


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class EvalReport:
    condition: str
    seed: int
    mode: str
    rows: list[EvalRow] = field(default_factory=list)
    selected: int = -1
    feasible: bool = False

    def __post_init__(self):
        if self.rows and self.selected < 0:
            self.selected, self.feasible = grid_select(self.rows)

    @property
    def selected_row(self) -> EvalRow:
        return self.rows[self.selected]

    def row(self, alpha: float) -> EvalRow:
        for r in self.rows:
            if r.alpha == alpha:
                return r
        raise KeyError(alpha)

    @property
    def rationale(self) -> str:
        if self.feasible:
            return f"highest spearman among rows with V>={MIN_VALIDITY:g} U>={MIN_UNIQUENESS:g} N>={MIN_NOVELTY:g}"
        return "no row meets the V/U/N constraints; highest-spearman row kept as a diagnostic"

    def to_text(self) -> str:
        lines = [
            "[report]",
            f"condition = {self.condition}",
            f"seed = {self.seed}",
            f"mode = {self.mode}",
            f"selected_alpha = {_fmt(self.selected_row.alpha) if self.rows else 'none'}",
            f"feasible = {_fmt(self.feasible)}",
            f"rationale = {self.rationale if self.rows else 'empty'}",
            "",
            "[rows]",
            " ".join(ROW_FIELDS),
        ]
        lines += [" ".join(_fmt(getattr(r, k)) for k in ROW_FIELDS) for r in self.rows]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        header, _, table = text.partition("[rows]")
        kv = {}
        for line in header.splitlines():
            if "=" in line:
                k, _, v = line.partition("=")
                kv[k.strip()] = v.strip()
        body = [ln.split() for ln in table.strip().splitlines()]
        names, data = body[0], body[1:]
        rows = []
        for values in data:
            rec = dict(zip(names, values))
            rows.append(
                EvalRow(**{k: int(rec[k]) if k == "n_samples" else float(rec[k]) for k in ROW_FIELDS})
            )
        return cls(kv["condition"], int(kv["seed"]), kv["mode"], rows)


def summarize(values: Iterable[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(list(values), dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0

