"""Coefficient reports and group/item rankings from fitted models."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from lmmrec.errors import DesignError, LmmError, UsageError
from lmmrec.reml import FitResult, linear_predictor, standard_errors


@dataclass(frozen=True)
class GroupCell:
    """Demographic cell; factors not listed are unspecified.

    ``values`` maps factor name to level label.
    """

    values: tuple[tuple[str, str], ...] = ()

    @classmethod
    def of(cls, **values) -> "GroupCell":
        return cls(tuple((k, str(v)) for k, v in values.items()))

    @classmethod
    def parse(cls, text: str) -> "GroupCell":
        """Parse ``"age=25,gender=M"``; an empty string is the all-unspecified cell."""
        items = []
        for part in filter(None, (p.strip() for p in text.split(","))):
            if "=" not in part:
                raise UsageError(f"expected factor=level, got {part!r}")
            k, v = (s.strip() for s in part.split("=", 1))
            items.append((k, v))
        return cls(tuple(items))

    def as_dict(self) -> dict[str, str]:
        return dict(self.values)

    def __str__(self) -> str:
        return ",".join(f"{k}={v}" for k, v in self.values) or "(all users)"


@dataclass(frozen=True)
class CoefficientRow:
    level: str
    estimate: float
    std_error: float
    aliased: bool = False


@dataclass(frozen=True)
class CoefficientReport:
    model_label: str
    factor: str
    rows: tuple[CoefficientRow, ...]


def coefficient_report(fit: FitResult, factor: str, model_label: str | None = None) -> CoefficientReport:
    """Fixed-effect estimates of ``factor`` with standard errors, in level order.

    Aliased levels (column dropped) are listed with ``aliased=True`` and NaN
    estimate; unobserved levels are omitted.
    """
    d = fit.design
    if factor != "intercept" and factor not in fit.formula.fixed_factors:
        raise DesignError(f"{factor!r} is not a fixed factor of {fit.formula}")
    se = standard_errors(fit)
    pos = {j: i for i, j in enumerate(d.kept_columns)}
    col_norm = np.asarray(d.X.multiply(d.X).sum(axis=0)).reshape(-1)
    rows = []
    for j, (name, lv) in enumerate(d.x_columns):
        if name != factor or col_norm[j] == 0:
            continue
        label = "intercept" if lv < 0 else fit.table.levels(name)[lv]
        if j in pos:
            i = pos[j]
            rows.append(CoefficientRow(label, float(fit.tau_hat[i]), float(se[i])))
        else:
            rows.append(CoefficientRow(label, float("nan"), float("nan"), aliased=True))
    return CoefficientReport(model_label or str(fit.formula), factor, tuple(rows))


def _cell_codes(fit: FitResult, cell: GroupCell) -> dict[str, np.ndarray]:
    codes = {}
    modelled = set(fit.formula.factors)
    for name, level in cell.values:
        if name not in fit.table.factor_names:
            raise UsageError(f"unknown factor {name!r}; valid factors: {list(fit.table.factor_names)}")
        levels = fit.table.levels(name)
        if level not in levels:
            raise UsageError(f"invalid level {level!r} for {name!r}; valid levels: {list(levels)}")
        if name in modelled:
            codes[name] = np.array([levels.index(level)])
    return codes


def score_cell(fit: FitResult, cell: GroupCell) -> float:
    """Predicted response for a demographic cell (unspecified factors add 0)."""
    return float(linear_predictor(fit, _cell_codes(fit, cell), 1)[0])


def cell_support(fit: FitResult, cell: GroupCell) -> int:
    """Number of training rows matching every specified factor of ``cell``."""
    t = fit.table
    mask = np.ones(t.n_rows, dtype=bool)
    for name, level in cell.values:
        mask &= t.column(name) == t.levels(name).index(level)
    return int(mask.sum())


@dataclass(frozen=True)
class RankedCell:
    cell: GroupCell
    score: float
    support: int


def rank_groups_for_item(fit: FitResult, by) -> list[RankedCell]:
    """All level combinations of ``by`` scored by the model, best first.

    Ties keep level order, so the ranking is deterministic.
    """
    by = [by] if isinstance(by, str) else list(by)
    for name in by:
        if name not in fit.formula.factors:
            raise UsageError(f"factor {name!r} is not modelled by {fit.formula}")
    level_lists = [fit.table.levels(name) for name in by]
    scored = []
    for combo in itertools.product(*level_lists):
        cell = GroupCell(tuple(zip(by, combo)))
        scored.append(RankedCell(cell, score_cell(fit, cell), cell_support(fit, cell)))
    # stable sort keeps product (level) order among ties
    return sorted(scored, key=lambda r: -r.score)


def rank_items_for_group(fits: dict[str, FitResult], cell: GroupCell, k: int) -> list[tuple[str, float]]:
    """Top ``k`` items (e.g. genres) for a demographic cell, best first.

    Ties are broken by item name.
    """
    if not fits:
        raise LmmError("no fitted models to rank")
    if k < 1:
        raise UsageError(f"k must be >= 1, got {k}")
    scores = [(name, score_cell(fit, cell)) for name, fit in fits.items()]
    scores.sort(key=lambda s: (-s[1], s[0]))
    return scores[:k]
