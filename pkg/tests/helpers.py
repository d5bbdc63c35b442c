"""Small builders shared by the unit and acceptance tests."""

from __future__ import annotations

import numpy as np

from lmmrec.design import ObservationTable, build_design
from lmmrec.formula import ModelFormula
from oracles import dense_indicator


def coded_table(y, fixed=None, random=()):
    """Table with factor ``f`` (fixed codes) and ``g0, g1, ...`` (random codes)."""
    columns, levels = {}, {}
    if fixed is not None:
        fixed = np.asarray(fixed)
        columns["f"] = [str(c) for c in fixed]
        levels["f"] = [str(i) for i in range(int(fixed.max()) + 1)]
    for k, codes in enumerate(random):
        codes = np.asarray(codes)
        columns[f"g{k}"] = [str(c) for c in codes]
        levels[f"g{k}"] = [str(i) for i in range(int(codes.max()) + 1)]
    if not columns:
        columns["f"] = ["0"] * len(y)
    return ObservationTable.from_records(np.asarray(y, float), columns, levels=levels)


def coded_model(y, fixed=None, random=(), intercept=None):
    """Formula, table and design for the coded layout; also dense X and Zs."""
    if intercept is None:
        intercept = fixed is None
    f = ModelFormula(
        "y",
        intercept,
        ("f",) if fixed is not None else (),
        tuple(f"g{k}" for k in range(len(random))),
    )
    t = coded_table(y, fixed, random)
    d = build_design(f, t)
    X = d.X_kept.toarray()
    Zs = [b.Z.toarray() for b in d.z_blocks]
    return f, t, d, X, Zs


def random_codes_dense(codes):
    codes = np.asarray(codes)
    return dense_indicator(codes, int(codes.max()) + 1)
