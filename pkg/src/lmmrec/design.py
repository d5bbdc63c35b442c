"""Observation tables and the indicator design matrices built from them."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, sparse

from lmmrec.errors import DataError, DesignError
from lmmrec.formula import ModelFormula

# Relative pivot threshold for declaring a column aliased.  Indicator columns are
# integer valued, so this only needs to absorb rounding.
ALIAS_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class ObservationTable:
    """Responses plus one categorical code per declared factor for every row.

    Parameters
    ----------
    factors : sequence of (name, levels)
        Factor names with their ordered level labels.
    response : array_like, shape (N,)
        Finite real responses.
    codes : array_like of int, shape (N, n_factors)
        ``codes[i, j]`` is the index into the level list of factor ``j``.
    """

    factors: tuple[tuple[str, tuple[str, ...]], ...]
    response: np.ndarray
    codes: np.ndarray
    label: str = ""

    def __post_init__(self):
        factors = tuple((str(name), tuple(str(v) for v in levels)) for name, levels in self.factors)
        names = [name for name, _ in factors]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate factor names in table: {names}")
        for name, levels in factors:
            if len(set(levels)) != len(levels):
                raise DataError(f"factor {name!r} has duplicate level labels")
        y = np.array(self.response, dtype=float).reshape(-1)
        codes = np.array(self.codes, dtype=np.int64)
        if codes.size == 0:
            codes = codes.reshape(y.shape[0], len(factors))
        if codes.ndim != 2 or codes.shape != (y.shape[0], len(factors)):
            raise DataError(
                f"codes must have shape ({y.shape[0]}, {len(factors)}), got {codes.shape}"
            )
        if not np.all(np.isfinite(y)):
            bad = int(np.flatnonzero(~np.isfinite(y))[0])
            raise DataError(f"non-finite response in row {bad}")
        for j, (name, levels) in enumerate(factors):
            col = codes[:, j]
            bad = np.flatnonzero((col < 0) | (col >= len(levels)))
            if bad.size:
                raise DataError(
                    f"level index {col[bad[0]]} out of range for factor {name!r} in row {bad[0]}"
                )
        y.setflags(write=False)
        codes.setflags(write=False)
        object.__setattr__(self, "factors", factors)
        object.__setattr__(self, "response", y)
        object.__setattr__(self, "codes", codes)

    @classmethod
    def from_records(
        cls,
        response: Sequence[float],
        columns: dict[str, Sequence],
        levels: dict[str, Sequence] | None = None,
        label: str = "",
    ) -> "ObservationTable":
        """Build a table from level labels rather than codes.

        Level order follows ``levels[name]`` when given, otherwise first
        appearance in the column.
        """
        levels = dict(levels or {})
        factors = []
        codes = []
        for name, values in columns.items():
            values = [str(v) for v in values]
            lv = [str(v) for v in levels[name]] if name in levels else list(dict.fromkeys(values))
            index = {v: i for i, v in enumerate(lv)}
            try:
                codes.append([index[v] for v in values])
            except KeyError as exc:
                raise DataError(f"value {exc.args[0]!r} is not a level of factor {name!r}") from None
            factors.append((name, tuple(lv)))
        n = len(response)
        code_arr = np.array(codes, dtype=np.int64).T if codes else np.zeros((n, 0), dtype=np.int64)
        return cls(tuple(factors), np.asarray(response, dtype=float), code_arr, label)

    @property
    def n_rows(self) -> int:
        return int(self.response.shape[0])

    @property
    def factor_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.factors)

    def factor_index(self, name: str) -> int:
        for j, (fname, _) in enumerate(self.factors):
            if fname == name:
                return j
        raise DesignError(f"unknown factor {name!r}; table has {list(self.factor_names)}")

    def levels(self, name: str) -> tuple[str, ...]:
        return self.factors[self.factor_index(name)][1]

    def column(self, name: str) -> np.ndarray:
        return self.codes[:, self.factor_index(name)]

    def take(self, rows) -> "ObservationTable":
        rows = np.asarray(rows, dtype=np.int64)
        return ObservationTable(self.factors, self.response[rows], self.codes[rows], self.label)

    def with_response(self, response) -> "ObservationTable":
        return ObservationTable(self.factors, response, self.codes, self.label)

    def to_csv(self, path_or_file, response_name: str = "y") -> None:
        """Write the table with level labels, one row per observation."""
        own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
        fh = open(path_or_file, "w", newline="", encoding="utf-8") if own else path_or_file
        try:
            w = csv.writer(fh)
            w.writerow([response_name, *self.factor_names])
            labels = [levels for _, levels in self.factors]
            for y, row in zip(self.response, self.codes):
                w.writerow([repr(float(y)), *(labels[j][c] for j, c in enumerate(row))])
        finally:
            if own:
                fh.close()


@dataclass(frozen=True, eq=False)
class RandomBlock:
    factor: str
    Z: sparse.csr_matrix
    levels: tuple[str, ...]

    @property
    def q(self) -> int:
        return self.Z.shape[1]


@dataclass(frozen=True, eq=False)
class DesignMatrices:
    """Response, fixed indicator matrix and per-factor random indicator blocks.

    ``X`` holds every dummy column (no reference level dropped); the columns
    listed in ``kept_columns`` form the full-rank subset actually estimated.
    ``x_columns`` maps each column to ``(factor, level index)``, with
    ``("intercept", -1)`` for the intercept.
    """

    y: np.ndarray
    X: sparse.csr_matrix
    x_labels: tuple[str, ...]
    x_columns: tuple[tuple[str, int], ...]
    z_blocks: tuple[RandomBlock, ...]
    kept_columns: tuple[int, ...]
    formula: ModelFormula | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_obs(self) -> int:
        return int(self.y.shape[0])

    @property
    def p(self) -> int:
        return len(self.kept_columns)

    @property
    def q_sizes(self) -> tuple[int, ...]:
        return tuple(b.q for b in self.z_blocks)

    @property
    def dropped_columns(self) -> tuple[int, ...]:
        kept = set(self.kept_columns)
        return tuple(j for j in range(self.X.shape[1]) if j not in kept)

    @property
    def X_kept(self) -> sparse.csr_matrix:
        if "X_kept" not in self._cache:
            self._cache["X_kept"] = self.X[:, list(self.kept_columns)].tocsr()
        return self._cache["X_kept"]

    @property
    def Z(self) -> sparse.csr_matrix:
        """Horizontal concatenation of the random blocks."""
        if "Z" not in self._cache:
            if self.z_blocks:
                self._cache["Z"] = sparse.hstack([b.Z for b in self.z_blocks], format="csr")
            else:
                self._cache["Z"] = sparse.csr_matrix((self.n_obs, 0))
        return self._cache["Z"]

    def cross_products(self):
        """Return ``(W'W, W'y, y'y)`` for ``W = [X_kept, Z]`` as dense arrays.

        These are sufficient statistics for every likelihood evaluation, so
        the N-sized work happens once per design.
        """
        if "cross" not in self._cache:
            W = sparse.hstack([self.X_kept, self.Z], format="csr")
            WtW = (W.T @ W).toarray()
            Wty = np.asarray(W.T @ self.y).reshape(-1)
            yty = float(self.y @ self.y)
            self._cache["cross"] = (WtW, Wty, yty)
        return self._cache["cross"]


def indicator_matrix(codes: np.ndarray, n_levels: int) -> sparse.csr_matrix:
    """N x n_levels 0/1 matrix with a single one per row at ``codes[i]``."""
    codes = np.asarray(codes, dtype=np.int64)
    n = codes.shape[0]
    data = np.ones(n)
    return sparse.csr_matrix((data, (np.arange(n), codes)), shape=(n, n_levels))


def detect_aliasing(X, tol: float = ALIAS_TOL) -> list[int]:
    """Greedy left-to-right selection of linearly independent columns.

    Runs an incremental Cholesky factorization of ``X'X``: column ``j`` is kept
    when its squared residual after projection on the already-kept columns
    exceeds ``tol`` times its own squared norm.  Zero columns are never kept.
    """
    if sparse.issparse(X):
        XtX = (X.T @ X).toarray()
    else:
        X = np.asarray(X, dtype=float)
        XtX = X.T @ X
    p = XtX.shape[0]
    kept: list[int] = []
    L = np.zeros((p, p))
    for j in range(p):
        norm2 = XtX[j, j]
        if norm2 <= 0:
            continue
        k = len(kept)
        l = linalg.solve_triangular(L[:k, :k], XtX[kept, j], lower=True) if k else np.empty(0)
        pivot = norm2 - l @ l
        if pivot > tol * norm2:
            L[k, :k] = l
            L[k, k] = np.sqrt(pivot)
            kept.append(j)
    return kept


def build_design(f: ModelFormula, t: ObservationTable) -> DesignMatrices:
    if t.n_rows < 1:
        raise DesignError("observation table is empty")
    missing = [name for name in f.factors if name not in t.factor_names]
    if missing:
        raise DesignError(
            f"unknown factor(s) {missing}; table has {list(t.factor_names)}"
        )
    n = t.n_rows
    blocks = []
    labels: list[str] = []
    columns: list[tuple[str, int]] = []
    if f.intercept:
        blocks.append(sparse.csr_matrix(np.ones((n, 1))))
        labels.append("intercept")
        columns.append(("intercept", -1))
    for name in f.fixed_factors:
        levels = t.levels(name)
        blocks.append(indicator_matrix(t.column(name), len(levels)))
        labels.extend(f"{name}:{lv}" for lv in levels)
        columns.extend((name, i) for i in range(len(levels)))
    X = sparse.hstack(blocks, format="csr") if blocks else sparse.csr_matrix((n, 0))
    z_blocks = tuple(
        RandomBlock(name, indicator_matrix(t.column(name), len(t.levels(name))), t.levels(name))
        for name in f.random_factors
    )
    y = t.response.copy()
    y.setflags(write=False)
    return DesignMatrices(
        y=y,
        X=X,
        x_labels=tuple(labels),
        x_columns=tuple(columns),
        z_blocks=z_blocks,
        kept_columns=tuple(detect_aliasing(X)),
        formula=f,
    )
