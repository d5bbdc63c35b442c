"""Random 80/20 holdout splits, mean absolute error and repeated holdout CV.

Splits use NumPy's PCG64 generator seeded with ``seed + repeat``; the
training set is the first ``round(fraction * N)`` entries of a random
permutation, and both index sets are returned sorted.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from lmmrec.design import ObservationTable
from lmmrec.errors import DataError, LmmError, UsageError
from lmmrec.formula import ModelFormula
from lmmrec.reml import FitOptions, fit_reml, predict


@dataclass(frozen=True)
class EvalReport:
    """Summary of repeated holdout evaluation.

    ``mae`` and ``baseline_mae`` are means over repeats; per-repeat values
    are kept in ``repeat_mae`` and ``repeat_baseline_mae``.
    """

    model_label: str
    mae: float
    n_test: int
    split_seed: int
    baseline_mae: float
    repeat_mae: tuple[float, ...] = ()
    repeat_baseline_mae: tuple[float, ...] = ()
    repeat_seeds: tuple[int, ...] = ()
    converged: tuple[bool, ...] = field(default=(), repr=False)

    @property
    def mae_min(self) -> float:
        return min(self.repeat_mae)

    @property
    def mae_max(self) -> float:
        return max(self.repeat_mae)

    def rows(self, label: str = "") -> list[dict]:
        """One dict per repeat, ready for CSV/JSON export."""
        return [
            {
                "model": self.model_label,
                "selection": label,
                "repeat": r,
                "mae": m,
                "baseline_mae": b,
                "seed": s,
            }
            for r, (m, b, s) in enumerate(
                zip(self.repeat_mae, self.repeat_baseline_mae, self.repeat_seeds)
            )
        ]


def split_indices(n: int, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 < train_fraction < 1.0:
        raise UsageError(f"train fraction must lie in (0, 1), got {train_fraction}")
    if n < 2:
        raise DataError(f"need at least 2 rows to split, got {n}")
    n_train = int(round(train_fraction * n))
    n_train = min(max(n_train, 1), n - 1)
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def split_train_test(t: ObservationTable, train_fraction: float, seed: int):
    """Seeded uniform split of ``t`` into ``(train, test)`` tables."""
    train, test = split_indices(t.n_rows, train_fraction, seed)
    return t.take(train), t.take(test)


def mae(predicted, actual) -> float:
    p = np.asarray(predicted, dtype=float).reshape(-1)
    a = np.asarray(actual, dtype=float).reshape(-1)
    if p.shape != a.shape:
        raise UsageError(f"length mismatch: {p.shape[0]} predictions vs {a.shape[0]} actual values")
    if p.size == 0:
        raise UsageError("mean absolute error of an empty vector")
    return float(np.mean(np.abs(p - a)))


def _one_repeat(f, t, train_fraction, seed, clip, opts):
    train, test = split_train_test(t, train_fraction, seed)
    try:
        fit = fit_reml(f, train, opts)
    except LmmError as exc:
        raise type(exc)(f"repeat with seed {seed} failed: {exc}") from exc
    pred = predict(fit, test)
    base = np.full(test.n_rows, train.response.mean())
    if clip is not None:
        pred = np.clip(pred, *clip)
        base = np.clip(base, *clip)
    return mae(pred, test.response), mae(base, test.response), test.n_rows, fit.converged


def cross_validate(
    f: ModelFormula,
    t: ObservationTable,
    repeats: int = 5,
    train_fraction: float = 0.8,
    seed: int = 0,
    *,
    clip: tuple[float, float] | None = None,
    opts: FitOptions | None = None,
    jobs: int = 1,
    label: str | None = None,
) -> EvalReport:
    """Repeated random holdout: split with ``seed + r``, fit, predict, score.

    The global training mean is scored on the same split as a baseline.
    A failing repeat raises; nothing is skipped.
    """
    if repeats < 1:
        raise UsageError(f"repeats must be >= 1, got {repeats}")
    seeds = [seed + r for r in range(repeats)]
    args = [(f, t, train_fraction, s, clip, opts) for s in seeds]
    if jobs > 1 and repeats > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda a: _one_repeat(*a), args))
    else:
        results = [_one_repeat(*a) for a in args]
    maes = tuple(r[0] for r in results)
    bases = tuple(r[1] for r in results)
    return EvalReport(
        model_label=label or str(f),
        mae=float(np.mean(maes)),
        n_test=results[0][2],
        split_seed=seed,
        baseline_mae=float(np.mean(bases)),
        repeat_mae=maes,
        repeat_baseline_mae=bases,
        repeat_seeds=tuple(seeds),
        converged=tuple(r[3] for r in results),
    )
