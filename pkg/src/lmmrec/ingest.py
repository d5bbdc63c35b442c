"""MovieLens-1M loading and construction of observation tables.

The three ``::``-separated files are::

    users.dat    UserID::Gender::Age::Occupation::Zip-code
    movies.dat   MovieID::Title::Genres        (genres separated by "|")
    ratings.dat  UserID::MovieID::Rating::Timestamp

Factor levels in the resulting tables use the raw dataset codes as labels
(``age`` in ``1, 18, ..., 56``; ``occupation`` in ``0..20``; ``gender`` in
``M, F``).  Readable names are in :data:`AGE_NAMES` and
:data:`OCCUPATION_NAMES`.
"""

from __future__ import annotations

import io
import os
from collections.abc import Iterable
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lmmrec.design import ObservationTable
from lmmrec.errors import DataError

AGE_BANDS = (1, 18, 25, 35, 45, 50, 56)
AGE_NAMES = {
    1: "Under 18",
    18: "18-24",
    25: "25-34",
    35: "35-44",
    45: "45-49",
    50: "50-55",
    56: "56+",
}
OCCUPATION_NAMES = {
    0: "other or not specified",
    1: "academic/educator",
    2: "artist",
    3: "clerical/admin",
    4: "college/grad student",
    5: "customer service",
    6: "doctor/health care",
    7: "executive/managerial",
    8: "farmer",
    9: "homemaker",
    10: "K-12 student",
    11: "lawyer",
    12: "programmer",
    13: "retired",
    14: "sales/marketing",
    15: "scientist",
    16: "self-employed",
    17: "technician/engineer",
    18: "tradesman/craftsman",
    19: "unemployed",
    20: "writer",
}
GENDERS = ("M", "F")

FACTOR_LEVELS = {
    "age": tuple(str(a) for a in AGE_BANDS),
    "occupation": tuple(str(o) for o in range(21)),
    "gender": GENDERS,
}
DISPLAY_NAMES = {
    "age": {str(k): v for k, v in AGE_NAMES.items()},
    "occupation": {str(k): v for k, v in OCCUPATION_NAMES.items()},
    "gender": {"M": "Male", "F": "Female"},
}

ENCODING = "latin-1"


@dataclass(frozen=True)
class UserRecord:
    user_id: int
    gender: str
    age_band: int
    occupation: int
    zip: str = ""


@dataclass(frozen=True)
class MovieRecord:
    movie_id: int
    title: str
    genres: tuple[str, ...]


@dataclass(frozen=True)
class RatingRecord:
    user_id: int
    movie_id: int
    rating: int
    timestamp: int = 0


@dataclass(frozen=True, eq=False)
class Ratings:
    """Column store of the ratings file; ``ratings[i]`` gives a RatingRecord."""

    user_id: np.ndarray
    movie_id: np.ndarray
    rating: np.ndarray
    timestamp: np.ndarray

    def __len__(self) -> int:
        return int(self.rating.shape[0])

    def __getitem__(self, i: int) -> RatingRecord:
        return RatingRecord(
            int(self.user_id[i]), int(self.movie_id[i]), int(self.rating[i]), int(self.timestamp[i])
        )

    @classmethod
    def from_records(cls, records: Iterable[RatingRecord]) -> "Ratings":
        rows = [(r.user_id, r.movie_id, r.rating, r.timestamp) for r in records]
        arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
        bad = np.flatnonzero((arr[:, 2] < 1) | (arr[:, 2] > 5))
        if bad.size:
            raise DataError(f"rating {arr[bad[0], 2]} out of range 1-5 in record {bad[0]}")
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])


def _read_lines(path: Path) -> list[str]:
    try:
        with open(path, encoding=ENCODING, newline="") as fh:
            return fh.read().splitlines()
    except FileNotFoundError:
        raise DataError("file not found", str(path)) from None


def _parse_ratings(path: Path) -> Ratings:
    try:
        with open(path, encoding=ENCODING) as fh:
            text = fh.read()
    except FileNotFoundError:
        raise DataError("file not found", str(path)) from None
    try:
        arr = np.loadtxt(
            io.StringIO(text.replace("::", ",")), delimiter=",", dtype=np.int64, ndmin=2
        )
        if arr.size and arr.shape[1] != 4:
            raise ValueError
    except ValueError:
        _locate_bad_line(path, text.splitlines(), 4)
        raise  # pragma: no cover - _locate_bad_line always raises
    arr = arr.reshape(-1, 4)
    bad = np.flatnonzero((arr[:, 2] < 1) | (arr[:, 2] > 5))
    if bad.size:
        line = _data_line_number(text, int(bad[0]))
        raise DataError(f"rating {arr[bad[0], 2]} out of range 1-5", str(path), line)
    return Ratings(arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy(), arr[:, 3].copy())


def _data_line_number(text: str, index: int) -> int:
    """1-based file line of the ``index``-th non-blank line."""
    seen = -1
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            seen += 1
            if seen == index:
                return lineno
    return index + 1


def _locate_bad_line(path: Path, lines: list[str], n_fields: int) -> None:
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split("::")
        if len(parts) != n_fields:
            raise DataError(f"expected {n_fields} '::'-separated fields, found {len(parts)}", str(path), lineno)
        for part in parts:
            try:
                int(part)
            except ValueError:
                raise DataError(f"non-integer field {part!r}", str(path), lineno) from None
    raise DataError("unparseable ratings file", str(path))


def _parse_users(path: Path) -> dict[int, UserRecord]:
    users = {}
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        parts = line.split("::")
        if len(parts) != 5:
            raise DataError(f"expected 5 '::'-separated fields, found {len(parts)}", str(path), lineno)
        uid, gender, age, occ, zipcode = parts
        try:
            uid, age, occ = int(uid), int(age), int(occ)
        except ValueError:
            raise DataError("non-integer user id, age or occupation", str(path), lineno) from None
        if gender not in GENDERS:
            raise DataError(f"gender {gender!r} not in {GENDERS}", str(path), lineno)
        if age not in AGE_NAMES:
            raise DataError(f"age band {age} not in {AGE_BANDS}", str(path), lineno)
        if not 0 <= occ <= 20:
            raise DataError(f"occupation {occ} out of range 0-20", str(path), lineno)
        if uid in users:
            raise DataError(f"duplicate user id {uid}", str(path), lineno)
        users[uid] = UserRecord(uid, gender, age, occ, zipcode)
    return users


def _parse_movies(path: Path) -> dict[int, MovieRecord]:
    movies = {}
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        parts = line.split("::")
        if len(parts) != 3:
            raise DataError(f"expected 3 '::'-separated fields, found {len(parts)}", str(path), lineno)
        mid, title, genres = parts
        try:
            mid = int(mid)
        except ValueError:
            raise DataError(f"non-integer movie id {mid!r}", str(path), lineno) from None
        labels = tuple(g for g in genres.split("|") if g)
        if not labels:
            raise DataError("movie has no genre", str(path), lineno)
        if mid in movies:
            raise DataError(f"duplicate movie id {mid}", str(path), lineno)
        movies[mid] = MovieRecord(mid, title, labels)
    return movies


def load_movielens(directory: str | os.PathLike):
    """Load ``users.dat``, ``movies.dat`` and ``ratings.dat`` from ``directory``.

    Returns ``(users, movies, ratings)``: dicts keyed by id for users and
    movies, and a :class:`Ratings` column store in file order.
    """
    root = Path(directory)
    if not root.is_dir():
        raise DataError("data directory does not exist", str(root))
    users = _parse_users(root / "users.dat")
    movies = _parse_movies(root / "movies.dat")
    ratings = _parse_ratings(root / "ratings.dat")
    return users, movies, ratings


def expand_genres(movies) -> dict[str, set[int]]:
    """Map each genre to the ids of all movies carrying it (multi-label)."""
    records = movies.values() if isinstance(movies, dict) else movies
    buckets: dict[str, set[int]] = {}
    for m in records:
        for g in m.genres:
            buckets.setdefault(g, set()).add(m.movie_id)
    return dict(sorted(buckets.items()))


def find_movie(movies, title: str) -> int:
    """Movie id for an exact title match (including the year)."""
    records = movies.values() if isinstance(movies, dict) else movies
    hits = [m.movie_id for m in records if m.title == title]
    if not hits:
        raise DataError(f"no movie titled {title!r}")
    if len(hits) > 1:
        raise DataError(f"title {title!r} is ambiguous: ids {hits}")
    return hits[0]


def _user_lookup(users) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    records = users.values() if isinstance(users, dict) else users
    records = list(records)
    size = max((u.user_id for u in records), default=0) + 1
    age = np.full(size, -1, dtype=np.int64)
    occ = np.full(size, -1, dtype=np.int64)
    gender = np.full(size, -1, dtype=np.int64)
    age_index = {a: i for i, a in enumerate(AGE_BANDS)}
    for u in records:
        age[u.user_id] = age_index[u.age_band]
        occ[u.user_id] = u.occupation
        gender[u.user_id] = GENDERS.index(u.gender)
    return age, occ, gender


def build_observation_table(ratings: Ratings, users, selector, label: str = "") -> ObservationTable:
    """Rows for every rating of the selected movie(s), joined with rater demographics.

    ``selector`` is a single movie id or a collection of movie ids (such as
    one genre bucket from :func:`expand_genres`).  Factors are ``age``,
    ``occupation`` and ``gender``; rows keep ratings-file order.
    """
    if isinstance(selector, (int, np.integer)):
        ids = np.array([int(selector)])
    else:
        ids = np.fromiter((int(s) for s in selector), dtype=np.int64)
    mask = np.isin(ratings.movie_id, ids)
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        raise DataError(f"selection {label or selector!r} matches no ratings")
    uid = ratings.user_id[rows]
    age, occ, gender = _user_lookup(users)
    in_range = (uid >= 0) & (uid < age.shape[0])
    safe = np.where(in_range, uid, 0)
    known = in_range & (age[safe] >= 0)
    if not np.all(known):
        bad = int(uid[np.flatnonzero(~known)[0]])
        raise DataError(f"rating references unknown user id {bad}")
    codes = np.column_stack([age[uid], occ[uid], gender[uid]])
    factors = tuple((name, FACTOR_LEVELS[name]) for name in ("age", "occupation", "gender"))
    return ObservationTable(factors, ratings.rating[rows].astype(float), codes, label)


def movie_table(ratings: Ratings, users, movies, movie: int | str) -> ObservationTable:
    """Single-movie table selected by id or exact title."""
    if isinstance(movie, str) and not movie.strip().isdigit():
        mid = find_movie(movies, movie)
    else:
        mid = int(movie)
    records = movies if isinstance(movies, dict) else {m.movie_id: m for m in movies}
    title = records[mid].title if mid in records else str(mid)
    return build_observation_table(ratings, users, mid, label=title)


def genre_table(ratings: Ratings, users, movies, genre: str) -> ObservationTable:
    buckets = expand_genres(movies)
    if genre not in buckets:
        raise DataError(f"unknown genre {genre!r}; known genres: {sorted(buckets)}")
    return build_observation_table(ratings, users, sorted(buckets[genre]), label=genre)
