from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import acceptance_log  # noqa: E402

AGE_BANDS = (1, 18, 25, 35, 45, 50, 56)
GENRES = ("Action", "Comedy", "Drama", "Horror", "Musical", "Sci-Fi")


def write_synthetic_movielens(root: Path, seed: int = 7, n_users: int = 400, n_movies: int = 30,
                              ratings_per_user: int = 25) -> dict:
    """Write a small dataset in MovieLens-1M format with planted group effects.

    Movie 480 is "Jurassic Park (1993)" and men rate it higher than women.
    Musical ratings rise with age band and artists (occupation 2) like
    musicals most.  Returns the generating facts for assertions.
    """
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    users = []
    for uid in range(1, n_users + 1):
        gender = "M" if rng.random() < 0.7 else "F"
        age = AGE_BANDS[rng.integers(0, 7)]
        occ = int(rng.integers(0, 21))
        users.append((uid, gender, age, occ, f"{rng.integers(10000, 99999)}"))
    with open(root / "users.dat", "w", encoding="latin-1") as fh:
        for u in users:
            fh.write("::".join(map(str, u)) + "\n")

    movie_ids = [480] + [i for i in range(1, n_movies + 20) if i != 480][: n_movies - 1]
    movies = []
    for mid in movie_ids:
        if mid == 480:
            movies.append((mid, "Jurassic Park (1993)", ("Action", "Adventure", "Sci-Fi")))
            continue
        k = int(rng.integers(1, 3))
        gs = tuple(sorted(rng.choice(GENRES, size=k, replace=False)))
        movies.append((mid, f"Movie {mid} (19{rng.integers(30, 99)})", gs))
    with open(root / "movies.dat", "w", encoding="latin-1") as fh:
        for mid, title, gs in movies:
            fh.write(f"{mid}::{title}::{'|'.join(gs)}\n")

    genre_of = {mid: gs for mid, _, gs in movies}
    movie_mean = {mid: rng.normal(3.4, 0.4) for mid in movie_ids}
    occ_eff = rng.normal(0, 0.15, 21)
    occ_eff[2] += 0.3  # artists
    lines = []
    for uid, gender, age, occ, _ in users:
        seen = rng.choice(movie_ids, size=ratings_per_user, replace=False)
        if 480 not in seen and rng.random() < 0.5:
            seen[0] = 480
        for mid in seen:
            mu = movie_mean[mid] + occ_eff[occ]
            if mid == 480:
                mu += 0.25 if gender == "M" else -0.25
            if "Musical" in genre_of[mid]:
                mu += 0.15 * AGE_BANDS.index(age) - 0.45 + (0.5 if occ == 2 else 0.0)
            r = int(np.clip(np.rint(mu + rng.normal(0, 0.9)), 1, 5))
            lines.append(f"{uid}::{mid}::{r}::{978300000 + int(rng.integers(0, 10**6))}\n")
    with open(root / "ratings.dat", "w", encoding="latin-1") as fh:
        fh.writelines(lines)
    return {"n_users": n_users, "n_movies": len(movies), "n_ratings": len(lines)}


@pytest.fixture(scope="session")
def synthetic_ml(tmp_path_factory):
    root = tmp_path_factory.mktemp("ml-synth")
    facts = write_synthetic_movielens(root)
    return root, facts


def pytest_terminal_summary(terminalreporter):
    if not acceptance_log.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for crit, status, detail in sorted(acceptance_log.LINES, key=lambda r: int(r[0].split()[0])):
        terminalreporter.write_line(f"[{status}] criterion {crit}: {detail}")
