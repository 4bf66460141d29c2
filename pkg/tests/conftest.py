import io
import os
from pathlib import Path

import numpy as np
from pytest import fixture

from iemf.dataset import load_attributes, load_ratings

ROOT = Path(__file__).resolve().parent.parent

THREE_ITEMS = "item\tA\tB\ni1\ta1\tb1\ni2\ta1\tb2\ni3\ta2\tb2\n"

SIMPLE_RATINGS = [
    ("u1", "i1", 4.0), ("u2", "i1", 2.0), ("u1", "i2", 3.0), ("u2", "i2", 2.0),
    ("u3", "i2", 5.0), ("u4", "i2", 2.0), ("u1", "i3", 3.0), ("u2", "i3", 4.0),
    ("u3", "i3", 3.0), ("u4", "i3", 2.0), ("u5", "i3", 3.0), ("u6", "i3", 2.0),
    ("u1", "i4", 3.0), ("u3", "i4", 4.0),
]


def ratings_text(rows):
    return "".join(f"{u}\t{i}\t{r:g}\n" for u, i, r in rows)


@fixture
def three_items():
    return load_attributes(io.StringIO(THREE_ITEMS))


@fixture
def simple_matrix():
    return load_ratings(io.StringIO(ratings_text(SIMPLE_RATINGS)), "generic-tsv")


def random_ratings(rng, n_users=30, n_items=20, n=200, scale=(1, 5)):
    cells = rng.choice(n_users * n_items, size=n, replace=False)
    rows = [(f"u{c // n_items}", f"i{c % n_items}", float(rng.integers(scale[0], scale[1] + 1)))
            for c in cells]
    return load_ratings(io.StringIO(ratings_text(rows)), "generic-tsv", scale)


@fixture
def small_random():
    return random_ratings(np.random.default_rng(42))


def ml100k_dir():
    path = Path(os.environ.get("IEMF_ML100K", ROOT / "data" / "ml-100k"))
    return path if (path / "u.data").is_file() else None


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
