"""Rating and item-attribute ingestion, dataset statistics, folds and support buckets.

Users and items keep their original (string) identifiers; everything downstream works
on dense integer indexes assigned in first-seen order.  Sub-matrices produced by
:func:`kfold_split` share the parent's id dictionaries, so a fold's train and test
matrices index the same latent vectors.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy import sparse

from .errors import DataError

_log = logging.getLogger(__name__)

FORMATS = ("movielens-tab", "generic-tsv")
MISSING = 0
"""Reserved value code for an empty attribute cell."""

MOVIELENS_GENRES = (
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime",
    "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror", "Musical", "Mystery",
    "Romance", "Sci-Fi", "Thriller", "War", "Western",
)

SUPPORT_EDGES = (10, 20, 40, 80, 160, 320, 640)
"""Upper bounds of the item-support buckets 1-10, 11-20, ..., 321-640, >640."""


def _open_text(source) -> tuple[Iterable[str], bool]:
    """Return a line iterator over ``source`` and whether we own (must close) it."""
    if isinstance(source, (str, os.PathLike)):
        return open(source, "r", encoding="utf-8", newline=""), True
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(bytes(source).decode("utf-8"), newline=""), True
    if isinstance(source, io.TextIOBase):
        return source, False
    return io.TextIOWrapper(source, encoding="utf-8", newline=""), False


def _lines(source) -> Iterator[tuple[int, str]]:
    fh, owned = _open_text(source)
    try:
        for lineno, line in enumerate(fh, 1):
            yield lineno, line.rstrip("\r\n")
    except UnicodeDecodeError as e:
        raise DataError(f"input is not valid UTF-8: {e}") from e
    finally:
        if owned:
            fh.close()


@dataclass(frozen=True)
class RatingRecord:
    user_id: str
    item_id: str
    rating: float


class SparseRatingMatrix:
    """Observed user-item ratings (the known set T) with dense id dictionaries.

    Entries are stored as three parallel read-only arrays in a fixed order (file order
    for loaded data, ascending parent position for subsets).
    """

    def __init__(self, users, items, ratings, user_ids: Sequence[str], item_ids: Sequence[str],
                 scale=(1.0, 5.0)):
        self.users = np.ascontiguousarray(users, dtype=np.int64)
        self.items = np.ascontiguousarray(items, dtype=np.int64)
        self.ratings = np.ascontiguousarray(ratings, dtype=np.float64)
        self.user_ids = tuple(user_ids)
        self.item_ids = tuple(item_ids)
        self.scale = (float(scale[0]), float(scale[1]))
        if not (self.users.shape == self.items.shape == self.ratings.shape):
            raise DataError("users, items and ratings must have equal length")
        n = len(self.ratings)
        if n:
            if self.users.min() < 0 or self.users.max() >= len(self.user_ids):
                raise DataError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= len(self.item_ids):
                raise DataError("item index out of range")
        for arr in (self.users, self.items, self.ratings):
            arr.flags.writeable = False
        self._user_index = None
        self._item_index = None
        self._by_user = None
        self._by_item = None

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def shape(self):
        return self.n_users, self.n_items

    def __len__(self):
        return len(self.ratings)

    def __repr__(self):
        return f"<SparseRatingMatrix {self.n_users}x{self.n_items}, {len(self)} ratings>"

    @property
    def user_index(self) -> dict[str, int]:
        if self._user_index is None:
            self._user_index = {u: k for k, u in enumerate(self.user_ids)}
        return self._user_index

    @property
    def item_index(self) -> dict[str, int]:
        if self._item_index is None:
            self._item_index = {i: k for k, i in enumerate(self.item_ids)}
        return self._item_index

    def records(self) -> Iterator[RatingRecord]:
        for u, i, r in zip(self.users, self.items, self.ratings):
            yield RatingRecord(self.user_ids[u], self.item_ids[i], float(r))

    def to_csr(self) -> sparse.csr_matrix:
        """User x item CSR matrix of the ratings."""
        return sparse.csr_matrix((self.ratings, (self.users, self.items)), shape=self.shape)

    def _adjacency(self, keys, n):
        order = np.argsort(keys, kind="stable")
        ptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(keys, minlength=n), out=ptr[1:])
        return ptr, order

    def user_entries(self, u: int) -> np.ndarray:
        """Entry positions rated by dense user ``u`` (the set I_u), in entry order."""
        if self._by_user is None:
            self._by_user = self._adjacency(self.users, self.n_users)
        ptr, order = self._by_user
        return order[ptr[u]:ptr[u + 1]]

    def item_entries(self, i: int) -> np.ndarray:
        if self._by_item is None:
            self._by_item = self._adjacency(self.items, self.n_items)
        ptr, order = self._by_item
        return order[ptr[i]:ptr[i + 1]]

    def item_counts(self) -> np.ndarray:
        return np.bincount(self.items, minlength=self.n_items)

    def user_counts(self) -> np.ndarray:
        return np.bincount(self.users, minlength=self.n_users)

    def subset(self, positions) -> "SparseRatingMatrix":
        """Entries at ``positions`` (sorted ascending), keeping the full id dictionaries."""
        positions = np.sort(np.asarray(positions, dtype=np.int64))
        return SparseRatingMatrix(self.users[positions], self.items[positions],
                                  self.ratings[positions], self.user_ids, self.item_ids,
                                  self.scale)

    def write(self, fh):
        """Write entries as generic TSV (``user<TAB>item<TAB>rating``) in entry order."""
        for u, i, r in zip(self.users, self.items, self.ratings):
            fh.write(f"{self.user_ids[u]}\t{self.item_ids[i]}\t{float(r)!r}\n")


def load_ratings(source, format: str = "movielens-tab", scale=(1, 5)) -> SparseRatingMatrix:
    """Parse a tab-separated ratings file into a :class:`SparseRatingMatrix`.

    ``movielens-tab`` rows are ``user<TAB>item<TAB>rating<TAB>timestamp`` (the timestamp
    is ignored); ``generic-tsv`` rows are ``user<TAB>item<TAB>rating``.  Blank lines are
    skipped.  Ids are densified in first-seen order.

    Raises:
        DataError: on a malformed row, a duplicate (user, item) pair or a rating outside
            ``scale``; the message names the offending line.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown ratings format {format!r}, expected one of {FORMATS}")
    arity = 4 if format == "movielens-tab" else 3
    lo, hi = float(scale[0]), float(scale[1])
    if lo > hi:
        raise ValueError(f"invalid rating scale {scale}")

    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    users, items, ratings = [], [], []
    seen: dict[tuple[int, int], int] = {}
    for lineno, line in _lines(source):
        if not line.strip():
            continue
        cells = line.split("\t")
        if len(cells) != arity:
            raise DataError(f"line {lineno}: expected {arity} tab-separated fields, got {len(cells)}")
        uid, iid, raw = cells[0].strip(), cells[1].strip(), cells[2].strip()
        if not uid or not iid:
            raise DataError(f"line {lineno}: empty user or item id")
        try:
            r = float(raw)
        except ValueError:
            raise DataError(f"line {lineno}: rating {raw!r} is not a number") from None
        if not (lo <= r <= hi):
            raise DataError(f"line {lineno}: rating {raw} outside scale [{lo:g}, {hi:g}]")
        u = user_index.setdefault(uid, len(user_index))
        i = item_index.setdefault(iid, len(item_index))
        prev = seen.setdefault((u, i), lineno)
        if prev != lineno:
            raise DataError(f"line {lineno}: duplicate rating for user {uid!r}, item {iid!r} "
                            f"(first seen on line {prev})")
        users.append(u)
        items.append(i)
        ratings.append(r)

    _log.info("loaded %d ratings from %d users on %d items", len(ratings), len(user_index),
              len(item_index))
    return SparseRatingMatrix(np.array(users, dtype=np.int64), np.array(items, dtype=np.int64),
                              np.array(ratings, dtype=np.float64), list(user_index),
                              list(item_index), (lo, hi))


class ItemAttributeTable:
    """Categorical item-attribute matrix A.

    ``codes[i, j]`` is the value code of attribute ``j`` for item ``i``; code
    :data:`MISSING` (0) is reserved for an empty cell, and ``vocab[j][c]`` maps codes
    back to strings (``vocab[j][0]`` is ``None``).
    """

    def __init__(self, item_ids: Sequence[str], attribute_names: Sequence[str], codes,
                 vocab: Sequence[Sequence[str | None]]):
        self.item_ids = tuple(item_ids)
        self.attribute_names = tuple(attribute_names)
        self.codes = np.array(codes, dtype=np.int64).reshape(len(self.item_ids),
                                                             len(self.attribute_names))
        self.vocab = tuple(tuple(v) for v in vocab)
        if len(self.vocab) != self.n_attributes:
            raise DataError("one value dictionary per attribute is required")
        for j, v in enumerate(self.vocab):
            if not v or v[0] is not None:
                raise DataError(f"attribute {self.attribute_names[j]!r}: code 0 must be MISSING")
            if self.n_items and self.codes[:, j].max(initial=0) >= len(v):
                raise DataError(f"attribute {self.attribute_names[j]!r}: code out of range")
        self.codes.flags.writeable = False
        self.item_index = {iid: k for k, iid in enumerate(self.item_ids)}
        if len(self.item_index) != len(self.item_ids):
            raise DataError("duplicate item id in attribute table")

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_attributes(self) -> int:
        return len(self.attribute_names)

    def __repr__(self):
        return f"<ItemAttributeTable {self.n_items} items x {self.n_attributes} attributes>"

    def value(self, item: int, attribute: int) -> str | None:
        return self.vocab[attribute][self.codes[item, attribute]]

    def row(self, item: int) -> tuple[str | None, ...]:
        return tuple(self.value(item, j) for j in range(self.n_attributes))

    def code_of(self, attribute: int, value: str | None) -> int:
        """Code of ``value`` in ``attribute``'s dictionary (``None``/"" is MISSING)."""
        if value is None or value == "":
            return MISSING
        try:
            return self.vocab[attribute].index(value, 1)
        except ValueError:
            raise KeyError(f"value {value!r} never observed for attribute "
                           f"{self.attribute_names[attribute]!r}") from None

    def align(self, item_ids: Sequence[str]) -> "ItemAttributeTable":
        """Reorder rows to ``item_ids``; unknown items get all-MISSING rows."""
        codes = np.zeros((len(item_ids), self.n_attributes), dtype=np.int64)
        absent = 0
        for k, iid in enumerate(item_ids):
            row = self.item_index.get(iid)
            if row is None:
                absent += 1
            else:
                codes[k] = self.codes[row]
        dropped = self.n_items - (len(item_ids) - absent)
        if absent or dropped:
            _log.info("aligned attributes: %d items without attributes, %d attribute rows unused",
                      absent, dropped)
        return ItemAttributeTable(item_ids, self.attribute_names, codes, self.vocab)

    def write(self, fh, item_column: str = "item"):
        """Write the canonical header + TSV form read by :func:`load_attributes`."""
        fh.write("\t".join((item_column,) + self.attribute_names) + "\n")
        for k, iid in enumerate(self.item_ids):
            vals = ["" if v is None else v for v in self.row(k)]
            fh.write("\t".join([iid] + vals) + "\n")

    def digest(self) -> str:
        """SHA-256 over the canonical serialization (item order included)."""
        buf = io.StringIO()
        self.write(buf)
        return hashlib.sha256(buf.getvalue().encode("utf-8")).hexdigest()


def _check_cell(lineno, cell):
    if "\t" in cell or "\n" in cell:
        raise DataError(f"line {lineno}: control character in cell")


def load_attributes(source) -> ItemAttributeTable:
    """Read the canonical attribute TSV: a header ``item<TAB>a1...aD`` then one row per item.

    Empty cells are MISSING.  Values are coded per attribute in first-seen order
    starting at 1.
    """
    it = _lines(source)
    header = None
    for lineno, line in it:
        if line.strip():
            header = line.split("\t")
            break
    if header is None:
        raise DataError("attribute file is empty (missing header)")
    names = [h.strip() for h in header[1:]]
    if not names:
        raise DataError("attribute header names no attribute columns")
    d = len(names)
    dicts: list[dict[str, int]] = [{} for _ in range(d)]
    item_ids: list[str] = []
    seen: dict[str, int] = {}
    rows = []
    for lineno, line in it:
        if not line.strip():
            continue
        cells = line.split("\t")
        if len(cells) != d + 1:
            raise DataError(f"line {lineno}: expected {d + 1} cells (item + {d} attributes), "
                            f"got {len(cells)}")
        iid = cells[0].strip()
        if not iid:
            raise DataError(f"line {lineno}: empty item id")
        if iid in seen:
            raise DataError(f"line {lineno}: duplicate item id {iid!r} (first on line {seen[iid]})")
        seen[iid] = lineno
        row = []
        for j, cell in enumerate(cells[1:]):
            cell = cell.strip()
            row.append(MISSING if cell == "" else dicts[j].setdefault(cell, len(dicts[j]) + 1))
        item_ids.append(iid)
        rows.append(row)
    vocab = [[None] + list(dj) for dj in dicts]
    codes = np.array(rows, dtype=np.int64).reshape(len(rows), d)
    return ItemAttributeTable(item_ids, names, codes, vocab)


def convert_movielens_items(source, out):
    """Convert a MovieLens ``u.item`` file (pipe-separated, 19 trailing genre flags) into
    the canonical attribute TSV with one binary attribute per genre, written to ``out``.

    Returns the number of items written.
    """
    n = 0
    out.write("\t".join(("item",) + MOVIELENS_GENRES) + "\n")
    fh, owned = _open_text(source)
    try:
        data = fh.read()
    finally:
        if owned:
            fh.close()
    # the original GroupLens file is latin-1 encoded; only the id and flags are used
    for lineno, line in enumerate(data.splitlines(), 1):
        if not line.strip():
            continue
        cells = line.split("|")
        if len(cells) < 1 + len(MOVIELENS_GENRES):
            raise DataError(f"line {lineno}: expected at least {1 + len(MOVIELENS_GENRES)} "
                            f"'|'-separated fields, got {len(cells)}")
        flags = [c.strip() for c in cells[-len(MOVIELENS_GENRES):]]
        if any(f not in ("0", "1") for f in flags):
            raise DataError(f"line {lineno}: genre flags must be 0/1")
        out.write("\t".join([cells[0].strip()] + flags) + "\n")
        n += 1
    return n


def read_movielens_items(path) -> ItemAttributeTable:
    """Load ``u.item`` directly (byte-tolerant) as a 19-attribute binary table."""
    with open(path, "rb") as fh:
        text = fh.read().decode("latin-1")
    buf = io.StringIO()
    convert_movielens_items(io.StringIO(text), buf)
    buf.seek(0)
    return load_attributes(buf)


@dataclass(frozen=True)
class DatasetStats:
    n_ratings: int
    n_users: int
    n_items: int
    sparsity: float
    avg_ratings_per_user: float
    avg_ratings_per_item: float

    def as_dict(self):
        return dict(self.__dict__)


def compute_stats(matrix: SparseRatingMatrix) -> DatasetStats:
    if len(matrix) == 0:
        raise DataError("cannot compute statistics of an empty rating matrix")
    n, nu, ni = len(matrix), matrix.n_users, matrix.n_items
    return DatasetStats(n, nu, ni, 1.0 - n / (nu * ni), n / nu, n / ni)


@dataclass
class FoldSplit:
    """k disjoint test folds plus their complementary train sets."""

    folds: list[tuple[SparseRatingMatrix, SparseRatingMatrix]]
    seed: int | None
    test_positions: list[np.ndarray]

    def __len__(self):
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)

    def manifest(self) -> dict:
        n = sum(len(p) for p in self.test_positions)
        return {"seed": self.seed, "k": len(self.folds), "n_entries": n,
                "folds": [p.tolist() for p in self.test_positions]}

    def save_manifest(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.manifest(), fh)
            fh.write("\n")


def _folds_from_positions(matrix, parts, seed) -> FoldSplit:
    n = len(matrix)
    folds = []
    for test_pos in parts:
        mask = np.ones(n, dtype=bool)
        mask[test_pos] = False
        folds.append((matrix.subset(np.flatnonzero(mask)), matrix.subset(test_pos)))
    return FoldSplit(folds, seed, list(parts))


def kfold_split(matrix: SparseRatingMatrix, k: int = 5, seed: int = 0) -> FoldSplit:
    """Random k-fold partition of the entries; fold sizes differ by at most one."""
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > len(matrix):
        raise DataError(f"cannot split {len(matrix)} entries into {k} folds")
    perm = np.random.default_rng(seed).permutation(len(matrix))
    parts = [np.sort(p) for p in np.array_split(perm, k)]
    return _folds_from_positions(matrix, parts, seed)


def folds_from_manifest(matrix: SparseRatingMatrix, manifest) -> FoldSplit:
    """Rebuild a :class:`FoldSplit` from a manifest dict or JSON file path."""
    if not isinstance(manifest, dict):
        with open(manifest, encoding="utf-8") as fh:
            manifest = json.load(fh)
    n = len(matrix)
    if manifest.get("n_entries") not in (None, n):
        raise DataError(f"fold manifest covers {manifest['n_entries']} entries, data has {n}")
    parts = [np.sort(np.asarray(p, dtype=np.int64)) for p in manifest["folds"]]
    allpos = np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
    if len(allpos) != n or not np.array_equal(np.sort(allpos), np.arange(n)):
        raise DataError("fold manifest does not partition the entries")
    return _folds_from_positions(matrix, parts, manifest.get("seed"))


def _check_edges(edges) -> tuple[int, ...]:
    edges = tuple(int(e) for e in edges)
    if not edges or any(b <= a for a, b in zip(edges, edges[1:])) or edges[0] < 1:
        raise ValueError(f"bucket edges must be positive and strictly increasing: {edges}")
    return edges


def bucket_labels(edges: Sequence[int]) -> list[str]:
    edges = _check_edges(edges)
    labels = []
    lo = 1
    for e in edges:
        labels.append(f"{lo}-{e}")
        lo = e + 1
    labels.append(f">{edges[-1]}")
    return labels


@dataclass
class ItemSupportBuckets:
    """Items grouped by their number of training ratings."""

    edges: tuple[int, ...]
    labels: list[str]
    assignment: np.ndarray  # bucket position per dense item
    item_counts: np.ndarray

    def label_of(self, item: int) -> str:
        return self.labels[self.assignment[item]]

    def sizes(self) -> dict[str, int]:
        counts = np.bincount(self.assignment, minlength=len(self.labels))
        return dict(zip(self.labels, counts.tolist()))


def bucket_items(train: SparseRatingMatrix, edges: Sequence[int] = SUPPORT_EDGES) -> ItemSupportBuckets:
    """Assign every item to a support bucket by its training-rating count.

    Bucket ``b`` holds counts in ``(edges[b-1], edges[b]]``; the last bucket holds counts
    above ``edges[-1]``.  Items with no training ratings fall into the lowest bucket.
    """
    edges = _check_edges(edges)
    counts = train.item_counts()
    assignment = np.searchsorted(np.asarray(edges), counts, side="left")
    return ItemSupportBuckets(edges, bucket_labels(edges), assignment, counts)
