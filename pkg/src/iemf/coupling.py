"""Item-item similarity over categorical attributes and the sparsified neighbor graph.

Two metrics are provided:

* ``sms`` -- simple matching: the fraction of attributes on which two items agree.
* ``cos`` -- coupled object similarity: for each attribute, the intra-coupled value
  similarity (value frequencies) times the inter-coupled value similarity (overlap of
  the values' co-occurrence distributions over the other attributes), summed over
  attributes and divided by D when ``normalize`` is set.

The scalar functions (:func:`sms`, :func:`iaavs`, :func:`ieavs`, :func:`cos`) follow
the definitions literally and are meant for inspection and testing; :func:`build_graph`
uses per-attribute value-pair tables to score all item pairs in row blocks.
"""

from __future__ import annotations

import hashlib
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy import sparse

from .dataset import ItemAttributeTable
from .errors import DataError, StaleCacheError

_log = logging.getLogger(__name__)

METRICS = ("cos", "sms")
SIMILARITY_MAGIC = "iemf-similarity/1"


@dataclass(frozen=True)
class CouplingConfig:
    """Similarity metric and sparsification settings.

    ``weights`` are the per-attribute weights used by the inter-coupled similarity;
    ``None`` means uniform.  For attribute ``j`` the weights of the other attributes are
    renormalized to sum to one.
    """

    metric: str = "cos"
    neighborhood_size: int = 40
    normalize: bool = True
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}, expected one of {METRICS}")
        if self.neighborhood_size < 1:
            raise ValueError("neighborhood_size must be >= 1")
        if self.weights is not None:
            w = tuple(float(x) for x in self.weights)
            if any(not (0.0 <= x <= 1.0) for x in w):
                raise ValueError("attribute weights must lie in [0, 1]")
            object.__setattr__(self, "weights", w)

    def alpha(self, j: int, n_attributes: int) -> np.ndarray:
        """Weights over attributes for the inter-coupled term of attribute ``j``."""
        if self.weights is None:
            w = np.ones(n_attributes)
        else:
            if len(self.weights) != n_attributes:
                raise ValueError(f"{len(self.weights)} weights given for {n_attributes} attributes")
            w = np.array(self.weights, dtype=np.float64)
        w[j] = 0.0
        total = w.sum()
        if total <= 0.0:
            if n_attributes > 1:
                raise ValueError(f"attribute weights other than #{j} sum to zero")
            return w
        return w / total


class AttributeValueIndex:
    """Inverted index from (attribute, value code) to the item set g_j(x)."""

    def __init__(self, table: ItemAttributeTable):
        self.table = table
        self.groups: list[list[np.ndarray]] = []
        self.frequencies: list[np.ndarray] = []
        for j in range(table.n_attributes):
            col = table.codes[:, j]
            nv = len(table.vocab[j])
            order = np.argsort(col, kind="stable")
            freq = np.bincount(col, minlength=nv)
            bounds = np.concatenate([[0], np.cumsum(freq)])
            self.groups.append([order[bounds[c]:bounds[c + 1]] for c in range(nv)])
            self.frequencies.append(freq)
        self._cond: dict[tuple[int, int], np.ndarray] = {}

    @property
    def n_attributes(self):
        return self.table.n_attributes

    def group(self, j: int, code: int) -> np.ndarray:
        return self.groups[j][code]

    def frequency(self, j: int, code: int) -> int:
        return int(self.frequencies[j][code])

    def conditional(self, j: int, k: int) -> np.ndarray:
        """Matrix of P_{k|j}(w | x) indexed ``[x, w]`` (zero rows for unobserved x)."""
        key = (j, k)
        if key not in self._cond:
            codes = self.table.codes
            nj, nk = len(self.table.vocab[j]), len(self.table.vocab[k])
            joint = np.bincount(codes[:, j] * nk + codes[:, k], minlength=nj * nk)
            joint = joint.reshape(nj, nk).astype(np.float64)
            freq = self.frequencies[j].astype(np.float64)
            with np.errstate(invalid="ignore", divide="ignore"):
                cond = np.where(freq[:, None] > 0, joint / freq[:, None], 0.0)
            self._cond[key] = cond
        return self._cond[key]


def build_index(table: ItemAttributeTable) -> AttributeValueIndex:
    if table.n_items == 0:
        raise DataError("attribute table is empty")
    return AttributeValueIndex(table)


def _item(table: ItemAttributeTable, item) -> int:
    if isinstance(item, (int, np.integer)):
        if not 0 <= item < table.n_items:
            raise KeyError(f"item index {item} out of range")
        return int(item)
    try:
        return table.item_index[item]
    except KeyError:
        raise KeyError(f"unknown item {item!r}") from None


def _observed_code(index: AttributeValueIndex, j: int, value) -> int:
    code = value if isinstance(value, (int, np.integer)) else index.table.code_of(j, value)
    if not 0 <= code < len(index.frequencies[j]) or index.frequencies[j][code] == 0:
        raise KeyError(f"value {value!r} never observed for attribute "
                       f"{index.table.attribute_names[j]!r}")
    return int(code)


def sms(i, i2, table: ItemAttributeTable) -> float:
    """Simple matching similarity of two items (ids or dense indexes)."""
    a, b = table.codes[_item(table, i)], table.codes[_item(table, i2)]
    return float(np.count_nonzero(a == b)) / table.n_attributes


def iaavs(j: int, x, y, index: AttributeValueIndex) -> float:
    """Intra-coupled similarity of values ``x`` and ``y`` of attribute ``j``.

    Values may be given as strings (``None`` for MISSING) or value codes.
    """
    fx = len(index.group(j, _observed_code(index, j, x)))
    fy = len(index.group(j, _observed_code(index, j, y)))
    return fx * fy / (fx + fy + fx * fy)


def ieavs(j: int, x, y, index: AttributeValueIndex, config: CouplingConfig = CouplingConfig()) -> float:
    """Inter-coupled similarity of values ``x`` and ``y`` of attribute ``j``.

    With a single attribute there is nothing to couple with and the result is 1.
    """
    cx, cy = _observed_code(index, j, x), _observed_code(index, j, y)
    d = index.n_attributes
    if d == 1:
        return 1.0
    alpha = config.alpha(j, d)
    gx, gy = set(index.group(j, cx).tolist()), set(index.group(j, cy).tolist())
    total = 0.0
    for k in range(d):
        if k == j:
            continue
        codes_k = index.table.codes[:, k]
        phi_x = {int(codes_k[m]) for m in gx}
        phi_y = {int(codes_k[m]) for m in gy}
        overlap = 0.0
        for w in sorted(phi_x & phi_y):
            gw = set(index.group(k, w).tolist())
            overlap += min(len(gw & gx) / len(gx), len(gw & gy) / len(gy))
        total += alpha[k] * overlap
    return total


def cos(i, i2, index: AttributeValueIndex, config: CouplingConfig = CouplingConfig()) -> float:
    """Coupled object similarity of two items (ids or dense indexes)."""
    table = index.table
    a, b = table.codes[_item(table, i)], table.codes[_item(table, i2)]
    total = 0.0
    for j in range(table.n_attributes):
        total += iaavs(j, a[j], b[j], index) * ieavs(j, a[j], b[j], index, config)
    if config.normalize:
        total /= table.n_attributes
    return total


def cavs_tables(index: AttributeValueIndex, config: CouplingConfig = CouplingConfig()) -> list[np.ndarray]:
    """Per-attribute matrices of IaAVS * IeAVS over all value-code pairs.

    Entries for unobserved codes are zero.  Every table is exactly symmetric.
    """
    d = index.n_attributes
    tables = []
    for j in range(d):
        f = index.frequencies[j].astype(np.float64)
        prod = f[:, None] * f[None, :]
        denom = f[:, None] + f[None, :] + prod
        with np.errstate(invalid="ignore", divide="ignore"):
            intra = np.where(denom > 0, prod / denom, 0.0)
        if d == 1:
            inter = np.ones_like(intra)
        else:
            alpha = config.alpha(j, d)
            inter = np.zeros_like(intra)
            for k in range(d):
                if k == j or alpha[k] == 0.0:
                    continue
                cond = index.conditional(j, k)
                overlap = np.minimum(cond[:, None, :], cond[None, :, :]).sum(axis=2)
                inter += alpha[k] * overlap
        tables.append(intra * inter)
    return tables


def similarity_block(index: AttributeValueIndex, config: CouplingConfig, rows: np.ndarray,
                     tables: Sequence[np.ndarray] | None = None) -> np.ndarray:
    """Dense similarities between items ``rows`` and every item (shape ``len(rows) x M``)."""
    codes = index.table.codes
    d = index.n_attributes
    out = np.zeros((len(rows), index.table.n_items))
    if config.metric == "sms":
        for j in range(d):
            out += codes[rows, j][:, None] == codes[None, :, j]
        return out / d
    if tables is None:
        tables = cavs_tables(index, config)
    for j in range(d):
        out += tables[j][codes[rows, j]][:, codes[:, j]]
    if config.normalize:
        out /= d
    return out


class SimilarityGraph:
    """Symmetric sparse item-item similarity S stored as CSR (no self-loops).

    ``indptr``/``indices``/``weights`` hold each item's neighbor list sorted by
    neighbor index; ``degree[i]`` is the row sum of S.
    """

    def __init__(self, n_items: int, indptr, indices, weights):
        self.n_items = int(n_items)
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(indices, dtype=np.int64)
        self.weights = np.ascontiguousarray(weights, dtype=np.float64)
        if len(self.indptr) != self.n_items + 1:
            raise DataError("indptr length must be n_items + 1")
        if len(self.indices) != len(self.weights) or self.indptr[-1] != len(self.indices):
            raise DataError("inconsistent CSR arrays")
        rows = np.repeat(np.arange(self.n_items), np.diff(self.indptr))
        self.degree = np.bincount(rows, weights=self.weights, minlength=self.n_items)
        for arr in (self.indptr, self.indices, self.weights, self.degree):
            arr.flags.writeable = False

    @classmethod
    def empty(cls, n_items: int) -> "SimilarityGraph":
        return cls(n_items, np.zeros(n_items + 1, dtype=np.int64), [], [])

    @classmethod
    def from_edges(cls, n_items: int, edges) -> "SimilarityGraph":
        """Build from undirected ``(i, j, w)`` triples, adding both directions."""
        edges = list(edges)
        if not edges:
            return cls.empty(n_items)
        i, j, w = (np.array(c) for c in zip(*edges))
        i, j = i.astype(np.int64), j.astype(np.int64)
        if np.any(i == j):
            raise DataError("self-loops are not allowed in the similarity graph")
        rows = np.concatenate([i, j])
        cols = np.concatenate([j, i])
        vals = np.concatenate([w, w]).astype(np.float64)
        return cls._from_coo(n_items, rows, cols, vals)

    @classmethod
    def from_matrix(cls, matrix) -> "SimilarityGraph":
        """Wrap a square (dense or sparse) matrix verbatim; the diagonal is dropped."""
        m = sparse.csr_matrix(matrix, dtype=np.float64)
        m.setdiag(0.0)
        m.eliminate_zeros()
        m.sort_indices()
        return cls(m.shape[0], m.indptr, m.indices, m.data)

    @classmethod
    def _from_coo(cls, n_items, rows, cols, vals):
        if len(rows) and (rows.max() >= n_items or cols.max() >= n_items or min(rows.min(), cols.min()) < 0):
            raise DataError("edge endpoint out of range")
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if len(rows) > 1 and np.any((rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])):
            raise DataError("duplicate edge in similarity graph")
        indptr = np.zeros(n_items + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n_items), out=indptr[1:])
        return cls(n_items, indptr, cols, vals)

    def __repr__(self):
        return f"<SimilarityGraph {self.n_items} items, {self.n_edges} edges>"

    @property
    def n_edges(self) -> int:
        """Number of undirected edges."""
        return len(self.indices) // 2

    def neighbors(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return self.indices[lo:hi], self.weights[lo:hi]

    def edges(self) -> Iterator[tuple[int, int, float]]:
        """Undirected edges ``(i, j, w)`` with ``i < j``, in lexicographic order."""
        for i in range(self.n_items):
            nbrs, ws = self.neighbors(i)
            for j, w in zip(nbrs.tolist(), ws.tolist()):
                if j > i:
                    yield i, j, w

    def to_csr(self) -> sparse.csr_matrix:
        return sparse.csr_matrix((self.weights, self.indices, self.indptr),
                                 shape=(self.n_items, self.n_items))

    def to_dense(self) -> np.ndarray:
        return self.to_csr().toarray()

    def is_symmetric(self) -> bool:
        s = self.to_csr()
        return (s != s.T).nnz == 0

    def __eq__(self, other):
        if not isinstance(other, SimilarityGraph):
            return NotImplemented
        return (self.n_items == other.n_items and np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.weights, other.weights))


def _select_block(index, config, tables, rows, t):
    sims = similarity_block(index, config, rows, tables)
    sims[np.arange(len(rows)), rows] = -np.inf
    # stable sort on -sim: ties keep ascending item index
    order = np.argsort(-sims, axis=1, kind="stable")[:, :t]
    picked = np.take_along_axis(sims, order, axis=1)
    keep = picked > 0.0
    src = np.broadcast_to(rows[:, None], order.shape)[keep]
    return src, order[keep], picked[keep]


def build_graph(table: ItemAttributeTable, config: CouplingConfig = CouplingConfig(), *,
                jobs: int = 1, block_size: int = 256) -> SimilarityGraph:
    """Keep each item's ``t`` most similar items and symmetrize by union.

    Ties are broken toward the smaller item index; zero similarities are never edges.
    Row blocks may be scored on ``jobs`` threads; the merge is order-independent.
    """
    n = table.n_items
    if n < 2:
        return SimilarityGraph.empty(n)
    index = build_index(table)
    tables = cavs_tables(index, config) if config.metric == "cos" else None
    t = min(config.neighborhood_size, n - 1)
    blocks = [np.arange(lo, min(lo + block_size, n)) for lo in range(0, n, block_size)]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(lambda r: _select_block(index, config, tables, r, t), blocks))
    else:
        parts = [_select_block(index, config, tables, r, t) for r in blocks]
    src = np.concatenate([p[0] for p in parts])
    dst = np.concatenate([p[1] for p in parts])
    w = np.concatenate([p[2] for p in parts])

    lo, hi = np.minimum(src, dst), np.maximum(src, dst)
    key, first = np.unique(lo * n + hi, return_index=True)
    a, b, w = lo[first], hi[first], w[first]
    graph = SimilarityGraph._from_coo(n, np.concatenate([a, b]), np.concatenate([b, a]),
                                      np.concatenate([w, w]))
    _log.info("%s graph: %d items, %d undirected edges (t=%d), mean degree %.2f",
              config.metric, n, graph.n_edges, t, 2 * graph.n_edges / n)
    return graph


@dataclass
class LaplacianView:
    """Graph Laplacian L = D - S as a sparse matrix."""

    matrix: sparse.csr_matrix
    degree: np.ndarray = field(repr=False)

    def quadratic(self, x: np.ndarray) -> float:
        return float(x @ (self.matrix @ x))


def laplacian(graph: SimilarityGraph) -> LaplacianView:
    if not graph.is_symmetric():
        raise ValueError("similarity graph is not symmetric")
    s = graph.to_csr()
    deg = np.asarray(s.sum(axis=1)).ravel()
    lap = (sparse.diags(deg) - s).tocsr()
    lap.sort_indices()
    return LaplacianView(lap, deg)


def items_digest(item_ids: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(item_ids).encode("utf-8")).hexdigest()


def similarity_header(config: CouplingConfig, table: ItemAttributeTable) -> dict:
    return {
        "metric": config.metric,
        "neighbors": str(config.neighborhood_size),
        "normalize": "true" if config.normalize else "false",
        "n_items": str(table.n_items),
        "digest": table.digest(),
        "items": items_digest(table.item_ids),
    }


def write_similarity(graph: SimilarityGraph, fh, header: dict):
    """Write ``# iemf-similarity/1 key=value ...`` then ``i<TAB>j<TAB>w`` with i < j."""
    fields = " ".join(f"{k}={v}" for k, v in header.items())
    fh.write(f"# {SIMILARITY_MAGIC} {fields}\n")
    for i, j, w in graph.edges():
        fh.write(f"{i}\t{j}\t{w:.17g}\n")


def read_similarity(path) -> tuple[SimilarityGraph, dict]:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
        m = re.match(rf"# {re.escape(SIMILARITY_MAGIC)}( .*)?$", first)
        if not m:
            raise DataError(f"{path}: not a similarity file (bad header)")
        header = dict(kv.split("=", 1) for kv in (m.group(1) or "").split())
        try:
            n = int(header["n_items"])
        except (KeyError, ValueError):
            raise DataError(f"{path}: header lacks n_items") from None
        edges = []
        for lineno, line in enumerate(fh, 2):
            if not line.strip():
                continue
            cells = line.split("\t")
            if len(cells) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields")
            try:
                i, j, w = int(cells[0]), int(cells[1]), float(cells[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed edge") from None
            if not (0 <= i < j < n) or not np.isfinite(w) or w < 0:
                raise DataError(f"{path}:{lineno}: invalid edge {i} {j} {w}")
            edges.append((i, j, w))
    return SimilarityGraph.from_edges(n, edges), header


def check_similarity(header: dict, item_ids: Sequence[str], table: ItemAttributeTable | None = None):
    """Refuse a similarity file built for other items or other attribute content."""
    if int(header.get("n_items", -1)) != len(item_ids):
        raise DataError(f"similarity file covers {header.get('n_items')} items but the ratings "
                        f"have {len(item_ids)}; rebuild it with `similarity --ratings ...`")
    if header.get("items") != items_digest(item_ids):
        raise StaleCacheError("similarity file was built for a different item order; rebuild it "
                              "with `similarity --ratings ...`")
    if table is not None and header.get("digest") != table.digest():
        raise StaleCacheError("attribute content changed since the similarity file was written; "
                              "rerun `similarity`")
