"""Random-projection-forest approximate nearest-neighbor index.

Each tree splits the vector space recursively by hyperplanes equidistant
from two sampled points; queries traverse all trees best-first by margin to
the splitting planes, merge the collected leaf candidates, and re-rank them
by exact cosine distance. Forests serialize to a versioned binary file
designed to be loaded whole.
"""

import heapq
import math
import struct
from dataclasses import dataclass

import numpy as np


class AnnIndexError(ValueError):
    """Raised for malformed queries and index files."""


@dataclass
class RpNode:
    """Internal node (normal/offset/children) or leaf (item index list)."""

    normal: np.ndarray = None
    offset: float = 0.0
    left: int = -1
    right: int = -1
    items: list = None

    @property
    def is_leaf(self):
        return self.items is not None


class RpTree:
    def __init__(self, nodes):
        self.nodes = nodes

    def leaves(self):
        return [n for n in self.nodes if n.is_leaf]


class RpForest:
    """An immutable forest over a keyed vector set, queryable concurrently."""

    def __init__(self, ids, matrix, trees, leaf_capacity, seed):
        self.ids = list(ids)
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.norms = np.linalg.norm(self.matrix, axis=1)
        self.trees = trees
        self.leaf_capacity = int(leaf_capacity)
        self.seed = int(seed)

    @property
    def dim(self):
        return self.matrix.shape[1]

    @property
    def t(self):
        return len(self.trees)

    def __len__(self):
        return len(self.ids)

    def route(self, tree_index, x):
        """Follow the sign rule down one tree; returns the leaf node index."""
        tree = self.trees[tree_index]
        i = 0
        while not tree.nodes[i].is_leaf:
            node = tree.nodes[i]
            margin = float(node.normal @ x) - node.offset
            i = node.right if margin > 0 else node.left
        return i

    def query(self, q, n, search_k=None):
        return query_forest(self, q, n, search_k=search_k)


def _score_one(x, nx, q, nq):
    """Cosine distance of one item against the query; zero vectors score 1."""
    if nx == 0.0 or nq == 0.0:
        return 1.0
    c = float(np.dot(x, q)) / (nx * nq)
    return 1.0 - max(-1.0, min(1.0, c))


def _ranked(forest, candidate_indices, q, n):
    nq = float(np.linalg.norm(q))
    scored = [
        (_score_one(forest.matrix[i], float(forest.norms[i]), q, nq), forest.ids[i])
        for i in candidate_indices
    ]
    scored.sort(key=lambda si: (si[0], si[1]))
    return [(item_id, score) for score, item_id in scored[:n]]


def build_forest(items, t=16, leaf_capacity=16, seed=0):
    """Build a forest of ``t`` random-projection trees over keyed vectors.

    Splits sample two distinct points p, q of the node's subset and use the
    hyperplane equidistant from them (normal p - q, offset at the midpoint).
    Degenerate samples are retried up to 8 times, then a random unit normal
    is used; if even that fails to separate the points they are split by
    index parity so the recursion always terminates. Builds are
    deterministic per seed.
    """
    if isinstance(items, dict):
        items = items.items()
    items = sorted(items, key=lambda kv: kv[0])
    if not items:
        raise AnnIndexError("cannot build a forest over zero items")
    ids = [k for k, _ in items]
    matrix = np.stack([np.asarray(v, dtype=np.float64) for _, v in items])
    if matrix.ndim != 2:
        raise AnnIndexError("item vectors must share one dimension")
    if not np.all(np.isfinite(matrix)):
        raise AnnIndexError("item vectors contain non-finite components")
    if t < 1 or leaf_capacity < 1:
        raise AnnIndexError("t and leaf_capacity must be >= 1")

    dim = matrix.shape[1]
    streams = np.random.SeedSequence(seed).spawn(t)
    trees = []
    for stream in streams:
        rng = np.random.default_rng(stream)
        nodes = []
        # (node slot, item indices) work stack; children appended on demand
        root_indices = np.arange(len(ids))
        nodes.append(RpNode())
        stack = [(0, root_indices)]
        while stack:
            slot, indices = stack.pop()
            if len(indices) <= leaf_capacity:
                nodes[slot] = RpNode(items=[int(i) for i in indices])
                continue
            normal, offset = _choose_split(matrix, indices, rng, dim)
            margins = matrix[indices] @ normal - offset
            right_mask = margins > 0
            if not right_mask.any() or right_mask.all():
                # identical points: parity split keeps both sides nonempty
                right_mask = (np.arange(len(indices)) % 2).astype(bool)
            left_slot, right_slot = len(nodes), len(nodes) + 1
            nodes.extend((RpNode(), RpNode()))
            nodes[slot] = RpNode(
                normal=normal, offset=float(offset), left=left_slot, right=right_slot
            )
            stack.append((left_slot, indices[~right_mask]))
            stack.append((right_slot, indices[right_mask]))
        trees.append(RpTree(nodes))
    return RpForest(ids=ids, matrix=matrix, trees=trees, leaf_capacity=leaf_capacity, seed=seed)


def _choose_split(matrix, indices, rng, dim):
    for _ in range(8):
        pick = rng.choice(len(indices), size=2, replace=False)
        p, q = matrix[indices[pick[0]]], matrix[indices[pick[1]]]
        normal = p - q
        if float(np.linalg.norm(normal)) > 1e-12:
            return normal, float(normal @ (p + q) / 2.0)
    normal = rng.normal(size=dim)
    normal /= max(float(np.linalg.norm(normal)), 1e-12)
    centroid = matrix[indices].mean(axis=0)
    return normal, float(normal @ centroid)


def query_forest(forest: RpForest, q, n, search_k=None):
    """Approximate top-n by cosine distance, ascending, ties by id.

    All trees share one best-first priority queue keyed by the margin to
    the splitting hyperplanes; traversal stops once every tree contributed
    at least ceil(search_k / t) candidates and at least search_k distinct
    candidates were collected (or everything was visited). The merged
    candidate set is re-ranked by exact cosine distance.
    """
    q = np.asarray(q, dtype=np.float64)
    if len(forest) == 0:
        raise AnnIndexError("cannot query an empty forest")
    if q.shape != (forest.dim,):
        raise AnnIndexError(f"query dim {q.shape} does not match forest dim {forest.dim}")
    if n < 1:
        raise AnnIndexError("n must be >= 1")
    if n >= len(forest):
        return _ranked(forest, range(len(forest)), q, n)
    if search_k is None:
        search_k = default_search_k(n, forest.t)
    per_tree_target = math.ceil(search_k / forest.t)

    heap = []
    counter = 0
    for tree_idx in range(forest.t):
        heapq.heappush(heap, (-math.inf, counter, tree_idx, 0))
        counter += 1
    candidates = set()
    per_tree = [0] * forest.t
    while heap:
        if (
            min(per_tree) >= per_tree_target
            and len(candidates) >= min(search_k, len(forest))
        ):
            break
        neg_priority, _, tree_idx, node_idx = heapq.heappop(heap)
        priority = -neg_priority
        node = forest.trees[tree_idx].nodes[node_idx]
        if node.is_leaf:
            per_tree[tree_idx] += len(node.items)
            candidates.update(node.items)
            continue
        margin = float(node.normal @ q) - node.offset
        near, far = (node.right, node.left) if margin > 0 else (node.left, node.right)
        heapq.heappush(heap, (-priority, counter, tree_idx, near))
        counter += 1
        heapq.heappush(heap, (-min(priority, abs(margin)), counter, tree_idx, far))
        counter += 1
    return _ranked(forest, sorted(candidates), q, n)


def default_search_k(n, t):
    return 4 * n * t


def brute_force_knn(items, q, n):
    """Exact top-n by cosine distance with the same ordering as the forest."""
    if isinstance(items, RpForest):
        forest = items
    else:
        if isinstance(items, dict):
            items = items.items()
        items = sorted(items, key=lambda kv: kv[0])
        ids = [k for k, _ in items]
        matrix = np.stack([np.asarray(v, dtype=np.float64) for _, v in items])
        forest = RpForest(ids=ids, matrix=matrix, trees=[], leaf_capacity=1, seed=0)
    if n <= 0:
        return []
    q = np.asarray(q, dtype=np.float64)
    return _ranked(forest, range(len(forest)), q, n)


# ---------------------------------------------------------------------------
# Serialization (layout documented in docs/FORMATS.md)
# ---------------------------------------------------------------------------

IDX_MAGIC = b"RPFI"
IDX_VERSION = 1


def save_forest(forest: RpForest, path):
    with open(path, "wb") as f:
        f.write(IDX_MAGIC)
        f.write(
            struct.pack(
                "<IIIIqQ",
                IDX_VERSION,
                forest.dim,
                forest.t,
                forest.leaf_capacity,
                forest.seed,
                len(forest),
            )
        )
        for item_id in forest.ids:
            kb = str(item_id).encode("utf-8")
            f.write(struct.pack("<I", len(kb)))
            f.write(kb)
        f.write(np.ascontiguousarray(forest.matrix, dtype="<f8").tobytes())
        for tree in forest.trees:
            f.write(struct.pack("<Q", len(tree.nodes)))
            for node in tree.nodes:
                if node.is_leaf:
                    f.write(struct.pack("<B", 1))
                    f.write(struct.pack("<I", len(node.items)))
                    f.write(np.asarray(node.items, dtype="<u4").tobytes())
                else:
                    f.write(struct.pack("<B", 0))
                    f.write(np.ascontiguousarray(node.normal, dtype="<f8").tobytes())
                    f.write(struct.pack("<dII", node.offset, node.left, node.right))


def load_forest(path, expected_dim=None):
    """Load a saved forest; truncated or mismatched files raise, whole."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != IDX_MAGIC:
        raise AnnIndexError(f"{path}: not a forest index file (bad magic)")
    try:
        version, dim, t, leaf_capacity, seed, count = struct.unpack_from("<IIIIqQ", data, 4)
        if version != IDX_VERSION:
            raise AnnIndexError(
                f"{path}: index version {version} unsupported; expected {IDX_VERSION}"
            )
        if expected_dim is not None and dim != expected_dim:
            raise AnnIndexError(f"{path}: index dim {dim}, expected {expected_dim}")
        pos = 4 + struct.calcsize("<IIIIqQ")
        ids = []
        for _ in range(count):
            (klen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if len(data) < pos + klen:
                raise struct.error("truncated id table")
            ids.append(data[pos : pos + klen].decode("utf-8"))
            pos += klen
        end = pos + 8 * count * dim
        if len(data) < end:
            raise struct.error("truncated vector matrix")
        matrix = np.frombuffer(data[pos:end], dtype="<f8").reshape(count, dim).copy()
        pos = end
        trees = []
        for _ in range(t):
            (n_nodes,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            nodes = []
            for _ in range(n_nodes):
                (kind,) = struct.unpack_from("<B", data, pos)
                pos += 1
                if kind == 1:
                    (n_items,) = struct.unpack_from("<I", data, pos)
                    pos += 4
                    end = pos + 4 * n_items
                    if len(data) < end:
                        raise struct.error("truncated leaf")
                    items = np.frombuffer(data[pos:end], dtype="<u4").tolist()
                    pos = end
                    nodes.append(RpNode(items=[int(i) for i in items]))
                elif kind == 0:
                    end = pos + 8 * dim
                    if len(data) < end:
                        raise struct.error("truncated normal")
                    normal = np.frombuffer(data[pos:end], dtype="<f8").copy()
                    pos = end
                    offset, left, right = struct.unpack_from("<dII", data, pos)
                    pos += struct.calcsize("<dII")
                    nodes.append(RpNode(normal=normal, offset=offset, left=left, right=right))
                else:
                    raise AnnIndexError(f"{path}: unknown node kind {kind}")
            trees.append(RpTree(nodes))
    except struct.error as exc:
        raise AnnIndexError(f"{path}: truncated or corrupt index file: {exc}") from exc
    if pos != len(data):
        raise AnnIndexError(f"{path}: {len(data) - pos} trailing bytes after last tree")
    return RpForest(ids=ids, matrix=matrix, trees=trees, leaf_capacity=leaf_capacity, seed=seed)
