"""Linear (Morton-keyed) adaptive octree over the cube [-1, 1]^3.

Nodes are stored as parallel arrays sorted by (depth, morton); a node is a
leaf iff its child mask is zero, and per-leaf feature vectors are kept in
node order. Cells at depth d have side 2 / 2^d. The hard depth cap is 8.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAX_DEPTH = 8
DOMAIN_MIN = -1.0
DOMAIN_SIZE = 2.0

OCT_MAGIC = b"OGOCT001"
OCT_VERSION = 1


def morton_encode(i, j, k, depth: int):
    """Interleave cell indices into a Z-order key (i -> high bit of each triple)."""
    i = np.asarray(i, dtype=np.uint64)
    j = np.asarray(j, dtype=np.uint64)
    k = np.asarray(k, dtype=np.uint64)
    n = np.uint64(1) << np.uint64(depth)
    if np.any(i >= n) or np.any(j >= n) or np.any(k >= n):
        raise ValueError(f"cell index out of range for depth {depth}")
    code = np.zeros_like(i)
    for b in range(depth):
        bb = np.uint64(b)
        code |= ((i >> bb) & np.uint64(1)) << np.uint64(3 * b + 2)
        code |= ((j >> bb) & np.uint64(1)) << np.uint64(3 * b + 1)
        code |= ((k >> bb) & np.uint64(1)) << np.uint64(3 * b)
    return code if code.ndim else np.uint64(code)


def morton_decode(code, depth: int):
    """Inverse of :func:`morton_encode`; returns (i, j, k)."""
    code = np.asarray(code, dtype=np.uint64)
    i = np.zeros_like(code)
    j = np.zeros_like(code)
    k = np.zeros_like(code)
    for b in range(depth):
        bb = np.uint64(b)
        i |= ((code >> np.uint64(3 * b + 2)) & np.uint64(1)) << bb
        j |= ((code >> np.uint64(3 * b + 1)) & np.uint64(1)) << bb
        k |= ((code >> np.uint64(3 * b)) & np.uint64(1)) << bb
    return i, j, k


@dataclass(frozen=True)
class NodeKey:
    depth: int
    morton: int

    def __post_init__(self):
        if not (0 <= self.depth <= MAX_DEPTH):
            raise ValueError(f"depth {self.depth} outside 0..{MAX_DEPTH}")
        if not (0 <= self.morton < 8**self.depth):
            raise ValueError(f"morton {self.morton} out of range at depth {self.depth}")

    def parent(self) -> "NodeKey":
        if self.depth == 0:
            raise ValueError("root has no parent")
        return NodeKey(self.depth - 1, self.morton >> 3)


class LinearOctree:
    """Sorted-array octree with per-leaf feature vectors.

    ``depths``/``mortons``/``child_mask`` describe all nodes (root included);
    ``leaf_features`` has one row per leaf, in node order. Instances are
    treated as immutable: structural edits return new trees.
    """

    def __init__(self, depths, mortons, child_mask, leaf_features):
        self.depths = np.asarray(depths, dtype=np.uint8)
        self.mortons = np.asarray(mortons, dtype=np.uint64)
        self.child_mask = np.asarray(child_mask, dtype=np.uint8)
        self.leaf_features = np.asarray(leaf_features, dtype=np.float64)
        self._composite = self.depths.astype(np.uint64) << np.uint64(60) | self.mortons
        self._validate()
        self._leaf_positions = np.nonzero(self.child_mask == 0)[0]

    def _validate(self):
        n = len(self.depths)
        if len(self.mortons) != n or len(self.child_mask) != n:
            raise ValueError("node array lengths disagree")
        order = np.lexsort((self.mortons, self.depths))
        if not np.array_equal(order, np.arange(n)):
            raise ValueError("nodes must be sorted by (depth, morton)")
        composite = self.depths.astype(np.uint64) << np.uint64(60) | self.mortons
        if len(np.unique(composite)) != n:
            raise ValueError("duplicate node keys")
        if self.max_depth > MAX_DEPTH:
            raise ValueError(f"tree exceeds depth cap {MAX_DEPTH}")
        leaves = int((self.child_mask == 0).sum())
        if self.leaf_features.ndim != 2 or self.leaf_features.shape[0] != leaves:
            raise ValueError("leaf feature rows must match leaf count")
        # parent closure
        non_root = self.depths > 0
        if non_root.any():
            pd = self.depths[non_root] - 1
            pm = self.mortons[non_root] >> np.uint64(3)
            if not self._contains(pd, pm).all():
                raise ValueError("missing parent node")

    # -- lookups ---------------------------------------------------------

    def _contains(self, depths, mortons) -> np.ndarray:
        return self._find(depths, mortons) >= 0

    def _find(self, depths, mortons) -> np.ndarray:
        """Row index per (depth, morton) query, or -1 when absent."""
        depths = np.asarray(depths, dtype=np.int64)
        mortons = np.asarray(mortons, dtype=np.uint64)
        q = depths.astype(np.uint64) << np.uint64(60) | mortons
        pos = np.searchsorted(self._composite, q)
        pos = np.minimum(pos, len(self._composite) - 1)
        hit = self._composite[pos] == q
        return np.where(hit, pos, -1)

    @property
    def node_count(self) -> int:
        return len(self.depths)

    @property
    def max_depth(self) -> int:
        return int(self.depths.max()) if len(self.depths) else 0

    @property
    def feature_width(self) -> int:
        return self.leaf_features.shape[1]

    @property
    def leaf_positions(self) -> np.ndarray:
        """Node-array rows that are leaves, ascending."""
        return self._leaf_positions

    def leaf_keys(self) -> tuple[np.ndarray, np.ndarray]:
        rows = self._leaf_positions
        return self.depths[rows], self.mortons[rows]

    def leaf_count(self, depth: int | None = None) -> int:
        d, _ = self.leaf_keys()
        return int(len(d) if depth is None else (d == depth).sum())

    def nodes_at(self, depth: int) -> int:
        return int((self.depths == depth).sum())

    def leaf_cells(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-leaf (depth, lower corner, side length) in world coordinates."""
        d, m = self.leaf_keys()
        lo = np.empty((len(d), 3))
        size = DOMAIN_SIZE / (2.0 ** d.astype(np.float64))
        for depth in np.unique(d):
            sel = d == depth
            i, j, k = morton_decode(m[sel], int(depth))
            h = DOMAIN_SIZE / 2.0**int(depth)
            lo[sel, 0] = DOMAIN_MIN + i.astype(np.float64) * h
            lo[sel, 1] = DOMAIN_MIN + j.astype(np.float64) * h
            lo[sel, 2] = DOMAIN_MIN + k.astype(np.float64) * h
        return d, lo, size

    def with_features(self, feats: np.ndarray) -> "LinearOctree":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.shape[0] != len(self._leaf_positions):
            raise ValueError("feature rows must match leaf count")
        return LinearOctree(self.depths, self.mortons, self.child_mask, feats)

    # -- structural equality (features excluded) --------------------------

    def same_topology(self, other: "LinearOctree") -> bool:
        return (
            np.array_equal(self.depths, other.depths)
            and np.array_equal(self.mortons, other.mortons)
            and np.array_equal(self.child_mask, other.child_mask)
        )


def _assemble(keys: set[tuple[int, int]], feature_width: int) -> LinearOctree:
    """Build a tree from a key set, materializing ancestors and child masks."""
    all_keys = set(keys)
    all_keys.add((0, 0))
    for d, m in list(keys):
        while d > 0:
            d, m = d - 1, m >> 3
            all_keys.add((d, m))
    arr = np.array(sorted(all_keys), dtype=np.uint64)
    depths = arr[:, 0].astype(np.uint8)
    mortons = arr[:, 1].astype(np.uint64)
    masks = np.zeros(len(arr), dtype=np.uint8)
    lookup = {(int(d), int(m)): i for i, (d, m) in enumerate(arr)}
    for d, m in all_keys:
        if d == 0:
            continue
        masks[lookup[(d - 1, m >> 3)]] |= 1 << (m & 7)
    leaves = int((masks == 0).sum())
    return LinearOctree(depths, mortons, masks, np.zeros((leaves, feature_width)))


def full_octree(depth: int, feature_width: int = 1) -> LinearOctree:
    """Complete tree: every cell at every level down to ``depth``."""
    if not (0 <= depth <= MAX_DEPTH):
        raise ValueError(f"depth {depth} outside 0..{MAX_DEPTH}")
    depths = []
    mortons = []
    masks = []
    for d in range(depth + 1):
        n = 8**d
        depths.append(np.full(n, d, dtype=np.uint8))
        mortons.append(np.arange(n, dtype=np.uint64))
        masks.append(np.full(n, 0 if d == depth else 0xFF, dtype=np.uint8))
    return LinearOctree(
        np.concatenate(depths),
        np.concatenate(mortons),
        np.concatenate(masks),
        np.zeros((8**depth, feature_width)),
    )


def points_to_cells(points: np.ndarray, depth: int) -> np.ndarray:
    """Map points in [-1, 1]^3 to integer cell indices at ``depth``."""
    points = np.asarray(points, dtype=np.float64)
    if points.size and (points.min() < DOMAIN_MIN or points.max() > DOMAIN_MIN + DOMAIN_SIZE):
        raise ValueError("point outside [-1, 1]^3")
    n = 2**depth
    cells = np.floor((points - DOMAIN_MIN) / DOMAIN_SIZE * n).astype(np.int64)
    return np.clip(cells, 0, n - 1)


def build_from_points(points: np.ndarray, depth: int, feature_width: int = 1) -> LinearOctree:
    """Adaptive tree whose depth-``depth`` leaves are the point-occupied cells."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] == 0:
        raise ValueError("expected a non-empty N x 3 point array")
    if not (0 <= depth <= MAX_DEPTH):
        raise ValueError(f"depth {depth} outside 0..{MAX_DEPTH}")
    cells = points_to_cells(points, depth)
    codes = np.unique(morton_encode(cells[:, 0], cells[:, 1], cells[:, 2], depth))
    return _assemble({(depth, int(c)) for c in codes}, feature_width)


def split(tree: LinearOctree, leaf_mask) -> LinearOctree:
    """Give 8 children to each masked leaf; children copy the parent feature."""
    leaf_mask = np.asarray(leaf_mask, dtype=bool)
    rows = tree.leaf_positions
    if leaf_mask.shape != (len(rows),):
        raise ValueError("mask length must equal leaf count")
    if not leaf_mask.any():
        return LinearOctree(tree.depths, tree.mortons, tree.child_mask, tree.leaf_features)
    sel = rows[leaf_mask]
    if (tree.depths[sel] >= MAX_DEPTH).any():
        raise ValueError(f"cannot split leaves at depth {MAX_DEPTH}")

    masks0 = tree.child_mask.copy()
    masks0[sel] = 0xFF
    child_d = np.repeat(tree.depths[sel].astype(np.uint8) + 1, 8)
    child_m = np.repeat(tree.mortons[sel] << np.uint64(3), 8) + np.tile(
        np.arange(8, dtype=np.uint64), len(sel)
    )
    depths = np.concatenate([tree.depths, child_d])
    mortons = np.concatenate([tree.mortons, child_m])
    masks = np.concatenate([masks0, np.zeros(len(child_d), dtype=np.uint8)])
    order = np.lexsort((mortons, depths))
    depths, mortons, masks = depths[order], mortons[order], masks[order]

    new_tree = LinearOctree(
        depths, mortons, masks, np.zeros((int((masks == 0).sum()), tree.feature_width))
    )
    # new leaves are either surviving old leaves or children of split leaves
    old_d, old_m = tree.leaf_keys()
    old_comp = old_d.astype(np.uint64) << np.uint64(60) | old_m
    nd, nm = new_tree.leaf_keys()
    comp = nd.astype(np.uint64) << np.uint64(60) | nm
    pos = np.minimum(np.searchsorted(old_comp, comp), len(old_comp) - 1)
    direct = old_comp[pos] == comp
    feats = np.empty((len(nd), tree.feature_width))
    feats[direct] = tree.leaf_features[pos[direct]]
    pcomp = (nd[~direct].astype(np.uint64) - 1) << np.uint64(60) | (nm[~direct] >> np.uint64(3))
    ppos = np.searchsorted(old_comp, pcomp)
    feats[~direct] = tree.leaf_features[ppos]
    return new_tree.with_features(feats)


@dataclass
class DualGraph:
    """Face adjacency between leaves: undirected edges with an axis tag."""

    edges: np.ndarray  # (E, 2) leaf indices, first < second
    axes: np.ndarray  # (E,) 0:x 1:y 2:z

    @property
    def edge_count(self) -> int:
        return len(self.edges)


_DIRS = [(1, 0, 0, 0), (-1, 0, 0, 0), (0, 1, 0, 1), (0, -1, 0, 1), (0, 0, 1, 2), (0, 0, -1, 2)]


def dual_graph(tree: LinearOctree) -> DualGraph:
    """All face-adjacent leaf pairs, including pairs at different depths.

    For each leaf and face direction, the same-depth neighbor cell key is
    walked up to its first existing ancestor; only leaf hits are recorded
    (finer neighbors report the shared face from their own side, so every
    cross-depth pair is still found exactly once after deduplication).
    """
    d, m = tree.leaf_keys()
    leaf_of_row = np.full(tree.node_count, -1, dtype=np.int64)
    leaf_of_row[tree.leaf_positions] = np.arange(len(tree.leaf_positions))

    pairs = []
    for dd in np.unique(d):
        sel = np.nonzero(d == dd)[0]
        i, j, k = morton_decode(m[sel], int(dd))
        i, j, k = i.astype(np.int64), j.astype(np.int64), k.astype(np.int64)
        n = 1 << int(dd)
        for dx, dy, dz, axis in _DIRS:
            ni, nj, nk = i + dx, j + dy, k + dz
            ok = (ni >= 0) & (ni < n) & (nj >= 0) & (nj < n) & (nk >= 0) & (nk < n)
            if not ok.any():
                continue
            src = sel[ok]
            code = morton_encode(ni[ok], nj[ok], nk[ok], int(dd))
            code = np.atleast_1d(code)
            row = np.full(len(src), -1, dtype=np.int64)
            pending = np.arange(len(src))
            cur = code.copy()
            for t in range(int(dd), -1, -1):
                hit = tree._find(np.full(len(pending), t), cur)
                done = hit >= 0
                row[pending[done]] = hit[done]
                pending = pending[~done]
                if len(pending) == 0:
                    break
                cur = cur[~done] >> np.uint64(3)
            other = leaf_of_row[row]
            keep = other >= 0  # internal hits are reported from the finer side
            a = src[keep]
            b = other[keep]
            lo = np.minimum(a, b)
            hi = np.maximum(a, b)
            pairs.append(np.stack([lo, hi, np.full(len(lo), axis, dtype=np.int64)], axis=1))

    if not pairs:
        return DualGraph(np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64))
    arr = np.unique(np.concatenate(pairs, axis=0), axis=0)
    return DualGraph(arr[:, :2], arr[:, 2])


def locate_leaves(tree: LinearOctree, points: np.ndarray):
    """Containing leaf per query point.

    Returns ``(leaf_idx, offsets)`` where ``leaf_idx`` indexes the leaf list
    (-1 when the point falls in a region pruned from the tree) and
    ``offsets`` are in-cell coordinates normalized to [-1, 1]^3.
    """
    points = np.asarray(points, dtype=np.float64)
    maxd = tree.max_depth
    cells = points_to_cells(points, maxd)
    code = morton_encode(cells[:, 0], cells[:, 1], cells[:, 2], maxd)
    n = len(points)
    row = np.full(n, -1, dtype=np.int64)
    unresolved = np.arange(n)
    cur = code.copy()
    for depth in range(maxd, -1, -1):
        if len(unresolved) == 0:
            break
        hit = tree._find(np.full(len(unresolved), depth), cur)
        ok = hit >= 0
        row[unresolved[ok]] = hit[ok]
        unresolved = unresolved[~ok]
        cur = cur[~ok] >> np.uint64(3)

    is_leaf = tree.child_mask[row] == 0
    leaf_of_row = np.full(tree.node_count, -1, dtype=np.int64)
    leaf_of_row[tree.leaf_positions] = np.arange(len(tree.leaf_positions))
    leaf_idx = np.where(is_leaf, leaf_of_row[row], -1)

    offsets = np.zeros((n, 3))
    ok = leaf_idx >= 0
    if ok.any():
        d, lo, size = tree.leaf_cells()
        li = leaf_idx[ok]
        offsets[ok] = (points[ok] - lo[li]) / size[li, None] * 2.0 - 1.0
    return leaf_idx, offsets


def full_grid_order(depth: int) -> tuple[np.ndarray, np.ndarray]:
    """Permutations between morton leaf order and x-major grid order.

    In a full octree the leaf row of cell (i,j,k) equals its morton code, so
    ``grid = feats[to_grid]`` reorders morton-ordered rows into x-major rows
    and ``feats = grid[to_morton]`` inverts it.
    """
    g = 2**depth
    r = np.arange(g, dtype=np.uint64)
    i, j, k = np.meshgrid(r, r, r, indexing="ij")
    to_grid = morton_encode(i.ravel(), j.ravel(), k.ravel(), depth).astype(np.int64)
    to_morton = np.argsort(to_grid)
    return to_grid, to_morton


def save_octree(path, tree: LinearOctree) -> None:
    """Serialize: header, sorted node records, then leaf features (f64 LE)."""
    with open(path, "wb") as f:
        f.write(OCT_MAGIC)
        f.write(
            struct.pack(
                "<IIIQQ",
                OCT_VERSION,
                tree.max_depth,
                tree.feature_width,
                tree.node_count,
                tree.leaf_count(),
            )
        )
        f.write(tree.depths.astype("<u1").tobytes())
        f.write(tree.mortons.astype("<u8").tobytes())
        f.write(tree.child_mask.astype("<u1").tobytes())
        f.write(np.ascontiguousarray(tree.leaf_features, dtype="<f8").tobytes())


def load_octree(path) -> LinearOctree:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != OCT_MAGIC:
        raise ValueError(f"{path}: not an octree file")
    version, _maxd, width, nodes, leaves = struct.unpack_from("<IIIQQ", blob, 8)
    if version != OCT_VERSION:
        raise ValueError(f"{path}: unsupported octree version {version}")
    off = 8 + struct.calcsize("<IIIQQ")
    depths = np.frombuffer(blob, dtype="<u1", count=nodes, offset=off).copy()
    off += nodes
    mortons = np.frombuffer(blob, dtype="<u8", count=nodes, offset=off).copy()
    off += 8 * nodes
    masks = np.frombuffer(blob, dtype="<u1", count=nodes, offset=off).copy()
    off += nodes
    feats = np.frombuffer(blob, dtype="<f8", count=leaves * width, offset=off).reshape(
        leaves, width
    )
    return LinearOctree(depths, mortons, masks, feats.copy())
