"""Point-cloud sampling, farthest-point downsampling, and corpus file I/O.

Clouds are stored as ``.xyzl`` text ("x y z label" per line, '#' comments)
with 17 significant digits so coordinates round-trip through text exactly.
A corpus is a directory of clouds plus a manifest listing one
``seed category path`` record per shape.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sdf import PART_COUNTS, AnalyticSdf, ShapeSpec, generate_shape


class DataError(RuntimeError):
    """Malformed or inconsistent data files / degenerate inputs."""


@dataclass
class LabeledPointCloud:
    points: np.ndarray  # (N, 3) in [-1, 1]^3
    labels: np.ndarray  # (N,) ints in 0..part_count-1
    category: str

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.category not in PART_COUNTS:
            raise DataError(f"unknown category {self.category!r}")
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise DataError("points must be N x 3")
        if self.labels.shape != (len(self.points),):
            raise DataError("one label per point required")
        p = self.part_count
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= p):
            raise DataError(f"label outside 0..{p - 1}")
        if len(self.points) and (np.abs(self.points).max() > 1.0):
            raise DataError("coordinate outside [-1, 1]^3")

    @property
    def part_count(self) -> int:
        return PART_COUNTS[self.category]

    def __len__(self) -> int:
        return len(self.points)


def sample_surface(sdf: AnalyticSdf, n: int, seed: int, tol=1e-5, max_rounds=60) -> LabeledPointCloud:
    """Draw ``n`` points on the zero level set by gradient projection.

    Random domain points are pulled onto the surface with sphere-tracing
    style steps p <- p - sdf(p) * grad/|grad|; draws that fail to reach
    |sdf| < tol within the iteration budget are rejected and redrawn.
    Labels come from the nearest part (per-part SDF argmin).
    """
    if n < 1:
        raise DataError("need at least one sample")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), 0x5AFE)))
    out = np.empty((0, 3))
    rounds = 0
    while len(out) < n:
        rounds += 1
        if rounds > max_rounds:
            raise DataError("surface projection failed to converge")
        p = rng.uniform(-0.95, 0.95, size=(max(2 * (n - len(out)), 256), 3))
        for _ in range(24):
            d = sdf(p)
            live = np.abs(d) > tol * 0.5
            if not live.any():
                break
            g = sdf.gradient(p[live])
            norm = np.linalg.norm(g, axis=-1, keepdims=True)
            norm = np.maximum(norm, 1e-9)
            p[live] = p[live] - d[live, None] * g / norm
        d = sdf(p)
        ok = (np.abs(d) < tol) & (np.abs(p).max(axis=1) <= 1.0)
        out = np.concatenate([out, p[ok]], axis=0)
    out = out[:n]
    return LabeledPointCloud(out, sdf.part_labels(out), sdf.category)


def fps_downsample(cloud: LabeledPointCloud, m: int) -> LabeledPointCloud:
    """Greedy farthest-point subset of size ``m``; the first pick is index 0."""
    n = len(cloud)
    if m > n:
        raise DataError(f"cannot select {m} points from {n}")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = 0
    dist = np.linalg.norm(cloud.points - cloud.points[0], axis=1)
    for i in range(1, m):
        nxt = int(dist.argmax())
        chosen[i] = nxt
        dist = np.minimum(dist, np.linalg.norm(cloud.points - cloud.points[nxt], axis=1))
    return LabeledPointCloud(cloud.points[chosen], cloud.labels[chosen], cloud.category)


def save_cloud(path, cloud: LabeledPointCloud) -> None:
    lines = [f"# category {cloud.category}", f"# parts {cloud.part_count}"]
    for p, l in zip(cloud.points, cloud.labels):
        lines.append(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} {int(l)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_cloud(path) -> LabeledPointCloud:
    category = None
    pts = []
    labels = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            fields = line[1:].split()
            if len(fields) == 2 and fields[0] == "category":
                category = fields[1]
            continue
        fields = line.split()
        if len(fields) != 4:
            raise DataError(f"{path}:{lineno}: expected 'x y z label'")
        try:
            x, y, z = float(fields[0]), float(fields[1]), float(fields[2])
            lab = int(fields[3])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        if max(abs(x), abs(y), abs(z)) > 1.0:
            raise DataError(f"{path}:{lineno}: coordinate outside [-1, 1]^3")
        pts.append((x, y, z))
        labels.append(lab)
    if category is None:
        raise DataError(f"{path}: missing '# category' header")
    p = PART_COUNTS.get(category)
    if p is None:
        raise DataError(f"{path}: unknown category {category!r}")
    labels = np.array(labels, dtype=np.int64)
    bad = np.nonzero((labels < 0) | (labels >= p))[0]
    if len(bad):
        raise DataError(f"{path}: label {labels[bad[0]]} outside 0..{p - 1} (record {bad[0] + 1})")
    return LabeledPointCloud(np.array(pts, dtype=np.float64).reshape(-1, 3), labels, category)


# ---------------------------------------------------------------------------
# corpus: a set of shapes with a manifest
# ---------------------------------------------------------------------------


@dataclass
class CorpusEntry:
    seed: int
    category: str
    path: str  # relative to the manifest directory

    def spec(self) -> ShapeSpec:
        return ShapeSpec(self.category, self.seed)


def write_manifest(path, entries: list[CorpusEntry]) -> None:
    lines = ["# corpus manifest: seed category path"]
    for e in entries:
        lines.append(f"{e.seed} {e.category} {e.path}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[CorpusEntry]:
    entries = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 3:
            raise DataError(f"{path}:{lineno}: expected 'seed category path'")
        entries.append(CorpusEntry(int(fields[0]), fields[1], fields[2]))
    if not entries:
        raise DataError(f"{path}: empty corpus")
    return entries


def corpus_hash(manifest_path) -> str:
    """Content hash of the manifest plus every cloud it references."""
    manifest_path = Path(manifest_path)
    h = hashlib.sha256()
    h.update(manifest_path.read_bytes())
    for e in read_manifest(manifest_path):
        h.update((manifest_path.parent / e.path).read_bytes())
    return h.hexdigest()


def make_corpus(out_dir, category: str, count: int, base_seed: int, dense_points: int, cloud_points: int) -> Path:
    """Generate ``count`` shapes, sample and FPS-reduce each, write the corpus.

    Returns the manifest path. Deterministic in (category, count, seeds).
    """
    if count < 1:
        raise DataError("empty corpus")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        seed = int(base_seed) + i
        spec = ShapeSpec(category, seed)
        sdf = generate_shape(spec)
        dense = sample_surface(sdf, dense_points, seed=seed)
        cloud = fps_downsample(dense, cloud_points)
        name = f"{category}_{seed:04d}.xyzl"
        save_cloud(out_dir / name, cloud)
        entries.append(CorpusEntry(seed, category, name))
    manifest = out_dir / "corpus.manifest"
    write_manifest(manifest, entries)
    return manifest


def majority_leaf_labels(tree, cloud: LabeledPointCloud) -> np.ndarray:
    """Per-leaf part label by majority vote of contained points (-1 if none).

    Ties break toward the smaller label index. Used for inspection and
    report figures; the attention path consumes part features directly.
    """
    from .octree import locate_leaves

    leaf_idx, _ = locate_leaves(tree, cloud.points)
    nleaf = tree.leaf_count()
    p = cloud.part_count
    counts = np.zeros((nleaf, p), dtype=np.int64)
    ok = leaf_idx >= 0
    np.add.at(counts, (leaf_idx[ok], cloud.labels[ok]), 1)
    out = counts.argmax(axis=1)
    out[counts.sum(axis=1) == 0] = -1
    return out
