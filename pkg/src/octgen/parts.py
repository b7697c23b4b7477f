"""Per-part feature extraction from labeled point clouds.

A shared point MLP (3 -> hidden -> F) followed by max-pooling over the
points of each semantic part yields one F-vector per part. Parts with no
points get a zero row and are flagged in the mask so attention can skip
them. The encoder is trained jointly with the rest of the pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import LabeledPointCloud


@dataclass
class PartFeatureSet:
    """P x F matrix of part features plus a validity mask."""

    features: T.Tensor
    mask: np.ndarray  # True where the part has points
    category: str
    source_id: str = ""

    @property
    def part_count(self) -> int:
        return self.features.shape[0]

    def to_text(self) -> str:
        lines = [f"# part features: category {self.category} source {self.source_id or '-'}"]
        for p in range(self.part_count):
            row = " ".join(f"{v:.17g}" for v in self.features.data[p])
            lines.append(f"{int(self.mask[p])} {row}")
        return "\n".join(lines) + "\n"


class PartEncoder:
    """Shared-MLP + per-part max-pool encoder."""

    def __init__(self, feature_width=64, hidden=128, init_seed=0, prefix="encoder"):
        self.feature_width = feature_width
        self.hidden = hidden
        self.layers = []
        dims = [3, hidden, feature_width]
        for i in range(len(dims) - 1):
            wn, bn = f"{prefix}/l{i}/w", f"{prefix}/l{i}/b"
            scale = 1.0 / np.sqrt(dims[i])
            w = T.Parameter(wn, T.init_rng(wn, init_seed).uniform(-scale, scale, (dims[i], dims[i + 1])))
            b = T.Parameter(bn, np.zeros(dims[i + 1]))
            self.layers.append((w, b))

    def parameters(self) -> list[T.Parameter]:
        return [p for pair in self.layers for p in pair]

    def encode(self, cloud: LabeledPointCloud, source_id="") -> PartFeatureSet:
        x = T.tensor(cloud.points)
        h = T.mlp_forward(x, self.layers, activation="silu")
        pooled, empty = T.group_max(h, cloud.labels, cloud.part_count)
        return PartFeatureSet(pooled, ~empty, cloud.category, source_id)


def encode_parts(cloud: LabeledPointCloud, encoder: PartEncoder, source_id="") -> PartFeatureSet:
    return encoder.encode(cloud, source_id)
