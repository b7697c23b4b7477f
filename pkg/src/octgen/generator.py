"""Two-scale part-conditioned generator over octree features.

Scale 1 owns depths 4 -> 6: a dense-grid U-Net denoises the full depth-4
feature grid from pure noise, then two (grow, re-noise to the restart
timestep, re-denoise) rounds driven by per-depth split predictors take the
tree to depth 6, with a graph network handling the adaptive topologies.
Scale 2 owns depths 6 -> 8 with its own graph network and predictors: it
first refines the hand-over features from the restart timestep, then runs
two more growth rounds. Cross-attention against part features is inserted
after every self-attention layer (U-Net) and after every graph residual
block, gated per scale by config flags.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import diffusion as dif
from . import tensor as T
from .attention import AttentionParams, attention_weights, cross_attention, self_attention
from .octree import LinearOctree, MAX_DEPTH, dual_graph, full_grid_order, full_octree, split


def timestep_embed(t: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding, interleaved [sin, cos] pairs at geometric frequencies."""
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / half)
    angles = t * freqs
    out = np.empty(dim)
    out[0::2] = np.sin(angles)
    out[1::2] = np.cos(angles)
    return out


def _affine(prefix, tag, fin, fout, init_seed, zero=False):
    wn, bn = f"{prefix}/{tag}/w", f"{prefix}/{tag}/b"
    if zero:
        w = T.Parameter(wn, np.zeros((fin, fout)))
    else:
        s = 1.0 / np.sqrt(fin)
        w = T.Parameter(wn, T.init_rng(wn, init_seed).uniform(-s, s, (fin, fout)))
    return w, T.Parameter(bn, np.zeros(fout))


def _conv(prefix, tag, cin, cout, init_seed, zero=False):
    return _affine(prefix, tag, 27 * cin, cout, init_seed, zero=zero)


class _ResBlock3d:
    """conv -> timestep shift -> silu -> zero-init conv, with residual."""

    def __init__(self, prefix, width, temb_dim, init_seed):
        self.width = width
        self.c1 = _conv(prefix, "c1", width, width, init_seed)
        self.c2 = _conv(prefix, "c2", width, width, init_seed, zero=True)
        self.temb = _affine(prefix, "temb", temb_dim, width, init_seed)

    def parameters(self):
        return [*self.c1, *self.c2, *self.temb]

    def forward(self, x, temb_row, grid):
        # fold the timestep shift into the conv bias (small-side add)
        shift = T.matmul(temb_row, self.temb[0].value) + self.temb[1].value
        h = T.conv3(x, self.c1[0].value, (self.c1[1].value + shift).reshape(-1), grid)
        h = T.silu(h)
        return x + T.conv3(h, self.c2[0].value, self.c2[1].value, grid)


class _AttnPair:
    """Self-attention followed by cross-attention against part features."""

    def __init__(self, prefix, width, part_width, d_k, init_seed):
        self.self_p = AttentionParams(width, width, d_k, init_seed, prefix=f"{prefix}/self")
        self.cross_p = AttentionParams(width, part_width, d_k, init_seed, prefix=f"{prefix}/cross")

    def parameters(self):
        return self.self_p.parameters() + self.cross_p.parameters()

    def forward(self, h, parts, use_cross):
        h = self_attention(h, self.self_p)
        if use_cross:
            h = cross_attention(h, parts.features, parts.mask, self.cross_p)
        return h


class CoarseUNet:
    """Dense-grid denoiser: three resolutions (G -> G/2 -> G/4 -> G/2 -> G),
    residual blocks everywhere, attention pairs at the two coarsest
    resolutions, skip connections, zero-init output head."""

    def __init__(self, grid=16, in_width=8, width=16, temb_dim=32, part_width=64, d_k=16,
                 use_cross=True, init_seed=0, prefix="coarse"):
        if grid % 4 != 0 and grid != 4:
            raise ValueError("grid must be divisible by 4")
        self.grid = grid
        self.in_width = in_width
        self.width = width
        self.temb_dim = temb_dim
        self.use_cross = use_cross
        w2 = width * 2
        s = init_seed
        self.in_conv = _conv(prefix, "in", in_width, width, s)
        self.enc0 = _ResBlock3d(f"{prefix}/enc0", width, temb_dim, s)
        self.down0 = _conv(prefix, "down0", width, w2, s)
        self.enc1 = _ResBlock3d(f"{prefix}/enc1", w2, temb_dim, s)
        self.attn1 = _AttnPair(f"{prefix}/attn1", w2, part_width, d_k, s)
        self.down1 = _conv(prefix, "down1", w2, w2, s)
        self.mid = _ResBlock3d(f"{prefix}/mid", w2, temb_dim, s)
        self.attn_mid = _AttnPair(f"{prefix}/attn_mid", w2, part_width, d_k, s)
        self.mid2 = _ResBlock3d(f"{prefix}/mid2", w2, temb_dim, s)
        self.up1 = _conv(prefix, "up1", w2, w2, s)
        self.fuse1 = _conv(prefix, "fuse1", 2 * w2, w2, s)
        self.dec1 = _ResBlock3d(f"{prefix}/dec1", w2, temb_dim, s)
        self.attn_dec1 = _AttnPair(f"{prefix}/attn_dec1", w2, part_width, d_k, s)
        self.up0 = _conv(prefix, "up0", w2, width, s)
        self.fuse0 = _conv(prefix, "fuse0", 2 * width, width, s)
        self.dec0 = _ResBlock3d(f"{prefix}/dec0", width, temb_dim, s)
        self.out_conv = _conv(prefix, "out", width, in_width, s, zero=True)

    def parameters(self):
        out = [*self.in_conv, *self.down0, *self.down1, *self.up1, *self.fuse1,
               *self.up0, *self.fuse0, *self.out_conv]
        for blk in (self.enc0, self.enc1, self.mid, self.mid2, self.dec1, self.dec0):
            out += blk.parameters()
        for ap in (self.attn1, self.attn_mid, self.attn_dec1):
            out += ap.parameters()
        return out

    def forward(self, x_t: T.Tensor, t: int, parts) -> T.Tensor:
        g = self.grid
        if x_t.shape != (g**3, self.in_width):
            raise ValueError(f"expected ({g**3}, {self.in_width}) grid, got {x_t.shape}")
        temb = T.tensor(timestep_embed(t, self.temb_dim)[None])
        use_cross = self.use_cross and parts is not None

        h0 = T.conv3(x_t, self.in_conv[0].value, self.in_conv[1].value, g)
        h0 = self.enc0.forward(h0, temb, g)
        h1 = T.conv3(T.avg_pool3(h0, g), self.down0[0].value, self.down0[1].value, g // 2)
        h1 = self.enc1.forward(h1, temb, g // 2)
        h1 = self.attn1.forward(h1, parts, use_cross)
        h2 = T.conv3(T.avg_pool3(h1, g // 2), self.down1[0].value, self.down1[1].value, g // 4)
        h2 = self.mid.forward(h2, temb, g // 4)
        h2 = self.attn_mid.forward(h2, parts, use_cross)
        h2 = self.mid2.forward(h2, temb, g // 4)
        u1 = T.conv3(T.upsample3(h2, g // 4), self.up1[0].value, self.up1[1].value, g // 2)
        u1 = T.conv3(T.concat([u1, h1], axis=1), self.fuse1[0].value, self.fuse1[1].value, g // 2)
        u1 = self.dec1.forward(u1, temb, g // 2)
        u1 = self.attn_dec1.forward(u1, parts, use_cross)
        u0 = T.conv3(T.upsample3(u1, g // 2), self.up0[0].value, self.up0[1].value, g)
        u0 = T.conv3(T.concat([u0, h0], axis=1), self.fuse0[0].value, self.fuse0[1].value, g)
        u0 = self.dec0.forward(u0, temb, g)
        return T.conv3(u0, self.out_conv[0].value, self.out_conv[1].value, g)


class GraphOps:
    """Closed-neighborhood mean operator for one octree topology."""

    def __init__(self, tree: LinearOctree):
        n = tree.leaf_count()
        g = dual_graph(tree)
        e = g.edges
        rows = np.concatenate([e[:, 0], e[:, 1], np.arange(n)])
        cols = np.concatenate([e[:, 1], e[:, 0], np.arange(n)])
        deg = np.bincount(rows, minlength=n).astype(np.float64)
        vals = 1.0 / deg[rows]
        self.n = n
        self.mat = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        self.mat_t = self.mat.T.tocsr()

    def mean_neighbors(self, x: T.Tensor) -> T.Tensor:
        return T.sparse_matmul(self.mat, self.mat_t, x)


class FineGraphNet:
    """Graph denoiser: K blocks of (neighbor mean -> affine + timestep shift
    -> silu -> residual) each followed by cross-attention, between an input
    projection and a zero-init output head."""

    def __init__(self, in_width=8, width=32, blocks=4, temb_dim=32, part_width=64, d_k=16,
                 use_cross=True, init_seed=0, prefix="fine"):
        self.in_width = in_width
        self.width = width
        self.blocks = blocks
        self.temb_dim = temb_dim
        self.use_cross = use_cross
        s = init_seed
        self.in_aff = _affine(prefix, "in", in_width, width, s)
        self.block_aff = []
        self.block_temb = []
        self.block_cross = []
        for k in range(blocks):
            self.block_aff.append(_affine(prefix, f"b{k}/agg", width, width, s))
            self.block_temb.append(_affine(prefix, f"b{k}/temb", temb_dim, width, s))
            self.block_cross.append(
                AttentionParams(width, part_width, d_k, s, prefix=f"{prefix}/b{k}/cross")
            )
        self.out_aff = _affine(prefix, "out", width, in_width, s, zero=True)

    def parameters(self):
        out = [*self.in_aff, *self.out_aff]
        for k in range(self.blocks):
            out += [*self.block_aff[k], *self.block_temb[k]]
            out += self.block_cross[k].parameters()
        return out

    def forward(self, gops: GraphOps, feats: T.Tensor, t: int, parts, record_weights=None) -> T.Tensor:
        if feats.shape != (gops.n, self.in_width):
            raise ValueError(f"expected ({gops.n}, {self.in_width}) features, got {feats.shape}")
        temb = T.tensor(timestep_embed(t, self.temb_dim)[None])
        use_cross = self.use_cross and parts is not None
        h = T.matmul(feats, self.in_aff[0].value) + self.in_aff[1].value
        for k in range(self.blocks):
            agg = gops.mean_neighbors(h)
            shift = T.matmul(temb, self.block_temb[k][0].value) + self.block_temb[k][1].value
            z = T.matmul(agg, self.block_aff[k][0].value) + (self.block_aff[k][1].value + shift)
            h = h + T.silu(z)
            if use_cross:
                if record_weights is not None:
                    w = attention_weights(h, parts.features, parts.mask, self.block_cross[k])
                    record_weights.append(w.data.copy())
                h = cross_attention(h, parts.features, parts.mask, self.block_cross[k])
        return T.matmul(h, self.out_aff[0].value) + self.out_aff[1].value


class SplitPredictor:
    """Per-leaf affine head mapping a denoised feature row to a split logit."""

    def __init__(self, in_width=8, init_seed=0, prefix="split"):
        self.in_width = in_width
        self.w, self.b = _affine(prefix, "head", in_width, 1, init_seed)

    def parameters(self):
        return [self.w, self.b]

    def logits(self, feats: T.Tensor) -> T.Tensor:
        return T.matmul(feats, self.w.value) + self.b.value


def grow(tree: LinearOctree, feats: np.ndarray, predictor: SplitPredictor):
    """Split every leaf whose predicted occupancy probability exceeds 0.5.

    Children inherit the parent feature row; unsplit leaves are retained.
    Returns (tree', feats').
    """
    if tree.max_depth >= MAX_DEPTH:
        raise ValueError(f"cannot grow a tree already at depth {MAX_DEPTH}")
    with T.no_grad():
        logits = predictor.logits(T.tensor(feats)).data[:, 0]
    mask = logits > 0.0  # sigmoid(logit) > 0.5
    new_tree = split(tree.with_features(feats), mask)
    return new_tree, new_tree.leaf_features


@dataclass
class GenerationConfig:
    depth_start: int = 4
    depth_coarse: int = 6  # scale-boundary depth
    depth_fine: int = 8  # final depth
    restart_step: int = 25  # re-noise level for post-growth denoising rounds

    def __post_init__(self):
        if not (0 <= self.depth_start <= self.depth_coarse <= self.depth_fine <= MAX_DEPTH):
            raise ValueError("depths must satisfy start <= coarse <= fine <= 8")
        if self.restart_step < 1:
            raise ValueError("restart step must be >= 1")


class TwoScaleGenerator:
    """Bundles both scales plus the per-depth split predictors."""

    def __init__(self, coarse: CoarseUNet, refiner: FineGraphNet, fine: FineGraphNet,
                 predictors: dict[int, SplitPredictor], schedule: dif.NoiseSchedule,
                 config: GenerationConfig):
        self.coarse = coarse
        self.refiner = refiner
        self.fine = fine
        self.predictors = predictors
        self.schedule = schedule
        self.config = config
        if config.restart_step > schedule.steps:
            raise ValueError("restart step exceeds the schedule")

    def parameters(self):
        out = self.coarse.parameters() + self.refiner.parameters() + self.fine.parameters()
        for p in sorted(self.predictors):
            out += self.predictors[p].parameters()
        return out

    def _stage_seeds(self, seed: int, n=16) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), 0x57A6E5)))
        return rng.integers(0, 2**62, size=n)

    def _denoise_tree(self, net, tree, feats, parts, stage_seed):
        gops = GraphOps(tree)

        def model(x_t, t, cond):
            return net.forward(gops, x_t, t, cond)

        rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(stage_seed), 0x4E)))
        x = dif.renoise(feats, self.config.restart_step, self.schedule, rng)
        return dif.sample(
            model, feats.shape, parts, self.schedule, seed=int(stage_seed),
            t_start=self.config.restart_step, x_init=x,
        )

    def generate(self, parts, seed: int):
        """Sample one shape; returns (tree at depth_fine, info dict)."""
        cfg = self.config
        seeds = self._stage_seeds(seed)
        stage = 0

        # scale 1: dense grid diffusion at the start depth
        g3 = 8**cfg.depth_start
        c = self.coarse.in_width

        def coarse_model(x_t, t, cond):
            return self.coarse.forward(x_t, t, cond)

        grid = dif.sample(coarse_model, (g3, c), parts, self.schedule, seed=int(seeds[stage]))
        stage += 1
        _, to_morton = full_grid_order(cfg.depth_start)
        tree = full_octree(cfg.depth_start, c).with_features(grid[to_morton])

        for d in range(cfg.depth_start, cfg.depth_coarse):
            tree, feats = grow(tree, tree.leaf_features, self.predictors[d])
            x = self._denoise_tree(self.refiner, tree, feats, parts, seeds[stage])
            stage += 1
            tree = tree.with_features(x)
        boundary_depth = tree.max_depth
        boundary_tree = tree

        # scale 2: refine the hand-over, then grow to the final depth
        x = self._denoise_tree(self.fine, tree, tree.leaf_features, parts, seeds[stage])
        stage += 1
        tree = tree.with_features(x)
        for d in range(cfg.depth_coarse, cfg.depth_fine):
            tree, feats = grow(tree, tree.leaf_features, self.predictors[d])
            x = self._denoise_tree(self.fine, tree, feats, parts, seeds[stage])
            stage += 1
            tree = tree.with_features(x)

        info = {
            "boundary_depth": boundary_depth,
            "final_depth": tree.max_depth,
            "boundary_tree": boundary_tree,
        }
        return tree, info

    def attention_snapshot(self, tree: LinearOctree, parts) -> list[np.ndarray]:
        """Cross-attention weights of each fine block at t=1 (for inspection)."""
        gops = GraphOps(tree)
        record: list[np.ndarray] = []
        with T.no_grad():
            self.fine.forward(gops, T.tensor(tree.leaf_features), 1, parts, record_weights=record)
        return record
