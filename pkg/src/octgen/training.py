"""Training pipeline: latent/decoder fitting, then the two denoiser scales.

Ground truth per shape comes from its analytic SDF. Octree topology is grown
from the full start-depth tree by splitting every leaf whose center lies
within half a cell diagonal of the surface (the tight bound: a cell can only
intersect the surface if |sdf(center)| <= sqrt(3)/2 * side). Trainable
latents live on the deepest leaves; features at coarser nodes are latent
means over depth-8 descendants, zero for empty cells.

Phases run in order inside one ``train`` call and are individually
checkpointed/resumable:

  0 latent  -- fit per-shape leaf latents + the shared SDF decoder
  1 scale1  -- coarse grid U-Net, the scale-1 graph refiner, split heads for
               the scale-1 growth depths, and the part encoder (jointly)
  2 scale2  -- the scale-2 graph denoiser and its split heads; everything
               from earlier phases stays frozen

Every random draw is keyed by (train_seed, phase, step), so resuming from a
checkpoint reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import diffusion as dif
from . import tensor as T
from .config import RunConfig, config_hash
from .data import LabeledPointCloud, load_cloud, read_manifest, sample_surface
from .field_mesh import SdfDecoder
from .generator import (
    CoarseUNet,
    FineGraphNet,
    GenerationConfig,
    GraphOps,
    SplitPredictor,
    TwoScaleGenerator,
)
from .octree import LinearOctree, full_grid_order, full_octree, split
from .parts import PartEncoder
from .sdf import generate_shape

PHASES = ("latent", "scale1", "scale2")


class TrainingAbort(RuntimeError):
    """Raised when a step produces non-finite numbers; carries diagnostics."""


def band_split_labels(tree: LinearOctree, sdf) -> np.ndarray:
    """Per-leaf surface-band flag: |sdf(center)| <= sqrt(3)/2 * cell side."""
    depths, lo, size = tree.leaf_cells()
    centers = lo + size[:, None] / 2.0
    return np.abs(sdf(centers)) <= (np.sqrt(3.0) / 2.0) * size


def oracle_tree(sdf, depth_start: int, depth_target: int, feature_width: int) -> LinearOctree:
    """Grow the full start-depth tree by band splitting up to the target depth."""
    tree = full_octree(depth_start, feature_width)
    for _ in range(depth_start, depth_target):
        dd, _, _ = tree.leaf_cells()
        mask = band_split_labels(tree, sdf) & (dd < depth_target)
        if not mask.any():
            break
        tree = split(tree, mask)
    return tree


def ancestor_leaf_rows(tree: LinearOctree, depths: np.ndarray, mortons: np.ndarray) -> np.ndarray:
    """Containing-leaf index in ``tree`` for cells at (possibly mixed) depths."""
    n = len(mortons)
    rows = np.full(n, -1, dtype=np.int64)
    depths = np.asarray(depths, dtype=np.int64)
    for d in np.unique(depths):
        sel = np.nonzero(depths == d)[0]
        cur = mortons[sel].astype(np.uint64)
        pending = np.arange(len(sel))
        for t in range(int(d), -1, -1):
            hit = tree._find(np.full(len(pending), t), cur)
            ok = hit >= 0
            rows[sel[pending[ok]]] = hit[ok]
            pending = pending[~ok]
            if len(pending) == 0:
                break
            cur = cur[~ok] >> np.uint64(3)
    leaf_of_row = np.full(tree.node_count, -1, dtype=np.int64)
    leaf_of_row[tree.leaf_positions] = np.arange(tree.leaf_count())
    return leaf_of_row[rows]


def pool_latents(tree: LinearOctree, fine_tree: LinearOctree, z: np.ndarray) -> np.ndarray:
    """Volume-weighted mean of fine-tree leaf latents per leaf of ``tree``.

    Every fine-tree leaf is contained in exactly one leaf of ``tree`` (the
    trees are nested by construction); weights are cell volumes so coarse
    retained leaves count for the space they cover.
    """
    fd, fmort = fine_tree.leaf_keys()
    owners = ancestor_leaf_rows(tree, fd, fmort)
    nleaf = tree.leaf_count()
    c = z.shape[1]
    vol = 8.0 ** (-fd.astype(np.float64))
    out = np.zeros((nleaf, c))
    wsum = np.bincount(owners, weights=vol, minlength=nleaf)
    for ch in range(c):
        out[:, ch] = np.bincount(owners, weights=vol * z[:, ch], minlength=nleaf)
    nz = wsum > 0
    out[nz] /= wsum[nz, None]
    return out


class ShapeData:
    """Per-shape ground truth: SDF, clouds, oracle trees, split labels."""

    def __init__(self, index: int, entry, corpus_dir: Path, cfg: RunConfig):
        self.index = index
        self.entry = entry
        self.sdf = generate_shape(entry.spec())
        self.cloud = load_cloud(corpus_dir / entry.path)
        # dense surface points for near-surface decoder queries (regenerated,
        # not stored: deterministic in the corpus seed)
        self.dense = sample_surface(self.sdf, cfg.dense_points, seed=entry.seed)
        c = cfg.latent_width
        self.trees: dict[int, LinearOctree] = {}
        self.labels: dict[int, np.ndarray] = {}
        tree = full_octree(cfg.depth_start, c)
        for d in range(cfg.depth_start, cfg.depth_fine + 1):
            self.trees[d] = tree
            self.labels[d] = band_split_labels(tree, self.sdf)
            if d < cfg.depth_fine:
                dd, _, _ = tree.leaf_cells()
                tree = split(tree, self.labels[d] & (dd < cfg.depth_fine))
        fine = self.trees[cfg.depth_fine]
        dd, mm = fine.leaf_keys()
        self.fine_sel = dd == cfg.depth_fine  # leaves carrying latents
        self.fine_mortons = mm[self.fine_sel]
        self.latent_rows = int(self.fine_sel.sum())
        # map leaf index in the fine tree -> latent row (or -1)
        self.latent_row_of_leaf = np.full(fine.leaf_count(), -1, dtype=np.int64)
        self.latent_row_of_leaf[np.nonzero(self.fine_sel)[0]] = np.arange(self.latent_rows)
        # filled in once latents are frozen
        self.features: dict[int, np.ndarray] = {}
        self.grid_x0: np.ndarray | None = None
        self.gops: dict[int, GraphOps] = {}

    def freeze_features(self, z: np.ndarray, cfg: RunConfig) -> None:
        for d in range(cfg.depth_start, cfg.depth_fine + 1):
            self.features[d] = pool_latents(self.trees[d], cfg.depth_fine, self.fine_mortons, z)
        to_grid, _ = full_grid_order(cfg.depth_start)
        self.grid_x0 = self.features[cfg.depth_start][to_grid]

    def graph_ops(self, depth: int) -> GraphOps:
        if depth not in self.gops:
            self.gops[depth] = GraphOps(self.trees[depth])
        return self.gops[depth]


def build_networks(cfg: RunConfig) -> dict:
    """All trainable components except the per-shape latents."""
    c, f = cfg.latent_width, cfg.part_feature_width
    nets = {
        "encoder": PartEncoder(f, cfg.encoder_hidden, cfg.init_seed, prefix="encoder"),
        "coarse": CoarseUNet(
            grid=2**cfg.depth_start, in_width=c, width=cfg.unet_width,
            temb_dim=cfg.timestep_dim, part_width=f, d_k=cfg.attention_dk,
            use_cross=cfg.cross_attention_scale1, init_seed=cfg.init_seed, prefix="coarse",
        ),
        "refiner": FineGraphNet(
            in_width=c, width=cfg.fine_width, blocks=cfg.fine_blocks,
            temb_dim=cfg.timestep_dim, part_width=f, d_k=cfg.attention_dk,
            use_cross=cfg.cross_attention_scale1, init_seed=cfg.init_seed, prefix="refiner",
        ),
        "fine": FineGraphNet(
            in_width=c, width=cfg.fine_width, blocks=cfg.fine_blocks,
            temb_dim=cfg.timestep_dim, part_width=f, d_k=cfg.attention_dk,
            use_cross=cfg.cross_attention_scale2, init_seed=cfg.init_seed, prefix="fine",
        ),
        "decoder": SdfDecoder(c, cfg.decoder_hidden, cfg.init_seed, prefix="decoder"),
    }
    splits = {}
    for d in range(cfg.depth_start, cfg.depth_fine):
        splits[d] = SplitPredictor(c, cfg.init_seed, prefix=f"split{d}")
    nets["splits"] = splits
    return nets


def network_parameters(nets: dict) -> list[T.Parameter]:
    out = []
    out += nets["encoder"].parameters()
    out += nets["coarse"].parameters()
    out += nets["refiner"].parameters()
    out += nets["fine"].parameters()
    out += nets["decoder"].parameters()
    for d in sorted(nets["splits"]):
        out += nets["splits"][d].parameters()
    return out


def make_generator(nets: dict, cfg: RunConfig) -> TwoScaleGenerator:
    gcfg = GenerationConfig(cfg.depth_start, cfg.depth_coarse, cfg.depth_fine, cfg.restart_step)
    schedule = dif.make_schedule(cfg.schedule_steps, cfg.beta_start, cfg.beta_end)
    return TwoScaleGenerator(nets["coarse"], nets["refiner"], nets["fine"], nets["splits"], schedule, gcfg)


def _step_rng(train_seed: int, phase: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=(int(train_seed), phase, step)))


def _bce_with_logits(logits: T.Tensor, targets: np.ndarray) -> T.Tensor:
    y = T.tensor(targets.astype(np.float64).reshape(-1, 1))
    return (T.softplus(logits) - logits * y).mean()


class Trainer:
    def __init__(self, cfg: RunConfig, manifest_path, out_dir):
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        manifest_path = Path(manifest_path)
        self.entries = read_manifest(manifest_path)
        if len(self.entries) != cfg.corpus_size:
            raise TrainingAbort(
                f"corpus has {len(self.entries)} shapes, config expects {cfg.corpus_size}"
            )
        self.shapes = [
            ShapeData(i, e, manifest_path.parent, cfg) for i, e in enumerate(self.entries)
        ]
        self.nets = build_networks(cfg)
        self.schedule = dif.make_schedule(cfg.schedule_steps, cfg.beta_start, cfg.beta_end)
        self.latents = []
        for s in self.shapes:
            rng = np.random.default_rng(np.random.SeedSequence(entropy=(cfg.train_seed, 0x1A7, s.index)))
            self.latents.append(
                T.Parameter(f"latents/shape{s.index}", rng.normal(0.0, 0.3, (s.latent_rows, cfg.latent_width)))
            )
        self.phase = 0
        self.step = 0
        self.loss_rows: list[tuple[str, int, float]] = []

    # -- checkpoint plumbing -------------------------------------------

    def _all_params(self) -> list[T.Parameter]:
        return network_parameters(self.nets) + self.latents

    def _phase_params(self, phase: int) -> list[T.Parameter]:
        cfg = self.cfg
        if phase == 0:
            return self.nets["decoder"].parameters() + self.latents
        if phase == 1:
            out = self.nets["coarse"].parameters() + self.nets["refiner"].parameters()
            out += self.nets["encoder"].parameters()
            for d in range(cfg.depth_start, cfg.depth_coarse):
                out += self.nets["splits"][d].parameters()
            return out
        out = self.nets["fine"].parameters()
        for d in range(cfg.depth_coarse, cfg.depth_fine):
            out += self.nets["splits"][d].parameters()
        return out

    def _phase_optimizer(self, phase: int) -> T.Adam:
        overrides = {"latents/": self.cfg.latent_learning_rate} if phase == 0 else None
        return T.Adam(self._phase_params(phase), lr=self.cfg.learning_rate, lr_overrides=overrides)

    def checkpoint_path(self) -> Path:
        return self.out_dir / "model.ckpt"

    def save(self, opt: T.Adam | None) -> None:
        arrays = {p.name: p.data for p in self._all_params()}
        if opt is not None:
            arrays.update(opt.state_arrays())
        meta = {
            "config_hash": config_hash(self.cfg),
            "phase": str(self.phase),
            "step": str(self.step),
            "loss_rows": str(len(self.loss_rows)),
        }
        for i, name in enumerate(PHASES):
            done = (self.phase > i) or (
                self.phase == i and self.step >= getattr(self.cfg, f"steps_{name}")
            )
            meta[f"done_{name}"] = "1" if done else "0"
        ckpt.save_arrays(self.checkpoint_path(), arrays, meta)
        self._write_loss_log()

    def _write_loss_log(self) -> None:
        lines = ["phase\tstep\tloss"]
        for phase, step, loss in self.loss_rows:
            lines.append(f"{phase}\t{step}\t{loss:.12g}")
        (self.out_dir / "loss_log.tsv").write_text("\n".join(lines) + "\n")

    def load(self, path) -> T.Adam | None:
        arrays, meta = ckpt.load_arrays(path)
        if meta.get("config_hash") != config_hash(self.cfg):
            raise TrainingAbort("checkpoint was produced by a different config")
        for p in self._all_params():
            if p.name not in arrays:
                raise TrainingAbort(f"checkpoint missing parameter {p.name}")
            p.set_data(arrays[p.name].reshape(p.shape))
        self.phase = int(meta["phase"])
        self.step = int(meta["step"])
        self._reload_loss_log(int(meta.get("loss_rows", "0")))
        opt = None
        if f"opt/t" in arrays:
            opt = self._phase_optimizer(self.phase)
            opt.load_state_arrays(arrays)
        if self.phase > 0:
            self._freeze_latents()
        return opt

    def _reload_loss_log(self, rows: int) -> None:
        path = self.out_dir / "loss_log.tsv"
        self.loss_rows = []
        if not path.exists():
            return
        for line in path.read_text().splitlines()[1:]:
            phase, step, loss = line.split("\t")
            self.loss_rows.append((phase, int(step), float(loss)))
        self.loss_rows = self.loss_rows[:rows]

    def _freeze_latents(self) -> None:
        for s, z in zip(self.shapes, self.latents):
            s.freeze_features(z.data, self.cfg)

    # -- phase losses ----------------------------------------------------

    def _latent_step_loss(self, rng: np.random.Generator) -> T.Tensor:
        cfg = self.cfg
        per_shape = max(cfg.queries_per_step // len(self.shapes), 32)
        total = None
        for s, z in zip(self.shapes, self.latents):
            n_uni = per_shape // 2
            q_uni = rng.uniform(-1.0, 1.0, (n_uni, 3))
            idx = rng.integers(0, len(s.dense.points), per_shape - n_uni)
            q_surf = s.dense.points[idx] + rng.normal(0.0, 0.05, (per_shape - n_uni, 3))
            q = np.clip(np.concatenate([q_uni, q_surf]), -1.0, 1.0)
            target = np.clip(s.sdf(q), -cfg.sdf_clamp, cfg.sdf_clamp)

            from .octree import locate_leaves

            leaf_idx, offsets = locate_leaves(s.trees[cfg.depth_fine], q)
            lat_rows = s.latent_row_of_leaf[leaf_idx]
            dec = self.nets["decoder"]
            hit = lat_rows >= 0
            parts_loss = []
            if hit.any():
                lat = T.gather_rows(z.value, lat_rows[hit])
                pred = dec.forward(lat, T.tensor(offsets[hit]))
                d = pred - T.tensor(target[hit].reshape(-1, 1))
                parts_loss.append((d * d).sum())
            if (~hit).any():
                zero_lat = T.tensor(np.zeros((int((~hit).sum()), cfg.latent_width)))
                pred = dec.forward(zero_lat, T.tensor(offsets[~hit]))
                d = pred - T.tensor(target[~hit].reshape(-1, 1))
                parts_loss.append((d * d).sum())
            loss = parts_loss[0] if len(parts_loss) == 1 else parts_loss[0] + parts_loss[1]
            loss = loss * (1.0 / per_shape) + cfg.latent_reg * (z.value * z.value).mean()
            total = loss if total is None else total + loss
        return total * (1.0 / len(self.shapes))

    def _encode(self, s: ShapeData, trainable: bool):
        if trainable:
            return self.nets["encoder"].encode(s.cloud, source_id=s.entry.path)
        with T.no_grad():
            return self.nets["encoder"].encode(s.cloud, source_id=s.entry.path)

    def _denoise_loss(self, net, s: ShapeData, depth: int, t: int, eps_rng, parts) -> T.Tensor:
        gops = s.graph_ops(depth)
        x0 = s.features[depth]
        eps = eps_rng.standard_normal(x0.shape)

        def model(x_t, tt, cond):
            return net.forward(gops, x_t, tt, cond)

        return dif.training_loss(model, x0, t, eps, parts, self.schedule)

    def _split_loss(self, s: ShapeData, depth: int) -> T.Tensor:
        pred = self.nets["splits"][depth]
        logits = pred.logits(T.tensor(s.features[depth]))
        return _bce_with_logits(logits, s.labels[depth])

    def _scale1_step_loss(self, step: int, rng: np.random.Generator) -> T.Tensor:
        cfg = self.cfg
        total = None
        for b in range(cfg.batch_size):
            s = self.shapes[(step * cfg.batch_size + b) % len(self.shapes)]
            parts = self._encode(s, trainable=True)
            # coarse grid denoising over the full schedule
            t = int(rng.integers(1, cfg.schedule_steps + 1))
            eps = rng.standard_normal(s.grid_x0.shape)

            def model(x_t, tt, cond):
                return self.nets["coarse"].forward(x_t, tt, cond)

            loss = dif.training_loss(model, s.grid_x0, t, eps, parts, self.schedule)
            # graph refiner on one adaptive depth, restart-range timesteps
            if cfg.depth_coarse > cfg.depth_start:
                depths = list(range(cfg.depth_start + 1, cfg.depth_coarse + 1))
                d = depths[step % len(depths)]
                t2 = int(rng.integers(1, cfg.restart_step + 1))
                loss = loss + self._denoise_loss(self.nets["refiner"], s, d, t2, rng, parts)
            for d in range(cfg.depth_start, cfg.depth_coarse):
                loss = loss + self._split_loss(s, d)
            total = loss if total is None else total + loss
        return total * (1.0 / cfg.batch_size)

    def _scale2_step_loss(self, step: int, rng: np.random.Generator) -> T.Tensor:
        cfg = self.cfg
        total = None
        for b in range(cfg.batch_size):
            s = self.shapes[(step * cfg.batch_size + b) % len(self.shapes)]
            parts = self._encode(s, trainable=False)
            depths = list(range(cfg.depth_coarse, cfg.depth_fine + 1))
            d = depths[step % len(depths)]
            t = int(rng.integers(1, cfg.restart_step + 1))
            loss = self._denoise_loss(self.nets["fine"], s, d, t, rng, parts)
            for dd in range(cfg.depth_coarse, cfg.depth_fine):
                loss = loss + self._split_loss(s, dd)
            total = loss if total is None else total + loss
        return total * (1.0 / cfg.batch_size)

    # -- driver ----------------------------------------------------------

    def train(self, resume_opt: T.Adam | None = None, log=print) -> None:
        cfg = self.cfg
        losses = (self._latent_step_loss, self._scale1_step_loss, self._scale2_step_loss)
        opt = resume_opt
        while self.phase < len(PHASES):
            name = PHASES[self.phase]
            steps = getattr(cfg, f"steps_{name}")
            if opt is None:
                opt = self._phase_optimizer(self.phase)
            while self.step < steps:
                step = self.step
                rng = _step_rng(cfg.train_seed, self.phase, step)
                try:
                    opt.zero_grad()
                    if self.phase == 0:
                        loss = self._latent_step_loss(rng)
                    else:
                        loss = losses[self.phase](step, rng)
                    T.backward(loss)
                    opt.step()
                except T.NumericsError as exc:
                    shape_id = self.entries[step % len(self.entries)].path
                    raise TrainingAbort(
                        f"non-finite value in phase {name} step {step} (shape {shape_id}): {exc}"
                    ) from exc
                self.loss_rows.append((name, step, float(loss.data)))
                self.step = step + 1
                if self.step % cfg.checkpoint_every == 0 and self.step < steps:
                    self.save(opt)
                if self.step % max(steps // 10, 1) == 0:
                    log(f"[{name}] step {self.step}/{steps} loss {float(loss.data):.6f}")
            if self.phase == 0:
                self._freeze_latents()
            self.phase += 1
            self.step = 0
            opt = None
            # phase-boundary checkpoint (final save happens after the loop)
            if self.phase < len(PHASES):
                self.save(None)
        self.save(None)
