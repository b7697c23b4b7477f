"""Command-line pipeline: data, training, sampling, meshing, evaluation.

Subcommands: make-data, train, sample, mesh, eval, ablate, print-config.
Every command resolves its configuration from defaults + optional --config
file + --set overrides, writes its outputs under the config's out_dir
(rooted at $OCTGEN_OUT when set), and records a run manifest with the config
hash and content hashes of its inputs. Reruns with identical config and
seeds are byte-identical. Exit codes: 0 success, 2 config error, 3 data
error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import diffusion as dif
from . import figures
from . import field_mesh as fm
from . import tensor as T
from .attention import dump_weights
from .config import ConfigError, RunConfig, config_hash, dump_config, load_config
from .data import DataError, corpus_hash, load_cloud, make_corpus, read_manifest
from .octree import load_octree, save_octree
from .sdf import generate_shape
from .training import PHASES, Trainer, TrainingAbort, build_networks, make_generator
from .data import sample_surface

ENV_OUT = "OCTGEN_OUT"

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _out_root(cfg: RunConfig) -> Path:
    base = os.environ.get(ENV_OUT)
    out = Path(cfg.out_dir)
    if base and not out.is_absolute():
        out = Path(base) / out
    return out


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, command: str, cfg: RunConfig, extra: dict[str, str]) -> None:
    lines = [
        f"command = {command}",
        f"config_hash = {config_hash(cfg)}",
        f"output_root = {os.environ.get(ENV_OUT, '-')}",
    ]
    for k in sorted(extra):
        lines.append(f"{k} = {extra[k]}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest_kv(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _load_cfg(args) -> RunConfig:
    return load_config(args.config, args.set or [])


def _corpus_manifest(cfg: RunConfig, args) -> Path:
    if getattr(args, "corpus", None):
        return Path(args.corpus)
    return _out_root(cfg) / "corpus" / "corpus.manifest"


def _checkpoint_path(cfg: RunConfig, args) -> Path:
    if getattr(args, "checkpoint", None):
        return Path(args.checkpoint)
    return _out_root(cfg) / "train" / "model.ckpt"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_print_config(args) -> int:
    cfg = _load_cfg(args)
    sys.stdout.write(dump_config(cfg))
    return 0


def cmd_make_data(args) -> int:
    cfg = _load_cfg(args)
    out = _out_root(cfg) / "corpus"
    manifest = make_corpus(
        out, cfg.category, cfg.corpus_size, cfg.corpus_seed, cfg.dense_points, cfg.cloud_points
    )
    write_manifest(
        out / "make_data.manifest",
        "make-data",
        cfg,
        {"corpus_hash": corpus_hash(manifest), "corpus_seed": str(cfg.corpus_seed)},
    )
    print(f"wrote {cfg.corpus_size} {cfg.category} clouds to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    manifest = _corpus_manifest(cfg, args)
    if not manifest.exists():
        raise DataError(f"corpus manifest not found: {manifest} (run make-data first)")
    out = _out_root(cfg) / "train"
    trainer = Trainer(cfg, manifest, out)
    opt = None
    if args.resume:
        path = trainer.checkpoint_path()
        if not path.exists():
            raise DataError(f"cannot resume: {path} does not exist")
        opt = trainer.load(path)
        print(f"resuming at phase {PHASES[trainer.phase]} step {trainer.step}")
    trainer.train(resume_opt=opt, log=print)
    figures.loss_curve(trainer.loss_rows, out / "loss_curve.png")
    write_manifest(
        out / "train.manifest",
        "train",
        cfg,
        {
            "corpus_hash": corpus_hash(manifest),
            "train_seed": str(cfg.train_seed),
            "checkpoint_hash": _file_hash(trainer.checkpoint_path()),
        },
    )
    print(f"checkpoint at {trainer.checkpoint_path()}")
    return 0


def _load_trained(cfg: RunConfig, path: Path, require=("scale1", "scale2")):
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    arrays, meta = ckpt.load_arrays(path)
    if meta.get("config_hash") != config_hash(cfg):
        raise DataError("checkpoint config hash does not match this config")
    for name in require:
        if meta.get(f"done_{name}") != "1":
            raise DataError(f"checkpoint incomplete: {name} training has not finished")
    nets = build_networks(cfg)
    from .training import network_parameters

    for p in network_parameters(nets):
        if p.name not in arrays:
            raise DataError(f"checkpoint missing parameter {p.name}")
        p.set_data(arrays[p.name].reshape(p.shape))
    return nets, arrays, meta


def cmd_sample(args) -> int:
    cfg = _load_cfg(args)
    manifest = _corpus_manifest(cfg, args)
    ckpt_path = _checkpoint_path(cfg, args)
    nets, _, _ = _load_trained(cfg, ckpt_path)
    entries = read_manifest(manifest)
    by_id = {Path(e.path).stem: e for e in entries}
    if args.exemplar not in by_id:
        raise DataError(f"exemplar {args.exemplar!r} not in corpus ({', '.join(sorted(by_id))})")
    entry = by_id[args.exemplar]
    cloud = load_cloud(manifest.parent / entry.path)
    with T.no_grad():
        parts = nets["encoder"].encode(cloud, source_id=args.exemplar)
    gen = make_generator(nets, cfg)

    out = Path(args.output) if args.output else _out_root(cfg) / "samples"
    out.mkdir(parents=True, exist_ok=True)
    (out / "parts.tsv").write_text(parts.to_text())
    rows = []
    for i in range(args.count):
        seed = args.seed + i
        tree, info = gen.generate(parts, seed=seed)
        name = f"sample_{seed:04d}.oct"
        save_octree(out / name, tree)
        rows.append(
            f"{name}\tseed={seed}\tboundary_depth={info['boundary_depth']}\t"
            f"final_depth={info['final_depth']}\tleaves={tree.leaf_count()}"
        )
        if args.dump_attention:
            snap = gen.attention_snapshot(tree, parts)
            dump_weights(out / f"attention_{seed:04d}.txt", snap[-1])
        print(rows[-1].replace("\t", "  "))
    (out / "samples.tsv").write_text("\n".join(rows) + "\n")
    write_manifest(
        out / "samples.manifest",
        "sample",
        cfg,
        {
            "corpus_hash": corpus_hash(manifest),
            "checkpoint_hash": _file_hash(ckpt_path),
            "exemplar": args.exemplar,
            "exemplar_source": "train-corpus",
            "base_seed": str(args.seed),
            "count": str(args.count),
        },
    )
    return 0


def cmd_mesh(args) -> int:
    cfg = _load_cfg(args)
    ckpt_path = _checkpoint_path(cfg, args)
    nets, _, meta = _load_trained(cfg, ckpt_path, require=())
    if meta.get("done_latent") != "1":
        raise DataError("checkpoint incomplete: the SDF decoder has not been trained")
    tree = load_octree(args.input)
    res = args.resolution or cfg.mesh_resolution
    field, axis = fm.decode_grid(tree, nets["decoder"], res)
    h = axis[1] - axis[0]
    mesh = fm.marching_cubes(field, 0.0, origin=(axis[0], axis[0], axis[0]), spacing=h)
    out = Path(args.output) if args.output else Path(args.input).with_suffix(".obj")
    fm.export_mesh(out, mesh)
    print(f"{out}: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces at {res}^3")
    return 0


def _sample_points_for_eval(path: Path, cfg: RunConfig, decoder) -> np.ndarray:
    if path.suffix == ".xyzl":
        return load_cloud(path).points
    tree = load_octree(path)
    field, axis = fm.decode_grid(tree, decoder, cfg.eval_resolution)
    h = axis[1] - axis[0]
    mesh = fm.marching_cubes(field, 0.0, origin=(axis[0], axis[0], axis[0]), spacing=h)
    if mesh.is_empty:
        raise DataError(f"{path}: decoded field has no surface")
    return fm.sample_mesh_surface(mesh, cfg.eval_points, seed=0)


def noise_floor(entries, cfg: RunConfig) -> float:
    """Mean Chamfer between two independent samplings of each corpus shape."""
    vals = []
    for e in entries:
        sdf = generate_shape(e.spec())
        a = sample_surface(sdf, cfg.eval_points, seed=e.seed * 2 + 1)
        b = sample_surface(sdf, cfg.eval_points, seed=e.seed * 2 + 2)
        vals.append(fm.chamfer(a.points, b.points))
    return float(np.mean(vals))


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    manifest = _corpus_manifest(cfg, args)
    samples_dir = Path(args.samples) if args.samples else _out_root(cfg) / "samples"
    entries = read_manifest(manifest)
    chash = corpus_hash(manifest)
    sm = samples_dir / "samples.manifest"
    if sm.exists():
        recorded = read_manifest_kv(sm).get("corpus_hash")
        if recorded is not None and recorded != chash:
            raise DataError(
                f"samples were drawn against a different corpus "
                f"(manifest {recorded[:12]} != corpus {chash[:12]})"
            )
    files = sorted(
        p for p in samples_dir.iterdir() if p.suffix in (".oct", ".xyzl") and p.is_file()
    )
    if not files:
        raise DataError(f"no .oct or .xyzl samples in {samples_dir}")

    decoder = None
    if any(p.suffix == ".oct" for p in files):
        nets, _, meta = _load_trained(cfg, _checkpoint_path(cfg, args), require=())
        if meta.get("done_latent") != "1":
            raise DataError("checkpoint incomplete: the SDF decoder has not been trained")
        decoder = nets["decoder"]

    corpus_pts = [
        (Path(e.path).stem, load_cloud(manifest.parent / e.path).points) for e in entries
    ]
    floor = noise_floor(entries, cfg)
    out = _out_root(cfg) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    lines = ["sample\tnearest\tchamfer\ttop3"]
    ids = []
    dists = []
    for path in files:
        pts = _sample_points_for_eval(path, cfg, decoder)
        top = fm.nearest_retrieval(pts, corpus_pts, k=min(3, len(corpus_pts)))
        nid, nd = top[0]
        ids.append(path.stem)
        dists.append(nd)
        top3 = ",".join(f"{sid}:{d:.12g}" for sid, d in top)
        lines.append(f"{path.stem}\t{nid}\t{nd:.12g}\t{top3}")
    lines.append(f"# floor\t{floor:.12g}")
    lines.append(f"# mean\t{np.mean(dists):.12g}")
    lines.append(f"# max\t{np.max(dists):.12g}")
    report = out / "report.tsv"
    report.write_text("\n".join(lines) + "\n")
    figures.eval_report(ids, dists, floor, out / "report.png")
    write_manifest(
        out / "eval.manifest",
        "eval",
        cfg,
        {"corpus_hash": chash, "samples_dir": str(samples_dir), "sample_count": str(len(files))},
    )
    print("\n".join(lines))
    return 0


ABLATION_ROWS = (
    ("baseline", False, False),
    ("F1*+F2", True, False),
    ("F1+F2*", False, True),
    ("F1*+F2*", True, True),
)


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    manifest = _corpus_manifest(cfg, args)
    if not manifest.exists():
        raise DataError(f"corpus manifest not found: {manifest} (run make-data first)")
    entries = read_manifest(manifest)
    out = _out_root(cfg) / "ablate"
    out.mkdir(parents=True, exist_ok=True)
    corpus_pts = [
        (Path(e.path).stem, load_cloud(manifest.parent / e.path).points) for e in entries
    ]
    exemplar = Path(entries[0].path).stem

    labels = []
    means = []
    lines = ["label\tscale1_attn\tscale2_attn\tmean_chamfer\tmax_chamfer"]
    for label, s1, s2 in ABLATION_ROWS:
        run_cfg = load_config(
            args.config,
            list(args.set or []) + [f"cross_attention_scale1={s1}", f"cross_attention_scale2={s2}"],
        )
        slug = label.replace("*", "s").replace("+", "_")
        run_dir = out / slug
        trainer = Trainer(run_cfg, manifest, run_dir)
        trainer.train(log=lambda *_: None)
        figures.loss_curve(trainer.loss_rows, run_dir / "loss_curve.png")
        nets = trainer.nets
        gen = make_generator(nets, run_cfg)
        cloud = load_cloud(manifest.parent / entries[0].path)
        with T.no_grad():
            parts = nets["encoder"].encode(cloud, source_id=exemplar)
        dists = []
        for i in range(args.samples):
            tree, _ = gen.generate(parts, seed=args.seed + i)
            save_octree(run_dir / f"sample_{args.seed + i:04d}.oct", tree)
            pts = _sample_points_for_eval(run_dir / f"sample_{args.seed + i:04d}.oct", run_cfg, nets["decoder"])
            top = fm.nearest_retrieval(pts, corpus_pts, k=1)
            dists.append(top[0][1])
        labels.append(label)
        means.append(float(np.mean(dists)))
        lines.append(f"{label}\t{int(s1)}\t{int(s2)}\t{np.mean(dists):.12g}\t{np.max(dists):.12g}")
        print(lines[-1].replace("\t", "  "))
    table = out / "ablation.tsv"
    table.write_text("\n".join(lines) + "\n")
    figures.ablation(labels, means, out / "ablation.png")
    write_manifest(
        out / "ablate.manifest",
        "ablate",
        cfg,
        {
            "corpus_hash": corpus_hash(manifest),
            "exemplar": exemplar,
            "base_seed": str(args.seed),
            "samples_per_config": str(args.samples),
        },
    )
    return 0


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="octgen",
        description="part-conditioned multi-scale octree diffusion for 3D shapes",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument(
        "--set", action="append", metavar="KEY=VALUE", help="override a config key"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("print-config", parents=[common], help="print the resolved configuration")
    sub.add_parser("make-data", parents=[common], help="generate the synthetic corpus")

    p = sub.add_parser("train", parents=[common], help="train latents, then both scales")
    p.add_argument("--corpus", help="corpus manifest path (default: <out>/corpus)")
    p.add_argument("--resume", action="store_true", help="continue from the saved checkpoint")

    p = sub.add_parser("sample", parents=[common], help="generate octrees from a trained model")
    p.add_argument("--corpus", help="corpus manifest path")
    p.add_argument("--checkpoint", help="checkpoint path (default: <out>/train/model.ckpt)")
    p.add_argument("--exemplar", required=True, help="corpus shape id providing part features")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--output", help="output directory (default: <out>/samples)")
    p.add_argument("--dump-attention", action="store_true", help="write final attention weights")

    p = sub.add_parser("mesh", parents=[common], help="decode a sampled octree to an OBJ mesh")
    p.add_argument("--checkpoint", help="checkpoint path")
    p.add_argument("--input", required=True, help="sampled .oct file")
    p.add_argument("--resolution", type=int, help="marching-cubes grid resolution")
    p.add_argument("--output", help="output OBJ path (default: alongside input)")

    p = sub.add_parser("eval", parents=[common], help="Chamfer evaluation against the corpus")
    p.add_argument("--corpus", help="corpus manifest path")
    p.add_argument("--checkpoint", help="checkpoint path (needed for .oct samples)")
    p.add_argument("--samples", help="directory of .oct or .xyzl samples")

    p = sub.add_parser("ablate", parents=[common], help="train/evaluate the 4 conditioning configs")
    p.add_argument("--corpus", help="corpus manifest path")
    p.add_argument("--seed", type=int, default=0, help="base sampling seed")
    p.add_argument("--samples", type=int, default=2, help="samples per configuration")

    return parser


_HANDLERS = {
    "print-config": cmd_print_config,
    "make-data": cmd_make_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "mesh": cmd_mesh,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingAbort, T.NumericsError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
