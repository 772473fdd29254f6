"""Command-line entry point: ``splatkit <command> [options]``.

Commands run the pipeline stages one at a time::

    splatkit synth  OUT_DIR
    splatkit import SFM_DIR [-o SUMMARY.json]
    splatkit prep   SFM_DIR IMAGES_DIR MASKS_DIR -o PREP_DIR
    splatkit train  PREP_DIR -o RUN_DIR
    splatkit eval   CHECKPOINT PREP_DIR -o REPORT_PREFIX
    splatkit extract CHECKPOINT -o MESH
    splatkit clean  MESH_IN -o MESH_OUT

Every command accepts ``--config FILE.json`` and one ``--section.key`` flag
per configuration key.  Values resolve as flags > file > defaults; unknown
keys in the file are rejected.  Positional paths may be omitted when the
config's ``paths`` section supplies them.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.  ``SPLATKIT_LOG_LEVEL`` sets log verbosity.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .colmap_io import Reconstruction, read_model, write_cameras, write_images, write_points3d
from .dataprep import (DatasetManifest, ManifestEntry, SplitRatios, apply_mask, crop_camera,
                       drop_empty_masks, split_by_video, square_crop_offsets)
from .errors import (ConfigError, InconsistentReconstruction, MissingFile, ShapeMismatch,
                     SplatkitError)
from .gaussians import InitConfig, init_from_points
from .geometry import PinholeCamera
from .mesh import MeshFormat, bake_vertex_colors, clean_mesh, cleanup_report, density_grid, \
    marching_cubes, read_mesh, write_mesh
from .metrics import evaluate_model
from .synth import SynthConfig, make_scene, write_scene
from .trainer import (TRAIN_CONFIG_HELP, TrainConfig, TrainView, load_checkpoint, save_checkpoint,
                      train)
from .utils.io import atomic_write_bytes, atomic_write_text, read_image, read_mask, to_uint8, write_png

logger = logging.getLogger("splatkit")

LOG_ENV = "SPLATKIT_LOG_LEVEL"
HOLDOUT_EVERY = 8


# ---------------------------------------------------------------------------
# configuration

@dataclass
class PathsConfig:
    sfm: str = ""
    images: str = ""
    masks: str = ""
    output: str = ""


@dataclass
class SplitConfig:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1


@dataclass
class MetricsConfig:
    split: str = "test"
    masked: bool = False


@dataclass
class MeshConfig:
    resolution: int = 128
    iso: float = 0.3
    tau: float = 0.1
    ascii: bool = False


@dataclass
class PipelineConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    mesh: MeshConfig = field(default_factory=MeshConfig)

    def train_config(self) -> TrainConfig:
        d = asdict(self.train)
        d["seed"] = self.seed
        return TrainConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"].pop("seed")
        d["train"]["background"] = list(self.train.background)
        return d


_SECTIONS = {"paths": PathsConfig, "train": TrainConfig, "split": SplitConfig,
             "metrics": MetricsConfig, "mesh": MeshConfig}

_HELP = {
    "seed": "seed of every random choice (data split, view order); recorded in outputs",
    "paths.sfm": "SfM model directory (cameras/images/points3D, .bin or .txt)",
    "paths.images": "directory of the photos named in the SfM model",
    "paths.masks": "directory of foreground masks, same names as the photos",
    "paths.output": "output file or directory of the command",
    "split.train": "fraction of videos used for training",
    "split.val": "fraction of videos used for checkpoint selection",
    "split.test": "fraction of videos held out for evaluation",
    "metrics.split": "manifest split scored by eval",
    "metrics.masked": "score only pixels inside the mask or rendered silhouette",
    "mesh.resolution": "density grid samples along the longest axis",
    "mesh.iso": "density level of the extracted surface",
    "mesh.tau": "vertices whose brightest channel is below this are removed by clean",
    "mesh.ascii": "write ascii PLY instead of binary",
    **{f"train.{k}": v for k, v in TRAIN_CONFIG_HELP.items() if k != "seed"},
}


def config_keys() -> List[str]:
    keys = ["seed"]
    for name, cls in _SECTIONS.items():
        keys += [f"{name}.{f.name}" for f in fields(cls) if not (name == "train" and f.name == "seed")]
    return keys


def _default(key: str):
    section, _, name = key.partition(".")
    if not name:
        return getattr(PipelineConfig(), section)
    return getattr(_SECTIONS[section](), name)


def _coerce(key: str, value):
    """Convert a JSON value or a flag string to the type of the key's default."""
    default = _default(key)
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return value.lower() in ("true", "1", "yes")
            if not isinstance(value, bool):
                raise ValueError(value)
            return value
        if isinstance(default, tuple):
            parts = value.split(",") if isinstance(value, str) else list(value)
            out = tuple(float(p) for p in parts)
            if len(out) != len(default):
                raise ValueError(value)
            return out
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value {value!r} for {key}") from None


def _flatten_file(data) -> Dict[str, object]:
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    known = set(config_keys())
    flat = {}
    for k, v in data.items():
        if isinstance(v, dict) and k in _SECTIONS:
            for kk, vv in v.items():
                flat[f"{k}.{kk}"] = vv
        else:
            flat[k] = v
    unknown = sorted(set(flat) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return flat


def load_config(path=None, overrides: Optional[Dict[str, object]] = None) -> PipelineConfig:
    """Defaults, then the JSON file at ``path``, then ``overrides``."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from None
        values.update(_flatten_file(data))
    for k, v in (overrides or {}).items():
        if k not in config_keys():
            raise ConfigError(f"unknown config key {k}")
        values[k] = v
    sections = {name: {} for name in _SECTIONS}
    seed = PipelineConfig().seed
    for k, v in values.items():
        v = _coerce(k, v)
        if k == "seed":
            seed = v
        else:
            section, _, name = k.partition(".")
            sections[section][name] = v
    try:
        built = {name: cls(**sections[name]) for name, cls in _SECTIONS.items()}
        SplitRatios(built["split"].train, built["split"].val, built["split"].test)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if built["mesh"].resolution < 2 or built["mesh"].iso <= 0:
        raise ConfigError("mesh.resolution must be >= 2 and mesh.iso > 0")
    return PipelineConfig(seed=seed, **built)


# ---------------------------------------------------------------------------
# commands

def cmd_synth(out_dir, config: PipelineConfig, n_gaussians: int = 20, n_views: int = 24,
              image_size: int = 128) -> Path:
    """Write a synthetic scene with known ground truth as an SfM workspace."""
    scene = make_scene(SynthConfig(seed=config.seed, n_gaussians=n_gaussians, n_views=n_views,
                                   image_size=image_size))
    return write_scene(scene, out_dir)


def rig_summary(recon: Reconstruction) -> dict:
    errors = [p.reprojection_error for p in recon.points.values()]
    tracks = [len(p.track_image_ids) for p in recon.points.values()]
    return {
        "cameras": [{"camera_id": c.camera_id, "model": c.model.name, "width": c.width,
                     "height": c.height, "params": list(c.params)}
                    for _, c in sorted(recon.cameras.items())],
        "n_images": len(recon.images),
        "n_points": len(recon.points),
        "mean_track_length": float(np.mean(tracks)) if tracks else 0.0,
        "mean_reprojection_error": float(np.mean(errors)) if errors else 0.0,
        "images": [recon.images[i].image_name for i in sorted(recon.images)],
    }


def cmd_import(sfm_dir, out=None) -> dict:
    """Parse and validate an SfM model; raise on any consistency issue."""
    recon = read_model(sfm_dir)
    report = recon.validate()
    if not report.is_empty:
        raise InconsistentReconstruction(report.summary())
    summary = rig_summary(recon)
    if out:
        atomic_write_text(out, json.dumps(summary, indent=2) + "\n")
    return summary


def _video_id(image_name: str) -> str:
    """Frames stored as ``<video>/<frame>`` share a video; other names are their own video."""
    parts = Path(image_name).parts
    return parts[0] if len(parts) > 1 else Path(image_name).stem


def _find_mask(masks_dir: Path, image_name: str) -> Path:
    for cand in (masks_dir / image_name, (masks_dir / image_name).with_suffix(".png")):
        if cand.exists():
            return cand
    raise MissingFile(f"no mask for {image_name} in {masks_dir}")


def cmd_prep(sfm_dir, images_dir, masks_dir, out_dir, config: PipelineConfig) -> DatasetManifest:
    """Crop to square, apply masks, split by video; writes PREP_DIR/manifest.csv,
    PREP_DIR/sparse (cameras adjusted to the crop) and the prepared images."""
    recon = read_model(sfm_dir)
    report = recon.validate()
    if not report.is_empty:
        raise InconsistentReconstruction(report.summary())
    images_dir, masks_dir, out_dir = Path(images_dir), Path(masks_dir), Path(out_dir)
    cameras = {}
    for cid, intr in recon.cameras.items():
        top, left, side = square_crop_offsets(intr.height, intr.width)
        cameras[cid] = crop_camera(intr, top, left, side)
    entries = []
    for iid in sorted(recon.images):
        pose = recon.images[iid]
        intr = recon.cameras[pose.camera_id]
        image = read_image(images_dir / pose.image_name)
        mask = read_mask(_find_mask(masks_dir, pose.image_name))
        if image.shape[:2] != (intr.height, intr.width) or mask.shape != image.shape[:2]:
            raise ShapeMismatch(f"{pose.image_name}: image {image.shape[:2]}, mask {mask.shape}, "
                                f"camera {(intr.height, intr.width)}")
        top, left, side = square_crop_offsets(intr.height, intr.width)
        image = image[top:top + side, left:left + side]
        mask = mask[top:top + side, left:left + side]
        rel = Path(pose.image_name).with_suffix(".png")
        write_png(out_dir / "images" / rel, apply_mask(image, mask))
        write_png(out_dir / "masks" / rel, to_uint8(mask))
        entries.append(ManifestEntry(_video_id(pose.image_name), iid, str(Path("images") / rel),
                                     str(Path("masks") / rel)))
    sparse = out_dir / "sparse"
    write_cameras(cameras, sparse / "cameras.bin")
    write_images(recon.images, sparse / "images.bin")
    write_points3d(recon.points, sparse / "points3D.bin")
    manifest = drop_empty_masks(DatasetManifest(entries), lambda p: read_mask(out_dir / p))
    for e in manifest.excluded:
        logger.warning("dropping %s: empty mask", e.image_path)
    s = config.split
    assignment = split_by_video([e.video_id for e in manifest], SplitRatios(s.train, s.val, s.test),
                                config.seed)
    manifest = manifest.with_splits(assignment)
    manifest.save(out_dir / "manifest.csv")
    return manifest


def load_views(prep_dir, split: Optional[str] = None) -> List[TrainView]:
    prep_dir = Path(prep_dir)
    manifest = DatasetManifest.load(prep_dir / "manifest.csv")
    recon = read_model(prep_dir / "sparse")
    views = []
    for e in manifest.entries:
        if split is not None and e.split != split:
            continue
        if e.frame_index not in recon.images:
            raise InconsistentReconstruction(f"manifest frame {e.frame_index} is not in the SfM model")
        pose = recon.images[e.frame_index]
        cam = PinholeCamera.from_reconstruction(recon.cameras[pose.camera_id], pose)
        views.append(TrainView(read_image(prep_dir / e.image_path), read_mask(prep_dir / e.mask_path),
                               cam, e.image_path))
    return views


def holdout_views(train_views, val_views):
    """Checkpoint-selection views: the val split, or else every 8th training view."""
    if val_views:
        return train_views, val_views
    if len(train_views) > HOLDOUT_EVERY:
        held = train_views[::HOLDOUT_EVERY]
        rest = [v for i, v in enumerate(train_views) if i % HOLDOUT_EVERY]
        return rest, held
    return train_views, None


def cmd_train(prep_dir, out_dir, config: PipelineConfig):
    """Train from the sparse points; writes RUN_DIR/checkpoint.ply (+ .json)
    and RUN_DIR/loss_trace.csv."""
    prep_dir, out_dir = Path(prep_dir), Path(out_dir)
    tcfg = config.train_config()
    train_views, eval_views = holdout_views(load_views(prep_dir, "train"), load_views(prep_dir, "val"))
    recon = read_model(prep_dir / "sparse")
    cloud = init_from_points(list(recon.points.values()), InitConfig(sh_degree=tcfg.sh_degree))
    result = train(train_views, cloud, tcfg, eval_views=eval_views,
                   dump_path=out_dir / "nonfinite_dump.npz")
    best = result.best
    best.metadata.update({"seed": config.seed, "config": config.to_dict()["train"]})
    save_checkpoint(best, out_dir / "checkpoint.ply")
    atomic_write_text(out_dir / "loss_trace.csv", result.trace.to_csv())
    logger.info("best iteration %d, eval psnr %.3f, %d Gaussians, %.1f s",
                best.iteration, best.eval_psnr, len(best.cloud), result.seconds)
    return result


def cmd_eval(checkpoint, prep_dir, out_prefix, config: PipelineConfig):
    """Score the checkpoint on one manifest split; writes PREFIX.csv and PREFIX.json."""
    ckpt = load_checkpoint(checkpoint)
    views = load_views(prep_dir, config.metrics.split)
    report = evaluate_model(ckpt, views, config.train.background, masked=config.metrics.masked)
    out_prefix = str(out_prefix)
    atomic_write_text(out_prefix + ".csv", report.to_csv())
    atomic_write_text(out_prefix + ".json", report.to_json())
    return report


def _mesh_format(path, config: PipelineConfig) -> MeshFormat:
    fmt = MeshFormat.infer(path)
    if fmt is MeshFormat.PLY_BINARY and config.mesh.ascii:
        return MeshFormat.PLY_ASCII
    return fmt


def cmd_extract(checkpoint, out_mesh, config: PipelineConfig):
    """Density grid -> marching cubes -> color bake; writes the raw mesh."""
    cloud = load_checkpoint(checkpoint).cloud
    m = config.mesh
    mesh = bake_vertex_colors(marching_cubes(density_grid(cloud, m.resolution), m.iso), cloud)
    if mesh.n_faces == 0:
        logger.warning("isosurface at %g is empty", m.iso)
    write_mesh(out_mesh, mesh, _mesh_format(out_mesh, config))
    return mesh


def cmd_clean(mesh_in, mesh_out, config: PipelineConfig):
    """Remove dark vertices and keep the largest edge-connected component."""
    mesh = clean_mesh(read_mesh(mesh_in), config.mesh.tau)
    report = cleanup_report(mesh, config.mesh.tau)
    if not report.ok:  # unreachable unless the cleanup itself is broken
        raise SplatkitError(f"cleanup left an invalid mesh: {report}")
    write_mesh(mesh_out, mesh, _mesh_format(mesh_out, config))
    return mesh


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _config_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", metavar="FILE", help="JSON config file (flags override it)")
    group = parent.add_argument_group("config keys (flag > file > default)")
    for key in config_keys():
        default = _default(key)
        shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
        group.add_argument(f"--{key}", dest=f"cfg:{key}", default=argparse.SUPPRESS, metavar="V",
                           help=f"{_HELP[key]} (default: {shown!r})".replace("%", "%%"))
    return parent


def build_parser() -> argparse.ArgumentParser:
    parent = _config_parent()
    parser = _Parser(prog="splatkit", description="Gaussian splat reconstruction and meshing pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[parent], help="write a synthetic test scene")
    p.add_argument("out", nargs="?", help="output directory (default: paths.output)")
    p.add_argument("--n-gaussians", type=int, default=20)
    p.add_argument("--n-views", type=int, default=24)
    p.add_argument("--image-size", type=int, default=128)

    p = sub.add_parser("import", parents=[parent], help="parse and validate an SfM model")
    p.add_argument("sfm", nargs="?", help="SfM model directory (default: paths.sfm)")
    p.add_argument("-o", "--out", help="write the rig summary JSON here")

    p = sub.add_parser("prep", parents=[parent], help="crop, mask and split the photos")
    p.add_argument("sfm", nargs="?", help="default: paths.sfm")
    p.add_argument("images", nargs="?", help="default: paths.images")
    p.add_argument("masks", nargs="?", help="default: paths.masks")
    p.add_argument("-o", "--out", help="prepared dataset directory (default: paths.output)")

    p = sub.add_parser("train", parents=[parent], help="train a Gaussian cloud")
    p.add_argument("prep", help="prepared dataset directory")
    p.add_argument("-o", "--out", help="run directory (default: paths.output)")

    p = sub.add_parser("eval", parents=[parent], help="PSNR of a checkpoint on a split")
    p.add_argument("checkpoint")
    p.add_argument("prep", help="prepared dataset directory")
    p.add_argument("-o", "--out", help="report prefix; writes PREFIX.csv and PREFIX.json")

    p = sub.add_parser("extract", parents=[parent], help="extract a colored mesh from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("-o", "--out", help="mesh file, .ply or .obj (default: paths.output)")

    p = sub.add_parser("clean", parents=[parent], help="drop dark vertices, keep the largest component")
    p.add_argument("mesh")
    p.add_argument("-o", "--out", help="cleaned mesh, .ply or .obj (default: paths.output)")
    return parser


def _need(value, key: str) -> str:
    if not value:
        raise ConfigError(f"missing path: pass it on the command line or set {key}")
    return value


def run(args: argparse.Namespace) -> int:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:")}
    config = load_config(args.config, overrides)
    paths = config.paths
    cmd = args.command
    if cmd == "synth":
        out = cmd_synth(_need(args.out or paths.output, "paths.output"), config,
                        args.n_gaussians, args.n_views, args.image_size)
        print(out)
    elif cmd == "import":
        summary = cmd_import(_need(args.sfm or paths.sfm, "paths.sfm"), args.out)
        print(f"{len(summary['cameras'])} cameras, {summary['n_images']} images, "
              f"{summary['n_points']} points: consistent")
    elif cmd == "prep":
        manifest = cmd_prep(_need(args.sfm or paths.sfm, "paths.sfm"),
                            _need(args.images or paths.images, "paths.images"),
                            _need(args.masks or paths.masks, "paths.masks"),
                            _need(args.out or paths.output, "paths.output"), config)
        counts = {s: len(manifest.by_split(s)) for s in ("train", "val", "test")}
        print(" ".join(f"{k}={v}" for k, v in counts.items()))
    elif cmd == "train":
        result = cmd_train(args.prep, _need(args.out or paths.output, "paths.output"), config)
        print(f"best iteration {result.best.iteration} eval_psnr {result.best.eval_psnr:.4f}")
    elif cmd == "eval":
        report = cmd_eval(args.checkpoint, args.prep, _need(args.out or paths.output, "paths.output"),
                          config)
        print(f"mean_psnr {report.mean_psnr:.4f} over {len(report.view_ids)} views")
    elif cmd == "extract":
        mesh = cmd_extract(args.checkpoint, _need(args.out or paths.output, "paths.output"), config)
        print(f"{mesh.n_vertices} vertices, {mesh.n_faces} faces")
    elif cmd == "clean":
        mesh = cmd_clean(args.mesh, _need(args.out or paths.output, "paths.output"), config)
        print(f"{mesh.n_vertices} vertices, {mesh.n_faces} faces")
    return 0


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except SplatkitError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
