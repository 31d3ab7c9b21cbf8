"""Command-line pipeline: generate -> reconstruct -> field -> train -> fuse -> rank.

Each stage writes its outputs atomically and records a stamp file with a
content hash of its configuration, its upstream stage, and its outputs; `run`
resumes from the latest stage whose stamp still verifies, so a retrain is
never triggered by downstream iteration.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
import time

import numpy as np
import yaml

from . import cubature, grasping, io as og_io, scenes, svgp
from .camera import backproject_frame
from .config import (PipelineConfig, apply_override, dump_config, load_config)
from .errors import ConfigError, OccugraspError, StageFailure
from .field import build_field, filter_outliers
from .camera import PinholeIntrinsics

logger = logging.getLogger(__name__)

STAGES = ["generate", "backproject", "filter", "field", "train", "fuse", "rank"]


def _hash_bytes(*chunks: bytes) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c)
    return h.hexdigest()


def _hash_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Pipeline:
    """Stage orchestration with checkpoint stamps."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.ckpt = config.paths.checkpoint_dir
        self.out = config.paths.output_dir
        os.makedirs(self.ckpt, exist_ok=True)
        os.makedirs(self.out, exist_ok=True)
        self.report: dict = {"stages": []}

    # paths of stage outputs
    def _paths(self, stage: str) -> list[str]:
        c = os.path.join
        return {
            "generate": [c(self.config.paths.input_dir, "manifest.yaml")],
            "backproject": [c(self.ckpt, "cloud_raw.ply")],
            "filter": [c(self.ckpt, "cloud.ply")],
            "field": [c(self.ckpt, "field.bin")],
            "train": [c(self.ckpt, "model.bin"), c(self.ckpt, "training.yaml")],
            "fuse": [c(self.ckpt, "candidates_raw.csv"), c(self.out, "occupancy.csv")],
            "rank": [c(self.out, "grasps_ranked.csv")],
        }[stage]

    def _stage_key(self, stage: str, upstream_key: str) -> str:
        return _hash_bytes(stage.encode(), upstream_key.encode(),
                           dump_config(self.config).encode())

    def _stamp_path(self, stage: str) -> str:
        return os.path.join(self.ckpt, f"{stage}.stamp")

    def _stamp_valid(self, stage: str, key: str) -> bool:
        path = self._stamp_path(stage)
        if not os.path.exists(path):
            return False
        try:
            with open(path) as f:
                stamp = yaml.safe_load(f)
            if stamp.get("key") != key:
                return False
            for out, digest in stamp.get("outputs", {}).items():
                if _hash_file(out) != digest:
                    return False
        except (OSError, yaml.YAMLError, AttributeError):
            return False
        return True

    def _write_stamp(self, stage: str, key: str) -> None:
        outputs = {p: _hash_file(p) for p in self._paths(stage)}
        doc = yaml.safe_dump({"stage": stage, "key": key, "outputs": outputs},
                             sort_keys=True)
        og_io.atomic_write(self._stamp_path(stage), doc.encode("ascii"))

    def run_stage(self, stage: str, upstream_key: str, force: bool = False) -> str:
        key = self._stage_key(stage, upstream_key)
        entry = {"stage": stage}
        start = time.monotonic()
        if not force and self._stamp_valid(stage, key):
            logger.info("stage %s: checkpoint valid, skipping", stage)
            entry["skipped"] = True
        else:
            try:
                getattr(self, f"stage_{stage}")()
            except Exception as exc:
                raise StageFailure(stage, exc) from exc
            self._write_stamp(stage, key)
            entry["skipped"] = False
        entry["wall_time_s"] = round(time.monotonic() - start, 4)
        self.report["stages"].append(entry)
        return key

    # -- stage bodies -----------------------------------------------------

    def stage_generate(self):
        sc = self.config.scene
        spec = scenes.SceneSpec(
            shape=scenes.shape_from_dict(sc.shape),
            trajectory=scenes.Trajectory(orbit_radius=sc.orbit_radius,
                                         elevation=tuple(sc.elevation),
                                         azimuth=tuple(sc.azimuth),
                                         frame_count=sc.frame_count),
            depth_noise_var=sc.depth_noise_var,
            pose_noise_cov=sc.pose_noise_std ** 2 * np.eye(3),
            dropout=sc.dropout,
            seed=self.config.seed,
        )
        half = sc.image_size / 2.0
        intr = PinholeIntrinsics(fx=sc.focal, fy=sc.focal, cx=half, cy=half,
                                 width=sc.image_size, height=sc.image_size)
        manifest = scenes.generate_dataset(spec, self.config.paths.input_dir, intr)
        self.report["frames"] = len(manifest["frames"])

    def stage_backproject(self):
        cfg = self.config
        in_dir = cfg.paths.input_dir
        manifest = scenes.load_manifest(in_dir)
        intr = og_io.load_intrinsics(os.path.join(in_dir, "intrinsics.yaml"))
        poses = og_io.load_poses_csv(os.path.join(in_dir, "poses.csv"))
        points = []
        for fr in manifest["frames"]:
            fid = fr["frame_id"]
            depth = og_io.load_frame(in_dir, fid, cfg.camera.depth_variance)
            points.extend(backproject_frame(
                depth, poses[fid], intr, stride=cfg.camera.stride,
                rotate_camera_covariance=cfg.camera.rotate_camera_covariance))
        self.report["points_raw"] = len(points)
        og_io.save_ply(self._paths("backproject")[0], points)

    def stage_filter(self):
        cfg = self.config.field_
        points = og_io.load_ply(self._paths("backproject")[0])
        kept = filter_outliers(points, k_neighbors=cfg.outlier_neighbors,
                               std_ratio=cfg.outlier_std_ratio)
        self.report["points_filtered"] = len(kept)
        og_io.save_ply(self._paths("filter")[0], kept)

    def stage_field(self):
        points = og_io.load_ply(self._paths("filter")[0])
        fof = build_field(points, regularization=self.config.field_.regularization)
        og_io.save_field(self._paths("field")[0], fof)

    def stage_train(self):
        points = og_io.load_ply(self._paths("filter")[0])
        fof = og_io.load_field(self._paths("field")[0])
        inputs, targets = svgp.make_training_set(fof, points)
        cfg = self.config.svgp
        model, report = svgp.train(inputs, targets, svgp.TrainConfig(
            inducing=cfg.inducing, lr=cfg.lr, epochs=cfg.epochs,
            batch=cfg.batch, seed=self.config.seed))
        model_path, report_path = self._paths("train")
        svgp.save_model(model, model_path)
        doc = {"epochs": report.epochs,
               "final_hyperparameters": report.final_hyperparameters,
               "elbo_first": report.elbo_trace[0], "elbo_last": report.elbo_trace[-1],
               "elbo_trace": report.elbo_trace}
        og_io.atomic_write(report_path, yaml.safe_dump(doc, sort_keys=True).encode("ascii"))
        self.report["elbo"] = {"first": report.elbo_trace[0],
                               "last": report.elbo_trace[-1]}

    def _candidates(self, cloud_points):
        cfg = self.config.grasp
        if cfg.scorer == "file":
            if not cfg.candidate_path:
                raise ConfigError("grasp.scorer=file requires grasp.candidate_path")
            return grasping.load_candidates(cfg.candidate_path)
        if cfg.scorer == "stub":
            normals = grasping.estimate_normals(cloud_points)
            return grasping.stub_scorer(cloud_points, normals, cfg.gripper_width_max,
                                        seed=self.config.seed, max_pairs=cfg.max_pairs)
        raise ConfigError(f"unknown grasp scorer {cfg.scorer!r}")

    def stage_fuse(self, queries: np.ndarray | None = None):
        points = og_io.load_ply(self._paths("filter")[0])
        cloud = np.array([p.mean for p in points])
        fof = og_io.load_field(self._paths("field")[0])
        model = svgp.load_model(self._paths("train")[0])
        rule = cubature.make_rule(
            alpha=self.config.cubature.alpha, beta=self.config.cubature.beta,
            kappa=self.config.cubature.kappa,
            paper_verbatim_weights=self.config.cubature.paper_verbatim_weights)
        cand_path, occ_path = self._paths("fuse")
        if queries is None:
            candidates = self._candidates(cloud)
            contacts = grasping.resolve_contact_points(
                candidates, cloud, mode=self.config.grasp.contact_mode)
            grasping.save_candidates(candidates, cand_path)
            queries = contacts
        else:
            grasping.save_candidates([], cand_path)
        results = cubature.fuse_batch(np.atleast_2d(queries), fof, model, rule,
                                      k=self.config.field_.fusion_neighbors)
        failures = [r for r in results if isinstance(r, Exception)]
        if failures:
            raise OccugraspError(f"{len(failures)} fuse queries failed: {failures[0]}")
        og_io.save_occupancy_csv(occ_path, results)

    def stage_rank(self):
        cand_path, occ_path = self._paths("fuse")
        candidates = grasping.load_candidates(cand_path)
        occ = og_io.load_occupancy_csv(occ_path)
        if len(occ) != len(candidates):
            raise OccugraspError("occupancy table and candidate list are misaligned")
        ranked = grasping.reweight(candidates, occ[:, 4], nu=self.config.grasp.nu)
        grasping.save_candidates(ranked.candidates, self._paths("rank")[0],
                                 weighted=True)
        top = []
        for c in ranked.candidates[:self.config.grasp.top_k]:
            top.append({"position": [float(v) for v in c.position],
                        "raw_confidence": c.raw_confidence,
                        "occ_variance": c.occupancy_variance,
                        "weighted_confidence": c.weighted_confidence})
        self.report["top_grasps"] = top

    def run_all(self, force: bool = False) -> dict:
        key = ""
        for stage in STAGES:
            key = self.run_stage(stage, key, force=force)
        report_path = os.path.join(self.out, "report.yaml")
        og_io.atomic_write(report_path,
                           yaml.safe_dump(self.report, sort_keys=True).encode("ascii"))
        return self.report


def _chain_keys(pipe: Pipeline, upto: str) -> str:
    """Key of the stage preceding `upto`, assuming upstream stamps exist."""
    key = ""
    for stage in STAGES:
        if stage == upto:
            return key
        key = pipe._stage_key(stage, key)
    raise ValueError(f"unknown stage {upto!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="occugrasp",
        description="Occupancy-uncertainty pipeline and grasp reweighting")
    parser.add_argument("--config", help="YAML config path")
    parser.add_argument("--seed", type=int, help="override the global seed")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key (repeatable)")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", help="render the synthetic dataset")
    sub.add_parser("reconstruct", help="backproject and filter the point cloud")
    sub.add_parser("field", help="build the occupancy field checkpoint")
    sub.add_parser("train", help="train the occupancy regressor")
    fuse_p = sub.add_parser("fuse", help="fuse uncertainty at query points")
    fuse_p.add_argument("--queries", help="CSV of x,y,z query points "
                        "(default: grasp contact points)")
    sub.add_parser("rank", help="reweight and rank grasp candidates")
    run_p = sub.add_parser("run", help="full pipeline with checkpoint resume")
    run_p.add_argument("--force", action="store_true", help="ignore checkpoints")
    dump_p = sub.add_parser("dump-config", help="print the effective config")
    del dump_p
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config) if args.config else PipelineConfig()
        for assignment in args.overrides:
            apply_override(config, assignment)
        if args.seed is not None:
            config.seed = args.seed
    except (ConfigError, OSError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    if args.command == "dump-config":
        print(dump_config(config), end="")
        return 0

    pipe = Pipeline(config)
    try:
        if args.command == "run":
            pipe.run_all(force=args.force)
        elif args.command == "generate":
            pipe.run_stage("generate", "", force=True)
        elif args.command == "reconstruct":
            key = _chain_keys(pipe, "backproject")
            key = pipe.run_stage("backproject", key, force=True)
            pipe.run_stage("filter", key, force=True)
        elif args.command == "field":
            pipe.run_stage("field", _chain_keys(pipe, "field"), force=True)
        elif args.command == "train":
            pipe.run_stage("train", _chain_keys(pipe, "train"), force=True)
        elif args.command == "fuse":
            queries = None
            if args.queries:
                queries = np.loadtxt(args.queries, delimiter=",", ndmin=2)[:, :3]
            try:
                pipe.stage_fuse(queries=queries)
                pipe._write_stamp("fuse", pipe._stage_key("fuse", _chain_keys(pipe, "fuse")))
            except Exception as exc:
                raise StageFailure("fuse", exc) from exc
        elif args.command == "rank":
            pipe.run_stage("rank", _chain_keys(pipe, "rank"), force=True)
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
