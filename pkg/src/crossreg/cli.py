"""Command-line entry point: ``crossreg <subcommand> [options]``.

Every run writes its effective configuration to ``config.ini`` in the output
directory. Progress goes to standard error; results go to files.
"""

from __future__ import annotations

import argparse
import configparser
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import net
from .evaluation import (ExperimentConfig, SweepConfig, compare_experiments, rotation_shift_sweep,
                         rotation_sweep, save_experiments, shift_sweep)
from .geometry import (GeometryError, apply_transform, load_cloud, load_transform, save_cloud,
                       save_transform)
from .regions import (DatasetConfig, SamplerConfig, augment, load_pairs, point_features,
                      sample_pairs, save_pairs, synthetic_pairs)
from .registration import (RegistrationError, RegistrationParams, SegmentationParams, register,
                           save_correspondences)
from .synth import (DegradationProfile, SceneError, generate_scene, make_cross_source_pair,
                    profile_from_section, profile_to_section, random_scene, scene_from_config,
                    scene_to_config)
from .tdf import pair_grids

log = logging.getLogger("crossreg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


DEFAULTS = {
    "synth": {"n_objects": "6", "density": "1500", "format": "ply"},
    "profile_a": profile_to_section(DegradationProfile(keep_fraction=0.9, noise_sigma=0.001)),
    "profile_b": profile_to_section(DegradationProfile(
        keep_fraction=0.5, occlusion_cuts=2, occlusion_max_fraction=0.15, noise_sigma=0.005,
        outlier_fraction=0.05)),
    "sample": {"n_pos": "200", "n_neg": "200", "k": "10", "t_min": "0.05", "t_max": "0.5",
               "w_curvature": "1.0", "w_angle": "1.0", "radius_min": "0.08", "radius_max": "0.18",
               "negative_retries": "100", "max_candidates": "200000", "augment": "yes",
               "axis_mode": "z"},
    "dataset": {"n_scenes": "10", "pairs_per_scene": "200", "density": "1500", "n_objects": "6",
                "first_scene": "0", "augment": "yes", "axis_mode": "z"},
    "train": {"network": "desk", "dim": "16", "truncation": "3.0", "margin": "1.0",
              "learning_rate": "0.05", "momentum": "0.0", "batch_size": "32", "epochs": "3"},
    "register": {"ransac_iterations": "1000", "inlier_threshold": "0.05",
                 "overlap_threshold": "0.05", "scale_estimator": "robust", "normalize": "yes",
                 "truncation": "3.0", "k": "10", "angle_deg": "15", "distance_factor": "2.0",
                 "min_points": "50"},
    "sweep": {"n_keypoints": "500", "step_deg": "5", "n_steps": "72", "patch_fraction": "0.10",
              "shift_fraction": "0.10", "n_shift_steps": "50"},
    "experiments": {"translation": "0.5, -0.3, 0.2", "rotation_deg": "30", "keep_fraction": "0.5",
                    "noise_sigma": "0.005", "outlier_fraction": "0.05", "density": "1500",
                    "n_objects": "6"},
}


# -- config ---------------------------------------------------------------------------

def default_config() -> configparser.ConfigParser:
    cfg = configparser.ConfigParser(interpolation=None)
    cfg.read_dict(DEFAULTS)
    return cfg


def load_config(path) -> configparser.ConfigParser:
    cfg = default_config()
    if path is None:
        return cfg
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    user = configparser.ConfigParser(interpolation=None)
    try:
        user.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from None
    for section in user.sections():
        # [run] is what a recorded config.ini carries; it is informational
        known = section in DEFAULTS or section in ("scene", "run") or section.startswith("primitive.")
        if not known:
            raise UsageError(f"{path}: unknown section [{section}]")
        if section in DEFAULTS:
            for key in user[section]:
                if key not in DEFAULTS[section]:
                    raise UsageError(f"{path}: unknown key {key!r} in [{section}]")
        if not cfg.has_section(section):
            cfg.add_section(section)
        for key, value in user[section].items():
            cfg[section][key] = value
    return cfg


def _get(cfg, section, key, kind):
    raw = cfg[section][key]
    try:
        if kind is bool:
            return cfg.getboolean(section, key)
        return kind(raw)
    except ValueError:
        raise UsageError(f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}") from None


def _checked(section, build):
    try:
        return build()
    except (ValueError, SceneError) as exc:
        raise UsageError(f"[{section}] {exc}") from None


def sampler_config(cfg) -> SamplerConfig:
    g = lambda k, t: _get(cfg, "sample", k, t)  # noqa: E731
    return _checked("sample", lambda: SamplerConfig(
        k=g("k", int), t_min=g("t_min", float), t_max=g("t_max", float),
        w_curvature=g("w_curvature", float), w_angle=g("w_angle", float),
        radius_min=g("radius_min", float), radius_max=g("radius_max", float),
        negative_retries=g("negative_retries", int), max_candidates=g("max_candidates", int)))


def train_config(cfg, seed) -> net.TrainConfig:
    g = lambda k, t: _get(cfg, "train", k, t)  # noqa: E731
    return _checked("train", lambda: net.TrainConfig(
        margin=g("margin", float), learning_rate=g("learning_rate", float),
        momentum=g("momentum", float), batch_size=g("batch_size", int), epochs=g("epochs", int),
        seed=seed))


def network_config(cfg) -> net.NetConfig:
    kind = cfg["train"]["network"]
    builders = {"desk": net.desk_config, "full": net.full_config}
    if kind not in builders:
        raise UsageError(f"[train] network: expected one of {sorted(builders)}, got {kind!r}")
    return _checked("train", lambda: builders[kind](_get(cfg, "train", "dim", int)))


def registration_params(cfg, seed) -> RegistrationParams:
    g = lambda k, t: _get(cfg, "register", k, t)  # noqa: E731
    estimator = cfg["register"]["scale_estimator"]
    if estimator not in ("sphere", "robust"):
        raise UsageError(f"[register] scale_estimator: expected sphere or robust, got {estimator!r}")
    seg = SegmentationParams(k=g("k", int), angle_deg=g("angle_deg", float),
                             distance_factor=g("distance_factor", float),
                             min_points=g("min_points", int))
    return RegistrationParams(seg, ransac_iterations=g("ransac_iterations", int),
                              inlier_threshold=g("inlier_threshold", float),
                              overlap_threshold=g("overlap_threshold", float),
                              scale_estimator=estimator, normalize=g("normalize", bool),
                              truncation=g("truncation", float), seed=seed)


def sweep_config(cfg, seed) -> SweepConfig:
    g = lambda k, t: _get(cfg, "sweep", k, t)  # noqa: E731
    return SweepConfig(n_keypoints=g("n_keypoints", int), step_deg=g("step_deg", float),
                       n_steps=g("n_steps", int), patch_fraction=g("patch_fraction", float),
                       shift_fraction=g("shift_fraction", float), seed=seed)


def _axis_mode(cfg, section):
    mode = cfg[section]["axis_mode"]
    if mode not in ("z", "random"):
        raise UsageError(f"[{section}] axis_mode: expected z or random, got {mode!r}")
    return mode


def dump_config(cfg) -> str:
    buf = io.StringIO()
    cfg.write(buf)
    return buf.getvalue()


def _write_config(cfg, out: Path, seed: int):
    cfg = _copy(cfg)
    if not cfg.has_section("run"):
        cfg.add_section("run")
    cfg["run"]["seed"] = str(seed)
    (out / "config.ini").write_text(dump_config(cfg), encoding="ascii")


def _copy(cfg):
    new = configparser.ConfigParser(interpolation=None)
    new.read_dict({s: dict(cfg[s]) for s in cfg.sections()})
    return new


# -- helpers --------------------------------------------------------------------------

def _input(path, what) -> Path:
    if path is None:
        raise UsageError(f"missing input: {what}")
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def _load_weights(path, what="weights"):
    try:
        return net.load_weights(_input(path, what))
    except net.WeightFileError as exc:
        raise DataError(str(exc)) from None


def _scene(cfg, seed):
    if cfg.has_section("scene"):
        try:
            return scene_from_config(cfg)
        except (KeyError, ValueError, SceneError) as exc:
            raise UsageError(f"[scene] {exc}") from None
    return _checked("synth", lambda: random_scene(seed, _get(cfg, "synth", "n_objects", int),
                                                  _get(cfg, "synth", "density", float)))


def _profile(cfg, name):
    try:
        return profile_from_section(cfg[name], name)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"[{name}] {exc}") from None


# -- subcommands ------------------------------------------------------------------------

def cmd_synth(args, cfg, out):
    fmt = cfg["synth"]["format"]
    if fmt not in ("ply", "xyz"):
        raise UsageError(f"[synth] format: expected ply or xyz, got {fmt!r}")
    spec = _scene(cfg, args.seed)
    pa, pb = _profile(cfg, "profile_a"), _profile(cfg, "profile_b")
    log.info("synth: %d primitives", len(spec.primitives))
    a, b, truth = make_cross_source_pair(spec, pa, pb, (2 * args.seed + 1, 2 * args.seed + 2))
    save_cloud(a, out / f"source.{fmt}")
    save_cloud(b, out / f"target.{fmt}")
    save_transform(truth, out / "truth.txt")
    if not cfg.has_section("scene"):
        scene_to_config(spec, cfg)
    log.info("synth: source %d points, target %d points", len(a), len(b))


def cmd_sample(args, cfg, out):
    scfg = sampler_config(cfg)
    n_pos, n_neg = _get(cfg, "sample", "n_pos", int), _get(cfg, "sample", "n_neg", int)
    do_aug, mode = _get(cfg, "sample", "augment", bool), _axis_mode(cfg, "sample")
    pc1 = load_cloud(_input(args.pc1, "--pc1 cloud"))
    pc2 = load_cloud(_input(args.pc2, "--pc2 cloud"))
    if args.transform:
        # bring pc2 back into pc1's frame
        pc2 = apply_transform(pc2, load_transform(_input(args.transform, "--transform file")).inverse())
    pairs = sample_pairs(point_features(pc1, scfg.k), pc2, n_pos, n_neg, seed=args.seed, cfg=scfg)
    if do_aug:
        pairs = augment(pairs, seed=args.seed, axis_mode=mode)
    save_pairs(pairs, out / "pairs")
    log.info("sample: %d pairs written", len(pairs))


def cmd_train(args, cfg, out):
    tcfg = train_config(cfg, args.seed)
    ncfg = network_config(cfg)
    trunc = _get(cfg, "train", "truncation", float)
    if args.pairs:
        pairs = load_pairs(_input(args.pairs, "--pairs directory"))
    else:
        g = lambda k, t: _get(cfg, "dataset", k, t)  # noqa: E731
        dcfg = _checked("dataset", lambda: DatasetConfig(
            n_scenes=g("n_scenes", int), pairs_per_scene=g("pairs_per_scene", int),
            density=g("density", float), n_objects=g("n_objects", int),
            first_scene=g("first_scene", int)))
        do_aug, mode = g("augment", bool), _axis_mode(cfg, "dataset")
        scfg = sampler_config(cfg)
        log.info("train: sampling %d scenes", dcfg.n_scenes)
        pairs = synthetic_pairs(dcfg, args.seed, scfg)
        if do_aug:
            pairs = augment(pairs, seed=args.seed, axis_mode=mode)
    log.info("train: voxelizing %d pairs", len(pairs))
    ga, gb, positive = pair_grids(pairs, ncfg.input_dim, trunc)
    weights = net.NetWeights.init(ncfg, args.seed)
    try:
        trained, history = net.train(weights, ga, gb, positive, tcfg)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    net.save_weights(trained, out / "weights.bin")
    net.save_history(history, out / "loss.csv")


def cmd_register(args, cfg, out):
    params = registration_params(cfg, args.seed)
    weights = _load_weights(args.weights, "--weights file")
    source = load_cloud(_input(args.source, "--source cloud"))
    target = load_cloud(_input(args.target, "--target cloud"))
    try:
        result = register(source, target, weights, params)
    except RegistrationError as exc:
        raise DataError(str(exc)) from None
    save_transform(result.transform, out / "transform.txt")
    save_correspondences(result, out / "inliers.csv")
    save_cloud(result.aligned_target, out / "aligned.xyz", with_normals=False)
    summary = (f"overlap_ratio={result.overlap_ratio:.6f} inliers={len(result.inliers)} "
               f"matches={len(result.correspondences)} scale={result.scale_factor:.6f}")
    (out / "summary.txt").write_text(summary + "\n", encoding="ascii")
    print(summary)


def cmd_sweep(args, cfg, out):
    scfg = sweep_config(cfg, args.seed)
    n_shift = _get(cfg, "sweep", "n_shift_steps", int)
    weights = _load_weights(args.weights, "--weights file")
    cloud = load_cloud(_input(args.cloud, "--cloud file"))
    # 0 deg (the identity control) first; 360 deg is the same rotation
    angles = [scfg.step_deg * i for i in range(scfg.n_steps)]
    try:
        if args.kind == "rotation":
            curve, name = rotation_sweep(cloud, weights, scfg, angles), "rotation_sweep.csv"
        elif args.kind == "shift":
            percents = list(range(1, n_shift + 1))
            curve, name = shift_sweep(cloud, weights, scfg, percents), "shift_sweep.csv"
        else:
            curve, name = rotation_shift_sweep(cloud, weights, scfg, angles), "rotation_shift_sweep.csv"
    except GeometryError as exc:
        raise DataError(str(exc)) from None
    curve.save_csv(out / name)
    log.info("sweep %s: mean recall %.4f", args.kind, float(np.mean(curve.recall)))


def cmd_experiments(args, cfg, out):
    g = lambda k, t: _get(cfg, "experiments", k, t)  # noqa: E731
    try:
        translation = tuple(float(v) for v in cfg["experiments"]["translation"].replace(",", " ").split())
    except ValueError:
        raise UsageError("[experiments] translation: expected three numbers") from None
    if len(translation) != 3:
        raise UsageError("[experiments] translation: expected three numbers")
    ecfg = _checked("experiments", lambda: ExperimentConfig(
        translation=translation, rotation_deg=g("rotation_deg", float),
        keep_fraction=g("keep_fraction", float), noise_sigma=g("noise_sigma", float),
        outlier_fraction=g("outlier_fraction", float), seed=args.seed))
    params = registration_params(cfg, args.seed)
    methods = {}
    for spec in args.weights or []:
        name, sep, path = spec.partition("=")
        if not sep or not name:
            raise UsageError(f"--weights expects NAME=PATH, got {spec!r}")
        methods[name] = _load_weights(path, f"weights {name!r}")
    if not methods:
        raise UsageError("missing input: at least one --weights NAME=PATH")
    if "untrained" not in methods:
        first = next(iter(methods.values()))
        methods["untrained"] = net.NetWeights.init(first.config, args.seed)
    if args.cloud:
        cloud = load_cloud(_input(args.cloud, "--cloud file"))
    else:
        cloud = generate_scene(random_scene(args.seed, g("n_objects", int), g("density", float)))
    rows = compare_experiments(cloud, methods, ecfg, params, progress=log.info)
    save_experiments(rows, out / "experiments.csv")


COMMANDS = {"synth": cmd_synth, "sample": cmd_sample, "train": cmd_train,
            "register": cmd_register, "sweep": cmd_sweep, "experiments": cmd_experiments}


# -- argument parsing -------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI file overriding the defaults")
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--threads", type=int, default=1,
                        help="parallelism cap; outputs do not depend on it")
    common.add_argument("--out", default="out", help="output directory (created if missing)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="crossreg", description="Cross-source point cloud registration toolkit.")
    p.add_argument("--dump-defaults", action="store_true", help="print the default config and exit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="synthesize a degraded cloud pair")
    s = sub.add_parser("sample", parents=[common], help="sample training pairs from two clouds")
    s.add_argument("--pc1", help="dense cloud")
    s.add_argument("--pc2", help="second-source cloud")
    s.add_argument("--transform", help="optional pc1->pc2 transform; pc2 is mapped back")
    t = sub.add_parser("train", parents=[common], help="train the descriptor network")
    t.add_argument("--pairs", help="pair directory from `sample`; default synthesizes [dataset]")
    r = sub.add_parser("register", parents=[common], help="align target onto source")
    r.add_argument("--source")
    r.add_argument("--target")
    r.add_argument("--weights")
    w = sub.add_parser("sweep", parents=[common], help="recall under rotations and shifts")
    w.add_argument("kind", choices=["rotation", "shift", "both"])
    w.add_argument("--cloud")
    w.add_argument("--weights")
    e = sub.add_parser("experiments", parents=[common], help="registration experiment table")
    e.add_argument("--cloud", help="scene cloud; default synthesizes one from the seed")
    e.add_argument("--weights", action="append", metavar="NAME=PATH")
    return p


def _validate_common(args):
    if args.seed < 0 or args.seed >= 2 ** 64:
        raise UsageError("--seed must be an unsigned 64-bit integer")
    if args.threads < 1:
        raise UsageError("--threads must be at least 1")


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.dump_defaults:
            sys.stdout.write(dump_config(default_config()))
            return EXIT_OK
        if args.command is None:
            raise UsageError("a subcommand is required")
        _validate_common(args)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(name)s: %(message)s", stream=sys.stderr)
        cfg = load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, out)
        _write_config(cfg, out, args.seed)
        return EXIT_OK
    except UsageError as exc:
        print(f"crossreg: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, GeometryError, OSError) as exc:
        print(f"crossreg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"crossreg: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
