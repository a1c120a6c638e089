"""Synthetic scenes and cross-source degradations.

A scene is a handful of analytic primitives sampled uniformly on their
surfaces. Cross-source views of a scene are produced by :func:`degrade`,
which applies density loss, occlusion, noise, outliers and a pose change,
always in that order.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

import numpy as np

from .geometry import (PointCloud, RigidTransform, apply_transform, bounding_sphere,
                       rotation_about_axis)

PRIMITIVE_KINDS = ("plane", "box", "sphere", "cylinder")


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Primitive:
    """One surface in a scene.

    ``size`` is interpreted per kind: plane ``(sx, sy)``, box ``(sx, sy, sz)``,
    sphere ``(radius,)``, cylinder ``(radius, height)``. The primitive is
    built in its local frame (plane normal and cylinder axis along +z), rotated
    by ``angle_deg`` about ``axis`` and moved to ``center``.
    """

    kind: str
    size: tuple
    n_points: int
    center: tuple = (0.0, 0.0, 0.0)
    axis: tuple = (0.0, 0.0, 1.0)
    angle_deg: float = 0.0

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS:
            raise SceneError(f"unknown primitive kind {self.kind!r}")
        want = {"plane": 2, "box": 3, "sphere": 1, "cylinder": 2}[self.kind]
        if len(self.size) != want:
            raise SceneError(f"{self.kind} needs {want} size values, got {len(self.size)}")
        if any(s <= 0 for s in self.size):
            raise SceneError("primitive extents must be positive")
        if self.n_points < 0:
            raise SceneError("point count must be non-negative")

    def rotation(self) -> np.ndarray:
        if self.angle_deg == 0:
            return np.eye(3)
        return rotation_about_axis(self.axis, self.angle_deg)


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        if sum(p.n_points for p in self.primitives) <= 0:
            raise SceneError("scene must request at least one point")


def _sample_plane(rng, size, n):
    sx, sy = size
    pts = np.column_stack([(rng.random(n) - 0.5) * sx, (rng.random(n) - 0.5) * sy, np.zeros(n)])
    return pts, np.tile([0.0, 0.0, 1.0], (n, 1))


def _sample_box(rng, size, n):
    half = np.asarray(size, dtype=float) / 2
    # faces as (normal axis, sign); area-weighted face choice
    faces = [(a, s) for a in range(3) for s in (-1.0, 1.0)]
    areas = np.array([np.prod(np.delete(2 * half, a)) for a, _ in faces])
    which = rng.choice(len(faces), size=n, p=areas / areas.sum())
    uv = rng.random((n, 3)) * 2 - 1
    pts = uv * half
    nrm = np.zeros((n, 3))
    for f, (a, s) in enumerate(faces):
        sel = which == f
        pts[sel, a] = s * half[a]
        nrm[sel, a] = s
    return pts, nrm


def _sample_sphere(rng, size, n):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return size[0] * v, v


def _sample_cylinder(rng, size, n):
    radius, height = size
    theta = rng.random(n) * 2 * np.pi
    nrm = np.column_stack([np.cos(theta), np.sin(theta), np.zeros(n)])
    pts = np.column_stack([radius * nrm[:, 0], radius * nrm[:, 1], (rng.random(n) - 0.5) * height])
    return pts, nrm


_SAMPLERS = {"plane": _sample_plane, "box": _sample_box,
             "sphere": _sample_sphere, "cylinder": _sample_cylinder}


def generate_scene(spec: SceneSpec) -> PointCloud:
    """Sample every primitive's surface uniformly; normals are analytic."""
    streams = np.random.SeedSequence(spec.seed).spawn(len(spec.primitives))
    all_pts, all_nrm = [], []
    for prim, ss in zip(spec.primitives, streams):
        if prim.kind not in _SAMPLERS:
            raise SceneError(f"unknown primitive kind {prim.kind!r}")
        pts, nrm = _SAMPLERS[prim.kind](np.random.default_rng(ss), prim.size, prim.n_points)
        rot = prim.rotation()
        if prim.angle_deg != 0:
            pts = pts @ rot.T
            nrm = nrm @ rot.T
        all_pts.append(pts + np.asarray(prim.center, dtype=float))
        all_nrm.append(nrm)
    return PointCloud(np.vstack(all_pts), np.vstack(all_nrm))


@dataclass(frozen=True)
class DegradationProfile:
    keep_fraction: float = 1.0
    occlusion_cuts: int = 0
    occlusion_max_fraction: float = 0.1
    noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    transform: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if not 0 < self.keep_fraction <= 1:
            raise SceneError("keep_fraction must lie in (0, 1]")
        if self.occlusion_cuts < 0 or not 0 <= self.occlusion_max_fraction < 1:
            raise SceneError("occlusion settings out of range")
        if self.noise_sigma < 0 or self.outlier_fraction < 0:
            raise SceneError("noise_sigma and outlier_fraction must be non-negative")

    def is_identity(self) -> bool:
        t = self.transform
        return (self.keep_fraction == 1 and self.occlusion_cuts == 0 and self.noise_sigma == 0
                and self.outlier_fraction == 0 and t.scale == 1
                and np.array_equal(t.rotation, np.eye(3)) and not np.any(t.translation))


def subsample(cloud: PointCloud, keep_fraction: float, rng) -> np.ndarray:
    n = len(cloud)
    k = max(1, int(round(keep_fraction * n))) if n else 0
    if k >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=k, replace=False))


def occlusion_cuts(points: np.ndarray, n_cuts: int, max_fraction: float, rng) -> np.ndarray:
    """Ids that survive ``n_cuts`` random half-space removals.

    Each cut picks a random direction and removes the points beyond a plane
    placed so that at most ``max_fraction`` of the remaining points go.
    """
    keep = np.arange(len(points))
    for _ in range(n_cuts):
        if len(keep) < 2:
            break
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        frac = rng.random() * max_fraction
        n_remove = int(np.floor(frac * len(keep)))
        if n_remove == 0:
            continue
        s = points[keep] @ d
        order = np.argsort(-s, kind="stable")
        drop = np.zeros(len(keep), dtype=bool)
        drop[order[:n_remove]] = True
        keep = keep[~drop]
    return keep


def degrade(cloud: PointCloud, profile: DegradationProfile, seed: int) -> PointCloud:
    """Apply density loss, occlusion, noise, outliers, then the pose change."""
    if len(cloud) == 0:
        raise SceneError("cannot degrade an empty cloud")
    if profile.is_identity():
        return cloud
    rng = np.random.default_rng(seed)
    ids = subsample(cloud, profile.keep_fraction, rng)
    ids = ids[occlusion_cuts(cloud.points[ids], profile.occlusion_cuts,
                             profile.occlusion_max_fraction, rng)]
    part = cloud.subset(ids)
    pts = part.points
    nrm = part.normals
    if profile.noise_sigma > 0:
        pts = pts + rng.normal(scale=profile.noise_sigma, size=pts.shape)
    n_out = int(round(profile.outlier_fraction * len(pts)))
    if n_out:
        sphere = bounding_sphere(pts)
        direction = rng.normal(size=(n_out, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        r = 1.2 * sphere.radius * np.cbrt(rng.random(n_out))
        pts = np.vstack([pts, sphere.center + direction * r[:, None]])
        if nrm is not None:
            rn = rng.normal(size=(n_out, 3))
            nrm = np.vstack([nrm, rn / np.linalg.norm(rn, axis=1, keepdims=True)])
    return apply_transform(PointCloud(pts, nrm), profile.transform)


def make_cross_source_pair(spec: SceneSpec, profile_a: DegradationProfile,
                           profile_b: DegradationProfile, seeds=(1, 2)):
    """Two degraded views of one scene and the transform taking A's frame to B's."""
    scene = generate_scene(spec)
    a = degrade(scene, profile_a, seeds[0])
    b = degrade(scene, profile_b, seeds[1])
    truth = profile_b.transform.compose(profile_a.transform.inverse())
    return a, b, truth


# -- config files -------------------------------------------------------------

def _vec(text, n=None):
    vals = tuple(float(v) for v in text.replace(",", " ").split())
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} values, got {len(vals)}")
    return vals


def _fmt_vec(v):
    return ", ".join(repr(float(x)) for x in v)


def default_scene(seed: int = 0, density: float = 1.0) -> SceneSpec:
    """A small asymmetric tabletop: floor, wall, two boxes, a sphere and a cylinder."""
    def n(k):
        return max(1, int(round(k * density)))
    prims = (
        Primitive("plane", (2.0, 2.0), n(2400)),
        Primitive("plane", (2.0, 0.8), n(1000), center=(0.0, 1.0, 0.4), axis=(1, 0, 0), angle_deg=90),
        Primitive("box", (0.6, 0.4, 0.5), n(1400), center=(-0.45, 0.2, 0.25), angle_deg=20),
        Primitive("box", (0.3, 0.3, 0.3), n(700), center=(0.55, -0.45, 0.15), angle_deg=-35),
        Primitive("sphere", (0.22,), n(800), center=(0.35, 0.4, 0.22)),
        Primitive("cylinder", (0.12, 0.7), n(700), center=(-0.5, -0.5, 0.35)),
    )
    return SceneSpec(prims, seed)


def random_scene(seed: int, n_objects: int = 6, points_per_unit_area: float = 700.0) -> SceneSpec:
    """Floor, one wall and ``n_objects`` random objects resting on the floor.

    Point counts follow surface area so density is roughly uniform.
    """
    rng = np.random.default_rng(seed)

    def count(area):
        return max(60, int(round(area * points_per_unit_area)))

    prims = [Primitive("plane", (2.0, 2.0), count(4.0))]
    wall_h = rng.uniform(0.5, 1.0)
    side = rng.integers(4)
    center = [(0.0, 1.0), (0.0, -1.0), (1.0, 0.0), (-1.0, 0.0)][side]
    axis = (1.0, 0.0, 0.0) if side < 2 else (0.0, 1.0, 0.0)
    prims.append(Primitive("plane", (2.0, wall_h) if side < 2 else (wall_h, 2.0), count(2.0 * wall_h),
                           center=(center[0], center[1], wall_h / 2), axis=axis, angle_deg=90.0))
    for _ in range(n_objects):
        kind = str(rng.choice(["box", "sphere", "cylinder"], p=[0.5, 0.25, 0.25]))
        xy = rng.uniform(-0.75, 0.75, size=2)
        yaw = float(rng.uniform(-180, 180))
        if kind == "box":
            size = tuple(float(v) for v in rng.uniform(0.12, 0.5, size=3))
            sx, sy, sz = size
            area = 2 * (sx * sy + sx * sz + sy * sz)
            prims.append(Primitive("box", size, count(area), center=(xy[0], xy[1], sz / 2), angle_deg=yaw))
        elif kind == "sphere":
            r = float(rng.uniform(0.08, 0.25))
            prims.append(Primitive("sphere", (r,), count(4 * np.pi * r * r), center=(xy[0], xy[1], r)))
        else:
            r, h = float(rng.uniform(0.05, 0.18)), float(rng.uniform(0.2, 0.7))
            tilt = float(rng.choice([0.0, 90.0]))
            z = h / 2 if tilt == 0 else r
            prims.append(Primitive("cylinder", (r, h), count(2 * np.pi * r * h), center=(xy[0], xy[1], z),
                                   axis=(np.cos(np.radians(yaw)), np.sin(np.radians(yaw)), 0.0), angle_deg=tilt))
    return SceneSpec(tuple(prims), seed)


def scene_to_config(spec: SceneSpec, cfg: configparser.ConfigParser):
    cfg["scene"] = {"seed": str(spec.seed)}
    for i, p in enumerate(spec.primitives):
        cfg[f"primitive.{i}"] = {
            "kind": p.kind, "size": _fmt_vec(p.size), "points": str(p.n_points),
            "center": _fmt_vec(p.center), "axis": _fmt_vec(p.axis), "angle_deg": repr(float(p.angle_deg)),
        }


def scene_from_config(cfg: configparser.ConfigParser) -> SceneSpec:
    names = sorted((s for s in cfg.sections() if s.startswith("primitive.")),
                   key=lambda s: int(s.split(".", 1)[1]))
    if not names:
        raise SceneError("config has no [primitive.N] sections")
    prims = []
    for name in names:
        sec = cfg[name]
        try:
            prims.append(Primitive(
                kind=sec.get("kind", ""),
                size=_vec(sec.get("size", "")),
                n_points=sec.getint("points"),
                center=_vec(sec.get("center", "0 0 0"), 3),
                axis=_vec(sec.get("axis", "0 0 1"), 3),
                angle_deg=sec.getfloat("angle_deg", 0.0),
            ))
        except (TypeError, ValueError) as exc:
            raise SceneError(f"[{name}]: {exc}") from None
    seed = cfg.getint("scene", "seed", fallback=0) if cfg.has_section("scene") else 0
    return SceneSpec(tuple(prims), seed)


def profile_to_section(p: DegradationProfile) -> dict:
    t = p.transform
    # axis-angle is the readable form; matrices round-trip through it exactly enough
    angle = t.rotation_angle_deg()
    axis = (0.0, 0.0, 1.0)
    if angle > 1e-12:
        w = np.array([t.rotation[2, 1] - t.rotation[1, 2], t.rotation[0, 2] - t.rotation[2, 0],
                      t.rotation[1, 0] - t.rotation[0, 1]])
        if np.linalg.norm(w) > 1e-9:
            axis = tuple(w / np.linalg.norm(w))
        else:
            vals, vecs = np.linalg.eigh(t.rotation + t.rotation.T)
            axis = tuple(vecs[:, -1])
    return {
        "keep_fraction": repr(p.keep_fraction),
        "occlusion_cuts": str(p.occlusion_cuts),
        "occlusion_max_fraction": repr(p.occlusion_max_fraction),
        "noise_sigma": repr(p.noise_sigma),
        "outlier_fraction": repr(p.outlier_fraction),
        "rotation_axis": _fmt_vec(axis),
        "rotation_deg": repr(angle),
        "translation": _fmt_vec(t.translation),
        "scale": repr(t.scale),
    }


def profile_from_section(sec, name="profile") -> DegradationProfile:
    try:
        angle = sec.getfloat("rotation_deg", 0.0)
        rot = np.eye(3) if angle == 0 else rotation_about_axis(_vec(sec.get("rotation_axis", "0 0 1"), 3), angle)
        t = RigidTransform(rot, _vec(sec.get("translation", "0 0 0"), 3), sec.getfloat("scale", 1.0))
        return DegradationProfile(
            keep_fraction=sec.getfloat("keep_fraction", 1.0),
            occlusion_cuts=sec.getint("occlusion_cuts", 0),
            occlusion_max_fraction=sec.getfloat("occlusion_max_fraction", 0.1),
            noise_sigma=sec.getfloat("noise_sigma", 0.0),
            outlier_fraction=sec.getfloat("outlier_fraction", 0.0),
            transform=t,
        )
    except (TypeError, ValueError) as exc:
        raise SceneError(f"[{name}]: {exc}") from None
