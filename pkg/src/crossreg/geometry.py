"""Point clouds, rigid transforms, spatial indexing and file I/O."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree


class GeometryError(ValueError):
    pass


class ParseError(GeometryError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


def _as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 3))
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise GeometryError(f"points must have shape (n, 3), got {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An ordered set of 3D points with optional normals and curvature.

    Arrays are copied on construction and marked read-only, so a cloud can be
    shared freely between threads and callers.
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    curvature: np.ndarray | None = None

    def __post_init__(self):
        pts = _as_points(self.points).copy()
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point coordinates must be finite")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(nrm) != len(pts):
                raise GeometryError("normals and points differ in length")
            if len(nrm) and np.max(np.abs(np.linalg.norm(nrm, axis=1) - 1.0)) > 1e-6:
                raise GeometryError("normals must be unit length")
            nrm.flags.writeable = False
            object.__setattr__(self, "normals", nrm)
        if self.curvature is not None:
            cur = np.array(self.curvature, dtype=np.float64).reshape(-1)
            if len(cur) != len(pts):
                raise GeometryError("curvature and points differ in length")
            if np.any(cur < 0):
                raise GeometryError("curvature must be non-negative")
            cur.flags.writeable = False
            object.__setattr__(self, "curvature", cur)

    def __len__(self):
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def subset(self, ids) -> "PointCloud":
        ids = np.asarray(ids, dtype=np.int64)
        return PointCloud(
            self.points[ids],
            None if self.normals is None else self.normals[ids],
            None if self.curvature is None else self.curvature[ids],
        )

    def centroid(self) -> np.ndarray:
        if len(self) == 0:
            raise GeometryError("centroid of an empty cloud")
        return self.points.mean(axis=0)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """x -> scale * rotation @ x + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trn = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise GeometryError("scale must be positive")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-9:
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise GeometryError("rotation determinant is not +1")
        rot.flags.writeable = False
        trn.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trn)
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        """Build from a 4x4 homogeneous matrix whose upper block is ``s * R``."""
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise GeometryError(f"expected a 4x4 matrix, got {m.shape}")
        block = m[:3, :3]
        scale = np.cbrt(np.linalg.det(block))
        if not scale > 0:
            raise GeometryError("matrix block has non-positive determinant")
        rot = block / scale
        # re-orthonormalise to absorb decimal round-off from text files
        u, _, vt = np.linalg.svd(rot)
        rot = u @ vt
        return cls(rot, m[:3, 3], float(scale))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.translation
        return m

    def apply_points(self, pts) -> np.ndarray:
        pts = _as_points(pts)
        return self.scale * pts @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -(rt @ self.translation) / self.scale, 1.0 / self.scale)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return the transform that applies ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
            self.scale * other.scale,
        )

    def rotation_angle_deg(self) -> float:
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def rotation_about_axis(axis, angle_deg: float) -> np.ndarray:
    """Rodrigues rotation matrix for a rotation of ``angle_deg`` about ``axis``."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    theta = np.radians(angle_deg)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    rot = np.eye(3) + np.sin(theta) * k + (1 - np.cos(theta)) * k @ k
    # exact re-orthonormalisation keeps the 1e-9 invariants for any angle
    u, _, vt = np.linalg.svd(rot)
    return u @ vt


def apply_transform(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    if (t.scale == 1.0 and np.array_equal(t.rotation, np.eye(3))
            and not np.any(t.translation)):
        return cloud
    normals = None if cloud.normals is None else cloud.normals @ t.rotation.T
    return PointCloud(t.apply_points(cloud.points), normals, cloud.curvature)


class SpatialIndex:
    """Nearest-neighbour queries over a fixed cloud.

    Backed by a k-d tree. Ties are resolved toward the lowest point id so
    results agree exactly with a linear scan.
    """

    def __init__(self, cloud):
        pts = cloud.points if isinstance(cloud, PointCloud) else _as_points(cloud)
        self.points = pts
        self._tree = cKDTree(pts) if len(pts) else None

    def __len__(self):
        return len(self.points)

    def _check(self):
        if self._tree is None:
            raise GeometryError("spatial index over an empty cloud")

    def nearest(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised nearest neighbour: returns (ids, distances)."""
        self._check()
        q = _as_points(np.atleast_2d(queries))
        if len(q) == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        k = min(4, len(self.points))
        dist, idx = self._tree.query(q, k=k)
        if k == 1:
            dist, idx = dist[:, None], idx[:, None]
        # recompute distances exactly as the brute-force scan does
        exact = np.linalg.norm(self.points[idx] - q[:, None, :], axis=2)
        best = exact.min(axis=1)
        tied = exact == best[:, None]
        ids = np.where(tied, idx, np.iinfo(np.int64).max).min(axis=1)
        # all k candidates tied: there may be more equidistant points further down
        for row in np.nonzero(tied.all(axis=1) & (k < len(self.points)))[0]:
            cand = np.asarray(self._tree.query_ball_point(q[row], best[row] * (1 + 1e-12) + 1e-300))
            d = np.linalg.norm(self.points[cand] - q[row], axis=1)
            ids[row] = cand[d == d.min()].min()
            best[row] = d.min()
        return ids.astype(np.int64), best

    def within(self, center, radius) -> np.ndarray:
        """Sorted ids of points with distance <= radius from ``center``."""
        self._check()
        return np.sort(np.asarray(self._tree.query_ball_point(np.asarray(center, float), radius),
                                  dtype=np.int64))

    def knn(self, queries, k) -> tuple[np.ndarray, np.ndarray]:
        self._check()
        dist, idx = self._tree.query(_as_points(np.atleast_2d(queries)), k=k)
        return np.asarray(idx).reshape(-1, k), np.asarray(dist).reshape(-1, k)


def nearest_neighbor(index: SpatialIndex, query) -> tuple[int, float]:
    ids, dist = index.nearest(np.asarray(query, dtype=np.float64).reshape(1, 3))
    return int(ids[0]), float(dist[0])


@dataclass(frozen=True)
class BoundingSphere:
    center: np.ndarray
    radius: float


def bounding_sphere(cloud) -> BoundingSphere:
    """Centroid-centred containing sphere (not the minimal enclosing one)."""
    pts = cloud.points if isinstance(cloud, PointCloud) else _as_points(cloud)
    if len(pts) == 0:
        raise GeometryError("bounding sphere of an empty cloud")
    center = pts.mean(axis=0)
    radius = float(np.sqrt(np.max(np.sum((pts - center) ** 2, axis=1))))
    return BoundingSphere(center, radius)


# -- file formats -----------------------------------------------------------

def _parse_floats(fields, path, line_no):
    try:
        vals = [float(f) for f in fields]
    except ValueError:
        raise ParseError(path, line_no, f"non-numeric field in {' '.join(fields)!r}") from None
    if not all(np.isfinite(vals)):
        raise ParseError(path, line_no, "non-finite coordinate")
    return vals


def _cloud_from_rows(rows, with_normals):
    if not rows:
        return PointCloud(np.zeros((0, 3)))
    arr = np.array(rows, dtype=np.float64)
    if with_normals:
        nrm = arr[:, 3:6]
        lens = np.linalg.norm(nrm, axis=1, keepdims=True)
        nrm = np.divide(nrm, lens, out=np.tile([0.0, 0.0, 1.0], (len(arr), 1)), where=lens > 0)
        return PointCloud(arr[:, :3], nrm)
    return PointCloud(arr[:, :3])


def _load_xyz(path: Path) -> PointCloud:
    rows, arity = [], None
    with open(path, encoding="ascii") as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = text.split()
            if len(fields) not in (3, 6):
                raise ParseError(path, line_no, f"expected 3 or 6 fields, got {len(fields)}")
            if arity is None:
                arity = len(fields)
            elif len(fields) != arity:
                raise ParseError(path, line_no, f"expected {arity} fields, got {len(fields)}")
            rows.append(_parse_floats(fields, path, line_no))
    return _cloud_from_rows(rows, arity == 6)


def _load_ply(path: Path) -> PointCloud:
    with open(path, encoding="ascii") as fh:
        lines = fh.readlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError(path, 1, "missing 'ply' magic")
    n_vertex, props, in_vertex, body = None, [], False, None
    for i, line in enumerate(lines[1:], start=2):
        words = line.split()
        if not words:
            continue
        if words[0] == "format":
            if words[1:2] != ["ascii"]:
                raise ParseError(path, i, "only ASCII PLY is supported")
        elif words[0] == "element":
            in_vertex = words[1] == "vertex"
            if in_vertex:
                n_vertex = int(words[2])
        elif words[0] == "property" and in_vertex:
            props.append(words[-1])
        elif words[0] == "end_header":
            body = i
            break
    if body is None or n_vertex is None:
        raise ParseError(path, len(lines), "incomplete PLY header")
    if props[:3] != ["x", "y", "z"]:
        raise ParseError(path, body, "vertex properties must start with x y z")
    with_normals = all(p in props for p in ("nx", "ny", "nz"))
    cols = [props.index(p) for p in ("x", "y", "z")]
    if with_normals:
        cols += [props.index(p) for p in ("nx", "ny", "nz")]
    rows = []
    for j in range(n_vertex):
        line_no = body + 1 + j
        if line_no > len(lines):
            raise ParseError(path, line_no, f"expected {n_vertex} vertices, file ends early")
        fields = lines[line_no - 1].split()
        if len(fields) != len(props):
            raise ParseError(path, line_no, f"expected {len(props)} fields, got {len(fields)}")
        vals = _parse_floats(fields, path, line_no)
        rows.append([vals[c] for c in cols])
    return _cloud_from_rows(rows, with_normals)


def load_cloud(path) -> PointCloud:
    """Read an XYZ text file or an ASCII PLY file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such cloud file: {path}")
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head.startswith(b"ply"):
        return _load_ply(path)
    return _load_xyz(path)


def _fmt(x):
    return repr(float(x))


def save_cloud(cloud: PointCloud, path, with_normals=True):
    """Write a cloud as XYZ (``.xyz``/``.txt``) or ASCII PLY (``.ply``)."""
    path = Path(path)
    normals = cloud.normals if (with_normals and cloud.normals is not None) else None
    data = cloud.points if normals is None else np.hstack([cloud.points, normals])
    body = "".join(" ".join(_fmt(v) for v in row) + "\n" for row in data)
    if path.suffix.lower() == ".ply":
        header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
                  "property float x", "property float y", "property float z"]
        if normals is not None:
            header += ["property float nx", "property float ny", "property float nz"]
        header.append("end_header")
        body = "\n".join(header) + "\n" + body
    path.write_text(body, encoding="ascii")


def save_transform(t: RigidTransform, path):
    m = t.matrix()
    Path(path).write_text("".join(" ".join(_fmt(v) for v in row) + "\n" for row in m),
                          encoding="ascii")


def load_transform(path) -> RigidTransform:
    path = Path(path)
    rows = []
    with open(path, encoding="ascii") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 4:
                raise ParseError(path, line_no, f"expected 4 fields, got {len(fields)}")
            rows.append(_parse_floats(fields, path, line_no))
    if len(rows) != 4:
        raise ParseError(path, len(rows), f"expected 4 matrix rows, got {len(rows)}")
    return RigidTransform.from_matrix(rows)
