"""3D facial-geometry primitives: similarity poses, UV maps, self-alignment.

A face is a set of m vertices stored column-wise in a 3xm matrix. A pose is
the similarity transform G = f * R * S + t that maps a pose-invariant shape S
onto the observed geometry G. The self-alignment solver recovers (f, R, t)
from landmark correspondences between a posed mesh and its pose-invariant
counterpart; UV maps give both meshes a shared 2D addressing scheme so the
same (u, v) cell always names the same semantic vertex.

All coordinates are float64 and all functions are pure.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DimensionError,
    InvalidPoseError,
    TopologyError,
    UnderdeterminedError,
)

ORTHONORMALITY_TOL = 1e-9
# Relative singular-value threshold below which a landmark configuration is
# treated as collinear/coincident and alignment refuses to answer.
DEGENERACY_RTOL = 1e-12

DEFAULT_LANDMARK_COUNT = 68


@dataclass
class FaceMesh:
    """m vertices of one face, stored as a 3xm float64 matrix."""

    vertices: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        if self.vertices.ndim != 2 or self.vertices.shape[0] != 3:
            raise DimensionError(
                f"mesh vertices must be 3xm, got shape {self.vertices.shape}"
            )
        if self.vertices.shape[1] < 3:
            raise DimensionError("a mesh needs at least 3 vertices")
        if not np.isfinite(self.vertices).all():
            raise DimensionError("mesh vertices must be finite")

    @property
    def m(self) -> int:
        return self.vertices.shape[1]

    def copy(self) -> "FaceMesh":
        return FaceMesh(self.vertices.copy())


@dataclass
class PoseParams:
    """Similarity transform (scale f, rotation R, translation t).

    Construction only coerces types; validity (f > 0, R orthonormal with
    det +1) is checked by `validate`, which every consuming operation calls,
    so tests can build deliberately broken poses.
    """

    f: float
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.f = float(self.f)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    def validate(self) -> None:
        if not np.isfinite(self.f) or self.f <= 0.0:
            raise InvalidPoseError(f"scale must be positive, got {self.f}")
        if not (np.isfinite(self.R).all() and np.isfinite(self.t).all()):
            raise InvalidPoseError("pose entries must be finite")
        err = np.abs(self.R.T @ self.R - np.eye(3)).max()
        if err > ORTHONORMALITY_TOL:
            raise InvalidPoseError(f"R is not orthonormal (|R^T R - I| = {err:.3e})")
        det = np.linalg.det(self.R)
        if abs(det - 1.0) > ORTHONORMALITY_TOL:
            raise InvalidPoseError(f"R must be a proper rotation (det = {det!r})")

    @classmethod
    def identity(cls) -> "PoseParams":
        return cls(1.0, np.eye(3), np.zeros(3))

    def to_json_dict(self) -> dict:
        return {"f": self.f, "R": self.R.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_json_dict(cls, d: dict) -> "PoseParams":
        return cls(d["f"], np.array(d["R"]), np.array(d["t"]))


@dataclass
class UVTopology:
    """Fixed, injective mapping vertex index -> (u, v) grid cell."""

    height: int
    width: int
    cells: np.ndarray  # (m, 2) int array of (u, v) per vertex
    topology_id: str = "custom"
    landmark_cells: np.ndarray | None = None  # (k, 2) default landmarks

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.int64)
        if self.cells.ndim != 2 or self.cells.shape[1] != 2:
            raise TopologyError("cells must be an (m, 2) array")
        if self.cells.shape[0] < 3:
            raise TopologyError("a topology needs at least 3 vertices")
        u, v = self.cells[:, 0], self.cells[:, 1]
        if (u < 0).any() or (u >= self.height).any() or (v < 0).any() or (v >= self.width).any():
            raise TopologyError("cell coordinates outside the UV grid")
        flat = u * self.width + v
        if np.unique(flat).size != flat.size:
            raise TopologyError("vertex -> cell mapping has collisions")
        # Inverse lookup: grid cell -> vertex index, -1 where unused.
        inv = np.full(self.height * self.width, -1, dtype=np.int64)
        inv[flat] = np.arange(flat.size)
        self._cell_to_vertex = inv.reshape(self.height, self.width)
        if self.landmark_cells is not None:
            self.landmark_cells = np.asarray(self.landmark_cells, dtype=np.int64)

    @property
    def m(self) -> int:
        return self.cells.shape[0]

    def vertex_at(self, u: int, v: int) -> int:
        """Vertex index housed at cell (u, v); raises for invalid/empty cells."""
        if not (0 <= u < self.height and 0 <= v < self.width):
            raise TopologyError(f"cell ({u}, {v}) outside {self.height}x{self.width} grid")
        idx = int(self._cell_to_vertex[u, v])
        if idx < 0:
            raise TopologyError(f"cell ({u}, {v}) maps to no vertex")
        return idx


@dataclass
class UVMap:
    """H x W grid of 3D positions plus a validity mask, tied to a topology."""

    grid: np.ndarray  # (H, W, 3)
    valid: np.ndarray  # (H, W) bool
    topology: UVTopology


@dataclass
class LandmarkSet:
    """Ordered landmark vertex indices and their 3D positions (3xk)."""

    indices: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.shape != (3, self.indices.size):
            raise DimensionError(
                f"positions must be 3x{self.indices.size}, got {self.positions.shape}"
            )
        if np.unique(self.indices).size != self.indices.size:
            raise DimensionError("landmark indices must be distinct")
        if self.indices.size < 3:
            raise UnderdeterminedError("need at least 3 landmarks")

    @property
    def k(self) -> int:
        return self.indices.size


def compose_geometry(pose: PoseParams, shape: FaceMesh) -> FaceMesh:
    """Apply the similarity transform: G = f * R * S + t (column-wise)."""
    pose.validate()
    return FaceMesh(pose.f * (pose.R @ shape.vertices) + pose.t[:, None])


def pose_invariant_shape(mean: FaceMesh, deformation: FaceMesh) -> FaceMesh:
    """Combine mean template and per-vertex deformation: S = S_mean + D."""
    if mean.m != deformation.m:
        raise DimensionError(
            f"vertex counts differ: mean has {mean.m}, deformation has {deformation.m}"
        )
    return FaceMesh(mean.vertices + deformation.vertices)


def invert_pose(mesh: FaceMesh, pose: PoseParams) -> FaceMesh:
    """Undo a similarity transform: S = R^T (G - t) / f."""
    pose.validate()
    return FaceMesh(pose.R.T @ (mesh.vertices - pose.t[:, None]) / pose.f)


def similarity_from_point_sets(src: np.ndarray, dst: np.ndarray) -> PoseParams:
    """Least-squares similarity transform mapping src onto dst (both 3xk).

    Closed-form solution: centroid subtraction, SVD of the cross-covariance,
    sign correction on the smallest singular direction so det(R) = +1, and
    scale from the trace ratio.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[0] != 3:
        raise DimensionError(f"point sets must both be 3xk, got {src.shape} and {dst.shape}")
    k = src.shape[1]
    if k < 3:
        raise UnderdeterminedError(f"need at least 3 correspondences, got {k}")

    mu_src = src.mean(axis=1, keepdims=True)
    mu_dst = dst.mean(axis=1, keepdims=True)
    x = src - mu_src
    y = dst - mu_dst

    # Collinear or coincident source points leave the rotation about the
    # point axis unobservable. Planar sets (second singular value healthy)
    # are fine: the det(R) = +1 constraint pins the out-of-plane direction.
    sv = np.linalg.svd(x, compute_uv=False)
    if sv[1] < DEGENERACY_RTOL * max(sv[0], np.finfo(float).tiny):
        raise UnderdeterminedError("landmarks are collinear or coincident")

    cov = (y @ x.T) / k
    u, d, vt = np.linalg.svd(cov)
    s_fix = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_fix[-1] = -1.0
    rot = u @ np.diag(s_fix) @ vt

    var_src = (x * x).sum() / k
    f = float((d * s_fix).sum() / var_src)
    if f <= 0.0:
        raise UnderdeterminedError("recovered a non-positive scale")
    t = (mu_dst - f * rot @ mu_src).reshape(3)
    return PoseParams(f, rot, t)


def _landmark_indices(landmarks) -> np.ndarray:
    if isinstance(landmarks, LandmarkSet):
        return landmarks.indices
    idx = np.asarray(landmarks, dtype=np.int64).reshape(-1)
    if idx.size < 3:
        raise UnderdeterminedError(f"need at least 3 landmarks, got {idx.size}")
    if np.unique(idx).size != idx.size:
        raise DimensionError("landmark indices must be distinct")
    return idx


def self_align(pose_dep: FaceMesh, pose_inv: FaceMesh, landmarks) -> PoseParams:
    """Estimate (f, R, t) with pose_dep ~ f * R * pose_inv + t at the landmarks.

    `landmarks` is a LandmarkSet or a sequence of vertex indices; the same
    indices are gathered from both meshes, which must share topology.
    """
    if pose_dep.m != pose_inv.m:
        raise DimensionError(
            f"meshes must share topology: {pose_dep.m} vs {pose_inv.m} vertices"
        )
    idx = _landmark_indices(landmarks)
    if (idx < 0).any() or (idx >= pose_inv.m).any():
        raise TopologyError("landmark index outside the mesh")
    return similarity_from_point_sets(
        pose_inv.vertices[:, idx], pose_dep.vertices[:, idx]
    )


def uv_pack(mesh: FaceMesh, topology: UVTopology) -> UVMap:
    """Scatter mesh vertices into their UV grid cells."""
    if mesh.m != topology.m:
        raise TopologyError(
            f"mesh has {mesh.m} vertices but topology expects {topology.m}"
        )
    grid = np.zeros((topology.height, topology.width, 3), dtype=np.float64)
    valid = np.zeros((topology.height, topology.width), dtype=bool)
    u, v = topology.cells[:, 0], topology.cells[:, 1]
    grid[u, v] = mesh.vertices.T
    valid[u, v] = True
    return UVMap(grid, valid, topology)


def uv_unpack(uv: UVMap) -> FaceMesh:
    """Gather vertices back out of a UV map, in vertex order."""
    u, v = uv.topology.cells[:, 0], uv.topology.cells[:, 1]
    return FaceMesh(uv.grid[u, v].T)


def landmarks_from_uv(uv: UVMap, cells) -> LandmarkSet:
    """Gather landmark positions for a list of (u, v) cells, in cell order."""
    cells = np.asarray(cells, dtype=np.int64)
    if cells.size == 0:
        raise TopologyError("empty landmark cell list")
    if cells.ndim != 2 or cells.shape[1] != 2:
        raise TopologyError("landmark cells must be an (k, 2) array of (u, v)")
    indices = np.array([uv.topology.vertex_at(int(u), int(v)) for u, v in cells])
    positions = uv.grid[cells[:, 0], cells[:, 1]].T
    return LandmarkSet(indices, positions)


# ---------------------------------------------------------------------------
# Synthetic face-like mesh + default topology
# ---------------------------------------------------------------------------

def synthetic_face_topology(
    height: int = 64, width: int = 64, landmark_count: int = DEFAULT_LANDMARK_COUNT
) -> UVTopology:
    """Deterministic face-oval topology on an HxW grid.

    Cells inside an inscribed ellipse are valid; vertices are enumerated in
    raster order. Landmark cells are spread evenly over the valid region.
    """
    uu, vv = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    a = (uu + 0.5) / height - 0.5
    b = (vv + 0.5) / width - 0.5
    inside = (a / 0.46) ** 2 + (b / 0.38) ** 2 <= 1.0
    cell_list = np.argwhere(inside)
    if cell_list.shape[0] < max(3, landmark_count):
        raise TopologyError("grid too small for the requested landmark count")
    pick = np.round(np.linspace(0, cell_list.shape[0] - 1, landmark_count)).astype(int)
    return UVTopology(
        height=height,
        width=width,
        cells=cell_list,
        topology_id=f"face-oval-{height}x{width}",
        landmark_cells=cell_list[pick],
    )


def synthetic_mean_shape(topology: UVTopology) -> FaceMesh:
    """Procedural face-like mean shape: ellipsoid dome with nose/lip bumps."""
    cells = topology.cells
    a = (cells[:, 0] + 0.5) / topology.height - 0.5  # vertical, + is down
    b = (cells[:, 1] + 0.5) / topology.width - 0.5  # horizontal
    dome = 1.0 - (a / 0.46) ** 2 - (b / 0.38) ** 2
    z = 0.55 * np.sqrt(np.clip(dome, 0.0, None))
    z += 0.20 * np.exp(-((a - 0.06) ** 2 + b**2) / (2 * 0.055**2))  # nose
    z += 0.07 * np.exp(-((a - 0.24) ** 2 / (2 * 0.03**2) + b**2 / (2 * 0.11**2)))  # lips
    x = 0.95 * b
    y = -1.15 * a
    return FaceMesh(np.stack([x, y, z]))


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def save_mesh(path, mesh: FaceMesh, topology_id: str = "custom") -> None:
    doc = {
        "m": mesh.m,
        "vertices": mesh.vertices.T.tolist(),
        "topology_id": topology_id,
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_mesh(path) -> tuple[FaceMesh, str]:
    doc = json.loads(Path(path).read_text())
    vertices = np.asarray(doc["vertices"], dtype=np.float64)
    if vertices.ndim != 2 or vertices.shape[1] != 3 or vertices.shape[0] != doc["m"]:
        raise DimensionError(f"mesh file {path} is inconsistent")
    return FaceMesh(vertices.T), doc.get("topology_id", "custom")


def save_topology(path, topology: UVTopology) -> None:
    doc = {
        "topology_id": topology.topology_id,
        "height": topology.height,
        "width": topology.width,
        "cells": topology.cells.tolist(),
    }
    if topology.landmark_cells is not None:
        doc["landmark_cells"] = topology.landmark_cells.tolist()
    Path(path).write_text(json.dumps(doc) + "\n")


def load_topology(path) -> UVTopology:
    doc = json.loads(Path(path).read_text())
    lm = doc.get("landmark_cells")
    return UVTopology(
        height=doc["height"],
        width=doc["width"],
        cells=np.asarray(doc["cells"]),
        topology_id=doc.get("topology_id", "custom"),
        landmark_cells=None if lm is None else np.asarray(lm),
    )
