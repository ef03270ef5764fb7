"""Evaluation metrics: fit quality, tracking error, chamfer, strain, collisions."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy.spatial import cKDTree

from .losses import SdfBody
from .mesh import TriMesh, edge_lengths, vertex_normals
from .skinning import Skeleton

CHAMFER_REPORT_SCALE = 1e3  # table convention: chamfer values are reported x1000


class MetricError(ValueError):
    """Empty clouds or mismatched topologies."""


@dataclass
class MetricSet:
    height_rmse: float = 0.0   # meters (canonical height units for patch fits)
    normal_diff: float = 0.0   # degrees
    chamfer: float = 0.0       # normalized clouds, reported x1000
    e3d: float = 0.0           # mean vertex error / template bbox diagonal
    e_n: float = 0.0           # degrees
    eps_c: float = 0.0         # % vertices colliding
    eps_e: float = 0.0         # % edge-length change
    eps_a: float = 0.0         # % area change

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise MetricError(f"{f.name} must be nonnegative")

    def to_json(self) -> dict:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


def height_rmse(z_pred: np.ndarray, z_true: np.ndarray) -> float:
    d = np.asarray(z_pred, dtype=float) - np.asarray(z_true, dtype=float)
    return float(np.sqrt(np.mean(d * d)))


def normal_angle_deg(n_a: np.ndarray, n_b: np.ndarray) -> float:
    """Mean angle between corresponding unit normals, in degrees.

    Sign-insensitive: antipodal normals count as aligned (orientation of a
    normal field is a convention). Uses atan2(|a x b|, |a . b|), which is
    exactly zero for identical vectors and well conditioned at small angles.
    """
    a = np.atleast_2d(np.asarray(n_a, dtype=float))
    b = np.atleast_2d(np.asarray(n_b, dtype=float))
    cos = np.abs(np.einsum("na,na->n", a, b))
    sin = np.linalg.norm(np.cross(a, b), axis=1)
    return float(np.degrees(np.arctan2(sin, cos)).mean())


def normalize_cloud(points: np.ndarray) -> np.ndarray:
    """Center on the bounding-box midpoint and scale to unit bbox diagonal."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if len(pts) == 0:
        raise MetricError("cannot normalize an empty cloud")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    if diag == 0.0:
        return pts - (lo + hi) / 2.0
    return (pts - (lo + hi) / 2.0) / diag


def chamfer(cloud_a: np.ndarray, cloud_b: np.ndarray) -> float:
    """Symmetric chamfer: mean_a min_b |a-b|^2 + mean_b min_a |b-a|^2.

    Inputs are used as given; normalize with normalize_cloud first when
    comparing across scales. Symmetric in its arguments by construction.
    """
    a = np.atleast_2d(np.asarray(cloud_a, dtype=float))
    b = np.atleast_2d(np.asarray(cloud_b, dtype=float))
    if len(a) == 0 or len(b) == 0:
        raise MetricError("chamfer needs nonempty clouds")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float(np.mean(d_ab ** 2) + np.mean(d_ba ** 2))


def chamfer_x1000(cloud_a: np.ndarray, cloud_b: np.ndarray) -> float:
    """Chamfer on normalized clouds in the x1000 reporting convention."""
    return CHAMFER_REPORT_SCALE * chamfer(normalize_cloud(cloud_a),
                                          normalize_cloud(cloud_b))


def collision_pct(points: np.ndarray, body: SdfBody,
                  skeleton: Skeleton | None = None) -> float:
    """Percentage of points strictly inside the body (d < 0)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    d, _, _ = body.signed_distance(pts, skeleton)
    return float(100.0 * np.sum(d < 0.0) / len(pts))


def strain_pcts(template: TriMesh, deformed: TriMesh) -> tuple[float, float]:
    """(eps_e, eps_a): mean per-point percentage edge-length and area change.

    Per-edge/per-face relative changes are averaged onto their incident
    vertices, then over vertices.
    """
    if not np.array_equal(template.faces, deformed.faces):
        raise MetricError("strain needs identical topologies")
    V = template.num_vertices

    e_t = edge_lengths(template)
    e_d = edge_lengths(deformed)
    edge_pct = 100.0 * np.abs(e_d - e_t) / e_t
    acc_e = np.zeros(V)
    cnt_e = np.zeros(V)
    for c in range(2):
        np.add.at(acc_e, template.edges[:, c], edge_pct)
        np.add.at(cnt_e, template.edges[:, c], 1.0)

    a_t = template.face_areas()
    a_d = deformed.face_areas()
    area_pct = 100.0 * np.abs(a_d - a_t) / a_t
    acc_a = np.zeros(V)
    cnt_a = np.zeros(V)
    for c in range(3):
        np.add.at(acc_a, template.faces[:, c], area_pct)
        np.add.at(cnt_a, template.faces[:, c], 1.0)

    has_e = cnt_e > 0
    has_a = cnt_a > 0
    eps_e = float(np.mean(acc_e[has_e] / cnt_e[has_e]))
    eps_a = float(np.mean(acc_a[has_a] / cnt_a[has_a]))
    return eps_e, eps_a


def e3d(reconstructed: TriMesh, reference: TriMesh) -> float:
    """Mean per-vertex distance divided by the reference bbox diagonal."""
    if reconstructed.num_vertices != reference.num_vertices:
        raise MetricError("e3d needs equal vertex counts")
    err = np.linalg.norm(reconstructed.vertices - reference.vertices, axis=1)
    return float(err.mean() / reference.bbox_diagonal())


def e_n(reconstructed: TriMesh, reference: TriMesh) -> float:
    """Mean per-vertex normal angle difference, degrees."""
    return normal_angle_deg(vertex_normals(reconstructed), vertex_normals(reference))


def mesh_pair_metrics(mesh_a: TriMesh, mesh_b: TriMesh,
                      samples: int = 10_000, seed: int = 0) -> MetricSet:
    """Full MetricSet between two meshes (strains only when topologies match)."""
    from .mesh import sample_surface_arrays

    # same seed on both: identical meshes yield identical clouds (chamfer 0)
    pa, _, _ = sample_surface_arrays(mesh_a, samples, seed)
    pb, _, _ = sample_surface_arrays(mesh_b, samples, seed)
    ms = MetricSet(chamfer=chamfer_x1000(pa, pb))
    if np.array_equal(mesh_a.faces, mesh_b.faces):
        ms.e3d = e3d(mesh_a, mesh_b)
        ms.e_n = normal_angle_deg(vertex_normals(mesh_a), vertex_normals(mesh_b))
        ms.eps_e, ms.eps_a = strain_pcts(mesh_b, mesh_a)
    return ms
