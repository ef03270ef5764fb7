"""Per-patch orientation frames: PCA canonicalization plus rotation refinement.

An Orientation (s, R, T) maps canonical coordinates to the world,
p = s * R @ (u, v, z) + T, chosen so the patch is close to a single-valued
height graph z(u, v) over (u, v) in [-1, 1]^2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rotations import rot_x, rot_y

ORTHONORMAL_TOL = 1e-9

# Rotation refinement searches tilts within this cone around the initial
# frame, scored by the residual of a quadratic probe fit.
REFINE_TILT_LIMIT = np.deg2rad(25.0)
DEFAULT_REFINE_BUDGET = 81


class DegenerateGeometryError(ValueError):
    """Point set too degenerate to orient (covariance rank < 2)."""


@dataclass(frozen=True)
class Orientation:
    scale: float            # s > 0
    rotation: np.ndarray    # (3, 3) orthonormal, det +1
    translation: np.ndarray  # (3,) meters

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        T = np.asarray(self.translation, dtype=float).reshape(3)
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("rotation must have det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", T)

    def is_valid(self, tol: float = ORTHONORMAL_TOL) -> bool:
        R = self.rotation
        return (np.abs(R.T @ R - np.eye(3)).max() <= tol
                and abs(np.linalg.det(R) - 1.0) <= tol
                and self.scale > 0)

    def as_array(self) -> np.ndarray:
        """13 floats: s, R row-major, T."""
        return np.concatenate([[self.scale], self.rotation.ravel(), self.translation])

    @classmethod
    def from_array(cls, arr) -> "Orientation":
        arr = np.asarray(arr, dtype=float).ravel()
        if arr.size != 13:
            raise ValueError(f"orientation array must have 13 entries, got {arr.size}")
        return cls(float(arr[0]), arr[1:10].reshape(3, 3), arr[10:13])

    def to_json(self) -> dict:
        return {"s": self.scale, "R": self.rotation.ravel().tolist(),
                "T": self.translation.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Orientation":
        return cls(float(obj["s"]), np.asarray(obj["R"], dtype=float).reshape(3, 3),
                   np.asarray(obj["T"], dtype=float))


def identity_orientation() -> Orientation:
    return Orientation(1.0, np.eye(3), np.zeros(3))


def _fix_axis_sign(axis: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude component positive (deterministic PCA sign)."""
    i = int(np.argmax(np.abs(axis)))
    return -axis if axis[i] < 0 else axis


def pca_frame(points: np.ndarray, normals: np.ndarray | None = None) -> Orientation:
    """Principal-axes orientation: T = centroid, canonical z = least-variance axis.

    When normals are given, the z axis is flipped so the majority of them point
    toward positive canonical z; otherwise signs follow the largest-coordinate
    rule. The scale is the larger of the two in-plane half-extents, putting
    (u, v) inside [-1, 1]^2.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 3:
        raise DegenerateGeometryError("need at least 3 points in R^3")
    T = pts.mean(axis=0)
    X = pts - T
    cov = X.T @ X / len(pts)
    evals, evecs = np.linalg.eigh(cov)  # ascending
    if evals[2] <= 0 or evals[1] <= evals[2] * 1e-12:
        raise DegenerateGeometryError(
            f"covariance rank < 2 (eigenvalues {evals.tolist()}): points are "
            f"collinear or coincident")
    z_axis = evecs[:, 0]
    u_axis = _fix_axis_sign(evecs[:, 2])
    if normals is not None:
        nrm = np.atleast_2d(np.asarray(normals, dtype=float))
        if float(np.sum(nrm @ z_axis)) < 0:
            z_axis = -z_axis
    else:
        z_axis = _fix_axis_sign(z_axis)
    v_axis = np.cross(z_axis, u_axis)
    R = np.stack([u_axis, v_axis, z_axis], axis=1)  # det +1 by construction
    uv = X @ R[:, :2]
    s = float(np.abs(uv).max())
    if s <= 0:
        raise DegenerateGeometryError("all points coincide with the centroid")
    return Orientation(s, R, T)


def to_canonical(points: np.ndarray, orientation: Orientation) -> np.ndarray:
    """(p - T) @ R / s, returned as (N, 3) rows of (u, v, z)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    return (pts - orientation.translation) @ orientation.rotation / orientation.scale


def from_canonical(uvz: np.ndarray, orientation: Orientation) -> np.ndarray:
    """Inverse of to_canonical: s * uvz @ R^T + T."""
    arr = np.atleast_2d(np.asarray(uvz, dtype=float))
    return orientation.scale * arr @ orientation.rotation.T + orientation.translation


_QUAD_COLS = 6  # 1, u, v, u^2, uv, v^2


def _probe_residual(pts_centered: np.ndarray, R: np.ndarray) -> tuple[float, float]:
    """World-unit RMS residual of a quadratic height fit in the frame R.

    Returns (residual, scale). The scale is the in-plane half-extent that
    to_canonical would use, so candidate frames are compared in world units.
    """
    local = pts_centered @ R
    s = float(np.abs(local[:, :2]).max())
    if s <= 0:
        return np.inf, 1.0
    u, v, z = (local / s).T
    A = np.stack([np.ones_like(u), u, v, u * u, u * v, v * v], axis=1)
    coef, _, rank, _ = np.linalg.lstsq(A, z, rcond=None)
    if rank < _QUAD_COLS:
        return np.inf, s
    r = z - A @ coef
    return float(np.sqrt(np.mean(r * r)) * s), s


def refine_rotation(points: np.ndarray, init: Orientation,
                    budget: int = DEFAULT_REFINE_BUDGET) -> Orientation:
    """Search tilts of the initial frame that lower the quadratic probe residual.

    Coarse grid over two tilt angles within +/-25 degrees (sqrt(budget) steps
    per axis), followed by a local quadratic polish around the best grid node.
    Never returns a frame with a worse probe residual than the input.
    """
    pts = np.asarray(points, dtype=float)
    T = init.translation
    X = pts - T
    R0 = init.rotation

    best_res, _ = _probe_residual(X, R0)
    best_angles = (0.0, 0.0)

    def better(res: float, ref: float) -> bool:
        # strict improvement beyond float noise; ties keep the incumbent
        return res < ref - 1e-12 * (1.0 + ref)

    n_side = max(int(np.sqrt(max(budget, 1))), 1)
    if n_side < 2:
        angles = np.array([0.0])
    else:
        angles = np.linspace(-REFINE_TILT_LIMIT, REFINE_TILT_LIMIT, n_side)

    grid_res = np.full((len(angles), len(angles)), np.inf)
    for i, a in enumerate(angles):
        for j, b in enumerate(angles):
            R = R0 @ rot_x(a) @ rot_y(b)
            res, _ = _probe_residual(X, R)
            grid_res[i, j] = res
            if better(res, best_res):
                best_res = res
                best_angles = (a, b)

    # quadratic polish on the 3x3 neighborhood of the best grid node
    if n_side >= 3 and np.isfinite(grid_res).all():
        i0 = int(np.argmin(grid_res.min(axis=1)))
        j0 = int(np.argmin(grid_res[i0]))
        if 0 < i0 < len(angles) - 1 and 0 < j0 < len(angles) - 1:
            da = angles[1] - angles[0]
            fa = (grid_res[i0 + 1, j0] - grid_res[i0 - 1, j0]) / (2 * da)
            fb = (grid_res[i0, j0 + 1] - grid_res[i0, j0 - 1]) / (2 * da)
            faa = (grid_res[i0 + 1, j0] - 2 * grid_res[i0, j0] + grid_res[i0 - 1, j0]) / da**2
            fbb = (grid_res[i0, j0 + 1] - 2 * grid_res[i0, j0] + grid_res[i0, j0 - 1]) / da**2
            if faa > 0 and fbb > 0:
                a_new = angles[i0] - fa / faa
                b_new = angles[j0] - fb / fbb
                if abs(a_new) <= REFINE_TILT_LIMIT and abs(b_new) <= REFINE_TILT_LIMIT:
                    res, _ = _probe_residual(X, R0 @ rot_x(a_new) @ rot_y(b_new))
                    if better(res, best_res):
                        best_res = res
                        best_angles = (a_new, b_new)

    if best_angles == (0.0, 0.0):
        return init
    R = R0 @ rot_x(best_angles[0]) @ rot_y(best_angles[1])
    _, s = _probe_residual(X, R)
    return Orientation(s, R, T)


def probe_residual(points: np.ndarray, orientation: Orientation) -> float:
    """World-unit quadratic probe residual of a frame (refinement's score)."""
    res, _ = _probe_residual(np.asarray(points, dtype=float) - orientation.translation,
                             orientation.rotation)
    return res


def bijectivity_score(points: np.ndarray, normals: np.ndarray,
                      orientation: Orientation) -> float:
    """Fraction of Delaunay-neighbor uv pairs that do not fold.

    A pair folds when either endpoint faces away from the canonical z axis
    (its normal has non-positive canonical z), i.e. the surface is locally
    not a height graph there.
    """
    from scipy.spatial import Delaunay

    uvz = to_canonical(points, orientation)
    nz = np.asarray(normals, dtype=float) @ orientation.rotation[:, 2]
    if np.sum(nz > 0) < len(nz) / 2:
        nz = -nz  # orientation of the normal field is a convention
    tri = Delaunay(uvz[:, :2])
    edges = set()
    for simplex in tri.simplices:
        for a, b in ((0, 1), (1, 2), (2, 0)):
            i, j = int(simplex[a]), int(simplex[b])
            edges.add((i, j) if i < j else (j, i))
    if not edges:
        return 1.0
    good = sum(1 for i, j in edges if nz[i] > 0 and nz[j] > 0)
    return good / len(edges)
