"""Least-squares n-jet height fields with closed-form differentials.

The height function is z(u, v) = sum_{i=0..n} sum_{j=0..i} a[i-j, j] u^(i-j) v^j.
Coefficients are stored flat, ordered by total degree i then by j ascending:
(0,0); (1,0), (0,1); (2,0), (1,1), (0,2); ...
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .frames import Orientation, identity_orientation

DEFAULT_ORDER = 4  # fits garment-scale patches well at modest cost


class JetFitError(ValueError):
    """Under-determined or rank-deficient jet fit."""


def n_coeffs(order: int) -> int:
    return (order + 1) * (order + 2) // 2


def exponent_table(order: int) -> np.ndarray:
    """(C, 2) array of (u-exponent, v-exponent) in coefficient order."""
    exps = [(i - j, j) for i in range(order + 1) for j in range(i + 1)]
    return np.asarray(exps, dtype=np.int64)


def basis(uv: np.ndarray, order: int) -> np.ndarray:
    """(M, C) monomial rows u^(i-j) v^j in coefficient order."""
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    u, v = uv[:, 0], uv[:, 1]
    exps = exponent_table(order)
    upow = np.vander(u, order + 1, increasing=True)  # u^0 .. u^order
    vpow = np.vander(v, order + 1, increasing=True)
    return upow[:, exps[:, 0]] * vpow[:, exps[:, 1]]


def basis_du(uv: np.ndarray, order: int) -> np.ndarray:
    """(M, C) partials of the basis row with respect to u."""
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    u, v = uv[:, 0], uv[:, 1]
    exps = exponent_table(order)
    upow = np.vander(u, order + 2, increasing=True)
    vpow = np.vander(v, order + 1, increasing=True)
    a = exps[:, 0]
    out = a * upow[:, np.maximum(a - 1, 0)] * vpow[:, exps[:, 1]]
    out[:, a == 0] = 0.0
    return out


def basis_dv(uv: np.ndarray, order: int) -> np.ndarray:
    """(M, C) partials of the basis row with respect to v."""
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    u, v = uv[:, 0], uv[:, 1]
    exps = exponent_table(order)
    upow = np.vander(u, order + 1, increasing=True)
    vpow = np.vander(v, order + 2, increasing=True)
    b = exps[:, 1]
    out = b * upow[:, exps[:, 0]] * vpow[:, np.maximum(b - 1, 0)]
    out[:, b == 0] = 0.0
    return out


def eval_height(coeffs: np.ndarray, order: int, uv: np.ndarray) -> np.ndarray:
    """Bivariate Horner evaluation: z = sum_a u^a * (sum_b a[a,b] v^b)."""
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    u, v = uv[:, 0], uv[:, 1]
    # rearrange flat coefficients into a[a][b] rows (a = u-exponent)
    rows: list[list[float]] = [[] for _ in range(order + 1)]
    idx = 0
    for i in range(order + 1):
        for j in range(i + 1):
            rows[i - j].append(float(coeffs[idx]))
            idx += 1
    z = np.zeros_like(u)
    for a in range(order, -1, -1):
        cv = np.zeros_like(v)
        for b in reversed(rows[a]):
            cv = cv * v + b
        z = z * u + cv
    return z


@dataclass(frozen=True)
class JetPatch:
    """A patch surface: an orientation plus a polynomial height field."""

    order: int
    coeffs: np.ndarray                   # ((order+1)(order+2)/2,)
    orientation: Orientation = field(default_factory=identity_orientation)
    uv: np.ndarray | None = None         # (M, 2) canonical coords of the fit samples

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float).ravel()
        if len(c) != n_coeffs(self.order):
            raise ValueError(f"order {self.order} needs {n_coeffs(self.order)} "
                             f"coefficients, got {len(c)}")
        object.__setattr__(self, "coeffs", c)
        if self.uv is not None:
            object.__setattr__(self, "uv", np.asarray(self.uv, dtype=float).reshape(-1, 2))

    def with_coeffs(self, coeffs: np.ndarray) -> "JetPatch":
        return JetPatch(self.order, coeffs, self.orientation, self.uv)

    def with_orientation(self, orientation: Orientation) -> "JetPatch":
        return JetPatch(self.order, self.coeffs, orientation, self.uv)

    def to_json(self) -> dict:
        return {"order": self.order, "coeffs": self.coeffs.tolist(),
                "orientation": self.orientation.to_json()}

    @classmethod
    def from_json(cls, obj: dict) -> "JetPatch":
        return cls(int(obj["order"]), np.asarray(obj["coeffs"], dtype=float),
                   Orientation.from_json(obj["orientation"]))

    def dumps(self) -> str:
        return json.dumps(self.to_json())

    @classmethod
    def loads(cls, text: str) -> "JetPatch":
        return cls.from_json(json.loads(text))


def fit(points_uvz: np.ndarray, order: int,
        weights: np.ndarray | None = None) -> tuple[np.ndarray, float, float]:
    """Least-squares jet fit of canonical (u, v, z) samples.

    Returns (coeffs, residual RMS of the heights, condition number of the
    design matrix). Raises JetFitError when the system is under-determined or
    the design matrix is rank-deficient.
    """
    pts = np.atleast_2d(np.asarray(points_uvz, dtype=float))
    C = n_coeffs(order)
    if len(pts) < C:
        raise JetFitError(f"order {order} needs at least {C} points, got {len(pts)}")
    A = basis(pts[:, :2], order)
    z = pts[:, 2]
    if weights is not None:
        w = np.sqrt(np.asarray(weights, dtype=float))
        A = A * w[:, None]
        z = z * w
    coeffs, _, rank, svals = np.linalg.lstsq(A, z, rcond=None)
    cond = float(svals[0] / svals[-1]) if svals[-1] > 0 else np.inf
    if rank < C:
        raise JetFitError(f"rank-deficient design matrix (rank {rank} < {C}, "
                          f"condition estimate {cond:.3e}); uv samples are degenerate")
    resid = pts[:, 2] - basis(pts[:, :2], order) @ coeffs
    rms = float(np.sqrt(np.mean(resid * resid)))
    return coeffs, rms, cond


def fit_patch(points_uvz: np.ndarray, order: int,
              orientation: Orientation | None = None,
              weights: np.ndarray | None = None) -> tuple[JetPatch, float]:
    """fit() wrapped into a JetPatch carrying the sample uv grid."""
    pts = np.atleast_2d(np.asarray(points_uvz, dtype=float))
    coeffs, rms, _ = fit(pts, order, weights)
    return JetPatch(order, coeffs, orientation or identity_orientation(),
                    uv=pts[:, :2]), rms


def eval(jet: JetPatch, u, v):  # noqa: A001 - spec operation name
    """Heights and world points of the jet at (u, v).

    Returns (z, world) where world = s * R @ (u, v, z) + T; both are squeezed
    to scalars / (3,) when the inputs are scalars.
    """
    uv = np.stack([np.atleast_1d(np.asarray(u, dtype=float)),
                   np.atleast_1d(np.asarray(v, dtype=float))], axis=1)
    z = eval_height(jet.coeffs, jet.order, uv)
    o = jet.orientation
    canon = np.concatenate([uv, z[:, None]], axis=1)
    world = o.scale * canon @ o.rotation.T + o.translation
    if np.isscalar(u) or np.asarray(u).ndim == 0:
        return float(z[0]), world[0]
    return z, world


def height_partials(jet: JetPatch, u, v) -> tuple[np.ndarray, np.ndarray]:
    """(dz/du, dz/dv) at the given canonical coordinates."""
    uv = np.stack([np.atleast_1d(np.asarray(u, dtype=float)),
                   np.atleast_1d(np.asarray(v, dtype=float))], axis=1)
    zu = basis_du(uv, jet.order) @ jet.coeffs
    zv = basis_dv(uv, jet.order) @ jet.coeffs
    return zu, zv


def jacobian(jet: JetPatch, u, v) -> np.ndarray:
    """Canonical 3x2 Jacobian of (u, v) -> (u, v, z): columns (1,0,z_u), (0,1,z_v)."""
    zu, zv = height_partials(jet, u, v)
    M = len(zu)
    J = np.zeros((M, 3, 2))
    J[:, 0, 0] = 1.0
    J[:, 1, 1] = 1.0
    J[:, 2, 0] = zu
    J[:, 2, 1] = zv
    if np.isscalar(u) or np.asarray(u).ndim == 0:
        return J[0]
    return J


def world_jacobian(jet: JetPatch, u, v) -> np.ndarray:
    """World-space 3x2 Jacobian s * R @ J of the oriented patch map."""
    J = jacobian(jet, u, v)
    o = jet.orientation
    return o.scale * np.einsum("ab,...bc->...ac", o.rotation, J)


def metric_tensor(jet: JetPatch, u, v) -> np.ndarray:
    """First fundamental form g = J^T J = [[1+z_u^2, z_u z_v], [z_u z_v, 1+z_v^2]]."""
    zu, zv = height_partials(jet, u, v)
    g = np.empty((len(zu), 2, 2))
    g[:, 0, 0] = 1.0 + zu * zu
    g[:, 0, 1] = g[:, 1, 0] = zu * zv
    g[:, 1, 1] = 1.0 + zv * zv
    if np.isscalar(u) or np.asarray(u).ndim == 0:
        return g[0]
    return g


def normal(jet: JetPatch, u, v) -> np.ndarray:
    """Unit world-space normal R @ (-z_u, -z_v, 1) / |...| (scale cancels)."""
    zu, zv = height_partials(jet, u, v)
    n = np.stack([-zu, -zv, np.ones_like(zu)], axis=1)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    n = n @ jet.orientation.rotation.T
    if np.isscalar(u) or np.asarray(u).ndim == 0:
        return n[0]
    return n


def grad_wrt_coeffs(jet: JetPatch, u, v):
    """Closed-form derivatives with respect to the coefficient vector.

    Returns (d_world, d_jacobian, d_metric):
      d_world    (..., 3, C): of the world point (s * R[:, 2] times the basis row)
      d_jacobian (..., 3, 2, C): only the z row is nonzero
      d_metric   (..., 2, 2, C): through z_u, z_v
    """
    uv = np.stack([np.atleast_1d(np.asarray(u, dtype=float)),
                   np.atleast_1d(np.asarray(v, dtype=float))], axis=1)
    B = basis(uv, jet.order)
    Bu = basis_du(uv, jet.order)
    Bv = basis_dv(uv, jet.order)
    zu = Bu @ jet.coeffs
    zv = Bv @ jet.coeffs
    M, C = B.shape
    o = jet.orientation

    d_world = o.scale * np.einsum("a,mc->mac", o.rotation[:, 2], B)

    d_jac = np.zeros((M, 3, 2, C))
    d_jac[:, 2, 0, :] = Bu
    d_jac[:, 2, 1, :] = Bv

    d_g = np.empty((M, 2, 2, C))
    d_g[:, 0, 0, :] = 2.0 * zu[:, None] * Bu
    d_g[:, 0, 1, :] = zu[:, None] * Bv + zv[:, None] * Bu
    d_g[:, 1, 0, :] = d_g[:, 0, 1, :]
    d_g[:, 1, 1, :] = 2.0 * zv[:, None] * Bv

    if np.isscalar(u) or np.asarray(u).ndim == 0:
        return d_world[0], d_jac[0], d_g[0]
    return d_world, d_jac, d_g
