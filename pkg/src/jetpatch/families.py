"""Deterministic generators for the four analytic surface families.

Families (all over (u, v) in [-1, 1]^2):
  jet4      random degree-4 height polynomial
  trig      a * cos(theta * sqrt(u^2 + v^2))
  gaussian  a * exp(-((u-u0)^2 + (v-v0)^2) / (2 sigma^2))
  bessel    a * J0(k * sqrt((u-u0)^2 + (v-v0)^2)), k = 5
  sum       one draw of each of the four, added

Parameter ranges: a in [-0.5, 0.5], theta in [pi, 2*pi], sigma in [0.5, 1],
centers (u0, v0) in [-0.5, 0.5]^2, k fixed at 5.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import jets
from .mesh import TriMesh, grid_mesh

FAMILY_KINDS = ("jet4", "trig", "gaussian", "bessel", "sum")

AMPLITUDE_RANGE = (-0.5, 0.5)
THETA_RANGE = (np.pi, 2 * np.pi)
SIGMA_RANGE = (0.5, 1.0)
CENTER_RANGE = (-0.5, 0.5)
BESSEL_K = 5.0


class FamilyError(ValueError):
    """Unknown family kind or out-of-range parameters."""


# ---------------------------------------------------------------------------
# Bessel J0 / J1: power series up to the crossover, Hankel asymptotics beyond.
# Keeps the library free of special-function dependencies; usage here never
# exceeds k * diag([-1,1]^2 from a corner center) ~ 14.2.

_SERIES_CUTOFF = 12.0
_SERIES_TERMS = 40
_HANKEL_TERMS = 16


def _j0_series(x: np.ndarray) -> np.ndarray:
    q = -0.25 * x * x
    term = np.ones_like(x)
    acc = term.copy()
    for m in range(1, _SERIES_TERMS + 1):
        term = term * q / (m * m)
        acc += term
    return acc


def _j1_series(x: np.ndarray) -> np.ndarray:
    q = -0.25 * x * x
    term = 0.5 * x
    acc = term.copy()
    for m in range(1, _SERIES_TERMS + 1):
        term = term * q / (m * (m + 1))
        acc += term
    return acc


def _hankel_pq(nu: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """P and Q of the large-argument expansion
    J_nu(x) ~ sqrt(2/(pi x)) (cos(w) P - sin(w) Q), w = x - nu pi/2 - pi/4,
    with a_k = prod_{j<=k} (4 nu^2 - (2j-1)^2) / (8^k k!).
    """
    P = np.ones_like(x)
    Q = np.zeros_like(x)
    a = np.ones_like(x)
    inv_x = 1.0 / x
    for k in range(1, _HANKEL_TERMS + 1):
        a = a * (4 * nu * nu - (2 * k - 1) ** 2) / (8.0 * k) * inv_x
        if k % 2 == 1:
            Q += a if (k // 2) % 2 == 0 else -a
        else:
            P += a if (k // 2) % 2 == 0 else -a
    return P, Q


def _j_asymptotic(nu: int, x: np.ndarray) -> np.ndarray:
    P, Q = _hankel_pq(nu, x)
    w = x - nu * np.pi / 2 - np.pi / 4
    return np.sqrt(2.0 / (np.pi * x)) * (np.cos(w) * P - np.sin(w) * Q)


def bessel_j0(x):
    """Bessel function of the first kind, order 0; |error| < 1e-10 on [0, 20]."""
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(arr < 0):
        raise ValueError("bessel_j0 is used on x >= 0 only")
    out = np.empty_like(arr)
    small = arr <= _SERIES_CUTOFF
    if small.any():
        out[small] = _j0_series(arr[small])
    if (~small).any():
        out[~small] = _j_asymptotic(0, arr[~small])
    if np.isscalar(x) or np.asarray(x).ndim == 0:
        return float(out[0])
    return out


def bessel_j1(x):
    """Bessel function of the first kind, order 1 (for analytic gradients)."""
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(arr < 0):
        raise ValueError("bessel_j1 is used on x >= 0 only")
    out = np.empty_like(arr)
    small = arr <= _SERIES_CUTOFF
    if small.any():
        out[small] = _j1_series(arr[small])
    if (~small).any():
        out[~small] = _j_asymptotic(1, arr[~small])
    if np.isscalar(x) or np.asarray(x).ndim == 0:
        return float(out[0])
    return out


# ---------------------------------------------------------------------------
# Family specs and sampling

@dataclass(frozen=True)
class FamilySpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in FAMILY_KINDS:
            raise FamilyError(f"unknown family kind {self.kind!r}; "
                              f"expected one of {FAMILY_KINDS}")
        _validate_params(self.kind, self.params)


def _check_range(params: dict, key: str, lo: float, hi: float):
    if key in params and not (lo <= float(params[key]) <= hi):
        raise FamilyError(f"parameter {key}={params[key]} outside [{lo}, {hi}]")


def _validate_params(kind: str, params: dict):
    if kind == "sum":
        for sub, sub_params in params.items():
            if sub not in FAMILY_KINDS[:4]:
                raise FamilyError(f"unknown sum component {sub!r}")
            _validate_params(sub, sub_params)
        return
    _check_range(params, "amplitude", *AMPLITUDE_RANGE)
    if kind == "trig":
        _check_range(params, "theta", *THETA_RANGE)
    if kind in ("gaussian", "bessel"):
        _check_range(params, "u0", *CENTER_RANGE)
        _check_range(params, "v0", *CENTER_RANGE)
    if kind == "gaussian":
        _check_range(params, "sigma", *SIGMA_RANGE)
    if kind == "jet4" and "coeffs" in params:
        c = np.asarray(params["coeffs"], dtype=float)
        if len(c) != jets.n_coeffs(4):
            raise FamilyError("jet4 family needs 15 coefficients")
        if np.any(np.abs(c) > AMPLITUDE_RANGE[1]):
            raise FamilyError("jet4 coefficients outside the amplitude range")


def draw_params(kind: str, rng: np.random.Generator) -> dict:
    """Parameters drawn uniformly from the family's admissible ranges."""
    if kind == "jet4":
        return {"coeffs": rng.uniform(*AMPLITUDE_RANGE, jets.n_coeffs(4)).tolist()}
    if kind == "trig":
        return {"amplitude": float(rng.uniform(*AMPLITUDE_RANGE)),
                "theta": float(rng.uniform(*THETA_RANGE))}
    if kind == "gaussian":
        return {"amplitude": float(rng.uniform(*AMPLITUDE_RANGE)),
                "u0": float(rng.uniform(*CENTER_RANGE)),
                "v0": float(rng.uniform(*CENTER_RANGE)),
                "sigma": float(rng.uniform(*SIGMA_RANGE))}
    if kind == "bessel":
        return {"amplitude": float(rng.uniform(*AMPLITUDE_RANGE)),
                "u0": float(rng.uniform(*CENTER_RANGE)),
                "v0": float(rng.uniform(*CENTER_RANGE))}
    if kind == "sum":
        return {sub: draw_params(sub, rng) for sub in FAMILY_KINDS[:4]}
    raise FamilyError(f"unknown family kind {kind!r}")


def _resolve_params(spec: FamilySpec) -> dict:
    rng = np.random.default_rng(spec.seed)
    drawn = draw_params(spec.kind, rng)
    if spec.kind == "sum":
        merged = {}
        for sub in FAMILY_KINDS[:4]:
            merged[sub] = {**drawn[sub], **spec.params.get(sub, {})}
        return merged
    return {**drawn, **spec.params}


def _height_and_grad(kind: str, p: dict, u: np.ndarray, v: np.ndarray):
    """z and (dz/du, dz/dv) for one basic family."""
    if kind == "jet4":
        c = np.asarray(p["coeffs"], dtype=float)
        uv = np.stack([u, v], axis=1)
        z = jets.basis(uv, 4) @ c
        return z, jets.basis_du(uv, 4) @ c, jets.basis_dv(uv, 4) @ c
    a = float(p["amplitude"])
    if kind == "trig":
        th = float(p["theta"])
        r = np.sqrt(u * u + v * v)
        z = a * np.cos(th * r)
        # d/du = -a th sin(th r) u / r; sin(th r)/r -> th as r -> 0
        ratio = np.where(r > 1e-300, np.sin(th * r) / np.where(r > 1e-300, r, 1.0), th)
        zu = -a * th * ratio * u
        zv = -a * th * ratio * v
        return z, zu, zv
    du = u - float(p["u0"])
    dv = v - float(p["v0"])
    if kind == "gaussian":
        s2 = float(p["sigma"]) ** 2
        z = a * np.exp(-(du * du + dv * dv) / (2 * s2))
        return z, -z * du / s2, -z * dv / s2
    if kind == "bessel":
        rho = np.sqrt(du * du + dv * dv)
        z = a * bessel_j0(BESSEL_K * rho)
        # d/du = -a k J1(k rho) du / rho; J1(k rho)/rho -> k/2 as rho -> 0
        ratio = np.where(rho > 1e-300,
                         bessel_j1(BESSEL_K * rho) / np.where(rho > 1e-300, rho, 1.0),
                         BESSEL_K / 2)
        zu = -a * BESSEL_K * ratio * du
        zv = -a * BESSEL_K * ratio * dv
        return z, zu, zv
    raise FamilyError(f"unknown family kind {kind!r}")


@dataclass(frozen=True)
class FamilySample:
    uv: np.ndarray       # (M, 2) canonical coordinates
    z: np.ndarray        # (M,) heights
    normals: np.ndarray  # (M, 3) unit normals from the analytic gradient
    params: dict
    resolution: int

    @property
    def uvz(self) -> np.ndarray:
        return np.concatenate([self.uv, self.z[:, None]], axis=1)


def sample_family(spec: FamilySpec, grid: int) -> FamilySample:
    """Sample the family on a grid x grid lattice over [-1, 1]^2.

    Unspecified parameters are drawn from the spec's seed; explicit entries in
    spec.params override the draw. Normals come from the analytic gradient.
    """
    if grid < 2:
        raise FamilyError("grid resolution must be >= 2")
    params = _resolve_params(spec)
    g = np.linspace(-1.0, 1.0, grid)
    U, V = np.meshgrid(g, g, indexing="ij")
    u, v = U.ravel(), V.ravel()
    if spec.kind == "sum":
        z = np.zeros_like(u)
        zu = np.zeros_like(u)
        zv = np.zeros_like(u)
        for sub in FAMILY_KINDS[:4]:
            sz, szu, szv = _height_and_grad(sub, params[sub], u, v)
            z, zu, zv = z + sz, zu + szu, zv + szv
    else:
        z, zu, zv = _height_and_grad(spec.kind, params, u, v)
    normals = np.stack([-zu, -zv, np.ones_like(zu)], axis=1)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return FamilySample(uv=np.stack([u, v], axis=1), z=z, normals=normals,
                        params=params, resolution=grid)


def family_heightfield_mesh(sample: FamilySample) -> TriMesh:
    """Height-field TriMesh over the sample's grid (exportable as OBJ)."""
    r = sample.resolution
    heights = sample.z.reshape(r, r)
    return grid_mesh(r, r, size_x=2.0, size_y=2.0, origin=(-1.0, -1.0, 0.0),
                     heights=heights)
