"""Triangle-mesh container, ASCII OBJ I/O, and basic surface quantities.

Meshes are immutable after construction: vertex/face/edge arrays are
write-protected so decompositions and losses can share them across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Faces with area below this (m^2) are rejected at load so the edge set used
# by the edge-preserving losses stays well-defined.
DEGENERATE_FACE_AREA = 1e-12


class MeshError(ValueError):
    """Malformed mesh data or OBJ parse failure."""


@dataclass(frozen=True)
class SurfaceSample:
    """A point sampled on the mesh surface.

    patch_id and uv are filled in once the sample has been assigned to a
    patch and canonicalized; they default to -1 / NaN before that.
    """

    position: np.ndarray          # (3,)
    normal: np.ndarray            # (3,), unit
    patch_id: int = -1
    uv: np.ndarray = field(default_factory=lambda: np.full(2, np.nan))

    def __post_init__(self):
        if abs(float(np.linalg.norm(self.normal)) - 1.0) > 1e-9:
            raise MeshError("surface sample normal must be unit length")


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray  # (V, 3) float64, meters
    faces: np.ndarray     # (F, 3) int64, vertex indices
    edges: np.ndarray = field(init=False)  # (E, 2) unique, lexicographic

    def __post_init__(self):
        verts = np.ascontiguousarray(np.asarray(self.vertices, dtype=float))
        faces = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64))
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise MeshError(f"vertices must be (V, 3), got {verts.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise MeshError(f"faces must be (F, 3), got {faces.shape}")
        if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
            raise MeshError("face indices out of range")

        areas = _face_areas(verts, faces)
        bad = np.where(areas < DEGENERATE_FACE_AREA)[0]
        if bad.size:
            raise MeshError(f"degenerate faces (area < {DEGENERATE_FACE_AREA:g} m^2) "
                            f"at indices {bad.tolist()}")

        edges = _unique_edges(faces)
        # every undirected edge may bound at most two faces
        if len(edges):
            all_e = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]],
                                            faces[:, [2, 0]]]), axis=1)
            _, counts = np.unique(all_e, axis=0, return_counts=True)
            if counts.max(initial=0) > 2:
                raise MeshError("non-manifold edge shared by more than two faces")

        for arr in (verts, faces, edges):
            arr.flags.writeable = False
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)
        object.__setattr__(self, "edges", edges)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def face_areas(self) -> np.ndarray:
        return _face_areas(self.vertices, self.faces)

    def face_normals(self) -> np.ndarray:
        n = _face_cross(self.vertices, self.faces)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def total_area(self) -> float:
        return float(self.face_areas().sum())

    def bbox_diagonal(self) -> float:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(np.linalg.norm(hi - lo))

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        """Same topology, new vertex positions."""
        return TriMesh(np.asarray(vertices, dtype=float), self.faces.copy())


def _face_cross(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a = verts[faces[:, 0]]
    return np.cross(verts[faces[:, 1]] - a, verts[faces[:, 2]] - a)


def _face_areas(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    if len(faces) == 0:
        return np.zeros(0)
    return 0.5 * np.linalg.norm(_face_cross(verts, faces), axis=1)


def _unique_edges(faces: np.ndarray) -> np.ndarray:
    if len(faces) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    e = np.unique(e, axis=0)  # sorts lexicographically on (min, max)
    return e


# ---------------------------------------------------------------------------
# OBJ I/O

def load_obj(path) -> TriMesh:
    """Read an ASCII OBJ (v / vn / f records, triangles only).

    Face records may carry texture/normal indices (v, v/t, v//n, v/t/n);
    only the vertex index is used. Indices are 1-based per the OBJ spec.
    """
    path = Path(path)
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            tag = tokens[0]
            if tag == "v":
                if len(tokens) < 4:
                    raise MeshError(f"{path.name}:{lineno}: vertex needs 3 coordinates")
                try:
                    verts.append([float(t) for t in tokens[1:4]])
                except ValueError as exc:
                    raise MeshError(f"{path.name}:{lineno}: bad vertex coordinate ({exc})")
            elif tag == "f":
                if len(tokens) != 4:
                    raise MeshError(f"{path.name}:{lineno}: only triangular faces are "
                                    f"supported (got {len(tokens) - 1} vertices)")
                idx = []
                for t in tokens[1:]:
                    head = t.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError:
                        raise MeshError(f"{path.name}:{lineno}: bad face index {head!r}")
                    if i == 0:
                        raise MeshError(f"{path.name}:{lineno}: face index 0 "
                                        f"(OBJ indices are 1-based)")
                    if i < 0:
                        raise MeshError(f"{path.name}:{lineno}: negative face indices "
                                        f"are not supported")
                    idx.append(i - 1)
                faces.append(idx)
            elif tag in ("vn", "vt", "g", "o", "s", "usemtl", "mtllib"):
                continue  # tolerated, unused
            else:
                raise MeshError(f"{path.name}:{lineno}: unsupported record {tag!r}")
    if not verts:
        raise MeshError(f"{path.name}: no vertices")
    mesh_faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if mesh_faces.size and mesh_faces.max() >= len(verts):
        bad = int(mesh_faces.max()) + 1
        raise MeshError(f"{path.name}: face references vertex {bad} "
                        f"but only {len(verts)} vertices are defined")
    return TriMesh(np.asarray(verts, dtype=float), mesh_faces)


def save_obj(mesh: TriMesh, path, normals: np.ndarray | None = None) -> None:
    """Write an ASCII OBJ; vertex normals are emitted when provided."""
    path = Path(path)
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        if normals is not None:
            for n in normals:
                fh.write(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}\n")
            for f in mesh.faces:
                a, b, c = f + 1
                fh.write(f"f {a}//{a} {b}//{b} {c}//{c}\n")
        else:
            for f in mesh.faces:
                fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


# ---------------------------------------------------------------------------
# Differential quantities

def edge_lengths(mesh: TriMesh) -> np.ndarray:
    """Length of each unique edge, in the mesh's lexicographic edge order."""
    e = mesh.edges
    return np.linalg.norm(mesh.vertices[e[:, 1]] - mesh.vertices[e[:, 0]], axis=1)


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted average of incident face normals, unit length."""
    cross = _face_cross(mesh.vertices, mesh.faces)  # |cross| = 2 * area
    acc = np.zeros_like(mesh.vertices)
    for c in range(3):
        np.add.at(acc, mesh.faces[:, c], cross)
    norms = np.linalg.norm(acc, axis=1)
    incident = np.zeros(mesh.num_vertices, dtype=np.int64)
    np.add.at(incident, mesh.faces.ravel(), 1)
    isolated = np.where(incident == 0)[0]
    if isolated.size:
        raise MeshError(f"isolated vertices without incident faces: {isolated.tolist()}")
    return acc / norms[:, None]


def sample_surface_arrays(mesh: TriMesh, count: int, seed: int):
    """Area-uniform samples as arrays: (positions, normals, face_ids).

    Deterministic for a fixed seed.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if mesh.num_faces == 0:
        raise MeshError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    fids = rng.choice(mesh.num_faces, size=count, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    tri = mesh.vertices[mesh.faces[fids]]  # (count, 3, 3)
    w0 = 1.0 - r1
    w1 = r1 * (1.0 - r2)
    w2 = r1 * r2
    pos = w0[:, None] * tri[:, 0] + w1[:, None] * tri[:, 1] + w2[:, None] * tri[:, 2]
    normals = mesh.face_normals()[fids]
    return pos, normals, fids


def sample_surface(mesh: TriMesh, count: int, seed: int) -> list[SurfaceSample]:
    """Area-uniform SurfaceSample list; see sample_surface_arrays."""
    pos, normals, _ = sample_surface_arrays(mesh, count, seed)
    return [SurfaceSample(position=p, normal=n) for p, n in zip(pos, normals)]


# ---------------------------------------------------------------------------
# Generators (test meshes and synthetic scenes)

def grid_mesh(nx: int, ny: int, size_x: float = 1.0, size_y: float = 1.0,
              origin=(0.0, 0.0, 0.0), heights: np.ndarray | None = None) -> TriMesh:
    """Regular nx-by-ny vertex grid in the z=const plane, triangulated.

    Vertex (i, j) sits at origin + (i*dx, j*dy, heights[i, j]); vertex index
    is i*ny + j. heights defaults to zero.
    """
    if nx < 2 or ny < 2:
        raise ValueError("grid needs at least 2x2 vertices")
    xs = np.linspace(0.0, size_x, nx)
    ys = np.linspace(0.0, size_y, ny)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    Z = np.zeros_like(X) if heights is None else np.asarray(heights, dtype=float)
    verts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1) + np.asarray(origin)
    faces = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            a = i * ny + j
            b = (i + 1) * ny + j
            c = (i + 1) * ny + j + 1
            d = i * ny + j + 1
            faces.append([a, b, c])
            faces.append([a, c, d])
    return TriMesh(verts, np.asarray(faces, dtype=np.int64))


def unit_quad() -> TriMesh:
    """Unit square in the z=0 plane: 4 vertices, 2 faces, 5 edges."""
    verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    faces = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int64)
    return TriMesh(verts, faces)


def icosphere(subdivisions: int = 1, radius: float = 1.0) -> TriMesh:
    """Icosahedron subdivided `subdivisions` times, projected to the sphere."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=float)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(subdivisions):
        verts, faces = _subdivide_arrays(verts, faces)
        verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    return TriMesh(verts * radius, faces)


def _subdivide_arrays(verts: np.ndarray, faces: np.ndarray):
    midpoint: dict[tuple[int, int], int] = {}
    verts_list = [v for v in verts]

    def mid(a: int, b: int) -> int:
        key = (a, b) if a < b else (b, a)
        if key not in midpoint:
            midpoint[key] = len(verts_list)
            verts_list.append(0.5 * (verts[a] + verts[b]))
        return midpoint[key]

    new_faces = []
    for a, b, c in faces:
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        new_faces.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]])
    return np.asarray(verts_list, dtype=float), np.asarray(new_faces, dtype=np.int64)


def subdivide(mesh: TriMesh, depth: int = 1) -> TriMesh:
    """Midpoint subdivision applied `depth` times (4x faces per level)."""
    verts, faces = mesh.vertices.copy(), mesh.faces.copy()
    for _ in range(depth):
        verts, faces = _subdivide_arrays(verts, faces)
    return TriMesh(verts, faces)
