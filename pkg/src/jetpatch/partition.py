"""Mesh partitioning into approximately uniform-area, edge-connected patches.

Discrete Lloyd clustering with area-weighted centroids (the standard
approximated-centroidal-Voronoi formulation), followed by a connectivity
repair pass that merges stray components into their smallest-area neighbor.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .mesh import TriMesh

MAX_LLOYD_ITERS = 100
MAX_EXCHANGE_PASSES = 60
# Weight of the explicit area-balance term in the discrete exchange energy,
# relative to the centroidal term; pushes clusters toward equal vertex area.
BALANCE_WEIGHT = 8.0

# Patch-count rule: one patch per 0.008 m^2 of surface, clamped to [100, 400].
PATCH_AREA = 0.008
PATCH_COUNT_MIN = 100
PATCH_COUNT_MAX = 400


class PartitionError(ValueError):
    """Invalid patch count or mesh unsuitable for partitioning."""


@dataclass(frozen=True)
class PatchDecomposition:
    patch_of_vertex: np.ndarray                  # (V,) patch id per vertex
    patches: list                                # list of (n_k,) vertex-index arrays
    adjacency: frozenset                         # ordered (i, j) pairs, symmetric
    boundary_pairs: dict = field(default_factory=dict)
    # boundary_pairs[(i, j)] = (P, 2) array of (vertex in i, matched vertex in j)

    @property
    def num_patches(self) -> int:
        return len(self.patches)

    def m_b(self) -> int:
        """Total matched boundary pair count over all ordered adjacent pairs."""
        return sum(len(p) for p in self.boundary_pairs.values())

    def to_json(self) -> dict:
        return {
            "patch_of_vertex": self.patch_of_vertex.tolist(),
            "adjacency": sorted(list(p) for p in self.adjacency),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PatchDecomposition":
        labels = np.asarray(obj["patch_of_vertex"], dtype=np.int64)
        k = int(labels.max()) + 1 if labels.size else 0
        patches = [np.where(labels == i)[0] for i in range(k)]
        adjacency = frozenset((int(a), int(b)) for a, b in obj["adjacency"])
        return cls(labels, patches, adjacency)

    def dumps(self) -> str:
        return json.dumps(self.to_json())

    @classmethod
    def loads(cls, text: str) -> "PatchDecomposition":
        return cls.from_json(json.loads(text))


def target_patch_count(mesh: TriMesh) -> int:
    """max(100, min(400, floor(area / 0.008 m^2))).

    The quotient is nudged by 1e-9 before flooring so areas that are exact
    multiples of the patch area do not lose a patch to float rounding.
    """
    quot = np.floor(mesh.total_area() / PATCH_AREA + 1e-9)
    return int(max(PATCH_COUNT_MIN, min(PATCH_COUNT_MAX, quot)))


def _vertex_areas(mesh: TriMesh) -> np.ndarray:
    areas = mesh.face_areas()
    va = np.zeros(mesh.num_vertices)
    for c in range(3):
        np.add.at(va, mesh.faces[:, c], areas / 3.0)
    return va


def _vertex_adjacency(mesh: TriMesh) -> list[np.ndarray]:
    adj: list[list[int]] = [[] for _ in range(mesh.num_vertices)]
    for a, b in mesh.edges:
        adj[a].append(int(b))
        adj[b].append(int(a))
    return [np.asarray(sorted(n), dtype=np.int64) for n in adj]


def _mesh_components(adj: list[np.ndarray], n: int) -> int:
    seen = np.zeros(n, dtype=bool)
    count = 0
    for start in range(n):
        if seen[start]:
            continue
        count += 1
        queue = deque([start])
        seen[start] = True
        while queue:
            u = queue.popleft()
            for w in adj[u]:
                if not seen[w]:
                    seen[w] = True
                    queue.append(w)
    return count


def _farthest_point_seeds(verts: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    seeds = [int(rng.integers(len(verts)))]
    d = np.linalg.norm(verts - verts[seeds[0]], axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(d))
        seeds.append(nxt)
        d = np.minimum(d, np.linalg.norm(verts - verts[nxt], axis=1))
    return np.asarray(seeds, dtype=np.int64)


def partition(mesh: TriMesh, k: int, seed: int) -> PatchDecomposition:
    """Cluster vertices into k connected, approximately equal-area patches.

    Deterministic for fixed (mesh, k, seed). Boundary pair matching is a
    separate step; see boundary_samples.
    """
    V = mesh.num_vertices
    if k < 1:
        raise PartitionError("patch count must be >= 1")
    if k > V:
        raise PartitionError(f"patch count {k} exceeds vertex count {V}")
    adj = _vertex_adjacency(mesh)
    n_comp = _mesh_components(adj, V)
    if n_comp > k:
        raise PartitionError(f"mesh splits into {n_comp} connected components, "
                             f"more than the requested {k} patches")

    verts = mesh.vertices
    vareas = _vertex_areas(mesh)
    rng = np.random.default_rng(seed)

    if k == 1:
        labels = np.zeros(V, dtype=np.int64)
    else:
        centroids = verts[_farthest_point_seeds(verts, k, rng)].copy()
        labels = np.full(V, -1, dtype=np.int64)
        for _ in range(MAX_LLOYD_ITERS):
            d2 = ((verts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
            new_labels = np.argmin(d2, axis=1)
            # revive empty clusters at the worst-assigned vertex
            for c in range(k):
                if not np.any(new_labels == c):
                    worst = int(np.argmax(d2[np.arange(V), new_labels]))
                    new_labels[worst] = c
            if np.array_equal(new_labels, labels):
                break
            labels = new_labels
            for c in range(k):
                m = labels == c
                w = vareas[m]
                centroids[c] = (verts[m] * w[:, None]).sum(axis=0) / w.sum()

    if k > 1:
        labels = _boundary_exchange(labels, verts, vareas, adj, k)
    labels = _enforce_connectivity(labels, adj, vareas, k)
    patches = [np.where(labels == i)[0] for i in range(k)]
    adjacency = _patch_adjacency(labels, mesh)
    return PatchDecomposition(labels, patches, adjacency)


def _boundary_exchange(labels: np.ndarray, verts: np.ndarray, vareas: np.ndarray,
                       adj, k: int) -> np.ndarray:
    """Greedy boundary-vertex exchanges minimizing the discrete clustering energy.

    The energy is the centroidal term sum_k -|gamma_k|^2 / rho_k (the variable
    part of the area-weighted within-cluster variance) plus an area-balance
    term lambda * sum_k (rho_k - rho_mean)^2. Passes repeat to a fixpoint.
    """
    labels = labels.copy()
    gamma = np.zeros((k, 3))
    rho = np.zeros(k)
    count = np.zeros(k, dtype=np.int64)
    for c in range(k):
        m = labels == c
        gamma[c] = (verts[m] * vareas[m, None]).sum(axis=0)
        rho[c] = vareas[m].sum()
        count[c] = int(m.sum())
    rho_mean = rho.mean()
    lam = BALANCE_WEIGHT / np.pi  # (r_bar^2 / rho_bar) with r_bar^2 ~ rho_bar / pi

    for _ in range(MAX_EXCHANGE_PASSES):
        moved = 0
        for v in range(len(labels)):
            a = int(labels[v])
            if count[a] <= 1:
                continue
            nearby = sorted({int(labels[w]) for w in adj[v]} - {a})
            if not nearby:
                continue
            w = vareas[v]
            x = verts[v]
            e_a0 = -gamma[a] @ gamma[a] / rho[a] + lam * (rho[a] - rho_mean) ** 2
            g_a = gamma[a] - w * x
            r_a = rho[a] - w
            e_a1 = -g_a @ g_a / r_a + lam * (r_a - rho_mean) ** 2
            best_gain, best_b = -1e-14, -1
            for b in nearby:
                e_b0 = -gamma[b] @ gamma[b] / rho[b] + lam * (rho[b] - rho_mean) ** 2
                g_b = gamma[b] + w * x
                r_b = rho[b] + w
                e_b1 = -g_b @ g_b / r_b + lam * (r_b - rho_mean) ** 2
                gain = (e_a1 + e_b1) - (e_a0 + e_b0)
                if gain < best_gain:
                    best_gain, best_b = gain, b
            if best_b >= 0:
                labels[v] = best_b
                gamma[a] -= w * x
                rho[a] -= w
                count[a] -= 1
                gamma[best_b] += w * x
                rho[best_b] += w
                count[best_b] += 1
                moved += 1
        if moved == 0:
            break
    return labels


def _components_of_cluster(members: np.ndarray, adj, labels, cluster: int):
    member_set = set(int(m) for m in members)
    seen: set[int] = set()
    comps: list[list[int]] = []
    for start in members:
        start = int(start)
        if start in seen:
            continue
        comp = [start]
        seen.add(start)
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for w in adj[u]:
                w = int(w)
                if w in member_set and w not in seen:
                    seen.add(w)
                    comp.append(w)
                    queue.append(w)
        comps.append(sorted(comp))
    return comps


def _enforce_connectivity(labels: np.ndarray, adj, vareas: np.ndarray, k: int) -> np.ndarray:
    """Split disconnected clusters; merge extras into the smallest-area neighbor."""
    labels = labels.copy()
    cluster_area = np.zeros(k)
    for c in range(k):
        cluster_area[c] = vareas[labels == c].sum()

    changed = True
    while changed:
        changed = False
        for c in range(k):
            members = np.where(labels == c)[0]
            if len(members) == 0:
                raise PartitionError(f"patch {c} became empty during repair")
            comps = _components_of_cluster(members, adj, labels, c)
            if len(comps) == 1:
                continue
            comps.sort(key=lambda comp: (-vareas[comp].sum(), comp[0]))
            for orphan in comps[1:]:
                neighbors = sorted({int(labels[w]) for u in orphan for w in adj[u]
                                    if labels[w] != c})
                if not neighbors:
                    continue  # isolated island keeps its label
                target = min(neighbors, key=lambda nc: (cluster_area[nc], nc))
                orphan_arr = np.asarray(orphan, dtype=np.int64)
                labels[orphan_arr] = target
                moved = vareas[orphan_arr].sum()
                cluster_area[target] += moved
                cluster_area[c] -= moved
                changed = True
    return labels


def _patch_adjacency(labels: np.ndarray, mesh: TriMesh) -> frozenset:
    pairs = set()
    for a, b in mesh.edges:
        la, lb = int(labels[a]), int(labels[b])
        if la != lb:
            pairs.add((la, lb))
            pairs.add((lb, la))
    return frozenset(pairs)


def boundary_samples(decomp: PatchDecomposition, mesh: TriMesh) -> PatchDecomposition:
    """Match boundary vertices across every adjacent patch pair.

    For each ordered adjacent pair (i, j), every vertex of patch i that
    touches patch j through a mesh edge is matched to its nearest boundary
    vertex of patch j (ties go to the lower vertex index). Returns a new
    decomposition with boundary_pairs populated.
    """
    labels = decomp.patch_of_vertex
    boundary_of: dict[tuple[int, int], set[int]] = {}
    for a, b in mesh.edges:
        la, lb = int(labels[a]), int(labels[b])
        if la == lb:
            continue
        boundary_of.setdefault((la, lb), set()).add(int(a))
        boundary_of.setdefault((lb, la), set()).add(int(b))

    pairs: dict[tuple[int, int], np.ndarray] = {}
    for (i, j), verts_i in sorted(boundary_of.items()):
        verts_i = sorted(verts_i)
        verts_j = sorted(boundary_of[(j, i)])
        pj = mesh.vertices[verts_j]
        matched = []
        for vi in verts_i:
            d = np.linalg.norm(pj - mesh.vertices[vi], axis=1)
            best = int(np.argmin(d))  # argmin takes the first (lowest index) on ties
            matched.append((vi, verts_j[best]))
        pairs[(i, j)] = np.asarray(matched, dtype=np.int64)

    return PatchDecomposition(decomp.patch_of_vertex, decomp.patches,
                              decomp.adjacency, pairs)


def patch_areas(decomp: PatchDecomposition, mesh: TriMesh) -> np.ndarray:
    """Vertex-area mass of each patch (thirds of incident face areas)."""
    va = _vertex_areas(mesh)
    return np.array([va[p].sum() for p in decomp.patches])
