from collections import deque

import numpy as np
import pytest

from jetpatch import mesh
from jetpatch.partition import (PartitionError, PatchDecomposition, boundary_samples,
                                partition, patch_areas, target_patch_count)


def _assert_connected(decomp, m):
    adj = [[] for _ in range(m.num_vertices)]
    for a, b in m.edges:
        adj[a].append(int(b))
        adj[b].append(int(a))
    for pid, members in enumerate(decomp.patches):
        members_set = set(int(v) for v in members)
        seen = {int(members[0])}
        queue = deque([int(members[0])])
        while queue:
            u = queue.popleft()
            for w in adj[u]:
                if w in members_set and w not in seen:
                    seen.add(w)
                    queue.append(w)
        assert len(seen) == len(members_set), f"patch {pid} is disconnected"


@pytest.mark.parametrize("area,expected", [(0.4, 100), (3.2, 400), (1.6, 200)])
def test_target_patch_count_formula(area, expected):
    side = np.sqrt(area)
    m = mesh.grid_mesh(11, 11, size_x=side, size_y=side)
    assert abs(m.total_area() - area) < 1e-9
    assert target_patch_count(m) == expected


def test_single_patch():
    m = mesh.grid_mesh(6, 6)
    d = partition(m, 1, seed=0)
    assert d.num_patches == 1
    assert len(d.patches[0]) == m.num_vertices
    d = boundary_samples(d, m)
    assert d.m_b() == 0 and len(d.adjacency) == 0


def test_grid_16_patches_band_and_connectivity():
    m = mesh.grid_mesh(64, 64)
    d = partition(m, 16, seed=0)
    sizes = [len(p) for p in d.patches]
    assert min(sizes) >= 225 and max(sizes) <= 287  # 256 +- 12%
    _assert_connected(d, m)


def test_partition_covers_vertices_exactly_once():
    m = mesh.icosphere(2)
    d = partition(m, 8, seed=1)
    all_verts = np.concatenate(d.patches)
    assert len(all_verts) == m.num_vertices
    assert len(np.unique(all_verts)) == m.num_vertices
    for pid, members in enumerate(d.patches):
        assert np.all(d.patch_of_vertex[members] == pid)


def test_partition_determinism():
    m = mesh.grid_mesh(20, 20)
    a = partition(m, 7, seed=42)
    b = partition(m, 7, seed=42)
    assert np.array_equal(a.patch_of_vertex, b.patch_of_vertex)


def test_partition_k_too_large():
    m = mesh.unit_quad()
    with pytest.raises(PartitionError):
        partition(m, 5, seed=0)
    with pytest.raises(PartitionError):
        partition(m, 0, seed=0)


def test_partition_disconnected_mesh_error():
    a = mesh.unit_quad()
    verts = np.concatenate([a.vertices, a.vertices + [10, 0, 0],
                            a.vertices + [20, 0, 0]])
    faces = np.concatenate([a.faces, a.faces + 4, a.faces + 8])
    m3 = mesh.TriMesh(verts, faces)
    with pytest.raises(PartitionError, match="components"):
        partition(m3, 2, seed=0)
    d = partition(m3, 3, seed=0)  # one patch per component works
    assert d.num_patches == 3


def test_area_imbalance_bounded():
    m = mesh.icosphere(3)
    d = partition(m, 10, seed=2)
    areas = patch_areas(d, m)
    assert areas.max() / areas.min() <= 3.0


def test_boundary_samples_strip():
    # 2 x 8 strip split into halves: every cut-edge endpoint is matched
    m = mesh.grid_mesh(8, 2, size_x=7.0, size_y=1.0)
    labels = (m.vertices[:, 0] > 3.4).astype(np.int64)
    patches = [np.where(labels == i)[0] for i in range(2)]
    d = PatchDecomposition(labels, patches, frozenset({(0, 1), (1, 0)}))
    d = boundary_samples(d, m)
    cut_left = {int(v) for a, b in m.edges
                for v in (a,) if labels[a] != labels[b] and labels[a] == 0}
    cut_right = {int(v) for a, b in m.edges
                 for v in (b,) if labels[a] != labels[b] and labels[b] == 1}
    matched_left = {int(vi) for vi, _ in d.boundary_pairs[(0, 1)]}
    matched_right = {int(vj) for vj, _ in d.boundary_pairs[(1, 0)]}
    assert matched_left == cut_left
    assert matched_right == cut_right


def test_boundary_quadrants_pair_count():
    # 2k x 2k grid in four explicit quadrants; M_b from an independent count
    n = 12
    m = mesh.grid_mesh(n, n)
    i = m.vertices[:, 0] > 0.4999
    j = m.vertices[:, 1] > 0.4999
    labels = (i.astype(np.int64) * 2 + j.astype(np.int64))
    patches = [np.where(labels == p)[0] for p in range(4)]
    adjacency = set()
    for a, b in m.edges:
        la, lb = int(labels[a]), int(labels[b])
        if la != lb:
            adjacency.add((la, lb))
            adjacency.add((lb, la))
    d = PatchDecomposition(labels, patches, frozenset(adjacency))
    d = boundary_samples(d, m)
    # oracle: per ordered adjacent pair, count distinct vertices with a
    # cross-boundary edge into the partner patch
    expected = 0
    for (pa, pb) in adjacency:
        verts = set()
        for a, b in m.edges:
            if labels[a] == pa and labels[b] == pb:
                verts.add(int(a))
            if labels[b] == pa and labels[a] == pb:
                verts.add(int(b))
        expected += len(verts)
    assert d.m_b() == expected


def test_boundary_match_is_nearest():
    m = mesh.grid_mesh(8, 8)
    d = boundary_samples(partition(m, 4, seed=0), m)
    for (i, j), pairs in d.boundary_pairs.items():
        # boundary vertices of patch j facing patch i are the first entries
        # of the (j, i) pair list
        cand = np.unique(np.asarray([v for v, _ in d.boundary_pairs[(j, i)]]))
        for vi, vj in pairs:
            dists = np.linalg.norm(m.vertices[cand] - m.vertices[vi], axis=1)
            best = dists.min()
            got = np.linalg.norm(m.vertices[vj] - m.vertices[vi])
            assert got <= best + 1e-12


def test_json_roundtrip():
    m = mesh.grid_mesh(10, 10)
    d = boundary_samples(partition(m, 4, seed=3), m)
    d2 = PatchDecomposition.loads(d.dumps())
    assert np.array_equal(d2.patch_of_vertex, d.patch_of_vertex)
    assert d2.adjacency == d.adjacency
    for p1, p2 in zip(d.patches, d2.patches):
        assert np.array_equal(np.sort(p1), np.sort(p2))
