import numpy as np
import pytest

from jetpatch import jets, losses, mesh
from jetpatch.frames import Orientation
from jetpatch.losses import (LossError, LossWeights, SdfBody, bind_weights,
                             k_ext_schedule, loss_boundary, loss_collision,
                             loss_gravity, loss_inertia, loss_inext_metric,
                             loss_mesh_inext, loss_pins, loss_temporal,
                             mean_penetration, sphere_body)
from jetpatch.mesh import TriMesh, unit_quad
from jetpatch.partition import PatchDecomposition
from jetpatch.rotations import random_rotation

from conftest import central_diff, rel_err


# ---------------------------------------------------------------------------
# mesh inextensibility

def test_mesh_inext_zero_at_template():
    q = unit_quad()
    value, grad = loss_mesh_inext(q, q, k_mi=1.0)
    assert value == 0.0
    assert np.abs(grad).max() == 0.0


def test_mesh_inext_uniform_scale_hand_value():
    # four unit edges contribute (2-1)^2 each; the sqrt(2) diagonal contributes
    # (2 sqrt(2) - sqrt(2))^2 = 2; total 4 + 2 = 6
    q = unit_quad()
    value, _ = loss_mesh_inext(q.vertices * 2.0, q, k_mi=1.0)
    assert abs(value - 6.0) < 1e-12


def test_mesh_inext_gradient_fd(rng):
    q = mesh.grid_mesh(4, 4)
    verts = q.vertices + 0.05 * rng.standard_normal(q.vertices.shape)
    _, grad = loss_mesh_inext(verts, q, k_mi=0.7)

    def f(x):
        return loss_mesh_inext(x.reshape(-1, 3), q, k_mi=0.7)[0]

    fd = central_diff(f, verts.ravel()).reshape(-1, 3)
    assert rel_err(grad, fd) < 1e-6


def test_mesh_inext_topology_mismatch():
    q = unit_quad()
    other = TriMesh(q.vertices, np.array([[0, 2, 1], [0, 3, 2]]))
    with pytest.raises(LossError, match="topology"):
        loss_mesh_inext(other, q, k_mi=1.0)
    with pytest.raises(LossError, match="count"):
        loss_mesh_inext(np.zeros((7, 3)), q, k_mi=1.0)


def test_mesh_inext_rigid_invariance(rng):
    q = mesh.grid_mesh(5, 5)
    deformed = q.vertices + 0.03 * rng.standard_normal(q.vertices.shape)
    v0, _ = loss_mesh_inext(deformed, q, k_mi=2.0)
    R = random_rotation(rng)
    t = rng.uniform(-3, 3, 3)
    v1, _ = loss_mesh_inext(deformed @ R.T + t, q.with_vertices(q.vertices @ R.T + t),
                            k_mi=2.0)
    assert abs(v0 - v1) < 1e-9


# ---------------------------------------------------------------------------
# temporal consistency

def test_temporal_zero_for_identical_states():
    s = {"dalpha": np.ones(5), "duv": np.ones((3, 2))}
    value, grads = loss_temporal([s, dict(s), dict(s)], k_tc=0.05)
    assert value == 0.0


def test_temporal_unit_delta_formula():
    a = {"dalpha": np.zeros(4), "duv": np.zeros((2, 2))}
    b = {"dalpha": np.array([1.0, 0, 0, 0]), "duv": np.zeros((2, 2))}
    value, _ = loss_temporal([a, b], k_tc=0.05)
    assert abs(value - 0.05) < 1e-15  # W=2: k_tc/(W-1) * |delta alpha|^2


def test_temporal_gradient_fd(rng):
    states = [{"dalpha": rng.standard_normal(4), "duv": rng.standard_normal((3, 2))}
              for _ in range(3)]
    _, grads = loss_temporal(states, k_tc=0.3)
    for t in range(3):
        for key in ("dalpha", "duv"):
            def f(x, t=t, key=key):
                st = [{k: v.copy() for k, v in s.items()} for s in states]
                st[t][key] = x.reshape(st[t][key].shape)
                return loss_temporal(st, k_tc=0.3)[0]

            fd = central_diff(f, states[t][key].ravel())
            assert rel_err(np.asarray(grads[t][key]).ravel(), fd) < 1e-6


def test_temporal_window_too_short():
    with pytest.raises(LossError):
        loss_temporal([{"dalpha": np.zeros(2)}], k_tc=0.1)


# ---------------------------------------------------------------------------
# collision

def test_collision_inactive_outside_margin():
    body = sphere_body((0, 0, 0), 1.0)
    eps = 0.01
    pts = np.array([[0, 0, 1.02], [2, 0, 0]])
    value, grad = loss_collision(pts, body, eps, k_c=1.0)
    assert value == 0.0
    assert np.abs(grad).max() == 0.0


def test_collision_on_surface_value():
    body = sphere_body((0, 0, 0), 1.0)
    eps = 0.01
    pts = np.array([[0, 0, 1.0]])  # d = 0 -> hinge depth = eps
    value, _ = loss_collision(pts, body, eps, k_c=1.0)
    assert abs(value - eps ** 2) < 1e-15


def test_collision_gradient_fd_active(rng):
    body = SdfBody(np.array([[0, 0, 0.0]]), np.array([[0.4, 0, 0.0]]),
                   np.array([0.3]), np.array([0]))
    eps = 0.05
    # active points away from the hinge kink by eps/10
    pts = np.array([[0.2, 0.0, 0.33], [0.5, 0.2, 0.15], [-0.05, -0.1, 0.25]])
    d, _, _ = body.signed_distance(pts)
    assert np.all(eps - d > eps / 10)
    _, grad = loss_collision(pts, body, eps, k_c=2.0)

    def f(x):
        return loss_collision(x.reshape(-1, 3), body, eps, k_c=2.0)[0]

    fd = central_diff(f, pts.ravel()).reshape(-1, 3)
    assert rel_err(grad, fd) < 1e-5


def test_collision_gradient_exactly_zero_when_clear():
    body = sphere_body((0, 0, 0), 0.5)
    pts = np.array([[0.56, 0, 0], [0, 0.9, 0], [0, 0, -0.551]])
    _, grad = loss_collision(pts, body, eps=0.05, k_c=3.0)
    assert np.abs(grad).max() == 0.0


def test_capsule_sdf_matches_bruteforce(rng):
    p0 = rng.uniform(-1, 1, (3, 3))
    p1 = rng.uniform(-1, 1, (3, 3))
    r = rng.uniform(0.1, 0.5, 3)
    body = SdfBody(p0, p1, r, np.zeros(3, dtype=int))
    pts = rng.uniform(-2, 2, (100, 3))
    d, _, _ = body.signed_distance(pts)
    for i, x in enumerate(pts):
        best = np.inf
        for c in range(3):
            seg = p1[c] - p0[c]
            t = np.clip(np.dot(x - p0[c], seg) / np.dot(seg, seg), 0, 1)
            best = min(best, np.linalg.norm(x - (p0[c] + t * seg)) - r[c])
        assert abs(d[i] - best) < 1e-12


def test_mean_penetration_and_schedule():
    body = sphere_body((0, 0, 0), 1.0)
    pts = np.array([[0, 0, 0.95], [0, 0, 1.2]])
    eps = 0.01
    d_c = mean_penetration(pts, body, eps)
    assert abs(d_c - 0.06 / 2) < 1e-12  # depths: 0.06 and 0
    assert k_ext_schedule(0.0, 50) == 1.0
    assert abs(k_ext_schedule(0.02, 50) - (1 + 0.01 * 50)) < 1e-12
    assert abs(k_ext_schedule(0.005, 200) - (1 + 0.005 * 100)) < 1e-12


def test_bind_weights_nearest_joint():
    body = SdfBody(np.array([[0, 0, 0], [2.0, 0, 0]]),
                   np.array([[0.5, 0, 0], [2.5, 0, 0]]),
                   np.array([0.2, 0.2]), np.array([3, 1]))
    pts = np.array([[0.1, 0.5, 0], [2.4, -0.4, 0], [1.25, 0.3, 0]])
    w = bind_weights(pts, body)
    assert w.indices[0, 0] == 3
    assert w.indices[1, 0] == 1
    assert w.indices[2, 0] == 1  # equidistant: tie goes to the lower joint id


# ---------------------------------------------------------------------------
# metric inextensibility

def _flat_and_slope_jets():
    flat = jets.JetPatch(2, np.zeros(6))
    coeffs = np.zeros(6)
    coeffs[1] = 1.0  # z = u
    slope = jets.JetPatch(2, coeffs)
    return flat, slope


def test_inext_metric_zero_at_identity():
    flat, _ = _flat_and_slope_jets()
    uv = np.array([[0.0, 0.0], [0.3, -0.2]])
    value, grads, aux = loss_inext_metric([flat], [flat], [uv], k_i=1.0, epoch=0)
    assert value == 0.0
    assert aux.k_ext == [1.0]


def test_inext_metric_hand_value():
    # g_P = [[2, 0], [0, 1]] vs g_T = I: |2-1| + 0 + 0 + |1-1| = 1
    flat, slope = _flat_and_slope_jets()
    uv = np.array([[0.0, 0.0]])
    value, _, _ = loss_inext_metric([flat], [slope], [uv], k_i=1.0, epoch=0)
    assert abs(value - 1.0) < 1e-12


def test_inext_metric_gradient_fd(rng):
    o = Orientation(1.1, random_rotation(rng), rng.uniform(-1, 1, 3))
    tj = jets.JetPatch(3, rng.uniform(-0.3, 0.3, 10), o)
    dj = jets.JetPatch(3, tj.coeffs + rng.uniform(-0.1, 0.1, 10), o)
    uv = rng.uniform(-0.9, 0.9, (12, 2))
    _, grads, _ = loss_inext_metric([tj], [dj], [uv], k_i=0.8, epoch=0)

    def f(c):
        dj2 = dj.with_coeffs(c)
        return loss_inext_metric([tj], [dj2], [uv], k_i=0.8, epoch=0)[0]

    fd = central_diff(f, dj.coeffs, h=1e-7)
    assert rel_err(grads[0], fd, floor=1e-6) < 1e-5


def test_inext_metric_with_skinning_jacobian(rng):
    flat, _ = _flat_and_slope_jets()
    uv = rng.uniform(-1, 1, (6, 2))
    R = random_rotation(rng)
    jac = np.broadcast_to(R, (6, 3, 3))
    # rotation skinning is isometric: loss stays 0
    value, _, _ = loss_inext_metric([flat], [flat], [uv], k_i=1.0,
                                    skin_jacobians=[jac])
    assert value < 1e-12
    # anisotropic stretch breaks it
    S = np.diag([1.3, 1.0, 1.0])
    value2, _, _ = loss_inext_metric([flat], [flat], [uv], k_i=1.0,
                                     skin_jacobians=[np.broadcast_to(S, (6, 3, 3))])
    assert value2 > 0.1


def test_inext_metric_rigid_invariance(rng):
    o = Orientation(1.0, np.eye(3), np.zeros(3))
    tj = jets.JetPatch(3, rng.uniform(-0.3, 0.3, 10), o)
    dj = jets.JetPatch(3, tj.coeffs + rng.uniform(-0.1, 0.1, 10), o)
    uv = rng.uniform(-0.9, 0.9, (10, 2))
    v0, _, _ = loss_inext_metric([tj], [dj], [uv], k_i=1.0)
    R = random_rotation(rng)
    t = rng.uniform(-2, 2, 3)
    o2 = Orientation(1.0, R, t)
    v1, _, _ = loss_inext_metric([tj.with_orientation(o2)],
                                 [dj.with_orientation(o2)], [uv], k_i=1.0)
    assert abs(v0 - v1) < 1e-9


def test_inext_metric_patch_count_mismatch():
    flat, slope = _flat_and_slope_jets()
    with pytest.raises(LossError, match="mismatch"):
        loss_inext_metric([flat], [flat, slope], [np.zeros((1, 2))], k_i=1.0)


# ---------------------------------------------------------------------------
# boundary

def _two_patch_line_decomp():
    # 4 vertices, two per patch; one matched pair each way
    labels = np.array([0, 0, 1, 1])
    patches = [np.array([0, 1]), np.array([2, 3])]
    adjacency = frozenset({(0, 1), (1, 0)})
    pairs = {(0, 1): np.array([[1, 2]]), (1, 0): np.array([[2, 1]])}
    return PatchDecomposition(labels, patches, adjacency, pairs)


def test_boundary_zero_when_matching():
    # both patches evaluate the shared seam location to the same world point
    flat = jets.JetPatch(2, np.zeros(6))
    d = _two_patch_line_decomp()
    # identity orientations: the shared location has the same uv in both frames
    pair_uv = {(0, 1): np.array([[[0.5, 0.0], [0.5, 0.0]]]),
               (1, 0): np.array([[[-0.5, 0.0], [-0.5, 0.0]]])}
    value, grads, _ = loss_boundary(d, [flat, flat], pair_uv, k_b=1.0, k_bn=1.0)
    assert value < 1e-15


def test_boundary_pair_uv_matches_rest_geometry(rng):
    from jetpatch import solvers
    from jetpatch.losses import boundary_pair_uv
    from jetpatch import mesh as meshmod
    from jetpatch.partition import boundary_samples, partition

    m = meshmod.grid_mesh(10, 10, size_x=0.4, size_y=0.4)
    decomp = boundary_samples(partition(m, 4, seed=0), m)
    jets_list, vertex_uv, _ = solvers.fit_patch_jets(m, decomp, order=2)
    pair_uv = boundary_pair_uv(decomp, jets_list, m.vertices, vertex_uv)
    # a flat grid is exactly representable: both sides evaluate to vi's position
    value, _, _ = loss_boundary(decomp, jets_list, pair_uv, k_b=1.0, k_bn=1.0)
    assert value < 1e-18


def test_boundary_offset_formula():
    # one pair offset by d with identical normals, k_b=1, k_bn=0, M_b=1 -> d^2
    flat = jets.JetPatch(2, np.zeros(6))
    lifted = jets.JetPatch(2, np.concatenate([[0.25], np.zeros(5)]))  # z = 0.25
    labels = np.array([0, 1])
    d = PatchDecomposition(labels, [np.array([0]), np.array([1])],
                           frozenset({(0, 1)}), {(0, 1): np.array([[0, 1]])})
    pair_uv = {(0, 1): np.zeros((1, 2, 2))}
    value, _, _ = loss_boundary(d, [flat, lifted], pair_uv, k_b=1.0, k_bn=0.0)
    assert abs(value - 0.25 ** 2) < 1e-14


def test_boundary_empty_is_zero():
    flat = jets.JetPatch(2, np.zeros(6))
    d = PatchDecomposition(np.zeros(3, dtype=int), [np.arange(3)], frozenset())
    value, grads, aux = loss_boundary(d, [flat], {}, 1.0, 1.0)
    assert value == 0.0
    assert len(grads) == 1 and np.abs(grads[0]).max() == 0.0


def test_boundary_gradient_fd(rng):
    d = _two_patch_line_decomp()
    pair_uv = {(0, 1): np.array([[[0.05, -0.02], [-0.03, 0.04]]]),
               (1, 0): np.array([[[-0.03, 0.04], [0.05, -0.02]]])}
    j0 = jets.JetPatch(2, rng.uniform(-0.3, 0.3, 6),
                       Orientation(1.2, random_rotation(rng), rng.uniform(-1, 1, 3)))
    j1 = jets.JetPatch(2, rng.uniform(-0.3, 0.3, 6),
                       Orientation(0.9, random_rotation(rng), rng.uniform(-1, 1, 3)))
    _, grads, _ = loss_boundary(d, [j0, j1], pair_uv, k_b=2.0, k_bn=1.5)
    for p, jet in enumerate((j0, j1)):
        def f(c, p=p):
            jl = [j0, j1]
            jl[p] = jl[p].with_coeffs(c)
            return loss_boundary(d, jl, pair_uv, k_b=2.0, k_bn=1.5)[0]

        fd = central_diff(f, jet.coeffs, h=1e-7)
        assert rel_err(grads[p], fd, floor=1e-7) < 1e-5


# ---------------------------------------------------------------------------
# gravity / inertia / pins

def test_gravity_sign_and_zero():
    g = np.array([0, 0, -9.81])
    value, grad = loss_gravity(np.array([[0, 0, 1.0]]), 1.0, g)
    assert abs(value - 9.81) < 1e-12
    value0, _ = loss_gravity(np.array([[5, 3, 0.0]]), 1.0, g)
    assert value0 == 0.0
    assert np.allclose(grad, [[0, 0, 9.81]])


def test_gravity_linearity(rng):
    g = np.array([0, 0, -9.81])
    pts = rng.uniform(-1, 1, (20, 3))
    m = 0.25
    v0, _ = loss_gravity(pts, m, g)
    h = 0.37
    v1, _ = loss_gravity(pts - [0, 0, h], m, g)
    assert abs((v1 - v0) - (-20 * m * 9.81 * h)) < 1e-9


def test_inertia_free_flight_zero(rng):
    x_prev = rng.uniform(-1, 1, (7, 3))
    v_prev = rng.uniform(-1, 1, (7, 3))
    dt = 0.02
    x_t = x_prev + dt * v_prev
    value, grad = loss_inertia(x_t, x_prev, v_prev, 0.5, dt)
    assert value < 1e-24
    assert np.abs(grad).max() < 1e-9


def test_inertia_unit_deviation():
    x_prev = np.zeros((1, 3))
    v_prev = np.zeros((1, 3))
    x_t = np.array([[1.0, 0, 0]])
    value, _ = loss_inertia(x_t, x_prev, v_prev, 1.0, 1.0)
    assert abs(value - 0.5) < 1e-15


def test_inertia_gradient_fd(rng):
    x_prev = rng.uniform(-1, 1, (5, 3))
    v_prev = rng.uniform(-1, 1, (5, 3))
    x_t = x_prev + 0.1 * rng.standard_normal((5, 3))
    dt = 1 / 30
    _, grad = loss_inertia(x_t, x_prev, v_prev, 0.3, dt)

    def f(x):
        return loss_inertia(x.reshape(-1, 3), x_prev, v_prev, 0.3, dt)[0]

    fd = central_diff(f, x_t.ravel()).reshape(-1, 3)
    assert rel_err(grad, fd) < 1e-7


def test_inertia_shape_mismatch():
    with pytest.raises(LossError):
        loss_inertia(np.zeros((3, 3)), np.zeros((2, 3)), np.zeros((2, 3)), 1.0, 0.1)


def test_pins_anchor(rng):
    pts = rng.uniform(-1, 1, (6, 3))
    ids = np.array([0, 3])
    targets = pts[ids] + [0.0, 0.0, 0.1]
    value, grad = loss_pins(pts, ids, targets, k_pin=2.0)
    assert abs(value - 2.0 / 2 * 2 * 0.01) < 1e-12
    assert np.abs(grad[[1, 2, 4, 5]]).max() == 0.0


# ---------------------------------------------------------------------------
# weights and aggregation

def test_loss_weights_validation():
    with pytest.raises(LossError):
        LossWeights(dt=0.0)
    with pytest.raises(LossError):
        LossWeights(k_mi=-1.0)
    with pytest.raises(LossError):
        LossWeights(total_mass=0.0)
    w = LossWeights.sft_defaults()
    assert w.k_mi == 0.1 and w.k_tc == 0.05
    d = LossWeights.drape_defaults()
    assert d.k_b == 5e3 and d.k_mi == 2.0 and d.k_i == 0.5 and d.k_c == 1.0


def test_combine_terms_total_is_sum(rng):
    from jetpatch.losses import LossTerm, combine_terms

    terms = [LossTerm("a", 1.25, {"x": np.ones(3)}),
             LossTerm("b", 0.5, {"x": 2 * np.ones(3), "y": np.ones(2)})]
    report = combine_terms(terms)
    assert abs(report.total - sum(report.terms.values())) < 1e-12
    assert np.allclose(report.gradients["x"], 3.0)
    assert np.allclose(report.gradients["y"], 1.0)


def test_loss_values_nonnegative_except_gravity(rng):
    # every term except the signed gravity potential is >= 0 and finite
    q = mesh.grid_mesh(4, 4)
    body = sphere_body((0.3, 0.3, 0.0), 0.4)
    flat, slope = _flat_and_slope_jets()
    for seed in range(20):
        r = np.random.default_rng(seed)
        verts = q.vertices + 0.1 * r.standard_normal(q.vertices.shape)
        v1, _ = loss_mesh_inext(verts, q, k_mi=1.3)
        v2, _ = loss_collision(verts, body, 0.05, k_c=0.7)
        v3, _ = loss_inertia(verts, q.vertices, r.standard_normal((16, 3)), 0.2, 0.1)
        states = [{"dalpha": r.standard_normal(3)} for _ in range(3)]
        v4, _ = loss_temporal(states, k_tc=0.1)
        uv = r.uniform(-1, 1, (8, 2))
        v5, _, _ = loss_inext_metric([flat], [slope], [uv], k_i=0.4)
        for v in (v1, v2, v3, v4, v5):
            assert v >= 0.0 and np.isfinite(v)
        vg, _ = loss_gravity(verts, 0.1, np.array([0, 0, -9.81]))
        assert np.isfinite(vg)  # signed potential


def test_total_loss_zero_scene_and_single_term_reproduction():
    from jetpatch import solvers
    from jetpatch.losses import total_loss
    from jetpatch.mesh import grid_mesh

    cloth = grid_mesh(9, 9, size_x=0.4, size_y=0.4)

    # resting template, no gravity / body / inertia: total is exactly 0
    w0 = LossWeights(k_mi=2.0, k_c=0.0, k_i=0.5, k_b=5e3, k_bn=1.0, k_g=0.0)
    scene0 = solvers.build_drape_scene(cloth, k=4, seed=0, body=None, weights=w0)
    prob0 = solvers._DrapeProblem(scene0, dynamic=False)
    rep0 = total_loss(w0, solvers._DrapeTermScene(prob0, solvers.drape_state_blocks(scene0), 0))
    assert rep0.total < 1e-18
    assert abs(rep0.total - sum(rep0.terms.values())) < 1e-12

    # gravity-only scene reproduces the individual op's value
    wg = LossWeights(k_mi=0.0, k_c=0.0, k_i=0.0, k_b=0.0, k_bn=0.0, k_g=1.0,
                     total_mass=0.3)
    sceneg = solvers.build_drape_scene(cloth, k=4, seed=0, body=None, weights=wg)
    probg = solvers._DrapeProblem(sceneg, dynamic=False)
    repg = total_loss(wg, solvers._DrapeTermScene(probg, solvers.drape_state_blocks(sceneg), 0))
    ref, _ = loss_gravity(cloth.vertices, 0.3 / cloth.num_vertices, wg.gravity, 1.0)
    # the proxy mesh equals the flat template exactly (model-class surface)
    assert abs(repg.terms["gravity"] - ref) < 1e-9
    assert abs(repg.total - ref) < 1e-9
