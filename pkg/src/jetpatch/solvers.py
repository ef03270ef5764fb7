"""Application drivers: template tracking from 3D observations and
learning-free garment draping on an analytic capsule body.

Both drivers express their deformable surface as jet patches and optimize the
compact coefficient state (plus uv shifts / rigid or per-patch orientations)
with Adam under the shared loss set. Tracking uses the sliding-window
schedule; draping settles a single frame (static) or integrates a pose
sequence with inertia (dynamic).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import jets, losses, metrics
from .frames import Orientation, pca_frame, refine_rotation, to_canonical
from .losses import LossReport, LossTerm, LossWeights, SdfBody
from .mesh import TriMesh, vertex_normals
from .optim import (AdamParams, DeformState, OptimizeResult, WindowSchedule,
                    optimize_window, sft_adam_params)
from .partition import PatchDecomposition, boundary_samples, partition
from .rotations import quat_to_mat, quat_to_mat_grad
from .skinning import Pose, Skeleton, SkinWeights, joint_deltas

RIDGE_WEIGHT = 1e-3  # Tikhonov pull on under-determined frames


# ---------------------------------------------------------------------------
# Template fitting

def fit_template(mesh: TriMesh, order: int = jets.DEFAULT_ORDER,
                 refine_budget: int = 81):
    """Canonicalize a whole mesh as one patch and fit its jet.

    Returns (jet, vertex_uv, residual_rms): the orientation comes from PCA
    plus rotation refinement; vertex_uv are the frozen canonical coordinates
    of the mesh vertices.
    """
    normals = vertex_normals(mesh)
    frame = pca_frame(mesh.vertices, normals)
    frame = refine_rotation(mesh.vertices, frame, budget=refine_budget)
    uvz = to_canonical(mesh.vertices, frame)
    jet, rms = jets.fit_patch(uvz, order, orientation=frame)
    return jet, uvz[:, :2], rms


def fit_patch_jets(mesh: TriMesh, decomp: PatchDecomposition,
                   order: int = jets.DEFAULT_ORDER, refine_budget: int = 81):
    """Per-patch canonicalization and jet fit for a decomposed mesh.

    Small patches drop to the largest order their sample count supports.
    Returns (jets_list, vertex_uv, residuals).
    """
    normals = vertex_normals(mesh)
    vertex_uv = np.zeros((mesh.num_vertices, 2))
    jets_list = []
    residuals = []
    for members in decomp.patches:
        pts = mesh.vertices[members]
        frame = pca_frame(pts, normals[members])
        frame = refine_rotation(pts, frame, budget=refine_budget)
        uvz = to_canonical(pts, frame)
        n = order
        while n > 1 and jets.n_coeffs(n) > len(members):
            n -= 1
        jet, rms = jets.fit_patch(uvz, n, orientation=frame)
        jets_list.append(jet)
        residuals.append(rms)
        vertex_uv[members] = uvz[:, :2]
    return jets_list, vertex_uv, np.asarray(residuals)


# ---------------------------------------------------------------------------
# Tracking scenes (single-patch template, per-frame 3D observations)

@dataclass
class Correspondences:
    """Sparse template-vertex -> observed-point matches for one frame."""
    vertex_ids: np.ndarray   # (P,)
    targets: np.ndarray      # (P, 3)

    def __post_init__(self):
        self.vertex_ids = np.asarray(self.vertex_ids, dtype=np.int64).ravel()
        self.targets = np.asarray(self.targets, dtype=float).reshape(-1, 3)
        if len(self.vertex_ids) != len(self.targets):
            raise ValueError("correspondence ids and targets differ in length")


@dataclass
class CloudObservation:
    """Depth-style point cloud for one frame (one-sided data term)."""
    points: np.ndarray       # (P, 3)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)


@dataclass
class SftScene:
    template: TriMesh
    jet: jets.JetPatch
    vertex_uv: np.ndarray
    observations: list                        # per frame
    weights: LossWeights = field(default_factory=LossWeights.sft_defaults)
    mesh_inext_resampled: bool = False        # reference M_T from the jet resample
    ground_truth: list | None = None          # optional per-frame TriMesh

    def __post_init__(self):
        self.vertex_uv = np.asarray(self.vertex_uv, dtype=float).reshape(-1, 2)
        C = jets.n_coeffs(self.jet.order)
        for f, obs in enumerate(self.observations):
            if isinstance(obs, Correspondences) and len(obs.vertex_ids) < C:
                warnings.warn(f"frame {f}: {len(obs.vertex_ids)} correspondences "
                              f"for {C} coefficients; solving regularized")

    @property
    def num_frames(self) -> int:
        return len(self.observations)


def build_sft_scene(template: TriMesh, observations, weights=None,
                    order: int = jets.DEFAULT_ORDER, **kwargs) -> SftScene:
    jet, vertex_uv, _ = fit_template(template, order)
    return SftScene(template, jet, vertex_uv, list(observations),
                    weights or LossWeights.sft_defaults(), **kwargs)


class _SftFrameEval:
    """Caches the state -> world-point chain for one frame evaluation."""

    def __init__(self, scene: SftScene, blocks: dict):
        self.scene = scene
        jet = scene.jet
        self.dalpha = blocks["dalpha/0"]
        self.duv = blocks["duv"]
        self.quat = blocks["rot"]
        self.trans = blocks["trans"]
        self.uv = scene.vertex_uv + self.duv
        self.order = jet.order
        self.B = jets.basis(self.uv, jet.order)
        self.Bu = jets.basis_du(self.uv, jet.order)
        self.Bv = jets.basis_dv(self.uv, jet.order)
        self.coeffs = jet.coeffs + self.dalpha
        z = self.B @ self.coeffs
        self.y = np.column_stack([self.uv, z])
        self.zu = self.Bu @ self.coeffs
        self.zv = self.Bv @ self.coeffs
        self.Rc = quat_to_mat(self.quat)
        self.dRc = quat_to_mat_grad(self.quat)
        o = jet.orientation
        self.sR = o.scale * o.rotation
        w = self.y @ self.Rc.T + self.trans
        self.x = w @ self.sR.T + o.translation   # world points (V, 3)

    def chain(self, d_x: np.ndarray) -> dict:
        """Map dE/d(world points) to gradients on the state blocks."""
        d_w = d_x @ self.sR                      # (V, 3)
        d_y = d_w @ self.Rc                      # (V, 3)
        g_alpha = self.B.T @ d_y[:, 2]
        g_uv = np.empty_like(self.duv)
        g_uv[:, 0] = d_y[:, 0] + d_y[:, 2] * self.zu  # z_u is the full dz/du'
        g_uv[:, 1] = d_y[:, 1] + d_y[:, 2] * self.zv
        g_rot = np.array([np.einsum("va,va->", d_w, self.y @ dR.T)
                          for dR in self.dRc])
        g_trans = d_w.sum(axis=0)
        return {"dalpha/0": g_alpha, "duv": g_uv, "rot": g_rot, "trans": g_trans}


class _SftProblem:
    def __init__(self, scene: SftScene):
        self.scene = scene
        self.num_frames = scene.num_frames
        self._trees: dict = {}
        ref = scene.template
        if scene.mesh_inext_resampled:
            _, resampled = jets.eval(scene.jet, scene.vertex_uv[:, 0],
                                     scene.vertex_uv[:, 1])
            ref = scene.template.with_vertices(resampled)
        self.reference_mesh = ref

    def initial_state(self, f: int, prev: dict | None) -> dict:
        if prev is not None:
            return {k: v.copy() for k, v in prev.items()}
        C = jets.n_coeffs(self.scene.jet.order)
        V = len(self.scene.vertex_uv)
        return DeformState.zeros(1, C, V).to_blocks()

    def _data_term(self, f: int, ev: _SftFrameEval):
        obs = self.scene.observations[f]
        w = self.scene.weights
        d_x = np.zeros_like(ev.x)
        if isinstance(obs, Correspondences):
            ids = obs.vertex_ids
            diff = ev.x[ids] - obs.targets
            value = w.k_data * float(np.mean(np.einsum("pa,pa->p", diff, diff)))
            np.add.at(d_x, ids, (2.0 * w.k_data / len(ids)) * diff)
            under = len(ids) < jets.n_coeffs(self.scene.jet.order)
        else:
            if f not in self._trees:
                self._trees[f] = cKDTree(obs.points)
            dist, nn = self._trees[f].query(ev.x)
            diff = ev.x - obs.points[nn]
            value = w.k_data * float(np.mean(dist ** 2))
            d_x += (2.0 * w.k_data / len(ev.x)) * diff
            under = len(obs.points) < jets.n_coeffs(self.scene.jet.order)
        return value, d_x, under

    def evaluate(self, states: list, frames: list) -> LossReport:
        return losses.total_loss(self.scene.weights,
                                 _SftTermScene(self, states, frames))


class _SftTermScene:
    """A window of tracking frames with their states: feeds losses.total_loss."""

    def __init__(self, problem: "_SftProblem", states: list, frames: list):
        self.problem = problem
        self.states = states
        self.frames = frames

    def loss_terms(self, weights: LossWeights):
        problem = self.problem
        scene = problem.scene
        w = weights
        terms = []
        for blocks, f in zip(self.states, self.frames):
            ev = _SftFrameEval(scene, blocks)
            data_val, d_x, under = problem._data_term(f, ev)
            mesh_val, mesh_grad = losses.loss_mesh_inext(
                ev.x, problem.reference_mesh, w.k_mi)
            terms.append(LossTerm(f"data/f{f}", data_val,
                                  {f"f{f}:{k}": v for k, v in
                                   ev.chain(d_x).items()}))
            terms.append(LossTerm(f"mesh_inext/f{f}", mesh_val,
                                  {f"f{f}:{k}": v for k, v in
                                   ev.chain(mesh_grad).items()}))
            if under:
                ridge = RIDGE_WEIGHT * float(ev.dalpha @ ev.dalpha)
                terms.append(LossTerm(f"ridge/f{f}", ridge,
                                      {f"f{f}:dalpha/0": 2 * RIDGE_WEIGHT * ev.dalpha}))

        if len(self.states) >= 2 and w.k_tc > 0:
            keys = tuple(k for k in self.states[0] if k.startswith("dalpha")) + ("duv",)
            t_val, t_grads = losses.loss_temporal(self.states, w.k_tc, keys=keys)
            g = {}
            for i, f in enumerate(self.frames):
                for k, v in t_grads[i].items():
                    g[f"f{f}:{k}"] = v
            terms.append(LossTerm("temporal", t_val, g))
        return terms


@dataclass
class SftResult:
    meshes: list            # per-frame TriMesh (template topology, deformed)
    states: list            # per-frame DeformState
    trace: list
    windows: list
    per_frame_metrics: list  # dicts with e3d / e_n when ground truth is known

    def summary(self) -> dict:
        out = {}
        if self.per_frame_metrics:
            for key in self.per_frame_metrics[0]:
                out[key] = float(np.mean([m[key] for m in self.per_frame_metrics]))
        out["windows"] = len(self.windows)
        out["iterations"] = int(sum(w.iterations for w in self.windows))
        return out


def reconstruct_sequence(scene: SftScene,
                         schedule: WindowSchedule | None = None) -> SftResult:
    """Track the template across the observation sequence.

    Optimizes (dalpha, duv, rot, trans) per frame under data + edge-preserving
    + temporal losses with the adaptive window schedule, then resamples the
    deformed jet on the template's uv grid into per-frame meshes.
    """
    schedule = schedule or WindowSchedule()
    problem = _SftProblem(scene)
    result = optimize_window(problem, schedule, adam_factory=sft_adam_params)

    meshes = []
    states = []
    per_frame = []
    for f, blocks in enumerate(result.states):
        ev = _SftFrameEval(scene, blocks)
        mesh_f = scene.template.with_vertices(ev.x)
        meshes.append(mesh_f)
        states.append(DeformState.from_blocks(blocks))
        if scene.ground_truth is not None:
            gt = scene.ground_truth[f]
            per_frame.append({"e3d": metrics.e3d(mesh_f, gt),
                              "e_n": metrics.e_n(mesh_f, gt)})
    return SftResult(meshes, states, result.trace, result.windows, per_frame)


# ---------------------------------------------------------------------------
# Draping scenes (multi-patch garment on a capsule body)

@dataclass
class DrapeScene:
    garment: TriMesh
    decomp: PatchDecomposition
    template_jets: list
    vertex_uv: np.ndarray
    body: SdfBody | None = None
    skeleton: Skeleton | None = None
    skin: SkinWeights | None = None
    weights: LossWeights = field(default_factory=LossWeights.drape_defaults)
    poses: list | None = None                 # per-frame Pose for dynamics
    pins: tuple | None = None                 # (vertex ids, world targets)
    initial_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    pair_uv: dict | None = None               # seam locations in both patch frames

    def __post_init__(self):
        self.vertex_uv = np.asarray(self.vertex_uv, dtype=float).reshape(-1, 2)
        if self.skeleton is None:
            self.skeleton = Skeleton([_root_joint()])
        self.initial_velocity = np.asarray(self.initial_velocity, dtype=float).reshape(3)
        if self.pair_uv is None:
            self.pair_uv = losses.boundary_pair_uv(self.decomp, self.template_jets,
                                                   self.garment.vertices,
                                                   self.vertex_uv)

    @property
    def num_patches(self) -> int:
        return len(self.template_jets)

    def mass_per_point(self) -> float:
        return self.weights.total_mass / self.garment.num_vertices


def _root_joint():
    from .skinning import Joint
    return Joint(-1, np.eye(4))


def build_drape_scene(garment: TriMesh, k: int, seed: int = 0,
                      body: SdfBody | None = None,
                      skeleton: Skeleton | None = None,
                      weights: LossWeights | None = None,
                      order: int = jets.DEFAULT_ORDER,
                      poses=None, pins=None, bind_to_body: bool = False,
                      **kwargs) -> DrapeScene:
    decomp = boundary_samples(partition(garment, k, seed), garment)
    jets_list, vertex_uv, _ = fit_patch_jets(garment, decomp, order)
    skin = None
    if bind_to_body and body is not None:
        skin = losses.bind_weights(garment.vertices, body)
    return DrapeScene(garment, decomp, jets_list, vertex_uv, body=body,
                      skeleton=skeleton, skin=skin,
                      weights=weights or LossWeights.drape_defaults(),
                      poses=poses, pins=pins, **kwargs)


def drape_state_blocks(scene: DrapeScene) -> dict:
    blocks = {}
    for k, jet in enumerate(scene.template_jets):
        blocks[f"dalpha/{k}"] = np.zeros(jets.n_coeffs(jet.order))
        blocks[f"quat/{k}"] = np.array([1.0, 0.0, 0.0, 0.0])
        blocks[f"dtrans/{k}"] = np.zeros(3)
    return blocks


def drape_adam_params() -> AdamParams:
    # per-block rates chosen for desk-scale garments (meters); the reference
    # settings cover only the tracking application
    return AdamParams(lr={"dalpha": 1e-2, "quat": 2e-3, "dtrans": 1e-3},
                      renorm_keys=("quat",))


class _DrapeEval:
    """State -> (deformed jets, world points) chain for one pose."""

    def __init__(self, scene: DrapeScene, blocks: dict, pose_ctx: dict):
        self.scene = scene
        self.blocks = blocks
        self.pose_ctx = pose_ctx
        K = scene.num_patches
        V = scene.garment.num_vertices
        self.deformed = []
        self.Rq = []
        self.dRq = []
        self.y = [None] * K
        self.x_unskinned = np.zeros((V, 3))
        self.patch_B = pose_ctx["patch_B"]
        self.patch_Bu = pose_ctx["patch_Bu"]
        self.patch_Bv = pose_ctx["patch_Bv"]
        for k in range(K):
            tj = scene.template_jets[k]
            members = scene.decomp.patches[k]
            coeffs = tj.coeffs + blocks[f"dalpha/{k}"]
            q = blocks[f"quat/{k}"]
            Rq = quat_to_mat(q)
            o = tj.orientation
            R = Rq @ o.rotation
            T = o.translation + blocks[f"dtrans/{k}"]
            dj = jets.JetPatch(tj.order, coeffs, Orientation(o.scale, R, T), uv=tj.uv)
            self.deformed.append(dj)
            self.Rq.append(Rq)
            self.dRq.append(quat_to_mat_grad(q))
            uv = scene.vertex_uv[members]
            z = self.patch_B[k] @ coeffs
            y = np.column_stack([uv, z])
            self.y[k] = y
            self.x_unskinned[members] = o.scale * y @ R.T + T
        Av_rot = pose_ctx["Av_rot"]
        Av_t = pose_ctx["Av_t"]
        if Av_rot is None:
            self.x = self.x_unskinned
        else:
            self.x = np.einsum("vab,vb->va", Av_rot, self.x_unskinned) + Av_t

    def chain_points(self, d_x: np.ndarray) -> dict:
        """dE/d(posed points) -> per-patch state gradients."""
        Av_rot = self.pose_ctx["Av_rot"]
        d_w = d_x if Av_rot is None else np.einsum("vba,vb->va", Av_rot, d_x)
        grads: dict = {}
        scene = self.scene
        for k in range(scene.num_patches):
            tj = scene.template_jets[k]
            members = scene.decomp.patches[k]
            o = tj.orientation
            R = self.Rq[k] @ o.rotation
            dwk = d_w[members]
            d_y = dwk @ (o.scale * R)
            grads[f"dalpha/{k}"] = self.patch_B[k].T @ d_y[:, 2]
            grads[f"dtrans/{k}"] = dwk.sum(axis=0)
            y = self.y[k]
            g_q = np.empty(4)
            for i in range(4):
                dR = self.dRq[k][i] @ o.rotation
                g_q[i] = o.scale * np.einsum("va,va->", dwk, y @ dR.T)
            grads[f"quat/{k}"] = g_q
        return grads

    def chain_metric_aux(self, aux: losses.MetricAux, grads: dict) -> None:
        """Fold dE/dB (B = J_psi s Rq R0) into the quaternion gradients."""
        scene = self.scene
        Av_rot = self.pose_ctx["Av_rot"]
        for k in range(scene.num_patches):
            dB = aux.bmap_grads[k]                    # (M, 3, 3)
            tj = scene.template_jets[k]
            members = scene.decomp.patches[k]
            o = tj.orientation
            Jp = (np.broadcast_to(np.eye(3), (len(members), 3, 3))
                  if Av_rot is None else Av_rot[members])
            g_q = np.empty(4)
            for i in range(4):
                dR = self.dRq[k][i] @ o.rotation      # (3, 3)
                dBdq = o.scale * np.einsum("mab,bc->mac", Jp, dR)
                g_q[i] = float(np.einsum("mab,mab->", dB, dBdq))
            grads[f"quat/{k}"] = grads.get(f"quat/{k}", 0.0) + g_q

    def chain_boundary_aux(self, aux: losses.BoundaryAux, grads: dict) -> None:
        """Seam-point position/normal gradients -> orientation state."""
        scene = self.scene
        for k in range(scene.num_patches):
            uv = aux.uv[k]
            if len(uv) == 0:
                continue
            tj = scene.template_jets[k]
            dj = self.deformed[k]
            o = tj.orientation
            d_xp = aux.d_x[k]
            d_np = aux.d_n[k]
            grads[f"dtrans/{k}"] = grads.get(f"dtrans/{k}", 0.0) + d_xp.sum(axis=0)
            B = jets.basis(uv, dj.order)
            Bu = jets.basis_du(uv, dj.order)
            Bv = jets.basis_dv(uv, dj.order)
            z = B @ dj.coeffs
            y = np.column_stack([uv, z])
            zu = Bu @ dj.coeffs
            zv = Bv @ dj.coeffs
            w = np.column_stack([-zu, -zv, np.ones_like(zu)])
            wn = np.linalg.norm(w, axis=1, keepdims=True)
            m_local = (w / wn) @ o.rotation.T        # pre-quat normal direction
            g_q = np.empty(4)
            for i in range(4):
                dRq = self.dRq[k][i]
                dR = dRq @ o.rotation
                g_q[i] = (o.scale * np.einsum("pa,pa->", d_xp, y @ dR.T)
                          + np.einsum("pa,pa->", d_np, m_local @ dRq.T))
            grads[f"quat/{k}"] = grads.get(f"quat/{k}", 0.0) + g_q


class _DrapeTermScene:
    """One drape pose with its state: feeds losses.total_loss."""

    def __init__(self, problem: "_DrapeProblem", blocks: dict, frame: int):
        self.problem = problem
        self.blocks = blocks
        self.frame = frame

    def loss_terms(self, weights: LossWeights):
        problem = self.problem
        scene = problem.scene
        w = weights
        f = self.frame
        ev = _DrapeEval(scene, self.blocks, problem.pose_ctx(f))
        self.eval = ev
        terms = []
        d_x = np.zeros_like(ev.x)

        if scene.body is not None and w.k_c > 0:
            skel = problem.pose_ctx(f)["skeleton"]
            c_val, c_grad = losses.loss_collision(ev.x, scene.body,
                                                  w.eps_collision, w.k_c, skel)
            terms.append(LossTerm("collision", c_val, {}))
            d_x += c_grad

        if w.k_g > 0:
            g_val, g_grad = losses.loss_gravity(ev.x, scene.mass_per_point(),
                                                w.gravity, w.k_g)
            terms.append(LossTerm("gravity", g_val, {}))
            d_x += g_grad

        if problem.dynamic and problem.x_prev is not None:
            i_val, i_grad = losses.loss_inertia(ev.x, problem.x_prev,
                                                problem.v_prev,
                                                scene.mass_per_point(), w.dt)
            terms.append(LossTerm("inertia", i_val, {}))
            d_x += i_grad

        if w.k_mi > 0:
            m_val, m_grad = losses.loss_mesh_inext(ev.x, scene.garment, w.k_mi)
            terms.append(LossTerm("mesh_inext", m_val, {}))
            d_x += m_grad

        if scene.pins is not None and w.k_b > 0:
            ids, targets = scene.pins
            p_val, p_grad = losses.loss_pins(ev.x, ids, targets, w.k_b)
            terms.append(LossTerm("pins", p_val, {}))
            d_x += p_grad

        grads = ev.chain_points(d_x)

        if w.k_i > 0:
            pen = None
            if scene.body is not None:
                skel = problem.pose_ctx(f)["skeleton"]
                pen = [losses.mean_penetration(ev.x[m], scene.body,
                                               w.eps_collision, skel)
                       for m in scene.decomp.patches]
            skin_jacs = None
            Av_rot = problem.pose_ctx(f)["Av_rot"]
            if Av_rot is not None:
                skin_jacs = [Av_rot[m] for m in scene.decomp.patches]
            uv_list = [scene.vertex_uv[m] for m in scene.decomp.patches]
            epoch = w.epoch if w.epoch else problem.iteration
            i_val, a_grads, m_aux = losses.loss_inext_metric(
                scene.template_jets, ev.deformed, uv_list, w.k_i,
                epoch=epoch, skin_jacobians=skin_jacs, penetration=pen)
            terms.append(LossTerm("inext", i_val, {}))
            for k, g in enumerate(a_grads):
                grads[f"dalpha/{k}"] = grads.get(f"dalpha/{k}", 0.0) + g
            ev.chain_metric_aux(m_aux, grads)

        if w.k_b > 0 or w.k_bn > 0:
            b_val, b_alpha, b_aux = losses.loss_boundary(
                scene.decomp, ev.deformed, scene.pair_uv, w.k_b, w.k_bn)
            terms.append(LossTerm("boundary", b_val, {}))
            for k, g in enumerate(b_alpha):
                grads[f"dalpha/{k}"] = grads.get(f"dalpha/{k}", 0.0) + g
            ev.chain_boundary_aux(b_aux, grads)

        if terms:
            terms[0].gradients = dict(grads)
        else:
            terms = [LossTerm("rest", 0.0, grads)]
        return terms


class _DrapeProblem:
    """Frame-sequence adapter; one window per frame (W = 1)."""

    def __init__(self, scene: DrapeScene, dynamic: bool):
        self.scene = scene
        self.dynamic = dynamic
        self.poses = scene.poses if (dynamic and scene.poses) else [scene.skeleton.pose]
        self.num_frames = len(self.poses)
        self._pose_ctx: dict[int, dict] = {}
        self.iteration = 0
        # inertia anchors: previous-frame positions and velocities
        self.x_prev: np.ndarray | None = None
        self.v_prev: np.ndarray | None = None
        self.frame_points: list = [None] * self.num_frames

    def pose_ctx(self, f: int) -> dict:
        if f not in self._pose_ctx:
            scene = self.scene
            skel = scene.skeleton.with_pose(self.poses[f])
            if scene.skin is not None:
                deltas = joint_deltas(skel)
                A = deltas[scene.skin.indices]
                wts = scene.skin.weights[..., None, None]
                blend = (wts * A).sum(axis=1)
                Av_rot, Av_t = blend[:, :3, :3], blend[:, :3, 3]
            else:
                Av_rot, Av_t = None, None
            patch_B, patch_Bu, patch_Bv = [], [], []
            for k, jet in enumerate(scene.template_jets):
                uv = scene.vertex_uv[scene.decomp.patches[k]]
                patch_B.append(jets.basis(uv, jet.order))
                patch_Bu.append(jets.basis_du(uv, jet.order))
                patch_Bv.append(jets.basis_dv(uv, jet.order))
            self._pose_ctx[f] = {"skeleton": skel, "Av_rot": Av_rot, "Av_t": Av_t,
                                 "patch_B": patch_B, "patch_Bu": patch_Bu,
                                 "patch_Bv": patch_Bv}
        return self._pose_ctx[f]

    def initial_state(self, f: int, prev: dict | None) -> dict:
        if prev is not None:
            return {k: v.copy() for k, v in prev.items()}
        blocks = drape_state_blocks(self.scene)
        if self.dynamic:
            ev = _DrapeEval(self.scene, blocks, self.pose_ctx(0))
            self.x_prev = ev.x.copy()
            self.v_prev = np.tile(self.scene.initial_velocity, (len(ev.x), 1))
        return blocks

    def evaluate(self, states: list, frames: list) -> LossReport:
        f = frames[0]
        self.iteration += 1
        scene_state = _DrapeTermScene(self, states[0], f)
        report = losses.total_loss(self.scene.weights, scene_state)
        report.gradients = {f"f{f}:{k}": v for k, v in report.gradients.items()}
        self.frame_points[f] = scene_state.eval.x
        return report

    def on_frame_final(self, f: int, blocks: dict) -> None:
        if not self.dynamic:
            return
        ev = _DrapeEval(self.scene, blocks, self.pose_ctx(f))
        x = ev.x
        if self.x_prev is None:
            self.v_prev = np.zeros_like(x)
        else:
            self.v_prev = (x - self.x_prev) / self.scene.weights.dt
        self.x_prev = x
        self.frame_points[f] = x


@dataclass
class DrapeResult:
    meshes: list             # per-frame proxy TriMesh (garment topology)
    jets_per_frame: list     # per-frame list of deformed JetPatch
    states: list             # per-frame block dicts
    trace: list
    windows: list
    per_frame_metrics: list  # eps_c / eps_e / eps_a dicts

    def summary(self) -> dict:
        out = {}
        if self.per_frame_metrics:
            last = self.per_frame_metrics[-1]
            out.update({k: float(v) for k, v in last.items()})
        out["iterations"] = int(sum(w.iterations for w in self.windows))
        return out


def _drape_metrics(scene: DrapeScene, x: np.ndarray, skel: Skeleton) -> dict:
    proxy = scene.garment.with_vertices(x)
    out = {}
    if scene.body is not None:
        out["eps_c"] = metrics.collision_pct(x, scene.body, skel)
    eps_e, eps_a = metrics.strain_pcts(scene.garment, proxy)
    out["eps_e"] = eps_e
    out["eps_a"] = eps_a
    return out


def _finalize_drape(scene: DrapeScene, problem: _DrapeProblem,
                    result: OptimizeResult) -> DrapeResult:
    meshes = []
    jets_pf = []
    per_frame = []
    for f, blocks in enumerate(result.states):
        ctx = problem.pose_ctx(f)
        ev = _DrapeEval(scene, blocks, ctx)
        meshes.append(scene.garment.with_vertices(ev.x))
        jets_pf.append(ev.deformed)
        per_frame.append(_drape_metrics(scene, ev.x, ctx["skeleton"]))
    return DrapeResult(meshes, jets_pf, result.states, result.trace,
                       result.windows, per_frame)


def resolve_initial_collisions(scene: DrapeScene, max_iters: int = 200) -> dict:
    """Collision-only pre-optimization so frame 0 starts penetration-free.

    No-op when the rest pose is already clear of the body.
    """
    blocks = drape_state_blocks(scene)
    if scene.body is None:
        return blocks
    only_collision = LossWeights(k_mi=0.0, k_tc=0.0, k_c=scene.weights.k_c,
                                 k_i=0.0, k_b=0.0, k_bn=0.0, k_g=0.0,
                                 eps_collision=scene.weights.eps_collision,
                                 total_mass=scene.weights.total_mass)
    sub = DrapeScene(scene.garment, scene.decomp, scene.template_jets,
                     scene.vertex_uv, body=scene.body, skeleton=scene.skeleton,
                     skin=scene.skin, weights=only_collision,
                     pair_uv=scene.pair_uv)
    problem = _DrapeProblem(sub, dynamic=False)
    ev = _DrapeEval(sub, blocks, problem.pose_ctx(0))
    if metrics.collision_pct(ev.x, scene.body, problem.pose_ctx(0)["skeleton"]) == 0.0:
        return blocks
    schedule = WindowSchedule(window=1, patience=min(50, max_iters),
                              period=max_iters)
    result = optimize_window(problem, schedule, adam_factory=drape_adam_params)
    return result.states[0]


def drape_static(scene: DrapeScene, iterations: int = 2000,
                 patience: int | None = None) -> DrapeResult:
    """Settle the garment under the geometric + gravity losses (one pose)."""
    init = resolve_initial_collisions(scene)
    problem = _DrapeProblem(scene, dynamic=False)
    problem.initial_state = lambda f, prev, _init=init: \
        {k: v.copy() for k, v in _init.items()} if prev is None else \
        {k: v.copy() for k, v in prev.items()}
    schedule = WindowSchedule(window=1,
                              patience=patience or min(300, iterations),
                              period=iterations)
    result = optimize_window(problem, schedule, adam_factory=drape_adam_params)
    return _finalize_drape(scene, problem, result)


def drape_dynamic(scene: DrapeScene, poses: list | None = None,
                  iterations: int = 400, patience: int | None = None) -> DrapeResult:
    """Integrate the garment over a pose sequence with inertia and gravity.

    Each frame minimizes the combined losses with inertia tied to the
    previous frame's settled points; velocities update as (x_t - x_{t-1})/dt.
    """
    if poses is not None:
        scene.poses = list(poses)
    if not scene.poses or len(scene.poses) < 2:
        raise ValueError("dynamic draping needs at least 2 poses")
    init = resolve_initial_collisions(scene)
    problem = _DrapeProblem(scene, dynamic=True)

    def seeded_init(f, prev, _init=init):
        if prev is None:
            blocks = {k: v.copy() for k, v in _init.items()}
            ev = _DrapeEval(scene, blocks, problem.pose_ctx(0))
            problem.x_prev = ev.x.copy()  # inertia anchors at the resolved state
            problem.v_prev = np.tile(scene.initial_velocity, (len(ev.x), 1))
            return blocks
        return {k: v.copy() for k, v in prev.items()}

    problem.initial_state = seeded_init
    schedule = WindowSchedule(window=1,
                              patience=patience or min(150, iterations),
                              period=iterations)
    result = optimize_window(problem, schedule, adam_factory=drape_adam_params)
    return _finalize_drape(scene, problem, result)


# ---------------------------------------------------------------------------
# Synthetic scene generators (tests, CLI demos, acceptance)

def cylinder_bend_sequence(nx: int = 25, ny: int = 15, length: float = 0.3,
                           width: float = 0.2, frames: int = 20,
                           max_angle: float = np.pi / 3):
    """Template strip rolled onto progressively tighter cylinders.

    Frame t bends the strip by angle max_angle * t / (frames - 1) with arc
    length preserved (an exact isometry); frame 0 is the flat template.
    Returns (template, list of ground-truth meshes).
    """
    from .mesh import grid_mesh

    template = grid_mesh(nx, ny, size_x=length, size_y=width)
    gt = []
    xs = template.vertices[:, 0]
    ys = template.vertices[:, 1]
    for t in range(frames):
        angle = max_angle * t / (frames - 1)
        if angle < 1e-9:
            gt.append(template)
            continue
        radius = length / angle
        phi = xs / radius
        verts = np.column_stack([radius * np.sin(phi), ys,
                                 radius * (1.0 - np.cos(phi))])
        gt.append(template.with_vertices(verts))
    return template, gt


def rigid_motion_sequence(template: TriMesh, frames: int, axis=(0, 0, 1.0),
                          total_angle: float = np.deg2rad(4.0),
                          total_translation=(0.004, 0.002, 0.003)):
    """Ground-truth rigid transforms about the template centroid."""
    from .rotations import quat_from_axis_angle

    center = template.vertices.mean(axis=0)
    t_total = np.asarray(total_translation, dtype=float)
    gt = []
    transforms = []
    for f in range(frames):
        a = total_angle * f / max(frames - 1, 1)
        t = t_total * f / max(frames - 1, 1)
        q = quat_from_axis_angle(np.asarray(axis, dtype=float), a)
        R = quat_to_mat(q)
        verts = (template.vertices - center) @ R.T + center + t
        gt.append(template.with_vertices(verts))
        transforms.append((q, t))
    return gt, transforms
