"""First-order optimizer and the adaptive sliding-window schedule.

States are dicts of named numpy blocks; quaternion blocks are renormalized
after every step. optimize_window drives a W-frame window over a sequence,
advancing one frame whenever the loss stalls (patience) or the iteration
budget for the window runs out (period), warm-starting each new frame from
its predecessor.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

# Relative improvement below this counts as a stall (guards float noise).
IMPROVEMENT_RTOL = 1e-6

BETA1_DEFAULT = 0.9
BETA2_DEFAULT = 0.999
EPS_ADAM = 1e-8


class OptimizerError(RuntimeError):
    """Non-finite gradients or inconsistent optimizer state."""


@dataclass
class DeformState:
    """Per-frame deformation state of a tracked template.

    dalpha: jet-coefficient offsets per patch; duv: per-sample uv shifts;
    rot: unit quaternion of the global rotation; trans: global translation.
    """

    dalpha: list                      # per patch (C,)
    duv: np.ndarray                   # (N, 2)
    rot: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def to_blocks(self) -> dict:
        blocks = {f"dalpha/{i}": np.array(a, dtype=float)
                  for i, a in enumerate(self.dalpha)}
        blocks["duv"] = np.array(self.duv, dtype=float)
        blocks["rot"] = np.array(self.rot, dtype=float)
        blocks["trans"] = np.array(self.trans, dtype=float)
        return blocks

    @classmethod
    def from_blocks(cls, blocks: dict) -> "DeformState":
        n_patches = sum(1 for k in blocks if k.startswith("dalpha/"))
        return cls([blocks[f"dalpha/{i}"].copy() for i in range(n_patches)],
                   blocks["duv"].copy(), blocks["rot"].copy(), blocks["trans"].copy())

    @classmethod
    def zeros(cls, n_patches: int, n_coeffs: int, n_points: int) -> "DeformState":
        return cls([np.zeros(n_coeffs) for _ in range(n_patches)],
                   np.zeros((n_points, 2)))

    def to_json(self) -> dict:
        return {"dalpha": [a.tolist() for a in self.dalpha],
                "duv": self.duv.tolist(), "rot": self.rot.tolist(),
                "trans": self.trans.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "DeformState":
        return cls([np.asarray(a, dtype=float) for a in obj["dalpha"]],
                   np.asarray(obj["duv"], dtype=float),
                   np.asarray(obj["rot"], dtype=float),
                   np.asarray(obj["trans"], dtype=float))


@dataclass
class AdamParams:
    """Per-block learning rates and moment buffers.

    lr maps a block-name suffix to its rate; quaternion blocks listed in
    renorm_keys are projected back to unit norm after each step.
    """

    lr: dict
    default_lr: float = 1e-3
    beta1: float = BETA1_DEFAULT
    beta2: float = BETA2_DEFAULT
    eps: float = EPS_ADAM
    renorm_keys: tuple = ()
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def rate(self, key: str) -> float:
        # keys look like "duv", "dalpha/3" or "f2:rot"; rates attach to the
        # block base name
        base = key.split(":")[-1].split("/")[0]
        return self.lr.get(base, self.default_lr)

    def reset_moments(self) -> None:
        self.m.clear()
        self.v.clear()


def sft_adam_params() -> AdamParams:
    """Published tracking rates: 1e-3 for uv shifts, 1e-2 for coefficients,
    1e-4 for the global rotation and translation."""
    return AdamParams(lr={"duv": 1e-3, "dalpha": 1e-2, "rot": 1e-4, "trans": 1e-4},
                      renorm_keys=("rot",))


def adam_step(blocks: dict, grads: dict, params: AdamParams, t: int) -> dict:
    """One Adam update with bias correction; t counts steps from 1.

    Quaternion blocks are renormalized after the update. Raises
    OptimizerError on non-finite gradients, naming the offending block.
    """
    if t < 1:
        raise OptimizerError("step index t must be >= 1")
    out = {}
    for key in blocks:
        g = np.asarray(grads.get(key, np.zeros_like(blocks[key])), dtype=float)
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient in block {key!r}")
        if key not in params.m:
            params.m[key] = np.zeros_like(blocks[key])
            params.v[key] = np.zeros_like(blocks[key])
        params.m[key] = params.beta1 * params.m[key] + (1 - params.beta1) * g
        params.v[key] = params.beta2 * params.v[key] + (1 - params.beta2) * g * g
        m_hat = params.m[key] / (1 - params.beta1 ** t)
        v_hat = params.v[key] / (1 - params.beta2 ** t)
        new = blocks[key] - params.rate(key) * m_hat / (np.sqrt(v_hat) + params.eps)
        if _is_renorm_key(key, params.renorm_keys):
            new = new / np.linalg.norm(new)
        out[key] = new
    return out


def _is_renorm_key(key: str, renorm_keys) -> bool:
    return key.split(":")[-1].split("/")[0] in renorm_keys


@dataclass
class WindowSchedule:
    window: int = 3
    patience: int = 100
    period: int = 500

    def __post_init__(self):
        if self.window < 1 or self.patience < 1:
            raise OptimizerError("window and patience must be >= 1")
        if self.period < self.patience:
            raise OptimizerError("period must be >= patience")


@dataclass
class WindowTraceRow:
    window_start: int
    iteration: int
    terms: dict
    total: float


@dataclass
class WindowSummary:
    window_start: int
    frames: list
    iterations: int
    stop_reason: str      # "patience" | "period"
    best_total: float


@dataclass
class OptimizeResult:
    states: list          # per-frame final (best) block dicts
    trace: list           # WindowTraceRow records
    windows: list         # WindowSummary records


def optimize_window(problem, schedule: WindowSchedule,
                    adam_factory=None) -> OptimizeResult:
    """Sliding-window optimization over problem frames.

    The problem must expose:
      num_frames          -> int
      initial_state(f, prev) -> block dict for frame f (prev = preceding
                               frame's final blocks, None for frame 0)
      evaluate(states, frames) -> LossReport-like with .total, .terms and
                               .gradients keyed "f{frame}:{block}"
      on_frame_final(f, blocks) -> optional hook when a frame leaves the window

    Each window runs until the best loss stalls for `patience` consecutive
    evaluations or `period` steps have been taken, keeps the best state seen,
    then slides one frame; the entering frame copies the previous frame's
    final parameters. Adam moments start fresh per window.
    """
    F = problem.num_frames
    W = min(schedule.window, F)
    if F < 1:
        raise OptimizerError("problem has no frames")
    make_adam = adam_factory or (lambda: AdamParams(lr={}, default_lr=1e-3))

    frame_states: list[dict | None] = [None] * F
    frame_states[0] = problem.initial_state(0, None)
    for f in range(1, W):
        frame_states[f] = problem.initial_state(f, frame_states[f - 1])

    trace: list[WindowTraceRow] = []
    windows: list[WindowSummary] = []

    n_windows = max(F - W + 1, 1)
    for start in range(n_windows):
        frames = list(range(start, start + W))
        states = [copy.deepcopy(frame_states[f]) for f in frames]
        adam = make_adam()
        best_total = np.inf
        best_states = [copy.deepcopy(s) for s in states]
        stall = 0
        steps = 0
        reason = "period"
        while True:
            report = problem.evaluate(states, frames)
            trace.append(WindowTraceRow(start, steps, dict(report.terms), report.total))
            if report.total < best_total * (1.0 - IMPROVEMENT_RTOL):
                best_total = report.total
                best_states = [copy.deepcopy(s) for s in states]
                stall = 0
            else:
                stall += 1
            if stall >= schedule.patience:
                reason = "patience"
                break
            if steps >= schedule.period:
                reason = "period"
                break
            flat = {f"f{f}:{k}": states[i][k]
                    for i, f in enumerate(frames) for k in states[i]}
            flat_g = {f"f{f}:{k}": report.gradients.get(f"f{f}:{k}", np.zeros_like(v))
                      for (f, i) in zip(frames, range(len(frames)))
                      for k, v in states[i].items()}
            steps += 1
            updated = adam_step(flat, flat_g, adam, steps)
            for i, f in enumerate(frames):
                states[i] = {k: updated[f"f{f}:{k}"] for k in states[i]}

        for i, f in enumerate(frames):
            frame_states[f] = best_states[i]
        windows.append(WindowSummary(start, frames, steps, reason, float(best_total)))

        leaving = start  # frame that exits when the window slides
        if start + W < F:
            if hasattr(problem, "on_frame_final"):
                problem.on_frame_final(leaving, frame_states[leaving])
            frame_states[start + W] = problem.initial_state(start + W,
                                                            frame_states[start + W - 1])
        else:
            if hasattr(problem, "on_frame_final"):
                for f in frames:
                    problem.on_frame_final(f, frame_states[f])

    return OptimizeResult(frame_states, trace, windows)
