"""Command-line surface: partition, fit, eval-fit, sft, drape, metrics.

Exit codes: 0 success, 1 usage error, 2 data error. Reports (delimited CSV /
JSON) are written to --out-dir together with matplotlib figures.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import families, jets, metrics, report, solvers
from .config import ConfigError, apply_config, parse_config
from .losses import LossWeights, SdfBody, sphere_body
from .mesh import MeshError, grid_mesh, load_obj, save_obj
from .optim import WindowSchedule
from .partition import PartitionError, boundary_samples, partition, target_patch_count
from .skinning import Skeleton, pose_from_json

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


class DataError(RuntimeError):
    pass


def _write_json(obj: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_trace_csv(trace_rows, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted({name for r in trace_rows for name in r.terms})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window_start", "iteration", "total"] + names)
        for r in trace_rows:
            w.writerow([r.window_start, r.iteration, repr(r.total)]
                       + [repr(r.terms[n]) if n in r.terms else "" for n in names])


def _write_trace_jsonl(trace_rows, path: Path) -> None:
    """One itemized loss report per iteration, as JSON lines."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in trace_rows:
            fh.write(json.dumps({"window": r.window_start, "iteration": r.iteration,
                                 "total": r.total,
                                 "terms": dict(sorted(r.terms.items()))},
                                sort_keys=True))
            fh.write("\n")


def _load_weights(args, base: LossWeights) -> tuple[LossWeights, WindowSchedule]:
    schedule = WindowSchedule()
    if getattr(args, "config", None):
        cfg = parse_config(args.config)
        apply_config(cfg, base, schedule)
    return base, schedule


# ---------------------------------------------------------------------------
# Subcommands

def _cmd_partition(args) -> int:
    mesh = load_obj(args.mesh)
    if args.subdivide:
        from .mesh import subdivide

        mesh = subdivide(mesh, args.subdivide)
    k = args.patches or target_patch_count(mesh)
    decomp = boundary_samples(partition(mesh, k, args.seed), mesh)
    sizes = sorted(len(p) for p in decomp.patches)
    print(f"partitioned {mesh.num_vertices} vertices into {k} patches "
          f"(sizes {sizes[0]}..{sizes[-1]}, M_b={decomp.m_b()})")
    if args.out_dir:
        out = Path(args.out_dir)
        _write_json(decomp.to_json(), out / "partition.json")
        print(f"wrote {out / 'partition.json'}")
    return EXIT_OK


def _family_sample(args):
    spec = families.FamilySpec(kind=args.family, seed=args.seed)
    return families.sample_family(spec, args.grid)


def _cmd_fit(args) -> int:
    sample = None
    if args.mesh:
        from .frames import to_canonical

        mesh = load_obj(args.mesh)
        jet, uv, rms = solvers.fit_template(mesh, args.order)
        uvz = to_canonical(mesh.vertices, jet.orientation)
        heights = uvz[:, 2]
    else:
        sample = _family_sample(args)
        jet, rms = jets.fit_patch(sample.uvz, args.order)
        uv = sample.uv
        heights = sample.z
    _, _, cond = jets.fit(np.column_stack([uv, heights]), args.order)
    resid = jets.basis(uv, jet.order) @ jet.coeffs - heights
    print(f"order {args.order} fit: residual RMS {rms:.6e} "
          f"({jets.n_coeffs(args.order)} coefficients, condition {cond:.3g})")
    if args.out_dir:
        out = Path(args.out_dir)
        _write_json({"patch": jet.to_json(), "residual_rms": rms,
                     "condition": cond}, out / "patch.json")
        report.fit_residual_map(uv, resid, out / "fit_residual.png")
        if sample is not None:
            from .families import family_heightfield_mesh

            save_obj(family_heightfield_mesh(sample), out / "family.obj")
        print(f"wrote {out / 'patch.json'} and fit_residual.png")
    return EXIT_OK


def _parse_orders(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(t) for t in text.split(",")]


def _cmd_eval_fit(args) -> int:
    orders = _parse_orders(args.orders)
    kinds = ("jet4", "trig", "gaussian", "bessel", "sum")
    table: dict[str, list[float]] = {}
    for kind in kinds:
        means = []
        for n in orders:
            draws = []
            for d in range(args.draws):
                spec = families.FamilySpec(kind=kind, seed=args.seed + d)
                sample = families.sample_family(spec, args.grid)
                _, rms = jets.fit_patch(sample.uvz, n)
                draws.append(rms)
            means.append(float(np.mean(draws)))
        table[kind] = means
    header = "family " + " ".join(f"n={n}" for n in orders)
    print(header)
    for kind in kinds:
        print(kind.ljust(7) + " ".join(f"{v:.2e}" for v in table[kind]))
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "eval_fit.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["family"] + [f"n={n}" for n in orders])
            for kind in kinds:
                w.writerow([kind] + [repr(v) for v in table[kind]])
        report.residual_vs_order(orders, table, out / "eval_fit.png")
        print(f"wrote {out / 'eval_fit.csv'} and eval_fit.png")
    return EXIT_OK


def _sft_scene_from_json(path: Path, weights: LossWeights) -> solvers.SftScene:
    spec = json.load(open(path))
    template = load_obj(Path(path).parent / spec["template"])
    frames = []
    for f in spec["frames"]:
        if "correspondences" in f:
            c = f["correspondences"]
            frames.append(solvers.Correspondences(np.asarray(c["vertex_ids"]),
                                                  np.asarray(c["targets"])))
        elif "cloud" in f:
            frames.append(solvers.CloudObservation(np.asarray(f["cloud"])))
        else:
            raise DataError("frame needs 'correspondences' or 'cloud'")
    scene = solvers.build_sft_scene(template, frames, weights,
                                    order=int(spec.get("order", 4)))
    if "ground_truth" in spec:
        scene.ground_truth = [load_obj(Path(path).parent / p)
                              for p in spec["ground_truth"]]
    return scene


def _cmd_sft(args) -> int:
    weights = LossWeights.sft_defaults()
    schedule = WindowSchedule()
    extra = {}
    if args.config:
        extra = apply_config(parse_config(args.config), weights, schedule)
    if args.scene:
        scene = _sft_scene_from_json(Path(args.scene), weights)
    elif args.synthetic == "cylinder-bend":
        template, gt = solvers.cylinder_bend_sequence(frames=args.frames)
        obs = [solvers.Correspondences(np.arange(template.num_vertices), g.vertices)
               for g in gt]
        scene = solvers.build_sft_scene(template, obs, weights)
        scene.ground_truth = gt
    else:
        raise DataError("sft needs a scene file or --synthetic cylinder-bend")
    # edge-length reference for the inextensibility term: raw template by
    # default, jet-resampled template when requested
    scene.mesh_inext_resampled = bool(extra.get("sft.mesh_inext_resampled", False))

    result = solvers.reconstruct_sequence(scene, schedule)
    summary = result.summary()
    print("tracking summary: " + json.dumps(summary, sort_keys=True))
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json({"summary": summary,
                     "per_frame": result.per_frame_metrics},
                    out / "sft_metrics.json")
        _write_json({"frames": [st.to_json() for st in result.states]},
                    out / "sft_states.json")
        for f, m in enumerate(result.meshes):
            save_obj(m, out / f"frame_{f:03d}.obj")
        if args.trace:
            _write_trace_csv(result.trace, out / "sft_trace.csv")
            _write_trace_jsonl(result.trace, out / "sft_trace.jsonl")
            report.loss_trace(result.trace, out / "sft_trace.png",
                              title="tracking loss")
        if result.per_frame_metrics:
            report.per_frame_metric(
                {k: [m[k] for m in result.per_frame_metrics]
                 for k in result.per_frame_metrics[0]},
                out / "sft_errors.png")
        print(f"wrote outputs to {out}")
    return EXIT_OK


def _drape_scene_from_json(path: Path, weights: LossWeights):
    spec = json.load(open(path))
    g = spec["garment"]
    if "obj" in g:
        garment = load_obj(Path(path).parent / g["obj"])
    else:
        gr = g["grid"]
        garment = grid_mesh(int(gr["nx"]), int(gr["ny"]),
                            size_x=float(gr.get("size_x", gr.get("size", 1.0))),
                            size_y=float(gr.get("size_y", gr.get("size", 1.0))),
                            origin=tuple(gr.get("origin", (0, 0, 0))))
    body = SdfBody.from_json(spec["body"]) if "body" in spec else None
    skeleton = Skeleton.from_json(spec["skeleton"]) if "skeleton" in spec else None
    poses = [pose_from_json(p) for p in spec.get("poses", [])] or None
    pins = None
    if "pins" in spec:
        pins = (np.asarray(spec["pins"]["vertex_ids"], dtype=np.int64),
                np.asarray(spec["pins"]["targets"], dtype=float))
    if "weights" in spec:
        for key, val in spec["weights"].items():
            if not hasattr(weights, key):
                raise DataError(f"unknown weight {key!r}")
            setattr(weights, key, np.asarray(val, dtype=float)
                    if key == "gravity" else val)
    scene = solvers.build_drape_scene(
        garment, k=int(spec.get("patches", 9)), seed=int(spec.get("seed", 0)),
        body=body, skeleton=skeleton, weights=weights, poses=poses, pins=pins,
        bind_to_body=bool(spec.get("bind_to_body", False)),
        order=int(spec.get("order", 4)))
    return scene, spec


def _cmd_drape(args) -> int:
    weights, _ = _load_weights(args, LossWeights.drape_defaults())
    mode = args.mode
    spec = {}
    if args.scene:
        scene, spec = _drape_scene_from_json(Path(args.scene), weights)
        mode = spec.get("mode", mode)
    elif args.synthetic == "sphere":
        # napkin-scale cloth: mass and stiffness tuned for a 0.4 m square
        weights.total_mass = 0.1
        weights.k_mi = 10.0
        weights.k_c = 5.0
        cloth = grid_mesh(25, 25, size_x=0.4, size_y=0.4,
                          origin=(-0.2, -0.2, 0.16))
        scene = solvers.build_drape_scene(cloth, k=9, seed=args.seed,
                                          body=sphere_body((0, 0, 0), 0.15),
                                          weights=weights)
    else:
        raise DataError("drape needs a scene file or --synthetic sphere")

    iterations = int(spec.get("iterations", args.iterations))
    if mode == "dynamic":
        result = solvers.drape_dynamic(scene, iterations=iterations)
    else:
        result = solvers.drape_static(scene, iterations=iterations)
    summary = result.summary()
    print("drape summary: " + json.dumps(summary, sort_keys=True))
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json({"summary": summary, "per_frame": result.per_frame_metrics},
                    out / "drape_metrics.json")
        for f, m in enumerate(result.meshes):
            save_obj(m, out / f"drape_{f:03d}.obj")
        _write_json({"frames": [{k: v.tolist() for k, v in sorted(blocks.items())}
                                for blocks in result.states]},
                    out / "drape_states.json")
        if args.trace:
            _write_trace_csv(result.trace, out / "drape_trace.csv")
            _write_trace_jsonl(result.trace, out / "drape_trace.jsonl")
            report.loss_trace(result.trace, out / "drape_trace.png",
                              title="drape energy")
        if result.per_frame_metrics:
            report.per_frame_metric(
                {k: [m[k] for m in result.per_frame_metrics]
                 for k in result.per_frame_metrics[0]},
                out / "drape_metrics.png", ylabel="percent")
        print(f"wrote outputs to {out}")
    return EXIT_OK


def _cmd_metrics(args) -> int:
    mesh_a = load_obj(args.mesh_a)
    mesh_b = load_obj(args.mesh_b)
    ms = metrics.mesh_pair_metrics(mesh_a, mesh_b, samples=args.samples,
                                   seed=args.seed)
    payload = ms.to_json()
    print(json.dumps(payload, sort_keys=True))
    if args.out_dir:
        _write_json(payload, Path(args.out_dir) / "metrics.json")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="jetpatch",
                description="Patch-wise jet surfaces: fitting, tracking, draping")
    sub = p.add_subparsers(dest="command")

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", type=str, default=None,
                        help="flat key=value config file")
        sp.add_argument("--out-dir", type=str, default=None)
        sp.add_argument("--trace", action="store_true",
                        help="write per-iteration trace CSV and figures")

    sp = sub.add_parser("partition", help="cluster a mesh into patches")
    sp.add_argument("mesh")
    sp.add_argument("--patches", type=int, default=None,
                    help="override the area-based patch count")
    sp.add_argument("--subdivide", type=int, default=0,
                    help="midpoint-subdivide the mesh this many times first")
    common(sp)
    sp.set_defaults(func=_cmd_partition)

    sp = sub.add_parser("fit", help="fit a jet to a family sample or mesh")
    sp.add_argument("--order", type=int, default=4)
    sp.add_argument("--family", choices=families.FAMILY_KINDS, default="gaussian")
    sp.add_argument("--mesh", type=str, default=None)
    sp.add_argument("--grid", type=int, default=21)
    common(sp)
    sp.set_defaults(func=_cmd_fit)

    sp = sub.add_parser("eval-fit", help="residual sweep over jet orders")
    sp.add_argument("--orders", type=str, default="1..6")
    sp.add_argument("--draws", type=int, default=10)
    sp.add_argument("--grid", type=int, default=21)
    common(sp)
    sp.set_defaults(func=_cmd_eval_fit)

    sp = sub.add_parser("sft", help="track a template through observations")
    sp.add_argument("scene", nargs="?", default=None)
    sp.add_argument("--synthetic", choices=["cylinder-bend"], default=None)
    sp.add_argument("--frames", type=int, default=20)
    common(sp)
    sp.set_defaults(func=_cmd_sft)

    sp = sub.add_parser("drape", help="drape a garment onto a body")
    sp.add_argument("scene", nargs="?", default=None)
    sp.add_argument("--synthetic", choices=["sphere"], default=None)
    sp.add_argument("--mode", choices=["static", "dynamic"], default="static")
    sp.add_argument("--iterations", type=int, default=2500)
    common(sp)
    sp.set_defaults(func=_cmd_drape)

    sp = sub.add_parser("metrics", help="MetricSet between two meshes")
    sp.add_argument("mesh_a")
    sp.add_argument("mesh_b")
    sp.add_argument("--samples", type=int, default=10_000)
    common(sp)
    sp.set_defaults(func=_cmd_metrics)
    return p


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (MeshError, PartitionError, ConfigError, DataError, FileNotFoundError,
            json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    raise SystemExit(cli())


if __name__ == "__main__":
    main()
