"""``w2`` command line: match, eval, decode, gradcheck, lab ambiguity, lab ablation.

Exit status is 0 on success, 1 on a domain error (infeasible generation, empty
assignment, ...) and 2 on a usage or input-format error.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import decoder, losses, matching, metrics, model, synthlab

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2

FORMS = {v.value: v for v in matching.Variant}


class UsageError(Exception):
    pass


def _emit(text: str, out: str | None) -> None:
    if out:
        model.write_atomic(out, text)
    else:
        sys.stdout.write(text)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


def _weights(args) -> matching.CostWeights:
    return matching.CostWeights(args.lambda_cls, args.lambda_l1, args.lambda_rep)


def _jobs(args) -> int:
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    return args.jobs


def _seeds(args) -> int:
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    return args.seeds


def _read_config(path) -> dict:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: parse failure: {exc}") from exc
    if not isinstance(obj, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return obj


# --- subcommands ------------------------------------------------------------------

def cmd_match(args) -> int:
    scene = model.load_scene(args.scene)
    preds = model.load_predictions(args.preds)
    result = matching.assign(preds, scene, _weights(args), matching.RepulsiveForm(FORMS[args.form]))
    _emit(_dumps(result.to_dict()), args.out)
    return EXIT_OK


def _to_units(points, units: str, image_size):
    arr = model.points_array(points)
    if units == "pixels":
        arr = arr * np.asarray(image_size, dtype=np.float64)
    return arr


def cmd_eval(args) -> int:
    if len(args.gt) != len(args.preds):
        raise UsageError("--gt and --preds need the same number of files")
    if args.units == "pixels" and args.image_size is None:
        raise UsageError("--units pixels requires --image-size W H")
    if args.units == "normalized" and args.image_size is not None:
        raise UsageError("--image-size conflicts with --units normalized")
    gt_sets, pred_sets = [], []
    for gt_path, pred_path in zip(args.gt, args.preds):
        scene = model.load_scene(gt_path)
        kept = decoder.filter_predictions(model.load_predictions(pred_path), args.cls_threshold, args.attr_threshold)
        gt_sets.append(_to_units(scene.positives, args.units, args.image_size))
        pred_sets.append(_to_units([p.point for p in kept], args.units, args.image_size))
    report = metrics.evaluate(gt_sets, pred_sets, args.tau)
    _emit(_dumps(report.to_dict()), args.out)
    if args.csv:
        d = report.to_dict()
        header = ",".join(d)
        row = ",".join(repr(v) if isinstance(v, float) else str(v) for v in d.values())
        model.write_atomic(args.csv, header + "\n" + row + "\n")
    return EXIT_OK


def cmd_decode(args) -> int:
    base = _read_config(args.config) if args.config else {}
    if args.scene:
        scene = model.load_scene(args.scene)
        for source, value in (("--channels", args.channels), ("config channels", base.get("channels"))):
            if value is not None and value != scene.grid.channels:
                raise UsageError(f"{source} {value} conflicts with the scene's {scene.grid.channels} channels")
        channels = scene.grid.channels
    else:
        channels = args.channels if args.channels is not None else base.get("channels", 16)
    seed = args.seed if args.seed is not None else base.get("seed", 0)
    if not args.scene:
        try:
            gen = synthlab.GeneratorConfig(n_pos=4, n_neg=4, min_separation=0.1, channels=channels, seed=seed)
        except ValueError as exc:
            raise UsageError(f"cannot build a synthetic scene: {exc}") from exc
        scene, _ = synthlab.generate_scene(gen)
    overrides = {"channels": channels, "seed": seed}
    if args.queries is not None:
        overrides["num_queries"] = args.queries
    if args.layers is not None:
        overrides["num_layers"] = args.layers
    for key, default in (("num_queries", 16), ("num_layers", 6)):
        base.setdefault(key, default)
    try:
        cfg = decoder.DecoderConfig(**{**base, **overrides})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid decoder config: {exc}") from exc
    trace = decoder.forward(scene, cfg)
    preds = list(trace.predictions)
    kept = decoder.filter_predictions(preds, args.cls_threshold, args.attr_threshold)
    if args.out:
        model.save_predictions(preds, args.out)
    if args.dump_trajectories:
        model.write_atomic(args.dump_trajectories, model.dumps(trace.to_dict(scene.id)) + "\n")
    summary = {"scene": scene.id, "config": cfg.to_dict(), "num_predictions": len(preds), "count": len(kept)}
    sys.stdout.write(_dumps(summary))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    tol = 1e-4
    worst = losses.gradcheck(n_instances=_seeds(args), seed=args.seed)
    ok = True
    for name, err in worst.items():
        passed = err < tol
        ok &= passed
        print(f"{name:<22} max_rel_err={err:.3e}  {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_DOMAIN


def _generator(args) -> synthlab.GeneratorConfig:
    if not args.config:
        return synthlab.GeneratorConfig(seed=args.seed)
    try:
        cfg = synthlab.GeneratorConfig.from_dict(_read_config(args.config))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid generator config: {exc}") from exc
    return cfg.with_seed(args.seed)


def cmd_lab_ambiguity(args) -> int:
    gen = _generator(args)
    form = matching.RepulsiveForm(FORMS[args.form])
    result = synthlab.ambiguity_experiment(gen, synthlab.default_matchers(args.lambda_rep, form),
                                           _seeds(args), jobs=_jobs(args))
    _emit(result.to_csv(), args.out)
    baseline, repulsive = result.rates[:, 0], result.rates[:, 1]
    summary = {
        "generator": gen.to_dict(),
        "matchers": result.summary(),
        "seeds_with_lower_rate": int(np.sum(repulsive < baseline)),
        "n_seeds": args.seeds,
    }
    (sys.stderr if not args.out else sys.stdout).write(_dumps(summary))
    return EXIT_OK


def cmd_lab_ablation(args) -> int:
    gen = _generator(args)
    table = synthlab.repulsion_ablation(gen, _seeds(args), lambda_rep=args.lambda_rep, jobs=_jobs(args))
    _emit(table.to_csv(), args.out)
    (sys.stderr if not args.out else sys.stdout).write(table.format() + "\n")
    return EXIT_OK


# --- parser -----------------------------------------------------------------------

def _add_cost_flags(p):
    p.add_argument("--lambda-cls", type=float, default=5.0, help="classification cost weight (default 5)")
    p.add_argument("--lambda-l1", type=float, default=1.0, help="L1 localization cost weight (default 1)")
    p.add_argument("--lambda-rep", type=float, default=0.2, help="repulsive cost weight (default 0.2)")
    p.add_argument("--form", choices=sorted(FORMS), default="exp", help="repulsive cost formulation (default exp)")


def _add_threshold_flags(p):
    p.add_argument("--cls-threshold", type=float, default=0.25, help="CLS-token score threshold (default 0.25)")
    p.add_argument("--attr-threshold", type=float, default=0.35, help="attribute-token score threshold (default 0.35)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="w2", description="Dual-query decoder and repulsive point-matching lab.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("match", help="assign predictions to a scene's target points")
    p.add_argument("--scene", required=True, help="scene JSON")
    p.add_argument("--preds", required=True, help="prediction JSON")
    p.add_argument("--out", help="write assignment JSON here instead of stdout")
    _add_cost_flags(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="counting and localization metrics")
    p.add_argument("--gt", required=True, nargs="+", help="ground-truth scene JSON file(s)")
    p.add_argument("--preds", required=True, nargs="+", help="prediction JSON file(s), one per --gt")
    p.add_argument("--tau", required=True, type=float, help="match distance threshold (no default)")
    p.add_argument("--units", choices=("normalized", "pixels"), default="normalized",
                   help="units of --tau; pixels scales coordinates by --image-size")
    p.add_argument("--image-size", type=float, nargs=2, metavar=("W", "H"), help="image size for --units pixels")
    p.add_argument("--out", help="write MetricsReport JSON here instead of stdout")
    p.add_argument("--csv", help="also write a one-row CSV of the report")
    _add_threshold_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("decode", help="run the decoder forward pass")
    p.add_argument("--scene", help="scene JSON (default: a synthetic scene from --seed)")
    p.add_argument("--config", help="decoder config JSON; flags override it")
    p.add_argument("--queries", type=int, help="number of query pairs K (default 16)")
    p.add_argument("--layers", type=int, help="number of decoder layers L (default 6)")
    p.add_argument("--channels", type=int, help="feature channels C (must match the scene)")
    p.add_argument("--seed", type=int, help="weight and scene seed (default: config seed, else 0)")
    p.add_argument("--out", help="write all K predictions as prediction JSON")
    p.add_argument("--dump-trajectories", metavar="PATH", help="write per-layer reference points as JSON")
    _add_threshold_flags(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("gradcheck", help="check loss gradients against finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=100, help="number of random instances (default 100)")
    p.set_defaults(func=cmd_gradcheck)

    lab = sub.add_parser("lab", help="synthetic matching experiments")
    labsub = lab.add_subparsers(dest="experiment", required=True)
    for name, func, helptext in (
        ("ambiguity", cmd_lab_ambiguity, "ambiguity rate of standard vs repulsive matching"),
        ("ablation", cmd_lab_ablation, "compare the five repulsive cost formulations"),
    ):
        p = labsub.add_parser(name, help=helptext)
        p.add_argument("--seeds", type=int, default=100, help="number of seeds (default 100)")
        p.add_argument("--seed", type=int, default=0, help="first seed (default 0)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
        p.add_argument("--config", help="generator config JSON")
        p.add_argument("--out", help="CSV output path (default stdout)")
        p.add_argument("--lambda-rep", type=float, default=0.2, help="repulsive cost weight (default 0.2)")
        if name == "ambiguity":
            p.add_argument("--form", choices=sorted(FORMS), default="exp", help="repulsive formulation (default exp)")
        p.set_defaults(func=func)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"w2 {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (model.SceneFormatError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"w2 {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (matching.MatchingError, losses.LossError, decoder.DecoderError,
            synthlab.InfeasibleError, ValueError) as exc:
        print(f"w2 {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
