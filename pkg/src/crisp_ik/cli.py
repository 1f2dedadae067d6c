"""Command-line interface: ``crisp-ik {gen,train,predict,track,bias-sweep}``.

Every command accepts ``--config FILE``, a JSON object whose top-level keys
set option defaults for all commands and whose per-command objects (keyed by
the command name) set defaults for that command only. Explicit flags win.
Each command writes ``run.json`` with the fully resolved options into its
output directory.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import DampedLeastSquaresIK, SingularJacobianError
from .boxopt import NonFiniteObjectiveError
from .crisp import ModelFileError, load_model, save_model, select_hyperparameters, train
from .data import (
    DatasetFormatError,
    TorusRegion,
    TrackingError,
    UnreachableRegionError,
    make_trajectory,
    read_dataset,
    rmse,
    sample_dataset,
    track,
    write_dataset,
    write_report,
)
from .kernel import FactorizationError, KernelSpec
from .kinematics import BiasSpec, ChainFormatError, KinematicChain, resolve_chain
from .loss import LossSpec

log = logging.getLogger("crisp_ik")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _floats(text):
    try:
        return [float(v) for v in str(text).replace(" ", "").split(",") if v != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _lams(text):
    out = []
    for v in str(text).split(","):
        v = v.strip()
        if v == "auto":
            out.append(None)
        elif v:
            try:
                out.append(float(v))
            except ValueError:
                raise argparse.ArgumentTypeError(f"lambda must be a number or 'auto', got {v!r}") from None
    return out


def _kv(text):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


# --------------------------------------------------------------------------
# shared option groups


def _add_chain(p):
    p.add_argument("--chain", default=None, help="planar5, panda or a chain file (default: the dataset's)")


def _add_bias(p):
    p.add_argument("--joint-bias-deg", type=float, default=0.0, help="bias added to every joint, degrees")
    p.add_argument("--link-bias-mm", type=float, default=0.0, help="bias magnitude on every link, millimeters")
    p.add_argument("--link-signs", type=_floats, default=None, help="per-link signs for the link bias (default all +1)")


def _add_optimizer(p):
    p.add_argument("--n-starts", type=_positive_int, default=5)
    p.add_argument("--max-iters", type=_positive_int, default=200)
    p.add_argument("--gradient-tolerance", type=float, default=1e-8)
    p.add_argument("--objective-tolerance", type=float, default=1e-12)
    p.add_argument("--memory", type=_positive_int, default=10)


def _add_model(p):
    p.add_argument("--kernel", choices=("gaussian", "laplacian", "linear"), default="gaussian")
    p.add_argument("--sigma", type=_floats, default=[1.0], help="bandwidth or comma-separated grid")
    p.add_argument("--lam", type=_lams, default=[None], help="lambda or grid; 'auto' means n**-0.5")
    p.add_argument("--loss", choices=("fk", "radians"), default="fk")
    p.add_argument("--position-weight", type=float, default=1.0)
    p.add_argument("--orientation-weight", type=float, default=1.0)
    _add_optimizer(p)


def _add_trajectory(p):
    p.add_argument("--trajectory", choices=("eight", "circle2d", "circle3d", "spiral"), default=None,
                   help="default: eight for planar chains, circle3d for spatial ones")
    p.add_argument("--traj-param", type=_kv, action="append", default=[], metavar="KEY=VALUE",
                   help="trajectory parameter override, JSON value (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crisp-ik", description="Structured-prediction inverse kinematics.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", default=None, help="JSON file with option defaults")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="sample a dataset")
    p.add_argument("--chain", default="planar5")
    p.add_argument("--n", type=_positive_int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--region", choices=("box", "torus"), default="box")
    p.add_argument("--torus-center", type=_floats, default=[0.0, 0.044, -0.55])
    p.add_argument("--ring-radius", type=float, default=0.03)
    p.add_argument("--tube-radius", type=float, default=0.01)
    p.add_argument("--yaws-deg", type=_floats, default=[45.0, -45.0], help="allowed yaw angles (gripper down)")
    p.add_argument("--out", required=True, help="dataset CSV path")

    p = sub.add_parser("train", help="fit a model, grid-searching when a grid is given")
    p.add_argument("--data", required=True)
    p.add_argument("--validation", default=None, help="validation CSV (default: last 20%% of --data)")
    _add_chain(p)
    _add_model(p)
    _add_bias(p)
    p.add_argument("--out", required=True, help="model file path")

    p = sub.add_parser("predict", help="one-shot prediction for a single pose")
    p.add_argument("--model", required=True)
    p.add_argument("--pose", required=True, help="comma-separated pose: position then angles")
    p.add_argument("--top", type=_positive_int, default=10)

    p = sub.add_parser("track", help="track a trajectory and write reports")
    p.add_argument("--method", choices=("crisp", "dls", "sdls"), default="crisp")
    p.add_argument("--model", default=None, help="model file (crisp)")
    _add_chain(p)
    _add_bias(p)
    _add_trajectory(p)
    p.add_argument("--damping", type=float, default=0.1)
    p.add_argument("--outdir", required=True)

    p = sub.add_parser("bias-sweep", help="CRiSP-FK vs DLS under increasing model bias")
    p.add_argument("--data", default=None, help="training CSV (default: sample --n pairs with --seed)")
    _add_chain(p)
    p.add_argument("--n", type=_positive_int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kind", choices=("joint", "link"), default="joint")
    p.add_argument("--values", type=_floats, default=None,
                   help="degrees (joint) or millimeters (link); default 0,0.01,0.1,1,3 or 0.1,1,10,30")
    p.add_argument("--link-signs", type=_floats, default=None)
    _add_model(p)
    _add_trajectory(p)
    p.add_argument("--damping", type=float, default=0.1)
    p.add_argument("--selective", action="store_true", help="use selective damping for the baseline")
    p.add_argument("--reuse-gram", action="store_true", help="fit once and only swap the loss chain")
    p.add_argument("--wide", action="store_true", help="also write a bias x method table")
    p.add_argument("--outdir", required=True)
    return parser


# --------------------------------------------------------------------------
# helpers


def _bias(chain: KinematicChain, joint_deg=0.0, link_mm=0.0, signs=None) -> BiasSpec:
    J = chain.n_joints
    signs = np.ones(J) if signs is None else np.asarray(signs, dtype=float)
    if signs.shape != (J,):
        raise UsageError(f"--link-signs needs {J} values, got {signs.size}")
    return BiasSpec(np.full(J, np.deg2rad(joint_deg)), link_mm * 1e-3 * signs)


def _chain_for(args, dataset=None) -> KinematicChain:
    if args.chain:
        return resolve_chain(args.chain)
    if dataset is not None and dataset.chain_text:
        return dataset.chain
    raise UsageError("no chain given and the dataset carries none")


def _trajectory(args, chain):
    kind = args.trajectory or ("eight" if chain.kind == "planar" else "circle3d")
    traj = make_trajectory(kind, **dict(args.traj_param))
    if traj.points.shape[1] != chain.pose_dim:
        raise UsageError(f"trajectory {kind} does not fit a chain with {chain.pose_dim}-dimensional poses")
    return traj


def _model_options(args):
    return {
        "n_starts": args.n_starts,
        "max_iters": args.max_iters,
        "gradient_tolerance": args.gradient_tolerance,
        "objective_tolerance": args.objective_tolerance,
        "memory": args.memory,
    }


def _write_run(outdir: Path, args, extra=None):
    outdir.mkdir(parents=True, exist_ok=True)
    resolved = {k: v for k, v in vars(args).items() if k not in ("func",)}
    resolved["traj_param"] = dict(resolved.get("traj_param") or [])
    record = {"version": __version__, "argv": sys.argv[1:], "options": resolved}
    if extra:
        record.update(extra)
    (outdir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n",
                                     encoding="utf-8")


def _read(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return read_dataset(path)


# --------------------------------------------------------------------------
# commands


def cmd_gen(args):
    chain = resolve_chain(args.chain)
    region = None
    if args.region == "torus":
        orns = tuple((np.deg2rad(y), 0.0, np.pi) for y in args.yaws_deg)
        region = TorusRegion(tuple(args.torus_center), args.ring_radius, args.tube_radius, orns)
    ds = sample_dataset(chain, args.n, region, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, out)
    _write_run(out.parent, args, {"dataset_hash": ds.digest()})
    print(f"n: {len(ds)}")
    print(f"region: {json.dumps(ds.region, sort_keys=True)}")
    print(f"seed: {ds.seed}")
    print(f"wrote {out}")


def cmd_train(args):
    ds = _read(args.data)
    chain = _chain_for(args, ds)
    chain = chain.with_bias(_bias(chain, args.joint_bias_deg, args.link_bias_mm, args.link_signs))
    loss = LossSpec(args.loss, chain, args.position_weight, args.orientation_weight)
    opts = dict(_model_options(args), chain=chain)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    grid = [(KernelSpec(args.kernel, s), lam) for s in args.sigma for lam in args.lam]
    extra = {"dataset_hash": ds.digest()}
    if len(grid) == 1:
        spec, lam = grid[0]
        model = train(ds, spec, lam, loss, **opts)
    else:
        if args.validation:
            train_set, val = ds, _read(args.validation)
        else:
            cut = max(1, int(round(0.8 * len(ds))))
            if cut >= len(ds):
                raise UsageError("dataset too small to hold out a validation split")
            train_set = type(ds)(ds.X[:cut], ds.Y[:cut], ds.chain_text, ds.seed, ds.region)
            val = type(ds)(ds.X[cut:], ds.Y[cut:], ds.chain_text, ds.seed, ds.region)
        grid = [(spec, lam if lam is not None else len(train_set) ** -0.5) for spec, lam in grid]
        result = select_hyperparameters(train_set, val, grid, loss, **opts)
        table_path = out.parent / (out.stem + ".selection.csv")
        with open(table_path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# dataset_hash: {ds.digest()}\n# chain_hash: {chain.digest()}\n")
            w = csv.DictWriter(fh, fieldnames=list(result.table[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(result.table)
        print(f"selected sigma={result.kernel.sigma!r} lam={result.lam!r}; table: {table_path}")
        model = train(ds, result.kernel, result.lam, loss, **opts) if train_set is not ds else result.model
        extra["selection_table"] = str(table_path)
    save_model(model, out)
    _write_run(out.parent, args, extra)
    print(f"n: {model.X_fit_.shape[0]}  lam: {model.lam_!r}  wrote {out}")


def cmd_predict(args):
    model = load_model(args.model)
    try:
        x = np.array([float(v) for v in args.pose.split(",")])
    except ValueError:
        raise UsageError(f"malformed pose {args.pose!r}") from None
    if x.shape != (model.chain.pose_dim,):
        raise UsageError(f"pose needs {model.chain.pose_dim} numbers, got {x.size}")
    pred = model.predict_one(x)
    realized = model.chain.nominal().forward_array(pred.y)[0]
    top = np.argsort(-np.abs(pred.alpha), kind="stable")[: args.top]
    print("y: " + " ".join(repr(float(v)) for v in pred.y))
    print(f"objective: {pred.result.value!r}")
    print(f"termination: {pred.result.termination}")
    d = model.chain.pos_dim
    print(f"position_error_m: {float(np.linalg.norm(realized[:d] - x[:d]))!r}")
    print(f"alpha_length: {pred.alpha.size}")
    print("top_alpha (index, alpha):")
    for i in top:
        print(f"  {int(i)} {float(pred.alpha[i])!r}")


def cmd_track(args):
    outdir = Path(args.outdir)
    if args.method == "crisp":
        if not args.model:
            raise UsageError("--model is required for --method crisp")
        method = load_model(args.model)
        base = method.chain.nominal()
        bias = _bias(base, args.joint_bias_deg, args.link_bias_mm, args.link_signs)
        if not bias.is_zero:
            method = method.with_loss_chain(base.with_bias(bias))
    else:
        if not args.chain:
            raise UsageError("--chain is required for the dls baseline")
        base = resolve_chain(args.chain).nominal()
        biased = base.with_bias(_bias(base, args.joint_bias_deg, args.link_bias_mm, args.link_signs))
        method = DampedLeastSquaresIK(biased, damping=args.damping, selective=args.method == "sdls").fit()
    traj = _trajectory(args, base)
    report = track(method, traj, base)
    paths = write_report(report, outdir)
    _write_run(outdir, args, {"outputs": paths})
    s = report.summary()
    print(f"pos_rmse_m: {s['pos_rmse_m']!r}  orn_rmse_rad: {s['orn_rmse_rad']!r}  points: {s['n_points']}")


SWEEP_FIELDS = ("method", "bias_kind", "bias_value", "pos_rmse", "orn_rmse", "pos_std", "orn_std", "error")


def cmd_bias_sweep(args):
    outdir = Path(args.outdir)
    if args.data:
        ds = _read(args.data)
        base = _chain_for(args, ds).nominal()
    else:
        base = resolve_chain(args.chain or "planar5").nominal()
        ds = sample_dataset(base, args.n, None, args.seed)
    values = args.values
    if values is None:
        values = [0.0, 0.01, 0.1, 1.0, 3.0] if args.kind == "joint" else [0.1, 1.0, 10.0, 30.0]
    if not values:
        raise UsageError("the bias list is empty")
    if len(args.sigma) != 1 or len(args.lam) != 1:
        raise UsageError("bias-sweep uses fixed hyperparameters; give one --sigma and one --lam")
    spec, lam = KernelSpec(args.kernel, args.sigma[0]), args.lam[0]
    traj = _trajectory(args, base)
    opts = _model_options(args)
    baseline_name = "sdls" if args.selective else "dls"

    fitted = None
    if args.reuse_gram:
        fitted = train(ds, spec, lam, LossSpec(args.loss, base, args.position_weight, args.orientation_weight),
                       chain=base, **opts)

    rows = []
    for value in values:
        if args.kind == "joint":
            bias = _bias(base, joint_deg=value)
        else:
            bias = _bias(base, link_mm=value, signs=args.link_signs)
        for name in ("crisp-fk", baseline_name):
            row = {"method": name, "bias_kind": args.kind, "bias_value": value}
            try:
                biased = base.with_bias(bias)
                if name == "crisp-fk":
                    if fitted is not None:
                        method = fitted.with_loss_chain(biased)
                    else:
                        loss = LossSpec(args.loss, biased, args.position_weight, args.orientation_weight)
                        method = train(ds, spec, lam, loss, chain=biased, **opts)
                else:
                    method = DampedLeastSquaresIK(biased, damping=args.damping, selective=args.selective).fit()
                rep = track(method, traj, base)
                pos, orn, pos_std, orn_std = rmse(rep.position_error, rep.orientation_error)
                row.update(pos_rmse=pos, orn_rmse=orn, pos_std=pos_std, orn_std=orn_std, error="")
            except Exception as exc:  # one failed cell does not stop the sweep
                log.warning("cell %s at %s failed: %s", name, value, exc)
                nan = float("nan")
                row.update(pos_rmse=nan, orn_rmse=nan, pos_std=nan, orn_std=nan,
                           error=f"{type(exc).__name__}: {exc}")
            rows.append(row)
            print(f"{name:9s} {args.kind} {value:g}: pos_rmse={row['pos_rmse']:.6g} m")

    outdir.mkdir(parents=True, exist_ok=True)
    preamble = (f"# dataset_hash: {ds.digest()}\n# seed: {ds.seed}\n# chain_hash: {base.digest()}\n"
                f"# trajectory: {traj.name}\n# bias_unit: {'deg' if args.kind == 'joint' else 'mm'}\n")
    sweep = outdir / "sweep.csv"
    with open(sweep, "w", newline="", encoding="utf-8") as fh:
        fh.write(preamble)
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    outputs = {"sweep": str(sweep)}
    if args.wide:
        wide = outdir / "sweep_wide.csv"
        methods = ["crisp-fk", baseline_name]
        with open(wide, "w", newline="", encoding="utf-8") as fh:
            fh.write(preamble)
            fh.write("bias_value," + ",".join(f"{m}_pos_rmse_mm" for m in methods) + "\n")
            for value in values:
                cells = [next(r for r in rows if r["method"] == m and r["bias_value"] == value)["pos_rmse"] * 1e3
                         for m in methods]
                fh.write(f"{value!r}," + ",".join(repr(c) for c in cells) + "\n")
        outputs["wide"] = str(wide)
    _write_run(outdir, args, {"outputs": outputs, "dataset_hash": ds.digest()})


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "predict": cmd_predict, "track": cmd_track,
            "bias-sweep": cmd_bias_sweep}


def _apply_config(parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    path = Path(known.config)
    if not path.is_file():
        raise FileNotFoundError(f"no such config file: {path}")
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: expected a JSON object")
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, sp in sub.choices.items():
        dests = {a.dest: a for a in sp._actions}
        section = {**{k: v for k, v in cfg.items() if not isinstance(v, dict)}, **cfg.get(name, {})}
        defaults = {}
        for key, value in section.items():
            dest = key.replace("-", "_")
            if dest not in dests:
                continue
            action = dests[dest]
            if action.type is not None and isinstance(value, (str, int, float)) and action.type is not int:
                value = action.type(str(value)) if action.type in (_floats, _lams) else action.type(value)
            elif action.type in (_floats, _lams) and isinstance(value, list):
                value = action.type(",".join("auto" if v is None else str(v) for v in value))
            defaults[dest] = value
        sp.set_defaults(**defaults)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError, DatasetFormatError, ModelFileError, ChainFormatError,
            UnreachableRegionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FactorizationError, NonFiniteObjectiveError, SingularJacobianError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except TrackingError as exc:
        cause = exc.__cause__
        numeric = isinstance(cause, (FactorizationError, NonFiniteObjectiveError, FloatingPointError,
                                     np.linalg.LinAlgError))
        print(f"{'numerical failure' if numeric else 'error'}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if numeric else EXIT_DATA
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
