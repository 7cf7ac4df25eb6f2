"""Command-line entry point: ``driftflow {flow,train,verify,sweep,datasets}``.

Exit codes: 0 success, 1 failed checks, 2 configuration error, 3 divergence
or a runtime failure of the drift.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
import time
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .core import DATASET_NAMES, ConfigError, DatasetSpec, RngHandle, read_batch_csv, sample_dataset, write_batch_csv
from .drifts import DRIFT_KINDS, DriftConfig, normalize_kind
from .evaluate import DegenerateBandwidthError, mmd2_median
from .flow import FlowConfig, FlowError, run_flow, two_delta_experiment, write_metrics_csv, write_two_delta_csv
from .generator import Architecture, TrainConfig, TrainError, save_checkpoint, train, write_train_csv
from .plots import grid_svg, line_svg, scatter_svg, write_svg
from .verify import run_verification_suite

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3
DEFAULT_MMD_BANDWIDTHS = (0.05, 0.2, 0.8)

# TOML keys that differ from the flag they set
CONFIG_ALIASES = {
    "kind": "drift",
    "step_size": "eta",
    "n_steps": "steps",
    "name": "dataset",
    "n_blocks": "blocks",
    "noise_dim": "noise_dim",
    "data_batch": "data_batch",
    "model_batch": "model_batch",
    "snapshot_every": "snapshot_every",
}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# argument types


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if not (v > 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return v


def _drift_kind(text: str) -> str:
    try:
        return normalize_kind(text)
    except ConfigError:
        raise argparse.ArgumentTypeError(f"unknown drift {text!r}; choose from {', '.join(DRIFT_KINDS)}")


def _dataset(text: str) -> str:
    name = text.strip().lower().replace("-", "_")
    if name not in DATASET_NAMES:
        raise argparse.ArgumentTypeError(f"unknown dataset {text!r}; choose from {', '.join(DATASET_NAMES)}")
    return name


def _float_list(text: str) -> tuple[float, ...]:
    vals = tuple(_positive_float(t) for t in text.split(",") if t.strip())
    if not vals:
        raise argparse.ArgumentTypeError("expected a comma-separated list of positive numbers")
    return vals


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _kind_list(text: str) -> tuple[str, ...]:
    return tuple(_drift_kind(t) for t in text.split(",") if t.strip())


def _dataset_list(text: str) -> tuple[str, ...]:
    return tuple(_dataset(t) for t in text.split(",") if t.strip())


# --------------------------------------------------------------------------
# parser


def _add_drift_args(p: argparse.ArgumentParser, default_kind: str) -> None:
    g = p.add_argument_group("drift")
    g.add_argument("--drift", type=_drift_kind, default=default_kind, help=f"one of {', '.join(DRIFT_KINDS)}")
    g.add_argument("--variant", choices=("ours", "da2"), default=None, help="proxy variant for sinkhorn-proxy")
    g.add_argument("--tau", type=_positive_float, default=0.5, help="kernel bandwidth / entropic regularisation")
    g.add_argument("--bandwidths", type=_float_list, default=None, help="comma list; MMD kernel sum")
    g.add_argument("--ignore-self", action="store_true", default=False)
    g.add_argument("--n-slices", type=_positive_int, default=32)
    g.add_argument("--mc-samples", type=_positive_int, default=256)
    g.add_argument("--sinkhorn-iters", type=_positive_int, default=100)
    g.add_argument("--sinkhorn-tol", type=_positive_float, default=1e-9)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="TOML file; flags override its values")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("runs/latest"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="driftflow", description="Drift fields, particle flows and drifted-target training.")
    parser.add_argument("--version", action="version", version=f"driftflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("flow", help="simulate a particle flow toward a dataset")
    _add_common(p)
    _add_drift_args(p, "mmd")
    p.add_argument("--dataset", type=_dataset, default="moons")
    p.add_argument("--noise", type=float, default=None, help="dataset noise override")
    p.add_argument("--n", type=_positive_int, default=256, help="particles (and target size)")
    p.add_argument("--eta", type=_positive_float, default=0.1, help="Euler step size")
    p.add_argument("--steps", type=_positive_int, default=500)
    p.add_argument("--snapshot-every", type=_positive_int, default=50)
    p.add_argument("--init-scale", type=_positive_float, default=1.0, help="std of the Gaussian initial particles")
    p.add_argument("--fixed-target", action="store_true", default=False, help="do not resample the target each step")
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("train", help="train a generator with drifted targets")
    _add_common(p)
    _add_drift_args(p, "mmd")
    p.add_argument("--dataset", type=_dataset, default="moons")
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--eta", type=_positive_float, default=1.0, help="drift scale in the targets")
    p.add_argument("--lr", type=_positive_float, default=1e-4)
    p.add_argument("--data-batch", type=_positive_int, default=256)
    p.add_argument("--model-batch", type=_positive_int, default=256)
    p.add_argument("--noise-dim", type=_positive_int, default=2)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--activation", choices=("tanh", "relu"), default="tanh")
    p.add_argument("--eval-every", type=_positive_int, default=100)
    p.add_argument("--holdout", type=_positive_int, default=1024)
    p.add_argument("--sample-panels", type=_positive_int, default=4, help="sample-grid snapshots besides step 0")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify", help="run the analytic self-checks")
    p.add_argument("--suite", default="all", help="comma list of check names, or 'all'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None, help="also write report.json here")
    p.add_argument("--config", type=Path, default=None)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", help="grid of flows, or the two-atom velocity table")
    _add_common(p)
    p.add_argument("--target", choices=("flow", "two-delta"), default="flow")
    p.add_argument("--drifts", type=_kind_list, default=("mmd", "kl"))
    p.add_argument("--taus", type=_float_list, default=(0.1, 0.5, 1.0))
    p.add_argument("--datasets", type=_dataset_list, default=("moons",))
    p.add_argument("--seeds", type=_int_list, default=(0,))
    p.add_argument("--n", type=_positive_int, default=128)
    p.add_argument("--eta", type=_positive_float, default=0.1)
    p.add_argument("--steps", type=_positive_int, default=100)
    p.add_argument("--bandwidths", type=_float_list, default=None)
    p.add_argument("--D", type=_positive_float, default=1.0)
    p.add_argument("--alpha", type=float, default=0.8)
    p.add_argument("--beta", type=float, default=0.4)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("datasets", help="export samples of a toy dataset")
    _add_common(p)
    p.add_argument("--dataset", type=_dataset, default="moons")
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--n", type=_positive_int, default=1024)
    p.add_argument("--D", type=_positive_float, default=1.0, help="two_delta_mixture half-distance")
    p.add_argument("--weight", type=float, default=0.5, help="two_delta_mixture mass at -D")
    p.set_defaults(func=cmd_datasets)
    return parser


def _flatten_toml(doc: dict, prefix: str = "") -> dict[str, Any]:
    flat = {}
    for key, val in doc.items():
        if isinstance(val, dict):
            flat.update(_flatten_toml(val, f"{prefix}{key}."))
        else:
            flat[key] = val
    return flat


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    """Parse twice: once to find ``--config``, then with file values as defaults."""
    args = parser.parse_args(argv)
    if getattr(args, "config", None) is None:
        return args
    try:
        doc = tomllib.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, tomllib.TOMLDecodeError) as err:
        raise CliError(f"cannot read config {args.config}: {err}")
    sub = _subparser(parser, args.command)
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, val in _flatten_toml(doc).items():
        dest = CONFIG_ALIASES.get(key, key).replace("-", "_")
        if dest not in known or dest in ("config", "func", "help"):
            raise CliError(f"config key {key!r} is not an option of '{args.command}'")
        action = known[dest]
        if isinstance(val, list):
            val = ",".join(str(v) for v in val)
        if action.type is not None and not isinstance(val, bool):
            try:
                val = action.type(str(val))
            except argparse.ArgumentTypeError as err:
                raise CliError(f"config key {key!r}: {err}")
        if action.choices is not None and val not in action.choices:
            raise CliError(f"config key {key!r}: {val!r} not in {list(action.choices)}")
        defaults[dest] = val
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


# --------------------------------------------------------------------------
# manifests


def build_id() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _resolved(args: argparse.Namespace) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k == "func":
            continue
        if isinstance(v, Path):
            v = str(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[k] = v
    return out


def write_manifest(out: Path, argv: Sequence[str], args, config: dict, seeds: dict, started: float, status: str) -> Path:
    """Written last: lists every other file under ``out`` with size and digest."""
    files = []
    for path in sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"):
        files.append({"path": path.relative_to(out).as_posix(), "bytes": path.stat().st_size, "sha256": _sha256(path)})
    manifest = {
        "command_line": ["driftflow", *argv],
        "command": args.command,
        "arguments": _resolved(args),
        "config": config,
        "seeds": seeds,
        "build": build_id(),
        "numpy": np.__version__,
        "started_utc": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "wall_clock_seconds": round(time.time() - started, 3),
        "status": status,
        "files": files,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


# --------------------------------------------------------------------------
# shared builders


def _drift_config(args) -> DriftConfig:
    kind = normalize_kind(args.drift, args.variant)
    bws = args.bandwidths
    if kind == "mmd" and bws is None:
        bws = DEFAULT_MMD_BANDWIDTHS
    return DriftConfig(
        kind,
        tau=args.tau,
        bandwidths=bws if kind == "mmd" else None,
        ignore_self=args.ignore_self,
        n_slices=args.n_slices,
        mc_samples=args.mc_samples,
        sinkhorn_max_iters=args.sinkhorn_iters,
        sinkhorn_tol=args.sinkhorn_tol,
    )


def _dataset_spec(args) -> DatasetSpec:
    extra = {}
    if getattr(args, "D", None) is not None and args.command == "datasets":
        extra = {"D": args.D, "weight": args.weight}
    return DatasetSpec(args.dataset, args.noise, extra)


def _read_csv_array(path: Path) -> np.ndarray:
    return np.asarray(read_batch_csv(path).positions)


def _read_columns(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


# --------------------------------------------------------------------------
# commands


def cmd_flow(args, argv) -> int:
    started = time.time()
    drift = _drift_config(args)
    cfg = FlowConfig(drift, args.eta, args.steps, args.snapshot_every, args.seed, not args.fixed_target)
    spec = _dataset_spec(args)
    root = RngHandle(args.seed, 1)
    target = sample_dataset(spec, args.n, root.substream(0))
    d = target.d
    init = args.init_scale * root.substream(1).generator().standard_normal((args.n, d))

    def sampler(n, rng):
        return sample_dataset(spec, n, rng)

    out = args.out
    (out / "snapshots").mkdir(parents=True, exist_ok=True)
    try:
        result = run_flow(cfg, init, target, sampler)
        status = "diverged" if result.diverged else "ok"
    except FlowError as err:
        result, status = None, f"error: {err}"
    write_batch_csv(out / "target.csv", target)
    if result is not None:
        write_metrics_csv(out / "metrics.csv", result.records)
        for step, pos in result.snapshots:
            write_batch_csv(out / "snapshots" / f"step_{step:06d}.csv", pos)
        _flow_plots(out, [s for s, _ in result.snapshots], f"{drift.kind} on {spec.name}")
    config = {"drift": drift.to_dict(), "flow": _flow_dict(cfg), "dataset": spec.describe(), "init_scale": args.init_scale}
    write_manifest(out, argv, args, config, {"master": args.seed, "data_stream": 1}, started, status)
    if status != "ok":
        print(f"flow {status}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"flow finished: {len(result.records)} records in {out}")
    return EXIT_OK


def _flow_dict(cfg: FlowConfig) -> dict:
    d = asdict(cfg)
    d["drift"] = cfg.drift.to_dict()
    return d


def _flow_plots(out: Path, steps: list[int], title: str) -> None:
    """Scatter of the first, middle and last snapshots over the target (read from CSV)."""
    target = _read_csv_array(out / "target.csv")
    picks = sorted({steps[0], steps[len(steps) // 2], steps[-1]})
    for step in picks:
        pts = _read_csv_array(out / "snapshots" / f"step_{step:06d}.csv")
        svg = scatter_svg([(target, "target"), (pts, f"particles, step {step}")], f"{title}: step {step}")
        write_svg(out / f"scatter_step_{step:06d}.svg", svg)


def cmd_train(args, argv) -> int:
    started = time.time()
    drift = _drift_config(args)
    arch = Architecture(args.noise_dim, args.hidden, args.blocks, target_dim(args), args.activation)
    cfg = TrainConfig(
        drift, arch, args.data_batch, args.model_batch, args.eta, args.lr, args.steps, args.eval_every, args.holdout, args.seed
    )
    spec = _dataset_spec(args)

    def sampler(n, rng):
        return sample_dataset(spec, n, rng)

    out = args.out
    (out / "samples").mkdir(parents=True, exist_ok=True)
    panel_steps = sorted({0, *(round(k * cfg.n_steps / args.sample_panels) for k in range(1, args.sample_panels + 1))})
    sample_steps: list[int] = []

    def callback(step, model, rec, samples):
        if step in panel_steps:
            write_batch_csv(out / "samples" / f"step_{step:06d}.csv", samples)
            sample_steps.append(step)

    status = "ok"
    try:
        result = train(cfg, sampler, callback=callback, extra_eval_steps=panel_steps)
        if result.diverged:
            status = "diverged"
    except TrainError as err:
        result, status = None, f"error: {err}"
    if result is not None:
        write_train_csv(out / "train_metrics.csv", result.records)
        write_batch_csv(out / "holdout.csv", result.holdout)
        save_checkpoint(out / "checkpoint.json", result.model, {"step": result.records[-1].step, "config": cfg.to_dict()})
        _train_plots(out, sample_steps, f"{drift.kind} on {spec.name}")
    config = {"train": cfg.to_dict(), "dataset": spec.describe()}
    write_manifest(out, argv, args, config, {"master": args.seed}, started, status)
    if status != "ok":
        print(f"train {status}", file=sys.stderr)
        return EXIT_DIVERGED
    last = result.records[-1]
    print(f"train finished: step {last.step}, holdout mmd2 {last.mmd2_holdout:.4g}, output in {out}")
    return EXIT_OK


def target_dim(args) -> int:
    return 1 if args.dataset == "two_delta_mixture" else 2


def _train_plots(out: Path, steps: list[int], title: str) -> None:
    target = _read_csv_array(out / "holdout.csv")
    panels = [("data", [(target, "data")])]
    for step in steps:
        pts = _read_csv_array(out / "samples" / f"step_{step:06d}.csv")
        finite = pts[np.all(np.isfinite(pts), axis=1)]
        panels.append((f"step {step}" + ("" if len(finite) == len(pts) else " (diverged)"), [(finite, "generated")]))
    write_svg(out / "samples_grid.svg", grid_svg(panels, title))


def cmd_verify(args, argv) -> int:
    names = [s.strip() for s in args.suite.split(",") if s.strip()]
    report = run_verification_suite(names, seed=args.seed)
    text = report.to_json()
    print(text)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "report.json").write_text(text + "\n", encoding="utf-8")
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def cmd_sweep(args, argv) -> int:
    started = time.time()
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    if args.target == "two-delta":
        rows = two_delta_experiment(args.D, args.alpha, args.beta, args.taus)
        write_two_delta_csv(out / "two_delta.csv", rows)
        ok = [r for r in rows if not r.underflow]
        svg = line_svg(
            [
                ([r.tau for r in ok], [abs(r.v_kl) for r in ok], "|V_KL|"),
                ([r.tau for r in ok], [abs(r.v_sp) for r in ok], "|V_SP|"),
                ([r.tau for r in rows], [abs(r.v_w2) for r in rows], "|V_W2|"),
            ],
            f"two atoms, D={args.D}, alpha={args.alpha}, beta={args.beta}",
            "tau",
            "velocity at +D",
            logx=True,
            logy=True,
        )
        write_svg(out / "two_delta.svg", svg)
        config = {"target": "two-delta", "D": args.D, "alpha": args.alpha, "beta": args.beta, "taus": list(args.taus)}
        write_manifest(out, argv, args, config, {}, started, "ok")
        print(f"two-atom table with {len(rows)} rows in {out / 'two_delta.csv'}")
        return EXIT_OK

    header = ("drift", "tau", "dataset", "seed", "final_mmd2", "initial_mmd2", "diverged")
    rows = []
    for dataset in args.datasets:
        spec = DatasetSpec(dataset)
        for kind in args.drifts:
            for tau in args.taus:
                for seed in args.seeds:
                    rows.append(_sweep_cell(spec, kind, tau, seed, args))
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    _sweep_plots(out, args.datasets)
    config = {"target": "flow", "drifts": list(args.drifts), "taus": list(args.taus), "datasets": list(args.datasets), "seeds": list(args.seeds)}
    write_manifest(out, argv, args, config, {"seeds": list(args.seeds)}, started, "ok")
    print(f"sweep of {len(rows)} cells in {out / 'sweep.csv'}")
    return EXIT_OK


def _sweep_cell(spec: DatasetSpec, kind: str, tau: float, seed: int, args) -> list:
    bws = (args.bandwidths or DEFAULT_MMD_BANDWIDTHS) if kind == "mmd" else None
    drift = DriftConfig(kind, tau=tau, bandwidths=bws)
    cfg = FlowConfig(drift, args.eta, args.steps, args.steps, seed)
    root = RngHandle(seed, 1)
    target = sample_dataset(spec, args.n, root.substream(0))
    holdout = sample_dataset(spec, args.n, root.substream(2))
    init = root.substream(1).generator().standard_normal((args.n, target.d))
    initial = mmd2_median(init, holdout)
    try:
        res = run_flow(cfg, init, target, lambda n, rng: sample_dataset(spec, n, rng))
        diverged = res.diverged
        final = float("nan") if diverged else mmd2_median(res.final, holdout)
    except (FlowError, DegenerateBandwidthError):
        diverged, final = True, float("nan")
    return [kind, repr(tau), spec.name, seed, repr(final), repr(initial), int(diverged)]


def _sweep_plots(out: Path, datasets: Sequence[str]) -> None:
    """Per dataset: mean final MMD^2 over seeds against tau, one line per drift."""
    header, body = _read_columns(out / "sweep.csv")
    col = {h: i for i, h in enumerate(header)}
    for dataset in datasets:
        rows = [r for r in body if r[col["dataset"]] == dataset]
        lines = []
        for kind in dict.fromkeys(r[col["drift"]] for r in rows):
            by_tau: dict[float, list[float]] = {}
            for r in rows:
                if r[col["drift"]] == kind:
                    by_tau.setdefault(float(r[col["tau"]]), []).append(float(r[col["final_mmd2"]]))
            taus = sorted(by_tau)
            lines.append((taus, [float(np.mean(by_tau[t])) for t in taus], kind))
        svg = line_svg(lines, f"final MMD^2 on {dataset}", "tau", "median-heuristic MMD^2", logx=True, logy=True)
        write_svg(out / f"sweep_{dataset}.svg", svg)


def cmd_datasets(args, argv) -> int:
    started = time.time()
    spec = _dataset_spec(args)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    batch = sample_dataset(spec, args.n, RngHandle(args.seed, 1).substream(0))
    path = out / f"{spec.name}.csv"
    write_batch_csv(path, batch)
    write_svg(out / f"{spec.name}.svg", scatter_svg([(_read_csv_array(path), spec.name)], f"{spec.name}, n={args.n}"))
    write_manifest(out, argv, args, {"dataset": spec.describe(), "n": args.n}, {"master": args.seed}, started, "ok")
    print(f"wrote {path}")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        return args.func(args, argv)
    except SystemExit as exc:  # argparse usage errors exit with 2
        return int(exc.code) if isinstance(exc.code, int) else EXIT_CONFIG
    except CliError as err:
        print(f"driftflow: error: {err}", file=sys.stderr)
        return err.code
    except ConfigError as err:
        print(f"driftflow: configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
