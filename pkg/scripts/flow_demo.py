"""Particle flows of several drift kinds toward one dataset, side by side.

Writes final particle CSVs and a single SVG grid of the end states.
"""

import argparse
from pathlib import Path

from driftflow import DatasetSpec, DriftConfig, FlowConfig, RngHandle, run_flow, sample_dataset
from driftflow.core import write_batch_csv
from driftflow.evaluate import mmd2_median
from driftflow.plots import grid_svg, write_svg


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dataset", default="eight_gaussians")
    ap.add_argument("--kinds", default="mmd,kl,sinkhorn_proxy,sinkhorn_proxy_da2,sw")
    ap.add_argument("--tau", type=float, default=0.5)
    ap.add_argument("--eta", type=float, default=0.1)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--n", type=int, default=256)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("runs/flow_demo"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    spec = DatasetSpec(args.dataset)
    root = RngHandle(args.seed, 1)
    target = sample_dataset(spec, args.n, root.substream(0))
    init = root.substream(1).generator().standard_normal((args.n, target.d))
    panels = [("target", [(target.positions, "target")])]
    for kind in args.kinds.split(","):
        cfg = FlowConfig(DriftConfig(kind, tau=args.tau), args.eta, args.steps, args.steps, args.seed)
        res = run_flow(cfg, init, target, lambda n, rng: sample_dataset(spec, n, rng))
        write_batch_csv(args.out / f"{kind}_final.csv", res.final)
        score = float("nan") if res.diverged else mmd2_median(res.final, target)
        print(f"{kind:20s} final mmd2 {score:.5f}{'  (diverged)' if res.diverged else ''}")
        panels.append((f"{kind}{' (diverged)' if res.diverged else ''}", [(res.final.positions, kind)]))
    write_svg(args.out / "flow_demo.svg", grid_svg(panels, f"flows toward {args.dataset}", ncols=3))


if __name__ == "__main__":
    main()
