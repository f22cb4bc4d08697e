"""Command line entry point: ``gridflow parse|train|pf|refine|eval|oracle-opf``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import nn_opf, oracle_eval, pf_core
from .case_io import CaseFormatError, load_case, network_to_json
from .sampler import lhs_batch
from .trainer import TrainConfig, Trainer, TrainingError


def _json_arg(text: str):
    """Inline JSON or a path to a JSON file."""
    p = Path(text)
    if p.suffix == ".json" and p.exists():
        return json.loads(p.read_text())
    return json.loads(text)


def _emit(payload, out: str | None) -> None:
    text = json.dumps(payload, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


def _scenario(args, network) -> np.ndarray:
    if getattr(args, "scenario", None) is None:
        return np.zeros(network.input_dim)
    u = np.asarray(_json_arg(args.scenario), dtype=float)
    if u.shape != (network.input_dim,):
        raise SystemExit(f"scenario must have {network.input_dim} entries, got shape {u.shape}")
    return u


def _point(state, dispatch) -> dict:
    return {
        "v": np.asarray(state.v, float).tolist(),
        "theta": np.asarray(state.theta, float).tolist(),
        "p_g": np.asarray(dispatch.p_g, float).tolist(),
    }


def cmd_parse(args) -> int:
    net = load_case(args.case)
    if args.summary:
        _emit({
            "name": net.name,
            "base_mva": net.base_mva,
            "buses": net.n,
            "branches": len(net.branches),
            "generators": net.n_gen,
            "slack": net.slack,
            "pv": list(net.pv_set),
            "pq": list(net.pq_set),
            "input_dim": net.input_dim,
            "output_dim": nn_opf.output_dim(net),
        }, None)
        return 0
    text = network_to_json(net)
    if args.json_out:
        Path(args.json_out).write_text(text + "\n")
    else:
        print(text)
    return 0


def cmd_train(args) -> int:
    net = load_case(args.case)
    out = Path(args.out)
    if args.resume:
        trainer = Trainer.resume(net, args.resume)
    else:
        if args.preset == "paper":
            cfg = TrainConfig.paper(net, seed=args.seed)
        else:
            cfg = TrainConfig.desk(net, epochs=args.epochs, seed=args.seed)
        trainer = Trainer(net, cfg)
    try:
        result = trainer.run(out)
    except TrainingError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 2
    last = result.records[-1] if result.records else None
    _emit({
        "stop_reason": result.stop_reason,
        "epochs_run": len(result.records),
        "checkpoint": str(result.checkpoint),
        "log": str(out / "train_log.csv"),
        "final": asdict(last) if last else None,
    }, None)
    return 0


def cmd_pf(args) -> int:
    net = load_case(args.case)
    dispatch = pf_core.stored_dispatch(net)
    if args.dispatch:
        dispatch = pf_core.Dispatch(np.asarray(_json_arg(args.dispatch), dtype=float))
        if dispatch.p_g.shape != (net.n_gen,):
            raise SystemExit(f"dispatch must have {net.n_gen} entries")
    sol = oracle_eval.newton_pf(net, dispatch, None, _scenario(args, net))
    _emit({
        "converged": sol.converged,
        "iterations": sol.iterations,
        "max_residual": sol.max_residual,
        **_point(sol.state, sol.dispatch),
    }, args.out)
    return 0 if sol.converged else 1


def cmd_refine(args) -> int:
    net = load_case(args.case)
    _, _, params, _ = nn_opf.load_checkpoint(args.ckpt)
    u = _scenario(args, net)
    state, dispatch = oracle_eval.predict(params, net, u[None, :])
    s0 = pf_core.SystemState(np.asarray(state.v)[0], np.asarray(state.theta)[0])
    d0 = pf_core.Dispatch(np.asarray(dispatch.p_g)[0])
    rr = oracle_eval.gradient_flow_refine(s0, d0, u, net, max_iters=args.max_iters)
    _emit({
        "converged": rr.converged,
        "step_underflow": rr.step_underflow,
        "iterations": rr.iterations,
        "energy_start": rr.energy_trace[0],
        "energy_final": rr.energy_trace[-1],
        "cost_start": oracle_eval.point_cost(net, d0.p_g),
        "cost_final": oracle_eval.point_cost(net, rr.dispatch.p_g),
        **_point(rr.state, rr.dispatch),
    }, args.out)
    return 0


def cmd_eval(args) -> int:
    net = load_case(args.case)
    _, _, params, _ = nn_opf.load_checkpoint(args.ckpt)
    if args.scenarios:
        u = np.atleast_2d(np.asarray(_json_arg(args.scenarios), dtype=float))
    else:
        u = lhs_batch(net.input_dim, args.count, np.random.default_rng(args.seed), pf_core.DEFAULT_DELTA)
    reference = _json_arg(args.reference) if args.reference else None
    report = oracle_eval.evaluate(params, net, u, reference)
    Path(args.out).write_text(report.to_json() + "\n")
    print(report.to_json())
    return 0


def cmd_oracle_opf(args) -> int:
    net = load_case(args.case)
    try:
        res = oracle_eval.brute_force_opf(net, args.resolution, pv_setpoint=args.pv_setpoint)
    except (oracle_eval.NoFeasiblePointError, ValueError) as exc:
        print(f"oracle-opf: {exc}", file=sys.stderr)
        return 1
    _emit({
        "cost": res.cost,
        "grid_points": res.grid_points,
        "feasible_points": res.feasible_points,
        **_point(res.state, res.dispatch),
    }, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridflow", description="Label-free neural AC optimal power flow.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="parse a case and emit its canonical JSON")
    p.add_argument("case", help="bundled case name, .m file or .json file")
    p.add_argument("--json-out", help="write the JSON here instead of stdout")
    p.add_argument("--summary", action="store_true", help="print sizes and index sets instead")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("train", help="train the network on a case")
    p.add_argument("case")
    p.add_argument("--epochs", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="directory for checkpoints and the CSV log")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pf", help="Newton-Raphson power flow")
    p.add_argument("case")
    p.add_argument("--dispatch", help="generator outputs in p.u. (JSON list or file)")
    p.add_argument("--scenario", help="load perturbation vector (JSON list or file)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_pf)

    p = sub.add_parser("refine", help="gradient-flow refinement of a network prediction")
    p.add_argument("case")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scenario", help="load perturbation vector (JSON list or file); zeros if omitted")
    p.add_argument("--max-iters", type=int, default=50000)
    p.add_argument("--out")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="evaluate a checkpoint over a scenario batch")
    p.add_argument("case")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--reference", help="JSON with v, theta, p_g arrays")
    p.add_argument("--scenarios", help="JSON list of scenario rows; LHS batch if omitted")
    p.add_argument("--count", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle-opf", help="brute-force OPF on a tiny case")
    p.add_argument("case")
    p.add_argument("--resolution", type=float, required=True, help="grid step in p.u.")
    p.add_argument("--pv-setpoint", type=float, default=1.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle_opf)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CaseFormatError, nn_opf.CheckpointError, FileNotFoundError) as exc:
        print(f"gridflow {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
