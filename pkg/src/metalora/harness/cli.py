"""``metalora`` command line.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..errors import ConfigError, MetaLoraError
from ..landscape import (
    NetMode,
    certify_local_min,
    classify_stationary_point,
    search_spurious_minimum,
)
from ..objectives import MetaParams, test_loss_population
from ..serialization import (
    adapter_to_dict,
    certificate_to_dict,
    dataset_from_dict,
    dataset_to_dict,
    ground_truth_from_dict,
    ground_truth_to_dict,
    matrix_from_json,
    matrix_to_json,
    params_from_dict,
    params_to_dict,
    read_json,
    trace_to_dict,
    write_json,
)
from ..solvers import (
    TrainConfig,
    finetune_empirical,
    finetune_population,
    init_meta_params,
    train_meta_gd,
)
from ..task_model import RngSpec, generate_ground_truth, sample_task, samples_per_task
from .config import DEFAULT_SWEEPS, ExperimentConfig, normalize_axis
from .experiments import run_comparison
from .outputs import emit_outputs
from .verify import verify_theorems

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
log = logging.getLogger("metalora")


def _load_config(args) -> ExperimentConfig:
    obj = read_json(args.config) if args.config else {}
    overrides = {
        "d": args.d, "k": args.k, "T": args.T, "n_retrain": args.n_retrain, "n_finetune": args.n_finetune,
        "sigma_eps": args.sigma_eps, "trials": args.trials, "master_seed": args.seed,
    }
    obj.update({key: val for key, val in overrides.items() if val is not None})
    if args.rank is not None:
        obj["finetune_rank_policy"] = {"Fixed": args.rank}
    if args.sweep_axis is not None:
        values = args.sweep_values or DEFAULT_SWEEPS[normalize_axis(args.sweep_axis)]
        obj["sweep"] = {"axis": args.sweep_axis, "values": values}
    for key in ("train", "finetune"):
        if isinstance(obj.get(key), dict) or key not in obj:
            obj.setdefault(key, {})
    if args.lr is not None:
        obj["train"]["learning_rate"] = args.lr
    if args.max_iters is not None:
        obj["train"]["max_iters"] = args.max_iters
    return ExperimentConfig.from_dict(obj)


def _formats(args) -> list:
    formats = [f.strip() for f in args.format.split(",") if f.strip()]
    bad = set(formats) - {"csv", "json", "plot"}
    if bad:
        raise ConfigError(f"unknown formats {sorted(bad)}")
    return formats


def _out(args) -> Path:
    return Path(args.out or ".")


def cmd_gen(args) -> int:
    cfg = _load_config(args)
    root = RngSpec(cfg.master_seed)
    gt = generate_ground_truth(cfg.d, cfg.k, cfg.T, root.child(0))
    n_task = samples_per_task(cfg.n_retrain, cfg.T)
    data = [sample_task(gt, t, n_task, cfg.sigma_x, cfg.sigma_eps, root.child(1, t)) for t in range(1, cfg.T + 1)]
    test = sample_task(gt, cfg.T + 1, cfg.n_finetune, cfg.sigma_x, cfg.sigma_eps, root.child(2))
    out = _out(args)
    write_json(out / "ground_truth.json", ground_truth_to_dict(gt))
    write_json(out / "retrain_data.json", [dataset_to_dict(ds) for ds in data])
    write_json(out / "finetune_data.json", dataset_to_dict(test))
    print(f"wrote ground truth (d={gt.d}, k={gt.k}, T={gt.T}) and {cfg.T + 1} datasets to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    gt = ground_truth_from_dict(read_json(args.ground_truth))
    objective = gt if args.data is None else [dataset_from_dict(o) for o in read_json(args.data)]
    root = RngSpec(cfg.master_seed)
    init = init_meta_params(gt.d, gt.k, gt.T, cfg.train.init_scale, root.child(3))
    trace = train_meta_gd(init, objective, cfg.train, root.child(4))
    out = _out(args)
    write_json(out / "train_trace.json", trace_to_dict(trace))
    write_json(out / "meta_params.json", params_to_dict(trace.final_params))
    print(f"final loss {trace.final_loss:.6e} after {trace.iterations_used} iterations "
          f"(converged={trace.converged}, diverged={trace.diverged})")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _load_config(args)
    gt = ground_truth_from_dict(read_json(args.ground_truth))
    a_hat = params_from_dict(read_json(args.params)).a
    rank = cfg.finetune_rank_policy.resolve(gt.k, gt.T)
    out = _out(args)
    if args.data is None:
        adapter, loss = finetune_population(a_hat, gt, rank)
        result = {"mode": "population", "rank": rank, "test_loss": loss, "adapter": adapter_to_dict(adapter)}
    else:
        test = dataset_from_dict(read_json(args.data))
        adapter, trace = finetune_empirical(a_hat, test, rank, cfg.finetune, RngSpec(cfg.master_seed).child(5))
        result = {"mode": "empirical", "rank": rank, "test_loss": test_loss_population(adapter, a_hat, gt),
                  "adapter": adapter_to_dict(adapter), "trace": trace_to_dict(trace)}
    write_json(out / "finetune.json", result)
    print(f"rank-{rank} {result['mode']} fine-tuning: population test loss {result['test_loss']:.6e}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    if cfg.sweep is None and not args.single:
        groups = {axis: run_comparison(replace(cfg, sweep=(axis, values)), args.workers)
                  for axis, values in DEFAULT_SWEEPS.items()}
    else:
        rows = run_comparison(cfg, args.workers)
        groups = {cfg.sweep[0] if cfg.sweep else "none": rows}
    files = emit_outputs(groups, {"config": cfg.to_dict()}, _out(args), _formats(args))
    for f in files:
        print(f)
    return EXIT_OK


def cmd_verify(args) -> int:
    report = verify_theorems(args.d_values, args.k_values, args.T_values, args.seeds,
                             corrupt_sr=args.corrupt_sr, t2_probes=args.probes)
    print(report.table())
    if "json" in _formats(args):
        write_json(_out(args) / "verify_report.json", report.to_dict())
    print("all checks passed" if report.passed else f"{len(report.failures())} check(s) failed")
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_probe(args) -> int:
    # landscape probes use tiny d, so the experiment-config diversity check does not apply
    base = read_json(args.config) if args.config else {}
    d, k, T = (getattr(args, key) or base.get(key, dflt) for key, dflt in (("d", 2), ("k", 1), ("T", 3)))
    seed = args.seed if args.seed is not None else int(base.get("master_seed", 0))
    if T < 3:
        raise ConfigError("spurious minima are only sought for T >= 3")
    search_cfg = TrainConfig(init_scale=args.init_scale, max_iters=200)
    found, tried = search_spurious_minimum(d, k, T, RngSpec(seed), args.pairs, search_cfg)
    out = _out(args)
    if found is None:
        print(f"no spurious minimum candidate in {tried} (ground truth, start) pairs")
        write_json(out / "probe.json", {"found": False, "pairs_tried": tried})
        return EXIT_OK
    result = {"found": True, "pairs_tried": tried, "ground_truth": ground_truth_to_dict(found.gt),
              "u_hat": [matrix_to_json(u) for u in found.u_hat], "reduced_loss": found.reduced_loss,
              "reduced_grad_norm": found.reduced_grad_norm, "reduced_min_eig": found.reduced_min_eig,
              "report": found.report.to_dict()}
    print(f"candidate after {tried} pairs: reduced loss {found.reduced_loss:.4e}, "
          f"grad {found.reduced_grad_norm:.2e}, min eig {found.reduced_min_eig:.3e}")
    if args.certify:
        mode = NetMode.FULL_NET if T * d * k <= 8 and k == 1 else NetMode.MONTE_CARLO
        cert = certify_local_min(found.u_hat, found.gt, args.delta, args.delta / 10, args.gamma, mode=mode)
        result["certificate"] = certificate_to_dict(cert)
        print(f"{cert.mode.value}: min r = {cert.min_r_value:.4e} over {cert.points_checked} points, "
              f"certified={cert.certified}")
    write_json(out / "probe.json", result)
    return EXIT_OK


def cmd_classify(args) -> int:
    gt = ground_truth_from_dict(read_json(args.ground_truth))
    p = params_from_dict(read_json(args.params))
    rep = classify_stationary_point(p, gt, args.grad_tol, args.eig_tol)
    rows = [("classification", rep.classification.value), ("loss", f"{rep.loss_value:.6e}"),
            ("grad_norm", f"{rep.grad_norm:.6e}"), ("min_hessian_eig", f"{rep.min_hessian_eig:.6e}"),
            ("b_norms", ", ".join(f"{b:.4e}" for b in rep.b_norms))]
    if rep.direction_method:
        rows.append(("direction", f"{rep.direction_method} (Rayleigh quotient {rep.rayleigh_quotient:.4e})"))
    for key, val in rows:
        print(f"{key:<16} {val}")
    if "json" in _formats(args):
        write_json(_out(args) / "classification.json", rep.to_dict())
    return EXIT_OK


def _common(p: argparse.ArgumentParser, default_format: str) -> None:
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    p.add_argument("--out", help="output directory (default: current directory)")
    p.add_argument("--format", default=default_format, help="comma list of csv,json,plot")
    p.add_argument("--d", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--n-retrain", type=int)
    p.add_argument("--n-finetune", type=int)
    p.add_argument("--sigma-eps", type=float)
    p.add_argument("--trials", type=int)
    p.add_argument("--rank", type=int, help="fixed fine-tuning rank (default: 3k if T=2 else k)")
    p.add_argument("--lr", type=float, help="retraining learning rate")
    p.add_argument("--max-iters", type=int, help="retraining iteration cap")
    p.add_argument("--sweep-axis", help="one of d, N, N', T")
    p.add_argument("--sweep-values", type=int, nargs="+")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metalora", description="Linear Meta-LoRA experiments and checks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a ground truth and task datasets")
    _common(p, "json")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="Meta-LoRA gradient descent (population or empirical)")
    _common(p, "json")
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--data", help="retraining datasets JSON; omit for the population loss")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="fit a LoRA adapter to the held-out task")
    _common(p, "json")
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--params", required=True, help="meta_params.json from train")
    p.add_argument("--data", help="fine-tuning dataset JSON; omit for the population optimum")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("ablate", help="Meta-LoRA vs. SR+LoRA sweeps")
    _common(p, "csv,json,plot")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--single", action="store_true", help="run the base setting only, without a sweep")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("verify", help="run the theorem-verification suites")
    _common(p, "json")
    p.add_argument("--d-values", type=int, nargs="+", default=[6, 8])
    p.add_argument("--k-values", type=int, nargs="+", default=[1])
    p.add_argument("--T-values", type=int, nargs="+", default=[2, 3])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1])
    p.add_argument("--probes", type=int, default=100, help="two-task saddle probes")
    p.add_argument("--corrupt-sr", action="store_true", help="negative control: rank-deficient A_SR")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("probe-spurious", help="search for a spurious local minimum (T >= 3)")
    _common(p, "json")
    p.add_argument("--pairs", type=int, default=500)
    p.add_argument("--init-scale", type=float, default=1.0)
    p.add_argument("--certify", action="store_true")
    p.add_argument("--delta", type=float, default=1e-2)
    p.add_argument("--gamma", type=float, default=1e-8)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("classify", help="classify a stationary point")
    _common(p, "json")
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--grad-tol", type=float, default=1e-8)
    p.add_argument("--eig-tol", type=float, default=1e-8)
    p.set_defaults(func=cmd_classify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, MetaLoraError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
