"""Meta-LoRA vs. standard retraining (SR+LoRA) on synthetic tasks."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional

from ..errors import MetaLoraError
from ..objectives import task_loss_empirical, test_loss_population
from ..solvers import finetune_empirical, init_meta_params, solve_sr_empirical, train_meta_gd
from ..task_model import RngSpec, generate_ground_truth, sample_task, samples_per_task
from .config import DEFAULT_SWEEPS, ExperimentConfig

log = logging.getLogger(__name__)

METHODS = ("MetaLoRA", "SR_LoRA")
_AXIS_CODE = {"none": 0, "d": 1, "N": 2, "N'": 3, "T": 4}


@dataclass
class AblationRow:
    sweep_axis: str
    sweep_value: int
    method: str
    trial: int
    retrain_loss: float
    test_loss: float
    seed: str
    converged: bool


def trial_stream(master_seed: int, axis: str, value: int, trial: int) -> RngSpec:
    """Per-trial stream; both methods of a trial draw from its children."""
    return RngSpec(master_seed, (_AXIS_CODE[axis], int(value), int(trial)))


def _seed_label(spec: RngSpec) -> str:
    return f"{spec.master_seed}:" + ".".join(str(s) for s in spec.stream_id)


def run_trial(axis: str, value: int, trial: int, cfg: ExperimentConfig) -> list:
    """Train both methods on identical data and fine-tune on identical test samples."""
    stream = trial_stream(cfg.master_seed, axis, value, trial)
    label = _seed_label(stream)
    d, k, T = cfg.d, cfg.k, cfg.T
    gt = generate_ground_truth(d, k, T, stream.child(0))
    n_task = samples_per_task(cfg.n_retrain, T)
    data = [sample_task(gt, t, n_task, cfg.sigma_x, cfg.sigma_eps, stream.child(1, t)) for t in range(1, T + 1)]
    test = sample_task(gt, T + 1, cfg.n_finetune, cfg.sigma_x, cfg.sigma_eps, stream.child(2))
    rank = cfg.finetune_rank_policy.resolve(k, T)
    rows = []

    def finish(method, a_hat, retrain_loss, converged):
        try:
            adapter, ft = finetune_empirical(a_hat, test, rank, cfg.finetune, stream.child(5))
            loss = test_loss_population(adapter, a_hat, gt)
            ok = converged and not ft.diverged and math.isfinite(loss)
        except (MetaLoraError, ArithmeticError, ValueError) as exc:
            log.warning("%s fine-tuning failed (%s): %s", method, label, exc)
            loss, ok = math.nan, False
        rows.append(AblationRow(axis, int(value), method, int(trial), float(retrain_loss), float(loss), label, bool(ok)))

    init = init_meta_params(d, k, T, cfg.train.init_scale, stream.child(3))
    trace = train_meta_gd(init, data, cfg.train, stream.child(4))
    # hitting max_iters is not a failure for the empirical loss; divergence is
    finish("MetaLoRA", trace.final_params.a, trace.final_loss, not trace.diverged)
    try:
        a_sr = solve_sr_empirical(data)
        finish("SR_LoRA", a_sr, sum(task_loss_empirical(a_sr, ds) for ds in data), True)
    except ArithmeticError as exc:
        log.warning("standard retraining failed (%s): %s", label, exc)
        rows.append(AblationRow(axis, int(value), "SR_LoRA", int(trial), math.nan, math.nan, label, False))
    return rows


def _run_unit(args):
    return run_trial(*args)


def run_comparison(cfg: ExperimentConfig, workers: int = 1) -> list:
    """Rows for every (sweep value, trial, method), ordered deterministically."""
    units = [(axis, value, trial, setting)
             for axis, value, setting in cfg.sweep_points() for trial in range(cfg.trials)]
    if workers > 1 and len(units) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_unit, units))
    else:
        chunks = [_run_unit(u) for u in units]
    rows = [row for chunk in chunks for row in chunk]
    order = {m: i for i, m in enumerate(METHODS)}
    rows.sort(key=lambda r: (r.sweep_value, r.trial, order[r.method]))
    return rows


def run_default_sweeps(base: Optional[ExperimentConfig] = None, sweeps: Optional[dict] = None,
                       workers: int = 1) -> dict:
    """The four single-axis sweeps around ``base``; returns ``{axis: rows}``."""
    base = base or ExperimentConfig()
    sweeps = sweeps or DEFAULT_SWEEPS
    return {axis: run_comparison(replace(base, sweep=(axis, values)), workers) for axis, values in sweeps.items()}
