"""JSON schemas shared by the library and the CLI.

Matrices are stored as ``{"rows": r, "cols": c, "data": [...]}`` with row-major
data; seeds travel as ``RngSpec`` dicts so every artifact records where its
randomness came from.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .landscape import Classification, NetCertificate, NetMode, StationaryReport
from .objectives import Adapter, MetaParams
from .solvers import TrainConfig, TrainTrace
from .task_model import GroundTruth, RngSpec, TaskDataset

SCHEMA_VERSION = 1


def matrix_to_json(m) -> dict:
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    return {"rows": int(m.shape[0]), "cols": int(m.shape[1]), "data": m.ravel(order="C").tolist()}


def matrix_from_json(obj: dict) -> np.ndarray:
    data = np.asarray(obj["data"], dtype=np.float64)
    rows, cols = int(obj["rows"]), int(obj["cols"])
    if data.size != rows * cols:
        raise ValueError(f"matrix has {data.size} entries, expected {rows}x{cols}")
    return data.reshape((rows, cols))


def _seed(seed: Optional[RngSpec]):
    return None if seed is None else seed.to_dict()


def _unseed(obj) -> Optional[RngSpec]:
    return None if obj is None else RngSpec.from_dict(obj)


def ground_truth_to_dict(gt: GroundTruth) -> dict:
    return {"kind": "GroundTruth", "d": gt.d, "k": gt.k, "T": gt.T,
            "a_star": matrix_to_json(gt.a_star), "u_star": [matrix_to_json(u) for u in gt.u_star],
            "seed": _seed(gt.seed)}


def ground_truth_from_dict(obj: dict) -> GroundTruth:
    gt = GroundTruth(matrix_from_json(obj["a_star"]), [matrix_from_json(u) for u in obj["u_star"]],
                     _unseed(obj.get("seed")))
    if (gt.d, gt.k, gt.T) != (obj.get("d", gt.d), obj.get("k", gt.k), obj.get("T", gt.T)):
        raise ValueError("declared dimensions disagree with stored matrices")
    return gt


def dataset_to_dict(ds: TaskDataset) -> dict:
    return {"kind": "TaskDataset", "d": ds.d, "n": ds.n, "task_index": ds.task_index,
            "sigma_eps": ds.sigma_eps, "sigma_x": ds.sigma_x,
            "x": matrix_to_json(ds.x), "y": matrix_to_json(ds.y), "seed": _seed(ds.seed)}


def dataset_from_dict(obj: dict) -> TaskDataset:
    return TaskDataset(matrix_from_json(obj["x"]), matrix_from_json(obj["y"]), int(obj["task_index"]),
                       float(obj["sigma_eps"]), float(obj["sigma_x"]), _unseed(obj.get("seed")))


def params_to_dict(p: MetaParams) -> dict:
    return {"kind": "MetaParams", "d": p.d, "k": p.k, "T": p.T,
            "a": matrix_to_json(p.a), "u": [matrix_to_json(u) for u in p.u]}


def params_from_dict(obj: dict) -> MetaParams:
    return MetaParams(matrix_from_json(obj["a"]), [matrix_from_json(u) for u in obj["u"]])


def adapter_to_dict(ad: Adapter) -> dict:
    return {"kind": "Adapter", "rank": ad.rank, "u": matrix_to_json(ad.u), "v": matrix_to_json(ad.v)}


def adapter_from_dict(obj: dict) -> Adapter:
    return Adapter(matrix_from_json(obj["u"]), matrix_from_json(obj["v"]))


def trace_to_dict(tr: TrainTrace) -> dict:
    if isinstance(tr.final_params, MetaParams):
        final = params_to_dict(tr.final_params)
    elif isinstance(tr.final_params, Adapter):
        final = adapter_to_dict(tr.final_params)
    else:
        final = None
    return {"kind": "TrainTrace", "loss_history": [float(x) for x in tr.loss_history],
            "grad_norm_history": [float(x) for x in tr.grad_norm_history], "final_params": final,
            "converged": tr.converged, "iterations_used": tr.iterations_used, "diverged": tr.diverged,
            "perturbations": tr.perturbations, "final_learning_rate": tr.final_learning_rate,
            "config": None if tr.config is None else tr.config.to_dict(), "seed": _seed(tr.seed),
            "message": tr.message}


def trace_from_dict(obj: dict) -> TrainTrace:
    final = obj.get("final_params")
    if final is not None:
        final = params_from_dict(final) if final.get("kind") == "MetaParams" else adapter_from_dict(final)
    cfg = obj.get("config")
    return TrainTrace(list(obj["loss_history"]), list(obj["grad_norm_history"]), final, bool(obj["converged"]),
                      int(obj["iterations_used"]), bool(obj.get("diverged", False)), int(obj.get("perturbations", 0)),
                      float(obj.get("final_learning_rate", 0.0)), None if cfg is None else TrainConfig.from_dict(cfg),
                      _unseed(obj.get("seed")), obj.get("message", ""))


def report_from_dict(obj: dict) -> StationaryReport:
    direction = obj.get("curvature_direction")
    return StationaryReport(float(obj["grad_norm"]), float(obj["min_hessian_eig"]),
                            Classification(obj["classification"]), float(obj["loss_value"]),
                            list(obj["b_norms"]), None if direction is None else np.asarray(direction),
                            obj.get("direction_method"), obj.get("rayleigh_quotient"))


def certificate_to_dict(cert: NetCertificate) -> dict:
    out = cert.to_dict()
    out["center"] = [matrix_to_json(u) for u in cert.center]
    return out


def certificate_from_dict(obj: dict) -> NetCertificate:
    return NetCertificate([matrix_from_json(u) for u in obj["center"]], float(obj["delta"]), float(obj["epsilon"]),
                          float(obj["gamma"]), float(obj["min_r_value"]), int(obj["points_checked"]),
                          NetMode(obj["mode"]), bool(obj["certified"]), obj.get("resolution"))


def _default(o: Any):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, RngSpec):
        return o.to_dict()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def dumps(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_default)


def write_json(path, obj: Any) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps(obj) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def read_json(path) -> Any:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
