"""Experiment configuration loaded from a single JSON document."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Optional

from ..errors import ConfigError
from ..solvers import TrainConfig, default_finetune_rank

SWEEP_AXES = ("d", "N", "N'", "T")
_AXIS_ALIASES = {"d": "d", "N": "N", "N'": "N'", "N_prime": "N'", "Nprime": "N'", "n_finetune": "N'", "n_retrain": "N", "T": "T"}

# Default grids for the four single-axis sweeps around the base setting.
DEFAULT_SWEEPS = {
    "d": [5, 10, 20, 30],
    "N": [250, 500, 1000, 2500, 5000, 10000],
    "N'": [25, 50, 100, 200, 400],
    "T": [2, 3, 4, 5],
}


@dataclass(frozen=True)
class RankPolicy:
    """``PaperDefault`` (3k when T = 2, else k) or a fixed rank."""

    fixed: Optional[int] = None

    def resolve(self, k: int, T: int) -> int:
        return default_finetune_rank(k, T) if self.fixed is None else self.fixed

    def to_json(self):
        return "PaperDefault" if self.fixed is None else {"Fixed": self.fixed}

    @classmethod
    def from_json(cls, obj) -> "RankPolicy":
        if obj in (None, "PaperDefault"):
            return cls()
        if isinstance(obj, dict) and "Fixed" in obj:
            r = int(obj["Fixed"])
            if r < 1:
                raise ConfigError("fixed fine-tuning rank must be >= 1")
            return cls(r)
        if isinstance(obj, int):
            return cls.from_json({"Fixed": obj})
        raise ConfigError(f"unknown rank policy {obj!r}")


def normalize_axis(axis: str) -> str:
    try:
        return _AXIS_ALIASES[axis]
    except KeyError:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}") from None


@dataclass
class ExperimentConfig:
    d: int = 10
    k: int = 1
    T: int = 3
    n_retrain: int = 5000
    n_finetune: int = 100
    sigma_eps: float = 0.1
    sigma_x: float = 1.0
    finetune_rank_policy: RankPolicy = field(default_factory=RankPolicy)
    trials: int = 10
    sweep: Optional[tuple] = None
    train: TrainConfig = field(default_factory=lambda: TrainConfig(grad_tol=1e-6, max_iters=5000))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(grad_tol=1e-6, max_iters=5000))
    master_seed: int = 0

    def __post_init__(self):
        for name in ("d", "k", "T", "n_retrain", "n_finetune", "trials"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.sigma_eps < 0 or self.sigma_x <= 0:
            raise ConfigError("sigma_eps must be >= 0 and sigma_x > 0")
        if not 0 <= int(self.master_seed) < 2**64:
            raise ConfigError("master_seed must be an unsigned 64-bit integer")
        if self.sweep is not None:
            axis, values = self.sweep
            values = [int(v) for v in values]
            if not values:
                raise ConfigError("sweep needs at least one value")
            self.sweep = (normalize_axis(axis), values)
        for setting in self.settings():
            if setting.k * (setting.T + 1) > setting.d:
                raise ConfigError(f"k(T+1) = {setting.k * (setting.T + 1)} exceeds d = {setting.d}")
            if setting.n_retrain < setting.T:
                raise ConfigError("n_retrain must give every task at least one sample")

    def with_value(self, axis: str, value: int) -> "ExperimentConfig":
        key = {"d": "d", "N": "n_retrain", "N'": "n_finetune", "T": "T"}[normalize_axis(axis)]
        return replace(self, sweep=None, **{key: int(value)})

    def settings(self):
        """One config per sweep point (or just this one without a sweep)."""
        if self.sweep is None:
            return [self]
        axis, values = self.sweep
        return [self.with_value(axis, v) for v in values]

    def sweep_points(self):
        if self.sweep is None:
            return [("none", 0, self)]
        axis, values = self.sweep
        return [(axis, v, self.with_value(axis, v)) for v in values]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["finetune_rank_policy"] = self.finetune_rank_policy.to_json()
        out["sweep"] = None if self.sweep is None else {"axis": self.sweep[0], "values": list(self.sweep[1])}
        out["train"] = self.train.to_dict()
        out["finetune"] = self.finetune.to_dict()
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        obj = dict(obj)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "finetune_rank_policy" in obj:
                obj["finetune_rank_policy"] = RankPolicy.from_json(obj["finetune_rank_policy"])
            sweep = obj.get("sweep")
            if isinstance(sweep, dict):
                obj["sweep"] = (sweep["axis"], sweep["values"])
            elif isinstance(sweep, list):
                obj["sweep"] = tuple(sweep)
            for key in ("train", "finetune"):
                if isinstance(obj.get(key), dict):
                    base = cls.__dataclass_fields__[key].default_factory().to_dict()
                    base.update(obj[key])
                    obj[key] = TrainConfig.from_dict(base)
            return cls(**obj)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
