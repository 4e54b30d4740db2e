import json
import math

import numpy as np
import pytest

from metalora.errors import ConfigError
from metalora.harness import (
    AblationRow,
    ExperimentConfig,
    RankPolicy,
    emit_outputs,
    run_comparison,
    verify_theorems,
)
from metalora.harness.cli import main
from metalora.harness.experiments import run_trial
from metalora.harness.outputs import CSV_HEADER, csv_text, read_csv, summarize, write_csv
from metalora.solvers import TrainConfig


def small_cfg(**kw):
    base = dict(d=5, k=1, T=3, n_retrain=300, n_finetune=30, trials=2,
                train=TrainConfig(grad_tol=1e-6, max_iters=300), finetune=TrainConfig(grad_tol=1e-6, max_iters=300))
    base.update(kw)
    return ExperimentConfig(**base)


def test_config_defaults_and_validation():
    cfg = ExperimentConfig()
    assert (cfg.d, cfg.k, cfg.T, cfg.n_retrain, cfg.n_finetune, cfg.sigma_eps) == (10, 1, 3, 5000, 100, 0.1)
    for bad in (dict(d=0), dict(sigma_eps=-1.0), dict(d=3, T=3), dict(sweep=("q", [1])), dict(sweep=("d", []))):
        with pytest.raises(ConfigError):
            ExperimentConfig(**bad)
    with pytest.raises(ConfigError):
        ExperimentConfig(sweep=("d", [2, 10]))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"bogus": 1})


def test_config_roundtrip_and_axis_aliases():
    cfg = ExperimentConfig(sweep=("Nprime", [25, 50]), finetune_rank_policy=RankPolicy(2))
    assert cfg.sweep == ("N'", [25, 50])
    back = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg
    assert [s.n_finetune for s in cfg.settings()] == [25, 50]


def test_rank_policy():
    assert RankPolicy().resolve(1, 2) == 3 and RankPolicy().resolve(2, 4) == 2
    assert RankPolicy(5).resolve(1, 2) == 5
    assert RankPolicy.from_json("PaperDefault") == RankPolicy()
    assert RankPolicy.from_json({"Fixed": 2}).to_json() == {"Fixed": 2}
    with pytest.raises(ConfigError):
        RankPolicy.from_json({"Fixed": 0})
    with pytest.raises(ConfigError):
        RankPolicy.from_json("Sometimes")


def test_empty_csv_is_header_only(tmp_path):
    assert csv_text([]) == ",".join(CSV_HEADER) + "\n"
    assert read_csv(write_csv([], tmp_path / "e.csv")) == []


def test_csv_roundtrip_keeps_nan_and_flags(tmp_path):
    rows = [AblationRow("T", 2, "MetaLoRA", 0, 0.1, 1e-3, "0:4.2.0", True),
            AblationRow("T", 2, "SR_LoRA", 0, math.nan, math.nan, "0:4.2.0", False)]
    back = read_csv(write_csv(rows, tmp_path / "r.csv"))
    assert back[0] == rows[0]
    assert math.isnan(back[1].test_loss) and back[1].converged is False


def test_summarize_ignores_nan():
    rows = [AblationRow("N", 1, "MetaLoRA", t, 0.0, v, "", True) for t, v in enumerate([1.0, 2.0, 3.0, math.nan])]
    q25, med, q75, n = summarize(rows)["MetaLoRA"][1]
    assert (med, n) == (2.0, 3) and q25 == 1.5 and q75 == 2.5


def test_comparison_is_deterministic_and_fair():
    cfg = small_cfg(sweep=("T", [2, 3]))
    rows = run_comparison(cfg)
    assert len(rows) == 2 * 2 * 2
    assert csv_text(rows) == csv_text(run_comparison(cfg))
    for i in range(0, len(rows), 2):
        ml, sr = rows[i], rows[i + 1]
        assert (ml.method, sr.method) == ("MetaLoRA", "SR_LoRA")
        assert ml.seed == sr.seed and ml.trial == sr.trial and ml.sweep_value == sr.sweep_value
    assert all(np.isfinite(r.test_loss) and r.test_loss >= 0 for r in rows)


def test_seed_changes_results():
    a = run_trial("none", 0, 0, small_cfg(master_seed=1))
    b = run_trial("none", 0, 0, small_cfg(master_seed=2))
    assert a[0].test_loss != b[0].test_loss


def test_noiseless_meta_lora_beats_standard_retraining():
    cfg = small_cfg(sigma_eps=0.0, n_retrain=30_000, n_finetune=200, trials=1,
                    train=TrainConfig(grad_tol=1e-9, max_iters=20_000),
                    finetune=TrainConfig(grad_tol=1e-10, max_iters=20_000))
    ml, sr = run_trial("none", 0, 0, cfg)
    assert ml.test_loss < 1e-6 < 1e-2 < sr.test_loss


def test_emit_outputs_files(tmp_path):
    rows = run_comparison(small_cfg(sweep=("N'", [20, 40]), trials=1))
    files = emit_outputs({"N'": rows}, {"note": 1}, tmp_path)
    names = sorted(p.name for p in files)
    assert names == ["ablation_Nprime.csv", "ablation_Nprime.svg", "report.json"]
    assert (tmp_path / "ablation_Nprime.svg").read_text().lstrip().startswith("<?xml")
    assert read_csv(tmp_path / "ablation_Nprime.csv") == rows


def test_verify_passes_and_negative_control_fails():
    kw = dict(d_values=(6,), T_values=(2, 3), seeds=(0,), t2_probes=10)
    assert verify_theorems(**kw).passed
    bad = verify_theorems(corrupt_sr=True, **kw)
    assert not bad.passed
    assert all(c.name.startswith("sr_") for c in bad.failures())
    assert any(c.name.startswith("sr_rank_law") for c in bad.failures())


def test_cli_exit_codes(tmp_path, capsys):
    out = str(tmp_path)
    assert main(["gen", "--d", "5", "--T", "2", "--n-retrain", "100", "--out", out]) == 0
    gt = str(tmp_path / "ground_truth.json")
    assert main(["train", "--ground-truth", gt, "--max-iters", "50", "--out", out]) == 0
    assert main(["finetune", "--ground-truth", gt, "--params", str(tmp_path / "meta_params.json"), "--out", out]) == 0
    assert json.loads((tmp_path / "finetune.json").read_text())["rank"] == 3
    assert main(["classify", "--ground-truth", gt, "--params", str(tmp_path / "meta_params.json"), "--out", out]) == 0
    assert main(["verify", "--d-values", "6", "--T-values", "3", "--seeds", "0", "--out", out]) == 0
    assert main(["verify", "--d-values", "6", "--T-values", "3", "--seeds", "0", "--corrupt-sr", "--out", out]) == 1
    assert main(["ablate", "--d", "2", "--T", "3", "--out", out]) == 2
    assert main(["ablate", "--sweep-axis", "bogus", "--out", out]) == 2
    assert main(["nonsense"]) == 2
    assert main(["train", "--ground-truth", str(tmp_path / "missing.json"), "--out", out]) == 3
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen", "--d", "5", "--T", "2", "--out", str(blocker / "sub")]) == 3
    capsys.readouterr()


def test_cli_probe_runs(tmp_path):
    assert main(["probe-spurious", "--d", "3", "--pairs", "5", "--out", str(tmp_path)]) == 0
    assert "pairs_tried" in json.loads((tmp_path / "probe.json").read_text())
    assert main(["probe-spurious", "--T", "2", "--out", str(tmp_path)]) == 2
