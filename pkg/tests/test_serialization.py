import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metalora.errors import MetaLoraError
from metalora.landscape import NetMode, NetCertificate, classify_stationary_point, manufacture_t2_stationary_point
from metalora.objectives import Adapter, MetaParams
from metalora.serialization import (
    adapter_from_dict,
    adapter_to_dict,
    certificate_from_dict,
    certificate_to_dict,
    dataset_from_dict,
    dataset_to_dict,
    dumps,
    ground_truth_from_dict,
    ground_truth_to_dict,
    matrix_from_json,
    matrix_to_json,
    params_from_dict,
    params_to_dict,
    read_json,
    report_from_dict,
    trace_from_dict,
    trace_to_dict,
    write_json,
)
from metalora.solvers import TrainConfig, init_meta_params, train_meta_gd
from metalora.task_model import RngSpec, generate_ground_truth, sample_task


def roundtrip(obj):
    return json.loads(dumps(obj))


def test_matrix_layout_is_row_major():
    m = np.arange(6.0).reshape(2, 3)
    obj = matrix_to_json(m)
    assert obj == {"rows": 2, "cols": 3, "data": [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]}
    assert np.array_equal(matrix_from_json(obj), m)


def test_ground_truth_and_dataset_roundtrip_exact():
    gt = generate_ground_truth(6, 2, 2, RngSpec(0))
    back = ground_truth_from_dict(roundtrip(ground_truth_to_dict(gt)))
    assert np.array_equal(back.a_star, gt.a_star)
    assert all(np.array_equal(a, b) for a, b in zip(back.u_star, gt.u_star))
    ds = sample_task(gt, 2, 7, rng=RngSpec(1))
    ds2 = dataset_from_dict(roundtrip(dataset_to_dict(ds)))
    assert np.array_equal(ds.x, ds2.x) and np.array_equal(ds.y, ds2.y)


def test_params_adapter_trace_roundtrip():
    gt = generate_ground_truth(5, 1, 2, RngSpec(2))
    tr = train_meta_gd(init_meta_params(5, 1, 2, 0.1, RngSpec(3)), gt, TrainConfig(max_iters=20), RngSpec(4))
    back = trace_from_dict(roundtrip(trace_to_dict(tr)))
    assert back.loss_history == tr.loss_history and back.iterations_used == tr.iterations_used
    assert np.array_equal(back.final_params.a, tr.final_params.a)
    assert back.config == tr.config
    p = params_from_dict(roundtrip(params_to_dict(tr.final_params)))
    assert np.array_equal(p.flatten(), tr.final_params.flatten())
    ad = Adapter(np.ones((5, 2)), np.arange(10.0).reshape(5, 2))
    ad2 = adapter_from_dict(roundtrip(adapter_to_dict(ad)))
    assert np.array_equal(ad.matrix(), ad2.matrix())


def test_report_and_certificate_roundtrip():
    gt = generate_ground_truth(6, 1, 2, RngSpec(5))
    rep = classify_stationary_point(manufacture_t2_stationary_point(gt, RngSpec(6)), gt)
    back = report_from_dict(roundtrip(rep.to_dict()))
    assert back.classification is rep.classification
    assert np.allclose(back.curvature_direction, rep.curvature_direction)
    cert = NetCertificate([np.ones((2, 1))], 1e-2, 1e-3, 1e-8, 3e-5, 100, NetMode.FULL_NET, True, 1e-3)
    c2 = certificate_from_dict(roundtrip(certificate_to_dict(cert)))
    assert c2.mode is NetMode.FULL_NET and c2.certified and c2.min_r_value == 3e-5


def test_json_file_io(tmp_path):
    path = write_json(tmp_path / "sub" / "x.json", {"a": np.float64(1.5), "b": np.arange(3)})
    assert read_json(path) == {"a": 1.5, "b": [0, 1, 2]}
    with pytest.raises(OSError):
        read_json(tmp_path / "missing.json")


def test_malformed_matrix_rejected():
    with pytest.raises((MetaLoraError, ValueError)):
        matrix_from_json({"rows": 2, "cols": 2, "data": [1.0]})


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_matrix_roundtrip_bit_exact(r, c, seed):
    m = np.random.default_rng(seed).standard_normal((r, c)) * 10.0 ** np.random.default_rng(seed).integers(-300, 300)
    assert np.array_equal(matrix_from_json(roundtrip(matrix_to_json(m))), m)
