import json

import mpmath
import numpy as np
import pytest

from ddr.autodiff import GraphError
from ddr.data import Standardization
from ddr.network import (ArchSpec, DdrModel, FixedQuantileNet, IncompatibleModelError, ModelFormatError,
                         load_model)


def zero_model(arch):
    m = DdrModel.initialize(arch, np.random.default_rng(0))
    for k in m.params:
        m.params[k][:] = 0.0
    return m


def test_arch_validation():
    with pytest.raises(ValueError):
        ArchSpec(1, [], [4])
    with pytest.raises(ValueError):
        ArchSpec(1, [4], [])
    with pytest.raises(ValueError):
        ArchSpec(1, [0], [4])


def test_constant_net_outputs_out_bias():
    m = zero_model(ArchSpec(3, [4, 4], [4]))
    m.params["out.b"][:] = 0.7
    x = np.random.default_rng(1).normal(size=(5, 3))
    assert np.all(m.median_forward(x) == 0.7)


def test_one_hidden_unit_trace():
    m = zero_model(ArchSpec(1, [1], [1]))
    p = m.params
    p["feat0.W"][:] = [[2.0, -1.0]]
    p["feat0.b"][:] = [[0.5, 0.25]]
    p["reg0.W"][:] = [[1.5]]
    p["reg0.b"][:] = [[-0.1]]
    p["out.W"][:] = [[2.0]]
    p["out.b"][:] = [[0.3]]
    x = 0.8
    z0, z1 = 2 * x + 0.5, -x + 0.25
    h = z0 / (1 + np.exp(-z1))
    expected = 2.0 * max(1.5 * h - 0.1, 0.0) + 0.3
    assert m.median_forward(np.array([[x]]))[0] == pytest.approx(expected, rel=1e-15)


def test_batch_preserves_order(make_model):
    m = make_model(seed=2)
    x = np.random.default_rng(3).normal(size=(7, 2))
    full = m.median_forward(x)
    # BLAS may round differently for another row layout; order is what matters
    assert np.allclose(full[::-1], m.median_forward(x[::-1]), rtol=1e-14, atol=1e-15)
    assert np.allclose(full[2:3], m.median_forward(x[2:3]), rtol=1e-14, atol=1e-15)


def test_zero_injection_makes_heads_constant(make_model):
    m = make_model(seed=4)
    for k in m.params:
        if "_inj" in k:
            m.params[k][:] = 0.0
    x = np.random.default_rng(5).normal(size=(6, 2))
    med = m.median_forward(x)
    for tau in (0.1, 0.5, 0.9):
        assert np.array_equal(m.q_forward(tau, x), med)
    eta = [m.f_forward(v, x)[0] for v in (-1.0, 0.0, 2.0)]
    assert np.array_equal(eta[0], eta[1]) and np.array_equal(eta[1], eta[2])


def test_injection_bias_offsets_all_taus_equally(make_model):
    m = make_model(seed=6)
    for k in m.params:
        if k.startswith("q_inj") and k.endswith(".W"):
            m.params[k][:] = 0.0
    x = np.random.default_rng(7).normal(size=(6, 2))
    assert np.array_equal(m.q_forward(0.2, x), m.q_forward(0.8, x))


def test_tau_changes_output_through_injection(make_model):
    m = make_model(seed=8)
    x = np.random.default_rng(9).normal(size=(4, 2))
    assert not np.allclose(m.q_forward(0.2, x), m.q_forward(0.8, x))


@pytest.mark.parametrize("tau", [0.0, 1.0, -0.1, 1.5, np.nan])
def test_tau_outside_unit_interval_rejected(make_model, tau):
    with pytest.raises(GraphError):
        make_model().q_forward(tau, np.zeros((1, 2)))


def test_sampled_tau_clipped_not_rejected(make_model):
    m = make_model()
    x = np.zeros((1, 2))
    assert m.q_forward(1e-9, x)[0] == m.q_forward(1e-4, x)[0]


def test_cdf_sigmoid_centre_and_saturation():
    m = zero_model(ArchSpec(1, [2], [2]))
    eta, p = m.f_forward(0.3, np.zeros((1, 1)))
    assert eta[0] == 0.0 and p[0] == 0.5
    m.params["out.b"][:] = 40.0
    _, p = m.f_forward(0.3, np.zeros((1, 1)))
    mpmath.mp.dps = 60
    ref = 1 / (1 + mpmath.e ** -40)
    assert p[0] < 1.0 and abs(p[0] - 1.0) < 1e-12
    assert abs(mpmath.mpf(p[0]) - ref) < 1e-15
    m.params["out.b"][:] = 800.0
    _, p = m.f_forward(0.3, np.zeros((1, 1)))
    assert 0.0 < p[0] < 1.0
    m.params["out.b"][:] = -800.0
    _, p = m.f_forward(0.3, np.zeros((1, 1)))
    assert 0.0 < p[0] < 1.0


def test_cdf_constant_when_y_injection_weights_zero(make_model):
    m = make_model(seed=10)
    for k in m.params:
        if k.startswith("f_inj") and k.endswith(".W"):
            m.params[k][:] = 0.0
    x = np.random.default_rng(11).normal(size=(5, 2))
    assert np.array_equal(m.f_forward(-3.0, x)[1], m.f_forward(3.0, x)[1])


def test_cdf_rejects_non_finite(make_model):
    with pytest.raises(GraphError):
        make_model().f_forward(np.inf, np.zeros((1, 2)))


def test_wrong_feature_dimension(make_model):
    with pytest.raises(GraphError, match="2 columns"):
        make_model().median_forward(np.zeros((3, 5)))


def test_shared_backbone(make_model):
    m = make_model(seed=12)
    x = np.random.default_rng(13).normal(size=(4, 2))
    before = (m.median_forward(x), m.q_forward(0.3, x), m.f_forward(0.1, x)[0])
    m.params["feat0.W"][0, 0] += 0.5
    after = (m.median_forward(x), m.q_forward(0.3, x), m.f_forward(0.1, x)[0])
    for a, b in zip(before, after):
        assert not np.allclose(a, b)


@pytest.mark.parametrize("injection", ["linear", "mlp"])
def test_save_load_roundtrip_is_exact(tmp_path, make_model, injection):
    m = make_model(seed=14, injection=injection)
    m.stats = Standardization([0.5, -1.0], [2.0, 0.3], 1.5, 2.5, -1.7, 2.1, ["a", "b"])
    path = m.save(tmp_path / "m.ddr")
    back = DdrModel.load(path)
    x = np.random.default_rng(15).normal(size=(1000, 2))
    tau = np.random.default_rng(16).uniform(0.01, 0.99, 1000)
    assert np.array_equal(back.median_forward(x), m.median_forward(x))
    assert np.array_equal(back.q_forward(tau, x), m.q_forward(tau, x))
    assert np.array_equal(back.f_forward(tau, x)[0], m.f_forward(tau, x)[0])
    assert back.stats.to_dict() == m.stats.to_dict()
    assert isinstance(load_model(path), DdrModel)
    assert not (tmp_path / "m.ddr.tmp").exists()


def test_truncated_file_rejected(tmp_path, make_model):
    path = make_model().save(tmp_path / "m.ddr")
    text = path.read_text() if hasattr(path, "read_text") else open(path).read()
    with open(path, "w") as fh:
        fh.write(text[: len(text) // 2])
    with pytest.raises(ModelFormatError):
        DdrModel.load(path)
    with pytest.raises(ModelFormatError):
        load_model(path)


def test_other_architecture_rejected(tmp_path, make_model):
    path = make_model(widths=(4, 4)).save(tmp_path / "m.ddr")
    with pytest.raises(IncompatibleModelError):
        DdrModel.load(path, arch=ArchSpec(2, [8, 8], [4]))


def test_version_and_shape_corruption(tmp_path, make_model):
    path = make_model().save(tmp_path / "m.ddr")
    doc = json.load(open(path))
    doc["format_version"] = 99
    json.dump(doc, open(tmp_path / "v.ddr", "w"))
    with pytest.raises(ModelFormatError, match="format_version"):
        DdrModel.load(tmp_path / "v.ddr")
    doc["format_version"] = 1
    doc["params"][0]["rows"] += 1
    json.dump(doc, open(tmp_path / "s.ddr", "w"))
    with pytest.raises(ModelFormatError):
        DdrModel.load(tmp_path / "s.ddr")


def test_fixed_net_roundtrip(tmp_path):
    arch = ArchSpec(2, [4], [4], output_dim=3)
    net = FixedQuantileNet.initialize(arch, np.random.default_rng(0), (0.1, 0.5, 0.9))
    path = net.save(tmp_path / "f.ddr")
    back = load_model(path)
    x = np.random.default_rng(1).normal(size=(20, 2))
    assert np.array_equal(back.predict_all(x), net.predict_all(x))
    assert np.array_equal(back.q_forward(0.5, x), net.predict_all(x)[:, 1])
    with pytest.raises(GraphError):
        back.q_forward(0.3, x)
