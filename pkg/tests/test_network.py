import numpy as np
import pytest

from scn.exceptions import ConfigError, FormatError
from scn.network import (LAMBDA1_FLOOR, MAGIC, BottleneckConfig, NetworkConfig,
                         apply_weight_decay_and_project, build_scn, cifar_config,
                         load_checkpoint, mnist_config, read_checkpoint, round_to_storage,
                         save_checkpoint, scn_config)
from scn.solver import TIGHT_SOLVER, check_kkt
from scn.layers import extract_patches


def tiny_config(**kw):
    return scn_config(2, sections=((2, 1), (4, 1)), input_shape=(1, 8, 8), num_classes=3, **kw)


def _count_formula(cfg):
    """Independent count: dictionaries + lambda1 + BN scale/shift + classifier."""
    total, C = 0, cfg.input_shape[0]
    for sec in cfg.sections:
        for _ in range(sec.repeat):
            for w in (sec.expansion_width, sec.reduction_width):
                total += 9 * C * w + 1 + 2 * w
                C = w
    return total + C * cfg.num_classes + cfg.num_classes


@pytest.mark.parametrize("width,expected", [(1, 0.17e6), (2, 0.35e6), (4, 0.69e6)])
def test_cifar_parameter_counts(width, expected):
    net = build_scn(cifar_config(width))
    n = net.num_parameters()
    assert n == _count_formula(net.cfg)
    assert abs(n - expected) <= 0.10 * expected
    assert net.layer_counts() == (14, 1)


def test_cifar100_head_only_changes_classifier():
    a = build_scn(cifar_config(4, num_classes=10)).num_parameters()
    b = build_scn(cifar_config(4, num_classes=100)).num_parameters()
    assert b - a == 90 * 64 + 90      # modules end on the 64-wide reduction layer


def test_mnist_first_layer_width():
    cfg = mnist_config(width=4, first_layer_channels=8)
    assert cfg.sections[0].expansion_width == 8
    assert cfg.sections[0].reduction_width == 2
    net = build_scn(cfg)
    assert net.sc_layers[0].D.shape == (9, 8)


def test_registry_names_and_decay_targets():
    net = build_scn(tiny_config())
    names = list(net.parameters())
    assert names[:4] == ["sc0.D", "sc0.lambda1", "bn0.scale", "bn0.shift"]
    assert names[-2:] == ["fc.weight", "fc.bias"]
    assert "bn0.running_mean" in net.buffers()


def test_same_seed_same_network():
    a = build_scn(tiny_config(), seed=5)
    b = build_scn(tiny_config(), seed=5)
    c = build_scn(tiny_config(), seed=6)
    for (k, u), v in zip(a.state_arrays().items(), b.state_arrays().values()):
        assert np.array_equal(u, v), k
    assert not np.array_equal(a.parameters()["sc0.D"], c.parameters()["sc0.D"])


def test_zero_image_gives_bias_logits_in_eval():
    # zero input -> zero codes everywhere; with fresh BN stats the output of
    # each BN is shift - mean/sqrt(var+eps) = 0, so logits equal the bias.
    net = build_scn(tiny_config())
    net.parameters()["fc.bias"][:] = [0.5, -1.0, 2.0]
    logits, _ = net.forward(np.zeros((2, 1, 8, 8)))
    np.testing.assert_allclose(logits, [[0.5, -1.0, 2.0]] * 2, atol=1e-12)


def test_eval_is_repeatable_and_does_not_touch_state():
    net = build_scn(tiny_config())
    x = np.random.default_rng(0).standard_normal((3, 1, 8, 8))
    before = {k: v.copy() for k, v in net.state_arrays().items()}
    a, _ = net.forward(x)
    b, _ = net.forward(x)
    assert np.array_equal(a, b)
    for k, v in net.state_arrays().items():
        assert np.array_equal(before[k], v), k


def test_train_forward_updates_running_stats_only_when_asked():
    net = build_scn(tiny_config())
    x = np.random.default_rng(1).standard_normal((3, 1, 8, 8))
    rm = net.buffers()["bn0.running_mean"]
    net.forward(x, train=True, update_state=False)
    assert not rm.any()
    net.forward(x, train=True)
    assert rm.any()


def test_sc_layer_outputs_satisfy_kkt_on_tight_solver():
    cfg = tiny_config(**TIGHT_SOLVER)
    net = build_scn(cfg, seed=3)
    x = np.random.default_rng(3).standard_normal((2, 1, 8, 8))
    _, layer = net.layers[0]
    out, _ = layer.forward(x)
    cols = extract_patches(x, 3)
    codes = out.transpose(1, 0, 2, 3).reshape(out.shape[1], -1)
    p = layer.solver_params()
    worst = max(check_kkt(layer.D, cols[:, j], p, codes[:, j]) for j in range(cols.shape[1]))
    assert worst <= 1e-8


def test_weight_decay_with_zero_gradient_is_pure_shrink():
    net = build_scn(tiny_config())
    params = net.parameters()
    before = {k: v.copy() for k, v in params.items()}
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    mu, rho = 5e-4, 0.1
    apply_weight_decay_and_project(params, grads, mu, rho)
    for k, v in params.items():
        if k.endswith(".D") or k.endswith(".lambda1") or k == "fc.weight":
            np.testing.assert_allclose(v, (1 - rho * mu) * before[k], rtol=1e-15)
        else:
            assert np.array_equal(v, before[k]), k


def test_lambda1_projection_floor():
    params = {"sc0.lambda1": np.array(0.01), "sc0.D": np.ones((2, 2))}
    grads = {"sc0.lambda1": np.array(10.0), "sc0.D": np.zeros((2, 2))}
    apply_weight_decay_and_project(params, grads, mu=0.0, rho=1.0)
    assert float(params["sc0.lambda1"]) == LAMBDA1_FLOOR
    np.testing.assert_array_equal(params["sc0.D"], np.ones((2, 2)))


def test_plain_step_on_bias():
    params = {"fc.bias": np.array([1.0, 2.0])}
    apply_weight_decay_and_project(params, {"fc.bias": np.array([1.0, -1.0])}, mu=1.0, rho=0.5)
    np.testing.assert_allclose(params["fc.bias"], [0.5, 2.5])


@pytest.mark.parametrize("bad", [
    dict(sections=()),
    dict(sections=(BottleneckConfig(4, 2),)),
    dict(sections=(BottleneckConfig(0, 2),)),
    dict(sections=(BottleneckConfig(2, 4, repeat=0),)),
    dict(sections=(BottleneckConfig(2, 4),), lambda1=0.0),
    dict(sections=(BottleneckConfig(2, 4),), num_classes=1),
    dict(sections=(BottleneckConfig(2, 4),), model="resnet"),
    dict(sections=(BottleneckConfig(2, 4, stride_at_first=True),), input_shape=(1, 1, 1)),
])
def test_invalid_configs_are_rejected(bad):
    cfg = NetworkConfig(**{"input_shape": (1, 8, 8), **bad})
    with pytest.raises(ConfigError):
        cfg.validate()


def test_invalid_config_message_names_the_layer():
    cfg = NetworkConfig((BottleneckConfig(2, 4), BottleneckConfig(8, 4)), input_shape=(1, 8, 8))
    with pytest.raises(ConfigError, match="section 2 expansion"):
        cfg.validate()


def test_config_dict_round_trip():
    cfg = tiny_config()
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg


def test_checkpoint_round_trip(tmp_path):
    net = build_scn(tiny_config(), seed=2)
    x = np.random.default_rng(2).standard_normal((4, 1, 8, 8))
    net.forward(x, train=True)
    round_to_storage(net)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, net, meta={"epoch": 3})
    loaded, manifest = load_checkpoint(path, expected=tiny_config())
    assert manifest["meta"] == {"epoch": 3}
    for (k, u), v in zip(net.state_arrays().items(), loaded.state_arrays().values()):
        assert np.array_equal(u, v), k
    assert np.array_equal(net.forward(x)[0], loaded.forward(x)[0])


def test_checkpoint_starts_with_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, build_scn(tiny_config()))
    assert path.read_bytes()[:4] == MAGIC


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, build_scn(tiny_config()))
    data = bytearray(path.read_bytes())
    data[0] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="magic"):
        read_checkpoint(path)


@pytest.mark.parametrize("cut", [2, 6, 40, -1])
def test_checkpoint_truncation(tmp_path, cut):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, build_scn(tiny_config()))
    data = path.read_bytes()
    path.write_bytes(data[:cut] if cut > 0 else data[:cut])
    with pytest.raises(FormatError, match="offset"):
        read_checkpoint(path)


def test_checkpoint_trailing_bytes(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, build_scn(tiny_config()))
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        read_checkpoint(path)


def test_checkpoint_architecture_mismatch_names_keys(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, build_scn(tiny_config()))
    other = scn_config(2, sections=((2, 1), (4, 1)), input_shape=(1, 8, 8), num_classes=5)
    with pytest.raises(ConfigError, match="num_classes"):
        load_checkpoint(path, expected=other)


def test_linear_model():
    cfg = NetworkConfig((), input_shape=(1, 4, 4), num_classes=3, model="linear")
    net = build_scn(cfg)
    assert net.num_parameters() == 16 * 3 + 3
    assert net.layer_counts() == (0, 1)
    logits, _ = net.forward(np.zeros((2, 1, 4, 4)))
    assert logits.shape == (2, 3)
