import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lpnet import tensor_ops as T
from lpnet.errors import ConfigError, DataError, ShapeError
from lpnet.model import (PAPER_PARAM_COUNT, LPNet, NetworkConfig, apply_attention,
                         load_checkpoint, param_count, save_checkpoint)
from lpnet.tensor_ops import Tensor

TINY = NetworkConfig(global_widths=(3, 4), attention_widths=(3, 1), branch_width=2,
                     subnet_widths=(3, 1), patch=8, stride=4, image_size=16)


def test_default_param_count():
    n = param_count(NetworkConfig())
    assert n == 881_804
    assert abs(n - PAPER_PARAM_COUNT) / PAPER_PARAM_COUNT < 0.2


def test_default_count_matches_instantiated_model():
    assert LPNet(NetworkConfig(), dtype=np.float32).num_parameters() == 881_804


@settings(max_examples=15, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=3),
       st.lists(st.integers(1, 5), min_size=0, max_size=2),
       st.integers(1, 3), st.lists(st.integers(1, 4), min_size=0, max_size=2),
       st.none() | st.integers(1, 4))
def test_param_count_formula(gw, aw, bw, sw, deconv):
    cfg = NetworkConfig(global_widths=gw, attention_widths=aw + [1], branch_width=bw,
                        subnet_widths=sw + [1], deconv_channels=deconv, patch=8, stride=4,
                        image_size=16)
    assert param_count(cfg) == LPNet(cfg).num_parameters()


@pytest.mark.parametrize("kw", [{"attention_widths": (4, 2)}, {"subnet_widths": (2,)},
                                {"patch": 9, "stride": 3, "image_size": 18},
                                {"patch": 30, "stride": 7}, {"global_widths": ()}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        NetworkConfig(**kw)


def test_config_dict_round_trip():
    cfg = TINY.replace(branch_width=5)
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        NetworkConfig.from_dict({"widths": 3})


def test_forward_shapes_and_ranges():
    model = LPNet(TINY, seed=1)
    x = np.random.default_rng(0).random((2, 1, 16, 16))
    out = model.forward(x)
    assert out.atn_d.shape == (2, 1, 16, 16)
    assert out.patch_likelihoods.shape == (2 * 9, 1, 8, 8)
    assert out.confidence.shape == (2, 1, 16, 16)
    assert np.all((out.confidence.data > 0) & (out.confidence.data < 1))
    np.testing.assert_allclose(out.atn_d.data.sum(axis=(1, 2, 3)), 1.0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_attention_density_sums_to_one(seed):
    model = LPNet(TINY, seed=seed, dtype=np.float32)
    x = np.random.default_rng(seed).random((16, 16)).astype(np.float32)
    d = model.attention_density(model.global_features(x)).data
    assert d.min() >= 0
    assert abs(float(d.sum(dtype=np.float64)) - 1) < 1e-6


def test_predict_unbatched_and_eval_mode():
    model = LPNet(TINY, seed=2)
    img = np.random.default_rng(1).random((16, 16))
    conf = model.predict(img)
    assert conf.shape == (16, 16)
    assert model.training
    np.testing.assert_array_equal(model.predict(Tensor(img)), conf)
    assert model.predict(img[None]).shape == (1, 16, 16)


def test_predict_is_per_image_in_eval_mode():
    model = LPNet(TINY, seed=3)
    rng = np.random.default_rng(2)
    a, b = rng.random((16, 16)), rng.random((16, 16))
    both = model.predict(np.stack([a, b])[:, None])
    np.testing.assert_allclose(both[0], model.predict(a), atol=1e-12)


def test_bad_input_channels():
    with pytest.raises(ShapeError):
        LPNet(TINY).forward(np.zeros((1, 2, 16, 16)))


def test_non_divisible_image():
    with pytest.raises(ConfigError):
        LPNet(TINY).forward(np.zeros((1, 1, 17, 17)))


def test_apply_attention_broadcast():
    f = Tensor(np.ones((1, 3, 2, 2)))
    d = Tensor(np.array([[[[0.1, 0.2], [0.3, 0.4]]]]))
    out = apply_attention(f, d).data
    np.testing.assert_allclose(out[0, 2], [[0.1, 0.2], [0.3, 0.4]])
    with pytest.raises(ShapeError):
        apply_attention(f, Tensor(np.ones((1, 2, 2, 2))))


def test_checkpoint_round_trip(tmp_path):
    model = LPNet(TINY, seed=4)
    # move the BN statistics away from their initial values
    model.forward(np.random.default_rng(0).random((2, 1, 16, 16)))
    path = tmp_path / "m.npz"
    save_checkpoint(path, model, extra={"step": 7}, arrays={"foo": np.arange(3)})
    loaded, meta, extras = load_checkpoint(path, TINY)
    assert meta["extra"]["step"] == 7
    np.testing.assert_array_equal(extras["foo"], np.arange(3))
    for (k, a), (_, b) in zip(sorted(model.state_dict().items()),
                              sorted(loaded.state_dict().items())):
        np.testing.assert_array_equal(a, b, err_msg=k)
    img = np.random.default_rng(5).random((16, 16))
    np.testing.assert_array_equal(model.predict(img), loaded.predict(img))


def test_checkpoint_config_mismatch(tmp_path):
    path = tmp_path / "m.npz"
    save_checkpoint(path, LPNet(TINY))
    with pytest.raises(ConfigError):
        load_checkpoint(path, TINY.replace(branch_width=3))


def test_checkpoint_garbage(tmp_path):
    path = tmp_path / "bad.npz"
    path.write_bytes(b"junk")
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_float32_forward_dtype():
    model = LPNet(TINY, dtype=np.float32)
    out = model.forward(np.zeros((1, 1, 16, 16)))
    assert out.confidence.dtype == np.float32


def test_network_is_differentiable_end_to_end():
    from lpnet.gradcheck import check_network
    rep = check_network(seed=0, max_entries=2)
    assert rep.passed, rep.to_dict()


def test_no_grad_builds_no_graph():
    model = LPNet(TINY)
    with T.no_grad():
        out = model.forward(np.zeros((1, 1, 16, 16)))
    assert out.confidence._parents == ()
