import numpy as np
import pytest

from gruvd import tensor as T
from gruvd.backbone import ConfigError, ConvBlockSpec, build_backbone, parameter_count
from gruvd.tensor import ShapeError, Tensor


def closed_form_plain(cin, h, cout, blocks, k=3):
    return cin * h * k * k + h + (blocks - 1) * (h * h * k * k + h) + h * cout * k * k + cout


@pytest.mark.parametrize("cin,h,cout,blocks", [(2, 8, 1, 2), (3, 16, 1, 3), (4, 4, 3, 1), (12, 96, 3, 12)])
def test_plain_parameter_count(cin, h, cout, blocks):
    spec = ConvBlockSpec(cin, h, cout, blocks, "plain", "sigmoid")
    expected = closed_form_plain(cin, h, cout, blocks)
    assert parameter_count(spec) == expected
    if h <= 16:
        assert build_backbone(spec, seed=0).num_parameters() == expected


def test_distill_parameter_count():
    spec = ConvBlockSpec(3, 16, 1, 3, "distill", "relu")
    # by hand: head + 2 * (conv1 16->16, conv2 12->12, fuse 1x1 16->16) + tail
    block = (16 * 16 * 9 + 16) + (12 * 12 * 9 + 12) + (16 * 16 + 16)
    expected = (3 * 16 * 9 + 16) + 2 * block + (16 * 9 + 1)
    assert parameter_count(spec) == expected
    assert build_backbone(spec, seed=0).num_parameters() == expected


@pytest.mark.parametrize("kind", ["plain", "distill"])
def test_sigmoid_range_and_shape(kind, rng):
    net = build_backbone(ConvBlockSpec(2, 8, 1, 2, kind, "sigmoid"), seed=3)
    x = Tensor(rng.standard_normal((2, 2, 7, 5)).astype(np.float32))
    y = net(x).data
    assert y.shape == (2, 1, 7, 5)
    assert np.all((y > 0) & (y < 1))


def test_relu_output_nonnegative(rng):
    net = build_backbone(ConvBlockSpec(3, 8, 2, 3, "plain", "relu"), seed=1)
    y = net(Tensor(rng.standard_normal((1, 3, 9, 9)))).data
    assert y.shape == (1, 2, 9, 9) and np.all(y >= 0)


def test_determinism():
    spec = ConvBlockSpec(2, 8, 1, 2)
    a = build_backbone(spec, seed=11).state_dict()
    b = build_backbone(spec, seed=11).state_dict()
    c = build_backbone(spec, seed=12).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_degenerate_parameters():
    net = build_backbone(ConvBlockSpec(2, 4, 1, 2, "plain", "none"), seed=0)
    for p in net.parameters:
        p.data[...] = 0
    net.params["tail.b"].data[...] = 0.37
    x = Tensor(np.random.default_rng(0).standard_normal((1, 2, 5, 5)).astype(np.float32))
    np.testing.assert_array_equal(net(x).data, np.full((1, 1, 5, 5), 0.37, dtype=np.float32))

    net = build_backbone(ConvBlockSpec(2, 4, 1, 2, "plain", "sigmoid"), seed=0)
    for p in net.parameters:
        p.data[...] = 0
    np.testing.assert_array_equal(net(x).data, 0.5)


def test_channel_mismatch_names_gate():
    net = build_backbone(ConvBlockSpec(4, 4, 1, 1), seed=0, name="update")
    with pytest.raises(ShapeError, match="update"):
        net(Tensor(np.zeros((1, 3, 5, 5))))


@pytest.mark.parametrize("bad", [
    dict(in_channels=0), dict(hidden_channels=0), dict(num_blocks=0),
    dict(block_kind="imdb"), dict(final_activation="softmax"),
])
def test_invalid_spec(bad):
    kw = dict(in_channels=2, hidden_channels=4, out_channels=1, num_blocks=1)
    kw.update(bad)
    with pytest.raises(ConfigError):
        build_backbone(ConvBlockSpec(**kw), seed=0)


@pytest.mark.parametrize("kind", ["plain", "distill"])
def test_backbone_gradients(kind, rng):
    net = build_backbone(ConvBlockSpec(2, 4, 1, 2, kind, "sigmoid"), seed=5, dtype=np.float64)
    x = Tensor(rng.standard_normal((1, 2, 5, 5)))
    for name, p in net.named_parameters():
        def f(t, name=name):
            saved = net.params[name]
            net.params[name] = t
            try:
                return T.sum_(net(x) * net(x))
            finally:
                net.params[name] = saved

        assert T.finite_difference_check(f, Tensor(p.data)) < 1e-5, name
    assert T.finite_difference_check(lambda t: T.sum_(net(t)), Tensor(x.data)) < 1e-5
