import numpy as np
import pytest

from deepcolor import net as N
from deepcolor import tensor as T
from deepcolor.tensor import Tensor


def test_param_count_small_config():
    # stem 4*1*9+4, down 8*4*9+8, bottom 8*8*9+8, up 8*4*4+4, dec 4*8*9+4, head 3*4+3
    cfg = N.NetConfig(depth=1, base_channels=4, colors=3, input_channels=1)
    assert N.build(cfg, 0).count() == 40 + 296 + 584 + 132 + 292 + 15 == 1359


def test_output_is_a_distribution_of_input_size():
    p = N.build(N.NetConfig(depth=2, base_channels=4, colors=5), 1)
    x = np.random.default_rng(0).uniform(size=(2, 1, 16, 12))
    y = N.forward(p, x).data
    assert y.shape == (2, 5, 16, 12)
    assert np.all(y > 0)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)


def test_single_image_and_batch_agree():
    p = N.build(N.NetConfig(depth=2, base_channels=4, colors=4), 2)
    x = np.random.default_rng(1).uniform(size=(3, 1, 8, 8))
    batch = N.forward(p, x).data
    for i in range(3):
        np.testing.assert_allclose(N.forward(p, x[i]).data, batch[i], rtol=0, atol=1e-14)


def test_build_is_seeded():
    cfg = N.NetConfig(depth=2, base_channels=4)
    a, b, c = N.build(cfg, 5), N.build(cfg, 5), N.build(cfg, 6)
    for name in a.tensors:
        assert a[name].data.tobytes() == b[name].data.tobytes()
    assert any(a[n].data.tobytes() != c[n].data.tobytes() for n in a.tensors if n.endswith("weight"))


def test_forward_is_bit_identical_across_calls():
    p = N.build(N.NetConfig(depth=2, base_channels=4), 3)
    x = np.random.default_rng(2).uniform(size=(2, 1, 16, 16))
    assert N.forward(p, x).data.tobytes() == N.forward(p, x).data.tobytes()


def test_he_initialization_scale():
    p = N.build(N.NetConfig(depth=1, base_channels=32, colors=9), 0)
    w = p["dec0.weight"].data
    assert w.std() == pytest.approx(np.sqrt(2.0 / (64 * 9)), rel=0.05)
    assert not p["dec0.bias"].data.any()


@pytest.mark.parametrize("shape", [(1, 15, 16), (1, 16, 6)])
def test_rejects_sizes_not_divisible(shape):
    p = N.build(N.NetConfig(depth=2, base_channels=4), 0)
    with pytest.raises(T.ShapeError, match=r"divisible by 2\*\*depth = 4"):
        N.forward(p, np.zeros(shape))


def test_rejects_wrong_channel_count():
    p = N.build(N.NetConfig(depth=1, base_channels=4, input_channels=3), 0)
    with pytest.raises(T.ShapeError, match="3"):
        N.forward(p, np.zeros((1, 8, 8)))


@pytest.mark.parametrize("bad", [dict(depth=0), dict(colors=1), dict(base_channels=0), dict(kernel_size=2)])
def test_config_validation(bad):
    with pytest.raises(N.ConfigError):
        N.NetConfig(**bad).validate()


def test_config_round_trip():
    cfg = N.NetConfig(depth=2, base_channels=6, colors=7, input_channels=3, use_batchnorm=True)
    assert N.NetConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("depth", [1, 2])
def test_receptive_field_contains_every_dependency(depth):
    """Perturb one input pixel at several positions; changed outputs stay within the bound."""
    cfg = N.NetConfig(depth=depth, base_channels=2, colors=3)
    p = N.build(cfg, 7)
    # positive weights everywhere keep every ReLU active so influence is never masked
    for name, t in p.tensors.items():
        t.data = np.abs(t.data) + (0.01 if name.endswith("bias") else 0.0)
    before, after = N.receptive_field(cfg)
    size = 8 * (before + after + 4)
    size += (-size) % (1 << depth)
    x = np.zeros((1, size, size))
    base = N.forward(p, x).data
    seen_before = seen_after = 0
    for q in range(size // 2, size // 2 + (1 << depth)):
        xp = x.copy()
        xp[0, q, q] = 1.0
        changed = np.any(np.abs(N.forward(p, xp).data - base) > 0, axis=0)
        rows = np.flatnonzero(changed.any(axis=1))
        # output row r depends on input rows r - before .. r + after
        assert rows.min() >= q - after and rows.max() <= q + before
        seen_after = max(seen_after, q - rows.min())
        seen_before = max(seen_before, rows.max() - q)
    assert (seen_before, seen_after) == (before, after)


def test_batchnorm_updates_running_stats_only_in_training():
    cfg = N.NetConfig(depth=1, base_channels=4, use_batchnorm=True)
    p = N.build(cfg, 0)
    x = np.random.default_rng(0).uniform(size=(2, 1, 8, 8))
    N.forward(p, x, training=False)
    assert not p.buffers["stem.bn_mean"].any()
    N.forward(p, x, training=True)
    assert p.buffers["stem.bn_mean"].any()


def test_full_network_gradient_check():
    cfg = N.NetConfig(depth=1, base_channels=2, colors=3)
    p = N.build(cfg, 4)
    x = np.random.default_rng(3).uniform(size=(1, 1, 4, 4))
    g = np.random.default_rng(4).normal(size=(1, 3, 4, 4))
    out = (N.forward(p, x) * Tensor(g)).sum()
    out.backward()
    for name in ("head.weight", "stem.bias", "up0.weight"):
        t = p[name]
        analytic = t.grad.copy()
        num = T.numerical_grad(lambda: (N.forward(p, x) * Tensor(g)).sum().item(), t.data)
        np.testing.assert_allclose(analytic, num, rtol=1e-4, atol=1e-8)
