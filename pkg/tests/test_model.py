import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import np_forward, reference_logits, unrolled_running_stat
from fedleak.model import (
    ArchSpec,
    ModelError,
    bn_update,
    forward,
    functional_forward,
    init_state,
    load_state,
    loss_and_grads,
    param_shapes,
    per_example_grads,
    save_state,
    to_torch,
)


def test_eval_bn_identity_scaling():
    arch = ArchSpec(image_size=4, widths=(2,), pool_blocks=0, activation="relu")
    state = init_state(arch, seed=0)
    x = np.random.default_rng(1).random((3, 4, 4, 1))
    h = torch.nn.functional.conv2d(torch.tensor(x).permute(0, 3, 1, 2), torch.tensor(state.params["layer0.weight"]), padding=1)
    expected = torch.relu(h / np.sqrt(1 + 1e-5)).flatten(1).numpy()
    expected = expected @ state.params["layer1.weight"].T + state.params["layer1.bias"]
    logits, stats = forward(state, x, "eval")
    assert stats == []
    np.testing.assert_allclose(logits, expected, rtol=1e-12, atol=1e-12)


def test_constant_batch_zero_variance():
    x = np.full((4, 8, 8, 1), 0.5)
    # a centre-tap kernel sidesteps the zero padding, so the conv output is constant too
    arch = ArchSpec(image_size=8, widths=(3,), pool="avg", activation="gelu")
    state = init_state(arch, seed=0)
    params = to_torch(state.params)
    params["layer0.weight"] = torch.zeros_like(params["layer0.weight"])
    params["layer0.weight"][:, :, 1, 1] = 1.0
    _, stats = functional_forward(arch, params, to_torch(state.buffers), torch.tensor(x), "train")
    assert torch.all(stats[0][1] == 0)
    assert torch.all(stats[0][0] == 0.5)


@pytest.mark.parametrize("activation,pool", [("gelu", "avg"), ("relu", "max"), ("relu", "avg")])
@pytest.mark.parametrize("mode", ["train", "eval"])
def test_forward_matches_hand_rolled(activation, pool, mode):
    arch = ArchSpec(image_size=6, widths=(3, 2), pool=pool, activation=activation)
    state = init_state(arch, seed=4)
    rng = np.random.default_rng(0)
    state = state.replace(
        params={k: v + rng.normal(0, 0.1, v.shape) for k, v in state.params.items()},
        buffers={k: np.abs(v + rng.normal(0, 0.2, v.shape)) for k, v in state.buffers.items()},
    )
    x = rng.random((5, 6, 6, 1))
    logits, _ = forward(state, x, mode)
    np.testing.assert_allclose(logits, np_forward(state, x, mode), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(logits, reference_logits(state, x, mode), rtol=1e-10, atol=1e-12)


def test_train_mode_ignores_running_stats(tiny_state):
    x = np.random.default_rng(0).random((3, 8, 8, 1))
    a, _ = forward(tiny_state, x, "train")
    other = tiny_state.replace(buffers={k: v + 5.0 for k, v in tiny_state.buffers.items()})
    b, _ = forward(other, x, "train")
    assert np.array_equal(a, b)
    c, _ = forward(other, x, "eval")
    assert not np.allclose(a, c)


def test_bn_update_examples():
    layers = ["l"]
    buf = {"l.running_mean": np.zeros(1), "l.running_var": np.ones(1)}
    out = bn_update(buf, [(np.ones(1), np.ones(1))], 0.1, layers)
    assert out["l.running_mean"][0] == pytest.approx(0.1, abs=1e-15)
    same = bn_update(buf, [(np.zeros(1), np.ones(1))], 0.1, layers)
    assert np.array_equal(same["l.running_mean"], buf["l.running_mean"])
    assert np.array_equal(same["l.running_var"], buf["l.running_var"])
    with pytest.raises(ModelError):
        bn_update(buf, [(np.ones(1), -np.ones(1))], 0.1, layers)
    with pytest.raises(ModelError):
        bn_update(buf, [], 0.1, layers)


def test_bn_five_batches_match_unrolled_oracle():
    rng = np.random.default_rng(3)
    layers = ["a", "b"]
    buf = {f"{l}.{k}": rng.random(4) for l in layers for k in ("running_mean", "running_var")}
    stats = [[(rng.normal(size=4), rng.random(4)) for _ in layers] for _ in range(5)]
    cur = buf
    for s in stats:
        cur = bn_update(cur, s, 0.1, layers)
    for li, l in enumerate(layers):
        np.testing.assert_allclose(cur[f"{l}.running_mean"], unrolled_running_stat(buf[f"{l}.running_mean"], [s[li][0] for s in stats], 0.1), rtol=0, atol=1e-12)
        np.testing.assert_allclose(cur[f"{l}.running_var"], unrolled_running_stat(buf[f"{l}.running_var"], [s[li][1] for s in stats], 0.1), rtol=0, atol=1e-12)


def test_confident_logits_give_tiny_loss():
    arch = ArchSpec(image_size=2, widths=(1,), pool_blocks=0, activation="gelu")
    state = init_state(arch, seed=0)
    params = dict(state.params)
    params["layer1.weight"] = np.zeros_like(params["layer1.weight"])
    params["layer1.bias"] = np.array([60.0, -60.0])
    loss, grads = loss_and_grads(state.replace(params=params), (np.random.default_rng(0).random((2, 2, 2, 1)), np.array([0, 0])))
    assert loss < 1e-40
    assert max(float(np.abs(g).max()) for g in grads.values()) < 1e-40


def test_gradients_match_finite_differences():
    arch = ArchSpec(image_size=2, widths=(1,), pool_blocks=0, activation="gelu")
    state = init_state(arch, seed=1)
    rng = np.random.default_rng(2)
    batch = (rng.random((3, 2, 2, 1)), np.array([0, 1, 1]))
    _, grads = loss_and_grads(state, batch)
    h = 1e-6
    for name, value in state.params.items():
        for idx in np.ndindex(value.shape):
            plus, minus = value.copy(), value.copy()
            plus[idx] += h
            minus[idx] -= h
            lp, _ = loss_and_grads(state.replace(params={**state.params, name: plus}), batch)
            lm, _ = loss_and_grads(state.replace(params={**state.params, name: minus}), batch)
            fd = (lp - lm) / (2 * h)
            assert grads[name][idx] == pytest.approx(fd, rel=1e-4, abs=1e-8), (name, idx)


def test_duplicated_batch_same_gradient(tiny_state):
    # BN statistics are invariant to duplicating every sample, so the mean gradient is too
    rng = np.random.default_rng(0)
    x, y = rng.random((3, 8, 8, 1)), np.array([0, 1, 0])
    _, g1 = loss_and_grads(tiny_state, (x, y))
    _, g2 = loss_and_grads(tiny_state, (np.concatenate([x, x]), np.concatenate([y, y])))
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-9, atol=1e-13)


def test_soft_labels_equal_hard_when_one_hot(tiny_state):
    rng = np.random.default_rng(0)
    x, y = rng.random((2, 8, 8, 1)), np.array([1, 0])
    la, ga = loss_and_grads(tiny_state, (x, y))
    lb, gb = loss_and_grads(tiny_state, (x, np.eye(2)[y]))
    assert la == pytest.approx(lb, rel=1e-14)
    for k in ga:
        np.testing.assert_allclose(ga[k], gb[k], rtol=1e-12, atol=1e-15)


def test_per_example_mean_equals_batch(tiny_state):
    rng = np.random.default_rng(1)
    batch = (rng.random((4, 8, 8, 1)), np.array([0, 1, 1, 0]))
    _, g = loss_and_grads(tiny_state, batch)
    _, per, _ = per_example_grads(tiny_state, batch)
    for k in g:
        np.testing.assert_allclose(np.mean([p[k] for p in per], axis=0), g[k], rtol=1e-10, atol=1e-14)


def test_serialization_bit_exact(tmp_path, tiny_state):
    save_state(tmp_path / "a.ckpt", tiny_state)
    back = load_state(tmp_path / "a.ckpt")
    assert back.arch == tiny_state.arch and back.bn == tiny_state.bn
    assert list(back.params) == list(tiny_state.params)
    for k in tiny_state.params:
        assert np.array_equal(back.params[k], tiny_state.params[k])
    for k in tiny_state.buffers:
        assert np.array_equal(back.buffers[k], tiny_state.buffers[k])
    save_state(tmp_path / "b.ckpt", back)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_shape_errors(tiny_state):
    with pytest.raises(ModelError):
        forward(tiny_state, np.zeros((1, 4, 4, 1)))
    with pytest.raises(ModelError):
        ArchSpec(activation="swish")
    with pytest.raises(ModelError):
        tiny_state.replace(buffers={**tiny_state.buffers, "layer0.running_var": -np.ones(3)})


def test_resnet_mini_shapes():
    arch = ArchSpec(name="resnet_mini", image_size=8, widths=(4, 4, 4), activation="gelu", pool="avg")
    state = init_state(arch, seed=0)
    assert set(param_shapes(arch)) == set(state.params)
    logits, stats = forward(state, np.zeros((2, 8, 8, 1)), "train")
    assert logits.shape == (2, 2) and len(stats) == 5


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 4))
def test_running_var_stays_non_negative(seed, n):
    arch = ArchSpec(image_size=4, widths=(2, 2), activation="gelu", pool="avg")
    state = init_state(arch, seed=seed)
    x = np.random.default_rng(seed).random((n, 4, 4, 1))
    _, stats = forward(state, x, "train")
    out = bn_update(state.buffers, stats, 0.1, state.bn_layers)
    for k, v in out.items():
        if k.endswith("running_var"):
            assert np.all(v >= 0)
