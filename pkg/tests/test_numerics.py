import math

import numpy as np
import pytest

from fdnm.numerics import ops
from fdnm.numerics.gradcheck import check_gradients, max_rel_error, numeric_grad
from fdnm.numerics.params import (CheckpointError, ParamStore, decode_checkpoint,
                                  encode_checkpoint, read_checkpoint, write_checkpoint)
from fdnm.numerics.tensor import ShapeError, Tensor, no_grad


def t(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- tape ----------------------------------------------------------------------
def test_sum_grad_is_ones_and_accumulates():
    x = t(np.random.default_rng(0).normal(size=(3, 4)))
    x.sum().backward()
    assert np.all(x.grad == 1.0)
    x.sum().backward()
    assert np.all(x.grad == 2.0)


def test_half_square_grad_is_x():
    x = t(np.random.default_rng(1).normal(size=(5,)))
    ((x * x).sum() * 0.5).backward()
    assert np.allclose(x.grad, x.data)


def test_non_scalar_backward_rejected():
    with pytest.raises(ShapeError):
        (t(np.ones((2, 2))) * 2.0).backward()


def test_diamond_graph_gradient():
    x = t([2.0])
    y = x * 3.0
    z = (y * y + y).sum()  # 9x^2 + 3x
    z.backward()
    assert x.grad[0] == pytest.approx(18 * 2 + 3)


def test_no_grad_records_nothing():
    x = t(np.ones(3))
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad


# -- conv / pooling ----------------------------------------------------------------
def test_conv1x1_examples():
    x = t(np.ones((2, 2, 2)))
    out = ops.conv1x1(x, t(np.eye(2)), t(np.zeros(2)))
    assert np.array_equal(out.data, x.data)
    out = ops.conv1x1(t(np.random.default_rng(0).normal(size=(3, 2, 2))), t(np.zeros((2, 3))),
                      t(np.zeros(2)))
    assert np.all(out.data == 0)


def test_conv1x1_matches_loop():
    rng = np.random.default_rng(7)
    x, w, b = rng.normal(size=(3, 2, 2)), rng.normal(size=(2, 3)), rng.normal(size=2)
    out = ops.conv1x1(t(x), t(w), t(b)).data
    ref = np.zeros((2, 2, 2))
    for o in range(2):
        for i in range(2):
            for j in range(2):
                ref[o, i, j] = b[o] + sum(w[o, c] * x[c, i, j] for c in range(3))
    assert np.max(np.abs(out - ref)) < 1e-12
    with pytest.raises(ShapeError):
        ops.conv1x1(t(x), t(rng.normal(size=(2, 4))), t(b))


def test_conv2d_matches_loop():
    rng = np.random.default_rng(8)
    x, w, b = rng.normal(size=(2, 3, 5, 4)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    out = ops.conv2d(t(x), t(w), t(b), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ho, wo = (5 + 2 - 3) // 2 + 1, (4 + 2 - 3) // 2 + 1
    ref = np.zeros((2, 4, ho, wo))
    for n in range(2):
        for o in range(4):
            for i in range(ho):
                for j in range(wo):
                    ref[n, o, i, j] = b[o] + np.sum(w[o] * xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3])
    assert np.max(np.abs(out - ref)) < 1e-12


def test_gap_examples_and_loop():
    assert np.allclose(ops.gap(t(np.full((2, 3, 3), 3.5))).data, 3.5)
    assert ops.gap(t(np.array([[[0.0, 2.0], [4.0, 6.0]]]))).data.item() == 3.0
    x = np.random.default_rng(9).normal(size=(4, 5, 7))
    ref = np.array([[[sum(x[c].ravel()) / 35]] for c in range(4)])
    assert np.max(np.abs(ops.gap(t(x)).data - ref)) < 1e-12


def test_sigmoid_values():
    assert ops.sigmoid(t(0.0)).item() == 0.5
    assert ops.sigmoid(t(50.0)).item() >= 1 - 1e-12
    assert ops.sigmoid(t(1.0)).item() == pytest.approx(0.7310585786, abs=1e-10)
    assert ops.sigmoid(t(-800.0)).item() == 0.0  # no overflow warning path


def test_concat_split_round_trip():
    a, b = t(np.zeros((1, 2, 2))), t(np.ones((1, 2, 2)))
    out = ops.concat_channels([a, b])
    assert np.array_equal(out.data[0], a.data[0]) and np.array_equal(out.data[1], b.data[0])
    assert np.array_equal(ops.concat_channels([a]).data, a.data)
    x = t(np.random.default_rng(0).normal(size=(8, 3, 3)))
    assert np.array_equal(ops.concat_channels(ops.split_channels(x, 4)).data, x.data)


# -- norms -------------------------------------------------------------------------
def test_batch_norm_eval_identity():
    st = ops.BatchNormState(2)
    st.running_var = np.full(2, 1 - ops.NORM_EPS)
    x = np.random.default_rng(0).normal(size=(3, 2, 2, 2))
    out = ops.batch_norm(t(x), t(np.ones(2)), t(np.zeros(2)), st, training=False)
    assert np.allclose(out.data, x, atol=1e-12)


def test_batch_norm_train_constant_and_loop():
    st = ops.BatchNormState(2)
    x = np.ones((4, 2, 2, 2)) * np.array([3.0, -1.0])[None, :, None, None]
    out = ops.batch_norm(t(x), t(np.ones(2)), t(np.zeros(2)), st, training=True)
    assert np.max(np.abs(out.data)) <= 1e-6
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 2, 2, 2))
    g, b = rng.normal(size=2), rng.normal(size=2)
    st = ops.BatchNormState(2)
    out = ops.batch_norm(t(x), t(g), t(b), st, training=True).data
    for c in range(2):
        vals = [x[n, c, i, j] for n in range(4) for i in range(2) for j in range(2)]
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        ref = g[c] * (x[:, c] - mu) / math.sqrt(var + ops.NORM_EPS) + b[c]
        assert np.max(np.abs(out[:, c] - ref)) < 1e-10
        # running stats use momentum 0.1 and the unbiased variance
        assert st.running_mean[c] == pytest.approx(0.1 * mu)
        assert st.running_var[c] == pytest.approx(0.9 + 0.1 * var * 16 / 15)


def test_batch_norm_needs_two_samples_and_state_in_eval():
    with pytest.raises(ShapeError):
        ops.batch_norm(t(np.ones((1, 2))), t(np.ones(2)), t(np.zeros(2)), ops.BatchNormState(2), True)
    with pytest.raises(ValueError):
        ops.batch_norm(t(np.ones((2, 2))), t(np.ones(2)), t(np.zeros(2)), None, False)


def test_instance_norm_examples():
    assert np.max(np.abs(ops.instance_norm(t(np.full((2, 3, 3), 4.0))).data)) < 1e-6
    out = ops.instance_norm(t(np.array([[[0.0, 2.0], [0.0, 2.0]]]))).data
    assert np.allclose(out, [[[-1, 1], [-1, 1]]], atol=1e-4)
    x = np.random.default_rng(2).normal(size=(3, 4, 5, 6))
    out = ops.instance_norm(t(x)).data
    assert np.max(np.abs(out.mean(axis=(-2, -1)))) <= 1e-10
    var = out.var(axis=(-2, -1))
    assert np.all((var >= 1 - 1e-3) & (var <= 1))
    with pytest.raises(ShapeError):
        ops.instance_norm(t(np.ones((2, 1, 1))))


# -- distances / cross entropy ---------------------------------------------------------
def test_pairwise_distance_loop_and_zero_subgradient():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    d = ops.pairwise_distance(t(a), t(b)).data
    ref = [[math.dist(a[i], b[j]) for j in range(5)] for i in range(4)]
    assert np.max(np.abs(d - ref)) < 1e-12
    x = t(np.ones((2, 3)))
    ops.pairwise_distance(x, x).sum().backward()
    assert np.all(np.isfinite(x.grad)) and np.all(x.grad == 0)


def test_cross_entropy_examples():
    assert ops.cross_entropy(t(np.zeros((3, 10))), [0, 4, 9]).item() == pytest.approx(math.log(10))
    z = np.zeros((2, 4))
    z[0, 1] = z[1, 3] = 50
    assert ops.cross_entropy(t(z), [1, 3]).item() <= 1e-12
    rng = np.random.default_rng(4)
    z, y = rng.normal(size=(4, 5)), [0, 2, 4, 1]
    ref = sum(math.log(sum(math.exp(v) for v in row)) - row[k] for row, k in zip(z, y)) / 4
    assert ops.cross_entropy(t(z), y).item() == pytest.approx(ref, abs=1e-12)
    with pytest.raises(ValueError):
        ops.cross_entropy(t(z), [0, 1, 2, 5])


# -- gradient checker and ops gradients ----------------------------------------------------
def test_gradcheck_catches_a_wrong_backward():
    from fdnm.numerics.tensor import make

    def bad_square(x):
        return make(x.data ** 2, (x,), lambda g: (g * x.data,))  # missing factor 2

    x = t(np.random.default_rng(5).normal(size=4))
    assert not check_gradients(lambda: bad_square(x).sum(), [x]).ok
    assert check_gradients(lambda: (x * x).sum(), [x]).ok
    assert max_rel_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0


def test_gradcheck_requires_float64():
    x = Tensor(np.ones(3, dtype=np.float32), dtype=np.float32)
    with pytest.raises(TypeError):
        check_gradients(lambda: x.sum(), [x])


@pytest.mark.parametrize("seed", range(3))
def test_sampled_gradcheck_on_conv2d(seed):
    rng = np.random.default_rng(seed)
    x, w, b = t(rng.normal(size=(2, 2, 4, 4))), t(rng.normal(size=(3, 2, 3, 3))), t(rng.normal(size=3))
    r = rng.normal(size=(2, 3, 4, 4))
    res = check_gradients(lambda: (ops.conv2d(x, w, b, pad=1) * Tensor(r)).sum(), [x, w, b],
                          sample=20, rng=rng)
    assert res.ok, res


# -- parameters and checkpoints ------------------------------------------------------
def test_param_store_rules():
    s = ParamStore()
    s.add("a.w", np.ones((2, 2)))
    with pytest.raises(KeyError):
        s.add("a.w", np.ones(1))
    with pytest.raises(ValueError):
        s.add("bad name", np.ones(1))
    assert s.names() == ["a.w"] and s.num_scalars() == 4 and s["a.w"].requires_grad


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    arrays = {"w": rng.normal(size=(3, 2)).astype(np.float32), "s": np.array([1.5], np.float32)}
    write_checkpoint(tmp_path / "x.fdnm", arrays)
    back = read_checkpoint(tmp_path / "x.fdnm")
    assert list(back) == ["w", "s"]
    assert all(np.array_equal(back[k], arrays[k]) for k in arrays)
    blob = (tmp_path / "x.fdnm").read_bytes()
    assert blob.startswith(b"FDNM1\n")
    # payload is little-endian float32 right after the blank line
    payload = blob[blob.index(b"\n\n") + 2:]
    assert np.array_equal(np.frombuffer(payload[:24], "<f4").reshape(3, 2), arrays["w"])


def test_checkpoint_errors():
    blob = encode_checkpoint({"w": np.ones((2, 2), np.float32)})
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"XXXX" + blob)
    with pytest.raises(CheckpointError, match="truncated at byte"):
        decode_checkpoint(blob[:-3])
    with pytest.raises(CheckpointError, match="trailing"):
        decode_checkpoint(blob + b"\0")


def test_numeric_grad_steps_around_nearby_kink():
    # relu kink 3e-6 away: a 1e-5 central difference straddles it
    x = Tensor(np.array([3e-6]))

    def fn():
        return ops.relu(x).sum()

    assert numeric_grad(fn, x, 1e-5, refine=0)[0] == pytest.approx(0.65)
    assert numeric_grad(fn, x, 1e-5)[0] == pytest.approx(1.0)
    assert check_gradients(fn, [x]).ok
