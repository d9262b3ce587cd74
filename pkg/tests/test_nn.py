import numpy as np
import pytest

from rqdet import nn
from rqdet.nn import checkpoint, gradcheck, ops
from rqdet.nn.tensor import MissingGrad, NotScalar, Parameter, ShapeMismatch, TapeConsumed, Tensor

SEEDS = range(20)
OP_TOL = 1e-4


def P(rng, *shape, lo=None):
    x = rng.normal(size=shape)
    if lo is not None:
        x = np.abs(x) + lo
    return Parameter(x, name="x")


def weighted(out, rng):
    # random projection to a scalar so every output entry matters
    w = rng.normal(size=out.shape)
    return ops.sum(ops.mul(out, w))


def _cases():
    def c_add(r):
        a, b = P(r, 3, 4), P(r, 1, 4)
        return lambda a, b: weighted(ops.add(a, b), np.random.default_rng(0)), [a, b]

    def c_sub(r):
        a, b = P(r, 3, 4), P(r, 3, 1)
        return lambda a, b: weighted(ops.sub(a, b), np.random.default_rng(0)), [a, b]

    def c_mul(r):
        a, b = P(r, 2, 3), P(r, 3)
        return lambda a, b: weighted(ops.mul(a, b), np.random.default_rng(0)), [a, b]

    def c_div(r):
        a, b = P(r, 2, 3), P(r, 2, 3, lo=0.5)
        return lambda a, b: weighted(ops.div(a, b), np.random.default_rng(0)), [a, b]

    def c_relu(r):
        a = P(r, 4, 5)
        a.data[np.abs(a.data) < 1e-3] = 0.1
        return lambda a: weighted(ops.relu(a), np.random.default_rng(0)), [a]

    def c_sigmoid(r):
        return lambda a: weighted(ops.sigmoid(a), np.random.default_rng(0)), [P(r, 6)]

    def c_exp(r):
        return lambda a: weighted(ops.exp(a), np.random.default_rng(0)), [P(r, 6)]

    def c_log(r):
        return lambda a: weighted(ops.log(a), np.random.default_rng(0)), [P(r, 6, lo=0.3)]

    def c_abs(r):
        a = P(r, 6)
        a.data[np.abs(a.data) < 1e-3] = 0.2
        return lambda a: weighted(ops.abs(a), np.random.default_rng(0)), [a]

    def c_where(r):
        a, b = P(r, 5), P(r, 5)
        cond = r.random(5) < 0.5
        return lambda a, b: weighted(ops.where(cond, a, b), np.random.default_rng(0)), [a, b]

    def c_reshape_transpose(r):
        a = P(r, 2, 3, 4)
        return (lambda a: weighted(ops.transpose(ops.reshape(a, (6, 4)), (1, 0)),
                                   np.random.default_rng(0)), [a])

    def c_index(r):
        a = P(r, 5, 3)
        idx = np.array([4, 0, 0, 2])
        return lambda a: weighted(ops.index(a, idx), np.random.default_rng(0)), [a]

    def c_concat_stack(r):
        a, b = P(r, 2, 3), P(r, 4, 3)
        return (lambda a, b: ops.add(weighted(ops.concat([a, b], 0), np.random.default_rng(0)),
                                     weighted(ops.stack([a, a], 1), np.random.default_rng(1))),
                [a, b])

    def c_repeat2x(r):
        return lambda a: weighted(ops.repeat2x(a), np.random.default_rng(0)), [P(r, 2, 3, 3)]

    def c_sum_mean(r):
        a = P(r, 3, 4)
        return (lambda a: ops.add(weighted(ops.sum(a, axis=0), np.random.default_rng(0)),
                                  weighted(ops.mean(a, axis=1, keepdims=True),
                                           np.random.default_rng(1))), [a])

    def c_matmul(r):
        a, b = P(r, 2, 3, 4), P(r, 4, 5)
        return lambda a, b: weighted(ops.matmul(a, b), np.random.default_rng(0)), [a, b]

    def c_linear(r):
        x, w, b = P(r, 3, 4), P(r, 4, 2), P(r, 2)
        return lambda x, w, b: weighted(ops.linear(x, w, b), np.random.default_rng(0)), [x, w, b]

    def c_softmax(r):
        return lambda a: weighted(ops.softmax(a, -1), np.random.default_rng(0)), [P(r, 3, 5)]

    def c_layer_norm(r):
        x, g, b = P(r, 3, 6), P(r, 6), P(r, 6)
        return (lambda x, g, b: weighted(ops.layer_norm(x, g, b), np.random.default_rng(0)),
                [x, g, b])

    def c_bilinear(r):
        x = P(r, 2, 5, 6)
        pts = r.uniform(-1, 6, size=(8, 2))
        return lambda x: weighted(ops.bilinear_sample(x, pts, 2), np.random.default_rng(0)), [x]

    def c_conv(r):
        x, w, b = P(r, 2, 6, 5), P(r, 3, 2, 3, 3), P(r, 3)
        return (lambda x, w, b: weighted(ops.conv2d(x, w, b, stride=2, padding=1),
                                         np.random.default_rng(0)), [x, w, b])

    def c_focal(r):
        x = P(r, 4, 3)
        t = (r.random((4, 3)) < 0.3).astype(float)
        return lambda x: ops.sum(ops.sigmoid_focal_loss(x, t)), [x]

    return {k[2:]: v for k, v in locals().items() if k.startswith("c_")}


CASES = _cases()


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradients(name, seed):
    fn, inputs = CASES[name](np.random.default_rng(seed))
    assert gradcheck.check(fn, inputs) <= OP_TOL


def test_numeric_grad_quadratic():
    x = np.array([1.0, -2.0, 3.0])
    g = gradcheck.numeric_grad(lambda: float((x ** 2).sum()), x)
    np.testing.assert_allclose(g, 2 * x, atol=1e-8)


def test_broadcast_mismatch():
    with pytest.raises(ShapeMismatch):
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_backward_needs_scalar():
    p = Parameter(np.ones(3), name="p")
    with pytest.raises(NotScalar):
        nn.backward(ops.mul(p, 2.0))


def test_tape_consumed():
    p = Parameter(np.ones(3), name="p")
    loss = ops.sum(ops.mul(p, p))
    nn.backward(loss)
    np.testing.assert_allclose(p.grad, 2 * np.ones(3))
    with pytest.raises(TapeConsumed):
        nn.backward(loss)


def test_grad_accumulates_over_reuse():
    p = Parameter(np.array([2.0]), name="p")
    nn.backward(ops.sum(ops.add(ops.mul(p, p), p)))
    assert p.grad[0] == pytest.approx(5.0)


def test_no_grad_records_nothing():
    p = Parameter(np.ones(2), name="p")
    with nn.no_grad():
        out = ops.mul(p, 3.0)
    assert not out.requires_grad


def test_detach_replay_freezes_choice():
    p = Parameter(np.array([1.0, 3.0]), name="p")

    def f(p):
        i = int(nn.detach(np.argmax(p.data)))
        return ops.index(p, i)

    with nn.record_detached() as log:
        f(p)
    p.data[0] = 10.0
    with nn.replay_detached(log):
        assert float(f(p).data) == 3.0


def test_adamw_matches_closed_form():
    p = Parameter(np.array([1.0, -1.0]), name="p")
    opt = nn.AdamW([p], lr=0.1, weight_decay=0.01)
    p.grad = np.array([0.5, -2.0])
    opt.step()
    # first step: bias-corrected moments give sign(g)
    np.testing.assert_allclose(p.data, np.array([1.0, -1.0]) * (1 - 0.001) - 0.1 * np.sign(
        [0.5, -2.0]), atol=1e-7)


def test_adamw_missing_grad():
    p = Parameter(np.ones(2), name="p")
    with pytest.raises(MissingGrad):
        nn.AdamW([p]).step()


def test_lr_schedule():
    assert nn.lr_at(0, 1.0, 1200, warmup=100) == pytest.approx(0.01)
    assert nn.lr_at(99, 1.0, 1200, warmup=100) == pytest.approx(1.0)
    assert nn.lr_at(799, 1.0, 1200, warmup=100) == pytest.approx(1.0)
    assert nn.lr_at(800, 1.0, 1200, warmup=100) == pytest.approx(0.1)
    assert nn.lr_at(1100, 1.0, 1200, warmup=100) == pytest.approx(0.01)


def test_clip_grad_norm():
    p = Parameter(np.zeros(2), name="p")
    p.grad = np.array([3.0, 4.0])
    assert nn.clip_grad_norm([p], 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(p.grad) == pytest.approx(1.0)


def test_param_store(tmp_path):
    s = nn.ParamStore(seed=3)
    s.zeros("a", (2, 3))
    s.xavier("b", 4, 5)
    assert s.count() == 6 + 20
    with pytest.raises(KeyError):
        s.zeros("a", (1,))
    t = nn.ParamStore(seed=3)
    t.zeros("a", (2, 3))
    t.xavier("b", 4, 5)
    np.testing.assert_array_equal(s["b"].data, t["b"].data)


def test_checkpoint_roundtrip(tmp_path):
    tensors = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([1, 2], dtype=np.int64)}
    path = tmp_path / "x.rqf"
    checkpoint.save(str(path), tensors, {"step": 7})
    back, meta = checkpoint.load(str(path))
    assert meta == {"step": 7}
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])
        assert back[k].dtype == tensors[k].dtype
    assert checkpoint.dumps(tensors, {"step": 7}) == path.read_bytes()


def test_checkpoint_rejects_garbage():
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"nope")
