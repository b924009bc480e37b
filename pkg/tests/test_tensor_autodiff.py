import threading

import numpy as np
import pytest

from src import tensor_autodiff as ad
from src.errors import NonFiniteError, ShapeError

INSTANCES = 20
TOLERANCE = 1e-4


def _draw(rng, shape, kind="normal"):
    values = rng.normal(size=shape)
    if kind == "positive":
        return 0.5 + np.abs(values)
    if kind == "away":
        # keeps leaky_relu inputs off the kink
        return np.sign(values) * (0.1 + np.abs(values))
    return values


def _check_primitive(build, shapes, kind="normal", seed=0):
    """Grad-check build(*tensors) projected onto a random direction, over many random instances."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(INSTANCES):
        params = [ad.Tensor.parameter(_draw(rng, shape, kind)) for shape in shapes]
        with ad.no_grad():
            out_shape = build(*params).shape
        weights = rng.normal(size=out_shape)
        worst = max(worst, ad.grad_check(lambda ps: ad.sum(ad.mul(build(*ps), weights)), params))
    return worst


def test_sigmoid_at_zero():
    assert ad.sigmoid(ad.Tensor.constant(0.0)).item() == 0.5


def test_leaky_relu_negative():
    assert ad.leaky_relu(ad.Tensor.constant(-1.0), alpha=0.2).item() == pytest.approx(-0.2)


def test_matmul_identity():
    a = np.random.default_rng(1).normal(size=(3, 5))
    assert np.array_equal(ad.matmul(np.eye(3), a).data, a)


def test_matmul_shape_error_names_primitive():
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_add_rejects_column_broadcast():
    with pytest.raises(ShapeError, match="add"):
        ad.add(np.ones((3, 2)), np.ones((3, 1)))


def test_non_finite_output_raises():
    with pytest.raises(NonFiniteError):
        ad.scale(ad.Tensor.constant([[1e308]]), 10.0)
    with pytest.raises(NonFiniteError):
        ad.Tensor([[np.nan]])


def test_row_mean_of_empty_raises():
    with pytest.raises(ShapeError):
        ad.row_mean(np.zeros((0, 3)))


def test_cosine_similarity_values():
    a = ad.Tensor.constant([[1.0, 0.0], [1.0, 1.0], [2.0, 0.0]])
    b = ad.Tensor.constant([[0.0, 3.0], [2.0, 2.0], [-1.0, 0.0]])
    assert np.allclose(ad.cosine_similarity_rows(a, b).data[:, 0], [0.0, 1.0, -1.0])


def test_l2_normalize_rows_unit_norm():
    x = np.random.default_rng(2).normal(size=(4, 6))
    y = ad.l2_normalize_rows(x).data
    assert np.allclose(np.linalg.norm(y, axis=1), 1.0)


def test_backward_sum_gives_ones():
    w = ad.Tensor.parameter(np.arange(4.0).reshape(2, 2))
    grads = ad.backward(ad.sum(w))
    assert np.array_equal(grads[w], np.ones((2, 2)))
    assert np.array_equal(w.grad, np.ones((2, 2)))


def test_backward_sigmoid_at_zero():
    w = ad.Tensor.parameter(0.0)
    grads = ad.backward(ad.sigmoid(w))
    assert grads[w][0, 0] == pytest.approx(0.25)


def test_backward_requires_scalar():
    w = ad.Tensor.parameter(np.ones((2, 2)))
    with pytest.raises(ShapeError):
        ad.backward(ad.scale(w, 2.0))


def test_backward_resets_tape():
    w = ad.Tensor.parameter(np.ones((2, 2)))
    ad.backward(ad.sum(ad.scale(w, 3.0)))
    assert len(ad.current_tape()) == 0


def test_backward_accumulates_reused_tensor():
    w = ad.Tensor.parameter([[3.0]])
    grads = ad.backward(ad.mul(w, w))
    assert grads[w][0, 0] == pytest.approx(6.0)


@pytest.mark.parametrize("name,build,shapes,kind", [
    ("matmul", ad.matmul, [(3, 4), (4, 2)], "normal"),
    ("add", ad.add, [(3, 4), (3, 4)], "normal"),
    ("add_row", ad.add, [(3, 4), (1, 4)], "normal"),
    ("sub", ad.sub, [(2, 5), (2, 5)], "normal"),
    ("sub_row", ad.sub, [(2, 5), (1, 5)], "normal"),
    ("mul", ad.mul, [(3, 3), (3, 3)], "normal"),
    ("scale", lambda a: ad.scale(a, -1.7), [(2, 3)], "normal"),
    ("shift", lambda a: ad.shift(a, 0.3), [(2, 3)], "normal"),
    ("concat_cols", lambda a, b: ad.concat_cols([a, b]), [(3, 2), (3, 4)], "normal"),
    ("concat_rows", lambda a, b: ad.concat_rows([a, b]), [(2, 3), (1, 3)], "normal"),
    ("row_mean", ad.row_mean, [(5, 3)], "normal"),
    ("leaky_relu", ad.leaky_relu, [(4, 3)], "away"),
    ("sigmoid", ad.sigmoid, [(3, 3)], "normal"),
    ("log", ad.log, [(3, 3)], "positive"),
    ("pow2", lambda a: ad.pow(a, 2), [(3, 3)], "normal"),
    ("pow_frac", lambda a: ad.pow(a, 1.5), [(3, 3)], "positive"),
    ("sum", ad.sum, [(3, 4)], "normal"),
    ("mean", ad.mean, [(3, 4)], "normal"),
    ("l2_normalize_rows", ad.l2_normalize_rows, [(4, 5)], "normal"),
    ("cosine_similarity_rows", ad.cosine_similarity_rows, [(4, 5), (4, 5)], "normal"),
])
def test_primitive_gradients(name, build, shapes, kind):
    assert _check_primitive(build, shapes, kind) < TOLERANCE, name


def _composite_instance(rng):
    """Random 3-layer network whose hidden pre-activations stay clear of the leaky_relu kink."""
    while True:
        x = rng.normal(size=(4, 5))
        w1, w2, w3 = rng.normal(size=(5, 6)), rng.normal(size=(6, 4)), rng.normal(size=(4, 1))
        h1 = x @ w1
        h2 = np.where(h1 > 0, h1, 0.2 * h1) @ w2
        if np.min(np.abs(h1)) > 1e-2 and np.min(np.abs(h2)) > 1e-2:
            return x, [ad.Tensor.parameter(w) for w in (w1, w2, w3)]


def test_three_layer_composite_gradient():
    rng = np.random.default_rng(11)
    for _ in range(INSTANCES):
        x, params = _composite_instance(rng)

        def fn(ps):
            h = ad.leaky_relu(ad.matmul(x, ps[0]))
            h = ad.leaky_relu(ad.matmul(h, ps[1]))
            return ad.mean(ad.sigmoid(ad.matmul(h, ps[2])))

        assert ad.grad_check(fn, params) < TOLERANCE


def test_grad_check_quadratic():
    rng = np.random.default_rng(4)
    w = ad.Tensor.parameter(_draw(rng, (5, 1), "away"))
    assert ad.grad_check(lambda ps: ad.sum(ad.mul(ps[0], ps[0])), [w]) < 1e-7


def test_grad_check_constant_function():
    w = ad.Tensor.parameter(np.ones((2, 2)))
    assert ad.grad_check(lambda ps: ad.sum(ad.Tensor.constant(np.ones((2, 2)))), [w]) == 0.0


def test_grad_check_sampling_restores_parameters():
    rng = np.random.default_rng(5)
    w = ad.Tensor.parameter(rng.normal(size=(6, 6)))
    before = w.data.copy()
    ad.grad_check(lambda ps: ad.sum(ad.sigmoid(ps[0])), [w], sample=5)
    assert np.array_equal(w.data, before)


def test_backward_is_linear():
    rng = np.random.default_rng(6)
    w = ad.Tensor.parameter(rng.normal(size=(3, 3)))
    x = rng.normal(size=(4, 3))
    a, b = 0.7, -1.3

    def l1():
        return ad.mean(ad.sigmoid(ad.matmul(x, w)))

    def l2():
        return ad.sum(ad.pow(w, 2))

    g1 = ad.backward(l1())[w]
    g2 = ad.backward(l2())[w]
    combined = ad.backward(ad.add(ad.scale(l1(), a), ad.scale(l2(), b)))[w]
    assert np.allclose(combined, a * g1 + b * g2, atol=1e-8, rtol=0)


def test_primitives_do_not_mutate_inputs():
    rng = np.random.default_rng(8)
    a = ad.Tensor.parameter(rng.normal(size=(3, 4)))
    b = ad.Tensor.parameter(rng.normal(size=(3, 4)))
    before_a, before_b = a.data.copy(), b.data.copy()
    out = ad.sum(ad.cosine_similarity_rows(ad.l2_normalize_rows(ad.leaky_relu(a)), ad.add(a, b)))
    ad.backward(out)
    assert np.array_equal(a.data, before_a)
    assert np.array_equal(b.data, before_b)


def test_no_grad_skips_recording():
    w = ad.Tensor.parameter(np.ones((2, 2)))
    ad.current_tape().reset()
    with ad.no_grad():
        out = ad.sum(ad.scale(w, 2.0))
    assert not out.requires_grad
    assert len(ad.current_tape()) == 0
    assert ad.backward(out) == {}


def test_tape_is_thread_local():
    w = ad.Tensor.parameter(np.ones((2, 2)))
    ad.current_tape().reset()
    ad.scale(w, 2.0)
    seen = []
    worker = threading.Thread(target=lambda: seen.append(len(ad.current_tape())))
    worker.start()
    worker.join()
    assert seen == [0]
    assert len(ad.current_tape()) == 1
    ad.current_tape().reset()


def test_adam_zero_gradient_leaves_params():
    w = ad.Tensor.parameter(np.array([[1.0, -2.0]]))
    state = ad.AdamState()
    ad.adam_step({"w": w}, {"w": np.zeros((1, 2))}, state)
    assert np.array_equal(w.data, [[1.0, -2.0]])
    assert state.step == 1


def test_adam_first_step_bounded_by_lr():
    rng = np.random.default_rng(9)
    start = rng.normal(size=(4, 4))
    grad = rng.normal(size=(4, 4))
    w = ad.Tensor.parameter(start)
    ad.adam_step({"w": w}, {"w": grad}, ad.AdamState(lr=1e-3))
    delta = w.data - start
    assert np.all(np.abs(delta) <= 1e-3 + 1e-9)
    assert np.all(np.sign(delta) == -np.sign(grad))


def test_adam_shape_mismatch():
    w = ad.Tensor.parameter(np.ones((2, 2)))
    with pytest.raises(ShapeError):
        ad.adam_step({"w": w}, {"w": np.ones((2, 3))}, ad.AdamState())


def test_adam_trajectories_are_deterministic():
    def run():
        rng = np.random.default_rng(10)
        x = rng.normal(size=(8, 3))
        w = ad.Tensor.parameter(rng.normal(size=(3, 1)))
        state = ad.AdamState(lr=1e-2)
        for _ in range(25):
            loss = ad.mean(ad.pow(ad.matmul(x, w), 2))
            ad.adam_step({"w": w}, ad.named_gradients({"w": w}, ad.backward(loss)), state)
        return w.data.tobytes()

    assert run() == run()


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(12)
    params = {"b": ad.Tensor.parameter(rng.normal(size=(1, 3))),
              "a": ad.Tensor.parameter(rng.normal(size=(2, 3)) * 1e-300)}
    path = tmp_path / "ckpt.json"
    ad.save_checkpoint(path, params, {"seed": 3})
    loaded, header = ad.load_checkpoint(path)
    assert header == {"seed": 3}
    for name in params:
        assert loaded[name].data.tobytes() == params[name].data.tobytes()
    assert ad.checkpoint_text(loaded, header) == path.read_text(encoding="utf-8")


def test_loads_parameters_rejects_bad_shape():
    with pytest.raises(ShapeError):
        ad.loads_parameters({"w": {"shape": [2, 2], "data": [1.0, 2.0, 3.0]}})
