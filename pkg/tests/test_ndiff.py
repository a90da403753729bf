import numpy as np
import pytest

from riskgraph import ndiff as nd

from gradcheck import directional_check, model_check, primitive_cases


@pytest.mark.parametrize("seed", range(5))
def test_primitives_match_finite_differences(seed):
    for name, fn, arrays in primitive_cases(np.random.default_rng(seed)):
        assert directional_check(fn, arrays, np.random.default_rng(seed + 99)) <= 1e-4, name


@pytest.mark.parametrize("variant", ["inductive", "attention", "multihead"])
def test_model_gradients_small(variant):
    assert max(model_check(variant, s) for s in range(3)) <= 1e-4


def test_softmax_fully_masked_row_is_zero():
    a = nd.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    mask = np.array([[True, True], [False, True]])
    p = nd.softmax(nd.masked_fill(a, mask, -np.inf)).value
    assert np.all(p[0] == 0.0)
    assert p[1, 0] == 1.0 and p[1, 1] == 0.0


def test_cross_entropy_hand_value():
    logits = nd.Tensor(np.array([[0.0, 0.0, 0.0], [np.log(3.0), 0.0, 0.0]]))
    w = np.array([1.0, 2.0, 1.0])
    # sample 0: label 1 (w=2) -log(1/3); sample 1: label 0 (w=1) -log(3/5)
    expected = (2 * np.log(3.0) + 1 * -np.log(3 / 5)) / 3
    assert float(nd.weighted_cross_entropy(logits, np.array([1, 0]), w).value) == pytest.approx(expected, rel=1e-6)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        nd.weighted_cross_entropy(nd.Tensor(np.zeros((2, 3))), np.array([0, 3]))
    with pytest.raises(ValueError):
        nd.weighted_cross_entropy(nd.Tensor(np.zeros((2, 3))), np.array([0]))


def test_class_weights_inverse_frequency():
    w = nd.class_weights(np.array([0, 0, 0, 1]), 3)
    assert w.tolist() == pytest.approx([4 / 9, 4 / 3, 0.0])


def test_shape_errors_name_the_op():
    with pytest.raises(ValueError, match="matmul"):
        nd.matmul(nd.Tensor(np.zeros((2, 3))), nd.Tensor(np.zeros((2, 3))))
    with pytest.raises(ValueError, match="add"):
        nd.add(nd.Tensor(np.zeros((2, 3))), nd.Tensor(np.zeros((3, 2))))
    with pytest.raises(ValueError):
        nd.Tensor(np.zeros((1, 1, 1, 1)))


def test_dropout_identity_when_not_training():
    a = nd.Tensor(np.ones((3, 3)))
    assert nd.dropout(a, 0.5, False) is a
    with pytest.raises(ValueError):
        nd.dropout(a, 0.5, True)


def test_backward_errors():
    a = nd.Tensor(np.ones(3), requires_grad=True)
    b = nd.Tensor(np.ones(3), requires_grad=True)
    with nd.Tape() as tape:
        loss = nd.reduce_sum(nd.mul(a, a))
    with pytest.raises(ValueError, match="not on the tape"):
        nd.backward(tape, loss, [b])
    with nd.Tape() as other:
        pass
    with pytest.raises(ValueError, match="not traced"):
        nd.backward(other, loss, [a])
    (g,) = nd.backward(tape, loss, [a])
    assert g.tolist() == [2.0, 2.0, 2.0]


def test_no_recording_without_tape():
    a = nd.Tensor(np.ones(2), requires_grad=True)
    out = nd.relu(a)
    with nd.Tape() as tape:
        pass
    assert out not in tape


def test_adam_first_step_moves_by_lr():
    p = nd.Tensor(np.array([1.0, -1.0]), requires_grad=True)
    opt = nd.Adam([p], lr=0.1)
    opt.step([np.array([0.5, -2.0])])
    assert p.value.tolist() == pytest.approx([0.9, -0.9], abs=1e-6)


def test_adam_none_gradient_leaves_parameter():
    p = nd.Tensor(np.array([1.0]), requires_grad=True)
    q = nd.Tensor(np.array([1.0]), requires_grad=True)
    opt = nd.Adam([p, q], lr=0.1)
    opt.step([np.array([1.0]), None])
    assert q.value[0] == 1.0 and p.value[0] != 1.0


def test_adam_rejects_non_finite():
    p = nd.Tensor(np.array([1.0]), requires_grad=True)
    with pytest.raises(FloatingPointError):
        nd.Adam([p]).step([np.array([np.nan])])


def test_checkpoint_round_trip_and_tamper(tmp_path):
    named = {"b": np.arange(6, dtype=np.float32).reshape(2, 3), "a": np.array([1.5], dtype=np.float32)}
    nd.save_checkpoint(tmp_path, named, {"k": 1})
    back, meta = nd.load_checkpoint(tmp_path)
    assert sorted(back) == ["a", "b"] and meta["k"] == 1
    assert np.array_equal(back["b"], named["b"])
    assert nd.encode_tensors(back) == nd.encode_tensors(named)
    blob = bytearray((tmp_path / "params.bin").read_bytes())
    blob[-1] ^= 0xFF
    (tmp_path / "params.bin").write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="corrupt"):
        nd.load_checkpoint(tmp_path)


def test_precision_context_restores():
    with nd.precision(np.float64):
        assert nd.Tensor(1.0).value.dtype == np.float64
    assert nd.Tensor(1.0).value.dtype == np.float32
