"""Tensor, autodiff, layer and serialization tests."""

from __future__ import annotations

import numpy as np
import pytest

from neurodecode.core import functional as F
from neurodecode.core.gradcheck import grad_check, grad_check_module
from neurodecode.core.nn import (
    GRU,
    BatchNorm1d,
    Conv1d,
    Conv2d,
    ConvTranspose2d,
    Dropout,
    LayerNorm,
    Linear,
    MultiheadAttention,
    Parameter,
)
from neurodecode.core.optim import Adam, minibatches
from neurodecode.core.rng import Rng
from neurodecode.core.serialization import (
    decode_archive,
    decode_tensor,
    encode_archive,
    encode_tensor,
)
from neurodecode.core.tensor import GradTape, Tensor, make_result, no_grad
from neurodecode.utils.errors import ConfigError, DimensionError, NumericError


def _param(rng: Rng, *shape: int) -> Parameter:
    return Parameter(rng.uniform(size=shape, low=-2.0, high=2.0))


def test_matmul_identity_and_hand_case() -> None:
    """Identity leaves a vector unchanged and a small product matches by hand."""
    x = np.array([[1.0], [2.0], [3.0]])
    assert np.array_equal(F.matmul(np.eye(3), x).data, x)
    out = F.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
    assert np.array_equal(out.data, np.array([[3.0], [7.0]]))


def test_matmul_shape_mismatch_names_both_shapes() -> None:
    """A bad inner dimension should raise a dimension error naming both shapes."""
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        F.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_matmul_gradient_matches_finite_differences(rng: Rng) -> None:
    """The tape gradient of sum(a @ b) agrees with central differences."""
    a, b = _param(rng.derive("a"), 5, 4), _param(rng.derive("b"), 4, 3)
    report = grad_check(lambda: F.sum(F.matmul(a, b)), [a, b], tol=1e-6)
    assert report.passed


def test_grad_check_square_is_exact(rng: Rng) -> None:
    """f(x) = sum(x²) has a gradient the difference quotient reproduces almost exactly."""
    x = _param(rng, 7)
    report = grad_check(lambda: F.sum(F.mul(x, x)), [x])
    assert report.max_rel_error < 1e-9


def test_grad_check_flags_a_wrong_backward(rng: Rng) -> None:
    """An op whose backward drops the factor 2 must fail the check."""
    x = _param(rng, 5)

    def bad_square(t: Tensor) -> Tensor:
        return make_result(t.data * t.data, (t,), lambda g: (g * t.data,), "bad_square")

    report = grad_check(lambda: F.sum(bad_square(x)), [x])
    assert not report.passed


def test_grad_check_rejects_non_positive_step(rng: Rng) -> None:
    """The finite-difference step must be positive."""
    x = _param(rng, 2)
    with pytest.raises(ConfigError):
        grad_check(lambda: F.sum(x), [x], h=0.0)


@pytest.mark.parametrize(
    "op",
    [
        lambda a, b: F.add(a, b),
        lambda a, b: F.sub(a, b),
        lambda a, b: F.mul(a, b),
        lambda a, b: F.div(a, F.add(F.mul(b, b), 1.0)),
        lambda a, b: F.mul(F.relu(a), b),
        lambda a, b: F.mul(F.sigmoid(a), F.tanh(b)),
        lambda a, b: F.mul(F.softmax(a, axis=-1), b),
        lambda a, b: F.mul(F.log_softmax(a, axis=0), b),
        lambda a, b: F.mul(F.layer_norm(a), b),
        lambda a, b: F.mul(F.l2_normalize(a), b),
        lambda a, b: F.mul(F.exp(a), b),
        lambda a, b: F.mean(F.concat([a, b], axis=1), axis=0),
        lambda a, b: F.mul(F.transpose(F.stack([a, b]), (1, 0, 2)), 2.0),
    ],
)
def test_primitives_match_finite_differences(op, rng: Rng) -> None:
    """Every differentiable primitive passes the central-difference oracle."""
    a, b = _param(rng.derive("a"), 3, 4), _param(rng.derive("b"), 3, 4)
    report = grad_check(lambda: F.sum(F.mul(op(a, b), op(a, b))), [a, b], tol=1e-5)
    assert report.passed, report.max_rel_error


def test_conv2d_gradient_on_six_by_six(rng: Rng) -> None:
    """conv2d on a 1×1×6×6 input with a 3×3 kernel passes the gradient check."""
    x = _param(rng.derive("x"), 1, 1, 6, 6)
    conv = Conv2d(1, 2, 3, rng.derive("conv"), padding=1)
    report = grad_check(lambda: F.sum(F.mul(conv(x), conv(x))), [x, *conv.parameters()], tol=1e-5)
    assert report.passed


def test_transposed_and_1d_convolutions_pass_gradient_check(rng: Rng) -> None:
    """Learned upsampling and 1-D convolution have correct backward passes."""
    x2 = _param(rng.derive("x2"), 2, 2, 3, 3)
    up = ConvTranspose2d(2, 3, 2, rng.derive("up"), stride=2)
    assert up(x2).shape == (2, 3, 6, 6)
    assert grad_check_module(lambda: F.sum(F.mul(up(x2), up(x2))), up).passed
    x1 = _param(rng.derive("x1"), 2, 1, 8)
    conv = Conv1d(1, 2, 3, rng.derive("c1"), padding=1)
    pooled = lambda: F.sum(F.mul(F.max_pool1d(conv(x1), 2), 1.5))  # noqa: E731
    assert grad_check_module(pooled, conv).passed


def test_division_by_zero_is_a_numeric_error() -> None:
    """Zero denominators are rejected instead of producing inf."""
    with pytest.raises(NumericError):
        F.div(np.ones(3), np.array([1.0, 0.0, 2.0]))


def test_softmax_is_uniform_on_ties_and_rejects_empty_axis() -> None:
    """softmax([0, 0, 0]) is uniform; an empty axis is a dimension error."""
    assert np.allclose(F.softmax(np.zeros(3)).data, np.full(3, 1 / 3))
    with pytest.raises(DimensionError):
        F.softmax(np.zeros((2, 0)))


def test_layer_norm_rows_have_zero_mean_unit_variance(rng: Rng) -> None:
    """Before the affine, each row is standardized."""
    out = F.layer_norm(rng.normal(size=(4, 50)) * 3 + 1, eps=0.0).data
    assert np.allclose(out.mean(axis=1), 0.0, atol=1e-10)
    assert np.allclose(out.var(axis=1), 1.0, atol=1e-10)


def test_broadcast_gradient_is_reduced_to_parent_shape() -> None:
    """A bias broadcast over rows receives the row-summed gradient."""
    a = Parameter(np.ones((2, 3)))
    b = Parameter(np.zeros(3))
    F.sum(F.add(a, b)).backward()
    assert np.array_equal(b.grad, np.full(3, 2.0))


def test_tape_visits_each_node_once_in_reverse_order() -> None:
    """A diamond-shaped graph is traversed once per node, children first."""
    x = Parameter(np.array([1.0, 2.0]))
    y = F.mul(x, 3.0)
    z = F.add(y, y)
    loss = F.sum(z)
    tape = loss.backward()
    assert len(tape.visited) == len({id(node) for node in tape.visited})
    assert tape.visited[0] is loss
    assert tape.visited.index(z) < tape.visited.index(y)
    assert np.array_equal(x.grad, np.array([6.0, 6.0]))
    assert GradTape.record(loss).leaves == [x]


def test_no_grad_does_not_record() -> None:
    """Operations under no_grad produce leaves."""
    x = Parameter(np.ones(2))
    with no_grad():
        y = F.mul(x, 2.0)
    assert not y.requires_grad
    assert y.is_leaf


def test_dropout_is_identity_in_eval_mode(rng: Rng) -> None:
    """Eval-mode dropout returns its input unchanged."""
    layer = Dropout(0.5, rng)
    x = rng.normal(size=(3, 4))
    layer.eval()
    assert np.array_equal(layer(x).data, x)
    layer.train()
    assert not np.array_equal(layer(x).data, x)


def test_batch_norm_eval_uses_running_statistics(rng: Rng) -> None:
    """Eval-mode batch norm ignores the batch and is idempotent."""
    layer = BatchNorm1d(3)
    layer(rng.normal(size=(8, 3)) * 2 + 5)
    layer.eval()
    x = rng.normal(size=(4, 3))
    first = layer(x).data
    assert np.array_equal(layer(x).data, first)
    assert np.array_equal(layer(x[:1]).data, first[:1])


def test_gru_and_attention_modules_pass_gradient_check(rng: Rng) -> None:
    """Recurrent and attention layers backpropagate correctly."""
    x = rng.normal(size=(2, 3, 4))
    gru = GRU(4, 2, rng.derive("gru"))
    assert gru(x).shape == (2, 3, 4)
    assert grad_check_module(lambda: F.sum(F.mul(gru(x), gru(x))), gru).passed
    attention = MultiheadAttention(4, 2, rng.derive("attn"), context_dim=3)
    context = rng.normal(size=(2, 5, 3))
    loss = lambda: F.sum(F.mul(attention(x, context), 1.0))  # noqa: E731
    assert grad_check_module(loss, attention).passed
    assert attention.last_attention.shape == (2, 2, 3, 5)


def test_gru_parameter_count_convention(rng: Rng) -> None:
    """A bidirectional GRU holds 2·(3H(I+H) + 6H) parameters."""
    gru = GRU(7, 5, rng)
    assert gru.param_count() == 2 * (3 * 5 * (7 + 5) + 6 * 5)


def test_state_dict_round_trip_and_shape_check(rng: Rng) -> None:
    """load_state_dict restores every parameter and buffer."""
    source = BatchNorm1d(4)
    source(rng.normal(size=(6, 4)))
    target = BatchNorm1d(4)
    target.load_state_dict(source.state_dict())
    assert np.array_equal(target.running_mean, source.running_mean)
    with pytest.raises(DimensionError):
        LayerNorm(3).load_state_dict({"gamma": np.ones(4), "beta": np.zeros(3)})


def test_adam_minimizes_a_quadratic(rng: Rng) -> None:
    """Adam drives a least-squares fit towards the exact solution."""
    layer = Linear(3, 1, rng.derive("init"))
    x = rng.normal(size=(32, 3))
    y = x @ np.array([[1.0], [-2.0], [0.5]])
    optimizer = Adam(layer.parameters(), lr=0.05)
    for _ in range(400):
        optimizer.zero_grad()
        loss = F.mse_loss(layer(x), y)
        loss.backward()
        optimizer.step()
    assert loss.item() < 1e-2


def test_rng_streams_are_reproducible_and_independent() -> None:
    """Same seed and keys give the same stream; derived names are distinct."""
    assert np.array_equal(Rng(5).derive("a").normal(size=4), Rng(5).derive("a").normal(size=4))
    assert not np.array_equal(Rng(5).derive("a").normal(size=4), Rng(5).derive("b").normal(4))
    with pytest.raises(ConfigError):
        Rng(-1)
    with pytest.raises(ConfigError):
        Rng(2**64)


def test_ndtn_header_layout() -> None:
    """The NDTN header is magic, dtype tag, rank and u64 dims, little-endian."""
    blob = encode_tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
    assert blob[:4] == b"NDTN"
    assert blob[4] == 1
    assert blob[5] == 2
    assert int.from_bytes(blob[6:14], "little") == 2
    assert int.from_bytes(blob[14:22], "little") == 3
    assert len(blob) == 22 + 6 * 8
    assert np.array_equal(decode_tensor(blob), np.arange(6.0).reshape(2, 3))


def test_ndta_archive_keeps_names_and_dtypes() -> None:
    """Archives restore every entry with its dtype."""
    tensors = {"w": np.ones((2, 2)), "ids": np.array([3, 1], dtype=np.int64)}
    restored = decode_archive(encode_archive(tensors))
    assert set(restored) == {"w", "ids"}
    assert restored["ids"].dtype == np.int64
    assert np.array_equal(restored["w"], tensors["w"])


def test_minibatches_merge_a_single_row_tail() -> None:
    """A one-row tail joins the previous batch; every row appears exactly once."""
    batches = minibatches(np.arange(17), 8)
    assert [batch.size for batch in batches] == [8, 9]
    assert np.array_equal(np.concatenate(batches), np.arange(17))
    assert [batch.size for batch in minibatches(np.arange(18), 8)] == [8, 8, 2]
    assert [batch.size for batch in minibatches(np.arange(1), 8)] == [1]
    with pytest.raises(ConfigError):
        minibatches(np.arange(4), 0)
