import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vqar import autograd as ag
from vqar.autograd import Tensor
from vqar.errors import ContractError
from vqar.recurrent import (EncoderDecoderState, GRUCell, decode_step, encode_step, gru_step,
                            gru_step_reference)

import gradcheck


def zero_cell(n_in, n_h):
    cell = GRUCell(n_in, n_h)
    for p in cell.parameters():
        p.data[...] = 0.0
    return cell


def numpy_gru(cell, x, h):
    """Per-gate evaluation straight from the textbook equations."""
    sig = lambda a: 1.0 / (1.0 + np.exp(-a))
    u = sig(x @ cell.block("u")["W"] + h @ cell.block("u")["U"] + cell.block("u")["b"])
    r = sig(x @ cell.block("r")["W"] + h @ cell.block("r")["U"] + cell.block("r")["b"])
    c = np.tanh(x @ cell.block("c")["W"] + r * (h @ cell.block("c")["U"]) + cell.block("c")["b"])
    return (1 - u) * h + u * c


def test_zero_parameters_halve_the_state():
    cell = zero_cell(3, 4)
    v = np.array([1.0, -2.0, 0.5, 4.0])
    assert np.array_equal(gru_step(cell, np.ones(3), v).data, 0.5 * v)


def test_origin_is_a_fixed_point_without_bias():
    cell = GRUCell(3, 4, np.random.default_rng(0))
    cell.b.data[...] = 0.0
    assert np.array_equal(gru_step(cell, np.zeros(3), np.zeros(4)).data, np.zeros(4))


def test_init_is_uniform_within_bound():
    cell = GRUCell(5, 16, np.random.default_rng(1))
    for p in cell.parameters():
        assert np.abs(p.data).max() <= 0.25
        assert p.requires_grad


def test_dimension_mismatch():
    cell = GRUCell(3, 4)
    with pytest.raises(ContractError):
        gru_step(cell, np.zeros(2), np.zeros(4))
    with pytest.raises(ContractError):
        gru_step(cell, np.zeros((2, 3)), np.zeros((3, 4)))


@pytest.mark.parametrize("batch", [None, 1, 5])
def test_fused_matches_textbook_and_reference(batch):
    rng = np.random.default_rng(2)
    cell = GRUCell(3, 4, rng)
    lead = () if batch is None else (batch,)
    x, h = rng.normal(size=lead + (3,)), rng.normal(size=lead + (4,))
    fused = gru_step(cell, x, h).data
    assert np.allclose(fused, numpy_gru(cell, x, h), rtol=0, atol=1e-14)
    assert np.allclose(fused, gru_step_reference(cell, x, h).data, rtol=0, atol=1e-14)


def test_fused_backward_matches_primitive_composition():
    rng = np.random.default_rng(3)
    for trial in range(20):
        cell = GRUCell(3, 5, rng)
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        h = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        w = rng.normal(size=(4, 5))
        grads = []
        for step in (gru_step, gru_step_reference):
            for p in cell.parameters() + [x, h]:
                p.grad = None
            ag.sum(step(cell, x, h) * w).backward()
            grads.append([p.grad.copy() for p in cell.parameters() + [x, h]])
        for a, b in zip(*grads):
            assert np.allclose(a, b, rtol=1e-12, atol=1e-13)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    for trial in range(100):
        cell = GRUCell(3, 4, rng)
        x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        h0 = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        w = rng.normal(size=(2, 4))

        def build():
            h = gru_step(cell, x, h0)
            h = gru_step(cell, x * 0.5, h)
            return ag.sum(h * w)

        assert gradcheck.check(build, cell.parameters() + [x, h0]) < gradcheck.RTOL


def test_encode_step_zero_fixed_point():
    cell = zero_cell(1, 3)
    state = EncoderDecoderState.zeros(3, 2)
    out = encode_step(cell, state, 0.0, np.zeros(0))
    assert np.array_equal(out.data, np.zeros(3))


def test_encode_step_concatenates_target_first():
    rng = np.random.default_rng(5)
    cell = GRUCell(4, 6, rng)
    cov = np.array([0.3, -1.2, 2.0])
    a = encode_step(cell, EncoderDecoderState.zeros(6, 2), 0.7, cov).data
    expected = numpy_gru(cell, np.concatenate([[0.7], cov]), np.zeros(6))
    assert np.allclose(a, expected, atol=1e-14)
    b = encode_step(cell, EncoderDecoderState.zeros(6, 2), 0.7, cov[::-1]).data
    assert not np.allclose(a, b)


def test_decode_step_zero_fixed_point():
    cell = zero_cell(4, 3)
    state = EncoderDecoderState.zeros(4, 3)
    for _ in range(5):
        decode_step(cell, state, np.zeros(4))
    assert np.array_equal(state.h_dec.data, np.zeros(3))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_trajectories_are_deterministic(seed, steps):
    rng = np.random.default_rng(seed)
    cell = GRUCell(2, 3, np.random.default_rng(seed + 1))
    xs = rng.normal(size=(steps, 2))
    runs = []
    for _ in range(2):
        h = np.zeros(3)
        traj = []
        for x in xs:
            h = gru_step(cell, x, h).data
            traj.append(h)
        runs.append(np.array(traj))
    assert np.array_equal(runs[0], runs[1])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_batched_rows_equal_single_rows(seed):
    rng = np.random.default_rng(seed)
    cell = GRUCell(3, 4, rng)
    x, h = rng.normal(size=(3, 3)), rng.normal(size=(3, 4))
    batched = gru_step(cell, x, h).data
    for i in range(3):
        assert np.allclose(batched[i], gru_step(cell, x[i], h[i]).data, atol=1e-15)
