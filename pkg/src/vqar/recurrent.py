"""GRU cells and the encoder/decoder steps of the model.

Gate convention (fixed so the zero-parameter case is exact)::

    u  = sigmoid(x W_u + h U_u + b_u)
    r  = sigmoid(x W_r + h U_r + b_r)
    c  = tanh(x W_c + r * (h U_c) + b_c)
    h' = (1 - u) * h + u * c

The three gate blocks are stored side by side in ``W`` (input x 3H),
``U`` (H x 3H) and ``b`` (3H) so one step needs two matrix products.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor, _make
from .errors import ContractError


class GRUCell:
    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator | None = None):
        if input_size < 0 or hidden_size < 1:
            raise ContractError(f"invalid GRU sizes input={input_size} hidden={hidden_size}")
        self.input_size = input_size
        self.hidden_size = hidden_size
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(hidden_size)
        H = hidden_size
        self.W = Tensor(rng.uniform(-bound, bound, (input_size, 3 * H)), requires_grad=True)
        self.U = Tensor(rng.uniform(-bound, bound, (H, 3 * H)), requires_grad=True)
        self.b = Tensor(rng.uniform(-bound, bound, 3 * H), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.W, self.U, self.b]

    def state_dict(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.W": self.W.data, f"{prefix}.U": self.U.data, f"{prefix}.b": self.b.data}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str) -> None:
        for name in ("W", "U", "b"):
            arr = np.asarray(state[f"{prefix}.{name}"], dtype=np.float64)
            if arr.shape != getattr(self, name).shape:
                raise ContractError(f"{prefix}.{name}: expected shape {getattr(self, name).shape}, got {arr.shape}")
            getattr(self, name).data = arr.copy()

    # per-gate views, handy for tests and inspection
    def block(self, which: str) -> dict[str, np.ndarray]:
        k = "urc".index(which)
        H = self.hidden_size
        sl = slice(k * H, (k + 1) * H)
        return {"W": self.W.data[:, sl], "U": self.U.data[:, sl], "b": self.b.data[sl]}

    def __call__(self, x, h) -> Tensor:
        return gru_step(self, x, h)

    def initial_state(self, batch: int | None = None) -> Tensor:
        shape = (self.hidden_size,) if batch is None else (batch, self.hidden_size)
        return Tensor(np.zeros(shape))


def _check_dims(cell: GRUCell, x: Tensor, h: Tensor) -> None:
    if x.shape[-1] != cell.input_size or h.shape[-1] != cell.hidden_size or x.shape[:-1] != h.shape[:-1]:
        raise ContractError(
            f"gru_step: input {x.shape} / hidden {h.shape} do not match cell "
            f"(input_size={cell.input_size}, hidden_size={cell.hidden_size})"
        )


def gru_step(cell: GRUCell, x, h) -> Tensor:
    """One GRU update as a single graph node with a hand-written backward."""
    x, h = ag.as_tensor(x), ag.as_tensor(h)
    _check_dims(cell, x, h)
    squeeze = x.ndim == 1
    xd = x.data[None] if squeeze else x.data
    hd = h.data[None] if squeeze else h.data
    W, U, b = cell.W.data, cell.U.data, cell.b.data
    H = cell.hidden_size

    gx = ag.mm(xd, W)
    gx += b
    gh = ag.mm(hd, U)
    ur = gx[:, :2 * H] + gh[:, :2 * H]
    ur *= 0.5
    np.tanh(ur, out=ur)
    ur *= 0.5
    ur += 0.5  # sigmoid(a) = (1 + tanh(a / 2)) / 2
    u = ur[:, :H]
    r = ur[:, H:]
    hc = gh[:, 2 * H:]
    c = np.tanh(gx[:, 2 * H:] + r * hc)
    out = (1.0 - u) * hd + u * c

    def backward(g):
        g = g[None] if squeeze else g
        dgx = np.empty_like(gx)
        dau = dgx[:, :H]
        dar = dgx[:, H:2 * H]
        dac = dgx[:, 2 * H:]
        np.multiply(g, u, out=dac)
        dac *= 1.0 - c * c
        np.multiply(g, c - hd, out=dau)
        dau *= u * (1.0 - u)
        np.multiply(dac, hc, out=dar)
        dar *= r * (1.0 - r)
        dgh = dgx.copy()
        dgh[:, 2 * H:] *= r
        dx = dgx @ W.T if x.requires_grad else None
        dh = g * (1.0 - u) + dgh @ U.T if h.requires_grad else None
        dW = xd.T @ dgx if cell.W.requires_grad else None
        dU = hd.T @ dgh if cell.U.requires_grad else None
        db = dgx.sum(axis=0) if cell.b.requires_grad else None
        if squeeze:
            dx = None if dx is None else dx[0]
            dh = None if dh is None else dh[0]
        return dx, dh, dW, dU, db

    return _make(out[0] if squeeze else out, "gru", (x, h, cell.W, cell.U, cell.b), backward)


def gru_step_reference(cell: GRUCell, x, h) -> Tensor:
    """The same update composed from primitive ops (independent gradient route)."""
    x, h = ag.as_tensor(x), ag.as_tensor(h)
    _check_dims(cell, x, h)
    H = cell.hidden_size
    gx = ag.matmul(x, cell.W) + cell.b
    gh = ag.matmul(h, cell.U)
    cols = (slice(None),) * (x.ndim - 1)
    u = ag.sigmoid(gx[cols + (slice(0, H),)] + gh[cols + (slice(0, H),)])
    r = ag.sigmoid(gx[cols + (slice(H, 2 * H),)] + gh[cols + (slice(H, 2 * H),)])
    c = ag.tanh(gx[cols + (slice(2 * H, 3 * H),)] + r * gh[cols + (slice(2 * H, 3 * H),)])
    return (1.0 - u) * h + u * c


@dataclass
class EncoderDecoderState:
    h_enc: Tensor
    h_dec: Tensor

    @classmethod
    def zeros(cls, enc_size: int, dec_size: int, batch: int | None = None) -> "EncoderDecoderState":
        lead = () if batch is None else (batch,)
        return cls(Tensor(np.zeros(lead + (enc_size,))), Tensor(np.zeros(lead + (dec_size,))))


def encode_step(cell: GRUCell, state: EncoderDecoderState, x_prev, cov) -> Tensor:
    """Advance the encoder on ``concat(x_prev, cov)``; target first, covariates after."""
    x_prev = ag.as_tensor(x_prev)
    cov = ag.as_tensor(cov)
    if x_prev.ndim == cov.ndim - 1:
        x_prev = ag.reshape(x_prev, x_prev.shape + (1,))
    inp = ag.concat([x_prev, cov], axis=-1) if cov.shape[-1] else x_prev
    state.h_enc = gru_step(cell, inp, state.h_enc)
    return state.h_enc


def decode_step(cell: GRUCell, state: EncoderDecoderState, z_st) -> Tensor:
    """Advance the decoder; its only input is the (straight-through) quantised latent."""
    state.h_dec = gru_step(cell, z_st, state.h_dec)
    return state.h_dec
