"""LSTM memory cell and a stacked runner over feature sequences.

Gate equations, for input x and previous state (h, c)::

    i  = sigmoid(W1_i x + Wh_i h + b_i)
    f  = sigmoid(W1_f x + Wh_f h + b_f)
    o  = sigmoid(W1_o x + Wh_o h + b_o)
    g  = tanh(W1_c x + Wh_c h + b_c)        # candidate
    c' = i * g + f * c
    h' = o * tanh(c')
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .autodiff import ShapeError, Tensor, add, hadamard, linear, sigmoid, tanh

GATES = ("i", "f", "o", "c")


@dataclass
class LstmCellParams:
    W1_i: Tensor
    W1_f: Tensor
    W1_o: Tensor
    W1_c: Tensor
    Wh_i: Tensor
    Wh_f: Tensor
    Wh_o: Tensor
    Wh_c: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_c: Tensor

    def __post_init__(self):
        q, p = self.W1_i.shape
        for g in GATES:
            if getattr(self, f"W1_{g}").shape != (q, p):
                raise ShapeError(f"W1_{g} must be {(q, p)}")
            if getattr(self, f"Wh_{g}").shape != (q, q):
                raise ShapeError(f"Wh_{g} must be {(q, q)}")
            if getattr(self, f"b_{g}").shape != (q,):
                raise ShapeError(f"b_{g} must be {(q,)}")

    @property
    def input_size(self) -> int:
        return self.W1_i.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.W1_i.shape[0]

    @classmethod
    def init(
        cls,
        p: int,
        q: int,
        rng: np.random.Generator | None = None,
        forget_bias: float = 1.0,
    ) -> "LstmCellParams":
        """Uniform(-1/sqrt(q), 1/sqrt(q)) weights; all zeros when ``rng`` is None."""
        bound = 1.0 / np.sqrt(q)

        def draw(shape):
            if rng is None:
                return Tensor(np.zeros(shape), requires_grad=True)
            return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

        kw = {}
        for g in GATES:
            kw[f"W1_{g}"] = draw((q, p))
        for g in GATES:
            kw[f"Wh_{g}"] = draw((q, q))
        for g in GATES:
            b = np.zeros(q)
            if g == "f" and rng is not None:
                b[:] = forget_bias
            kw[f"b_{g}"] = Tensor(b, requires_grad=True)
        return cls(**kw)

    def parameters(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class LstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, q: int, batch: int | None = None) -> "LstmState":
        shape = (q,) if batch is None else (batch, q)
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


def _gate(params: LstmCellParams, g: str, x: Tensor, h: Tensor) -> Tensor:
    return add(linear(x, getattr(params, f"W1_{g}"), getattr(params, f"b_{g}")),
               linear(h, getattr(params, f"Wh_{g}")))


def cell_step(params: LstmCellParams, x: Tensor, prev: LstmState) -> LstmState:
    if x.shape[-1] != params.input_size:
        raise ShapeError(f"cell input has size {x.shape[-1]}, expected {params.input_size}")
    if prev.h.shape[-1] != params.hidden_size or prev.h.shape != prev.c.shape:
        raise ShapeError(f"state shapes {prev.h.shape}/{prev.c.shape} do not match hidden size {params.hidden_size}")
    i = sigmoid(_gate(params, "i", x, prev.h))
    f = sigmoid(_gate(params, "f", x, prev.h))
    o = sigmoid(_gate(params, "o", x, prev.h))
    candidate = tanh(_gate(params, "c", x, prev.h))
    c = add(hadamard(i, candidate), hadamard(f, prev.c))
    h = hadamard(o, tanh(c))
    return LstmState(h=h, c=c)


def run_stacked(
    layers: Sequence[LstmCellParams],
    sequence: Sequence[Tensor],
    init: Sequence[LstmState] | None = None,
    return_all: bool = False,
):
    """Run a stack of cells over ``sequence`` (time-ordered inputs).

    Layer 1 reads the inputs, each higher layer reads the per-step ``h`` of the
    layer below. Returns the top layer's final state, plus the list of final
    states of every layer and the top layer's per-step ``h`` when
    ``return_all`` is set.
    """
    if len(sequence) == 0:
        raise ValueError("run_stacked needs a non-empty sequence")
    if not layers:
        raise ValueError("run_stacked needs at least one layer")
    for lower, upper in zip(layers, layers[1:]):
        if upper.input_size != lower.hidden_size:
            raise ShapeError(f"layer input size {upper.input_size} != previous hidden size {lower.hidden_size}")
    batch = sequence[0].shape[0] if sequence[0].ndim == 2 else None
    states = list(init) if init is not None else [LstmState.zeros(l.hidden_size, batch) for l in layers]
    tops = []
    for x in sequence:
        inp = x
        for k, params in enumerate(layers):
            states[k] = cell_step(params, inp, states[k])
            inp = states[k].h
        tops.append(inp)
    if return_all:
        return states[-1], states, tops
    return states[-1]
