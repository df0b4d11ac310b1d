"""Multistep Leaky Integrate-and-Fire neurons.

Forward dynamics (per time step, elementwise):

    H[t] = V[t-1] + (X[t] - (V[t-1] - V_reset)) / tau
    S[t] = step(H[t] - V_th)            (1 when the argument is >= 0)
    V[t] = H[t] * (1 - S[t]) + V_reset * S[t]

The hard threshold is not differentiable, so the recorded backward uses the
derivative of the sigmoid 1/(1+exp(-alpha*x)) in its place. A fully smooth
"relaxed" mode (sigmoid firing, no binary reset) exists for end-to-end
finite-difference checking only.
"""

from __future__ import annotations

from dataclasses import dataclass

from .tensor import Tensor, spike_threshold, stack

SPIKING = "spiking"
RELAXED = "relaxed"


@dataclass(frozen=True)
class LIFParams:
    """Neuron constants shared by every site of a spiking layer."""

    tau: float = 2.0
    v_threshold: float = 1.0
    v_reset: float = 0.0
    alpha: float = 4.0
    # treat the reset term's dependence on the spike as a constant in backward
    detach_reset: bool = True

    def __post_init__(self):
        if self.tau < 1.0:
            raise ValueError(f"tau must be >= 1, got {self.tau}")
        if self.v_threshold <= self.v_reset:
            raise ValueError("v_threshold must exceed v_reset")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")


@dataclass
class MembraneState:
    """Per-neuron membrane potentials carried across time steps."""

    v: Tensor

    @classmethod
    def initial(cls, like: Tensor, params: LIFParams) -> "MembraneState":
        import numpy as np

        return cls(Tensor(np.full(like.shape, params.v_reset, dtype=like.data.dtype)))


def lif_step(state: MembraneState, x: Tensor, params: LIFParams):
    """One integrate-fire-reset step. Returns (spikes, next state)."""
    if state.v.shape != x.shape:
        raise ValueError(f"state shape {state.v.shape} != input shape {x.shape}")
    v = state.v
    h = v + (x - (v - params.v_reset)) * (1.0 / params.tau)
    s = spike_threshold(h - params.v_threshold, params.alpha)
    s_reset = s.detach() if params.detach_reset else s
    v_next = h * (1.0 - s_reset) + s_reset * params.v_reset
    return s, MembraneState(v_next)


def _relaxed_step(state: MembraneState, x: Tensor, params: LIFParams):
    v = state.v
    h = v + (x - (v - params.v_reset)) * (1.0 / params.tau)
    s = ((h - Tensor(params.v_threshold)) * params.alpha).sigmoid()
    v_next = h * (1.0 - s) + s * params.v_reset
    return s, MembraneState(v_next)


def multistep_lif(
    x: Tensor,
    params: LIFParams,
    mode: str = SPIKING,
    input_scale: float = 1.0,
) -> Tensor:
    """Run LIF dynamics along the leading time axis of x ([T, ...]).

    The membrane starts at V_reset. ``input_scale`` pre-multiplies the input
    current inside the neuron, which is how constant attention scales are
    absorbed without a standalone float multiply in the spike path.
    """
    if x.shape[0] < 1:
        raise ValueError("multistep_lif needs at least one time step")
    if mode not in (SPIKING, RELAXED):
        raise ValueError(f"unknown mode {mode!r}")
    import numpy as np

    step = lif_step if mode == SPIKING else _relaxed_step
    state = MembraneState(
        Tensor(np.full(x.shape[1:], params.v_reset, dtype=x.data.dtype))
    )
    outs = []
    for t in range(x.shape[0]):
        xt = _take0(x, t)
        if input_scale != 1.0:
            xt = xt * input_scale
        s, state = step(state, xt, params)
        outs.append(s)
    return stack(outs, axis=0)


def _take0(x: Tensor, i: int) -> Tensor:
    """Differentiable x[i] along axis 0."""
    import numpy as np

    out_data = x.data[i]
    out = Tensor(out_data, _parents=(x,) if (x.requires_grad or x._parents) else ())

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[i] = g
        x._accumulate(gx)

    out._backward = bwd
    return out
