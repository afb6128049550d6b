"""Adam and Nadam acting in place on a parameter table."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "nadam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


@torch.no_grad()
def optimizer_step(
    state: OptimizerState, params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor]
) -> OptimizerState:
    """Apply one update to every parameter that has a gradient."""
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, parameter {tuple(params[name].shape)}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        v = state.v[name]
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        v_hat = v / (1 - b2**t)
        if state.kind == "adam":
            m_hat = m / (1 - b1**t)
        else:
            # Nesterov lookahead: next-step momentum plus the current gradient term
            m_hat = b1 * m / (1 - b1 ** (t + 1)) + (1 - b1) * g / (1 - b1**t)
        p.sub_(state.learning_rate * m_hat / (v_hat.sqrt() + state.eps))
    return state
