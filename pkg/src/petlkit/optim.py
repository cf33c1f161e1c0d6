"""AdamW with decoupled weight decay, over named parameter groups."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, Parameter


@dataclass
class OptimizerState:
    """Per-parameter adaptive moments; buffers exist only for trainable params."""

    lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class AdamW:
    """Decoupled-weight-decay Adam over (parameter, learning rate) groups."""

    def __init__(
        self,
        groups: list[tuple[list[Parameter], float]],
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.groups = [(list(params), lr) for params, lr in groups]
        seen: set[str] = set()
        for params, _ in self.groups:
            for p in params:
                if p.name in seen:
                    raise ContractError(f"parameter {p.name!r} registered twice")
                seen.add(p.name)
        self.state = OptimizerState(
            lr=self.groups[0][1] if self.groups else 0.0,
            betas=betas,
            eps=eps,
            weight_decay=weight_decay,
        )

    def step(self) -> None:
        """Update trainable parameters from accumulated gradients, then clear them.

        Frozen parameters are never touched, even if a gradient is present.
        """
        st = self.state
        st.step_count += 1
        b1, b2 = st.betas
        bc1 = 1.0 - b1 ** st.step_count
        bc2 = 1.0 - b2 ** st.step_count
        for params, lr in self.groups:
            for p in params:
                if not p.trainable:
                    continue
                g = p.tensor.grad
                if g is None:
                    raise ContractError(
                        f"no gradient for trainable parameter {p.name!r}; run backward first"
                    )
                if p.name not in st.m:
                    st.m[p.name] = np.zeros_like(p.data)
                    st.v[p.name] = np.zeros_like(p.data)
                m = st.m[p.name]
                v = st.v[p.name]
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                m_hat = m / bc1
                v_hat = v / bc2
                update = m_hat / (np.sqrt(v_hat) + st.eps)
                if st.weight_decay:
                    update = update + st.weight_decay * p.data
                p.data[...] = p.data - lr * update
                p.tensor.grad = None

    def zero_grad(self) -> None:
        for params, _ in self.groups:
            for p in params:
                p.tensor.grad = None
