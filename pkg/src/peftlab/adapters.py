"""Single adaptation modules: bottleneck adapters and low-rank (LoRA) deltas.

These are the trainable parameters injected into the frozen backbone. Both
kinds start near-identity (zero up-projection / zero B factor) so that a
freshly adapted model reproduces the frozen model's behavior exactly at
step 0 — a property the tests pin down.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Tuple

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, gelu, matmul, transpose

ADAPTER_INIT_STD = 0.01
LORA_INIT_STD = 0.02
LORA_DEFAULT_ALPHA = 8.0


@dataclass
class AdapterModule:
    """Residual bottleneck: project d -> r, GeLU, project r -> d.

    Both projections carry biases, and the parameter calculator counts
    them alongside the weights.
    """

    w_down: Tensor  # (d, r)
    b_down: Tensor  # (r,)
    w_up: Tensor    # (r, d)
    b_up: Tensor    # (d,)
    r: int

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        yield "w_down", self.w_down
        yield "b_down", self.b_down
        yield "w_up", self.w_up
        yield "b_up", self.b_up

    @property
    def d(self) -> int:
        return self.w_down.shape[0]


@dataclass
class LoraModule:
    """Low-rank delta for a frozen projection: x @ A^T @ B^T, scaled alpha/r."""

    A: Tensor  # (r, d_in)
    B: Tensor  # (d_out, r)
    rank: int
    alpha: float = LORA_DEFAULT_ALPHA

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        yield "A", self.A
        yield "B", self.B


def init_adapter(d: int, r: int, seed: int) -> AdapterModule:
    """W_down ~ N(0, 0.01^2), W_up = 0, biases = 0: identity at step 0."""
    if not (0 < r < d):
        raise ConfigError(f"adapter bottleneck requires 0 < r < d, got r={r}, d={d}")
    rng = np.random.default_rng(seed)
    return AdapterModule(
        w_down=Tensor(rng.normal(0.0, ADAPTER_INIT_STD, size=(d, r)), requires_grad=True),
        b_down=Tensor(np.zeros(r), requires_grad=True),
        w_up=Tensor(np.zeros((r, d)), requires_grad=True),
        b_up=Tensor(np.zeros(d), requires_grad=True),
        r=r,
    )


def init_lora(d_in: int, d_out: int, r: int, alpha: float = LORA_DEFAULT_ALPHA,
              seed: int = 0) -> LoraModule:
    """A ~ N(0, 0.02^2), B = 0: the delta vanishes at step 0."""
    if not (0 < r <= min(d_in, d_out)):
        raise ConfigError(
            f"lora rank must satisfy 0 < r <= min(d_in, d_out); got r={r}, "
            f"d_in={d_in}, d_out={d_out}"
        )
    rng = np.random.default_rng(seed)
    return LoraModule(
        A=Tensor(rng.normal(0.0, LORA_INIT_STD, size=(r, d_in)), requires_grad=True),
        B=Tensor(np.zeros((d_out, r)), requires_grad=True),
        rank=r,
        alpha=float(alpha),
    )


def adapter_forward(m: AdapterModule, x: Tensor) -> Tensor:
    """x + gelu(x @ W_down + b_down) @ W_up + b_up, on (..., d) inputs."""
    if x.shape[-1] != m.w_down.shape[0]:
        raise ShapeError(
            f"adapter expects last dim {m.w_down.shape[0]}, got input shape {x.shape}"
        )
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, -1)
    h = gelu(matmul(x, m.w_down) + m.b_down)
    out = x + matmul(h, m.w_up) + m.b_up
    return out.reshape(-1) if squeeze else out


def lora_forward(m: LoraModule, x: Tensor, frozen_w: Tensor) -> Tensor:
    """x @ frozen_w^T + (alpha/r) * x @ A^T @ B^T.

    ``frozen_w`` follows the (d_out, d_in) weight-matrix convention, matching
    the shapes of A (r, d_in) and B (d_out, r).
    """
    d_out, d_in = frozen_w.shape
    if m.A.shape[1] != d_in or m.B.shape[0] != d_out:
        raise ShapeError(
            f"lora factors A{m.A.shape} / B{m.B.shape} do not match frozen "
            f"matrix {frozen_w.shape}"
        )
    if x.shape[-1] != d_in:
        raise ShapeError(f"lora input last dim {x.shape[-1]} != d_in {d_in}")
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, -1)
    base = matmul(x, transpose(frozen_w))
    delta = matmul(matmul(x, transpose(m.A)), transpose(m.B)) * (m.alpha / m.rank)
    out = base + delta
    return out.reshape(-1) if squeeze else out
