"""Small trainable building blocks shared by backbones, fusion and text path."""

from __future__ import annotations

import math
from typing import Dict, Optional

import numpy as np

from .autodiff import Tensor, broadcast_add, matmul, transpose


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """Affine map x @ W^T + b with W stored as (out_features, in_features)."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: Optional[np.random.Generator] = None,
        *,
        weight: Optional[np.ndarray] = None,
        bias: Optional[np.ndarray] = None,
    ):
        self.in_features = in_features
        self.out_features = out_features
        if weight is None:
            if rng is None:
                raise ValueError("Linear: provide either rng or explicit weight")
            weight = glorot_uniform(rng, in_features, out_features, (out_features, in_features))
        if bias is None:
            bias = np.zeros(out_features)
        self.W = Tensor(np.asarray(weight, dtype=np.float64), requires_grad=True)
        self.b = Tensor(np.asarray(bias, dtype=np.float64), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return broadcast_add(matmul(x, transpose(self.W, (1, 0))), self.b)

    def params(self) -> Dict[str, Tensor]:
        return {"W": self.W, "b": self.b}

    def param_count(self) -> int:
        return self.out_features * self.in_features + self.out_features


def prefixed(prefix: str, params: Dict[str, Tensor]) -> Dict[str, Tensor]:
    return {f"{prefix}.{k}": v for k, v in params.items()}


def snapshot(params: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


def restore(params: Dict[str, Tensor], saved: Dict[str, np.ndarray]) -> None:
    for k, v in params.items():
        v.set_data(saved[k])
