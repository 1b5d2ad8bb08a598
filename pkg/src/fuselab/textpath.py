"""Per-step text representations: toy encoder, trainable text MLP, projection.

The toy encoder stands in for a frozen language model. It maps a
(text type, trend direction, step) triple to a deterministic embedding:

* matching / contradicting text encodes the *described* direction along a
  fixed direction axis (matching describes the true trend, contradicting
  the opposite), plus a phrasing-marker component with opposite signs for
  the two types — matching and contradicting statements are worded
  differently, so their embeddings are not exact negations of each other.
  Matching text carries a strong direction component with a light marker;
  contradicting text is vaguer (weak direction, heavy marker), the way
  hedged wrong statements are in real corpora. Cores are unit length.
* irrelevant text is a per-step pseudo-random vector orthogonal to both
  axes.

A small deterministic jitter (sigma = 0.01) keyed on the step index makes
every instance unique. All randomness is FNV-1a seeded, so identical
inputs produce identical vectors on any platform.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from . import rng as _rng
from .autodiff import Tensor, relu
from .layers import Linear, prefixed

TEXT_TYPES = ("matching", "contradicting", "irrelevant")

JITTER_SIGMA = 0.01


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


@dataclass
class ToyEncoder:
    """Deterministic text embedding provider for the synthetic benchmark."""

    dim: int = 32
    hash_seed: int = 0
    matching_mix: tuple = (0.94, 0.34)  # (direction, marker) weights
    contradicting_mix: tuple = (0.64, 0.77)
    _axes: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.dim < 4:
            raise ValueError("ToyEncoder: dim must be at least 4")
        u = _unit(self._draw("direction"))
        m = self._draw("marker")
        m = _unit(m - (m @ u) * u)
        self._axes = {"direction": u, "marker": m}

    def _draw(self, *names: str) -> np.ndarray:
        return _rng.stream(self.hash_seed, "toy-encoder", *names).uniform(-1.0, 1.0, self.dim)

    @property
    def direction_axis(self) -> np.ndarray:
        return self._axes["direction"]

    @property
    def marker_axis(self) -> np.ndarray:
        return self._axes["marker"]

    def core(self, text_type: str, trend_direction: int, step: int = 0) -> np.ndarray:
        """Canonical embedding before jitter (unit length)."""
        u, m = self._axes["direction"], self._axes["marker"]
        if text_type == "matching":
            dw, mw = self.matching_mix
            return _unit(dw * trend_direction * u + mw * m)
        if text_type == "contradicting":
            dw, mw = self.contradicting_mix
            return _unit(-dw * trend_direction * u - mw * m)
        if text_type == "irrelevant":
            v = self._draw("irrelevant", str(step))
            v = v - (v @ u) * u - (v @ m) * m
            return _unit(v)
        raise ValueError(f"unknown text type: {text_type!r}")

    def encode(self, text_type: str, trend_direction: int, step: int = 0) -> np.ndarray:
        core = self.core(text_type, trend_direction, step)
        jitter = _rng.stream(
            self.hash_seed, "toy-encoder", "jitter", f"{text_type}:{step}"
        ).normal(0.0, JITTER_SIGMA, self.dim)
        return np.clip(core + jitter, -1.0, 1.0)


def toy_encode(
    text_type: str, trend_direction: int, step: int = 0, encoder: ToyEncoder | None = None
) -> np.ndarray:
    """Convenience wrapper around :class:`ToyEncoder` with default settings."""
    return (encoder or ToyEncoder()).encode(text_type, trend_direction, step)


class TextPipeline:
    """Trainable text path: one-hidden-layer MLP then a projection.

    Output is projection(relu(mlp(raw))) with shape (..., target_dim).
    The two stages are separate parameter groups so the optimizer can
    assign them independent learning rates.
    """

    def __init__(self, text_dim: int, target_dim: int, rng: np.random.Generator):
        self.text_dim = text_dim
        self.target_dim = target_dim
        self.mlp = Linear(text_dim, text_dim, rng)
        self.projection = Linear(text_dim, target_dim, rng)

    def __call__(self, raw: Tensor) -> Tensor:
        return self.projection(relu(self.mlp(raw)))

    def params(self) -> Dict[str, Tensor]:
        out = prefixed("text_mlp", self.mlp.params())
        out.update(prefixed("projection", self.projection.params()))
        return out

    def param_count(self) -> int:
        return self.mlp.param_count() + self.projection.param_count()


def project_text(raw: Tensor, pipeline: TextPipeline) -> Tensor:
    """Project raw per-step embeddings to the fusion target dimension."""
    if raw.shape[-1] != pipeline.text_dim:
        raise ValueError(
            f"project_text: raw dim {raw.shape[-1]} != pipeline text dim {pipeline.text_dim}"
        )
    return pipeline(raw)
