"""Fusion strategies: differentiable operators on (z_TS, z_Text) at a hook.

Naive strategies (additive, concat) attach at the positions named in the
spec; constrained strategies (gating, film, orthogonal, cfa) always
attach at every encoder hook. All operators accept batched inputs of
shape (..., D) with matching trailing dimension.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .autodiff import (
    Tensor,
    ShapeMismatchError,
    add,
    concat_last,
    div,
    layernorm,
    matmul,
    mul,
    relu,
    sigmoid,
    sub,
    sum_,
    transpose,
)
from .layers import glorot_uniform, prefixed

NAIVE_STRATEGIES = ("additive", "concat")
CONSTRAINED_STRATEGIES = ("gating", "film", "orthogonal", "cfa")
STRATEGIES = ("none",) + NAIVE_STRATEGIES + CONSTRAINED_STRATEGIES
POSITIONS = ("first", "middle", "last")

ORTHO_EPS = 1e-12


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class FusionSpec:
    """Which strategy to apply, where, and with what reduction ratio."""

    strategy: str = "none"
    positions: Tuple[str, ...] = ("middle",)
    reduction: int = 8

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown fusion strategy {self.strategy!r}")
        bad = [p for p in self.positions if p not in POSITIONS]
        if bad:
            raise ConfigurationError(f"unknown fusion positions {bad}")
        if self.reduction < 1:
            raise ConfigurationError(f"reduction ratio must be >= 1, got {self.reduction}")

    @property
    def is_constrained(self) -> bool:
        return self.strategy in CONSTRAINED_STRATEGIES

    def label(self) -> str:
        if self.strategy == "none":
            return "unimodal"
        if self.is_constrained:
            return self.strategy
        return f"{self.strategy}-{'+'.join(self.positions)}"


def _check_dims(op: str, z_ts: Tensor, z_text: Tensor) -> None:
    if z_ts.shape != z_text.shape:
        raise ShapeMismatchError(op, z_ts.shape, z_text.shape)


def _as_batch(z: Tensor) -> Tuple[Tensor, bool]:
    """Lift a bare vector to (1, D) so matmul-based ops apply uniformly."""
    if z.ndim == 1:
        from .autodiff import reshape

        return reshape(z, (1, z.shape[0])), True
    return z, False


def _maybe_squeeze(z: Tensor, squeezed: bool) -> Tensor:
    if squeezed:
        from .autodiff import reshape

        return reshape(z, (z.shape[-1],))
    return z


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass
class CfaParams:
    """Low-rank residual adapter: down-project, layernorm, relu, up-project."""

    W_down: Tensor
    W_up: Tensor
    ln_scale: Tensor
    ln_shift: Tensor

    @classmethod
    def init(cls, dim: int, reduction: int, rng: np.random.Generator) -> "CfaParams":
        bottleneck = dim // reduction
        if bottleneck < 1:
            raise ConfigurationError(
                f"cfa bottleneck floor({dim}/{reduction}) must be >= 1"
            )
        w_down = glorot_uniform(rng, dim, bottleneck, (bottleneck, dim))
        return cls(
            W_down=Tensor(w_down, requires_grad=True),
            W_up=Tensor(np.zeros((dim, bottleneck)), requires_grad=True),
            ln_scale=Tensor(np.ones(bottleneck), requires_grad=True),
            ln_shift=Tensor(np.zeros(bottleneck), requires_grad=True),
        )

    @property
    def bottleneck(self) -> int:
        return self.W_down.shape[0]

    def params(self) -> Dict[str, Tensor]:
        return {
            "W_down": self.W_down,
            "W_up": self.W_up,
            "ln_scale": self.ln_scale,
            "ln_shift": self.ln_shift,
        }

    def param_count_closed_form(self) -> int:
        b, d = self.W_down.shape
        return b * d + d * b + 2 * b


@dataclass
class GateParams:
    W_g: Tensor
    b_g: Tensor

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, inert: bool = False) -> "GateParams":
        if inert:
            w = np.zeros((dim, 2 * dim))
            b = np.full(dim, -40.0)
        else:
            w = glorot_uniform(rng, 2 * dim, dim, (dim, 2 * dim))
            b = np.zeros(dim)
        return cls(W_g=Tensor(w, requires_grad=True), b_g=Tensor(b, requires_grad=True))

    def params(self) -> Dict[str, Tensor]:
        return {"W_g": self.W_g, "b_g": self.b_g}

    def param_count_closed_form(self) -> int:
        d = self.W_g.shape[0]
        return d * 2 * d + d


@dataclass
class FilmParams:
    gamma_W: Tensor
    gamma_b: Tensor
    beta_W: Tensor
    beta_b: Tensor

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator) -> "FilmParams":
        return cls(
            gamma_W=Tensor(np.zeros((dim, dim)), requires_grad=True),
            gamma_b=Tensor(np.ones(dim), requires_grad=True),
            beta_W=Tensor(np.zeros((dim, dim)), requires_grad=True),
            beta_b=Tensor(np.zeros(dim), requires_grad=True),
        )

    def params(self) -> Dict[str, Tensor]:
        return {
            "gamma_W": self.gamma_W,
            "gamma_b": self.gamma_b,
            "beta_W": self.beta_W,
            "beta_b": self.beta_b,
        }

    def param_count_closed_form(self) -> int:
        d = self.gamma_W.shape[0]
        return 2 * (d * d + d)


@dataclass
class ConcatProj:
    W_cat: Tensor
    b_cat: Tensor

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator) -> "ConcatProj":
        # [I | 0] start: concat reduces to the identity on z_TS
        w = np.concatenate([np.eye(dim), np.zeros((dim, dim))], axis=1)
        return cls(
            W_cat=Tensor(w, requires_grad=True),
            b_cat=Tensor(np.zeros(dim), requires_grad=True),
        )

    def params(self) -> Dict[str, Tensor]:
        return {"W_cat": self.W_cat, "b_cat": self.b_cat}

    def param_count_closed_form(self) -> int:
        d = self.W_cat.shape[0]
        return d * 2 * d + d


# ---------------------------------------------------------------------------
# fusion operators
# ---------------------------------------------------------------------------


def fuse_additive(z_ts: Tensor, z_text: Tensor) -> Tensor:
    _check_dims("fuse_additive", z_ts, z_text)
    return add(z_ts, z_text)


def fuse_concat(z_ts: Tensor, z_text: Tensor, p: ConcatProj) -> Tensor:
    _check_dims("fuse_concat", z_ts, z_text)
    zt, squeezed = _as_batch(z_ts)
    zx, _ = _as_batch(z_text)
    both = concat_last([zt, zx])
    out = add(matmul(both, transpose(p.W_cat, (1, 0))), p.b_cat)
    return _maybe_squeeze(out, squeezed)


def fuse_gating(
    z_ts: Tensor, z_text: Tensor, p: GateParams, record: Optional[dict] = None
) -> Tensor:
    _check_dims("fuse_gating", z_ts, z_text)
    zt, squeezed = _as_batch(z_ts)
    zx, _ = _as_batch(z_text)
    gate = sigmoid(add(matmul(concat_last([zt, zx]), transpose(p.W_g, (1, 0))), p.b_g))
    if record is not None:
        record["gate"] = gate.data.copy()
    out = add(zt, mul(gate, zx))
    return _maybe_squeeze(out, squeezed)


def fuse_film(z_ts: Tensor, z_text: Tensor, p: FilmParams) -> Tensor:
    _check_dims("fuse_film", z_ts, z_text)
    zt, squeezed = _as_batch(z_ts)
    zx, _ = _as_batch(z_text)
    gamma = add(matmul(zx, transpose(p.gamma_W, (1, 0))), p.gamma_b)
    beta = add(matmul(zx, transpose(p.beta_W, (1, 0))), p.beta_b)
    out = add(mul(gamma, zt), beta)
    return _maybe_squeeze(out, squeezed)


def fuse_orthogonal(
    z_ts: Tensor, z_text: Tensor, record: Optional[dict] = None
) -> Tensor:
    """Inject only the component of z_Text orthogonal to z_TS.

    Near-zero z_TS vectors skip the projection (degenerate flag). The
    projection is applied twice: the second pass removes the rounding
    residue the first leaves behind on near-parallel inputs.
    """
    _check_dims("fuse_orthogonal", z_ts, z_text)
    ss_data = np.sum(z_ts.data * z_ts.data, axis=-1, keepdims=True)
    degenerate = ss_data < ORTHO_EPS
    if record is not None:
        record["degenerate"] = bool(degenerate.any())
    mask = Tensor(np.where(degenerate, 0.0, 1.0))
    fill = Tensor(np.where(degenerate, 1.0, 0.0))

    ss = add(sum_(mul(z_ts, z_ts), axis=-1, keepdims=True), fill)
    perp = z_text
    for _ in range(2):
        dot = sum_(mul(z_ts, perp), axis=-1, keepdims=True)
        coef = mul(div(dot, ss), mask)
        perp = sub(perp, mul(coef, z_ts))
    if record is not None:
        record["perp"] = perp.data.copy()
    return add(z_ts, perp)


def fuse_cfa(
    z_ts: Tensor, z_text: Tensor, p: CfaParams, record: Optional[dict] = None
) -> Tensor:
    _check_dims("fuse_cfa", z_ts, z_text)
    zt, squeezed = _as_batch(z_ts)
    zx, _ = _as_batch(z_text)
    hidden = matmul(zx, transpose(p.W_down, (1, 0)))
    hidden = relu(layernorm(hidden, p.ln_scale, p.ln_shift))
    adapter_out = matmul(hidden, transpose(p.W_up, (1, 0)))
    if record is not None:
        record["adapter_output"] = adapter_out.data.copy()
    out = add(zt, adapter_out)
    return _maybe_squeeze(out, squeezed)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


@dataclass
class FusionSite:
    name: str
    dim: int
    strategy: str
    params: object = None

    def apply(self, z_ts: Tensor, z_text: Tensor, record: Optional[dict] = None) -> Tensor:
        site_record = None
        if record is not None:
            site_record = record.setdefault(self.name, {})
        if self.strategy == "additive":
            return fuse_additive(z_ts, z_text)
        if self.strategy == "concat":
            return fuse_concat(z_ts, z_text, self.params)
        if self.strategy == "gating":
            return fuse_gating(z_ts, z_text, self.params, site_record)
        if self.strategy == "film":
            return fuse_film(z_ts, z_text, self.params)
        if self.strategy == "orthogonal":
            return fuse_orthogonal(z_ts, z_text, site_record)
        if self.strategy == "cfa":
            return fuse_cfa(z_ts, z_text, self.params, site_record)
        raise ConfigurationError(f"site {self.name}: unknown strategy {self.strategy!r}")

    def site_params(self) -> Dict[str, Tensor]:
        return {} if self.params is None else self.params.params()

    def param_count_closed_form(self) -> int:
        return 0 if self.params is None else self.params.param_count_closed_form()


@dataclass
class FusionBank:
    """Per-site fusion parameters attached to a backbone's hooks."""

    spec: FusionSpec
    sites: Dict[str, FusionSite] = field(default_factory=dict)

    def has_site(self, name: str) -> bool:
        return name in self.sites

    def apply(
        self, name: str, z_ts: Tensor, z_text: Tensor, record: Optional[dict] = None
    ) -> Tensor:
        return self.sites[name].apply(z_ts, z_text, record)

    def params(self) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for name, site in self.sites.items():
            out.update(prefixed(f"fusion.{name}", site.site_params()))
        return out

    def param_count_closed_form(self) -> int:
        return sum(site.param_count_closed_form() for site in self.sites.values())


def _site_params(strategy: str, dim: int, reduction: int, rng, inert: bool):
    if strategy == "concat":
        return ConcatProj.init(dim, rng)
    if strategy == "gating":
        return GateParams.init(dim, rng, inert=inert)
    if strategy == "film":
        return FilmParams.init(dim, rng)
    if strategy == "cfa":
        return CfaParams.init(dim, reduction, rng)
    return None  # additive / orthogonal are parameter-free


def build_fusion(
    spec: FusionSpec,
    site_dims: Sequence[Tuple[str, int]],
    rng: np.random.Generator,
    inert: bool = False,
) -> Optional[FusionBank]:
    """Instantiate independent fusion parameters for every hook site."""
    if spec.strategy == "none":
        return None
    bank = FusionBank(spec=spec)
    for name, dim in site_dims:
        bank.sites[name] = FusionSite(
            name=name,
            dim=dim,
            strategy=spec.strategy,
            params=_site_params(spec.strategy, dim, spec.reduction, rng, inert),
        )
    return bank
