"""Forecasting backbones with fusion hook points, plus the assembled model.

Hook layout follows the shared forecasting loop: text can enter right
after the input projection (first), after each encoder layer (middle) or
just before the output projection (last). The decomposition backbone has
no hidden width, so its hooks live on the channel dimension: first on the
raw input, middle on the seasonal and trend streams independently after
their lookback-to-horizon maps, last on the summed output.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import rng as _rng
from .autodiff import (
    Tensor,
    add,
    layernorm,
    mean,
    moving_average,
    relu,
    reshape,
    sub,
    transpose,
)
from .fusion import ConfigurationError, FusionBank, FusionSpec, build_fusion
from .layers import Linear, prefixed
from .textpath import TextPipeline, project_text

CHECKPOINT_MAGIC = b"FLABCKPT"
CHECKPOINT_VERSION = 1

# FLOP accounting conventions (per element unless stated):
#   matmul (m,k)@(k,n): 2*m*k*n     bias add: 1     relu: 1
#   sigmoid: 4                      layernorm: 8
#   moving average: kernel adds + 1 divide per output element
ELEMENTWISE = 1
SIGMOID_FLOPS = 4
LAYERNORM_FLOPS = 8


def _linear_flops(steps: int, fan_in: int, fan_out: int) -> int:
    return 2 * steps * fan_in * fan_out + steps * fan_out


def _align_text(z_text: Tensor, target_len: int) -> Tensor:
    """Match text steps to the representation steps at a hook.

    Stepwise when lengths agree; otherwise mean-pool over the lookback
    axis and broadcast across the target steps.
    """
    if z_text.shape[1] == target_len:
        return z_text
    pooled = mean(z_text, axis=1, keepdims=True)
    b, _, d = z_text.shape
    return add(Tensor(np.zeros((b, target_len, d))), pooled)


class MlpBackbone:
    """Per-step input projection, residual-free MLP encoder, flat decoder.

    Exposes hidden states of shape (B, L, D) after the input projection
    and after every encoder block. Windows are mean-centered per channel
    on the way in and the level is restored on the output; without this
    the flat decoder cannot extrapolate the level drift that dominates
    nonstationary series.
    """

    kind = "mlp"

    def __init__(
        self,
        lookback: int,
        horizon: int,
        channels: int,
        hidden_dim: int = 64,
        encoder_layers: int = 2,
        window_centering: bool = True,
        rng: Optional[np.random.Generator] = None,
    ):
        rng = rng if rng is not None else _rng.stream(0, "mlp-init")
        self.lookback = lookback
        self.horizon = horizon
        self.channels = channels
        self.hidden_dim = hidden_dim
        self.encoder_layers = encoder_layers
        self.window_centering = window_centering
        self.input_proj = Linear(channels, hidden_dim, rng)
        self.blocks = []
        for _ in range(encoder_layers):
            self.blocks.append(
                {
                    "linear": Linear(hidden_dim, hidden_dim, rng),
                    "ln_scale": Tensor(np.ones(hidden_dim), requires_grad=True),
                    "ln_shift": Tensor(np.zeros(hidden_dim), requires_grad=True),
                }
            )
        self.decoder = Linear(lookback * hidden_dim, horizon * channels, rng)

    @property
    def hook_dim(self) -> int:
        return self.hidden_dim

    def config(self) -> dict:
        return {
            "kind": self.kind,
            "lookback": self.lookback,
            "horizon": self.horizon,
            "channels": self.channels,
            "hidden_dim": self.hidden_dim,
            "encoder_layers": self.encoder_layers,
            "window_centering": self.window_centering,
        }

    def fusion_sites(self, spec: FusionSpec) -> List[Tuple[str, int]]:
        d = self.hidden_dim
        middle = [(f"middle.{i}", d) for i in range(self.encoder_layers)]
        if spec.is_constrained:
            if not middle:
                raise ConfigurationError(
                    "constrained fusion needs at least one encoder layer"
                )
            return middle
        sites: List[Tuple[str, int]] = []
        for pos in spec.positions:
            if pos == "first":
                sites.append(("first", d))
            elif pos == "middle":
                if not middle:
                    raise ConfigurationError(
                        "middle fusion requested but the backbone has no encoder layers"
                    )
                sites.extend(middle)
            elif pos == "last":
                sites.append(("last", d))
        return sites

    def forward(
        self,
        x: Tensor,
        bank: Optional[FusionBank] = None,
        z_text: Optional[Tensor] = None,
        record: Optional[dict] = None,
    ) -> Tuple[Tensor, List[Tensor]]:
        batch = x.shape[0]
        level = None
        if self.window_centering:
            level = mean(x, axis=1, keepdims=True)
            x = sub(x, level)
        z = self.input_proj(x)
        if bank is not None and bank.has_site("first"):
            z = bank.apply("first", z, _align_text(z_text, self.lookback), record)
        hiddens = [z]
        for i, block in enumerate(self.blocks):
            z = layernorm(relu(block["linear"](z)), block["ln_scale"], block["ln_shift"])
            site = f"middle.{i}"
            if bank is not None and bank.has_site(site):
                z = bank.apply(site, z, _align_text(z_text, self.lookback), record)
            hiddens.append(z)
        if bank is not None and bank.has_site("last"):
            z = bank.apply("last", z, _align_text(z_text, self.lookback), record)
            hiddens[-1] = z
        flat = reshape(z, (batch, self.lookback * self.hidden_dim))
        yhat = reshape(self.decoder(flat), (batch, self.horizon, self.channels))
        if level is not None:
            yhat = add(yhat, level)
        return yhat, hiddens

    def params(self) -> Dict[str, Tensor]:
        out = prefixed("backbone.input_proj", self.input_proj.params())
        for i, block in enumerate(self.blocks):
            out.update(prefixed(f"backbone.block{i}", block["linear"].params()))
            out[f"backbone.block{i}.ln_scale"] = block["ln_scale"]
            out[f"backbone.block{i}.ln_shift"] = block["ln_shift"]
        out.update(prefixed("backbone.decoder", self.decoder.params()))
        return out

    def param_count_closed_form(self) -> int:
        d, c, l, h = self.hidden_dim, self.channels, self.lookback, self.horizon
        per_block = d * d + d + 2 * d
        return (c * d + d) + self.encoder_layers * per_block + (l * d * h * c + h * c)

    def flops_closed_form(self) -> int:
        d, c, l, h = self.hidden_dim, self.channels, self.lookback, self.horizon
        total = _linear_flops(l, c, d)
        for _ in range(self.encoder_layers):
            total += _linear_flops(l, d, d) + l * d * ELEMENTWISE + l * d * LAYERNORM_FLOPS
        total += _linear_flops(1, l * d, h * c)
        return total


class DLinearBackbone:
    """Trend/seasonal decomposition with shared per-channel linear maps."""

    kind = "dlinear"

    def __init__(
        self,
        lookback: int,
        horizon: int,
        channels: int,
        kernel: int = 25,
        rng: Optional[np.random.Generator] = None,
    ):
        if kernel % 2 == 0 or kernel < 1:
            raise ValueError(f"moving-average kernel must be odd, got {kernel}")
        rng = rng if rng is not None else _rng.stream(0, "dlinear-init")
        self.lookback = lookback
        self.horizon = horizon
        self.channels = channels
        self.kernel = kernel
        self.seasonal_linear = Linear(lookback, horizon, rng)
        self.trend_linear = Linear(lookback, horizon, rng)

    @property
    def hook_dim(self) -> int:
        return self.channels

    def config(self) -> dict:
        return {
            "kind": self.kind,
            "lookback": self.lookback,
            "horizon": self.horizon,
            "channels": self.channels,
            "kernel": self.kernel,
        }

    def fusion_sites(self, spec: FusionSpec) -> List[Tuple[str, int]]:
        c = self.channels
        middle = [("middle.seasonal", c), ("middle.trend", c)]
        if spec.is_constrained:
            return middle
        sites: List[Tuple[str, int]] = []
        for pos in spec.positions:
            if pos == "first":
                sites.append(("first", c))
            elif pos == "middle":
                sites.extend(middle)
            elif pos == "last":
                sites.append(("last", c))
        return sites

    def _per_channel(self, z: Tensor, linear: Linear) -> Tensor:
        # (B, L, C) -> (B, C, L) -> map L->H -> (B, H, C)
        return transpose(linear(transpose(z, (0, 2, 1))), (0, 2, 1))

    def forward(
        self,
        x: Tensor,
        bank: Optional[FusionBank] = None,
        z_text: Optional[Tensor] = None,
        record: Optional[dict] = None,
    ) -> Tuple[Tensor, List[Tensor]]:
        if bank is not None and bank.has_site("first"):
            x = bank.apply("first", x, _align_text(z_text, self.lookback), record)
        trend = moving_average(x, self.kernel, axis=1)
        seasonal = sub(x, trend)
        hiddens = [seasonal, trend]
        s_out = self._per_channel(seasonal, self.seasonal_linear)
        t_out = self._per_channel(trend, self.trend_linear)
        if bank is not None and bank.has_site("middle.seasonal"):
            s_out = bank.apply(
                "middle.seasonal", s_out, _align_text(z_text, self.horizon), record
            )
        if bank is not None and bank.has_site("middle.trend"):
            t_out = bank.apply(
                "middle.trend", t_out, _align_text(z_text, self.horizon), record
            )
        hiddens.extend([s_out, t_out])
        yhat = add(s_out, t_out)
        if bank is not None and bank.has_site("last"):
            yhat = bank.apply("last", yhat, _align_text(z_text, self.horizon), record)
        return yhat, hiddens

    def params(self) -> Dict[str, Tensor]:
        out = prefixed("backbone.seasonal", self.seasonal_linear.params())
        out.update(prefixed("backbone.trend", self.trend_linear.params()))
        return out

    def param_count_closed_form(self) -> int:
        return 2 * (self.lookback * self.horizon + self.horizon)

    def flops_closed_form(self) -> int:
        l, c, h, k = self.lookback, self.channels, self.horizon, self.kernel
        total = (k + 1) * l * c  # moving average
        total += l * c * ELEMENTWISE  # seasonal residual
        total += 2 * _linear_flops(c, l, h)  # seasonal + trend maps
        total += h * c * ELEMENTWISE  # stream summation
        return total


BACKBONES = {"mlp": MlpBackbone, "dlinear": DLinearBackbone}


# ---------------------------------------------------------------------------
# assembled model
# ---------------------------------------------------------------------------


@dataclass
class ForwardResult:
    yhat: Tensor
    hiddens: List[Tensor]
    x_leaf: Tensor
    fusion_record: dict


class ForecastModel:
    """Backbone plus optional fusion bank and text pipeline."""

    def __init__(
        self,
        backbone,
        fusion_spec: FusionSpec = FusionSpec("none"),
        fusion_bank: Optional[FusionBank] = None,
        text_pipeline: Optional[TextPipeline] = None,
    ):
        self.backbone = backbone
        self.fusion_spec = fusion_spec
        self.fusion_bank = fusion_bank
        self.text_pipeline = text_pipeline

    @classmethod
    def build(
        cls,
        backbone,
        spec: FusionSpec,
        text_dim: Optional[int] = None,
        rng: Optional[np.random.Generator] = None,
        inert: bool = False,
    ) -> "ForecastModel":
        if spec.strategy == "none":
            return cls(backbone)
        if text_dim is None:
            raise ConfigurationError("fused models need the raw text dimension")
        rng = rng if rng is not None else _rng.stream(0, "fusion-init")
        bank = build_fusion(spec, backbone.fusion_sites(spec), rng, inert=inert)
        pipeline = TextPipeline(text_dim, backbone.hook_dim, rng)
        return cls(backbone, spec, bank, pipeline)

    @property
    def is_unimodal(self) -> bool:
        return self.fusion_bank is None

    def forward(self, x: np.ndarray, z_text_raw: Optional[np.ndarray] = None) -> ForwardResult:
        x_leaf = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
        record: dict = {}
        z_text = None
        if not self.is_unimodal:
            if z_text_raw is None:
                raise ConfigurationError("fused model called without text embeddings")
            z_text = project_text(Tensor(np.asarray(z_text_raw, dtype=np.float64)),
                                  self.text_pipeline)
        yhat, hiddens = self.backbone.forward(x_leaf, self.fusion_bank, z_text, record)
        return ForwardResult(yhat=yhat, hiddens=hiddens, x_leaf=x_leaf, fusion_record=record)

    def params(self) -> Dict[str, Tensor]:
        out = dict(self.backbone.params())
        if self.fusion_bank is not None:
            out.update(self.fusion_bank.params())
        if self.text_pipeline is not None:
            out.update(self.text_pipeline.params())
        return out

    def param_groups(self) -> Dict[str, Dict[str, Tensor]]:
        """Optimizer groups: backbone (incl. fusion), text MLP, projection."""
        groups = {"backbone": dict(self.backbone.params()), "text_mlp": {}, "projection": {}}
        if self.fusion_bank is not None:
            groups["backbone"].update(self.fusion_bank.params())
        if self.text_pipeline is not None:
            for name, p in self.text_pipeline.params().items():
                group = "text_mlp" if name.startswith("text_mlp") else "projection"
                groups[group][name] = p
        return groups

    def config(self) -> dict:
        return {
            "backbone": self.backbone.config(),
            "fusion": {
                "strategy": self.fusion_spec.strategy,
                "positions": list(self.fusion_spec.positions),
                "reduction": self.fusion_spec.reduction,
            },
            "text_dim": None if self.text_pipeline is None else self.text_pipeline.text_dim,
        }


# ---------------------------------------------------------------------------
# counting
# ---------------------------------------------------------------------------


@dataclass
class ModelCard:
    parameter_count: int
    flops_per_forward: int
    fusion_parameter_count: int


def enumerate_params(model: ForecastModel) -> int:
    return sum(p.size for p in model.params().values())


def _fusion_flops(model: ForecastModel) -> int:
    if model.fusion_bank is None:
        return 0
    bb = model.backbone
    total = 0
    for name, site in model.fusion_bank.sites.items():
        steps = bb.horizon if (bb.kind == "dlinear" and not name.startswith("first")) else bb.lookback
        d = site.dim
        n = steps * d
        if site.strategy == "additive":
            total += n * ELEMENTWISE
        elif site.strategy == "concat":
            total += _linear_flops(steps, 2 * d, d)
        elif site.strategy == "gating":
            total += _linear_flops(steps, 2 * d, d) + n * (SIGMOID_FLOPS + 2 * ELEMENTWISE)
        elif site.strategy == "film":
            total += 2 * _linear_flops(steps, d, d) + 2 * n * ELEMENTWISE
        elif site.strategy == "orthogonal":
            # two projection passes: dot, norm, divide, scale, subtract
            total += 2 * (4 * n + steps) + n * ELEMENTWISE
        elif site.strategy == "cfa":
            b = site.params.bottleneck
            total += _linear_flops(steps, d, b) - steps * b  # down-project, no bias
            total += steps * b * (LAYERNORM_FLOPS + ELEMENTWISE)
            total += _linear_flops(steps, b, d) - steps * d  # up-project, no bias
            total += n * ELEMENTWISE  # residual add
    return total


def _text_flops(model: ForecastModel) -> int:
    if model.text_pipeline is None:
        return 0
    tp = model.text_pipeline
    steps = model.backbone.lookback
    total = _linear_flops(steps, tp.text_dim, tp.text_dim)
    total += steps * tp.text_dim * ELEMENTWISE  # relu
    total += _linear_flops(steps, tp.text_dim, tp.target_dim)
    return total


def count_params(model: ForecastModel) -> ModelCard:
    total = model.backbone.param_count_closed_form()
    fusion = 0
    if model.fusion_bank is not None:
        fusion = model.fusion_bank.param_count_closed_form()
        total += fusion
    if model.text_pipeline is not None:
        total += model.text_pipeline.param_count()
    return ModelCard(parameter_count=total, flops_per_forward=0, fusion_parameter_count=fusion)


def count_flops(model: ForecastModel) -> ModelCard:
    card = count_params(model)
    flops = model.backbone.flops_closed_form() + _fusion_flops(model) + _text_flops(model)
    return ModelCard(
        parameter_count=card.parameter_count,
        flops_per_forward=flops,
        fusion_parameter_count=card.fusion_parameter_count,
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def config_digest(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def save_checkpoint(path, params: Dict[str, Tensor], digest: str) -> None:
    """Single-file binary: header (magic, version, digest) + named tensors."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(bytes.fromhex(digest))
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            data = np.ascontiguousarray(params[name].data, dtype="<f8")
            encoded = name.encode()
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path) -> Tuple[str, Dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(8) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        digest = fh.read(32).hex()
        (count,) = struct.unpack("<I", fh.read(4))
        out: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode()
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape)
            out[name] = data.astype(np.float64)
    return digest, out
