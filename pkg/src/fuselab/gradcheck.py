"""End-to-end gradient verification suite (also used by the CLI)."""

from __future__ import annotations

import time
from typing import Dict, List, Tuple

import numpy as np

from . import rng as _rng
from .autodiff import Tensor, check_gradients, mean, mse_loss, square
from .backbone import DLinearBackbone, ForecastModel, MlpBackbone
from .fusion import (
    CfaParams,
    ConcatProj,
    FilmParams,
    FusionSpec,
    GateParams,
    fuse_additive,
    fuse_cfa,
    fuse_concat,
    fuse_film,
    fuse_gating,
    fuse_orthogonal,
)
from .textpath import TextPipeline, project_text

TOLERANCE = 1e-4
SEEDS = 10


def _fusion_case(strategy: str, seed: int) -> Tuple[Tensor, List[Tensor]]:
    rng = np.random.default_rng(seed)
    srng = _rng.stream(seed, "gradcheck", strategy)
    d = 6
    zt = Tensor(rng.normal(size=(2, d)) + 0.05, requires_grad=True)
    zx = Tensor(rng.normal(size=(2, d)) + 0.05, requires_grad=True)
    if strategy == "additive":
        return fuse_additive(zt, zx), [zt, zx]
    if strategy == "concat":
        p = ConcatProj.init(d, srng)
        p.W_cat.set_data(rng.normal(size=(d, 2 * d)))
        return fuse_concat(zt, zx, p), [zt, zx, p.W_cat, p.b_cat]
    if strategy == "gating":
        p = GateParams.init(d, srng)
        return fuse_gating(zt, zx, p), [zt, zx, p.W_g, p.b_g]
    if strategy == "film":
        p = FilmParams.init(d, srng)
        p.gamma_W.set_data(rng.normal(size=(d, d)) * 0.3)
        p.beta_W.set_data(rng.normal(size=(d, d)) * 0.3)
        return fuse_film(zt, zx, p), [zt, zx, p.gamma_W, p.gamma_b, p.beta_W, p.beta_b]
    if strategy == "orthogonal":
        return fuse_orthogonal(zt, zx), [zt, zx]
    p = CfaParams.init(d, 2, srng)
    p.W_up.set_data(rng.normal(size=(d, d // 2)) * 0.3)
    return fuse_cfa(zt, zx, p), [zt, zx, p.W_down, p.W_up, p.ln_scale, p.ln_shift]


def _model_case(kind: str, seed: int):
    rng = np.random.default_rng(seed)
    if kind == "mlp":
        bb = MlpBackbone(4, 2, 1, hidden_dim=4, encoder_layers=1,
                         rng=_rng.stream(seed, "gradcheck", "mlp"))
        model = ForecastModel(bb)
        x = rng.normal(size=(2, 4, 1))
        z = None
    elif kind == "dlinear":
        bb = DLinearBackbone(4, 3, 2, kernel=3, rng=_rng.stream(seed, "gradcheck", "dl"))
        model = ForecastModel(bb)
        x = rng.normal(size=(2, 4, 2))
        z = None
    else:  # full cfa stack: backbone + adapter + text pipeline + loss
        bb = MlpBackbone(4, 2, 1, hidden_dim=4, encoder_layers=1,
                         rng=_rng.stream(seed, "gradcheck", "full"))
        model = ForecastModel.build(bb, FusionSpec("cfa", reduction=2), text_dim=5,
                                    rng=_rng.stream(seed, "gradcheck", "full-fusion"))
        for site in model.fusion_bank.sites.values():
            site.params.W_up.set_data(rng.normal(size=site.params.W_up.shape) * 0.3)
        x = rng.normal(size=(2, 4, 1))
        z = rng.normal(size=(2, 4, 5)) + 0.05
    result = model.forward(x, z)
    target = Tensor(rng.normal(size=result.yhat.shape))
    return mse_loss(result.yhat, target), list(model.params().values())


def _text_case(seed: int):
    rng = np.random.default_rng(seed)
    pipeline = TextPipeline(5, 3, _rng.stream(seed, "gradcheck", "text"))
    raw = Tensor(rng.normal(size=(2, 3, 5)) + 0.05)
    out = project_text(raw, pipeline)
    target = Tensor(rng.normal(size=out.shape))
    return mse_loss(out, target), list(pipeline.params().values())


def run_suite() -> Tuple[Dict[str, float], float]:
    """Max relative gradient error per case over 10 seeds, plus wall time."""
    started = time.perf_counter()
    worst: Dict[str, float] = {}
    cases = [
        ("fusion/additive", lambda s: _case_loss(_fusion_case("additive", s))),
        ("fusion/concat", lambda s: _case_loss(_fusion_case("concat", s))),
        ("fusion/gating", lambda s: _case_loss(_fusion_case("gating", s))),
        ("fusion/film", lambda s: _case_loss(_fusion_case("film", s))),
        ("fusion/orthogonal", lambda s: _case_loss(_fusion_case("orthogonal", s))),
        ("fusion/cfa", lambda s: _case_loss(_fusion_case("cfa", s))),
        ("backbone/mlp", lambda s: _model_case("mlp", s)),
        ("backbone/dlinear", lambda s: _model_case("dlinear", s)),
        ("textpath/pipeline", _text_case),
        ("end-to-end/cfa-mse", lambda s: _model_case("full", s)),
    ]
    for name, build in cases:
        err = 0.0
        for seed in range(SEEDS):
            loss, leaves = build(seed)
            for leaf in leaves:
                err = max(err, check_gradients(loss, leaf, step=1e-5))
        worst[name] = err
    return worst, time.perf_counter() - started


def _case_loss(pair):
    out, leaves = pair
    return mean(square(out)), leaves
