"""Evaluation metrics and representation diagnostics.

Everything here is a pure function over arrays or frozen models: forecast
errors, win rates against the unimodal baseline, min-max normalized MSE,
layer-wise cosine similarity, effective rank of hidden representations,
gradient-times-input temporal attribution, text-contribution ratios at
the adapter output, and parameter/FLOP efficiency tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, backward, mse_loss
from .backbone import ForecastModel, ModelCard, count_flops

SINGULAR_VALUE_CUTOFF = 1e-12


@dataclass
class MetricReport:
    mse: float
    mae: float
    per_step_mse: List[float]
    per_step_mae: List[float]


def mse(yhat: np.ndarray, y: np.ndarray) -> float:
    yhat, y = np.asarray(yhat, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if yhat.shape != y.shape:
        raise ValueError(f"mse: shape mismatch {yhat.shape} vs {y.shape}")
    return float(np.mean((yhat - y) ** 2))


def mae(yhat: np.ndarray, y: np.ndarray) -> float:
    yhat, y = np.asarray(yhat, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if yhat.shape != y.shape:
        raise ValueError(f"mae: shape mismatch {yhat.shape} vs {y.shape}")
    return float(np.mean(np.abs(yhat - y)))


def metric_report(yhat: np.ndarray, y: np.ndarray) -> MetricReport:
    """Overall MSE/MAE plus a per-horizon-step breakdown (axis -2 is steps)."""
    err = np.asarray(yhat, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    steps = err.shape[-2]
    per_mse = [float(np.mean(err[..., h, :] ** 2)) for h in range(steps)]
    per_mae = [float(np.mean(np.abs(err[..., h, :]))) for h in range(steps)]
    return MetricReport(mse=mse(yhat, y), mae=mae(yhat, y), per_step_mse=per_mse, per_step_mae=per_mae)


def win_rate(method_mses: Sequence[float], unimodal_mses: Sequence[float]) -> float:
    """Percent of paired settings where the method strictly beats unimodal."""
    if len(method_mses) != len(unimodal_mses):
        raise ValueError(
            f"win_rate: {len(method_mses)} method entries vs {len(unimodal_mses)} unimodal"
        )
    wins = sum(1 for m, u in zip(method_mses, unimodal_mses) if m < u)
    return round(100.0 * wins / len(method_mses), 1)


def normalized_mse(
    table: np.ndarray, warnings: Optional[List[str]] = None
) -> np.ndarray:
    """Min-max normalize each setting column across methods, then average.

    `table` is (methods x settings). Constant columns are excluded with a
    warning since min-max is undefined there.
    """
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2 or table.shape[0] < 2:
        raise ValueError("normalized_mse: need a (methods >= 2) x settings table")
    columns = []
    for j in range(table.shape[1]):
        col = table[:, j]
        lo, hi = col.min(), col.max()
        if hi - lo == 0.0:
            if warnings is not None:
                warnings.append(f"setting column {j} is constant; excluded")
            continue
        columns.append((col - lo) / (hi - lo))
    if not columns:
        raise ValueError("normalized_mse: every setting column is constant")
    return np.stack(columns, axis=1).mean(axis=1)


# ---------------------------------------------------------------------------
# representation diagnostics
# ---------------------------------------------------------------------------


@dataclass
class SimilarityReport:
    similarity: float
    per_layer: List[float]
    degenerate_layers: List[int] = field(default_factory=list)


def representation_similarity(
    hidden_a: Sequence[np.ndarray], hidden_b: Sequence[np.ndarray]
) -> SimilarityReport:
    """Average over layers of cosine similarity between flattened states."""
    if len(hidden_a) != len(hidden_b):
        raise ValueError(
            f"representation_similarity: {len(hidden_a)} vs {len(hidden_b)} layers"
        )
    per_layer: List[float] = []
    degenerate: List[int] = []
    for i, (a, b) in enumerate(zip(hidden_a, hidden_b)):
        if a.shape != b.shape:
            raise ValueError(f"layer {i}: shape mismatch {a.shape} vs {b.shape}")
        fa, fb = a.reshape(-1), b.reshape(-1)
        na, nb = np.linalg.norm(fa), np.linalg.norm(fb)
        if na == 0.0 or nb == 0.0:
            per_layer.append(0.0)
            degenerate.append(i)
        else:
            # rounding can push |cos| a few ulp past 1
            per_layer.append(float(np.clip(fa @ fb / (na * nb), -1.0, 1.0)))
    return SimilarityReport(
        similarity=float(np.mean(per_layer)), per_layer=per_layer, degenerate_layers=degenerate
    )


def effective_rank(h: np.ndarray) -> float:
    """exp of the Shannon entropy of normalized singular values."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2:
        raise ValueError(f"effective_rank: need a matrix, got shape {h.shape}")
    if not np.any(h):
        raise ValueError("effective_rank: all-zero matrix")
    sigma = np.linalg.svd(h, compute_uv=False)
    sigma = sigma[sigma > SINGULAR_VALUE_CUTOFF * sigma[0]]
    p = sigma / sigma.sum()
    return float(np.exp(-np.sum(p * np.log(p))))


def temporal_attribution(
    model: ForecastModel,
    x: np.ndarray,
    y: np.ndarray,
    z_text_raw: Optional[np.ndarray] = None,
    eps: float = 1e-12,
) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient-times-input importance per lookback step for one window.

    Returns (I, I_normalized), each of length L, where
    I_t = sum_d |dLoss/dx_t^(d) * x_t^(d)| and the normalized scores
    divide by (sum I + eps).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
        y = np.asarray(y, dtype=np.float64)[None]
        if z_text_raw is not None:
            z_text_raw = np.asarray(z_text_raw, dtype=np.float64)[None]
    if x.shape[0] != 1:
        raise ValueError("temporal_attribution operates on a single window")
    result = model.forward(x, z_text_raw)
    loss = mse_loss(result.yhat, Tensor(np.asarray(y, dtype=np.float64)))
    backward(loss)
    grad = result.x_leaf.grad[0]
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("temporal_attribution: non-finite input gradient")
    importance = np.sum(np.abs(grad * x[0]), axis=1)
    normalized = importance / (importance.sum() + eps)
    return importance, normalized


# ---------------------------------------------------------------------------
# text-contribution ratio
# ---------------------------------------------------------------------------


def text_contribution_ratio(adapter_output: np.ndarray, pooled_embedding: np.ndarray) -> float:
    """|adapter output| / |pooled raw embedding| for one test sample."""
    denom = float(np.linalg.norm(pooled_embedding))
    if denom == 0.0:
        raise ValueError("text_contribution_ratio: zero pooled embedding")
    return float(np.linalg.norm(adapter_output)) / denom


def welch_t(a: Sequence[float], b: Sequence[float]) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    va, vb = a.var(ddof=1), b.var(ddof=1)
    return float((a.mean() - b.mean()) / math.sqrt(va / len(a) + vb / len(b)))


def cohens_d(a: Sequence[float], b: Sequence[float]) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = len(a), len(b)
    pooled = math.sqrt(((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2))
    return float((a.mean() - b.mean()) / pooled)


@dataclass
class ContributionSummary:
    group_means: Dict[str, float]
    group_stds: Dict[str, float]
    group_counts: Dict[str, int]
    welch_t: Optional[float]
    cohens_d: Optional[float]
    skipped: int = 0

    def to_dict(self) -> dict:
        return {
            "group_means": self.group_means,
            "group_stds": self.group_stds,
            "group_counts": self.group_counts,
            "welch_t": self.welch_t,
            "cohens_d": self.cohens_d,
            "skipped": self.skipped,
        }


def contribution_summary(
    samples: Dict[str, List[float]], skipped: int = 0
) -> ContributionSummary:
    """Group statistics of ratio samples; t and d compare matching vs contradicting."""
    means = {k: float(np.mean(v)) for k, v in samples.items() if v}
    stds = {k: float(np.std(np.asarray(v), ddof=1)) if len(v) > 1 else 0.0 for k, v in samples.items() if v}
    counts = {k: len(v) for k, v in samples.items() if v}
    t = d = None
    a, b = samples.get("matching", []), samples.get("contradicting", [])
    if len(a) > 1 and len(b) > 1 and (np.var(a, ddof=1) + np.var(b, ddof=1)) > 0.0:
        t, d = welch_t(a, b), cohens_d(a, b)
    return ContributionSummary(
        group_means=means,
        group_stds=stds,
        group_counts=counts,
        welch_t=t,
        cohens_d=d,
        skipped=skipped,
    )


def collect_contribution_ratios(
    model: ForecastModel, batch, site: Optional[str] = None, batch_size: int = 256
) -> Tuple[Dict[str, List[float]], int]:
    """Per-sample ratios at one adapter site, grouped by window text label.

    Defaults to the first adapter site in name order. The numerator is the
    adapter output at the last lookback step (the step whose text type
    tags the window); the denominator is the norm of the mean-pooled raw
    embedding over the window.
    """
    if model.fusion_bank is None or model.fusion_spec.strategy != "cfa":
        raise ValueError("contribution ratios require a cfa-fused model")
    if site is None:
        site = sorted(model.fusion_bank.sites)[0]
    samples: Dict[str, List[float]] = {}
    skipped = 0
    labels = batch.labels if batch.labels is not None else np.array(["real"] * batch.count)
    for start in range(0, batch.count, batch_size):
        idx = np.arange(start, min(start + batch_size, batch.count))
        res = model.forward(batch.x[idx], batch.z_text_raw[idx])
        outputs = res.fusion_record.get(site, {}).get("adapter_output")
        if outputs is None:
            raise ValueError(f"no adapter output recorded at site {site}")
        last_step_out = outputs[:, -1, :] if outputs.ndim == 3 else outputs
        pooled_emb = batch.z_text_raw[idx].mean(axis=1)
        for j, label in enumerate(labels[idx]):
            norm = float(np.linalg.norm(pooled_emb[j]))
            if norm == 0.0:
                skipped += 1
                continue
            samples.setdefault(str(label), []).append(
                text_contribution_ratio(last_step_out[j], pooled_emb[j])
            )
    return samples, skipped


# ---------------------------------------------------------------------------
# efficiency
# ---------------------------------------------------------------------------


@dataclass
class EfficiencyRow:
    name: str
    parameter_count: int
    flops_per_forward: int
    fusion_parameter_count: int
    param_overhead_pct: float
    flops_overhead_pct: float


def efficiency_report(
    models: Dict[str, ForecastModel], unimodal_key: str = "unimodal"
) -> List[EfficiencyRow]:
    """Params/FLOPs per model with percent overhead over the unimodal baseline."""
    if unimodal_key not in models:
        raise ValueError(f"efficiency_report: missing baseline {unimodal_key!r}")
    cards: Dict[str, ModelCard] = {name: count_flops(m) for name, m in models.items()}
    base = cards[unimodal_key]
    rows = []
    for name in sorted(cards):
        card = cards[name]
        rows.append(
            EfficiencyRow(
                name=name,
                parameter_count=card.parameter_count,
                flops_per_forward=card.flops_per_forward,
                fusion_parameter_count=card.fusion_parameter_count,
                param_overhead_pct=100.0
                * (card.parameter_count - base.parameter_count)
                / base.parameter_count,
                flops_overhead_pct=100.0
                * (card.flops_per_forward - base.flops_per_forward)
                / base.flops_per_forward,
            )
        )
    return rows
