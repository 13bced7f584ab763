"""Training objective: multi-scale restoration plus siamese feature comparison.

Per iteration one pyramid scale is drawn uniformly and shared by every term.
The restoration term is the MSE of both branches' reconstructions against
their uncorrupted views. Comparison terms use the stop-gradient asymmetric
cosine: each pair (target, sibling) contributes
    -1/2 * [ cos(sg(v), predict(v_sibling)) + cos(predict(v), sg(v_sibling)) ]
and the local views are compared against both global branches at the shared
scale, giving 1 + 2 * n_locals comparison terms in total.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DegenerateVector, ShapeError
from .heads import SslHeads
from .nsunet import NUM_LEVELS, FeaturePyramid, PyramidUNet

DEGENERATE_EPS = 1e-12


def sample_scale(rng: np.random.Generator) -> int:
    """Uniform scale index in {1..5}."""
    return int(rng.integers(1, NUM_LEVELS + 1))


def restoration_loss(
    pred1: torch.Tensor, x1: torch.Tensor, pred2: torch.Tensor, x2: torch.Tensor
) -> torch.Tensor:
    """Sum of the two branches' mean squared reconstruction errors."""
    if pred1.shape != x1.shape or pred2.shape != x2.shape:
        raise ShapeError(
            f"restoration shapes differ: {tuple(pred1.shape)} vs {tuple(x1.shape)}, "
            f"{tuple(pred2.shape)} vs {tuple(x2.shape)}"
        )
    return F.mse_loss(pred1, x1) + F.mse_loss(pred2, x2)


def _row_cosine(a: torch.Tensor, b: torch.Tensor, eps: float) -> torch.Tensor:
    """Cosine per row of two (B, C) tensors; degenerate rows raise."""
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    if bool((na < eps).any()) or bool((nb < eps).any()):
        raise DegenerateVector(f"vector norm below {eps} in cosine similarity")
    return (a * b).sum(dim=-1) / (na * nb)


def cosine(u, w, eps: float = DEGENERATE_EPS) -> float:
    """Cosine similarity of two vectors after L2 normalization."""
    tu = torch.as_tensor(u, dtype=torch.float64).reshape(-1)
    tw = torch.as_tensor(w, dtype=torch.float64).reshape(-1)
    if tu.shape != tw.shape:
        raise ShapeError(f"cosine needs equal lengths, got {tu.shape[0]} and {tw.shape[0]}")
    return float(_row_cosine(tu.unsqueeze(0), tw.unsqueeze(0), eps)[0])


def comparison_loss(
    v: torch.Tensor,
    v_sibling: torch.Tensor,
    predictor,
    eps: float = DEGENERATE_EPS,
) -> torch.Tensor:
    """Symmetric stop-gradient cosine loss for one embedding pair; in [-1, 1]."""
    if v.ndim == 1:
        v = v.unsqueeze(0)
    if v_sibling.ndim == 1:
        v_sibling = v_sibling.unsqueeze(0)
    if v.shape != v_sibling.shape:
        raise ShapeError(
            f"embedding shapes differ: {tuple(v.shape)} vs {tuple(v_sibling.shape)}"
        )
    term1 = _row_cosine(v.detach(), predictor(v_sibling), eps).mean()
    term2 = _row_cosine(predictor(v), v_sibling.detach(), eps).mean()
    return -0.5 * (term1 + term2)


@dataclass
class BatchViews:
    """Channel-first tensors for one iteration: targets, inputs, local views."""

    x1: torch.Tensor
    x2: torch.Tensor
    x1c: torch.Tensor
    x2c: torch.Tensor
    locals: torch.Tensor | None  # (n_locals, B, C, spatial...) or None


@dataclass
class LossBreakdown:
    """Scalar components of one iteration's objective."""

    l_restore: float
    l_compare_global: float
    l_compare_local: float
    total: float
    scale_used: int
    compare_terms: tuple = ()  # global-global first, then local-vs-global terms


def comparison_loss_crossed(
    pyr_a: FeaturePyramid,
    pyr_b: FeaturePyramid,
    heads: SslHeads,
    eps: float = DEGENERATE_EPS,
) -> torch.Tensor:
    """Ablation: average the pair loss over all scale combinations (5x5)."""
    va = [heads.compare.embed(pyr_a.level(i)) for i in range(1, NUM_LEVELS + 1)]
    vb = [heads.compare.embed(pyr_b.level(i)) for i in range(1, NUM_LEVELS + 1)]
    terms = [
        comparison_loss(va[i], vb[j], heads.compare.predict, eps)
        for i in range(NUM_LEVELS)
        for j in range(NUM_LEVELS)
    ]
    return torch.stack(terms).mean()


def total_loss(
    views: BatchViews,
    model: PyramidUNet,
    heads: SslHeads,
    scale: int,
    crossed_comparison: bool = False,
    eps: float = DEGENERATE_EPS,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Full objective at one sampled scale; returns (tensor, breakdown)."""
    if not 1 <= scale <= NUM_LEVELS:
        raise ShapeError(f"scale must be in 1..{NUM_LEVELS}, got {scale}")
    pyr1 = model.forward_pyramid(views.x1c)
    pyr2 = model.forward_pyramid(views.x2c)
    f1 = pyr1.level(scale)
    f2 = pyr2.level(scale)

    head = heads.restoration(scale)
    pred1 = head(f1, views.x1.shape[2:])
    pred2 = head(f2, views.x2.shape[2:])
    l_restore = restoration_loss(pred1, views.x1, pred2, views.x2)

    v1 = heads.compare.embed(f1)
    v2 = heads.compare.embed(f2)
    if crossed_comparison:
        l_global = comparison_loss_crossed(pyr1, pyr2, heads, eps)
    else:
        l_global = comparison_loss(v1, v2, heads.compare.predict, eps)

    local_terms = []
    if views.locals is not None and views.locals.shape[0] > 0:
        n_locals, batch = views.locals.shape[0], views.locals.shape[1]
        stacked = views.locals.reshape(n_locals * batch, *views.locals.shape[2:])
        pyr_local = model.forward_pyramid(stacked)
        v_local = heads.compare.embed(pyr_local.level(scale))
        v_local = v_local.reshape(n_locals, batch, -1)
        for v_global in (v1, v2):
            for k in range(n_locals):
                local_terms.append(
                    comparison_loss(v_local[k], v_global, heads.compare.predict, eps)
                )
    l_local = (
        torch.stack(local_terms).sum() if local_terms else torch.zeros((), dtype=l_restore.dtype)
    )

    total = l_restore + l_global + l_local
    breakdown = LossBreakdown(
        l_restore=float(l_restore.detach()),
        l_compare_global=float(l_global.detach()),
        l_compare_local=float(l_local.detach()),
        total=float(total.detach()),
        scale_used=int(scale),
        compare_terms=tuple(
            [float(l_global.detach())] + [float(t.detach()) for t in local_terms]
        ),
    )
    return total, breakdown
