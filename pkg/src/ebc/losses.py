"""Classification, optimal-transport count, and combined training losses.

The classification term is a cross-entropy between predicted per-block
probability maps and one-hot targets. The count term compares decoded
density maps without any smoothing of the ground truth: it combines an
absolute total-mass difference, an entropic-regularized optimal-transport
distance between the normalized maps, and a total-variation term.

Sinkhorn iterations run in log space for stability at small regularization.
Because block centers live on a regular grid and the ground cost is squared
Euclidean distance, the cost separates into row and column parts; every
log-sum-exp over the full cost matrix is evaluated as two nested
log-sum-exps over rows and columns, which keeps the per-iteration work at
``O(H*W*(H+W))`` instead of ``O(H^2*W^2)``. All operations are expressed in
torch, so analytic gradients (including through the unrolled Sinkhorn loop)
are available to the training path.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .labels import TargetMaps

# Floor on probabilities inside the log of the cross-entropy; prevents -inf
# on confidently wrong predictions without measurably biasing gradients.
PROB_FLOOR = 1e-12

# Floor on normalized marginals before taking logs inside Sinkhorn.
_LOG_MASS_FLOOR = 1e-38


@dataclass(frozen=True)
class OTConfig:
    """Parameters of the optimal-transport count term.

    ``epsilon`` is the entropic regularization strength, interpreted on the
    normalized cost scale when ``normalize_cost`` is set (squared block
    distances are divided by the squared grid diagonal, so costs lie in
    [0, 1)). ``ot_weight`` and ``tv_weight`` scale the transport and
    total-variation terms of the count loss. When either map's total mass
    falls below ``mass_floor`` the transport and TV terms are skipped and
    only the mass-difference term applies.
    """

    epsilon: float = 0.01
    max_iters: int = 100
    tolerance: float = 1e-6
    ot_weight: float = 0.1
    tv_weight: float = 0.01
    normalize_cost: bool = True
    mass_floor: float = 1e-6

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.tolerance <= 0:
            raise ValueError(f"tolerance must be positive, got {self.tolerance}")


@dataclass
class LossBreakdown:
    """Components of the combined loss; ``total = classification + lam * count``."""

    classification: torch.Tensor
    count: torch.Tensor
    total: torch.Tensor
    lam: float


@dataclass
class SinkhornResult:
    """Transport cost plus its gradient with respect to the raw source grid."""

    value: float
    source_grad: np.ndarray
    converged: bool
    iterations: int
    marginal_error: float


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    t = torch.as_tensor(x)
    if not t.is_floating_point():
        t = t.double()
    if like is not None and t.dtype != like.dtype:
        t = t.to(like.dtype)
    return t


def _grid_costs(h: int, w: int, normalize: bool, dtype, device):
    """Separable squared-distance costs between block centers, in block units."""
    rows = torch.arange(h, dtype=dtype, device=device)
    cols = torch.arange(w, dtype=dtype, device=device)
    row_cost = (rows[:, None] - rows[None, :]) ** 2
    col_cost = (cols[:, None] - cols[None, :]) ** 2
    if normalize:
        d2 = float(h * h + w * w)
        row_cost = row_cost / d2
        col_cost = col_cost / d2
    return row_cost, col_cost


def _smoothed_message(pot, neg_row, neg_col, eps):
    """log-sum-exp of ``(pot - cost) / eps`` over the opposite grid side.

    ``pot`` has shape (B, H, W); the result M[b, i, I] equals
    LSE_{j,J} [ pot[b,j,J]/eps - (row_cost[i,j] + col_cost[I,J])/eps ],
    computed as nested LSEs thanks to cost separability.
    """
    inner = torch.logsumexp(pot.unsqueeze(2) / eps + neg_col, dim=3)  # (B,H,W)[b,j,I]
    return torch.logsumexp(
        neg_row.unsqueeze(0).unsqueeze(3) + inner.unsqueeze(1), dim=2
    )  # (B,H,W)[b,i,I]


def _entropic_transport(a, b, cfg: OTConfig):
    """Sharp transport cost of the entropic plan between batched grids.

    ``a`` and ``b`` are (B, H, W) probability grids (each summing to 1).
    Returns (values (B,), converged, iterations, marginal_error), where the
    value is ``<plan, cost>`` for the plan induced by the final potentials.
    Fully differentiable in ``a`` and ``b``.
    """
    B, h, w = a.shape
    eps = cfg.epsilon
    row_cost, col_cost = _grid_costs(h, w, cfg.normalize_cost, a.dtype, a.device)
    neg_row, neg_col = -row_cost / eps, -col_cost / eps

    la = a.clamp(min=_LOG_MASS_FLOOR).log()
    lb = b.clamp(min=_LOG_MASS_FLOOR).log()
    f = torch.zeros_like(a)
    g = torch.zeros_like(b)

    err = torch.full((B,), float("inf"), dtype=a.dtype, device=a.device)
    iterations = 0
    for it in range(1, cfg.max_iters + 1):
        iterations = it
        s = _smoothed_message(g, neg_row, neg_col, eps)
        # Row marginals of the current plan; the same message feeds the
        # f-update, so the convergence check is free.
        err = (torch.exp(f / eps + s) - a).abs().sum(dim=(1, 2))
        if it > 1 and float(err.detach().max()) < cfg.tolerance:
            break
        f = eps * la - eps * s
        t = _smoothed_message(f, neg_row, neg_col, eps)
        g = eps * lb - eps * t

    # <plan, cost> split into row and column parts via the plan's marginal
    # couplings over rows (M) and columns (N), both computed in log space:
    # M[b,i,j] = -row_cost[i,j]/eps + LSE_I ( u[b,i,I] + inner_col[b,j,I] )
    u = f / eps
    inner_col = torch.logsumexp(g.unsqueeze(2) / eps + neg_col, dim=3)  # [b,j,I]
    log_rows = neg_row.unsqueeze(0) + torch.logsumexp(
        u.unsqueeze(2) + inner_col.unsqueeze(1), dim=3
    )
    row_part = (log_rows.exp() * row_cost).sum(dim=(1, 2))
    # N[b,I,J] = -col_cost[I,J]/eps + LSE_i ( u[b,i,I] + inner_row[b,i,J] )
    inner_row = torch.logsumexp(
        neg_row.unsqueeze(0).unsqueeze(3) + (g / eps).unsqueeze(1), dim=2
    )  # [b,i,J]
    log_cols = neg_col.unsqueeze(0) + torch.logsumexp(
        u.unsqueeze(3) + inner_row.unsqueeze(2), dim=1
    )
    col_part = (log_cols.exp() * col_cost).sum(dim=(1, 2))

    values = row_part + col_part
    max_err = float(err.detach().max())
    converged = max_err < cfg.tolerance
    return values, converged, iterations, max_err


def entropic_ot_value(source: torch.Tensor, target: torch.Tensor, cfg: OTConfig):
    """Differentiable transport cost between two unnormalized grids.

    Both grids must share a shape and have positive total mass; they are
    normalized to probability distributions internally. Returns a 0-dim
    tensor plus (converged, iterations, marginal_error).
    """
    if source.shape != target.shape:
        raise ValueError(f"shape mismatch: {source.shape} vs {target.shape}")
    if source.dim() != 2:
        raise ValueError(f"expected 2-d grids, got {source.dim()}-d")
    sm, tm = source.sum(), target.sum()
    if float(sm.detach()) <= 0 or float(tm.detach()) <= 0:
        raise ValueError("optimal transport requires positive total mass")
    a = (source / sm).unsqueeze(0)
    b = (target / tm).unsqueeze(0)
    values, converged, iterations, err = _entropic_transport(a, b, cfg)
    return values[0], converged, iterations, err


def sinkhorn_ot(source, target, cfg: OTConfig = OTConfig()) -> SinkhornResult:
    """Entropic OT between two nonnegative grids of block masses.

    Grids are normalized internally; the returned gradient is with respect
    to the raw (unnormalized) source entries. Non-convergence within
    ``cfg.max_iters`` produces a warning, not an error: the value computed
    from the final potentials is still returned.
    """
    src = _as_tensor(source).detach().clone().requires_grad_(True)
    tgt = _as_tensor(target).detach()
    value, converged, iterations, err = entropic_ot_value(src, tgt, cfg)
    (grad,) = torch.autograd.grad(value, src)
    if not converged:
        warnings.warn(
            f"Sinkhorn did not reach tolerance {cfg.tolerance} in "
            f"{cfg.max_iters} iterations (marginal error {err:.3e})",
            RuntimeWarning,
            stacklevel=2,
        )
    return SinkhornResult(
        value=float(value.detach()),
        source_grad=grad.cpu().numpy(),
        converged=converged,
        iterations=iterations,
        marginal_error=err,
    )


def classification_loss(pred_prob: torch.Tensor, target_onehot) -> torch.Tensor:
    """Cross-entropy between a probability map and one-hot block targets.

    Sums ``-log p`` of the true bin over all blocks (and any leading batch
    dimensions). The bin axis is the third from the end. Probabilities are
    floored at ``PROB_FLOOR`` inside the log.
    """
    pred = _as_tensor(pred_prob)
    target = _as_tensor(target_onehot, like=pred)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.dim() < 3:
        raise ValueError("expected at least (n_bins, H, W) shaped inputs")
    sums = pred.sum(dim=-3)
    if not torch.allclose(sums, torch.ones_like(sums), atol=1e-4):
        raise ValueError("predicted probabilities do not sum to 1 over bins")
    return -(target * pred.clamp(min=PROB_FLOOR).log()).sum()


def _count_terms(pred: torch.Tensor, gt: torch.Tensor, cfg: OTConfig):
    """Mass, OT, and TV terms for a single (H, W) pair."""
    mass_p, mass_g = pred.sum(), gt.sum()
    mass_term = (mass_p - mass_g).abs()
    if float(mass_p.detach()) <= cfg.mass_floor or float(mass_g.detach()) <= cfg.mass_floor:
        zero = torch.zeros((), dtype=pred.dtype, device=pred.device)
        return mass_term, zero, zero
    a = (pred / mass_p).unsqueeze(0)
    b = (gt / mass_g).unsqueeze(0)
    ot_values, _, _, _ = _entropic_transport(a, b, cfg)
    tv = 0.5 * (a[0] - b[0]).abs().sum()
    return mass_term, ot_values[0], tv


def count_loss(pred_density, gt_density, cfg: OTConfig = OTConfig()) -> torch.Tensor:
    """Count loss between decoded and ground-truth density maps.

    ``|mass(pred) - mass(gt)| + ot_weight * OT + tv_weight * TV``, where OT
    and TV act on the mass-normalized maps and are skipped whenever either
    total mass is below ``cfg.mass_floor`` (empty crops are routine).
    """
    pred = _as_tensor(pred_density)
    gt = _as_tensor(gt_density, like=pred)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    mass_term, ot_term, tv_term = _count_terms(pred, gt, cfg)
    return mass_term + cfg.ot_weight * ot_term + cfg.tv_weight * tv_term


def batched_count_loss(
    pred_density: torch.Tensor, gt_density: torch.Tensor, cfg: OTConfig = OTConfig()
) -> torch.Tensor:
    """Per-sample count losses for a (B, H, W) batch, vectorizing Sinkhorn.

    Samples whose predicted or target mass falls below ``cfg.mass_floor``
    contribute only their mass term, exactly as in :func:`count_loss`.
    """
    pred = _as_tensor(pred_density)
    gt = _as_tensor(gt_density, like=pred)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    mass_p = pred.sum(dim=(1, 2))
    mass_g = gt.sum(dim=(1, 2))
    losses = (mass_p - mass_g).abs()
    valid = (mass_p > cfg.mass_floor) & (mass_g > cfg.mass_floor)
    if bool(valid.any()):
        idx = valid.nonzero(as_tuple=True)[0]
        a = pred[idx] / mass_p[idx][:, None, None]
        b = gt[idx] / mass_g[idx][:, None, None]
        ot_values, _, _, _ = _entropic_transport(a, b, cfg)
        tv = 0.5 * (a - b).abs().sum(dim=(1, 2))
        extra = cfg.ot_weight * ot_values + cfg.tv_weight * tv
        losses = losses.index_add(0, idx, extra)
    return losses


def dace_loss(
    pred_prob: torch.Tensor,
    targets: TargetMaps,
    pred_density: torch.Tensor,
    lam: float = 1.0,
    cfg: OTConfig = OTConfig(),
) -> LossBreakdown:
    """Combined classification + weighted count loss.

    ``pred_density`` must be the density decoded from ``pred_prob`` under
    the active bin policy; this function does not recompute it. With
    ``lam == 0`` the count term is skipped entirely and the total equals the
    classification loss bit for bit.
    """
    if lam < 0:
        raise ValueError(f"count-loss weight must be nonnegative, got {lam}")
    cls = classification_loss(pred_prob, targets.onehot)
    if lam == 0:
        zero = torch.zeros((), dtype=cls.dtype, device=cls.device)
        return LossBreakdown(classification=cls, count=zero, total=cls, lam=lam)
    cnt = count_loss(pred_density, targets.gt_density, cfg)
    return LossBreakdown(
        classification=cls, count=cnt, total=cls + lam * cnt, lam=lam
    )
