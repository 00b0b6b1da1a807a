"""Training objectives: intensity, gradient, feature consistency, and the
weighted total.

All functions accept a single frame (H, W, C) or a batched array with
leading axes; "mean" reduction averages over every summed term so loss
magnitudes transfer across resolutions and batch sizes. The raw sums are
available via reduction="sum". Each loss has a companion ``*_grad``
returning the analytic derivative used by the trainer.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError

LOG_FLOOR = 1e-12  # inside KL log terms, guards saturated softmax outputs


@dataclass(frozen=True)
class LossWeights:
    lambda_n: float = 1.0
    lambda_p: float = 1.0
    lambda_cst: float = 0.3

    def __post_init__(self):
        for name in ("lambda_n", "lambda_p", "lambda_cst"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-batch loss values; total = lam_N*l_N + lam_P*l_P + lam_cst*l_cst."""

    l_int_o: float
    l_gd_o: float
    l_n: float
    l_int_p: float
    l_gd_p: float
    l_p: float
    l_cst: float
    total: float


def _check_shapes(pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")


def intensity_loss(pred: np.ndarray, target: np.ndarray, reduction: str = "mean") -> float:
    """Squared L2 distance between prediction and target."""
    _check_shapes(pred, target)
    sq = (pred - target) ** 2
    if reduction == "sum":
        return float(sq.sum())
    return float(sq.mean())


def intensity_loss_grad(pred: np.ndarray, target: np.ndarray, reduction: str = "mean") -> np.ndarray:
    _check_shapes(pred, target)
    g = 2.0 * (pred - target)
    if reduction == "mean":
        g /= pred.size
    return g


def _spatial_diffs(x):
    # channel-last layout: spatial axes are the two before the channel axis
    di = x[..., 1:, :, :] - x[..., :-1, :, :]
    dj = x[..., :, 1:, :] - x[..., :, :-1, :]
    return di, dj


def _gradient_term_count(shape) -> int:
    h, w, c = shape[-3], shape[-2], shape[-1]
    lead = int(np.prod(shape[:-3])) if len(shape) > 3 else 1
    return lead * c * ((h - 1) * w + h * (w - 1))


def gradient_loss(pred: np.ndarray, target: np.ndarray, reduction: str = "mean") -> float:
    """Absolute difference of gradient magnitudes between pred and target.

    Differences are taken only for spatial indices >= 1 (no padding or
    wraparound), in both the row and column direction.
    """
    _check_shapes(pred, target)
    if pred.shape[-3] < 2 or pred.shape[-2] < 2:
        raise ShapeError(f"gradient loss needs H, W >= 2, got {pred.shape}")
    pi, pj = _spatial_diffs(pred)
    ti, tj = _spatial_diffs(target)
    total = np.abs(np.abs(pi) - np.abs(ti)).sum() + np.abs(np.abs(pj) - np.abs(tj)).sum()
    if reduction == "sum":
        return float(total)
    return float(total / _gradient_term_count(pred.shape))


def gradient_loss_grad(pred: np.ndarray, target: np.ndarray, reduction: str = "mean") -> np.ndarray:
    """Subgradient of gradient_loss w.r.t. pred (sign 0 at kinks)."""
    _check_shapes(pred, target)
    pi, pj = _spatial_diffs(pred)
    ti, tj = _spatial_diffs(target)
    # d|a|/da = sign(a); outer sign comes from the magnitude mismatch
    gi = np.sign(np.abs(pi) - np.abs(ti)) * np.sign(pi)
    gj = np.sign(np.abs(pj) - np.abs(tj)) * np.sign(pj)
    g = np.zeros_like(pred)
    g[..., 1:, :, :] += gi
    g[..., :-1, :, :] -= gi
    g[..., :, 1:, :] += gj
    g[..., :, :-1, :] -= gj
    if reduction == "mean":
        g /= _gradient_term_count(pred.shape)
    return g


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def consistency_loss(f_o: np.ndarray, f_p: np.ndarray) -> float:
    """Symmetric KL divergence between per-token feature distributions.

    Each token's feature vector becomes a distribution via softmax over
    the feature dimension; both KL directions are averaged over tokens
    and halved.
    """
    _check_shapes(f_o, f_p)
    if not (np.isfinite(f_o).all() and np.isfinite(f_p).all()):
        raise NumericError("consistency_loss received non-finite features")
    p = _softmax(f_o)
    q = _softmax(f_p)
    lp = np.log(np.maximum(p, LOG_FLOOR))
    lq = np.log(np.maximum(q, LOG_FLOOR))
    kl_pq = (p * (lp - lq)).sum(axis=-1)
    kl_qp = (q * (lq - lp)).sum(axis=-1)
    return float(0.5 * (kl_pq + kl_qp).mean())


def consistency_loss_grad(f_o: np.ndarray, f_p: np.ndarray):
    """Gradients of consistency_loss w.r.t. both feature arrays."""
    _check_shapes(f_o, f_p)
    p = _softmax(f_o)
    q = _softmax(f_p)
    lp = np.log(np.maximum(p, LOG_FLOOR))
    lq = np.log(np.maximum(q, LOG_FLOOR))
    kl_pq = (p * (lp - lq)).sum(axis=-1, keepdims=True)
    kl_qp = (q * (lq - lp)).sum(axis=-1, keepdims=True)
    num_tokens = int(np.prod(f_o.shape[:-1]))
    # through softmax of each side: d/dz KL(p||q) = p*((lp-lq) - KL),
    # d/dz KL(q||p) = p - q (and symmetrically for the other side)
    df_o = 0.5 * (p * ((lp - lq) - kl_pq) + (p - q)) / num_tokens
    df_p = 0.5 * ((q - p) + q * ((lq - lp) - kl_qp)) / num_tokens
    return df_o, df_p


def total_loss(
    pred_o: np.ndarray,
    pred_p: np.ndarray,
    target: np.ndarray,
    f_o: np.ndarray,
    f_p: np.ndarray,
    weights: LossWeights,
    reduction: str = "mean",
) -> LossBreakdown:
    """Assemble the full dual-branch objective from its constituents."""
    l_int_o = intensity_loss(pred_o, target, reduction)
    l_gd_o = gradient_loss(pred_o, target, reduction)
    l_int_p = intensity_loss(pred_p, target, reduction)
    l_gd_p = gradient_loss(pred_p, target, reduction)
    l_cst = consistency_loss(f_o, f_p)
    l_n = l_int_o + l_gd_o
    l_p = l_int_p + l_gd_p
    total = weights.lambda_n * l_n + weights.lambda_p * l_p + weights.lambda_cst * l_cst
    return LossBreakdown(
        l_int_o=l_int_o, l_gd_o=l_gd_o, l_n=l_n,
        l_int_p=l_int_p, l_gd_p=l_gd_p, l_p=l_p,
        l_cst=l_cst, total=total,
    )


def total_loss_grads(pred_o, pred_p, target, f_o, f_p, weights: LossWeights):
    """Breakdown plus gradients w.r.t. both predictions and both features."""
    bd = total_loss(pred_o, pred_p, target, f_o, f_p, weights)
    d_pred_o = weights.lambda_n * (
        intensity_loss_grad(pred_o, target) + gradient_loss_grad(pred_o, target)
    )
    d_pred_p = weights.lambda_p * (
        intensity_loss_grad(pred_p, target) + gradient_loss_grad(pred_p, target)
    )
    dc_o, dc_p = consistency_loss_grad(f_o, f_p)
    d_f_o = weights.lambda_cst * dc_o
    d_f_p = weights.lambda_cst * dc_p
    return bd, d_pred_o, d_pred_p, d_f_o, d_f_p
