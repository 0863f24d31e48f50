"""Training objectives for the unified detector, as a double-precision oracle.

All functions work on matched inputs: prediction ``i`` is paired with target
``sigma[i]``.  Probabilities are clamped to ``[EPS, 1 - EPS]`` before any
logarithm.  Analytic gradients are derived by hand and can be checked
against central finite differences with :func:`grad_check`.

Detection loss, with ``D_i = Dice(m_hat_i, m_sigma(i))``::

    L_det = 1/N sum_i (1 - alpha) (1 - y_i) [-log(1 - y_hat_i)]
                     + alpha y_i [-sg(y_hat_i) D_i - sg(D_i) log(y_hat_i)]

where ``sg`` marks stop-gradient factors.  Layout loss sums over all matched
pairs of text slots, weighted per balancing mode (see :func:`layout_loss`).
"""

from __future__ import annotations

import dataclasses
import math
from typing import Literal, Sequence

import numpy as np

from hierkit.matching import Assignment, PredictionSlot, TargetSlot

EPS = 1e-7
FD_STEP = 1e-5
GRAD_MARGIN = 1e-3
GRAD_TOL = 1e-3

BalancingMode = Literal["vanilla", "alpha", "focal"]


@dataclasses.dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    alpha_l: float = 0.5
    balancing_mode: BalancingMode = "alpha"
    focal_gamma: float = 2.0
    lambdas: tuple[float, float, float, float] = (3.0, 1.0, 1.0, 1.0)
    include_diagonal: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0 or not 0.0 <= self.alpha_l <= 1.0:
            raise ValueError("alpha and alpha_l must lie in [0, 1]")
        if self.balancing_mode not in ("vanilla", "alpha", "focal"):
            raise ValueError(f"unknown balancing mode {self.balancing_mode!r}")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be non-negative")
        if len(self.lambdas) != 4 or any(l < 0 for l in self.lambdas):
            raise ValueError("lambdas must be four non-negative weights")


@dataclasses.dataclass(frozen=True)
class LossBreakdown:
    l_det: float
    l_lay: float
    l_seg: float
    l_ins: float
    total: float

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def _clamp(p):
    return np.clip(np.asarray(p, dtype=np.float64), EPS, 1.0 - EPS)


def _check_sigma(sigma, n):
    sigma = np.asarray(sigma.sigma if isinstance(sigma, Assignment) else sigma, dtype=np.int64)
    if sigma.shape != (n,) or sorted(sigma.tolist()) != list(range(n)):
        raise ValueError(f"sigma is not a permutation of {n} elements")
    return sigma


# ---------------------------------------------------------------------------
# Detection loss
# ---------------------------------------------------------------------------

def soft_dice(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Row-wise soft Dice of ``(N, P)`` arrays; 0 where both rows are empty."""
    inter = np.sum(pred * target, axis=1)
    denom = pred.sum(axis=1) + target.sum(axis=1)
    return np.where(denom > 0, 2.0 * inter / np.where(denom > 0, denom, 1.0), 0.0)


def _flatten(m):
    m = np.asarray(m, dtype=np.float64)
    return m.reshape(m.shape[0], -1)


def detection_loss_arrays(y_hat, m_hat, y, m, alpha: float, sigma=None,
                          frozen_y_hat=None, frozen_dice=None) -> float:
    """Detection loss on arrays.

    Args:
      y_hat: ``(N,)`` predicted textness.
      m_hat: ``(N, H, W)`` predicted soft masks.
      y: ``(N,)`` target text flags, in target order.
      m: ``(N, H, W)`` target masks, in target order.
      alpha: Positive/negative balance.
      sigma: Prediction-to-target permutation; identity when omitted.
      frozen_y_hat, frozen_dice: Values used for the stop-gradient factors.
        They default to the current values, so the loss value is unchanged;
        finite differences pass the unperturbed values to hold them fixed.
    """
    y_hat = _clamp(y_hat)
    n = y_hat.shape[0]
    if n == 0:
        return 0.0
    sigma = np.arange(n) if sigma is None else _check_sigma(sigma, n)
    ys = np.asarray(y, dtype=np.float64)[sigma]
    d = soft_dice(_flatten(m_hat), _flatten(m)[sigma])
    sg_y = y_hat if frozen_y_hat is None else _clamp(frozen_y_hat)
    sg_d = d if frozen_dice is None else np.asarray(frozen_dice, dtype=np.float64)
    neg = (1.0 - alpha) * (1.0 - ys) * -np.log1p(-y_hat)
    pos = alpha * ys * (-sg_y * d - sg_d * np.log(y_hat))
    return float(np.mean(neg + pos))


def detection_grad_arrays(y_hat, m_hat, y, m, alpha: float, sigma=None):
    """Analytic gradients ``(dL/dy_hat, dL/dm_hat)`` honoring stop-gradients.

    ``y_hat`` only reaches the loss through the log terms, and ``m_hat``
    only through the non-frozen Dice of the first positive term.
    """
    y_hat_c = _clamp(y_hat)
    m_hat = np.asarray(m_hat, dtype=np.float64)
    n = y_hat_c.shape[0]
    if n == 0:
        return np.zeros(0), np.zeros_like(m_hat)
    sigma = np.arange(n) if sigma is None else _check_sigma(sigma, n)
    ys = np.asarray(y, dtype=np.float64)[sigma]
    mf = _flatten(m)[sigma]
    pf = m_hat.reshape(n, -1)
    d = soft_dice(pf, mf)
    inside = (np.asarray(y_hat) > EPS) & (np.asarray(y_hat) < 1.0 - EPS)
    g_y = ((1.0 - alpha) * (1.0 - ys) / (1.0 - y_hat_c) - alpha * ys * d / y_hat_c) / n
    g_y = np.where(inside, g_y, 0.0)
    s = pf.sum(axis=1) + mf.sum(axis=1)
    safe_s = np.where(s > 0, s, 1.0)
    d_dice = np.where(s[:, None] > 0, (2.0 * mf - d[:, None]) / safe_s[:, None], 0.0)
    g_m = (-alpha * ys * y_hat_c / n)[:, None] * d_dice
    return g_y, g_m.reshape(m_hat.shape)


def _slots_to_arrays(preds: Sequence[PredictionSlot], targets: Sequence[TargetSlot]):
    if len(preds) != len(targets):
        raise ValueError(f"{len(preds)} predictions vs {len(targets)} targets")
    y_hat = np.array([p.textness for p in preds], dtype=np.float64)
    m_hat = np.stack([np.asarray(p.soft_mask, dtype=np.float64) for p in preds])
    y = np.array([t.is_text for t in targets], dtype=np.float64)
    m = np.stack([np.asarray(t.mask, dtype=np.float64) for t in targets])
    return y_hat, m_hat, y, m


def detection_loss(preds: Sequence[PredictionSlot], targets: Sequence[TargetSlot],
                   sigma: Assignment | Sequence[int], cfg: LossConfig = LossConfig()) -> float:
    if not preds:
        return 0.0
    y_hat, m_hat, y, m = _slots_to_arrays(preds, targets)
    return detection_loss_arrays(y_hat, m_hat, y, m, cfg.alpha, sigma)


# ---------------------------------------------------------------------------
# Layout loss
# ---------------------------------------------------------------------------

def gt_affinity(targets: Sequence[TargetSlot] | Sequence[int]) -> np.ndarray:
    """Same-cluster indicator over all slot pairs, diagonal included."""
    clusters = np.array([t.cluster_id if isinstance(t, TargetSlot) else t for t in targets])
    return (clusters[:, None] == clusters[None, :]).astype(np.float64)


def _pair_weights(ys, a_gt, cfg: LossConfig):
    """Pair mask, positive/negative indicators and their normalizers."""
    mask = np.outer(ys, ys)
    if not cfg.include_diagonal:
        np.fill_diagonal(mask, 0.0)
    pos = mask * a_gt
    neg = mask * (1.0 - a_gt)
    if cfg.balancing_mode == "vanilla":
        total = mask.sum()
        w = 1.0 / total if total > 0 else 0.0
        return pos * w, neg * w
    sp, sn = pos.sum(), neg.sum()
    wp = cfg.alpha_l / sp if sp > 0 else 0.0
    wn = (1.0 - cfg.alpha_l) / sn if sn > 0 else 0.0
    return pos * wp, neg * wn


def _layout_inputs(affinity_pred, y, clusters_or_agt, sigma):
    a_hat = np.asarray(affinity_pred, dtype=np.float64)
    n = a_hat.shape[0]
    if a_hat.shape != (n, n):
        raise ValueError(f"affinity must be square, got shape {a_hat.shape}")
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (n,):
        raise ValueError(f"{y.shape[0]} targets for an affinity of size {n}")
    sigma = _check_sigma(sigma, n)
    c = np.asarray(clusters_or_agt)
    a_gt = c if c.ndim == 2 else gt_affinity(c.tolist())
    return a_hat, y[sigma], a_gt[np.ix_(sigma, sigma)]


def layout_loss_arrays(affinity_pred, y, clusters, sigma, cfg: LossConfig = LossConfig()) -> float:
    """Layout loss over matched text-slot pairs.

    ``alpha`` mode weights positive pairs by ``alpha_l / #pos`` and negative
    pairs by ``(1 - alpha_l) / #neg``; ``vanilla`` uses ``1 / #pairs`` for
    both; ``focal`` is ``alpha`` with the extra factors ``(1 - A)^gamma`` and
    ``A^gamma``.  An empty pair class contributes 0.
    """
    a_hat, ys, a_gt = _layout_inputs(affinity_pred, y, clusters, sigma)
    if a_hat.size == 0:
        return 0.0
    a = _clamp(a_hat)
    wp, wn = _pair_weights(ys, a_gt, cfg)
    lp, ln = -np.log(a), -np.log1p(-a)
    if cfg.balancing_mode == "focal":
        lp = lp * (1.0 - a) ** cfg.focal_gamma
        ln = ln * a ** cfg.focal_gamma
    return float(np.sum(wp * lp) + np.sum(wn * ln))


def layout_grad_arrays(affinity_pred, y, clusters, sigma, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Analytic ``dL/dA_hat``, treating every matrix entry as independent."""
    a_hat, ys, a_gt = _layout_inputs(affinity_pred, y, clusters, sigma)
    a = _clamp(a_hat)
    wp, wn = _pair_weights(ys, a_gt, cfg)
    if cfg.balancing_mode == "focal":
        g = cfg.focal_gamma
        # d/da [-(1-a)^g log a] and d/da [-a^g log(1-a)]
        dp = g * (1.0 - a) ** (g - 1.0) * np.log(a) - (1.0 - a) ** g / a if g > 0 else -1.0 / a
        dn = (-g * a ** (g - 1.0) * np.log1p(-a) + a ** g / (1.0 - a)) if g > 0 else 1.0 / (1.0 - a)
    else:
        dp, dn = -1.0 / a, 1.0 / (1.0 - a)
    grad = wp * dp + wn * dn
    inside = (a_hat > EPS) & (a_hat < 1.0 - EPS)
    return np.where(inside, grad, 0.0)


def layout_loss(affinity_pred, targets: Sequence[TargetSlot], sigma: Assignment | Sequence[int],
                cfg: LossConfig = LossConfig()) -> float:
    if sigma is None:
        raise ValueError("layout loss needs a matching")
    y = [t.is_text for t in targets]
    return layout_loss_arrays(affinity_pred, y, gt_affinity(targets), sigma, cfg)


# ---------------------------------------------------------------------------
# Total
# ---------------------------------------------------------------------------

def total_loss(l_det: float, l_lay: float, l_seg: float = 0.0, l_ins: float = 0.0,
               cfg: LossConfig = LossConfig()) -> LossBreakdown:
    parts = (float(l_det), float(l_lay), float(l_seg), float(l_ins))
    if not all(math.isfinite(p) for p in parts):
        raise ValueError(f"non-finite loss component in {parts}")
    lam = cfg.lambdas
    total = sum(w * p for w, p in zip(lam, parts) if w != 0)
    return LossBreakdown(*parts, float(total))


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------

def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _check_margin(name, x):
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < GRAD_MARGIN or x.max() > 1.0 - GRAD_MARGIN):
        raise ValueError(f"{name} must lie in [{GRAD_MARGIN}, {1 - GRAD_MARGIN}] for a gradient check")


def random_instance(rng: np.random.Generator, n: int = 3, height: int = 8, width: int = 8,
                    n_clusters: int | None = None) -> dict:
    """Random matched inputs suitable for :func:`grad_check`."""
    logits = rng.normal(size=(n, height, width))
    m_hat = np.exp(logits) / np.exp(logits).sum(axis=0)
    m_hat = np.clip(m_hat, GRAD_MARGIN, 1.0 - GRAD_MARGIN)
    y = rng.integers(0, 2, size=n)
    y[rng.integers(n)] = 1
    m = (rng.random((n, height, width)) < 0.4).astype(np.float64) * y[:, None, None]
    clusters = rng.integers(0, n_clusters or max(1, n // 2 + 1), size=n)
    return {
        "y_hat": rng.uniform(0.05, 0.95, size=n),
        "m_hat": m_hat,
        "y": y.astype(np.float64),
        "m": m,
        "clusters": clusters,
        "affinity": rng.uniform(0.05, 0.95, size=(n, n)),
        "sigma": rng.permutation(n),
    }


def grad_check(loss_fn: Literal["detection", "layout"], inputs: dict, cfg: LossConfig = LossConfig(),
               max_pixels: int | None = None, rng: np.random.Generator | None = None,
               step: float = FD_STEP) -> float:
    """Largest relative error between analytic gradients and central differences.

    For the detection loss every ``y_hat`` entry and every mask pixel (or a
    random sample of ``max_pixels`` of them) is perturbed while the
    stop-gradient factors stay at their unperturbed values.  For the layout
    loss every affinity entry is perturbed.
    """
    sigma = inputs["sigma"]
    if loss_fn == "detection":
        y_hat = np.asarray(inputs["y_hat"], dtype=np.float64)
        m_hat = np.asarray(inputs["m_hat"], dtype=np.float64)
        _check_margin("y_hat", y_hat)
        _check_margin("m_hat", m_hat)
        y, m = inputs["y"], inputs["m"]
        n = y_hat.shape[0]
        s = _check_sigma(sigma, n)
        frozen_d = soft_dice(_flatten(m_hat), _flatten(m)[s])
        g_y, g_m = detection_grad_arrays(y_hat, m_hat, y, m, cfg.alpha, sigma)

        def f(yh, mh):
            return detection_loss_arrays(yh, mh, y, m, cfg.alpha, sigma,
                                         frozen_y_hat=y_hat, frozen_dice=frozen_d)

        errs = []
        for i in range(n):
            e = np.zeros(n)
            e[i] = step
            num = (f(y_hat + e, m_hat) - f(y_hat - e, m_hat)) / (2 * step)
            errs.append(relative_error(g_y[i], num))
        flat_idx = np.arange(m_hat.size)
        if max_pixels is not None and max_pixels < flat_idx.size:
            rng = rng or np.random.default_rng(0)
            flat_idx = rng.choice(flat_idx, size=max_pixels, replace=False)
        for k in flat_idx:
            idx = np.unravel_index(k, m_hat.shape)
            up, dn = m_hat.copy(), m_hat.copy()
            up[idx] += step
            dn[idx] -= step
            num = (f(y_hat, up) - f(y_hat, dn)) / (2 * step)
            errs.append(relative_error(g_m[idx], num))
        return float(np.max(errs))

    if loss_fn == "layout":
        a_hat = np.asarray(inputs["affinity"], dtype=np.float64)
        _check_margin("affinity", a_hat)
        y, clusters = inputs["y"], inputs["clusters"]
        grad = layout_grad_arrays(a_hat, y, clusters, sigma, cfg)
        errs = [0.0]
        for idx in np.ndindex(a_hat.shape):
            up, dn = a_hat.copy(), a_hat.copy()
            up[idx] += step
            dn[idx] -= step
            num = (layout_loss_arrays(up, y, clusters, sigma, cfg)
                   - layout_loss_arrays(dn, y, clusters, sigma, cfg)) / (2 * step)
            errs.append(relative_error(grad[idx], num))
        return float(np.max(errs))

    raise ValueError(f"unknown loss {loss_fn!r}; expected 'detection' or 'layout'")
