"""Supervision for the two branches: per-branch cross entropy plus a
cooperative penalty that pushes the predictions toward exact complementarity
and suppresses foreground/background overlap.

All losses average over pixels, so magnitudes do not depend on resolution.
The overlap term treats the pixelwise product p*q as mass that should vanish
and charges -log(1 - p*q + eps) for it: zero iff the overlap is zero,
monotonically increasing and finite-gradient everywhere (a divergence against
a hard zero target would not be).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class GroundTruth:
    """Complementary binary masks: background is everywhere foreground is not."""

    fg: Tensor
    bg: Tensor

    @classmethod
    def from_mask(cls, mask) -> "GroundTruth":
        arr = np.asarray(mask, dtype=np.float64)
        if not np.isin(arr, (0.0, 1.0)).all():
            raise ValueError("ground-truth mask must be strictly binary")
        return cls(fg=Tensor(arr), bg=Tensor(1.0 - arr))


@dataclass(frozen=True)
class LossReport:
    """Scalar loss components for one step (plain floats, for logging)."""

    l_ce_f: float
    l_ce_b: float
    l_kl_compl: float
    l_kl_overlap: float
    lam: float

    @property
    def total(self) -> float:
        return (self.l_ce_f + self.l_ce_b) + self.lam * (self.l_kl_compl + self.l_kl_overlap)

    CSV_HEADER = "iter,l_ce_f,l_ce_b,l_kl_compl,l_kl_overlap,total,lr"

    def csv_row(self, iteration: int, lr: float) -> str:
        vals = (self.l_ce_f, self.l_ce_b, self.l_kl_compl, self.l_kl_overlap, self.total, lr)
        return f"{iteration}," + ",".join(f"{v:.17g}" for v in vals)


def binary_cross_entropy(logits: Tensor, target: Tensor) -> Tensor:
    """Mean pixelwise -[t*log(p+eps) + (1-t)*log(1-p+eps)] with p = sigmoid(logits)."""
    if logits.shape != target.shape:
        raise ShapeError(f"logits {logits.shape} do not match target {target.shape}")
    p = T.sigmoid(logits)
    ll = T.add(T.mul(target, T.log_eps(p)), T.mul(T.sub(1.0, target), T.log_eps(T.sub(1.0, p))))
    return T.mul(T.mean_all(ll), -1.0)


def cross_entropy_pair(phi_f: Tensor, phi_b: Tensor, gt: GroundTruth) -> tuple[Tensor, Tensor]:
    """Cross entropy of the foreground branch against the mask and of the
    background branch against its complement."""
    return binary_cross_entropy(phi_f, gt.fg), binary_cross_entropy(phi_b, gt.bg)


def cooperative_loss(phi_f: Tensor, phi_b: Tensor) -> tuple[Tensor, Tensor]:
    """(complementarity KL, overlap penalty) between the two branch outputs.

    With p = sigmoid(phi_f) and q = sigmoid(phi_b), each pixel is read as a
    Bernoulli and the first term is KL(p || 1-q), zero exactly when the
    predictions are complementary.  The second term is the mean of
    -log(1 - p*q + eps), zero exactly when no pixel is claimed by both.
    """
    if phi_f.shape != phi_b.shape:
        raise ShapeError(f"branch logits disagree: {phi_f.shape} vs {phi_b.shape}")
    p = T.sigmoid(phi_f)
    q = T.sigmoid(phi_b)
    one_m_p = T.sub(1.0, p)
    one_m_q = T.sub(1.0, q)
    kl = T.add(T.mul(p, T.sub(T.log_eps(p), T.log_eps(one_m_q))),
               T.mul(one_m_p, T.sub(T.log_eps(one_m_p), T.log_eps(q))))
    compl = T.mean_all(kl)
    overlap = T.mul(T.mean_all(T.log_eps(T.sub(1.0, T.mul(p, q)))), -1.0)
    return compl, overlap


def total_loss(l_ce_f: Tensor, l_ce_b: Tensor, l_kl_compl: Tensor,
               l_kl_overlap: Tensor, lam: float) -> Tensor:
    """Joint objective: cross entropies plus lam-weighted cooperative terms."""
    ce = T.add(l_ce_f, l_ce_b)
    coop = T.mul(T.add(l_kl_compl, l_kl_overlap), float(lam))
    return T.add(ce, coop)


def report_from_tensors(l_ce_f: Tensor, l_ce_b: Tensor, l_kl_compl: Tensor,
                        l_kl_overlap: Tensor, lam: float) -> LossReport:
    return LossReport(l_ce_f.item(), l_ce_b.item(), l_kl_compl.item(),
                      l_kl_overlap.item(), lam)
