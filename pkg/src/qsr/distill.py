"""Block-aligned feature distillation and the total training objective.

Teacher and student run independently; their per-position block outputs are
compared with per-block MSE. While slimming is underway, terms around a
skipped block are masked out so the surviving neighbours absorb its local
function: term i stays active only when block i is retained and block i+1 is
retained (the final position needs no successor). The divisor stays the full
block count throughout. Teacher features are constants — no gradient flows
into them.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor, l1_loss, mse_loss, weighted_sum


def sfd_mask(retained, total):
    """Active-term booleans, index i (0-based) for block i+1."""
    retained = set(retained)
    if retained - set(range(1, total + 1)):
        raise ValueError(f"sfd_mask: retained set {retained} outside 1..{total}")
    mask = []
    for i in range(1, total + 1):
        ok = i in retained and (i == total or (i + 1) in retained)
        mask.append(ok)
    return mask


def sfd_loss_terms(teacher_outputs, student_outputs, mask, tape: Tape | None = None):
    """Masked mean of per-block MSEs over ALL block positions (inactive terms
    contribute zero but still count in the divisor). Returns the scalar loss
    plus the per-position term values (0.0 where masked) for the training log.
    """
    n = len(teacher_outputs)
    if len(student_outputs) != n or len(mask) != n:
        raise ValueError(
            f"sfd_loss: got {len(teacher_outputs)} teacher / "
            f"{len(student_outputs)} student outputs with {len(mask)} mask entries"
        )
    terms = []
    per_term = []
    for t, s, on in zip(teacher_outputs, student_outputs, mask):
        if not on:
            per_term.append(0.0)
            continue
        term = mse_loss(s, t, tape)
        terms.append(term)
        per_term.append(float(term.data))
    if not terms:
        return Tensor(np.zeros((), np.float32)), per_term
    return weighted_sum(terms, [1.0 / n] * len(terms), tape), per_term


def sfd_loss(teacher_outputs, student_outputs, mask, tape: Tape | None = None) -> Tensor:
    return sfd_loss_terms(teacher_outputs, student_outputs, mask, tape)[0]


def sfd_init_loss(teacher_outputs, student_outputs, tape: Tape | None = None) -> Tensor:
    """Full-size phase: every block position is supervised."""
    return sfd_loss(
        teacher_outputs, student_outputs, [True] * len(teacher_outputs), tape
    )


def total_loss(pred_sr, target_hr, sfd, lam, tape: Tape | None = None):
    """L = mean-l1(pred, target) + lambda * sfd. Returns (total, l_pix)."""
    l_pix = l1_loss(pred_sr, target_hr, tape)
    if sfd is None or lam == 0.0:
        return l_pix, l_pix
    total = weighted_sum([l_pix, sfd], [1.0, lam], tape)
    return total, l_pix
