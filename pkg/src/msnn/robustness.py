"""Missing-completely-at-random erasure of clinical scores.

Two uses: test-time injection at a fixed fraction of the 8 time-varying
scores, and the train-time policy behind the "multim" model, which erases a
few scores of a random subset of subjects afresh every epoch. Erased values
are encoded as 0 with the mask bit set; static attributes are never touched.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .cohort import SubjectPair, ClinicalVector

N_SCORES = 8
PAPER_FRACTIONS = (0.0, 0.125, 0.25, 0.375)


@dataclass
class NAPolicy:
    mode: str = "test_fraction"  # or "train_random"
    test_fraction: float = 0.0
    train_subject_prob: float = 0.10
    train_erase_per_visit: int = 2

    def __post_init__(self):
        if self.mode not in ("test_fraction", "train_random"):
            raise ValueError(f"unknown NA policy mode {self.mode!r}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError(f"test_fraction {self.test_fraction} outside [0, 1)")
        if not 0.0 <= self.train_subject_prob < 1.0 + 1e-12:
            raise ValueError(f"train_subject_prob {self.train_subject_prob} outside [0, 1]")
        if not 0 <= self.train_erase_per_visit <= N_SCORES:
            raise ValueError(f"train_erase_per_visit must be in [0, {N_SCORES}]")


def erase(vec: ClinicalVector, idx) -> ClinicalVector:
    """Copy of ``vec`` with scores at ``idx`` marked missing."""
    out = vec.copy()
    out.scores[idx] = 0.0
    out.mask[idx] = True
    return out


def n_erased(fraction: float) -> int:
    return int(round(fraction * N_SCORES))


def inject_test_na(pair: SubjectPair, fraction: float, rng: np.random.Generator) -> SubjectPair:
    """Erase ``round(fraction * 8)`` scores independently in each visit.

    The draw is a full permutation per visit, truncated to k, so two calls
    with identically seeded generators give nested masks across fractions.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction {fraction} outside [0, 1)")
    k = n_erased(fraction)
    order_bl = rng.permutation(N_SCORES)
    order_fu = rng.permutation(N_SCORES)
    if k == 0:
        return pair
    return replace(pair, bl=erase(pair.bl, order_bl[:k]), fu=erase(pair.fu, order_fu[:k]))


def train_na_mask(batch: Sequence[SubjectPair], policy: NAPolicy,
                  rng: np.random.Generator) -> list[SubjectPair]:
    """Per subject, with probability ``train_subject_prob`` erase
    ``train_erase_per_visit`` scores in both baseline and follow-up."""
    if policy.mode != "train_random":
        raise ValueError("train_na_mask requires a train_random policy")
    out = []
    k = policy.train_erase_per_visit
    for pair in batch:
        if rng.random() < policy.train_subject_prob:
            bl_idx = rng.choice(N_SCORES, size=k, replace=False)
            fu_idx = rng.choice(N_SCORES, size=k, replace=False)
            pair = replace(pair, bl=erase(pair.bl, bl_idx), fu=erase(pair.fu, fu_idx))
        out.append(pair)
    return out
