"""
Multi-bit token merging.

Builds the next block's quantized-path input from the three bit-width outputs
of the current block. Tokens whose high- and low-bit features agree best are
kept at high precision (the anchor set); the rest are fused across bit-widths.
"""

import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

import tensor_core as tc
from errors import ArgumentError, DimensionError

logger = logging.getLogger(__name__)


class MergeCase(str, Enum):
    RANDOM_SELECTION = "random"
    UNIFORM_FUSION = "uniform"
    SELECTIVE_MERGE = "selective"

    @classmethod
    def parse(cls, value: Union[str, int, "MergeCase"]) -> "MergeCase":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        numbered = {"1": cls.RANDOM_SELECTION, "2": cls.UNIFORM_FUSION, "3": cls.SELECTIVE_MERGE}
        if key in numbered:
            return numbered[key]
        for case in cls:
            if key in (case.value, case.name.lower()):
                return case
        raise ArgumentError(f"unknown merge case {value!r}; expected random, uniform or selective")


@dataclass(frozen=True)
class MergePolicy:
    """Merge case with anchor fraction ``p`` and fusion weights, normalized to sum to 1."""

    case: MergeCase = MergeCase.SELECTIVE_MERGE
    p: float = 0.5
    lambdas: Tuple[float, float, float] = field(default=(1 / 3, 1 / 3, 1 / 3))

    def __post_init__(self):
        object.__setattr__(self, "case", MergeCase.parse(self.case))
        if not 0.0 <= self.p <= 1.0:
            raise ArgumentError(f"anchor fraction p must be in [0, 1], got {self.p}")
        lam = tuple(float(v) for v in self.lambdas)
        if len(lam) != 3 or any(v < 0 for v in lam):
            raise ArgumentError(f"lambdas must be three non-negative weights, got {self.lambdas}")
        total = sum(lam)
        if total <= 0:
            raise ArgumentError("lambdas must not all be zero")
        # weights already summing to 1 are kept as given
        if not math.isclose(total, 1.0, rel_tol=1e-12, abs_tol=0.0):
            lam = tuple(v / total for v in lam)
        object.__setattr__(self, "lambdas", lam)

    def to_dict(self):
        return {"case": self.case.value, "p": self.p, "lambdas": list(self.lambdas)}

    @classmethod
    def from_dict(cls, data) -> "MergePolicy":
        return cls(case=data["case"], p=float(data["p"]), lambdas=tuple(data["lambdas"]))


def _check_same(*maps: np.ndarray):
    first = maps[0]
    for other in maps[1:]:
        if other.shape != first.shape:
            raise DimensionError("token feature maps differ in shape", first.shape, other.shape)
    if first.ndim != 2:
        raise DimensionError("token feature maps must be [tokens x features]", first.shape)


def select_anchors(x_h: tc.ArrayLike, x_l: tc.ArrayLike, p: float) -> np.ndarray:
    """
    Picks the round(p * t) tokens with the highest high/low-bit cosine similarity.

    Args:
        x_h: Features from the highest sampled bit-width [t x d]
        x_l: Features from the lowest sampled bit-width [t x d]
        p: Anchor fraction

    Returns:
        Sorted array of anchor token indices; ties go to the lower index
    """
    xh, xl = tc._arr(x_h), tc._arr(x_l)
    _check_same(xh, xl)
    if not 0.0 <= p <= 1.0:
        raise ArgumentError(f"anchor fraction p must be in [0, 1], got {p}")
    t = xh.shape[0]
    k = int(np.rint(p * t))
    sims = tc.cosine_sim_rows(xh, xl).data
    order = np.argsort(-sims, kind="stable")
    return np.sort(order[:k])


def merge(
    x_l: tc.ArrayLike,
    x_m: tc.ArrayLike,
    x_h: tc.ArrayLike,
    phi: Optional[Sequence[int]],
    policy: MergePolicy,
    rng: Optional[np.random.Generator] = None,
) -> tc.Tensor:
    """
    Combines three bit-width feature maps token by token.

    Args:
        x_l: Low-bit features [t x d]
        x_m: Mid-bit features [t x d]
        x_h: High-bit features [t x d]
        phi: Anchor indices (SelectiveMerge only)
        policy: Merge case and weights
        rng: Generator for RandomSelection

    Returns:
        Merged features with the input shape
    """
    xl, xm, xh = tc._arr(x_l), tc._arr(x_m), tc._arr(x_h)
    _check_same(xl, xm, xh)
    t = xh.shape[0]

    if policy.case is MergeCase.RANDOM_SELECTION:
        if rng is None:
            raise ArgumentError("RandomSelection needs a seeded generator")
        choice = rng.integers(0, 3, size=t)
        stacked = np.stack([xl, xm, xh])
        return tc.Tensor(stacked[choice, np.arange(t)])

    if policy.case is MergeCase.UNIFORM_FUSION:
        fused = (xh.astype(np.float64) + xm.astype(np.float64) + xl.astype(np.float64)) / 3.0
        return tc.Tensor(fused)

    l1, l2, l3 = policy.lambdas
    fused = l1 * xh.astype(np.float64) + l2 * xm.astype(np.float64) + l3 * xl.astype(np.float64)
    out = fused.astype(xh.dtype)
    anchors = np.asarray(list(phi) if phi is not None else [], dtype=np.int64)
    if anchors.size:
        if anchors.min() < 0 or anchors.max() >= t:
            raise ArgumentError(f"anchor index out of range for {t} tokens: {anchors.tolist()}")
        out[anchors] = xh[anchors]
    return tc.Tensor(out)


def merge_batch(
    outputs: Tuple[tc.ArrayLike, tc.ArrayLike, tc.ArrayLike],
    policy: MergePolicy,
    rng: Optional[np.random.Generator] = None,
) -> tc.Tensor:
    """
    Merges (x_l, x_m, x_h) block outputs of shape [batch, t, d].

    Tokens of the whole batch are flattened to rows, so the anchor fraction
    applies over all batch tokens.
    """
    xl, xm, xh = (tc._arr(x) for x in outputs)
    shape = xh.shape
    rows = [x.reshape(-1, shape[-1]) for x in (xl, xm, xh)]
    phi = select_anchors(rows[2], rows[0], policy.p) if policy.case is MergeCase.SELECTIVE_MERGE else None
    merged = merge(rows[0], rows[1], rows[2], phi, policy, rng)
    return tc.Tensor(merged.data.reshape(shape))


def token_divergence_report(x_fp: tc.ArrayLike, x_q: tc.ArrayLike) -> List[Tuple[int, float]]:
    """Per-token K-S statistic between full-precision and quantized features, largest first."""
    fp, q = tc._arr(x_fp), tc._arr(x_q)
    _check_same(fp, q)
    stats = [(i, tc.ks_statistic(fp[i], q[i])) for i in range(fp.shape[0])]
    stats.sort(key=lambda item: (-item[1], item[0]))
    return stats


def divergence_frame(report: List[Tuple[int, float]]) -> pd.DataFrame:
    frame = pd.DataFrame(report, columns=["token", "ks"])
    frame.insert(0, "rank", np.arange(len(frame)))
    return frame


def save_divergence_report(report: List[Tuple[int, float]], output_path: str) -> str:
    """Writes the token K-S report as CSV."""
    directory = os.path.dirname(output_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    divergence_frame(report).to_csv(output_path, index=False)
    logger.info("Token divergence report saved to %s", output_path)
    return output_path
