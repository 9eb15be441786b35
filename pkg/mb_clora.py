"""
Multi-bit cascaded low-rank adapters.

One (A, B) factor pair serves every bit-width tier. The high tier uses the
leading ``r_h`` ranks, the mid tier the leading ``r_h + r_m`` and the low tier
all of them, so low-bit training also moves the slices high bits rely on.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Tuple, Union

import numpy as np

import tensor_core as tc
from errors import ArgumentError, DimensionError

logger = logging.getLogger(__name__)


class Tier(str, Enum):
    HIGH = "H"
    MID = "M"
    LOW = "L"


TIER_ORDER = (Tier.HIGH, Tier.MID, Tier.LOW)


class SharingMode(str, Enum):
    FULLY_SHARED = "fully_shared"
    INDEPENDENT = "independent"
    CASCADED = "cascaded"

    @classmethod
    def parse(cls, value: Union[str, "SharingMode"]) -> "SharingMode":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"fullyshared": "fully_shared", "shared": "fully_shared"}
        key = aliases.get(key, key)
        for mode in cls:
            if mode.value == key:
                return mode
        raise ArgumentError(f"unknown adapter sharing mode {value!r}; expected one of {[m.value for m in cls]}")


@dataclass(frozen=True)
class RankPartition:
    r_h: int
    r_m: int
    r_l: int

    def __post_init__(self):
        if self.r_h < 1 or self.r_m < 0 or self.r_l < 0:
            raise ArgumentError(f"invalid rank partition {self.as_tuple()}: need r_h >= 1, r_m, r_l >= 0")

    @property
    def total(self) -> int:
        return self.r_h + self.r_m + self.r_l

    def as_tuple(self) -> Tuple[int, int, int]:
        return (self.r_h, self.r_m, self.r_l)

    @classmethod
    def parse(cls, text: str) -> "RankPartition":
        """Parses ``"4,4,4"``."""
        try:
            parts = [int(p) for p in str(text).split(",")]
        except ValueError as e:
            raise ArgumentError(f"rank partition must be three integers, got {text!r}") from e
        if len(parts) != 3:
            raise ArgumentError(f"rank partition must be three integers, got {text!r}")
        return cls(*parts)


def effective_rank(tier: Union[Tier, str], partition: RankPartition) -> int:
    tier = Tier(tier)
    if tier is Tier.HIGH:
        return partition.r_h
    if tier is Tier.MID:
        return partition.r_h + partition.r_m
    return partition.total


def _init_factors(p: int, q: int, rank: int, rng: np.random.Generator, name: str):
    bound = 1.0 / math.sqrt(q)
    a = tc.Variable(rng.uniform(-bound, bound, size=(rank, q)), name=f"{name}.A")
    b = tc.Variable(np.zeros((p, rank)), name=f"{name}.B")
    return a, b


# (variable, axis, length): the leading ``length`` entries along ``axis`` are trainable.
ParamSlice = Tuple[tc.Variable, int, int]


class CascadedAdapter:
    """Shared factors A [r x q], B [p x r] with prefix slices per tier."""

    def __init__(self, shape: Tuple[int, int], partition: RankPartition, rng: np.random.Generator, name: str = ""):
        p, q = shape
        if partition.total > min(p, q):
            raise DimensionError(
                f"total rank {partition.total} exceeds min dimension of host weight", shape
            )
        self.shape = (int(p), int(q))
        self.partition = partition
        self.name = name
        self.A, self.B = _init_factors(p, q, partition.total, rng, name)

    def rank(self, tier: Tier) -> int:
        return effective_rank(tier, self.partition)

    def compensation(self, tier: Union[Tier, str]):
        """R = B[:, :r] @ A[:r, :] for the tier's effective rank."""
        r = self.rank(Tier(tier))
        return tc.matmul(tc.narrow(self.B, 1, 0, r), tc.narrow(self.A, 0, 0, r))

    def parameters(self, tier: Union[Tier, str]) -> List[ParamSlice]:
        r = self.rank(Tier(tier))
        return [(self.A, 0, r), (self.B, 1, r)]

    def variables(self) -> List[tc.Variable]:
        return [self.A, self.B]

    def tensors(self) -> Dict[str, np.ndarray]:
        return {"A": self.A.data, "B": self.B.data}

    def load_tensors(self, tensors: Dict[str, np.ndarray]):
        self.A.value = tc.Tensor(tensors["A"])
        self.B.value = tc.Tensor(tensors["B"])
        self.A.zero_grad()
        self.B.zero_grad()


class IndependentAdapter:
    """Three disjoint (A, B) pairs, one per tier, each of rank ``r_h``."""

    def __init__(self, shape: Tuple[int, int], partition: RankPartition, rng: np.random.Generator, name: str = ""):
        p, q = shape
        if partition.r_h > min(p, q):
            raise DimensionError(f"rank {partition.r_h} exceeds min dimension of host weight", shape)
        self.shape = (int(p), int(q))
        self.partition = partition
        self.name = name
        self.pairs: Dict[Tier, Tuple[tc.Variable, tc.Variable]] = {
            tier: _init_factors(p, q, partition.r_h, rng, f"{name}.{tier.value}") for tier in TIER_ORDER
        }

    def rank(self, tier: Tier) -> int:
        return self.partition.r_h

    def compensation(self, tier: Union[Tier, str]):
        a, b = self.pairs[Tier(tier)]
        return tc.matmul(b, a)

    def parameters(self, tier: Union[Tier, str]) -> List[ParamSlice]:
        a, b = self.pairs[Tier(tier)]
        return [(a, 0, a.shape[0]), (b, 1, b.shape[1])]

    def variables(self) -> List[tc.Variable]:
        return [v for tier in TIER_ORDER for v in self.pairs[tier]]

    def tensors(self) -> Dict[str, np.ndarray]:
        out = {}
        for tier in TIER_ORDER:
            a, b = self.pairs[tier]
            out[f"A{tier.value}"] = a.data
            out[f"B{tier.value}"] = b.data
        return out

    def load_tensors(self, tensors: Dict[str, np.ndarray]):
        for tier in TIER_ORDER:
            a, b = self.pairs[tier]
            a.value = tc.Tensor(tensors[f"A{tier.value}"])
            b.value = tc.Tensor(tensors[f"B{tier.value}"])
            a.zero_grad()
            b.zero_grad()


Adapter = Union[CascadedAdapter, IndependentAdapter]


def build_adapter(
    mode: Union[SharingMode, str],
    shape: Tuple[int, int],
    partition: RankPartition,
    rng: np.random.Generator,
    name: str = "",
) -> Adapter:
    """
    Builds the adapter for one weight matrix under a sharing mode.

    FullyShared collapses the partition to a single rank-``total`` slice used by
    every tier. Independent uses ``r_h`` per tier; pass an equal-split partition
    so all three modes carry the same total rank.
    """
    mode = SharingMode.parse(mode)
    if mode is SharingMode.FULLY_SHARED:
        return CascadedAdapter(shape, RankPartition(partition.total, 0, 0), rng, name)
    if mode is SharingMode.INDEPENDENT:
        return IndependentAdapter(shape, partition, rng, name)
    return CascadedAdapter(shape, partition, rng, name)
