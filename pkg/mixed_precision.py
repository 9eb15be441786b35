"""
Training-free mixed-precision weight bit allocation.

Per-layer sensitivity is the KL divergence between the full-precision output
distribution and the output with only that layer's weights quantized. A
knapsack-style dynamic program then picks one bit per layer minimizing total
sensitivity under an integer total-bit budget.

Scores are compared exactly: every float score is expanded to an integer over
a common power-of-two denominator, so the DP and the brute-force oracle agree
bit-for-bit on their objectives.
"""

import logging
import math
import os
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

import model_zoo as zoo
from errors import ArgumentError, DataError, InfeasibleBudgetError, InstanceTooLargeError
from recon_engine import BitConfig, CalibratedModel

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-10
BRUTE_FORCE_LIMIT = 10 ** 7


class SensitivityTable:
    """Non-negative KL scores indexed by (layer, bit)."""

    def __init__(self, layers: Sequence[str], bits: Sequence[int], scores: np.ndarray):
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != (len(layers), len(bits)):
            raise ArgumentError(f"score matrix shape {scores.shape} does not match {len(layers)} layers x {len(bits)} bits")
        if not np.all(np.isfinite(scores)) or np.any(scores < 0):
            raise ArgumentError("sensitivity scores must be finite and non-negative")
        self.layers = list(layers)
        self.bits = [int(b) for b in bits]
        self.scores = scores

    def value(self, layer: str, b: int) -> float:
        return float(self.scores[self.layers.index(layer), self.bits.index(int(b))])

    def column(self, b: int) -> Dict[str, float]:
        j = self.bits.index(int(b))
        return {layer: float(self.scores[i, j]) for i, layer in enumerate(self.layers)}

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"layer": layer, "bit": b, "kl": float(self.scores[i, j])}
            for i, layer in enumerate(self.layers)
            for j, b in enumerate(self.bits)
        ]
        return pd.DataFrame(rows, columns=["layer", "bit", "kl"])

    def save_csv(self, path: str) -> str:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        return path

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "SensitivityTable":
        missing = {"layer", "bit", "kl"} - set(frame.columns)
        if missing:
            raise ArgumentError(f"sensitivity table is missing columns {sorted(missing)}")
        layers = list(dict.fromkeys(frame["layer"].astype(str)))
        bits = sorted(int(b) for b in frame["bit"].unique())
        pivot = frame.pivot_table(index="layer", columns="bit", values="kl", aggfunc="first")
        pivot = pivot.reindex(index=layers, columns=bits)
        if pivot.isna().any().any():
            raise ArgumentError("sensitivity table does not cover every (layer, bit) pair")
        return cls(layers, bits, pivot.to_numpy())

    @classmethod
    def from_csv(cls, path: str) -> "SensitivityTable":
        return cls.from_frame(pd.read_csv(path))


@dataclass(frozen=True)
class Budget:
    """Average weight-bit target over ``layers`` layers."""

    target: float
    layers: int

    def __post_init__(self):
        if self.layers < 1:
            raise ArgumentError(f"budget needs at least one layer, got {self.layers}")
        if not math.isfinite(self.target) or self.target <= 0:
            raise ArgumentError(f"average-bit target must be positive, got {self.target}")

    @property
    def total_bits(self) -> int:
        """floor(target * L), evaluated on the decimal value of the target."""
        return math.floor(Fraction(repr(float(self.target))) * self.layers)


@dataclass
class Allocation:
    bits: Dict[str, int]
    achieved_avg: float
    objective: Fraction

    @property
    def total(self) -> float:
        return float(self.objective)

    def to_bit_config(self, activation_bits: Optional[int] = None) -> BitConfig:
        """Weight-only assignment; activations stay full precision unless given."""
        return BitConfig.from_mapping({name: (b, activation_bits) for name, b in self.bits.items()})


# ----------------------------------------------------------------------------
# Sensitivity
# ----------------------------------------------------------------------------


def _softmax64(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def kl_divergence(p_logits: np.ndarray, q_logits: np.ndarray) -> float:
    """Mean over tokens of KL(softmax(p) || softmax(q)) along the feature axis."""
    p = np.clip(_softmax64(p_logits), PROB_FLOOR, None)
    q = np.clip(_softmax64(q_logits), PROB_FLOOR, None)
    kl = np.sum(p * (np.log(p) - np.log(q)), axis=-1)
    return max(float(np.mean(kl)), 0.0)


def _calib_array(calib: Union[zoo.CalibSet, np.ndarray]) -> np.ndarray:
    data = calib.data if isinstance(calib, zoo.CalibSet) else np.asarray(calib, dtype=np.float32)
    if data.ndim != 3 or data.shape[0] == 0:
        raise ArgumentError(f"sensitivity needs a nonempty (n, tokens, dim) calibration set, got {data.shape}")
    return data


def measure_sensitivity(
    calibrated: CalibratedModel,
    calib: Union[zoo.CalibSet, np.ndarray],
    b: int,
    passthrough: bool = False,
    fp_outputs: Optional[np.ndarray] = None,
) -> Dict[str, float]:
    """
    Quantizes one layer at a time to weight bit ``b`` and scores the output KL.

    Args:
        calibrated: Calibrated model
        calib: Calibration sequences
        b: Weight bit-width in B
        passthrough: Leave the layer unquantized (sanity baseline)
        fp_outputs: Optional cached full-precision outputs

    Returns:
        layer name -> KL score
    """
    data = _calib_array(calib)
    if data.shape[-1] != calibrated.model.dim:
        raise DataError(f"calibration features {data.shape[-1]} do not match model dim {calibrated.model.dim}")
    if b not in calibrated.bits:
        raise ArgumentError(f"bit-width {b} is not in the calibrated set {list(calibrated.bits)}")
    if fp_outputs is None:
        fp_outputs = zoo.run_inference(calibrated.model, data)
    column = {}
    for name in calibrated.layer_names():
        quant = zoo.LinearQuant() if passthrough else calibrated.linear_quant(name, b, None)
        out = zoo.run_inference(calibrated.model, data, {name: quant})
        column[name] = kl_divergence(fp_outputs, out)
        logger.debug("Sensitivity %s @ %d bits: %.3e", name, b, column[name])
    return column


def measure_table(
    calibrated: CalibratedModel,
    calib: Union[zoo.CalibSet, np.ndarray],
    bits: Optional[Sequence[int]] = None,
) -> SensitivityTable:
    data = _calib_array(calib)
    bits = sorted(bits or calibrated.bits)
    fp_outputs = zoo.run_inference(calibrated.model, data)
    layers = calibrated.layer_names()
    scores = np.zeros((len(layers), len(bits)))
    for j, b in enumerate(bits):
        column = measure_sensitivity(calibrated, data, b, fp_outputs=fp_outputs)
        scores[:, j] = [column[name] for name in layers]
        logger.info("Measured sensitivity column for %d bits", b)
    return SensitivityTable(layers, bits, scores)


# ----------------------------------------------------------------------------
# Allocation
# ----------------------------------------------------------------------------


def _exact_costs(table: SensitivityTable) -> Tuple[List[List[int]], int]:
    """Integer numerators over one common power-of-two denominator."""
    ratios = [[float(v).as_integer_ratio() for v in row] for row in table.scores]
    denom = max((d for row in ratios for _, d in row), default=1)
    return [[n * (denom // d) for n, d in row] for row in ratios], denom


def _check_budget(table: SensitivityTable, budget: Budget):
    if budget.layers != len(table.layers):
        raise ArgumentError(f"budget covers {budget.layers} layers but the table has {len(table.layers)}")
    if budget.target < min(table.bits):
        raise InfeasibleBudgetError(
            f"average-bit target {budget.target} is below the smallest bit-width {min(table.bits)}"
        )


def _allocation(table: SensitivityTable, chosen: Sequence[int], objective: int, denom: int) -> Allocation:
    bits = {layer: int(b) for layer, b in zip(table.layers, chosen)}
    return Allocation(
        bits=bits,
        achieved_avg=sum(bits.values()) / len(bits),
        objective=Fraction(objective, denom),
    )


def allocate_dp(table: SensitivityTable, budget: Budget) -> Allocation:
    """
    Exact minimizer of total sensitivity with sum of bits <= floor(target * L).

    The state is (layer, remaining extra bits above min(B)). Among optimal
    assignments the one with the highest bits at the earliest layers wins.
    """
    _check_budget(table, budget)
    costs, denom = _exact_costs(table)
    n = len(table.layers)
    floor_bit = min(table.bits)
    order = sorted(range(len(table.bits)), key=lambda j: -table.bits[j])
    capacity = min(budget.total_bits - n * floor_bit, n * (max(table.bits) - floor_bit))

    # best[l][c]: minimal cost of layers l.. with c extra bits left
    best: List[List[Optional[int]]] = [[0] * (capacity + 1) for _ in range(n + 1)]
    for layer in range(n - 1, -1, -1):
        row = best[layer]
        nxt = best[layer + 1]
        for c in range(capacity + 1):
            value = None
            for j in order:
                extra = table.bits[j] - floor_bit
                if extra > c or nxt[c - extra] is None:
                    continue
                cand = costs[layer][j] + nxt[c - extra]
                if value is None or cand < value:
                    value = cand
            row[c] = value

    chosen = []
    c = capacity
    for layer in range(n):
        target = best[layer][c]
        for j in order:
            extra = table.bits[j] - floor_bit
            if extra <= c and best[layer + 1][c - extra] is not None:
                if costs[layer][j] + best[layer + 1][c - extra] == target:
                    chosen.append(table.bits[j])
                    c -= extra
                    break
    allocation = _allocation(table, chosen, best[0][capacity], denom)
    logger.info(
        "DP allocation: avg %.3f bits (target %s), total sensitivity %.6g",
        allocation.achieved_avg,
        budget.target,
        allocation.total,
    )
    return allocation


def allocate_bruteforce(table: SensitivityTable, budget: Budget) -> Allocation:
    """Exhaustive search with the same feasibility rule and tie-break as allocate_dp."""
    _check_budget(table, budget)
    n = len(table.layers)
    if len(table.bits) ** n > BRUTE_FORCE_LIMIT:
        raise InstanceTooLargeError(
            f"{len(table.bits)}^{n} assignments exceed the brute-force limit of {BRUTE_FORCE_LIMIT}"
        )
    costs, denom = _exact_costs(table)
    order = sorted(range(len(table.bits)), key=lambda j: -table.bits[j])
    k = len(order)

    # Grid axis l indexes layer l's bit in descending order, so C-order
    # enumeration visits assignments lexicographically from the highest bits.
    total_bits = np.zeros((1,) * n, dtype=np.int64)
    total_cost = np.zeros((1,) * n, dtype=object)
    for layer in range(n):
        shape = [1] * n
        shape[layer] = k
        total_bits = total_bits + np.array([table.bits[j] for j in order], dtype=np.int64).reshape(shape)
        total_cost = total_cost + np.array([costs[layer][j] for j in order], dtype=object).reshape(shape)

    feasible = (total_bits <= budget.total_bits).reshape(-1).tolist()
    best_cost, best_index = None, None
    for index, (cost, ok) in enumerate(zip(total_cost.reshape(-1).tolist(), feasible)):
        if ok and (best_cost is None or cost < best_cost):
            best_cost, best_index = cost, index
    choice = np.unravel_index(best_index, (k,) * n)
    return _allocation(table, [table.bits[order[int(j)]] for j in choice], best_cost, denom)


def random_table(rng: np.random.Generator, layers: int, bits: Sequence[int]) -> SensitivityTable:
    """Random table whose scores fall as bits grow, for allocator checks and demos."""
    raw = rng.random((layers, len(bits)))
    scores = np.sort(raw, axis=1)[:, ::-1].copy()
    return SensitivityTable([f"layer{i}" for i in range(layers)], list(bits), scores)
