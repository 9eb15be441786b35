"""
Uniform fake quantization.

Weights use an asymmetric per-tensor quantizer whose range is set by learnable
clipping multipliers (alpha on the max, beta on the min) and whose input is the
adapter-compensated weight ``W + R``. Activations use a symmetric per-tensor
quantizer with a frozen scale.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

import tensor_core as tc
from errors import ArgumentError, DimensionError, UnsupportedBitError

logger = logging.getLogger(__name__)

MIN_BITS = 2
MAX_BITS = 8
SCALE_FLOOR = 1e-8
CLIP_FLOOR = 1e-4


@dataclass(frozen=True, order=True)
class BitWidth:
    bits: int

    def __post_init__(self):
        if isinstance(self.bits, bool) or int(self.bits) != self.bits:
            raise ArgumentError(f"bit-width must be an integer, got {self.bits!r}")
        if not MIN_BITS <= self.bits <= MAX_BITS:
            raise ArgumentError(f"bit-width must be in [{MIN_BITS}, {MAX_BITS}], got {self.bits}")
        object.__setattr__(self, "bits", int(self.bits))

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1))

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def half_levels(self) -> int:
        """The 2^(b-1) denominator of the weight scale."""
        return 2 ** (self.bits - 1)

    def __int__(self):
        return self.bits

    def __str__(self):
        return str(self.bits)


BitLike = Union[int, BitWidth]


def as_bitwidth(b: BitLike) -> BitWidth:
    return b if isinstance(b, BitWidth) else BitWidth(int(b))


@dataclass(frozen=True)
class WeightQuantParams:
    scale: float
    zero_point: int
    degenerate: bool = False


@dataclass(frozen=True)
class ActQuantParams:
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ArgumentError(f"activation scale must be positive, got {self.scale}")


class ClipSet:
    """
    Learnable (alpha, beta) clipping pair per bit-width for one weight matrix.

    Both start at 1, i.e. plain min-max quantization.
    """

    def __init__(self, bits: Iterable[BitLike], layer: str = ""):
        self.layer = layer
        self._pairs: Dict[int, Tuple[tc.Variable, tc.Variable]] = {}
        for b in sorted({int(as_bitwidth(b)) for b in bits}):
            self._pairs[b] = (
                tc.Variable(np.ones(()), name=f"{layer}.alpha{b}"),
                tc.Variable(np.ones(()), name=f"{layer}.beta{b}"),
            )

    @property
    def bits(self) -> List[int]:
        return list(self._pairs)

    def pair(self, b: BitLike) -> Tuple[tc.Variable, tc.Variable]:
        key = int(b)
        if key not in self._pairs:
            raise UnsupportedBitError(key, layer=self.layer, supported=self._pairs)
        return self._pairs[key]

    def values(self, b: BitLike) -> Tuple[float, float]:
        alpha, beta = self.pair(b)
        return alpha.value.item(), beta.value.item()

    def set_values(self, b: BitLike, alpha: float, beta: float):
        a_var, b_var = self.pair(b)
        a_var.assign(np.asarray(alpha))
        b_var.assign(np.asarray(beta))

    def variables(self, b: BitLike = None) -> List[tc.Variable]:
        if b is not None:
            return list(self.pair(b))
        return [v for pair in self._pairs.values() for v in pair]

    def freeze(self):
        for v in self.variables():
            v.requires_grad = False

    def clamp(self, floor: float = CLIP_FLOOR):
        """Keeps every clip strictly positive after an optimizer update."""
        for v in self.variables():
            if v.value.item() < floor:
                v.assign(np.asarray(floor))


def _range_terms(w_eff: np.ndarray, alpha: float, beta: float):
    hi = alpha * float(np.max(w_eff))
    lo = beta * float(np.min(w_eff))
    return hi, lo


def compute_weight_qparams(w_eff, alpha: float, beta: float, b: BitLike) -> WeightQuantParams:
    """
    Computes the per-tensor scale and zero-point of the weight quantizer.

    Args:
        w_eff: Compensated weight W + R
        alpha: Multiplier on the weight max
        beta: Multiplier on the weight min
        b: Bit-width

    Returns:
        WeightQuantParams; degenerate ranges fall back to the 1e-8 scale floor
    """
    bw = as_bitwidth(b)
    if alpha <= 0 or beta <= 0:
        raise ArgumentError(f"clip multipliers must be positive, got alpha={alpha}, beta={beta}")
    arr = tc._arr(w_eff)
    hi, lo = _range_terms(arr, alpha, beta)
    span = hi - lo
    if span <= 0:
        logger.warning("Degenerate weight range (alpha*max - beta*min = %g); using scale floor", span)
        s = SCALE_FLOOR
        degenerate = True
    else:
        s = float(np.float32(span / bw.half_levels))
        degenerate = False
    z = -int(np.rint(lo / s))
    return WeightQuantParams(scale=s, zero_point=z, degenerate=degenerate)


def fake_quant_weight(
    w: tc.ArrayLike,
    r: tc.ArrayLike,
    clips: Tuple[tc.ArrayLike, tc.ArrayLike],
    b: BitLike,
):
    """
    Quantize-dequantize of the compensated weight with taped STE ops.

    Scale and zero-point are rebuilt from the current (w + r, alpha, beta) on
    every call, so gradients reach r and both clips.

    Args:
        w: Frozen weight
        r: Low-rank compensation of the same shape
        clips: (alpha, beta) scalars or Variables
        b: Bit-width

    Returns:
        Fake-quantized weight
    """
    bw = as_bitwidth(b)
    if tuple(tc._arr(w).shape) != tuple(tc._arr(r).shape):
        raise DimensionError("weight and compensation differ", tc._arr(w).shape, tc._arr(r).shape)
    alpha, beta = clips
    w_eff = tc.add(w, r)

    hi = tc.mul(alpha, tc.max_all(w_eff))
    lo = tc.mul(beta, tc.min_all(w_eff))
    span = tc.sub(hi, lo)
    if tc._arr(span).item() <= 0:
        logger.warning("Degenerate weight range during fake quantization; using scale floor")
        s = tc.Tensor(SCALE_FLOOR)
    else:
        s = tc.scale(span, 1.0 / bw.half_levels)
    z = tc.scale(tc.round_ste(tc.div(lo, s)), -1.0)

    codes = tc.clip_ste(tc.add(tc.round_ste(tc.div(w_eff, s)), z), bw.qmin, bw.qmax)
    return tc.mul(s, tc.sub(codes, z))


def fake_quant_act(x: tc.ArrayLike, s_a: float, b: BitLike):
    """
    Symmetric activation quantize-dequantize with a frozen scale.

    Args:
        x: Activations
        s_a: Positive scale
        b: Bit-width

    Returns:
        s_a * clip(round(x / s_a), -2^(b-1), 2^(b-1) - 1)
    """
    bw = as_bitwidth(b)
    s_a = float(s_a)
    if not s_a > 0 or not math.isfinite(s_a):
        raise ArgumentError(f"activation scale must be positive and finite, got {s_a}")
    codes = tc.clip_ste(tc.round_ste(tc.div(x, s_a)), bw.qmin, bw.qmax)
    return tc.mul(codes, s_a)


def init_act_scale(
    calib_samples: Sequence[tc.ArrayLike], b: BitLike, percentile: float = 0.999
) -> ActQuantParams:
    """
    Initializes an activation scale from the |x| quantile of calibration data.

    Args:
        calib_samples: Activation tensors seen at one quantization site
        b: Bit-width
        percentile: Quantile in (0, 1]

    Returns:
        ActQuantParams with the scale floored at 1e-8
    """
    bw = as_bitwidth(b)
    if not calib_samples:
        raise ArgumentError("init_act_scale needs at least one calibration sample")
    if not 0.0 < percentile <= 1.0:
        raise ArgumentError(f"percentile must be in (0, 1], got {percentile}")
    flat = np.concatenate([np.abs(tc._arr(x)).reshape(-1).astype(np.float64) for x in calib_samples])
    if flat.size == 0:
        raise ArgumentError("init_act_scale received only empty samples")
    q = float(np.quantile(flat, percentile))
    return ActQuantParams(scale=max(q / bw.qmax, SCALE_FLOOR))


def weight_quant_error(w: tc.ArrayLike, b: BitLike, alpha: float = 1.0, beta: float = 1.0) -> float:
    """Mean absolute error of fake-quantizing ``w`` with fixed clips and no compensation."""
    arr = tc._arr(w)
    with tc.Tape():
        wq = fake_quant_weight(arr, np.zeros_like(arr), (alpha, beta), b)
    return float(np.mean(np.abs(tc._arr(wq).astype(np.float64) - arr)))
