"""
Block-wise elastic calibration.

Each calibration step samples one bit-width from each tier, then runs three
sequential sub-steps (high, mid, low). Each sub-step reconstructs the block's
full-precision output from the quantized path, backpropagates, and updates
only that tier's adapter slice and that bit's clipping pair. After a block is
done its three bit-width outputs are merged token-wise into the next block's
quantized input.

Configuring a calibrated model at any bit setting in B is a pure selection of
adapter slice, clip pair and activation scale; no optimization happens.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

import mb_clora as clora
import mb_tome as tome
import model_zoo as zoo
import quantizer as qz
import tensor_core as tc
from config import Settings, get_settings
from errors import ArgumentError, ConfigError, DataError, UnsupportedBitError

logger = logging.getLogger(__name__)

# Incremented on every optimizer update; configure() must leave it unchanged.
OPTIMIZER_STEPS = 0

LOSSES = ("mae", "mse")
STUDIES = ("tome", "lora", "modules")


# ----------------------------------------------------------------------------
# Tier partition
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class TierPartition:
    low: Tuple[int, ...]
    mid: Tuple[int, ...]
    high: Tuple[int, ...]

    def __post_init__(self):
        tiers = []
        for name in ("low", "mid", "high"):
            values = tuple(sorted(int(qz.as_bitwidth(b)) for b in getattr(self, name)))
            if not values:
                raise ArgumentError(f"tier {name} is empty")
            if len(set(values)) != len(values):
                raise ArgumentError(f"tier {name} repeats a bit-width: {values}")
            object.__setattr__(self, name, values)
            tiers.append(values)
        low, mid, high = tiers
        if not (max(low) < min(mid) and max(mid) < min(high)):
            raise ArgumentError(f"tiers must be ordered low < mid < high, got {self.describe()}")

    @property
    def bits(self) -> Tuple[int, ...]:
        return self.low + self.mid + self.high

    def tier_of(self, b: int) -> clora.Tier:
        if b in self.high:
            return clora.Tier.HIGH
        if b in self.mid:
            return clora.Tier.MID
        if b in self.low:
            return clora.Tier.LOW
        raise ArgumentError(f"bit-width {b} is not in the calibrated set {list(self.bits)}")

    def describe(self) -> str:
        return "/".join(",".join(str(b) for b in tier) for tier in (self.low, self.mid, self.high))

    def to_dict(self) -> Dict[str, List[int]]:
        return {"low": list(self.low), "mid": list(self.mid), "high": list(self.high)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Sequence[int]]) -> "TierPartition":
        return cls(tuple(data["low"]), tuple(data["mid"]), tuple(data["high"]))


def parse_tiers(text: str) -> TierPartition:
    """Parses ``"4/5,6/7,8"`` into low/mid/high tiers."""
    groups = str(text).split("/")
    if len(groups) != 3:
        raise ArgumentError(f"tiers must be three '/'-separated groups, got {text!r}")
    try:
        parsed = [tuple(int(b) for b in g.split(",") if b.strip()) for g in groups]
    except ValueError as e:
        raise ArgumentError(f"tiers must contain integers, got {text!r}") from e
    return TierPartition(*parsed)


def parse_bits(text: str) -> Tuple[int, ...]:
    """Parses ``"4,5,6,7,8"`` or a range ``"2-8"``."""
    text = str(text).strip()
    try:
        if "-" in text:
            lo, hi = (int(v) for v in text.split("-", 1))
            values = tuple(range(lo, hi + 1))
        else:
            values = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as e:
        raise ArgumentError(f"bit set must be integers, got {text!r}") from e
    for b in values:
        qz.as_bitwidth(b)
    return tuple(sorted(set(values)))


def default_partition(bits: Iterable[int]) -> TierPartition:
    """
    Splits sorted B into contiguous low/mid/high groups.

    Each tier gets floor(n/3) bits; the remainder goes to the high tier first,
    then the mid tier.
    """
    ordered = sorted({int(qz.as_bitwidth(b)) for b in bits})
    n = len(ordered)
    if n < 3:
        raise ArgumentError(f"need at least three bit-widths, got {ordered}")
    base, extra = divmod(n, 3)
    sizes = [base, base + (1 if extra == 2 else 0), base + (1 if extra >= 1 else 0)]
    low = ordered[: sizes[0]]
    mid = ordered[sizes[0]: sizes[0] + sizes[1]]
    high = ordered[sizes[0] + sizes[1]:]
    return TierPartition(tuple(low), tuple(mid), tuple(high))


def sample_bits(partition: TierPartition, rng: np.random.Generator) -> Tuple[int, int, int]:
    """Draws one bit-width uniformly from each tier: (b_L, b_M, b_H)."""
    return tuple(int(tier[rng.integers(len(tier))]) for tier in (partition.low, partition.mid, partition.high))


# ----------------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class CalibConfig:
    steps: int = 200
    lr_adapter: float = 1e-3
    lr_clip: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    merge_policy: tome.MergePolicy = field(default_factory=tome.MergePolicy)
    loss: str = "mae"
    sharing: clora.SharingMode = clora.SharingMode.CASCADED
    ranks: clora.RankPartition = field(default_factory=lambda: clora.RankPartition(4, 4, 4))
    learn_clips: bool = True
    use_tome: bool = True
    weight_only: bool = False
    passthrough: bool = False
    percentile: float = 0.999
    progress: bool = True

    def __post_init__(self):
        object.__setattr__(self, "sharing", clora.SharingMode.parse(self.sharing))
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.steps < 0 or self.batch_size <= 0:
            raise ConfigError("steps must be >= 0 and batch_size positive")
        if self.lr_adapter <= 0 or self.lr_clip <= 0:
            raise ConfigError("learning rates must be positive")

    @classmethod
    def from_settings(cls, settings: Optional[Settings] = None, **overrides) -> "CalibConfig":
        """Builds a config from environment defaults plus explicit overrides (None ignored)."""
        settings = settings or get_settings()
        values = dict(
            steps=settings.steps,
            lr_adapter=settings.lr_adapter,
            lr_clip=settings.lr_clip,
            batch_size=settings.batch_size,
            seed=settings.seed,
            percentile=settings.percentile,
            progress=settings.progress,
        )
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        """Output-determining fields only; ``progress`` is left out."""
        data = asdict(self)
        data.pop("progress")
        data["merge_policy"] = self.merge_policy.to_dict()
        data["sharing"] = self.sharing.value
        data["ranks"] = list(self.ranks.as_tuple())
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CalibConfig":
        values = dict(data)
        values["merge_policy"] = tome.MergePolicy.from_dict(values["merge_policy"])
        values["ranks"] = clora.RankPartition(*values["ranks"])
        return cls(**values)


# ----------------------------------------------------------------------------
# Optimizer
# ----------------------------------------------------------------------------


class SliceAdam:
    """
    Adam over leading slices of Variables.

    Moments and step counts are kept per element, so entries outside the
    updated slice keep their state untouched.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._state: Dict[int, Tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

    def _slot(self, var: tc.Variable):
        key = id(var)
        if key not in self._state:
            shape = var.shape
            self._state[key] = (np.zeros(shape), np.zeros(shape), np.zeros(shape, dtype=np.int64))
        return self._state[key]

    def step(self, groups: Sequence[Tuple[Sequence[clora.ParamSlice], float]]):
        """
        Applies one update.

        Args:
            groups: (slices, learning rate) pairs; a slice is (variable, axis, length),
                axis None meaning the whole variable
        """
        global OPTIMIZER_STEPS
        for slices, lr in groups:
            for var, axis, length in slices:
                if axis is None:
                    index = (Ellipsis,)
                else:
                    index = [slice(None)] * len(var.shape)
                    index[axis] = slice(0, length)
                    index = tuple(index)
                m, v, t = self._slot(var)
                g = var.grad_array[index].astype(np.float64)
                m[index] = self.beta1 * m[index] + (1 - self.beta1) * g
                v[index] = self.beta2 * v[index] + (1 - self.beta2) * g * g
                t[index] += 1
                m_hat = m[index] / (1 - self.beta1 ** t[index])
                v_hat = v[index] / (1 - self.beta2 ** t[index])
                updated = var.data.astype(np.float64)
                updated[index] -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
                var.assign(updated)
        OPTIMIZER_STEPS += 1


# ----------------------------------------------------------------------------
# Calibrated model
# ----------------------------------------------------------------------------


class CalibratedModel:
    """Frozen model weights plus adapters, clips and activation scales for every b in B."""

    def __init__(
        self,
        model: zoo.ToyModel,
        partition: TierPartition,
        config: CalibConfig,
        adapters: Dict[str, clora.Adapter],
        clips: Dict[str, qz.ClipSet],
        act_scales: Dict[str, Dict[int, float]],
    ):
        self.model = model
        self.partition = partition
        self.config = config
        self.adapters = adapters
        self.clips = clips
        self.act_scales = act_scales
        self.history: List[Dict[str, Any]] = []

    @property
    def bits(self) -> Tuple[int, ...]:
        return self.partition.bits

    def layer_names(self) -> List[str]:
        return self.model.layer_names()

    def _check_bit(self, layer: str, b: int):
        if b not in self.partition.bits:
            raise UnsupportedBitError(b, layer=layer, supported=self.partition.bits)

    def linear_quant(self, layer: str, w_bits: Optional[int], a_bits: Optional[int], trainable: bool = False) -> zoo.LinearQuant:
        """
        Quantization state of one layer at (w_bits, a_bits).

        With ``trainable`` the compensation and clips stay taped Variables;
        otherwise they are plain arrays and floats.
        """
        if self.config.passthrough:
            return zoo.LinearQuant()
        quant = zoo.LinearQuant()
        if w_bits is not None:
            self._check_bit(layer, w_bits)
            tier = self.partition.tier_of(w_bits)
            adapter = self.adapters[layer]
            alpha, beta = self.clips[layer].pair(w_bits)
            if trainable:
                quant.compensation = adapter.compensation(tier)
                quant.alpha, quant.beta = alpha, beta
            else:
                with tc.Tape():
                    quant.compensation = adapter.compensation(tier).data
                quant.alpha, quant.beta = alpha.value.item(), beta.value.item()
            quant.w_bits = w_bits
        if a_bits is not None:
            self._check_bit(layer, a_bits)
            scales = self.act_scales.get(layer, {})
            if a_bits not in scales:
                raise UnsupportedBitError(a_bits, layer=layer, supported=scales)
            quant.a_bits = a_bits
            quant.act_scale = scales[a_bits]
        return quant

    def block_quant(self, block_index: int, b: int, trainable: bool = False) -> Dict[str, zoo.LinearQuant]:
        a_bits = None if self.config.weight_only else b
        return {
            site: self.linear_quant(zoo.layer_name(block_index, site), b, a_bits, trainable)
            for site in zoo.SITES
        }

    def block_variables(self, block_index: int) -> List[tc.Variable]:
        out = []
        for site in zoo.SITES:
            name = zoo.layer_name(block_index, site)
            out.extend(self.adapters[name].variables())
            out.extend(self.clips[name].variables())
        return out

    def trainable_slices(self, block_index: int, b: int) -> Tuple[List[clora.ParamSlice], List[clora.ParamSlice]]:
        """(adapter slices, clip slices) updated by a sub-step at bit b."""
        tier = self.partition.tier_of(b)
        adapter_slices, clip_slices = [], []
        for site in zoo.SITES:
            name = zoo.layer_name(block_index, site)
            adapter_slices.extend(self.adapters[name].parameters(tier))
            if self.config.learn_clips:
                clip_slices.extend((v, None, None) for v in self.clips[name].variables(b))
        return adapter_slices, clip_slices

    def manifest(self) -> Dict[str, Any]:
        return {
            "kind": "calibrated",
            "format_version": zoo.FORMAT_VERSION,
            "model": self.model.manifest(),
            "bits": list(self.bits),
            "tiers": self.partition.to_dict(),
            "ranks": list(self.config.ranks.as_tuple()),
            "sharing": self.config.sharing.value,
            "weight_only": self.config.weight_only,
            "config": self.config.to_dict(),
        }

    def to_artifact(self) -> zoo.ModelArtifact:
        tensors = self.model.tensors()
        for name in self.layer_names():
            for key, arr in self.adapters[name].tensors().items():
                tensors[f"{name}.adapter.{key}"] = arr
            for b in self.bits:
                tensors[f"{name}.clip.{b}"] = np.array(self.clips[name].values(b), dtype=np.float32)
            if name in self.act_scales:
                tensors[f"{name}.act_scale"] = np.array([self.act_scales[name][b] for b in self.bits], dtype=np.float32)
        return zoo.ModelArtifact(manifest=self.manifest(), tensors=tensors)

    @classmethod
    def from_artifact(cls, artifact: zoo.ModelArtifact) -> "CalibratedModel":
        if artifact.kind != "calibrated":
            raise ArgumentError(f"expected a calibrated artifact, got kind {artifact.kind!r}")
        manifest = artifact.manifest
        model = zoo.ToyModel.from_parts(manifest["model"], artifact.tensors)
        partition = TierPartition.from_dict(manifest["tiers"])
        config = CalibConfig.from_dict(manifest["config"])
        calibrated = _empty_state(model, partition, config)
        t = artifact.tensors
        for name in calibrated.layer_names():
            prefix = f"{name}.adapter."
            calibrated.adapters[name].load_tensors(
                {k[len(prefix):]: v for k, v in t.items() if k.startswith(prefix)}
            )
            for b in partition.bits:
                alpha, beta = (float(v) for v in t[f"{name}.clip.{b}"])
                for var, value in zip(calibrated.clips[name].pair(b), (alpha, beta)):
                    var.value = tc.Tensor(np.asarray(value))
            if f"{name}.act_scale" in t:
                calibrated.act_scales[name] = {
                    b: float(s) for b, s in zip(partition.bits, t[f"{name}.act_scale"])
                }
        return calibrated


def _empty_state(model: zoo.ToyModel, partition: TierPartition, config: CalibConfig) -> CalibratedModel:
    adapters, clips = {}, {}
    for i, block in enumerate(model.blocks):
        for site in zoo.SITES:
            name = zoo.layer_name(i, site)
            rng = np.random.default_rng([config.seed, i, zoo.SITES.index(site)])
            adapters[name] = clora.build_adapter(config.sharing, block.weight_shape(site), config.ranks, rng, name)
            clips[name] = qz.ClipSet(partition.bits, layer=name)
            if not config.learn_clips:
                clips[name].freeze()
    return CalibratedModel(model, partition, config, adapters, clips, {})


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def _fp_block_outputs(block: zoo.ToyBlock, data: np.ndarray, batch_size: int, capture=None) -> np.ndarray:
    outputs = []
    for batch in _batches(data.shape[0], batch_size):
        with tc.Tape():
            outputs.append(tc._arr(zoo.forward_block(block, data[batch], None, capture)))
    return np.concatenate(outputs)


def init_quant_state(
    model: zoo.ToyModel, calib: zoo.CalibSet, partition: TierPartition, config: CalibConfig
) -> CalibratedModel:
    """
    Zero adapters, alpha = beta = 1 clips, and activation scales from the
    full-precision inputs of every linear layer. Configuring this state gives
    the round-to-nearest baseline.
    """
    if calib.n == 0:
        raise ArgumentError("calibration set is empty")
    if calib.dim != model.dim:
        raise DataError(f"calibration features {calib.dim} do not match model dim {model.dim}")
    state = _empty_state(model, partition, config)
    if config.weight_only:
        return state
    x = calib.data
    for i, block in enumerate(model.blocks):
        capture: Dict[str, List[np.ndarray]] = {}
        x = _fp_block_outputs(block, x, max(config.batch_size, 64), capture)
        for site in zoo.SITES:
            name = zoo.layer_name(i, site)
            # stored at artifact precision so a reloaded model reproduces these outputs
            state.act_scales[name] = {
                b: float(np.float32(qz.init_act_scale(capture[site], b, config.percentile).scale))
                for b in partition.bits
            }
    return state


# ----------------------------------------------------------------------------
# Calibration
# ----------------------------------------------------------------------------


def _loss(config: CalibConfig, out, target):
    return tc.mae(out, target) if config.loss == "mae" else tc.mse(out, target)


def block_step(
    calibrated: CalibratedModel,
    block_index: int,
    x_fp,
    x_merged,
    bits: Tuple[int, int, int],
    optimizer: SliceAdam,
    target: Optional[np.ndarray] = None,
) -> Tuple[float, float, float]:
    """
    One calibration step on one block.

    Runs the high, mid and low bit in that order; each sub-step computes the
    reconstruction loss against the full-precision output of ``x_fp``,
    backpropagates and updates only the reachable parameters of its tier.

    Args:
        calibrated: Calibration state being trained
        block_index: Block to train
        x_fp: Full-precision block input (batch, tokens, dim)
        x_merged: Quantized-path input for the same batch
        bits: (b_L, b_M, b_H)
        optimizer: Optimizer holding this block's moments
        target: Optional precomputed full-precision output for ``x_fp``

    Returns:
        (loss_L, loss_M, loss_H) measured before each sub-step's update
    """
    for b in bits:
        if b not in calibrated.bits:
            raise ArgumentError(f"bit-width {b} is not in the calibrated set {list(calibrated.bits)}")
    block = calibrated.model.blocks[block_index]
    config = calibrated.config
    if target is None:
        with tc.Tape():
            target = tc._arr(zoo.forward_fp(block, x_fp))

    variables = calibrated.block_variables(block_index)
    losses: Dict[int, float] = {}
    b_l, b_m, b_h = bits
    for position, b in ((2, b_h), (1, b_m), (0, b_l)):
        tc.zero_grads(variables)
        with tc.Tape():
            out = zoo.forward_quant(block, x_merged, calibrated.block_quant(block_index, b, trainable=True))
            loss = _loss(config, out, target)
            losses[position] = tc._arr(loss).item()
            if isinstance(loss, tc.Variable) and loss.requires_grad:
                tc.backward(loss)
                adapter_slices, clip_slices = calibrated.trainable_slices(block_index, b)
                optimizer.step([(adapter_slices, config.lr_adapter), (clip_slices, config.lr_clip)])
                for site in zoo.SITES:
                    calibrated.clips[zoo.layer_name(block_index, site)].clamp()
    tc.zero_grads(variables)
    return losses[0], losses[1], losses[2]


def _quantized_block_outputs(
    calibrated: CalibratedModel, block_index: int, x: np.ndarray, b: int, batch_size: int
) -> np.ndarray:
    block = calibrated.model.blocks[block_index]
    quant = calibrated.block_quant(block_index, b)
    outputs = []
    for batch in _batches(x.shape[0], batch_size):
        with tc.Tape():
            outputs.append(tc._arr(zoo.forward_quant(block, x[batch], quant)))
    return np.concatenate(outputs)


def _merged_inputs(
    calibrated: CalibratedModel,
    block_index: int,
    x_merged: np.ndarray,
    rng: np.random.Generator,
    tome_rng: np.random.Generator,
) -> np.ndarray:
    """Next block's quantized-path input: per batch, merge the three sampled bit-width outputs."""
    config = calibrated.config
    block = calibrated.model.blocks[block_index]
    merged = []
    for batch in _batches(x_merged.shape[0], config.batch_size):
        b_l, b_m, b_h = sample_bits(calibrated.partition, rng)
        outs = []
        for b in (b_l, b_m, b_h):
            with tc.Tape():
                quant = calibrated.block_quant(block_index, b)
                outs.append(tc._arr(zoo.forward_quant(block, x_merged[batch], quant)))
        merged.append(tome.merge_batch(tuple(outs), config.merge_policy, tome_rng).data)
    return np.concatenate(merged)


def calibrate_model(
    model: zoo.ToyModel,
    calib: zoo.CalibSet,
    partition: TierPartition,
    config: CalibConfig,
) -> CalibratedModel:
    """
    Calibrates all blocks in order.

    Args:
        model: Full-precision toy model (never modified)
        calib: Calibration sequences
        partition: Low/mid/high tiers of B
        config: Calibration settings

    Returns:
        CalibratedModel with trained adapters and clips for every b in B
    """
    if calib.n == 0:
        raise ArgumentError("calibration set is empty")
    calibrated = init_quant_state(model, calib, partition, config)
    rng = np.random.default_rng(config.seed)
    tome_rng = np.random.default_rng([config.seed, 1])

    x_fp = calib.data
    x_merged = calib.data
    batch = min(config.batch_size, calib.n)
    for i, block in enumerate(model.blocks):
        optimizer = SliceAdam()
        steps = tqdm(range(config.steps), desc=f"block {i}", disable=not config.progress, leave=False)
        losses = (0.0, 0.0, 0.0)
        for step in steps:
            idx = np.sort(rng.choice(calib.n, size=batch, replace=False))
            bits = sample_bits(partition, rng)
            losses = block_step(calibrated, i, x_fp[idx], x_merged[idx], bits, optimizer)
            record = {
                "block": i,
                "step": step,
                "b_L": bits[0],
                "b_M": bits[1],
                "b_H": bits[2],
                "loss_L": losses[0],
                "loss_M": losses[1],
                "loss_H": losses[2],
            }
            calibrated.history.append(record)
            logger.debug("block %d step %d bits %s losses %s", i, step, bits, losses)
            if config.progress:
                steps.set_postfix(loss_L=f"{losses[0]:.4f}", loss_H=f"{losses[2]:.4f}")
        logger.info(
            "Block %d calibrated: loss_L=%.5f loss_M=%.5f loss_H=%.5f", i, losses[0], losses[1], losses[2]
        )

        if i + 1 == len(model.blocks):
            break
        x_fp_next = _fp_block_outputs(block, x_fp, config.batch_size)
        if config.use_tome and not config.passthrough:
            x_merged = _merged_inputs(calibrated, i, x_merged, rng, tome_rng)
        else:
            x_merged = x_fp_next
        x_fp = x_fp_next
    return calibrated


def write_history(history: Sequence[Mapping[str, Any]], path: str) -> str:
    """Writes the per-step loss log as JSON lines."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w") as f:
        for record in history:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    return path


# ----------------------------------------------------------------------------
# Elastic configuration
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class BitConfig:
    """Layer name -> (weight bits, activation bits); None means full precision."""

    layers: Tuple[Tuple[str, Optional[int], Optional[int]], ...]

    @classmethod
    def uniform(cls, layers: Iterable[str], bits: Optional[int], weight_only: bool = False) -> "BitConfig":
        a_bits = None if weight_only else bits
        return cls(tuple((name, bits, a_bits) for name in layers))

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Tuple[Optional[int], Optional[int]]]) -> "BitConfig":
        return cls(tuple((name, w, a) for name, (w, a) in sorted(mapping.items())))

    def as_mapping(self) -> Dict[str, Tuple[Optional[int], Optional[int]]]:
        return {name: (w, a) for name, w, a in self.layers}

    def average_weight_bits(self) -> float:
        bits = [w for _, w, _ in self.layers if w is not None]
        return sum(bits) / len(bits) if bits else float("nan")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": "bit_config",
            "layers": {name: {"w": w, "a": a} for name, w, a in self.layers},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "BitConfig":
        try:
            layers = data["layers"]
            return cls.from_mapping({name: (entry.get("w"), entry.get("a")) for name, entry in layers.items()})
        except (KeyError, AttributeError, TypeError) as e:
            raise ConfigError(f"malformed bit configuration: {e}") from e

    def save(self, path: str) -> str:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        return path

    @classmethod
    def load(cls, path: str) -> "BitConfig":
        try:
            with open(path, "r") as f:
                return cls.from_dict(json.load(f))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read bit configuration {path}: {e}") from e


@dataclass
class DeployableModel:
    """A calibrated model bound to one BitConfig; read-only."""

    model: zoo.ToyModel
    bit_config: BitConfig
    quant: Dict[str, zoo.LinearQuant]

    def forward(self, x):
        return zoo.forward_model(self.model, x, self.quant)

    def run(self, data: np.ndarray, batch_size: int = 64) -> np.ndarray:
        return zoo.run_inference(self.model, data, self.quant, batch_size)

    def to_artifact(self) -> zoo.ModelArtifact:
        tensors = self.model.tensors()
        for name, q in sorted(self.quant.items()):
            if q.compensation is not None:
                tensors[f"{name}.compensation"] = np.asarray(q.compensation, dtype=np.float32)
            tensors[f"{name}.clip"] = np.array([q.alpha, q.beta], dtype=np.float32)
            if q.act_scale is not None:
                tensors[f"{name}.act_scale"] = np.array([q.act_scale], dtype=np.float32)
        manifest = {
            "kind": "deployable",
            "format_version": zoo.FORMAT_VERSION,
            "model": self.model.manifest(),
            "bit_config": self.bit_config.to_dict(),
        }
        return zoo.ModelArtifact(manifest=manifest, tensors=tensors)

    @classmethod
    def from_artifact(cls, artifact: zoo.ModelArtifact) -> "DeployableModel":
        if artifact.kind != "deployable":
            raise ArgumentError(f"expected a deployable artifact, got kind {artifact.kind!r}")
        model = zoo.ToyModel.from_parts(artifact.manifest["model"], artifact.tensors)
        bit_config = BitConfig.from_dict(artifact.manifest["bit_config"])
        t = artifact.tensors
        quant = {}
        for name, w, a in bit_config.layers:
            alpha, beta = (float(v) for v in t[f"{name}.clip"])
            quant[name] = zoo.LinearQuant(
                w_bits=w,
                compensation=t.get(f"{name}.compensation"),
                alpha=alpha,
                beta=beta,
                a_bits=a,
                act_scale=float(t[f"{name}.act_scale"][0]) if f"{name}.act_scale" in t else None,
            )
        return cls(model=model, bit_config=bit_config, quant=quant)


def configure(calibrated: CalibratedModel, cfg: BitConfig) -> DeployableModel:
    """
    Binds every layer to the adapter slice, clip pair and activation scale of
    its requested bits. Pure selection: no parameter or optimizer state changes.

    Raises:
        UnsupportedBitError: a requested bit is outside B, naming the layer
    """
    known = set(calibrated.layer_names())
    mapping = cfg.as_mapping()
    unknown = sorted(set(mapping) - known)
    if unknown:
        raise ArgumentError(f"bit configuration names unknown layers: {unknown}")
    quant = {}
    for name in calibrated.layer_names():
        w, a = mapping.get(name, (None, None))
        for b in (w, a):
            if b is not None and b not in calibrated.bits:
                raise UnsupportedBitError(b, layer=name, supported=calibrated.bits)
        quant[name] = calibrated.linear_quant(name, w, a)
    return DeployableModel(model=calibrated.model, bit_config=cfg, quant=quant)


def uniform_config(calibrated: CalibratedModel, bits: Optional[int]) -> BitConfig:
    return BitConfig.uniform(calibrated.layer_names(), bits, calibrated.config.weight_only)


# ----------------------------------------------------------------------------
# Evaluation
# ----------------------------------------------------------------------------


@dataclass
class EvalReport:
    mae: float
    per_block_mae: List[float]
    token_ks: List[Tuple[int, float]]
    bit_config: Dict[str, Any]

    def metrics_frame(self) -> pd.DataFrame:
        rows = [{"metric": "mae", "block": "all", "value": self.mae}]
        rows += [{"metric": "mae", "block": str(i), "value": v} for i, v in enumerate(self.per_block_mae)]
        if self.token_ks:
            stats = np.array([s for _, s in self.token_ks])
            rows.append({"metric": "ks_mean", "block": "all", "value": float(stats.mean())})
            rows.append({"metric": "ks_max", "block": "all", "value": float(stats.max())})
        return pd.DataFrame(rows)

    def summary(self) -> str:
        lines = [f"End-to-end MAE vs full precision: {self.mae:.6f}"]
        for i, v in enumerate(self.per_block_mae):
            lines.append(f"  block {i}: {v:.6f}")
        if self.token_ks:
            top = ", ".join(f"{t}:{s:.3f}" for t, s in self.token_ks[:5])
            lines.append(f"Most divergent tokens (token:K-S): {top}")
        return "\n".join(lines)

    def save(self, output_dir: str) -> Dict[str, str]:
        os.makedirs(output_dir, exist_ok=True)
        paths = {
            "metrics": os.path.join(output_dir, "metrics.csv"),
            "token_ks": os.path.join(output_dir, "token_ks.csv"),
            "summary": os.path.join(output_dir, "summary.txt"),
        }
        self.metrics_frame().to_csv(paths["metrics"], index=False)
        tome.save_divergence_report(self.token_ks, paths["token_ks"])
        with open(paths["summary"], "w") as f:
            f.write(self.summary() + "\n")
        return paths


def evaluate(deployable: DeployableModel, data: np.ndarray, batch_size: int = 64) -> EvalReport:
    """
    Compares a deployable against the full-precision model on ``data``.

    Returns:
        End-to-end MAE, per-block MAE of the quantized chain against the
        full-precision chain, and per-token K-S statistics of final outputs
    """
    data = np.asarray(data, dtype=np.float32)
    model = deployable.model
    if data.ndim != 3 or data.shape[-1] != model.dim or data.shape[0] == 0:
        raise DataError(f"evaluation data must be (n, tokens, {model.dim}), got {data.shape}")

    fp_blocks: List[List[np.ndarray]] = [[] for _ in model.blocks]
    q_blocks: List[List[np.ndarray]] = [[] for _ in model.blocks]
    for batch in _batches(data.shape[0], batch_size):
        for quant, sink in ((None, fp_blocks), (deployable.quant, q_blocks)):
            outs: List[np.ndarray] = []
            with tc.Tape():
                zoo.forward_model(model, data[batch], quant, outs)
            for i, o in enumerate(outs):
                sink[i].append(o)
    fp = [np.concatenate(chunks).astype(np.float64) for chunks in fp_blocks]
    q = [np.concatenate(chunks).astype(np.float64) for chunks in q_blocks]
    per_block = [float(np.mean(np.abs(a - b))) for a, b in zip(fp, q)]
    rows_fp = fp[-1].reshape(-1, model.dim)
    rows_q = q[-1].reshape(-1, model.dim)
    return EvalReport(
        mae=per_block[-1],
        per_block_mae=per_block,
        token_ks=tome.token_divergence_report(rows_fp, rows_q),
        bit_config=deployable.bit_config.to_dict(),
    )


def end_to_end_mae(deployable: DeployableModel, data: np.ndarray, batch_size: int = 64) -> float:
    """Output MAE only; skips the per-block and token reports."""
    data = np.asarray(data, dtype=np.float32)
    fp = zoo.run_inference(deployable.model, data, None, batch_size).astype(np.float64)
    q = deployable.run(data, batch_size).astype(np.float64)
    return float(np.mean(np.abs(fp - q)))


def uniform_mae_table(calibrated: CalibratedModel, data: np.ndarray) -> Dict[int, float]:
    return {b: end_to_end_mae(configure(calibrated, uniform_config(calibrated, b)), data) for b in calibrated.bits}


# ----------------------------------------------------------------------------
# Ablations
# ----------------------------------------------------------------------------


def ablation_arms(study: str, base: CalibConfig) -> List[Tuple[str, CalibConfig]]:
    """
    Matched calibration configs for one ablation study.

    All arms share seed, data and total adapter rank with ``base``.
    """
    if study == "tome":
        return [
            (f"case{i}_{case.value}", replace(base, merge_policy=replace(base.merge_policy, case=case), use_tome=True))
            for i, case in enumerate(tome.MergeCase, start=1)
        ]
    if study == "lora":
        return [
            (mode.value, replace(base, sharing=mode))
            for mode in (clora.SharingMode.FULLY_SHARED, clora.SharingMode.INDEPENDENT, clora.SharingMode.CASCADED)
        ]
    if study == "modules":
        rows = [
            # (clip, cascaded lora, token merging, mae)
            (False, False, False, False),
            (True, False, False, False),
            (True, True, False, False),
            (True, False, True, False),
            (True, True, True, False),
            (True, True, True, True),
        ]
        arms = []
        for clip, cascaded, merging, mae in rows:
            parts = [label for label, on in (("clip", clip), ("clora", cascaded), ("tome", merging), ("mae", mae)) if on]
            name = "+".join(parts) if parts else "baseline"
            arms.append(
                (
                    name,
                    replace(
                        base,
                        learn_clips=clip,
                        sharing=clora.SharingMode.CASCADED if cascaded else clora.SharingMode.INDEPENDENT,
                        use_tome=merging,
                        loss="mae" if mae else "mse",
                    ),
                )
            )
        return arms
    raise ArgumentError(f"unknown ablation study {study!r}; expected one of {STUDIES}")


def run_ablation(
    model: zoo.ToyModel,
    calib: zoo.CalibSet,
    partition: TierPartition,
    base: CalibConfig,
    study: str,
    eval_data: Optional[np.ndarray] = None,
) -> pd.DataFrame:
    """
    Calibrates every arm of a study and tabulates end-to-end MAE per uniform bit.

    Returns:
        DataFrame with an ``arm`` column and one column per bit setting
    """
    arms = ablation_arms(study, base)
    data = calib.data if eval_data is None else eval_data
    rows = []
    for name, config in arms:
        logger.info("Ablation %s: calibrating arm %s", study, name)
        calibrated = calibrate_model(model, calib, partition, config)
        maes = uniform_mae_table(calibrated, data)
        row = {"arm": name}
        for b, v in maes.items():
            row[f"W{b}A16" if config.weight_only else f"W{b}A{b}"] = v
        rows.append(row)
    return pd.DataFrame(rows)
