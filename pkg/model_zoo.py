"""
Toy transformer blocks, synthetic calibration data and the artifact container.

A block is pre-norm attention followed by a pre-norm GELU MLP, both with
residual connections. Its four linear layers (qkv, attn_out, mlp_up,
mlp_down) are the quantization sites; norms, softmax and residual adds stay
full precision.

Container layout (all integers little-endian):

    magic "ELASTIQA" | u64 header length | JSON header | pad to 64
    | blob 0 | pad to 64 | blob 1 | ...

The header holds the format version, the manifest, a table of
(name, shape, offset, nbytes, sha256) rows and a SHA-256 of the rest of the
header; blobs are float32 and offsets are relative to the start of the blob
area.
"""

import hashlib
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

import quantizer as qz
import tensor_core as tc
from errors import (
    ArgumentError,
    ArtifactError,
    ChecksumError,
    DimensionError,
    FormatVersionError,
    TruncatedBlobError,
    UnsupportedBitError,
)

logger = logging.getLogger(__name__)

SITES = ("qkv", "attn_out", "mlp_up", "mlp_down")

FORMAT_VERSION = 1
MAGIC = b"ELASTIQA"
ALIGNMENT = 64

DEFAULT_BLOCKS = 2
DEFAULT_DIM = 64
DEFAULT_HEADS = 4
DEFAULT_TOKENS = 16
DEFAULT_MLP_RATIO = 4
DEFAULT_SEQUENCES = 256


def layer_name(block_index: int, site: str) -> str:
    return f"block{block_index}.{site}"


def split_layer_name(name: str) -> Tuple[int, str]:
    head, _, site = name.partition(".")
    if not head.startswith("block") or site not in SITES:
        raise ArgumentError(f"not a layer name: {name!r}")
    return int(head[len("block"):]), site


@dataclass
class ToyBlock:
    """Weights are stored (out_features, in_features); y = x W^T + bias."""

    dim: int
    heads: int
    weights: Dict[str, np.ndarray]
    biases: Dict[str, np.ndarray]
    ln1: Tuple[np.ndarray, np.ndarray]
    ln2: Tuple[np.ndarray, np.ndarray]

    def __post_init__(self):
        if self.dim % self.heads:
            raise ArgumentError(f"hidden dim {self.dim} not divisible by {self.heads} heads")
        hidden = self.weights["mlp_up"].shape[0]
        expected = {
            "qkv": (3 * self.dim, self.dim),
            "attn_out": (self.dim, self.dim),
            "mlp_up": (hidden, self.dim),
            "mlp_down": (self.dim, hidden),
        }
        for site, shape in expected.items():
            if self.weights[site].shape != shape:
                raise DimensionError(f"weight {site} has the wrong shape", shape, self.weights[site].shape)
        for arrays in (self.weights, self.biases):
            for arr in arrays.values():
                arr.setflags(write=False)

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def weight_shape(self, site: str) -> Tuple[int, int]:
        return self.weights[site].shape

    def tensors(self, prefix: str) -> Dict[str, np.ndarray]:
        out = {}
        for site in SITES:
            out[f"{prefix}.{site}.weight"] = self.weights[site]
            out[f"{prefix}.{site}.bias"] = self.biases[site]
        out[f"{prefix}.ln1.gamma"], out[f"{prefix}.ln1.beta"] = self.ln1
        out[f"{prefix}.ln2.gamma"], out[f"{prefix}.ln2.beta"] = self.ln2
        return out

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray], prefix: str, dim: int, heads: int) -> "ToyBlock":
        return cls(
            dim=dim,
            heads=heads,
            weights={s: np.array(tensors[f"{prefix}.{s}.weight"]) for s in SITES},
            biases={s: np.array(tensors[f"{prefix}.{s}.bias"]) for s in SITES},
            ln1=(np.array(tensors[f"{prefix}.ln1.gamma"]), np.array(tensors[f"{prefix}.ln1.beta"])),
            ln2=(np.array(tensors[f"{prefix}.ln2.gamma"]), np.array(tensors[f"{prefix}.ln2.beta"])),
        )


@dataclass
class ToyModel:
    blocks: List[ToyBlock]
    tokens: int = DEFAULT_TOKENS
    seed: Optional[int] = None

    @property
    def dim(self) -> int:
        return self.blocks[0].dim

    @property
    def heads(self) -> int:
        return self.blocks[0].heads

    @property
    def mlp_ratio(self) -> int:
        return self.blocks[0].weights["mlp_up"].shape[0] // self.dim

    def layer_names(self) -> List[str]:
        return [layer_name(i, s) for i in range(len(self.blocks)) for s in SITES]

    def weight(self, name: str) -> np.ndarray:
        i, site = split_layer_name(name)
        return self.blocks[i].weights[site]

    def manifest(self) -> Dict[str, Any]:
        return {
            "blocks": len(self.blocks),
            "dim": self.dim,
            "heads": self.heads,
            "mlp_ratio": self.mlp_ratio,
            "tokens": self.tokens,
            "seed": self.seed,
        }

    def tensors(self) -> Dict[str, np.ndarray]:
        out = {}
        for i, block in enumerate(self.blocks):
            out.update(block.tensors(f"block{i}"))
        return out

    @classmethod
    def from_parts(cls, manifest: Mapping[str, Any], tensors: Mapping[str, np.ndarray]) -> "ToyModel":
        blocks = [
            ToyBlock.from_tensors(tensors, f"block{i}", int(manifest["dim"]), int(manifest["heads"]))
            for i in range(int(manifest["blocks"]))
        ]
        return cls(blocks=blocks, tokens=int(manifest["tokens"]), seed=manifest.get("seed"))


def init_model(
    seed: int = 0,
    blocks: int = DEFAULT_BLOCKS,
    dim: int = DEFAULT_DIM,
    heads: int = DEFAULT_HEADS,
    mlp_ratio: int = DEFAULT_MLP_RATIO,
    tokens: int = DEFAULT_TOKENS,
) -> ToyModel:
    """
    Creates a seeded toy model.

    Weights are N(0, 1/fan_in); biases and norm offsets are small.
    """
    if blocks < 1 or dim < 1 or heads < 1 or mlp_ratio < 1 or tokens < 1:
        raise ArgumentError("model sizes must be positive")
    rng = np.random.default_rng(seed)
    hidden = mlp_ratio * dim
    shapes = {
        "qkv": (3 * dim, dim),
        "attn_out": (dim, dim),
        "mlp_up": (hidden, dim),
        "mlp_down": (dim, hidden),
    }
    built = []
    for _ in range(blocks):
        weights = {
            s: (rng.standard_normal(shape) / math.sqrt(shape[1])).astype(np.float32) for s, shape in shapes.items()
        }
        biases = {s: (0.02 * rng.standard_normal(shape[0])).astype(np.float32) for s, shape in shapes.items()}
        ln1 = ((1.0 + 0.05 * rng.standard_normal(dim)).astype(np.float32), (0.02 * rng.standard_normal(dim)).astype(np.float32))
        ln2 = ((1.0 + 0.05 * rng.standard_normal(dim)).astype(np.float32), (0.02 * rng.standard_normal(dim)).astype(np.float32))
        built.append(ToyBlock(dim=dim, heads=heads, weights=weights, biases=biases, ln1=ln1, ln2=ln2))
    logger.info("Initialized toy model: %d blocks, dim %d, %d heads, seed %d", blocks, dim, heads, seed)
    return ToyModel(blocks=built, tokens=tokens, seed=seed)


# ----------------------------------------------------------------------------
# Forward passes
# ----------------------------------------------------------------------------


@dataclass
class LinearQuant:
    """
    Quantization state for one linear layer at one bit setting.

    ``w_bits`` None leaves the weight (and compensation) untouched; ``a_bits``
    None leaves the layer input in full precision.
    """

    w_bits: Optional[int] = None
    compensation: Any = None
    alpha: Any = 1.0
    beta: Any = 1.0
    a_bits: Optional[int] = None
    act_scale: Optional[float] = None


def _linear(block: ToyBlock, site: str, x, quant: Optional[LinearQuant], capture):
    if capture is not None:
        capture.setdefault(site, []).append(tc._arr(x))
    w = block.weights[site]
    if quant is not None and quant.a_bits is not None:
        if quant.act_scale is None:
            raise UnsupportedBitError(quant.a_bits, layer=site)
        x = qz.fake_quant_act(x, quant.act_scale, quant.a_bits)
    if quant is not None and quant.w_bits is not None:
        r = quant.compensation if quant.compensation is not None else np.zeros_like(w)
        w = qz.fake_quant_weight(w, r, (quant.alpha, quant.beta), quant.w_bits)
    return tc.add(tc.matmul(x, tc.transpose(w)), block.biases[site])


def forward_block(
    block: ToyBlock,
    x,
    quant: Optional[Mapping[str, Optional[LinearQuant]]] = None,
    capture: Optional[Dict[str, List[np.ndarray]]] = None,
):
    """
    Runs one block on x of shape (batch, tokens, dim).

    Args:
        block: Block weights
        x: Input features
        quant: Optional per-site quantization state; missing sites stay full precision
        capture: Optional dict collecting each linear layer's input

    Returns:
        Block output with the input shape
    """
    shape = tc._arr(x).shape
    if len(shape) != 3 or shape[-1] != block.dim:
        raise DimensionError(f"block expects (batch, tokens, {block.dim}) input", shape)
    n, t, d = shape
    h, hd = block.heads, block.head_dim
    quant = quant or {}

    a = tc.layer_norm(x, *block.ln1)
    qkv = _linear(block, "qkv", a, quant.get("qkv"), capture)

    def heads_of(i):
        part = tc.narrow(qkv, 2, i * d, d)
        return tc.transpose(tc.reshape(part, (n, t, h, hd)), (0, 2, 1, 3))

    q, k, v = heads_of(0), heads_of(1), heads_of(2)
    scores = tc.scale(tc.matmul(q, tc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    context = tc.matmul(tc.softmax(scores, axis=-1), v)
    context = tc.reshape(tc.transpose(context, (0, 2, 1, 3)), (n, t, d))
    x1 = tc.add(x, _linear(block, "attn_out", context, quant.get("attn_out"), capture))

    m = tc.layer_norm(x1, *block.ln2)
    up = tc.gelu(_linear(block, "mlp_up", m, quant.get("mlp_up"), capture))
    return tc.add(x1, _linear(block, "mlp_down", up, quant.get("mlp_down"), capture))


def forward_fp(block: ToyBlock, x):
    return forward_block(block, x, None)


def forward_quant(block: ToyBlock, x, quant: Mapping[str, Optional[LinearQuant]]):
    """Quantized block forward; every site present in ``quant`` is fake-quantized."""
    return forward_block(block, x, quant)


def forward_model(
    model: ToyModel,
    x,
    quant: Optional[Mapping[str, Optional[LinearQuant]]] = None,
    block_outputs: Optional[List[np.ndarray]] = None,
):
    """
    Folds forward_block over all blocks.

    Args:
        model: Toy model
        x: Input (batch, tokens, dim)
        quant: Optional layer-name keyed quantization state
        block_outputs: Optional list receiving each block's output

    Returns:
        Final output
    """
    out = x
    for i, block in enumerate(model.blocks):
        site_quant = None
        if quant:
            site_quant = {s: quant.get(layer_name(i, s)) for s in SITES}
        out = forward_block(block, out, site_quant)
        if block_outputs is not None:
            block_outputs.append(tc._arr(out))
    return out


def run_inference(model: ToyModel, data: np.ndarray, quant=None, batch_size: int = 64) -> np.ndarray:
    """Untaped batched forward over a whole dataset."""
    outputs = []
    for start in range(0, data.shape[0], batch_size):
        with tc.Tape():
            outputs.append(tc._arr(forward_model(model, data[start:start + batch_size], quant)))
    return np.concatenate(outputs)


# ----------------------------------------------------------------------------
# Calibration data
# ----------------------------------------------------------------------------


@dataclass
class CalibSet:
    data: np.ndarray
    seed: int
    structure_rank: int = 4

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def tokens(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def manifest(self) -> Dict[str, Any]:
        return {"n": self.n, "tokens": self.tokens, "dim": self.dim, "seed": self.seed, "structure_rank": self.structure_rank}


def gen_calib(seed: int, n: int, t: int, d: int, structure_rank: int = 4) -> CalibSet:
    """
    Generates synthetic calibration sequences.

    Each sequence is standard-normal noise plus a low-rank term C_i V shared
    through V across the set.
    """
    if n <= 0 or t <= 0 or d <= 0:
        raise ArgumentError(f"calibration sizes must be positive, got n={n}, t={t}, d={d}")
    rank = max(1, min(structure_rank, d))
    rng = np.random.default_rng(seed)
    basis = rng.standard_normal((rank, d)) / math.sqrt(rank)
    coeffs = rng.standard_normal((n, t, rank))
    noise = rng.standard_normal((n, t, d))
    data = (noise + coeffs @ basis).astype(np.float32)
    return CalibSet(data=data, seed=seed, structure_rank=rank)


# ----------------------------------------------------------------------------
# Artifact container
# ----------------------------------------------------------------------------


@dataclass
class ModelArtifact:
    """A manifest document plus named float32 tensors."""

    manifest: Dict[str, Any]
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.manifest.get("kind", "model")

    def __eq__(self, other):
        if not isinstance(other, ModelArtifact):
            return NotImplemented
        if _canonical(self.manifest) != _canonical(other.manifest):
            return False
        if sorted(self.tensors) != sorted(other.tensors):
            return False
        return all(
            self.tensors[k].shape == other.tensors[k].shape
            and np.asarray(self.tensors[k], dtype="<f4").tobytes() == np.asarray(other.tensors[k], dtype="<f4").tobytes()
            for k in self.tensors
        )


def _canonical(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True)


def _pad(offset: int) -> int:
    return (-offset) % ALIGNMENT


def model_artifact(model: ToyModel) -> ModelArtifact:
    return ModelArtifact(manifest={"kind": "model", "model": model.manifest()}, tensors=model.tensors())


def calib_artifact(calib: CalibSet) -> ModelArtifact:
    return ModelArtifact(manifest={"kind": "calib_set", "calib": calib.manifest()}, tensors={"data": calib.data})


def _encode_header(header: Mapping[str, Any]) -> bytes:
    return json.dumps(header, sort_keys=True, indent=2).encode("utf-8")


def _header_digest(header: Mapping[str, Any]) -> str:
    """SHA-256 of the encoded header without its own digest field."""
    body = {k: v for k, v in header.items() if k != "header_sha256"}
    return hashlib.sha256(_encode_header(body)).hexdigest()


def save(artifact: ModelArtifact, path: str) -> str:
    """
    Writes an artifact container.

    Args:
        artifact: Manifest and tensors
        path: Output file path

    Returns:
        The path written
    """
    blobs = []
    table = []
    offset = 0
    for name in sorted(artifact.tensors):
        blob = np.ascontiguousarray(artifact.tensors[name], dtype="<f4").tobytes()
        table.append(
            {
                "name": name,
                "shape": list(np.shape(artifact.tensors[name])),
                "offset": offset,
                "nbytes": len(blob),
                "sha256": hashlib.sha256(blob).hexdigest(),
            }
        )
        blobs.append(blob)
        offset += len(blob) + _pad(len(blob))

    header = {"format_version": FORMAT_VERSION, "manifest": artifact.manifest, "tensors": table}
    header["header_sha256"] = _header_digest(header)
    header_bytes = _encode_header(header)

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        f.write(b"\0" * _pad(f.tell()))
        for blob in blobs:
            f.write(blob)
            f.write(b"\0" * _pad(len(blob)))
    logger.info("Saved %s artifact with %d tensors to %s", artifact.kind, len(table), path)
    return path


def read_header(path: str) -> Tuple[Dict[str, Any], int, bytes]:
    """Returns (header, blob area start, raw file bytes)."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise ArtifactError(f"cannot read artifact {path}: {e}") from e
    if raw[: len(MAGIC)] != MAGIC:
        raise ArtifactError(f"{path} is not an artifact container")
    prefix = len(MAGIC) + 8
    if len(raw) < prefix:
        raise TruncatedBlobError(f"{path} ends inside the container header")
    (header_len,) = struct.unpack("<Q", raw[len(MAGIC):prefix])
    if len(raw) < prefix + header_len:
        raise TruncatedBlobError(f"{path} ends inside the container header")
    try:
        header = json.loads(raw[prefix:prefix + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArtifactError(f"{path} has a corrupt header: {e}") from e
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"{path} has format version {version!r}; this build reads version {FORMAT_VERSION}")
    if header.pop("header_sha256", None) != _header_digest(header):
        raise ChecksumError(f"header checksum mismatch in {path}")
    start = prefix + header_len
    return header, start + _pad(start), raw


def load(path: str) -> ModelArtifact:
    """
    Reads an artifact container, verifying every blob.

    Raises:
        FormatVersionError: unknown version
        TruncatedBlobError: a blob extends past the end of the file
        ChecksumError: a blob does not match its SHA-256
    """
    header, base, raw = read_header(path)
    tensors = {}
    for row in header["tensors"]:
        begin = base + int(row["offset"])
        end = begin + int(row["nbytes"])
        if end > len(raw):
            raise TruncatedBlobError(f"tensor {row['name']!r} extends past the end of {path}")
        blob = raw[begin:end]
        if hashlib.sha256(blob).hexdigest() != row["sha256"]:
            raise ChecksumError(f"checksum mismatch for tensor {row['name']!r} in {path}")
        tensors[row["name"]] = np.frombuffer(blob, dtype="<f4").astype(np.float32).reshape(row["shape"])
    return ModelArtifact(manifest=header["manifest"], tensors=tensors)


def load_model(path: str) -> ToyModel:
    artifact = load(path)
    if "model" not in artifact.manifest:
        raise ArtifactError(f"{path} holds no model (kind {artifact.kind!r})")
    return ToyModel.from_parts(artifact.manifest["model"], artifact.tensors)


def load_calib(path: str) -> CalibSet:
    artifact = load(path)
    if artifact.kind != "calib_set":
        raise ArtifactError(f"{path} is a {artifact.kind!r} artifact, not a calibration set")
    meta = artifact.manifest["calib"]
    return CalibSet(data=artifact.tensors["data"], seed=meta["seed"], structure_rank=meta.get("structure_rank", 4))
