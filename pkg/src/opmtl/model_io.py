"""Model contraction, cost accounting, equivalence checks and the archive format.

The archive is a flat little-endian container::

    "OPMT" | version:u32 | count:u32 | entries... | crc32:u32

    entry = name_len:u16 | name:utf-8 | dtype:u8 (0=f32, 1=f64) | ndim:u8
          | dims: ndim * u64 | data: raw little-endian scalars

The trailing CRC-32 covers every preceding byte.  Round trips are bitwise
exact.  Model topology rides along as a JSON descriptor encoded byte-per-value
in a reserved float64 tensor named ``__arch__``.
"""

from __future__ import annotations

import json
import struct
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ArchiveError, TopologyError
from .layers import (
    FACTORIZED_KINDS,
    Conv2d,
    FactorizedConv2d,
    FactorizedLinear,
    Layer,
    Linear,
    MtlModel,
    layer_from_config,
)
from .tensor import Tensor

MAGIC = b"OPMT"
VERSION = 1
ARCH_KEY = "__arch__"
_DTYPE_CODES = {"float32": 0, "float64": 1}
_DTYPE_NAMES = {0: "float32", 1: "float64"}


def save_archive(path: str, tensors: dict[str, Tensor]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, tensor in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ArchiveError(f"tensor name too long: {name[:40]}...")
        if tensor.rank > 0xFF:
            raise ArchiveError(f"tensor rank {tensor.rank} exceeds format limit")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[tensor.dtype], tensor.rank))
        chunks.append(struct.pack(f"<{tensor.rank}Q", *tensor.shape))
        data = np.ascontiguousarray(tensor.data)
        if data.dtype.byteorder == ">":  # pragma: no cover - big-endian hosts only
            data = data.byteswap()
        chunks.append(data.tobytes())
    body = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_archive(path: str) -> dict[str, Tensor]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise ArchiveError(f"{path}: not an OPMT archive")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ArchiveError(f"{path}: CRC-32 mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise ArchiveError(f"{path}: unsupported archive version {version}")
    offset = 12
    out: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, offset)
        offset += 2
        name = body[offset : offset + name_len].decode("utf-8")
        offset += name_len
        dtype_code, ndim = struct.unpack_from("<BB", body, offset)
        offset += 2
        dims = struct.unpack_from(f"<{ndim}Q", body, offset)
        offset += 8 * ndim
        dtype = _DTYPE_NAMES.get(dtype_code)
        if dtype is None:
            raise ArchiveError(f"{path}: unknown dtype code {dtype_code} for {name!r}")
        nbytes = int(np.prod(dims)) * (4 if dtype == "float32" else 8)
        raw = body[offset : offset + nbytes]
        if len(raw) != nbytes:
            raise ArchiveError(f"{path}: truncated data for {name!r}")
        offset += nbytes
        arr = np.frombuffer(raw, dtype="<" + ("f4" if dtype == "float32" else "f8")).reshape(dims)
        out[name] = Tensor(arr, dtype=dtype)
    if offset != len(body):
        raise ArchiveError(f"{path}: {len(body) - offset} trailing bytes")
    return out


# -- model <-> archive -----------------------------------------------------


def _encode_arch(cfg: dict) -> Tensor:
    raw = json.dumps(cfg, sort_keys=True).encode("utf-8")
    return Tensor(np.frombuffer(raw, dtype=np.uint8).astype(np.float64), dtype="float64")


def _decode_arch(tensor: Tensor) -> dict:
    raw = tensor.data.astype(np.uint8).tobytes()
    return json.loads(raw.decode("utf-8"))


def model_to_tensors(model: MtlModel) -> dict[str, Tensor]:
    out = {ARCH_KEY: _encode_arch(model.config())}
    for name, p in model.named_params():
        out[name] = p.tensor
    return out


def model_from_tensors(tensors: dict[str, Tensor]) -> MtlModel:
    if ARCH_KEY not in tensors:
        raise ArchiveError("archive carries no architecture descriptor")
    cfg = _decode_arch(tensors[ARCH_KEY])
    dtypes = {t.dtype for k, t in tensors.items() if k != ARCH_KEY}
    dtype = dtypes.pop() if len(dtypes) == 1 else "float32"
    model = MtlModel.from_config(cfg, dtype=dtype)
    for name, p in model.named_params():
        if name not in tensors:
            raise ArchiveError(f"archive missing tensor {name!r}")
        if tensors[name].shape != p.tensor.shape:
            raise ArchiveError(f"shape mismatch for {name!r}: "
                               f"{tensors[name].shape} vs {p.tensor.shape}")
        p.tensor = tensors[name]
    return model


def save_model(path: str, model: MtlModel) -> None:
    save_archive(path, model_to_tensors(model))


def load_model(path: str) -> MtlModel:
    return model_from_tensors(load_archive(path))


# -- contraction -----------------------------------------------------------


def _copy_plain_layer(layer: Layer) -> Layer:
    clone = layer_from_config(layer.config())
    for src, dst in zip(layer.params(), clone.params()):
        dst.tensor = src.tensor
    return clone


def contract_model(model: MtlModel) -> MtlModel:
    """Replace every factorized trunk layer by its exact plain equivalent."""
    trunk = []
    for layer in model.trunk:
        if isinstance(layer, (FactorizedLinear, FactorizedConv2d)):
            trunk.append(layer.to_plain())
        else:
            trunk.append(_copy_plain_layer(layer))
    heads = [[_copy_plain_layer(l) for l in head] for head in model.heads]
    return MtlModel(trunk, heads)


# -- cost accounting -------------------------------------------------------


@dataclass
class CostReport:
    param_count: int = 0
    flops: int = 0
    breakdown: list = field(default_factory=list)

    def add(self, name: str, params: int, flops: int) -> None:
        self.breakdown.append({"layer": name, "params": params, "flops": flops})
        self.param_count += params
        self.flops += flops


def count_params(model: MtlModel) -> CostReport:
    report = CostReport()
    for i, layer in enumerate(model.trunk):
        report.add(f"trunk.{i}", layer.param_count(), 0)
    for j, head in enumerate(model.heads):
        for i, layer in enumerate(head):
            report.add(f"head.{j}.{i}", layer.param_count(), 0)
    return report


def count_flops(model: MtlModel, input_shape: tuple[int, ...]) -> CostReport:
    report = CostReport()
    shape = tuple(input_shape)
    for i, layer in enumerate(model.trunk):
        fl, shape = layer.flops(shape)
        report.add(f"trunk.{i}", layer.param_count(), fl)
    feat_shape = shape
    for j, head in enumerate(model.heads):
        shape = feat_shape
        for i, layer in enumerate(head):
            fl, shape = layer.flops(shape)
            report.add(f"head.{j}.{i}", layer.param_count(), fl)
    return report


def measure_latency(model: MtlModel, input_shape: tuple[int, ...], runs: int = 100,
                    seed: int = 0) -> float:
    """Mean wall-clock seconds of one full forward; machine-dependent."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(input_shape).astype(np.float32)
    model.forward_all(x)  # warm up
    start = time.perf_counter()
    for _ in range(runs):
        model.forward_all(x)
    return (time.perf_counter() - start) / runs


# -- equivalence -----------------------------------------------------------


def _plain_equivalent_config(cfg: dict) -> dict:
    if cfg["kind"] == "fac_linear":
        return {"kind": "linear", "in_dim": cfg["in_dim"], "out_dim": cfg["out_dim"],
                "bias": cfg["bias"]}
    if cfg["kind"] == "fac_conv2d":
        return {"kind": "conv2d", "in_ch": cfg["in_ch"], "out_ch": cfg["out_ch"], "k": cfg["k"],
                "stride": cfg["stride"], "padding": cfg["padding"], "bias": cfg["bias"]}
    return cfg


def topology_signature(model: MtlModel) -> str:
    cfg = model.config()
    cfg["trunk"] = [_plain_equivalent_config(c) for c in cfg["trunk"]]
    return json.dumps(cfg, sort_keys=True)


@dataclass
class EquivalenceReport:
    passed: bool
    max_abs: float
    max_rel: float
    n_samples: int
    tol: float
    warning: str | None = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__)


def verify_equivalence(fac_model: MtlModel, compact_model: MtlModel, input_shape,
                       n_samples: int = 16, tol: float = 1e-5, seed: int = 0) -> EquivalenceReport:
    """Compare per-task outputs of both models on random inputs."""
    if topology_signature(fac_model) != topology_signature(compact_model):
        raise TopologyError("models do not share the same architecture topology")
    if n_samples == 0:
        return EquivalenceReport(True, 0.0, 0.0, 0, tol, warning="no samples checked")
    rng = np.random.default_rng(seed)
    max_abs = max_rel = 0.0
    for _ in range(n_samples):
        x = rng.standard_normal((1,) + tuple(input_shape)).astype(np.float32)
        ya = fac_model.forward_all(x)
        yb = compact_model.forward_all(x)
        for a, b in zip(ya, yb):
            diff = np.abs(a - b)
            max_abs = max(max_abs, float(diff.max()))
            denom = np.maximum(np.abs(a), 1e-6)
            max_rel = max(max_rel, float((diff / denom).max()))
    return EquivalenceReport(max_abs <= tol, max_abs, max_rel, n_samples, tol)
