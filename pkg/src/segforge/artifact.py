"""The model artifact: plan + weights + preprocessing metadata + optional LoRA state.

Container layout (a stored zip archive with fixed member timestamps):

* ``manifest.json`` -- format_version, member checksums (sha256), and the
  weight table: one entry per array with name, shape, byte offset and size
  into ``weights.raw`` in declaration order.
* ``arch.json`` -- the network plan plus format_version.
* ``preprocess.json`` -- target_spacing, patch_size, normalization, crop_margin.
* ``weights.raw`` -- float32 little-endian arrays, concatenated in manifest order.
* ``lora.json`` / ``lora.raw`` (optional) -- rank, alpha, exclude patterns and
  per-layer ``A``, ``B`` and frozen base weight blocks, laid out like the
  weight table.
* ``training.json`` -- config echo, label names, best epoch summary.

Weights in ``weights.raw`` are always the plain (LoRA-merged) network, so an
artifact loads as an ordinary model; the adapter blocks let the adapted form
be rebuilt exactly.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError, VersionError
from .net import Network, NetworkPlan, inherit_plan, instantiate

ARTIFACT_FORMAT_VERSION = 1
_STAMP = (1980, 1, 1, 0, 0, 0)


@dataclass
class ModelArtifact:
    arch: dict
    preprocess: dict
    weights: dict  # name -> ndarray, insertion order is the serialized layer order
    lora: Optional[dict] = None  # {"config": {...}, "layers": {name: {"A":..., "B":..., "frozen":...}}}
    training: dict = field(default_factory=dict)

    @property
    def plan(self) -> NetworkPlan:
        return inherit_plan(self.arch)

    @property
    def label_names(self) -> dict:
        return {int(k): v for k, v in self.training.get("label_names", {}).items()}

    def build_network(self, adapted: bool = False, dtype=np.float32) -> Network:
        """Instantiate the plan and load weights; ``adapted`` re-attaches stored LoRA adapters."""
        net = instantiate(self.plan, np.random.default_rng(0), dtype=dtype)
        net.load_state_dict({k: np.asarray(v, dtype=dtype) for k, v in self.weights.items()})
        if adapted and self.lora:
            from .autodiff import Tensor
            from .lora import LoraState

            cfg = self.lora["config"]
            for name, blocks in self.lora["layers"].items():
                layer = net[name]
                layer.weight.data = np.asarray(blocks["frozen"], dtype=dtype).copy()
                layer.weight.requires_grad = False
                layer.lora = LoraState(
                    Tensor(np.asarray(blocks["A"], dtype=dtype), requires_grad=True, name=f"{name}.lora_A"),
                    Tensor(np.asarray(blocks["B"], dtype=dtype), requires_grad=True, name=f"{name}.lora_B"),
                    layer.weight, layer.spec, int(cfg["rank"]), float(cfg["alpha"]), name)
        return net

    @classmethod
    def from_network(cls, network: Network, preprocess: dict, training: Optional[dict] = None,
                     lora_config: Optional[dict] = None) -> "ModelArtifact":
        """Snapshot a (possibly adapted) network; adapters are merged into ``weights``."""
        from .lora import compose_delta

        weights = {}
        lora_layers = {}
        for name, arr in network.state_dict().items():
            weights[name] = np.array(arr, dtype=np.float32, copy=True)
        for layer in network.conv_layers():
            if layer.lora is not None:
                delta = compose_delta(layer.lora).data
                weights[f"{layer.name}.weight"] = (layer.lora.frozen_weight.data + delta).astype(np.float32)
                lora_layers[layer.name] = {
                    "A": layer.lora.A.data.astype(np.float32).copy(),
                    "B": layer.lora.B.data.astype(np.float32).copy(),
                    "frozen": layer.lora.frozen_weight.data.astype(np.float32).copy(),
                }
        lora = {"config": dict(lora_config or {}), "layers": lora_layers} if lora_layers else None
        return cls(network.plan.to_dict(), dict(preprocess), weights, lora, dict(training or {}))


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, indent=2, sort_keys=True).encode()


def _pack(arrays: dict) -> tuple[bytes, list]:
    table, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes(order="C")
        table.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return b"".join(chunks), table


def _unpack(raw: bytes, table: list) -> dict:
    out = {}
    for entry in table:
        start, n = int(entry["offset"]), int(entry["nbytes"])
        shape = tuple(int(s) for s in entry["shape"])
        if start + n > len(raw) or n != 4 * int(np.prod(shape)):
            raise FormatError(f"weight block {entry['name']!r} out of range or mis-sized")
        out[entry["name"]] = np.frombuffer(raw[start:start + n], dtype="<f4").reshape(shape).astype(np.float32)
    return out


def artifact_bytes(artifact: ModelArtifact) -> bytes:
    members: dict[str, bytes] = {}
    members["arch.json"] = _json_bytes({**artifact.arch, "format_version": ARTIFACT_FORMAT_VERSION})
    members["preprocess.json"] = _json_bytes(artifact.preprocess)
    weights_raw, weight_table = _pack(artifact.weights)
    members["weights.raw"] = weights_raw
    lora_table = None
    if artifact.lora:
        flat = {}
        for name, blocks in artifact.lora["layers"].items():
            for part in ("A", "B", "frozen"):
                flat[f"{name}.{part}"] = blocks[part]
        lora_raw, lora_table = _pack(flat)
        members["lora.json"] = _json_bytes({"config": artifact.lora["config"],
                                            "layers": list(artifact.lora["layers"])})
        members["lora.raw"] = lora_raw
    members["training.json"] = _json_bytes(artifact.training)
    manifest = {
        "format_version": ARTIFACT_FORMAT_VERSION,
        "weights": weight_table,
        "lora_blocks": lora_table,
        "checksums": {k: hashlib.sha256(v).hexdigest() for k, v in members.items()},
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("manifest.json", date_time=_STAMP), _json_bytes(manifest))
        for name, payload in members.items():
            zf.writestr(zipfile.ZipInfo(name, date_time=_STAMP), payload)
    return buf.getvalue()


def save_artifact(artifact: ModelArtifact, path) -> None:
    Path(path).write_bytes(artifact_bytes(artifact))


def load_artifact(path) -> ModelArtifact:
    """Read and verify a model artifact.

    Raises:
        FormatError: unreadable archive, checksum failure, missing plan fields.
        VersionError: unknown format_version.
    """
    try:
        with zipfile.ZipFile(path) as zf:
            names = set(zf.namelist())
            members = {n: zf.read(n) for n in names}
    except (zipfile.BadZipFile, OSError) as exc:
        raise FormatError(f"{path}: not a valid model artifact ({exc})") from exc
    try:
        manifest = json.loads(members["manifest.json"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: missing or unreadable manifest") from exc
    if manifest.get("format_version") != ARTIFACT_FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported artifact format_version {manifest.get('format_version')!r}")
    sums = manifest.get("checksums", {})
    for member in ("arch.json", "preprocess.json", "weights.raw", "training.json"):
        if member not in members:
            raise FormatError(f"{path}: missing member {member}")
    for member, digest in sums.items():
        if member not in members or hashlib.sha256(members[member]).hexdigest() != digest:
            raise FormatError(f"{path}: checksum mismatch for {member}")
    try:
        arch = json.loads(members["arch.json"])
        preprocess = json.loads(members["preprocess.json"])
        training = json.loads(members["training.json"])
    except ValueError as exc:
        raise FormatError(f"{path}: unreadable JSON member ({exc})") from exc
    if arch.pop("format_version", None) != ARTIFACT_FORMAT_VERSION:
        raise VersionError(f"{path}: arch.json has an unsupported format_version")
    inherit_plan(arch)  # validates required plan fields
    weights = _unpack(members["weights.raw"], manifest["weights"])
    lora = None
    if "lora.json" in members:
        meta = json.loads(members["lora.json"])
        flat = _unpack(members["lora.raw"], manifest["lora_blocks"])
        lora = {"config": meta["config"],
                "layers": {n: {p: flat[f"{n}.{p}"] for p in ("A", "B", "frozen")} for n in meta["layers"]}}
    return ModelArtifact(arch, preprocess, weights, lora, training)
