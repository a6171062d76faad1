"""Model persistence: a JSON manifest next to a raw little-endian float32
blob.

``<name>.manifest`` holds the format version, the full architecture
description, a tensor directory (name, shape, byte offset, byte length) and
free-form training metadata; ``<name>.weights`` is the concatenation of all
tensors as little-endian float32.  Keeping the manifest as text makes models
inspectable and diffable while the raw blob avoids any float round-tripping
through text.  A save/load round trip is bit-exact.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import FormatError
from .graph import Graph, graph_from_description
from .tensor import DTYPE

FORMAT_VERSION = 1
MANIFEST_SUFFIX = ".manifest"
WEIGHTS_SUFFIX = ".weights"


def _paths(path) -> tuple:
    base = str(path)
    for suffix in (MANIFEST_SUFFIX, WEIGHTS_SUFFIX):
        if base.endswith(suffix):
            base = base[: -len(suffix)]
    return base + MANIFEST_SUFFIX, base + WEIGHTS_SUFFIX


def _pack(entries) -> tuple:
    directory = []
    chunks = []
    offset = 0
    seen = set()
    for name, arr in entries:
        if name in seen:
            raise FormatError(f"duplicate tensor name {name!r}")
        seen.add(name)
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    return directory, b"".join(chunks)


def save(graph: Graph, path, metadata: dict | None = None) -> tuple:
    """Write ``<path>.manifest`` and ``<path>.weights``; returns both paths."""
    manifest_path, weights_path = _paths(path)
    directory, blob = _pack(graph.state_items())
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "model",
        "architecture": graph.describe(),
        "tensors": directory,
        "metadata": metadata if metadata is not None else graph.metadata,
    }
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(weights_path, "wb") as fh:
        fh.write(blob)
    return manifest_path, weights_path


def _read_manifest(manifest_path, expected_kind: str) -> dict:
    if not os.path.exists(manifest_path):
        raise FormatError(f"manifest not found: {manifest_path}")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {manifest_path} is not valid JSON: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {version!r} in {manifest_path}")
    kind = manifest.get("kind")
    if kind != expected_kind:
        raise FormatError(f"{manifest_path} holds a {kind!r} payload, expected {expected_kind!r}")
    return manifest


def _extract(blob: bytes, entry: dict, manifest_path) -> np.ndarray:
    name = entry["name"]
    shape = tuple(int(d) for d in entry["shape"])
    offset = int(entry["offset"])
    nbytes = int(entry["nbytes"])
    count = int(np.prod(shape)) if shape else 1
    if nbytes != 4 * count:
        raise FormatError(f"tensor {name!r}: byte length {nbytes} != 4 * {count}")
    if offset < 0 or offset + nbytes > len(blob):
        raise FormatError(
            f"tensor {name!r}: bytes [{offset}, {offset + nbytes}) outside blob of "
            f"{len(blob)} bytes (truncated file?)"
        )
    return np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)


def load(path) -> Graph:
    """Rebuild a graph from its manifest/blob pair; validates shapes, offsets
    and the format version, and fails rather than return a partial graph."""
    manifest_path, weights_path = _paths(path)
    manifest = _read_manifest(manifest_path, "model")
    graph = graph_from_description(manifest["architecture"])
    slots = dict(graph.state_items())
    with open(weights_path, "rb") as fh:
        blob = fh.read()
    filled = set()
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name not in slots:
            raise FormatError(f"manifest names unknown tensor {name!r}")
        if name in filled:
            raise FormatError(f"manifest repeats tensor {name!r}")
        arr = _extract(blob, entry, manifest_path)
        slot = slots[name]
        if arr.shape != slot.shape:
            raise FormatError(
                f"tensor {name!r}: stored shape {arr.shape} != expected {slot.shape}"
            )
        slot[...] = arr.astype(DTYPE, copy=False)
        filled.add(name)
    missing = set(slots) - filled
    if missing:
        raise FormatError(f"manifest missing tensors: {sorted(missing)}")
    graph.validate_shapes()
    graph.metadata = manifest.get("metadata", {})
    return graph


def save_tensor(arr: np.ndarray, path, name: str = "input") -> tuple:
    """Single-tensor manifest/blob pair, reusing the model format."""
    manifest_path, weights_path = _paths(path)
    directory, blob = _pack([(name, np.asarray(arr, dtype=DTYPE))])
    manifest = {"format_version": FORMAT_VERSION, "kind": "tensor", "tensors": directory}
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(weights_path, "wb") as fh:
        fh.write(blob)
    return manifest_path, weights_path


def load_tensor(path) -> np.ndarray:
    manifest_path, weights_path = _paths(path)
    manifest = _read_manifest(manifest_path, "tensor")
    entries = manifest.get("tensors", [])
    if len(entries) != 1:
        raise FormatError(f"{manifest_path}: expected exactly one tensor")
    with open(weights_path, "rb") as fh:
        blob = fh.read()
    return _extract(blob, entries[0], manifest_path).astype(DTYPE)
