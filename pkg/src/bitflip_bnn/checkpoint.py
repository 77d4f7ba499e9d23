"""Self-describing checkpoint files.

Layout::

    BFFCKPT 1\\n
    <header byte length>\\n
    <header: sorted-key JSON, UTF-8>
    <blobs: raw little-endian tensors, then packed bit views>

The header records the architecture, precisions, quantization scales,
binarizer state, optional growth state, the seed and a table of blob
offsets. Its ``sha256`` field covers the whole blob region, so any change
to a payload byte is caught on load. Bit views use the quantizer layout:
each weight's ``n_bits`` field LSB-first, packed little-endian.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .core import LayerSpec, ModelGraph, Network
from .quantizer import QuantizedWeight, pack_bits, unpack_bits

MAGIC = b"BFFCKPT 1\n"
VERSION = 1


class CheckpointError(ValueError):
    pass


def graph_to_dict(graph: ModelGraph) -> dict:
    return {
        "layers": [asdict(s) for s in graph.layers],
        "input_shape": list(graph.input_shape),
        "num_classes": graph.num_classes,
        "residual_blocks": [list(b) for b in graph.residual_blocks],
    }


def graph_from_dict(d: dict) -> ModelGraph:
    return ModelGraph([LayerSpec(**s) for s in d["layers"]], tuple(d["input_shape"]), int(d["num_classes"]),
                      [tuple(b) for b in d["residual_blocks"]])


def _le(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))


def encode(net: Network, seed: int = 0, growth: dict | None = None, extra: dict | None = None) -> bytes:
    """Serialize ``net`` to checkpoint bytes (deterministic)."""
    blobs, table, qtable = [], [], []
    offset = 0

    def add(data: bytes) -> tuple[int, int]:
        nonlocal offset
        blobs.append(data)
        start = offset
        offset += len(data)
        return start, len(data)

    for i, p in enumerate(net.params):
        for name in sorted(p):
            a = _le(p[name])
            start, n = add(a.tobytes())
            table.append({"layer": i, "name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                          "offset": start, "nbytes": n})
    for i in sorted(net.buffers):
        for name in sorted(net.buffers[i]):
            a = _le(net.buffers[i][name])
            start, n = add(a.tobytes())
            table.append({"layer": i, "name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                          "offset": start, "nbytes": n})
    for i in sorted(net.gates):
        a = _le(np.asarray(net.gates[i], dtype=np.float64))
        start, n = add(a.tobytes())
        table.append({"layer": i, "name": "gate", "dtype": a.dtype.str, "shape": list(a.shape),
                      "offset": start, "nbytes": n})
    for i in sorted(net.qweights):
        qw = net.qweights[i]
        start, n = add(pack_bits(qw))
        qtable.append({"layer": i, "n_bits": qw.n_bits, "scale": float(qw.scale), "degenerate": bool(qw.degenerate),
                       "shape": list(qw.shape), "offset": start, "nbytes": n})
    payload = b"".join(blobs)
    header = {
        "version": VERSION,
        "architecture": graph_to_dict(net.graph),
        "precisions": [[s.precision, s.n_bits] for s in net.layers],
        "scales": {str(q["layer"]): q["scale"] for q in qtable},
        "schedule": {"t": float(net.tk[0]), "k": float(net.tk[1])},
        "binary_weight_scale": bool(net.binary_weight_scale),
        "growth": growth,
        "seed": int(seed),
        "dtype": net.dtype.str,
        "tensors": table,
        "quantized": qtable,
        "extra": extra or {},
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + f"{len(head)}\n".encode() + head + payload


def decode(data: bytes) -> tuple[Network, dict]:
    """Rebuild the network from checkpoint bytes; returns ``(net, header)``."""
    if not data.startswith(b"BFFCKPT "):
        raise CheckpointError("not a checkpoint file (bad magic)")
    if not data.startswith(MAGIC):
        first = data.split(b"\n", 1)[0]
        raise CheckpointError(f"unsupported checkpoint version {first[8:]!r}")
    rest = data[len(MAGIC):]
    nl = rest.find(b"\n")
    try:
        hlen = int(rest[:nl])
        header = json.loads(rest[nl + 1 : nl + 1 + hlen])
    except (ValueError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    payload = rest[nl + 1 + hlen :]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError("payload hash mismatch (corrupted checkpoint)")
    graph = graph_from_dict(header["architecture"])
    net = Network(graph, params=[dict() for _ in graph.layers], dtype=np.dtype(header["dtype"]))
    for e in header["tensors"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        a = np.frombuffer(raw, np.dtype(e["dtype"])).reshape(e["shape"])
        a = a.astype(a.dtype.newbyteorder("="))
        i, name = e["layer"], e["name"]
        if name == "gate":
            net.gates[i] = a
        elif name.startswith("running_"):
            net.buffers[i][name] = a
        else:
            net.params[i][name] = a
    for q in header["quantized"]:
        raw = payload[q["offset"] : q["offset"] + q["nbytes"]]
        codes = unpack_bits(raw, q["n_bits"], tuple(q["shape"]))
        net.qweights[q["layer"]] = QuantizedWeight(codes, q["n_bits"], q["scale"], q["layer"], q["degenerate"],
                                                   tuple(q["shape"]))
    net.tk = (header["schedule"]["t"], header["schedule"]["k"])
    net.binary_weight_scale = header["binary_weight_scale"]
    net.eval()
    return net, header


def save_checkpoint(net: Network, path, seed: int = 0, growth: dict | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(encode(net, seed, growth, extra))
    return path


def load_checkpoint(path) -> tuple[Network, dict]:
    return decode(Path(path).read_bytes())
