"""Typed layer graphs for small convolutional classifiers.

A model is a topologically ordered list of layers. Each layer consumes the
output of the layer before it, except add_junction, which consumes exactly
the two earlier layers it names. Shapes are per sample, channel first; the
batch extent is dynamic.

Serialization splits a model into a human-readable JSON manifest (structure,
scalar fields, tensor table with offsets and checksums) and one raw blob of
little-endian float32 values in manifest order.
"""

from __future__ import annotations

import copy
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .batchnorm import BNParams, fold_bn
from .quantization import QuantConfig, QuantPoint
from .tensor_ops import ConvParams, DepthwiseConvParams, conv_output_extent

CONV_LIKE = ("conv", "depthwise_conv", "affine")
KINDS = CONV_LIKE + ("bn", "relu", "relu6", "global_avg_pool", "add_junction", "quant_point")


class GraphError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass
class AffineParams:
    """Fully connected weights (in_dim, out_dim) and optional bias."""

    weights: np.ndarray
    bias: np.ndarray | None = None


@dataclass
class LayerSpec:
    name: str
    kind: str
    params: object = None
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    weight_quant: QuantPoint | None = None


@dataclass
class ModelGraph:
    layers: list = field(default_factory=list)
    input_shape: tuple = ()

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.layers:
            raise GraphError("graph has no layers")
        if len(self.input_shape) != 3:
            raise GraphError("input_shape must be (channels, height, width)")
        seen = set()
        for i, layer in enumerate(self.layers):
            if layer.kind not in KINDS:
                raise GraphError(f"unknown layer kind '{layer.kind}'")
            if layer.name in seen:
                raise GraphError(f"duplicate layer name '{layer.name}'")
            seen.add(layer.name)
            if layer.kind == "bn":
                if i == 0 or self.layers[i - 1].kind not in CONV_LIKE:
                    raise GraphError(f"bn layer '{layer.name}' must directly follow a conv, depthwise conv, or affine")
            if layer.kind == "add_junction":
                a, b = layer.params
                earlier = {l.name for l in self.layers[:i]}
                for ref in (a, b):
                    if ref not in earlier:
                        raise GraphError(f"add_junction '{layer.name}' references '{ref}' which is not an earlier layer")
        infer_shapes(self)

    def layer(self, name):
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def index(self, name):
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise KeyError(name)


def copy_layer(layer):
    return copy.deepcopy(layer)


def copy_graph(graph):
    return copy.deepcopy(graph)


def infer_shapes(graph):
    """Per-sample output shape of every layer, in order. Raises GraphError on
    any inconsistency."""
    shapes = {}
    prev_shape = tuple(graph.input_shape)
    for layer in graph.layers:
        k = layer.kind
        if k == "conv":
            if len(prev_shape) != 3:
                raise GraphError(f"conv '{layer.name}' needs a (C, H, W) input, got {prev_shape}")
            c, h, w = prev_shape
            o, ci, kh, kw = layer.params.weights.shape
            if ci != c:
                raise GraphError(f"conv '{layer.name}' expects {ci} input channels, gets {c}")
            ho = _extent(layer, h, kh, layer.stride[0], layer.padding[0])
            wo = _extent(layer, w, kw, layer.stride[1], layer.padding[1])
            out = (o, ho, wo)
        elif k == "depthwise_conv":
            if len(prev_shape) != 3:
                raise GraphError(f"depthwise '{layer.name}' needs a (C, H, W) input, got {prev_shape}")
            c, h, w = prev_shape
            cw, _, kh, kw = layer.params.weights.shape
            if cw != c:
                raise GraphError(f"depthwise '{layer.name}' has {cw} channels, input has {c}")
            ho = _extent(layer, h, kh, layer.stride[0], layer.padding[0])
            wo = _extent(layer, w, kw, layer.stride[1], layer.padding[1])
            out = (c, ho, wo)
        elif k == "affine":
            if len(prev_shape) != 1:
                raise GraphError(f"affine '{layer.name}' needs a flat input, got {prev_shape}")
            d, kdim = layer.params.weights.shape
            if d != prev_shape[0]:
                raise GraphError(f"affine '{layer.name}' expects {d} inputs, gets {prev_shape[0]}")
            out = (kdim,)
        elif k == "bn":
            ch = layer.params.gamma.shape[0]
            if prev_shape[0] != ch:
                raise GraphError(f"bn '{layer.name}' has {ch} channels, input has {prev_shape[0]}")
            out = prev_shape
        elif k in ("relu", "relu6", "quant_point"):
            out = prev_shape
        elif k == "global_avg_pool":
            if len(prev_shape) != 3:
                raise GraphError(f"global_avg_pool '{layer.name}' needs a (C, H, W) input")
            out = (prev_shape[0],)
        elif k == "add_junction":
            a, b = layer.params
            if shapes[a] != shapes[b]:
                raise GraphError(f"add_junction '{layer.name}' joins unequal shapes {shapes[a]} and {shapes[b]}")
            out = shapes[a]
        else:  # pragma: no cover
            raise GraphError(f"unknown kind {k}")
        shapes[layer.name] = out
        prev_shape = out
    return shapes


def _extent(layer, size, kernel, stride, pad):
    try:
        return conv_output_extent(size, kernel, stride, pad)
    except ValueError as e:
        raise GraphError(f"layer '{layer.name}': {e}") from e


def count_macs(graph):
    """Multiply-accumulate count per layer (one MAC = one multiply plus add).

    Convolutions count out_ch * in_ch * kh * kw per output position,
    depthwise convs ch * kh * kw per position, affines in_dim * out_dim.
    Everything else is 0.
    """
    shapes = infer_shapes(graph)
    macs = {}
    prev_shape = tuple(graph.input_shape)
    for layer in graph.layers:
        if layer.kind == "conv":
            o, ci, kh, kw = layer.params.weights.shape
            _, ho, wo = shapes[layer.name]
            macs[layer.name] = o * ci * kh * kw * ho * wo
        elif layer.kind == "depthwise_conv":
            c, _, kh, kw = layer.params.weights.shape
            _, ho, wo = shapes[layer.name]
            macs[layer.name] = c * kh * kw * ho * wo
        elif layer.kind == "affine":
            d, kdim = layer.params.weights.shape
            macs[layer.name] = d * kdim
        else:
            macs[layer.name] = 0
        prev_shape = shapes[layer.name]
    return macs


def param_count(graph):
    """Number of learnable scalars: conv/depthwise/affine weights and biases,
    BN gamma and beta. Running statistics are buffers, not parameters."""
    total = 0
    for layer in graph.layers:
        if layer.kind in CONV_LIKE:
            total += layer.params.weights.size
            if layer.params.bias is not None:
                total += layer.params.bias.size
        elif layer.kind == "bn":
            total += layer.params.gamma.size + layer.params.beta.size
    return total


@dataclass
class RangeRow:
    layer: str
    min: float
    max: float
    range: float


def dynamic_range_report(graph):
    """Weight min/max/spread per conv, depthwise conv, and affine layer.

    Meant for folded graphs, where BN scaling has been pushed into the conv
    weights, but works on any graph."""
    rows = []
    for layer in graph.layers:
        if layer.kind in CONV_LIKE:
            w = layer.params.weights
            lo = float(w.min())
            hi = float(w.max())
            rows.append(RangeRow(layer=layer.name, min=lo, max=hi, range=hi - lo))
    return rows


def range_report_to_csv(rows, path):
    lines = ["layer,min,max,range"]
    for r in rows:
        lines.append(f"{r.layer},{r.min!r},{r.max!r},{r.range!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def macs_to_csv(macs, path):
    lines = ["layer,macs"]
    for name, count in macs.items():
        lines.append(f"{name},{count}")
    Path(path).write_text("\n".join(lines) + "\n")


def fold_bn_graph(graph):
    """Fold every conv/depthwise + BN pair and drop the BN layers.

    The folded conv keeps the conv's name and always carries a bias. Junction
    references to a removed BN layer are rewritten to the folded conv. BN fed
    by an affine is not foldable here and raises."""
    g = copy_graph(graph)
    new_layers = []
    renames = {}
    skip = set()
    for i, layer in enumerate(g.layers):
        if layer.name in skip:
            continue
        if i + 1 < len(g.layers) and g.layers[i + 1].kind == "bn":
            bn_layer = g.layers[i + 1]
            if layer.kind in ("conv", "depthwise_conv"):
                layer.params = fold_bn(layer.params, bn_layer.params)
                skip.add(bn_layer.name)
                renames[bn_layer.name] = layer.name
            elif layer.kind == "affine":
                raise GraphError(f"bn '{bn_layer.name}' follows an affine and cannot be folded")
        if layer.kind == "add_junction":
            a, b = layer.params
            layer.params = (renames.get(a, a), renames.get(b, b))
        new_layers.append(layer)
    return ModelGraph(layers=new_layers, input_shape=g.input_shape)


# --- serialization ---------------------------------------------------------

FORMAT_NAME = "pfqkit-model"
FORMAT_VERSION = 1

_TENSOR_FIELDS = {
    "conv": ("weights", "bias"),
    "depthwise_conv": ("weights", "bias"),
    "affine": ("weights", "bias"),
    "bn": ("gamma", "beta", "running_mean", "running_var"),
}


def _quant_dict(point):
    return {
        "target": point.target,
        "enabled": point.enabled,
        "bits": point.cfg.bits,
        "m": float(point.cfg.m),
        "M_up": float(point.cfg.M_up),
        "range_policy": point.cfg.range_policy,
        "ema_momentum": float(point.cfg.ema_momentum),
        "initialized": point.cfg.initialized,
    }


def _quant_from_dict(d):
    return QuantPoint(
        target=d["target"],
        enabled=d["enabled"],
        cfg=QuantConfig(
            bits=d["bits"],
            m=d["m"],
            M_up=d["M_up"],
            range_policy=d["range_policy"],
            ema_momentum=d["ema_momentum"],
            initialized=d["initialized"],
        ),
    )


def save_model(graph, manifest_path):
    """Write manifest JSON at manifest_path and the float32 blob next to it.

    Returns (manifest_path, blob_path)."""
    manifest_path = Path(manifest_path)
    blob_path = manifest_path.with_suffix(".bin")

    tensors = []
    chunks = []
    offset = 0

    def push(tensor_id, arr):
        nonlocal offset
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({
            "id": tensor_id,
            "shape": list(arr.shape),
            "offset": offset,
            "byte_length": len(data),
            "crc32": zlib.crc32(data),
        })
        chunks.append(data)
        offset += len(data)

    layers_doc = []
    for layer in graph.layers:
        doc = {"name": layer.name, "kind": layer.kind}
        if layer.kind in ("conv", "depthwise_conv"):
            doc["stride"] = list(layer.stride)
            doc["padding"] = list(layer.padding)
        if layer.kind in CONV_LIKE:
            doc["has_bias"] = layer.params.bias is not None
            doc["weight_quant"] = _quant_dict(layer.weight_quant) if layer.weight_quant else None
        if layer.kind == "bn":
            doc["epsilon"] = float(layer.params.epsilon)
            doc["rho"] = float(layer.params.rho)
        if layer.kind == "add_junction":
            doc["inputs"] = list(layer.params)
        if layer.kind == "quant_point":
            doc["quant"] = _quant_dict(layer.params)
        for fieldname in _TENSOR_FIELDS.get(layer.kind, ()):
            arr = getattr(layer.params, fieldname)
            if arr is not None:
                push(f"{layer.name}.{fieldname}", arr)
        layers_doc.append(doc)

    blob = b"".join(chunks)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "input_shape": list(graph.input_shape),
        "blob": {"file": blob_path.name, "byte_length": len(blob), "crc32": zlib.crc32(blob)},
        "layers": layers_doc,
        "tensors": tensors,
    }
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    blob_path.write_bytes(blob)
    return manifest_path, blob_path


def load_model(manifest_path):
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"malformed manifest: {e}") from e

    for key in ("format", "version", "input_shape", "blob", "layers", "tensors"):
        if key not in manifest:
            raise ModelFormatError(f"manifest missing key '{key}'")
    if manifest["format"] != FORMAT_NAME:
        raise ModelFormatError(f"not a {FORMAT_NAME} manifest: {manifest['format']!r}")
    if manifest["version"] != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {manifest['version']}")

    blob_path = manifest_path.parent / manifest["blob"]["file"]
    blob = blob_path.read_bytes()
    if len(blob) != manifest["blob"]["byte_length"]:
        raise ModelFormatError(
            f"blob length {len(blob)} does not match manifest {manifest['blob']['byte_length']}"
        )
    if zlib.crc32(blob) != manifest["blob"]["crc32"]:
        raise ModelFormatError("blob checksum mismatch")

    arrays = {}
    for t in manifest["tensors"]:
        lo, hi = t["offset"], t["offset"] + t["byte_length"]
        if hi > len(blob):
            raise ModelFormatError(f"tensor '{t['id']}' extends past end of blob")
        data = blob[lo:hi]
        if zlib.crc32(data) != t["crc32"]:
            raise ModelFormatError(f"tensor '{t['id']}' checksum mismatch")
        arrays[t["id"]] = np.frombuffer(data, dtype="<f4").reshape(t["shape"]).copy()

    def tensor(layer_name, fieldname, required=True):
        key = f"{layer_name}.{fieldname}"
        if key not in arrays:
            if required:
                raise ModelFormatError(f"manifest lists no tensor '{key}'")
            return None
        return arrays[key]

    layers = []
    for doc in manifest["layers"]:
        name, kind = doc["name"], doc["kind"]
        layer = LayerSpec(name=name, kind=kind)
        if kind in ("conv", "depthwise_conv"):
            layer.stride = tuple(doc["stride"])
            layer.padding = tuple(doc["padding"])
            cls = ConvParams if kind == "conv" else DepthwiseConvParams
            layer.params = cls(
                weights=tensor(name, "weights"),
                bias=tensor(name, "bias", required=doc["has_bias"]) if doc["has_bias"] else None,
            )
        elif kind == "affine":
            layer.params = AffineParams(
                weights=tensor(name, "weights"),
                bias=tensor(name, "bias", required=doc["has_bias"]) if doc["has_bias"] else None,
            )
        elif kind == "bn":
            layer.params = BNParams(
                gamma=tensor(name, "gamma"),
                beta=tensor(name, "beta"),
                running_mean=tensor(name, "running_mean"),
                running_var=tensor(name, "running_var"),
                epsilon=doc["epsilon"],
                rho=doc["rho"],
            )
        elif kind == "add_junction":
            layer.params = tuple(doc["inputs"])
        elif kind == "quant_point":
            layer.params = _quant_from_dict(doc["quant"])
        if kind in CONV_LIKE and doc.get("weight_quant"):
            layer.weight_quant = _quant_from_dict(doc["weight_quant"])
        layers.append(layer)

    try:
        return ModelGraph(layers=layers, input_shape=tuple(manifest["input_shape"]))
    except GraphError as e:
        raise ModelFormatError(f"manifest describes an invalid graph: {e}") from e
