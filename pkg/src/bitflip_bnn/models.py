"""Desk-scale architectures and precision presets."""
from __future__ import annotations

from .binarizer import BinarizePolicy, apply_policy
from .core import LayerSpec, ModelGraph, Network

# model-level precision presets
PRESETS = ("fp32", "quant", "binary_weight", "bnn")


def convnet(widths=(8, 16), input_shape=(1, 28, 28), num_classes=10, pools=2, act="relu",
            head_bn: bool = True) -> ModelGraph:
    """conv3x3-BN-act(-pool) stages followed by one linear classifier."""
    c, h, w = input_shape
    layers = []
    for j, width in enumerate(widths):
        layers.append(LayerSpec("conv2d", c, width, 3, padding=1))
        layers.append(LayerSpec("batchnorm", width, width))
        if act:
            layers.append(LayerSpec("activation", fn=act))
        if j < pools and h % 2 == 0 and w % 2 == 0:
            layers.append(LayerSpec("avgpool", kernel=2))
            h, w = h // 2, w // 2
        c = width
    layers.append(LayerSpec("linear", c * h * w, num_classes, bias=not head_bn))
    if head_bn:
        # absorbs the scale of a binary classifier
        layers.append(LayerSpec("batchnorm", num_classes, num_classes))
    return ModelGraph(layers, tuple(input_shape), num_classes)


def mlp(dims=(32,), input_dim=2, num_classes=2, act="relu", batchnorm=False) -> ModelGraph:
    layers, d = [], input_dim
    for width in dims:
        layers.append(LayerSpec("linear", d, width, bias=not batchnorm))
        if batchnorm:
            layers.append(LayerSpec("batchnorm", width, width))
        if act:
            layers.append(LayerSpec("activation", fn=act))
        d = width
    layers.append(LayerSpec("linear", d, num_classes, bias=True))
    return ModelGraph(layers, (input_dim,), num_classes)


def resnet_tiny(width=8, blocks=2, input_shape=(1, 28, 28), num_classes=10, act="relu") -> ModelGraph:
    """Stem conv plus ``blocks`` basic-blocks (two conv-BN pairs each)."""
    c, h, w = input_shape
    layers = [LayerSpec("conv2d", c, width, 3, padding=1), LayerSpec("batchnorm", width, width)]
    if act:
        layers.append(LayerSpec("activation", fn=act))
    layers.append(LayerSpec("avgpool", kernel=2))
    h, w = h // 2, w // 2
    residual = []
    for _ in range(blocks):
        start = len(layers)
        layers += [LayerSpec("conv2d", width, width, 3, padding=1), LayerSpec("batchnorm", width, width)]
        if act:
            layers.append(LayerSpec("activation", fn=act))
        layers += [LayerSpec("conv2d", width, width, 3, padding=1), LayerSpec("batchnorm", width, width)]
        residual.append((start, len(layers) - 1))
        if act:
            layers.append(LayerSpec("activation", fn=act))
    layers.append(LayerSpec("avgpool", kernel=h if h == w else 1))
    layers.append(LayerSpec("linear", width, num_classes, bias=True))
    return ModelGraph(layers, tuple(input_shape), num_classes, residual)


def with_precision(graph: ModelGraph, preset: str, n_bits: int = 8, first_last_weights: bool = True) -> ModelGraph:
    """Copy of ``graph`` under a model-level precision preset.

    ``bnn`` is the complete binary network: binary weights everywhere and
    binary activations on every weighted-layer input except the first and
    last. Its activation layers become identities, the sign at the next
    input being the nonlinearity.
    """
    if preset not in PRESETS:
        raise ValueError(f"unknown precision preset {preset!r}")
    g = graph.copy()
    if preset == "bnn":
        for s in g.layers:
            if s.kind == "activation":
                s.fn = "identity"
        return apply_policy(g, BinarizePolicy(binarize_all_weights=first_last_weights))
    for s in g.layers:
        if s.kind not in ("conv2d", "linear"):
            continue
        if preset == "quant":
            s.precision, s.n_bits = "quant", n_bits
        elif preset == "binary_weight":
            s.precision, s.n_bits = "binary", 1
    return g


def build(arch: str, preset: str, width: int = 8, n_bits: int = 8, input_shape=(1, 28, 28), num_classes=10,
          seed: int = 0, first_last_weights: bool = True) -> Network:
    if arch == "convnet":
        g = convnet((width, 2 * width), input_shape, num_classes)
    elif arch == "convnet3":
        g = convnet((width, 2 * width, 2 * width), input_shape, num_classes)
    elif arch == "resnet":
        g = resnet_tiny(width, 2, input_shape, num_classes)
    elif arch == "mlp":
        g = mlp((width * 4,), int(input_shape[0]), num_classes, batchnorm=True)
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    return Network(with_precision(g, preset, n_bits, first_last_weights), seed=seed)


def precision_label(graph: ModelGraph) -> str:
    """Short precision tag of a model: fp32, 8-bit, binary_weight or bnn."""
    specs = [graph.layers[i] for i in graph.weighted()]
    if any(s.binarize_input for s in graph.layers):
        return "bnn"
    if any(s.precision == "binary" for s in specs):
        return "binary_weight"
    quant = [s.n_bits for s in specs if s.precision == "quant"]
    if quant:
        return f"{min(quant)}-bit"
    return "fp32"


def precision_bits(label: str) -> int:
    """Bits per weight behind a precision tag (binary tags give 1)."""
    if label == "fp32":
        return 32
    if label.endswith("-bit"):
        return int(label[:-4])
    return 1


def precision_rank(label: str) -> tuple[int, int]:
    # wider first; among 1-bit models weight-only precedes the complete BNN
    return (-precision_bits(label), 1 if label == "bnn" else 0)
