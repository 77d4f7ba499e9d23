"""Dense numpy compute core.

A network is an ordered list of :class:`LayerSpec` drawn from a fixed
vocabulary (conv2d, linear, batchnorm, avgpool, activation) plus optional
residual basic-blocks. Gradients are written out by hand per layer kind; there
is no general autodiff graph.

Arrays are plain ``numpy.ndarray`` in NCHW layout. Tests run in float64;
training may use float32.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import binarizer as bz
from .quantizer import QuantizedWeight, dequantize, qat_backward, qat_forward

KINDS = ("conv2d", "linear", "batchnorm", "avgpool", "activation")
WEIGHTED = ("conv2d", "linear")
PRECISIONS = ("fp32", "quant", "binary")
ACTIVATIONS = ("relu", "hardtanh", "identity")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
BINARY_INIT_STD = 1.0


class ShapeError(ValueError):
    pass


@dataclass
class LayerSpec:
    kind: str
    c_in: int = 1
    c_out: int = 1
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    bias: bool = False
    precision: str = "fp32"
    n_bits: int = 32
    binarize_input: bool = False
    fn: str = "relu"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.c_in < 1 or self.c_out < 1:
            raise ValueError("channel counts must be >= 1")
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError("bad kernel/stride/padding")
        if self.precision not in PRECISIONS:
            raise ValueError(f"unknown precision {self.precision!r}")
        if self.precision == "binary":
            self.n_bits = 1
        elif self.precision == "fp32":
            self.n_bits = 32
        elif self.n_bits not in (2, 4, 8):
            raise ValueError("quantized layers need n_bits in {2, 4, 8}")
        if self.kind == "activation" and self.fn not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.fn!r}")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "conv2d":
            return (self.c_out, self.c_in, self.kernel, self.kernel)
        if self.kind == "linear":
            return (self.c_out, self.c_in)
        return ()

    @property
    def bits_per_weight(self) -> int:
        return self.n_bits


@dataclass
class ModelGraph:
    layers: list[LayerSpec]
    input_shape: tuple[int, ...]
    num_classes: int
    residual_blocks: list[tuple[int, int]] = field(default_factory=list)

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def weighted(self) -> list[int]:
        return [i for i, s in enumerate(self.layers) if s.kind in WEIGHTED]

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-layer output shapes (without batch axis). Raises on mismatch."""
        shape = tuple(self.input_shape)
        ins, outs = [], []
        for i, s in enumerate(self.layers):
            ins.append(shape)
            shape = _out_shape(i, s, shape)
            outs.append(shape)
        n = len(self.layers)
        for s_, e in self.residual_blocks:
            if not 0 <= s_ <= e < n:
                raise ShapeError(f"residual block ({s_}, {e}) references invalid layers")
            a, b = ins[s_], outs[e]
            if len(a) != 3 or len(b) != 3 or a[1:] != b[1:]:
                raise ShapeError(f"residual block ({s_}, {e}): spatial mismatch {a} vs {b}")
        if outs and outs[-1] != (self.num_classes,):
            raise ShapeError(f"final output {outs[-1]} does not match {self.num_classes} classes")
        return outs


def _out_shape(i: int, s: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    if s.kind == "conv2d":
        if len(shape) != 3 or shape[0] != s.c_in:
            raise ShapeError(f"layer {i}: conv2d expects ({s.c_in}, H, W), got {shape}")
        _, h, w = shape
        ho = (h + 2 * s.padding - s.kernel) // s.stride + 1
        wo = (w + 2 * s.padding - s.kernel) // s.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"layer {i}: kernel larger than input")
        return (s.c_out, ho, wo)
    if s.kind == "linear":
        if int(np.prod(shape)) != s.c_in:
            raise ShapeError(f"layer {i}: linear expects {s.c_in} features, got {shape}")
        return (s.c_out,)
    if s.kind == "batchnorm":
        if shape[0] != s.c_in or s.c_in != s.c_out:
            raise ShapeError(f"layer {i}: batchnorm over {s.c_in} channels, got {shape}")
        return shape
    if s.kind == "avgpool":
        if len(shape) != 3 or shape[1] % s.kernel or shape[2] % s.kernel:
            raise ShapeError(f"layer {i}: avgpool {s.kernel} does not tile {shape}")
        return (shape[0], shape[1] // s.kernel, shape[2] // s.kernel)
    return shape


# ---------------------------------------------------------------- layer ops


def im2col(x: np.ndarray, k: int, stride: int, pad: int):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def col2im(dcols, x_shape, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = x_shape
    d = dcols.reshape(n, ho, wo, c, k, k)
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return dx[:, :, pad : pad + h, pad : pad + w]


def conv2d(x, w, b=None, stride=1, pad=0):
    """Plain 2-D cross-correlation, NCHW input, (c_out, c_in, k, k) weights."""
    cols, ho, wo = im2col(x, w.shape[2], stride, pad)
    out = cols @ w.reshape(w.shape[0], -1).T
    if b is not None:
        out = out + b
    return out.reshape(x.shape[0], ho, wo, w.shape[0]).transpose(0, 3, 1, 2)


def shortcut(x: np.ndarray, c_out: int) -> np.ndarray:
    """Identity shortcut, zero-padding or truncating the channel axis."""
    c = x.shape[1]
    if c == c_out:
        return x
    if c > c_out:
        return x[:, :c_out]
    pad = np.zeros((x.shape[0], c_out - c) + x.shape[2:], dtype=x.dtype)
    return np.concatenate([x, pad], axis=1)


def shortcut_backward(g: np.ndarray, c_in: int) -> np.ndarray:
    c = g.shape[1]
    if c == c_in:
        return g
    if c > c_in:
        return g[:, :c_in]
    pad = np.zeros((g.shape[0], c_in - c) + g.shape[2:], dtype=g.dtype)
    return np.concatenate([g, pad], axis=1)


# ------------------------------------------------------------------ losses


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_labels(labels, c):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label index out of range for {c} classes")
    return labels.astype(np.int64)


def cross_entropy(logits, labels) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape[1])
    lp = log_softmax(logits)
    return float(-lp[np.arange(len(labels)), labels].mean())


def cross_entropy_grad(logits, labels) -> np.ndarray:
    labels = _check_labels(labels, logits.shape[1])
    p = np.exp(log_softmax(logits))
    p[np.arange(len(labels)), labels] -= 1.0
    return p / len(labels)


def mse(out, target) -> float:
    out = np.asarray(out, dtype=np.float64)
    target = np.broadcast_to(np.asarray(target, dtype=np.float64), out.shape)
    return float(((out - target) ** 2).sum() / out.shape[0])


def mse_grad(out, target) -> np.ndarray:
    target = np.broadcast_to(np.asarray(target, dtype=out.dtype), out.shape)
    return 2.0 * (out - target) / out.shape[0]


LOSSES = {"cross_entropy": (cross_entropy, cross_entropy_grad), "mse": (mse, mse_grad)}


# ----------------------------------------------------------------- network


def init_params(graph: ModelGraph, rng: np.random.Generator, dtype=np.float64) -> list[dict]:
    params = []
    for s in graph.layers:
        p = {}
        if s.kind in WEIGHTED:
            fan_in = int(np.prod(s.weight_shape[1:]))
            # binary latent weights live on the scale of the binarizer's ramp
            std = BINARY_INIT_STD if s.precision == "binary" else np.sqrt(2.0 / fan_in)
            p["weight"] = (rng.standard_normal(s.weight_shape) * std).astype(dtype)
            if s.bias:
                p["bias"] = np.zeros(s.c_out, dtype)
        elif s.kind == "batchnorm":
            p["gamma"] = np.ones(s.c_out, dtype)
            p["beta"] = np.zeros(s.c_out, dtype)
        params.append(p)
    return params


class Network:
    """Parameters and state of a :class:`ModelGraph`.

    ``training=True`` uses batch statistics in batch-norm and the soft
    binarizer at the current ``(t, k)``. In eval mode batch-norm uses running
    statistics and binary tensors are hard signs. Layers listed in
    ``qweights`` run on their frozen integer codes instead of ``params``.

    ``gates`` maps a weighted layer to a 0/1 vector over its output channels.
    The gate multiplies the channel after the layer's batch-norm (or after
    the layer itself when no batch-norm follows), detaching the whole filter.
    """

    def __init__(self, graph: ModelGraph, params=None, seed: int = 0, dtype=np.float64):
        graph.shapes()
        self.graph = graph
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params = params if params is not None else init_params(graph, rng, self.dtype)
        self.buffers = {
            i: {"running_mean": np.zeros(s.c_out, self.dtype), "running_var": np.ones(s.c_out, self.dtype)}
            for i, s in enumerate(graph.layers)
            if s.kind == "batchnorm"
        }
        self.tk = bz.FINAL_TK
        self.training = False
        self.hard = None  # None: hard binarization iff eval mode
        self.update_stats = True
        self.binary_weight_scale = False
        self.qweights: dict[int, QuantizedWeight] = {}
        self.gates: dict[int, np.ndarray] = {}
        self.gate_grads: dict[int, np.ndarray] = {}
        self._cache = None

    # -- bookkeeping

    @property
    def layers(self):
        return self.graph.layers

    def train(self, mode: bool = True) -> "Network":
        self.training = mode
        return self

    def eval(self) -> "Network":
        return self.train(False)

    def named_params(self):
        for i, p in enumerate(self.params):
            for k, v in p.items():
                yield f"{i}.{k}", v

    def gate_position(self, layer: int) -> int:
        nxt = layer + 1
        if nxt < len(self.layers) and self.layers[nxt].kind == "batchnorm":
            return nxt
        return layer

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Network":
        self.dtype = np.dtype(dtype)
        for p in self.params:
            for k in p:
                p[k] = p[k].astype(self.dtype)
        for b in self.buffers.values():
            for k in b:
                b[k] = b[k].astype(self.dtype)
        return self

    # -- effective tensors

    def effective_weight(self, i: int, need_grad: bool = True):
        """Weight used in the forward pass and d(effective)/d(stored), if any."""
        s = self.layers[i]
        if i in self.qweights:
            return dequantize(self.qweights[i]).astype(self.dtype), None
        w = self.params[i]["weight"]
        if s.precision == "fp32":
            return w, None
        if s.precision == "quant":
            return qat_forward(w, s.n_bits), "ste"
        if not self._is_hard():
            t, k = self.tk
            we = bz.binarize_forward(w, t, k)
            return we, (bz.binarize_backward(w, t, k) if need_grad else None)
        we = np.where(w < 0, -1.0, 1.0).astype(self.dtype)
        if self.binary_weight_scale:
            we = we * np.abs(w).mean()
        return we, (bz.binarize_backward(w, *bz.FINAL_TK) if need_grad else None)

    def _is_hard(self) -> bool:
        return (not self.training) if self.hard is None else self.hard

    def _binarize_input(self, x, need_grad):
        if not self._is_hard():
            t, k = self.tk
            return bz.binarize_forward(x, t, k), (bz.binarize_backward(x, t, k) if need_grad else None)
        return bz.hard_sign(x), (bz.binarize_backward(x, *bz.FINAL_TK) if need_grad else None)

    # -- forward

    def _layer(self, i: int, x: np.ndarray, need_grad: bool):
        s = self.layers[i]
        p = self.params[i]
        aux = {}
        if s.kind in WEIGHTED:
            z, dz = (self._binarize_input(x, need_grad) if s.binarize_input else (x, None))
            w, dw = self.effective_weight(i, need_grad)
            if s.kind == "conv2d":
                cols, ho, wo = im2col(z, s.kernel, s.stride, s.padding)
                aux.update(cols=cols, ho=ho, wo=wo)
            else:
                aux.update(z2=z.reshape(z.shape[0], -1))
            aux.update(w=w, dw=dw, dz=dz, zshape=z.shape)
            return self._affine(i, aux, w), aux
        if s.kind == "batchnorm":
            axes = (0, 2, 3) if x.ndim == 4 else (0,)
            bshape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
            buf = self.buffers[i]
            if self.training:
                mean = x.mean(axis=axes)
                var = x.var(axis=axes)
                if self.update_stats:
                    m = x.size // x.shape[1]
                    unbiased = var * m / max(m - 1, 1)
                    buf["running_mean"] = (1 - BN_MOMENTUM) * buf["running_mean"] + BN_MOMENTUM * mean
                    buf["running_var"] = (1 - BN_MOMENTUM) * buf["running_var"] + BN_MOMENTUM * unbiased
            else:
                mean, var = buf["running_mean"], buf["running_var"]
            std = np.sqrt(var + BN_EPS)
            xhat = (x - mean.reshape(bshape)) / std.reshape(bshape)
            out = xhat * p["gamma"].reshape(bshape) + p["beta"].reshape(bshape)
            aux.update(xhat=xhat, std=std, axes=axes, bshape=bshape)
            return out, aux
        if s.kind == "avgpool":
            k = s.kernel
            n, c, h, w = x.shape
            out = x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
            return out, aux
        if s.fn == "relu":
            return np.maximum(x, 0), aux
        if s.fn == "hardtanh":
            return np.clip(x, -1, 1), aux
        return x, aux

    def _affine(self, i: int, aux: dict, w: np.ndarray) -> np.ndarray:
        s = self.layers[i]
        b = self.params[i].get("bias")
        if s.kind == "conv2d":
            out = aux["cols"] @ w.reshape(s.c_out, -1).T
            if b is not None:
                out = out + b
            n = aux["zshape"][0]
            return out.reshape(n, aux["ho"], aux["wo"], s.c_out).transpose(0, 3, 1, 2)
        out = aux["z2"] @ w.T
        if b is not None:
            out = out + b
        return out

    def raw_with_weight(self, layer: int, w: np.ndarray) -> np.ndarray:
        """Output of a cached weighted layer recomputed with weight ``w``.

        Uses the same arithmetic as the forward pass, so committing the
        weight later reproduces this result bit for bit.
        """
        return self._affine(layer, self.cached_aux(layer), w)

    def _post(self, i: int, out: np.ndarray, inputs: list, aux: dict | None, gate_at: dict, block_ends: dict):
        if i in gate_at:
            m = self.gates[gate_at[i]].astype(out.dtype)
            if aux is not None:
                aux["u"] = out
            out = out * (m.reshape(1, -1, 1, 1) if out.ndim == 4 else m.reshape(1, -1))
        if i in block_ends:
            out = out + shortcut(inputs[block_ends[i]], out.shape[1])
        return out

    def _maps(self):
        gate_at = {self.gate_position(l): l for l in self.gates}
        block_ends = {e: s for s, e in self.graph.residual_blocks}
        return gate_at, block_ends

    def _check_input(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != tuple(self.graph.input_shape):
            raise ShapeError(f"batch shape {x.shape[1:]} does not match input {tuple(self.graph.input_shape)}")
        return x

    def forward(self, x) -> np.ndarray:
        """Forward pass that records everything :meth:`backward` needs."""
        x = self._check_input(x)
        gate_at, block_ends = self._maps()
        inputs, auxes, raws = [], [], []
        h = x
        for i in range(len(self.layers)):
            inputs.append(h)
            out, aux = self._layer(i, h, True)
            raws.append(out)
            h = self._post(i, out, inputs, aux, gate_at, block_ends)
            auxes.append(aux)
        if not np.all(np.isfinite(h)):
            raise FloatingPointError("non-finite values in forward pass")
        self._cache = {"x": x, "inputs": inputs, "aux": auxes, "raw": raws, "logits": h, "training": self.training}
        return h

    def predict(self, x) -> np.ndarray:
        """Forward pass without caching or state updates."""
        x = self._check_input(x)
        gate_at, block_ends = self._maps()
        saved = self.update_stats
        self.update_stats = False
        try:
            return self._propagate(x, 0, [], gate_at, block_ends)
        finally:
            self.update_stats = saved

    def _propagate(self, h, start, inputs, gate_at, block_ends):
        for i in range(start, len(self.layers)):
            if len(inputs) > i:
                inputs[i] = h
            else:
                inputs.append(h)
            out, _ = self._layer(i, h, False)
            h = self._post(i, out, inputs, None, gate_at, block_ends)
        if not np.all(np.isfinite(h)):
            raise FloatingPointError("non-finite values in forward pass")
        return h

    def forward_from(self, layer: int, raw_out: np.ndarray) -> np.ndarray:
        """Re-run the tail of the cached forward with layer ``layer`` replaced.

        ``raw_out`` is the layer's output before gating and residual adds.
        Layers before ``layer`` are reused from the cache.
        """
        if self._cache is None:
            raise RuntimeError("forward_from needs a cached forward pass")
        gate_at, block_ends = self._maps()
        inputs = list(self._cache["inputs"][: layer + 1])
        h = self._post(layer, raw_out, inputs, None, gate_at, block_ends)
        return self._propagate(h, layer + 1, inputs, gate_at, block_ends)

    def cached_raw(self, layer: int) -> np.ndarray:
        return self._cache["raw"][layer]

    def cached_aux(self, layer: int) -> dict:
        return self._cache["aux"][layer]

    # -- backward

    def backward(self, grad_logits: np.ndarray) -> list[dict]:
        """Gradients of every parameter given d(loss)/d(logits).

        Weighted layers also report ``weight_eff``, the gradient with respect
        to the weight actually used in the forward pass (integer codes times
        scale for frozen layers).
        """
        if self._cache is None:
            raise RuntimeError("backward called without a prior forward")
        c = self._cache
        gate_at, block_ends = self._maps()
        grads = [dict() for _ in self.layers]
        self.gate_grads = {}
        pending: dict[int, np.ndarray] = {}
        g = np.asarray(grad_logits, dtype=self.dtype)
        for i in range(len(self.layers) - 1, -1, -1):
            s = self.layers[i]
            aux = c["aux"][i]
            if i in block_ends:
                src = block_ends[i]
                sb = shortcut_backward(g, c["inputs"][src].shape[1])
                pending[src] = pending[src] + sb if src in pending else sb
            if i in gate_at:
                l = gate_at[i]
                axes = (0, 2, 3) if g.ndim == 4 else (0,)
                self.gate_grads[l] = (g * aux["u"]).sum(axis=axes)
                m = self.gates[l].astype(g.dtype)
                g = g * (m.reshape(1, -1, 1, 1) if g.ndim == 4 else m.reshape(1, -1))
            g = self._layer_backward(i, s, g, aux, grads[i], need_input=i > 0)
            if i in pending:
                extra = pending.pop(i)
                g = extra if g is None else g + extra
        for gr in grads:
            for v in gr.values():
                if not np.all(np.isfinite(v)):
                    raise FloatingPointError("non-finite gradient")
        return grads

    def _layer_backward(self, i, s, g, aux, out, need_input):
        x = self._cache["inputs"][i]
        if s.kind in WEIGHTED:
            w = aux["w"]
            if s.kind == "conv2d":
                g2 = g.transpose(0, 2, 3, 1).reshape(-1, s.c_out)
                gw = (g2.T @ aux["cols"]).reshape(w.shape)
                if "bias" in self.params[i]:
                    out["bias"] = g2.sum(axis=0)
                dx = None
                if need_input:
                    dcols = g2 @ w.reshape(s.c_out, -1)
                    dx = col2im(dcols, aux["zshape"], s.kernel, s.stride, s.padding, aux["ho"], aux["wo"])
            else:
                gw = g.T @ aux["z2"]
                if "bias" in self.params[i]:
                    out["bias"] = g.sum(axis=0)
                dx = (g @ w).reshape(aux["zshape"]) if need_input else None
            out["weight_eff"] = gw
            dw = aux["dw"]
            if dw is None:
                out["weight"] = gw
            elif isinstance(dw, str):
                out["weight"] = qat_backward(self.params[i]["weight"], gw)
            else:
                out["weight"] = gw * dw
            if dx is not None and aux["dz"] is not None:
                dx = dx * aux["dz"]
            return dx
        if s.kind == "batchnorm":
            p = self.params[i]
            axes, bshape = aux["axes"], aux["bshape"]
            xhat, std = aux["xhat"], aux["std"]
            out["gamma"] = (g * xhat).sum(axis=axes)
            out["beta"] = g.sum(axis=axes)
            gx = g * p["gamma"].reshape(bshape)
            if self._cache["training"]:
                dx = (gx - gx.mean(axis=axes, keepdims=True) - xhat * (gx * xhat).mean(axis=axes, keepdims=True))
                return dx / std.reshape(bshape)
            return gx / std.reshape(bshape)
        if s.kind == "avgpool":
            k = s.kernel
            return np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        if s.fn == "relu":
            return g * (x > 0)
        if s.fn == "hardtanh":
            return g * (np.abs(x) <= 1)
        return g


# ------------------------------------------------------- functional facade


def forward(model: Network, batch) -> np.ndarray:
    return model.forward(batch)


def backward(model: Network, batch, labels, loss_kind: str = "cross_entropy") -> list[dict]:
    """Loss gradients for the batch seen by the most recent forward."""
    c = model._cache
    if c is None:
        raise RuntimeError("backward called without a prior forward")
    batch = np.asarray(batch, dtype=model.dtype)
    if batch.shape != c["x"].shape or not np.array_equal(batch, c["x"]):
        raise RuntimeError("backward batch differs from the last forward batch")
    _, grad_fn = LOSSES[loss_kind]
    return model.backward(grad_fn(c["logits"], labels))


def loss_and_grads(model: Network, batch, labels, loss_kind: str = "cross_entropy"):
    loss_fn, grad_fn = LOSSES[loss_kind]
    logits = model.forward(batch)
    loss = loss_fn(logits, labels)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    return loss, model.backward(grad_fn(logits, labels)), logits


def sgd_step(params: dict, grads: dict, lr: float, momentum: float = 0.0, buffers: dict | None = None,
             weight_decay: float = 0.0) -> dict:
    """In-place SGD with heavy-ball momentum: ``v = mu v + g; p -= lr v``."""
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    for key, p in params.items():
        g = grads.get(key)
        if g is None:
            continue
        g = np.asarray(g)
        if g.shape != np.shape(p):
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {np.shape(p)} for {key}")
        if weight_decay:
            g = g + weight_decay * p
        if momentum:
            if buffers is None:
                raise ValueError("momentum needs a buffer dict")
            v = buffers.get(key)
            v = g.copy() if v is None else momentum * v + g
            buffers[key] = v
        else:
            v = g
        p -= (lr * v).astype(p.dtype, copy=False)
    return params


def network_params(model: Network) -> dict:
    return {f"{i}.{k}": v for i, p in enumerate(model.params) for k, v in p.items()}


def network_grads(grads: list[dict]) -> dict:
    return {f"{i}.{k}": v for i, g in enumerate(grads) for k, v in g.items() if k != "weight_eff"}


def recalibrate_bn(model: Network, x, batch_size: int = 500) -> Network:
    """Recompute batch-norm running statistics of the deployed network.

    Runs in eval mode (hard binarization), one batch-norm layer at a time in
    network order, so every layer is calibrated against the already
    recalibrated layers before it.
    """
    bn = [i for i, s in enumerate(model.layers) if s.kind == "batchnorm"]
    saved = model.training
    model.eval()
    gate_at, block_ends = model._maps()
    try:
        for target in bn:
            s1 = s2 = 0.0
            n = 0
            for s in range(0, len(x), batch_size):
                h = model._check_input(x[s : s + batch_size])
                inputs = []
                for i in range(target):
                    inputs.append(h)
                    out, _ = model._layer(i, h, False)
                    h = model._post(i, out, inputs, None, gate_at, block_ends)
                axes = (0, 2, 3) if h.ndim == 4 else (0,)
                h = h.astype(np.float64)
                s1 = s1 + h.sum(axis=axes)
                s2 = s2 + (h * h).sum(axis=axes)
                n += h.size // h.shape[1]
            if n:
                mean = s1 / n
                var = np.maximum(s2 / n - mean * mean, 0.0) * n / max(n - 1, 1)
                model.buffers[target]["running_mean"] = mean.astype(model.dtype)
                model.buffers[target]["running_var"] = var.astype(model.dtype)
    finally:
        model.training = saved
    return model


def accuracy(model: Network, x, y, batch_size: int = 500) -> float:
    """Percentage of samples classified correctly."""
    y = np.asarray(y)
    if len(y) == 0:
        return 0.0
    correct = 0
    for s in range(0, len(y), batch_size):
        correct += int((model.predict(x[s : s + batch_size]).argmax(axis=1) == y[s : s + batch_size]).sum())
    return 100.0 * correct / len(y)


def predictions(model: Network, x, batch_size: int = 500) -> np.ndarray:
    out = [model.predict(x[s : s + batch_size]).argmax(axis=1) for s in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, np.int64)
