"""Early Growth: grow a binary network channel-wise with learned masks.

Stage 1 preallocates ``ceil(M * width)`` output channels per layer and trains
the binary weights jointly with one real mask per channel. A Gumbel-Sigmoid
relaxation makes the mask differentiable; the forward pass uses its hard
0.5 threshold. A channel *grows* the first time its noise-free decision
switches on, and stays on afterwards. Stage 1 stops once the active channel
counts settle. Stage 2 keeps the active channels only and retrains the
weights without masks.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import WEIGHTED, LayerSpec, ModelGraph, Network, ShapeError, conv2d, loss_and_grads, network_grads, \
    network_params, sgd_step
from .training import BinarizeClock, TrainConfig, TrainingDiverged, lr_at, minibatches, train

log = logging.getLogger(__name__)

FORMS = ("logit", "printed")


@dataclass
class GrowthConfig:
    max_multiplier: float = 4.0
    theta: float = 0.9
    window: int = 2
    temperature: float = 2.0 / 3.0
    beta_rho: float = 1.1
    beta_max: float = 100.0
    max_epochs: int = 40
    mask_lr: float = 0.5
    form: str = "logit"
    capacity_ceiling: int = 4096
    seed: int = 0

    def __post_init__(self):
        if self.max_multiplier < 1:
            raise ValueError("max_multiplier must be >= 1")
        if self.form not in FORMS:
            raise ValueError(f"unknown gumbel form {self.form!r}")
        if not 0 < self.theta <= 1:
            raise ValueError("theta must lie in (0, 1]")
        if self.window < 1 or self.max_epochs < 0:
            raise ValueError("window must be >= 1 and max_epochs >= 0")
        if self.temperature <= 0 or self.beta_rho < 1 or self.beta_max <= 0:
            raise ValueError("temperature, beta_rho and beta_max must be positive (rho >= 1)")


@dataclass
class ChannelMask:
    """Real masks over one layer's output channels.

    ``base`` marks the channels of the x1 model; they and every grown
    channel are held on, so only dormant channels are sampled.
    """

    m_fp: np.ndarray
    base: np.ndarray
    beta: float = 1.0
    temperature: float = 2.0 / 3.0
    form: str = "logit"
    latched: np.ndarray | None = None

    def __post_init__(self):
        self.m_fp = np.asarray(self.m_fp, dtype=np.float64)
        self.base = np.asarray(self.base, dtype=bool)
        if self.latched is None:
            self.latched = self.base.copy()
        if self.m_fp.shape != self.base.shape:
            raise ShapeError("mask and base flags differ in length")

    @property
    def size(self) -> int:
        return self.m_fp.size

    def probability(self, g0=0.0, g1=0.0) -> np.ndarray:
        return gumbel_sigmoid(self.m_fp, self.beta, self.temperature, g0, g1, self.form)

    def decision(self) -> np.ndarray:
        """Noise-free binary mask with latched channels held on."""
        return (mask_forward(self.probability()) > 0) | self.latched


@dataclass
class GrowthState:
    capacity: dict[int, int]
    grown: dict[int, np.ndarray]
    history: list[dict[int, int]] = field(default_factory=list)
    events: list[tuple[int, int, int]] = field(default_factory=list)  # (step, layer, channel)
    converged: bool = False
    epochs: int = 0

    def active(self) -> dict[int, int]:
        return {l: int(g.sum()) for l, g in self.grown.items()}

    def record(self) -> None:
        self.history.append(self.active())

    def log_rows(self) -> list[tuple[int, int, int, int]]:
        """Growth log rows ``(checkpoint, layer_id, active_channels, capacity)``."""
        return [(c, l, n, self.capacity[l]) for c, h in enumerate(self.history) for l, n in sorted(h.items())]


class GumbelNoise:
    """Standard Gumbel samples ``-ln(-ln u)`` keyed by ``(seed, layer, step)``.

    Channel ``j`` of a layer always takes element ``j`` of its stream, so
    samples do not depend on evaluation order. ``fixed=(g0, g1)`` bypasses
    sampling.
    """

    def __init__(self, seed: int = 0, fixed: tuple[float, float] | None = None):
        self.seed = seed
        self.fixed = fixed

    def sample(self, layer: int, step: int, n: int) -> tuple[np.ndarray, np.ndarray]:
        if self.fixed is not None:
            return np.full(n, float(self.fixed[0])), np.full(n, float(self.fixed[1]))
        rng = np.random.default_rng([self.seed, layer, step])
        # open interval keeps both logs finite
        u = rng.uniform(np.finfo(float).tiny, 1.0, size=(2, n))
        g = -np.log(-np.log(u))
        return g[0], g[1]


# ------------------------------------------------------------ mask algebra


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(a, dtype=np.float64)))


def _log_sigmoid(a):
    return -np.logaddexp(0.0, -np.asarray(a, dtype=np.float64))


def gumbel_sigmoid(m_fp, beta: float, temperature: float, g0=0.0, g1=0.0, form: str = "printed"):
    """Relaxed gate probability.

    ``printed``: ``sigmoid((ln pi0 + g0 - g1) / T)`` with ``pi0 = sigmoid(beta m)``.
    Without noise this stays below 0.5 for every finite mask.
    ``logit``: ``sigmoid((beta m + g0 - g1) / T)``, the usual form whose
    noise-free threshold sits at ``m = 0``.
    """
    if beta <= 0 or temperature <= 0:
        raise ValueError("beta and temperature must be positive")
    bm = beta * np.asarray(m_fp, dtype=np.float64)
    lead = _log_sigmoid(bm) if form == "printed" else bm
    if form not in FORMS:
        raise ValueError(f"unknown gumbel form {form!r}")
    return _sigmoid((lead + g0 - g1) / temperature)


def gumbel_sigmoid_grad(m_fp, beta: float, temperature: float, g0=0.0, g1=0.0, form: str = "printed"):
    """Analytic ``dp/dm_fp`` of :func:`gumbel_sigmoid`."""
    p = gumbel_sigmoid(m_fp, beta, temperature, g0, g1, form)
    inner = beta * (1.0 - _sigmoid(beta * np.asarray(m_fp, dtype=np.float64))) if form == "printed" else beta
    return p * (1.0 - p) / temperature * inner


def mask_forward(p) -> np.ndarray:
    """Hard gate ``1[p > 0.5]``; gradients pass straight through to ``p``."""
    return (np.asarray(p) > 0.5).astype(np.float64)


def mask_backward(grad_mb) -> np.ndarray:
    return np.asarray(grad_mb, dtype=np.float64)


def masked_conv_forward(h_in, w_b, m_b, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Convolution whose output channel ``j`` is zeroed when ``m_b[j] == 0``."""
    m_b = np.asarray(m_b)
    if m_b.shape != (w_b.shape[0],):
        raise ShapeError(f"{m_b.size} masks for {w_b.shape[0]} filters")
    return conv2d(h_in, w_b * m_b.reshape(-1, 1, 1, 1), None, stride, pad)


def beta_schedule(beta: float, epoch: int | None = None, rho: float = 1.1, beta_max: float = 100.0) -> float:
    """One epoch of sharpening: ``min(beta * rho, beta_max)``, never decreasing."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    return max(beta, min(beta * rho, beta_max))


def check_converged(state: GrowthState, window: int = 2, theta: float = 0.9) -> bool:
    """True when at least ``theta`` of the layers kept their count over ``window`` checks."""
    h = state.history
    if len(h) < window + 1:
        raise ValueError(f"need {window + 1} history entries, have {len(h)}")
    recent = h[-(window + 1):]
    layers = sorted(recent[-1])
    if not layers:
        return True
    stable = sum(all(r[l] == recent[-1][l] for r in recent) for l in layers)
    return stable >= theta * len(layers) - 1e-12


# ----------------------------------------------------------- capacity model


def _feature_map(graph: ModelGraph) -> list[tuple[int, int]]:
    """For each layer: ``(channels, spatial size)`` of its input."""
    shape = tuple(graph.input_shape)
    out = []
    for s, o in zip(graph.layers, graph.shapes()):
        out.append((shape[0], int(np.prod(shape[1:])) if len(shape) == 3 else 1))
        shape = o
    return out


def _masked_layers(graph: ModelGraph) -> list[int]:
    # the classifier's outputs are the classes and never grow
    return graph.weighted()[:-1]


def resize_graph(graph: ModelGraph, widths: dict[int, int]) -> ModelGraph:
    """Copy of ``graph`` with new output widths for some weighted layers."""
    g = graph.copy()
    feats = _feature_map(graph)
    c = graph.input_shape[0]
    for i, s in enumerate(g.layers):
        spatial = feats[i][1]
        if s.kind == "conv2d":
            s.c_in = c
            s.c_out = widths.get(i, s.c_out)
            c = s.c_out
        elif s.kind == "linear":
            s.c_in = c * spatial
            s.c_out = widths.get(i, s.c_out)
            c = s.c_out
        elif s.kind == "batchnorm":
            s.c_in = s.c_out = c
    g.shapes()
    return g


def _take(net: Network, graph: ModelGraph, keep: dict[int, np.ndarray], seed: int) -> Network:
    """Network on ``graph`` whose tensors are index-mapped from ``net``.

    ``keep[i]`` lists, for each output channel of layer ``i`` in the new
    graph, the source channel in ``net`` (``-1`` for a fresh channel).
    """
    new = Network(graph, seed=seed, dtype=net.dtype)
    feats = _feature_map(net.graph)
    chan = np.arange(net.graph.input_shape[0])
    for i, (s_old, s_new) in enumerate(zip(net.layers, graph.layers)):
        p_old, p_new = net.params[i], new.params[i]
        if s_old.kind in WEIGHTED:
            out_idx = keep.get(i, np.arange(s_old.c_out))
            spatial = feats[i][1]
            if s_old.kind == "linear" and spatial > 1:
                in_idx = (chan[:, None] * spatial + np.arange(spatial)[None, :])
                valid_in = np.repeat(chan >= 0, spatial)
                in_idx = np.where(in_idx >= 0, in_idx, -1).reshape(-1)
            else:
                in_idx, valid_in = chan, chan >= 0
            w_old, w_new = p_old["weight"], p_new["weight"]
            for o_new, o_src in enumerate(out_idx):
                if o_src < 0:
                    continue
                cols = np.flatnonzero(valid_in)
                w_new[o_new, cols] = w_old[o_src, in_idx[cols]]
                if "bias" in p_old:
                    p_new["bias"][o_new] = p_old["bias"][o_src]
            chan = np.asarray(out_idx)
        elif s_old.kind == "batchnorm":
            ok = np.flatnonzero(chan >= 0)
            for k in ("gamma", "beta"):
                p_new[k][ok] = p_old[k][chan[ok]]
            for k in ("running_mean", "running_var"):
                new.buffers[i][k][ok] = net.buffers[i][k][chan[ok]]
    return new


def init_growth(net: Network, cfg: GrowthConfig):
    """Expand ``net`` to capacity ``ceil(M * width)`` and attach channel masks.

    Base channels copy the weights of ``net`` and start at ``m_fp = 1``;
    extra channels start from fresh weights and ``m_fp ~ U[-1, -0.1]``.
    """
    if cfg.max_multiplier < 1:
        raise ValueError("max_multiplier must be >= 1")
    graph = net.graph
    layers = _masked_layers(graph)
    widths = {}
    for l in layers:
        cap = math.ceil(cfg.max_multiplier * graph.layers[l].c_out - 1e-9)
        if cap > cfg.capacity_ceiling:
            raise ValueError(f"layer {l}: capacity {cap} exceeds ceiling {cfg.capacity_ceiling}")
        widths[l] = cap
    big = resize_graph(graph, widths)
    keep = {}
    for l in layers:
        base = graph.layers[l].c_out
        keep[l] = np.concatenate([np.arange(base), -np.ones(widths[l] - base, dtype=int)])
    grown_net = _take(net, big, keep, seed=cfg.seed + 1)
    grown_net.tk, grown_net.training = net.tk, net.training
    rng = np.random.default_rng([cfg.seed, 7])
    masks, grown = {}, {}
    for l in layers:
        base = graph.layers[l].c_out
        flags = np.arange(widths[l]) < base
        m = np.where(flags, 1.0, 0.0)
        m[~flags] = rng.uniform(-1.0, -0.1, size=int((~flags).sum()))
        masks[l] = ChannelMask(m, flags, 1.0, cfg.temperature, cfg.form)
        grown[l] = flags.copy()
        grown_net.gates[l] = masks[l].decision().astype(np.float64)
    state = GrowthState({l: widths[l] for l in layers}, grown)
    state.record()
    return grown_net, masks, state


# ---------------------------------------------------------------- stage 1


@dataclass
class Stage1Optimizer:
    lr: float
    mask_lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    noise: GumbelNoise = field(default_factory=GumbelNoise)
    step: int = 0
    buffers: dict = field(default_factory=dict)


def stage1_step(net: Network, masks: dict[int, ChannelMask], state: GrowthState, x, y, opt: Stage1Optimizer) -> float:
    """One joint SGD step on latent weights and masks; records growth events."""
    if state.converged:
        raise RuntimeError("growth already converged")
    derivs = {}
    for l, mk in masks.items():
        g0, g1 = opt.noise.sample(l, opt.step, mk.size)
        p = mk.probability(g0, g1)
        net.gates[l] = np.where(mk.latched, 1.0, mask_forward(p))
        derivs[l] = gumbel_sigmoid_grad(mk.m_fp, mk.beta, mk.temperature, g0, g1, mk.form)
    try:
        loss, grads, _ = loss_and_grads(net, x, y)
    except FloatingPointError as exc:
        raise TrainingDiverged(f"stage 1 diverged at step {opt.step}: {exc}") from exc
    sgd_step(network_params(net), network_grads(grads), opt.lr, opt.momentum, opt.buffers, opt.weight_decay)
    mparams = {f"mask{l}": masks[l].m_fp for l in masks}
    mgrads = {}
    for l, mk in masks.items():
        g = net.gate_grads[l].astype(np.float64) * derivs[l]
        # held-on channels keep their mask values
        mgrads[f"mask{l}"] = np.where(mk.latched, 0.0, g)
    sgd_step(mparams, mgrads, opt.mask_lr, opt.momentum, opt.buffers)
    for l, mk in masks.items():
        now = mk.decision()
        fresh = now & ~state.grown[l]
        for j in np.flatnonzero(fresh):
            state.events.append((opt.step, l, int(j)))
        state.grown[l] |= now
        mk.latched |= now
        net.gates[l] = mk.latched.astype(np.float64)
    opt.step += 1
    return loss


def stage1(net: Network, masks, state: GrowthState, x, y, train_cfg: TrainConfig, cfg: GrowthConfig,
           callback=None) -> list[float]:
    """Run growth epochs until :func:`check_converged` fires or the epoch cap."""
    x = np.asarray(x, dtype=net.dtype)
    rng = np.random.default_rng(train_cfg.seed)
    steps = max(math.ceil(len(x) / train_cfg.batch_size), 1)
    clock = BinarizeClock(cfg.max_epochs, steps, train_cfg.schedule_unit)
    opt = Stage1Optimizer(train_cfg.lr, cfg.mask_lr, train_cfg.momentum, train_cfg.weight_decay,
                          GumbelNoise(cfg.seed))
    sched = TrainConfig(**{**train_cfg.__dict__, "epochs": cfg.max_epochs})
    history = []
    for epoch in range(cfg.max_epochs):
        opt.lr = lr_at(sched, epoch)
        net.train()
        total = 0.0
        for step, idx in enumerate(minibatches(len(x), train_cfg.batch_size, rng)):
            net.tk = clock.tk(epoch, step)
            total += stage1_step(net, masks, state, x[idx], y[idx], opt) * len(idx)
        history.append(total / len(x))
        for mk in masks.values():
            mk.beta = beta_schedule(mk.beta, epoch, cfg.beta_rho, cfg.beta_max)
        state.record()
        state.epochs = epoch + 1
        log.debug("grow epoch %d loss %.4f active %s", epoch, history[-1], state.active())
        if callback is not None:
            callback(epoch, net, state)
        if len(state.history) > cfg.window and check_converged(state, cfg.window, cfg.theta):
            state.converged = True
            break
    net._cache = None
    net.eval()
    return history


# ---------------------------------------------------------------- stage 2


def build_grown_model(net: Network, masks: dict[int, ChannelMask], seed: int = 0) -> Network:
    """Keep the active channels of the capacity model and drop the masks.

    Layers inside one residual block are widened to the block's largest
    active count, adding dormant channels in order of decreasing ``m_fp``.
    """
    graph = net.graph
    keep = {}
    for l, mk in masks.items():
        on = mk.decision()
        if not on.any():
            raise ValueError(f"layer {l} has no active channels")
        keep[l] = np.flatnonzero(on)
    for start, end in graph.residual_blocks:
        members = [l for l in keep if start <= l <= end]
        if not members:
            continue
        target = max(keep[l].size for l in members)
        for l in members:
            extra = target - keep[l].size
            if extra:
                dormant = np.setdiff1d(np.arange(masks[l].size), keep[l])
                order = dormant[np.argsort(-masks[l].m_fp[dormant], kind="stable")]
                keep[l] = np.sort(np.concatenate([keep[l], order[:extra]]))
    small = resize_graph(graph, {l: int(k.size) for l, k in keep.items()})
    out = _take(net, small, keep, seed)
    out.tk = net.tk
    out.training = net.training
    return out


def stage2_train(grown: Network, x, y, cfg: TrainConfig) -> list[float]:
    """Plain complete-BNN training of the grown model (schedule restarts at 0)."""
    if cfg.epochs == 0:
        return []
    return train(grown, x, y, cfg)


@dataclass
class GrowthResult:
    model: Network
    state: GrowthState
    masks: dict[int, ChannelMask]
    stage1_loss: list[float]
    stage2_loss: list[float]

    @property
    def widths(self) -> dict[int, int]:
        return {i: s.c_out for i, s in enumerate(self.model.layers) if s.kind in WEIGHTED}


def early_growth(base: Network, x, y, cfg: GrowthConfig, train_cfg: TrainConfig,
                 stage2_cfg: TrainConfig | None = None) -> GrowthResult:
    """Both stages: grow from ``base`` then retrain the reconstructed model."""
    net, masks, state = init_growth(base, cfg)
    net.astype(train_cfg.dtype)
    s1 = stage1(net, masks, state, x, y, train_cfg, cfg)
    grown = build_grown_model(net, masks, seed=cfg.seed)
    s2 = stage2_train(grown, x, y, stage2_cfg or train_cfg)
    return GrowthResult(grown, state, masks, s1, s2)


def masked_capacity_copy(net: Network, masks: dict[int, ChannelMask]) -> Network:
    """Capacity network with every gate set to the final noise-free decision."""
    out = copy.deepcopy(net)
    out._cache = None
    for l, mk in masks.items():
        out.gates[l] = mk.decision().astype(np.float64)
    return out
