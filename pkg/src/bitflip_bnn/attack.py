"""Progressive bit-flip attack on the stored weight bits of a deployed network.

Every step ranks bits inside each attacked layer by a first-order loss
estimate (weight gradient times the value change of the flip), then
evaluates the top candidates of all layers exactly on the attack batch and
commits the single flip that helps the attacker most.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import WEIGHTED, Network, cross_entropy, cross_entropy_grad, predictions
from .quantizer import BitAddress, binarize_layer, bit_flip_deltas, flip_bit, flip_code, quantize_layer

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("model", "precision", "mode", "CA", "PA", "n_flips", "weight_bits_M", "status")


@dataclass
class AttackConfig:
    mode: str = "untargeted"  # untargeted | targeted
    target_class: int | None = None
    budget: int = 5000
    candidates_per_layer: int = 10
    rounds: int = 3
    attack_batch: int = 128
    seed: int = 0
    eval_every: int = 10
    eval_dense_until: int = 100
    target_rate: float = 0.9
    threads: int | None = None

    def __post_init__(self):
        if self.mode not in ("untargeted", "targeted"):
            raise ValueError(f"unknown attack mode {self.mode!r}")
        if self.budget < 0:
            raise ValueError("budget must be >= 0")
        if self.mode == "targeted" and self.target_class is None:
            raise ValueError("targeted mode needs target_class")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")


@dataclass
class BitFlipRecord:
    step: int
    layer: int
    weight: int
    bit: int
    loss_before: float
    loss_after: float
    accuracy: float | None = None

    @property
    def address(self) -> BitAddress:
        return BitAddress(self.layer, self.weight, self.bit)


@dataclass
class AttackReport:
    mode: str
    status: str  # success | budget_exhausted | stalled
    ca: float
    pa: float
    records: list[BitFlipRecord] = field(default_factory=list)
    histogram: dict[int, int] = field(default_factory=dict)
    round_index: int = 0
    target_class: int | None = None
    weight_bits: int = 0
    num_classes: int = 10

    @property
    def n_flips(self) -> int:
        return len(self.records)

    @property
    def success(self) -> bool:
        return self.status == "success"

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "status": self.status,
            "ca": self.ca,
            "pa": self.pa,
            "n_flips": self.n_flips,
            "round": self.round_index,
            "target_class": self.target_class,
            "weight_bits": self.weight_bits,
            "records": [
                {"step": r.step, "layer": r.layer, "weight": r.weight, "bit": r.bit,
                 "loss_before": r.loss_before, "loss_after": r.loss_after}
                for r in self.records
            ],
            "histogram": [[k, v] for k, v in sorted(self.histogram.items())],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackReport":
        recs = [BitFlipRecord(**r) for r in d["records"]]
        return cls(d["mode"], d["status"], d["ca"], d["pa"], recs, {int(k): v for k, v in d["histogram"]},
                   d.get("round", 0), d.get("target_class"), d.get("weight_bits", 0))

    def summary_row(self, model: str, precision: str) -> dict:
        return {"model": model, "precision": precision, "mode": self.mode, "CA": f"{self.ca:.2f}",
                "PA": f"{self.pa:.2f}", "n_flips": self.n_flips,
                "weight_bits_M": f"{self.weight_bits / 1e6:.6f}", "status": self.status}


@dataclass(order=True)
class Candidate:
    estimate: float
    layer: int
    weight: int
    bit: int
    delta: float = 0.0


# ------------------------------------------------------------------ set-up


def deploy(net: Network, binary_scale: bool = False) -> Network:
    """Freeze quantized and binary layers to integer codes (the attack surface)."""
    for i, s in enumerate(net.layers):
        if s.kind not in WEIGHTED or s.precision == "fp32":
            continue
        w = net.params[i]["weight"]
        if s.precision == "quant":
            net.qweights[i] = quantize_layer(w, s.n_bits, layer_id=i)
        else:
            scale = float(np.abs(w).mean()) if binary_scale else 1.0
            net.qweights[i] = binarize_layer(w, layer_id=i, scale=scale)
    net.eval()
    return net


def model_weight_bits(net_or_graph) -> int:
    graph = getattr(net_or_graph, "graph", net_or_graph)
    return int(sum(int(np.prod(s.weight_shape)) * s.bits_per_weight for s in graph.layers if s.kind in WEIGHTED))


def attacked_layers(net: Network) -> list[int]:
    return sorted(net.qweights)


# ---------------------------------------------------------------- ranking


def bit_scores(qw, weight_grad: np.ndarray, n: int = 10, mode: str = "untargeted") -> list[Candidate]:
    """Top-``n`` flips of one layer by estimated loss change.

    Untargeted keeps flips with a positive estimate (largest first); targeted
    keeps negative ones (most negative first).
    """
    g = np.asarray(weight_grad, dtype=np.float64).reshape(-1)
    if g.size != qw.size:
        raise ValueError(f"gradient has {g.size} entries for a layer of {qw.size} weights")
    deltas = bit_flip_deltas(qw)
    est = g[:, None] * deltas
    key = est if mode == "untargeted" else -est
    flat = key.reshape(-1)
    admissible = np.flatnonzero(flat > 0)
    if admissible.size == 0 or n <= 0:
        return []
    if admissible.size > n:
        part = np.argpartition(-flat[admissible], n - 1)[:n]
        admissible = admissible[part]
    # stable order: by score, then by address
    order = sorted(admissible.tolist(), key=lambda a: (-flat[a], a))
    nb = qw.n_bits
    return [Candidate(float(est.reshape(-1)[a]), qw.layer_id, a // nb, a % nb, float(deltas.reshape(-1)[a]))
            for a in order]


# ------------------------------------------------------------- evaluation


def _attack_labels(cfg: AttackConfig, labels: np.ndarray) -> np.ndarray:
    if cfg.mode == "targeted":
        return np.full_like(labels, cfg.target_class)
    return labels


def _perturbed_raw(net: Network, cand: Candidate) -> np.ndarray:
    """Layer output with ``cand`` flipped, recomputed from cached operands."""
    qw = net.qweights[cand.layer]
    w = net.cached_aux(cand.layer)["w"].copy()
    code = flip_code(int(qw.codes.reshape(-1)[cand.weight]), cand.bit, qw.n_bits)
    # same rounding as dequantize() so the committed flip reproduces this value
    w.reshape(-1)[cand.weight] = np.float64(code) * qw.scale
    return net.raw_with_weight(cand.layer, w)


def evaluate_candidate(net: Network, cand: Candidate, labels: np.ndarray) -> float:
    """Exact attack-batch loss with ``cand`` flipped; the network is not modified."""
    logits = net.forward_from(cand.layer, _perturbed_raw(net, cand))
    return cross_entropy(logits, labels)


def _threads(cfg: AttackConfig) -> int:
    if cfg.threads:
        return max(int(cfg.threads), 1)
    return max(int(os.environ.get("BFF_THREADS", "1")), 1)


def progressive_step(net: Network, x: np.ndarray, y: np.ndarray, cfg: AttackConfig, step: int = 0):
    """Commit one bit flip. Returns the record, or ``None`` when the step stalls."""
    labels = _attack_labels(cfg, y)
    logits = net.forward(x)
    loss = cross_entropy(logits, labels)
    grads = net.backward(cross_entropy_grad(logits, labels))
    n = cfg.candidates_per_layer
    for attempt in range(2):
        cands = []
        for l in attacked_layers(net):
            cands += bit_scores(net.qweights[l], grads[l]["weight_eff"], n, cfg.mode)
        if not cands:
            break
        workers = _threads(cfg)
        if workers > 1 and len(cands) > 1:
            with ThreadPoolExecutor(workers) as ex:
                losses = list(ex.map(lambda c: evaluate_candidate(net, c, labels), cands))
        else:
            losses = [evaluate_candidate(net, c, labels) for c in cands]
        sign = 1.0 if cfg.mode == "untargeted" else -1.0
        best = min(range(len(cands)), key=lambda j: (-sign * losses[j], cands[j].layer, cands[j].weight, cands[j].bit))
        gain = sign * (losses[best] - loss)
        if gain >= 0:
            c = cands[best]
            net.qweights[c.layer] = flip_bit(net.qweights[c.layer], BitAddress(c.layer, c.weight, c.bit))
            net._cache = None
            return BitFlipRecord(step, c.layer, c.weight, c.bit, loss, losses[best])
        n *= 2
    return None


def _attack_success(cfg: AttackConfig, net: Network, acc: float, test_pred: np.ndarray, x_att, num_classes) -> bool:
    chance = 100.0 / num_classes
    if cfg.mode == "untargeted":
        return acc <= chance
    if len(test_pred) == 0:
        return False
    share_test = float(np.mean(test_pred == cfg.target_class))
    share_batch = float(np.mean(predictions(net, x_att) == cfg.target_class))
    return share_test >= cfg.target_rate and share_batch >= cfg.target_rate


def run_attack(net: Network, cfg: AttackConfig, attack_x, attack_y, test_x, test_y, round_index: int = 0) -> AttackReport:
    """Flip bits until random-guess accuracy, stall, or budget.

    The network's codes are restored before returning.
    """
    if not net.qweights:
        raise ValueError("network has no quantized layers; call deploy() first")
    C = net.graph.num_classes
    if cfg.mode == "targeted" and not 0 <= cfg.target_class < C:
        raise ValueError(f"target class {cfg.target_class} outside 0..{C - 1}")
    original = dict(net.qweights)
    net.eval()
    attack_x = np.asarray(attack_x, dtype=net.dtype)
    test_x = np.asarray(test_x, dtype=net.dtype)
    test_y = np.asarray(test_y)

    def measure():
        pred = predictions(net, test_x)
        return (100.0 * float(np.mean(pred == test_y)) if len(test_y) else 0.0), pred

    acc, pred = measure()
    ca = acc
    records: list[BitFlipRecord] = []
    status = None
    try:
        while True:
            if _attack_success(cfg, net, acc, pred, attack_x, C):
                status = "success"
                break
            if len(records) >= cfg.budget:
                status = "budget_exhausted"
                break
            rec = progressive_step(net, attack_x, attack_y, cfg, len(records))
            if rec is None:
                status = "stalled"
                break
            records.append(rec)
            k = len(records)
            if k < cfg.eval_dense_until or k % cfg.eval_every == 0 or k >= cfg.budget:
                acc, pred = measure()
                rec.accuracy = acc
        pa = acc if records and records[-1].accuracy is not None else measure()[0]
    finally:
        net.qweights = original
        net._cache = None
    report = AttackReport(cfg.mode, status, ca, pa, records, round_index=round_index,
                          target_class=cfg.target_class, weight_bits=model_weight_bits(net), num_classes=C)
    report.histogram = flip_profile(report, attacked_layers(net))
    return report


def attack_batch(test_x, test_y, size: int, seed: int, round_index: int):
    rng = np.random.default_rng([seed, round_index])
    idx = rng.choice(len(test_y), size=min(size, len(test_y)), replace=False)
    return test_x[idx], test_y[idx]


def run_rounds(net: Network, cfg: AttackConfig, test_x, test_y):
    """Attack ``cfg.rounds`` times with fresh attack batches; returns ``(best, all)``.

    The best round is the successful one with fewest flips, or failing any
    success, the one with the lowest post-attack accuracy.
    """
    reports = []
    for r in range(cfg.rounds):
        ax, ay = attack_batch(test_x, test_y, cfg.attack_batch, cfg.seed, r)
        reports.append(run_attack(net, cfg, ax, ay, test_x, test_y, round_index=r))
    return select_best(reports), reports


def select_best(reports: list[AttackReport]) -> AttackReport:
    wins = [r for r in reports if r.success]
    if wins:
        return min(wins, key=lambda r: (r.n_flips, r.round_index))
    return min(reports, key=lambda r: (r.pa, r.round_index))


def flip_profile(report: AttackReport, layers=None) -> dict[int, int]:
    hist = {l: 0 for l in (layers or [])}
    for r in report.records:
        hist[r.layer] = hist.get(r.layer, 0) + 1
    return hist


def summary_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow(row)
    return buf.getvalue()
