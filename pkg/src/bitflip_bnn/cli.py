"""Command-line driver: ``train | grow | attack | eval | report``.

Every command writes under ``--out`` together with ``manifest_<command>.json``; the
directory is held by a lock file while the command runs. ``attack`` exits
with 2 when the model was broken and 3 when it held (budget exhausted or
stalled); other commands exit 0 on success and 1 on error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

from . import __version__
from .attack import AttackConfig, deploy, model_weight_bits, run_rounds, summary_csv
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, defaults, parse_config
from .core import accuracy
from .datasets import Dataset, load_cifar_bin, load_idx, mnist_subset, synth_blobs
from .growth import GrowthConfig, early_growth
from .models import build, precision_label
from .training import TrainConfig, train

log = logging.getLogger("bitflip_bnn")

EXIT_OK, EXIT_ERROR, EXIT_BROKEN, EXIT_HELD = 0, 1, 2, 3
METRIC_COLUMNS = ("model", "precision", "CA", "weight_bits_M")


class CliError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    # exit code 2 is reserved for "attack succeeded"
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers


def git_hash(data: bytes) -> str:
    """Content hash in git's blob format."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


@contextmanager
def run_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(f"{out} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def write_manifest(out: Path, command: str, cfg: RunConfig, inputs: dict[str, Path], outputs: list[str],
                   extra: dict | None = None) -> dict:
    ini = cfg.to_ini()
    in_hashes = {k: git_hash(Path(p).read_bytes()) for k, p in sorted(inputs.items())}
    run_id = git_hash(json.dumps([command, ini, in_hashes], sort_keys=True).encode())[:12]
    manifest = {
        "run_id": run_id,
        "command": command,
        "version": __version__,
        "config": ini,
        "seeds": {"seed": cfg.get("train", "seed")},
        "inputs": in_hashes,
        "outputs": {name: git_hash((out / name).read_bytes()) for name in sorted(outputs)},
    }
    if extra:
        manifest.update(extra)
    (out / f"manifest_{command}.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset, list[Path]]:
    d = cfg["data"]
    root = Path(d["root"]) if d["root"] else None
    kind = d["dataset"]
    if kind == "mnist5k":
        tr, te = mnist_subset(root)
        files = sorted((root or Path(tr.meta["source"]).parent).glob("*-ubyte.gz"))
    elif kind == "idx":
        if root is None:
            raise CliError("data.root is required for dataset = idx")
        names = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte",
                 "t10k-labels-idx1-ubyte"]
        files = [next((root / (n + s) for s in ("", ".gz") if (root / (n + s)).exists()), root / n) for n in names]
        tr = load_idx(files[0], files[1], split="train")
        te = load_idx(files[2], files[3], split="test")
    elif kind == "cifar":
        if root is None:
            raise CliError("data.root is required for dataset = cifar")
        files = [root / "data_batch_1.bin", root / "test_batch.bin"]
        tr, te = load_cifar_bin(files[0]), load_cifar_bin(files[1], split="test")
    else:
        n = d["blobs_n"]
        full = synth_blobs(2 * n, d["blobs_classes"], d["blobs_dim"], cfg.get("train", "seed"),
                           d["blobs_separation"])
        tr = Dataset(full.images[:n], full.labels[:n], full.num_classes, "train", full.meta)
        te = Dataset(full.images[n:], full.labels[n:], full.num_classes, "test", full.meta)
        files = []
    if d["train_size"]:
        tr = tr.subset(d["train_size"])
    if d["test_size"]:
        te = te.subset(d["test_size"])
    return tr, te, files


def train_config(cfg: RunConfig, epochs: int | None = None) -> TrainConfig:
    t, b = cfg["train"], cfg["binarize"]
    return TrainConfig(epochs=t["epochs"] if epochs is None else epochs, lr=cfg.lr, momentum=t["momentum"],
                       batch_size=t["batch_size"], weight_decay=t["weight_decay"], lr_schedule=t["lr_schedule"],
                       schedule_unit=b["schedule_unit"], schedule_total=b["schedule_total"], seed=t["seed"],
                       dtype=t["dtype"])


def growth_config(cfg: RunConfig) -> GrowthConfig:
    g = cfg["growth"]
    return GrowthConfig(max_multiplier=g["max_multiplier"], theta=g["theta"], window=g["window"],
                        temperature=g["temperature"], beta_rho=g["beta_rho"], beta_max=g["beta_max"],
                        max_epochs=g["max_epochs"], mask_lr=g["mask_lr"], form=g["form"],
                        seed=cfg.get("train", "seed"))


def attack_config(cfg: RunConfig) -> AttackConfig:
    a = cfg["attack"]
    target = a["target_class"] if a["mode"] == "targeted" else None
    if a["mode"] == "targeted" and target < 0:
        raise CliError("targeted mode needs --target-class")
    return AttackConfig(mode=a["mode"], target_class=target, budget=a["budget"],
                        candidates_per_layer=a["candidates_per_layer"], rounds=a["rounds"],
                        attack_batch=a["attack_batch"], seed=cfg.get("train", "seed"), eval_every=a["eval_every"],
                        eval_dense_until=a["eval_dense_until"])


def model_name(cfg: RunConfig, grown: bool = False) -> str:
    m = cfg["model"]
    return f"{'ra-' if grown else ''}{m['arch']}-w{m['width']}"


def input_shape(ds: Dataset) -> tuple[int, ...]:
    return tuple(ds.images.shape[1:])


def metrics_row(name: str, net, te: Dataset) -> dict:
    ca = accuracy(net, te.images, te.labels)
    return {"model": name, "precision": precision_label(net.graph), "CA": f"{ca:.2f}",
            "weight_bits_M": f"{model_weight_bits(net) / 1e6:.6f}"}


def write_csv(path: Path, columns, rows) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    path.write_text(buf.getvalue())


def _prepare(net, cfg: RunConfig):
    net.binary_weight_scale = cfg.get("binarize", "weight_scale")
    return deploy(net, binary_scale=cfg.get("binarize", "weight_scale"))


# ---------------------------------------------------------------- commands


def cmd_train(cfg: RunConfig, out: Path, args) -> int:
    tr, te, files = load_data(cfg)
    m = cfg["model"]
    net = build(m["arch"], m["precision"], m["width"], m["n_bits"], input_shape(tr), tr.num_classes,
                seed=cfg.get("train", "seed"), first_last_weights=cfg.get("binarize", "first_last_weights"))
    train(net, tr.images, tr.labels, train_config(cfg))
    _prepare(net, cfg)
    name = model_name(cfg)
    save_checkpoint(net, out / "model.ckpt", cfg.get("train", "seed"), extra={"model": name})
    write_csv(out / "metrics.csv", METRIC_COLUMNS, [metrics_row(name, net, te)])
    write_manifest(out, "train", cfg, {f"data:{p.name}": p for p in files}, ["model.ckpt", "metrics.csv"])
    return EXIT_OK


def cmd_grow(cfg: RunConfig, out: Path, args) -> int:
    tr, te, files = load_data(cfg)
    inputs = {f"data:{p.name}": p for p in files}
    if args.checkpoint:
        base, _ = load_checkpoint(args.checkpoint)
        base.qweights = {}
        inputs["base"] = Path(args.checkpoint)
    else:
        m = cfg["model"]
        base = build(m["arch"], "bnn", m["width"], m["n_bits"], input_shape(tr), tr.num_classes,
                     seed=cfg.get("train", "seed"), first_last_weights=cfg.get("binarize", "first_last_weights"))
    gcfg = growth_config(cfg)
    s2 = cfg.get("growth", "stage2_epochs") or cfg.get("train", "epochs")
    res = early_growth(base, tr.images, tr.labels, gcfg, train_config(cfg), train_config(cfg, s2))
    net = _prepare(res.model, cfg)
    name = model_name(cfg, grown=True)
    st = res.state
    growth = {"capacity": {str(k): v for k, v in st.capacity.items()}, "history": [
        {str(k): v for k, v in h.items()} for h in st.history], "events": [list(e) for e in st.events],
              "converged": st.converged, "epochs": st.epochs}
    save_checkpoint(net, out / "model.ckpt", cfg.get("train", "seed"), growth=growth, extra={"model": name})
    write_csv(out / "growth_log.csv", ("checkpoint", "layer_id", "active_channels", "capacity"),
              [dict(zip(("checkpoint", "layer_id", "active_channels", "capacity"), r)) for r in st.log_rows()])
    write_csv(out / "metrics.csv", METRIC_COLUMNS, [metrics_row(name, net, te)])
    write_manifest(out, "grow", cfg, inputs, ["model.ckpt", "growth_log.csv", "metrics.csv"],
                   {"growth": {"converged": st.converged, "stage1_epochs": st.epochs, "events": len(st.events)}})
    log.info("growth %s after %d epochs; widths %s", "converged" if st.converged else "capped", st.epochs,
             res.widths)
    return EXIT_OK


def _checkpoint_path(args, out: Path) -> Path:
    p = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"
    if not p.exists():
        raise CliError(f"checkpoint {p} not found (pass --checkpoint)")
    return p


def cmd_eval(cfg: RunConfig, out: Path, args) -> int:
    ck = _checkpoint_path(args, out)
    net, header = load_checkpoint(ck)
    _, te, files = load_data(cfg)
    name = header["extra"].get("model", model_name(cfg))
    write_csv(out / "eval.csv", METRIC_COLUMNS, [metrics_row(name, net, te)])
    write_manifest(out, "eval", cfg, {"checkpoint": ck, **{f"data:{p.name}": p for p in files}}, ["eval.csv"])
    return EXIT_OK


def cmd_attack(cfg: RunConfig, out: Path, args) -> int:
    ck = _checkpoint_path(args, out)
    net, header = load_checkpoint(ck)
    _, te, files = load_data(cfg)
    acfg = attack_config(cfg)
    if acfg.mode == "targeted" and not 0 <= acfg.target_class < net.graph.num_classes:
        raise CliError(f"target class {acfg.target_class} outside 0..{net.graph.num_classes - 1}")
    if not net.qweights:
        _prepare(net, cfg)
    best, reports = run_rounds(net, acfg, te.images, te.labels)
    name = header["extra"].get("model", model_name(cfg))
    label = precision_label(net.graph)
    outputs = []
    for r in reports:
        fn = f"round_{r.round_index}.json"
        (out / fn).write_text(r.to_json() + "\n")
        outputs.append(fn)
    (out / "report.json").write_text(best.to_json() + "\n")
    (out / "summary.csv").write_text(summary_csv([best.summary_row(name, label)]))
    write_csv(out / "histogram.csv", ("model", "precision", "layer", "flips"),
              [{"model": name, "precision": label, "layer": l, "flips": n} for l, n in sorted(best.histogram.items())])
    outputs += ["report.json", "summary.csv", "histogram.csv"]
    write_manifest(out, "attack", cfg, {"checkpoint": ck, **{f"data:{p.name}": p for p in files}}, outputs,
                   {"best_round": best.round_index, "status": best.status})
    log.info("%s: CA %.2f PA %.2f after %d flips (%s)", name, best.ca, best.pa, best.n_flips, best.status)
    return EXIT_BROKEN if best.success else EXIT_HELD


def cmd_report(cfg: RunConfig, out: Path, args) -> int:
    from .report import build_report

    run_dir = Path(args.run_dir) if args.run_dir else out
    dest = out / "report" if args.run_dir is None else out
    outputs = build_report(run_dir, dest)
    rel = [str(p.relative_to(out)) for p in outputs]
    write_manifest(out, "report", cfg, {}, rel, {"run_dir": str(run_dir)})
    return EXIT_OK


COMMANDS = {"train": cmd_train, "grow": cmd_grow, "attack": cmd_attack, "eval": cmd_eval, "report": cmd_report}


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bitflip-bnn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="run config file (INI); defaults apply when omitted")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="runs/latest", help="output directory (default runs/latest)")
    p.add_argument("--mode", choices=("untargeted", "targeted"))
    p.add_argument("--target-class", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--checkpoint", help="model checkpoint (attack/eval input, grow base)")
    p.add_argument("--run-dir", help="report: directory of runs to aggregate (default --out)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def resolve_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else defaults()
    for key, (sec, name) in {"seed": ("train", "seed"), "mode": ("attack", "mode"),
                             "target_class": ("attack", "target_class"), "budget": ("attack", "budget"),
                             "rounds": ("attack", "rounds")}.items():
        v = getattr(args, key)
        if v is not None:
            cfg.set(sec, name, v)
    if args.target_class is not None and args.mode is None:
        cfg.set("attack", "mode", "targeted")
    if cfg.get("attack", "budget") < 0 or cfg.get("attack", "rounds") < 1:
        raise ConfigError("budget must be >= 0 and rounds >= 1")
    return cfg


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    out = Path(args.out)
    try:
        cfg = resolve_config(args)
        with run_lock(out):
            return COMMANDS[args.command](cfg, out, args)
    except (CliError, ConfigError, CheckpointError, ValueError, OSError) as exc:
        print(f"bitflip-bnn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
