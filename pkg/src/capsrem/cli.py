"""``capsrem`` command line.

Exit codes: 0 success, 1 failed check, 2 configuration error, 3 data error,
4 checkpoint error.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint as ckpt_io
from . import rem
from .capsnet import CapsNetConfig, CapsNetModel
from .config import RunConfig
from .data import Dataset, load_bundled_mnist, load_idx, synth_shapes
from .errors import CheckpointError, ConfigError, DataError
from .training import evaluate, grad_check, train

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 1, 2, 3, 4
METRIC_COLUMNS = ("epoch", "r", "train_loss", "val_loss", "val_acc", "sparsity", "wall_seconds")

log = logging.getLogger("capsrem")


def micro_model_config(r: int = 3, num_classes: int = 3) -> CapsNetConfig:
    """8x8 single-channel input, 2x2 primary grid, D1 = D2 = 2."""
    return CapsNetConfig(image_height=8, image_width=8, conv1_channels=4, conv1_kernel=3,
                         primary_kernel=3, primary_stride=2, num_types=1, primary_dim=2, class_dim=2,
                         num_classes=num_classes, routing_iterations=r)


def _format(value) -> str:
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def write_metrics(path, history) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(METRIC_COLUMNS) + "\n")
        for row in history:
            fh.write(",".join(_format(row[c]) for c in METRIC_COLUMNS) + "\n")


# -- data selection for analysis verbs ----------------------------------------

def resolve_data(spec: str, ckpt) -> Dataset:
    """Dataset named by ``--data``.

    ``test``/``val``/``train`` rebuild that split from the run configuration
    stored in the checkpoint; ``mnist[:d,d,...]``, ``synth:N[:classes[:seed]]``
    and ``idx:IMAGES,LABELS`` name a source directly.
    """
    if spec in ("test", "val", "train"):
        stored = ckpt.extra.get("run_config")
        if stored is None:
            raise DataError("checkpoint carries no run configuration; pass --data explicitly")
        train_ds, val_ds, test_ds = RunConfig(_from_json(stored)).load_data()
        return {"train": train_ds, "val": val_ds, "test": test_ds}[spec]
    kind, _, rest = spec.partition(":")
    if kind == "mnist":
        return load_bundled_mnist([int(c) for c in rest.split(",")] if rest else None)
    if kind == "synth":
        parts = [int(p) for p in rest.split(":") if p] if rest else []
        n, classes, seed = (parts + [100, 2, 0][len(parts):])[:3]
        size = ckpt.model_config.get("image_height", 28)
        return synth_shapes(n, classes, size, seed)
    if kind == "idx":
        paths = rest.split(",")
        if len(paths) != 2:
            raise ConfigError(f"--data idx needs IMAGES,LABELS, got {rest!r}")
        return load_idx(*paths, num_classes=ckpt.model_config["num_classes"])
    raise ConfigError(f"unrecognised --data {spec!r}")


def _from_json(stored: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in stored.items()}


def _load_model(path, r=None):
    ckpt = ckpt_io.load(path)
    model = ckpt_io.model_from_checkpoint(ckpt)
    return ckpt, model, (ckpt.r if r is None else r)


def _check_index(dataset: Dataset, index: int) -> None:
    if not 0 <= index < len(dataset):
        raise DataError(f"image index {index} outside [0, {len(dataset)})")


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- verbs ---------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    for item in args.set or []:
        key, _, value = item.partition("=")
        cfg.set(key.strip(), value.strip())
    if args.out:
        cfg.set("output.dir", args.out)
    tcfg = cfg.train_config()
    train_ds, val_ds, test_ds = cfg.load_data()
    mcfg = cfg.model_config(train_ds)
    out = _out_dir(cfg["output.dir"])
    cfg.save(out / "config.resolved")
    result = train(tcfg, (train_ds, val_ds), model_config=mcfg)
    best = result.best
    best.extra["run_config"] = cfg.to_dict()
    best.extra["r_star"] = result.r_star
    best.extra["events"] = result.events
    ckpt_io.save(best, out / "model.ckpt")
    write_metrics(out / "metrics.csv", result.history)
    test = evaluate(result.model, test_ds, result.r_star, tcfg.loss, tcfg.eval_batch_size)
    print(f"best epoch {best.epoch} r={result.r_star} val_loss={best.best_val_loss:.6f} "
          f"test_acc={test.accuracy:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt, model, r = _load_model(args.ckpt, args.r)
    data = resolve_data(args.data, ckpt)
    res = evaluate(model, data, r)
    print(f"r={r} samples={len(data)} accuracy={res.accuracy:.6f} loss={res.loss:.6f}")
    for j, acc in enumerate(res.per_class_accuracy):
        print(f"class {j}: {'n/a' if np.isnan(acc) else f'{acc:.6f}'}")
    return EXIT_OK


def cmd_rem(args) -> int:
    if args.K < 2:
        raise ConfigError(f"--K must be >= 2, got {args.K}")
    if args.label_source not in rem.LABEL_SOURCES:
        raise ConfigError(f"--label-source must be predicted or true, got {args.label_source!r}")
    ckpt, model, r = _load_model(args.ckpt, args.r)
    data = resolve_data(args.data, ckpt)
    dump = rem.collect_couplings(model, data, r)
    labels = dump.predictions if args.label_source == "predicted" else dump.labels
    dictionary = rem.dictionary_from_couplings(dump.couplings, labels, model.config.num_classes, args.K)
    report = rem.entropy_report(dictionary, args.K, rem.sparsity(model))
    out = _out_dir(args.out)
    rem.write_entropy_csv(out / "entropy.csv", report)
    rem.write_coupling_csv(out / "couplings.csv", dump.couplings)
    print(f"mean_entropy_bits={report.mean:.6f} K={args.K} sparsity={report.sparsity:.6f}")
    return EXIT_OK


def cmd_dump_couplings(args) -> int:
    ckpt, model, r = _load_model(args.ckpt, args.r)
    data = resolve_data(args.data, ckpt)
    dump = rem.collect_couplings(model, data, r)
    rem.write_coupling_csv(args.out, dump.couplings)
    print(f"wrote {dump.couplings.size} couplings to {args.out}")
    return EXIT_OK


def cmd_saliency(args) -> int:
    ckpt, model, r = _load_model(args.ckpt, args.r)
    data = resolve_data(args.data, ckpt)
    _check_index(data, args.index)
    smap = rem.saliency_map(model, data.images[args.index], args.K, r)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rem.write_pgm(out, smap.grid, binary=args.binary)
    rem.write_pgm(out.with_name(out.stem + "_input" + out.suffix), smap.upsampled, binary=args.binary)
    print(f"predicted class {smap.predicted}; grid {smap.grid.shape[0]}x{smap.grid.shape[1]}")
    return EXIT_OK


def cmd_parsetree(args) -> int:
    ckpt, model, r = _load_model(args.ckpt, args.r)
    data = resolve_data(args.data, ckpt)
    _check_index(data, args.index)
    graph = rem.parse_tree_graph(model, data.images[args.index], args.threshold, args.K, r)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(graph.to_dot())
    print(f"predicted class {graph.predicted}; {len(graph.edges)} edges")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.ckpt:
        ckpt, model, r = _load_model(args.ckpt, args.r)
        rng = np.random.default_rng(args.seed)
        c = model.config
        x = rng.random((args.batch, c.in_channels, c.image_height, c.image_width))
    else:
        r = 3 if args.r is None else args.r
        model = CapsNetModel(micro_model_config(r), seed=args.seed, dtype=np.float64)
        # larger transformation weights keep the couplings away from uniform
        model.params["caps.W"].data *= 50
        rng = np.random.default_rng(args.seed)
        x = rng.random((args.batch, 1, 8, 8))
    labels = rng.integers(0, model.config.num_classes, size=args.batch)
    report = grad_check(model, x, labels, r=r, samples_per_tensor=args.samples, seed=args.seed)
    for name, err in report.per_tensor.items():
        print(f"{name}: {err:.3e}")
    ok = report.finite and report.max_rel_error < args.tol
    print(f"max_rel_error={report.max_rel_error:.3e} checked={report.checked} r={r} "
          f"{'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="capsrem", description="Capsule network training and routing analysis")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="verb", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("config")
    t.add_argument("--out", help="override output.dir")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(func=cmd_train)

    def analysis(name, func, help_text):
        a = sub.add_parser(name, help=help_text)
        a.add_argument("ckpt")
        a.add_argument("--data", default="test", help="test|val|train, mnist[:digits], synth:N[:J[:seed]], "
                                                      "idx:IMAGES,LABELS")
        a.add_argument("--r", type=int, default=None, help="routing iterations (default: checkpoint r)")
        a.set_defaults(func=func)
        return a

    analysis("eval", cmd_eval, "accuracy report")
    a = analysis("rem", cmd_rem, "parse-tree entropy report and coupling dump")
    a.add_argument("--K", type=int, default=rem.DEFAULT_LEVELS)
    a.add_argument("--label-source", default="predicted")
    a.add_argument("--out", default="rem")
    a = analysis("dump-couplings", cmd_dump_couplings, "write final couplings as CSV")
    a.add_argument("--out", default="couplings.csv")
    a = analysis("saliency", cmd_saliency, "saliency map as PGM")
    a.add_argument("--index", type=int, default=0)
    a.add_argument("--K", type=int, default=rem.DEFAULT_LEVELS)
    a.add_argument("--binary", action="store_true", help="write P5 instead of P2")
    a.add_argument("--out", default="saliency.pgm")
    a = analysis("parsetree", cmd_parsetree, "parse tree of one image as DOT")
    a.add_argument("--index", type=int, default=0)
    a.add_argument("--threshold", type=float, default=0.1)
    a.add_argument("--K", type=int, default=rem.DEFAULT_LEVELS)
    a.add_argument("--out", default="parsetree.dot")

    g = sub.add_parser("gradcheck", help="compare backprop with finite differences")
    g.add_argument("ckpt", nargs="?", help="checkpoint to check (default: built-in micro model)")
    g.add_argument("--r", type=int, default=None)
    g.add_argument("--batch", type=int, default=4)
    g.add_argument("--samples", type=int, default=200, help="entries checked per tensor")
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def _thread_limit():
    value = os.environ.get("CAPS_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"CAPS_THREADS must be a positive integer, got {value!r}") from None
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
