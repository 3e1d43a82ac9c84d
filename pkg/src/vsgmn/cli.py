"""``vsgmn`` command line: gen-synth, train, eval, gradcheck, sweep.

Exit codes: 0 success, 1 threshold or divergence failure, 2 input/config error.
Set ``VSGMN_LOG`` to error, info or debug for progress logging.
"""

import argparse
import contextlib
import csv
import json
import logging
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .config import build_dataclass, read_config, read_grid, synthetic_config
from .data import generate_synthetic_dataset, load_dataset, write_dataset
from .errors import DimensionError, TrainingDivergenceError, VsgmnError
from .gmn import VARIANTS
from .gradcheck import KERNEL_TOL, MODEL_TOL, ToyModelConfig, kernel_report, model_gradcheck
from .train import (
    ABLATIONS,
    TrainConfig,
    VsgmnModel,
    evaluate,
    grid_cells,
    predict_dataset,
    sort_results,
    train_and_evaluate,
)

log = logging.getLogger("vsgmn")

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2
TRACE_COLUMNS = (("epoch", "epoch"), ("L_ACE", "ace"), ("L_REG", "reg"),
                 ("L_SC", "sc"), ("L_CRC", "crc"), ("total", "total"))
METRIC_COLUMNS = ("acc", "U", "S", "H", "final_loss")


def fmt(x):
    return f"{x:.6g}" if isinstance(x, (float, np.floating)) else str(x)


def version_string():
    """``git describe`` of the source checkout, or the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str = field(default_factory=version_string)
    duration_s: float = 0.0
    outputs: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def write(self, directory):
        path = Path(directory) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _train_config(args):
    cfg = TrainConfig.from_mapping(read_config(getattr(args, "config", None)))
    if getattr(args, "ablation", None):
        cfg = cfg.with_ablation(args.ablation)
    overrides = {}
    for name in ("seed", "variant", "gamma"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return replace(cfg, **overrides).validate()


# -- commands -----------------------------------------------------------------------

def cmd_gen_synth(args):
    start = time.perf_counter()
    cfg = synthetic_config(read_config(args.config))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    ds = generate_synthetic_dataset(cfg)
    out = write_dataset(ds, _out_dir(args.out))
    files = sorted(p.name for p in out.iterdir() if p.name != "manifest.json")
    RunManifest("gen-synth", asdict(cfg), cfg.seed, duration_s=time.perf_counter() - start,
                outputs=files).write(out)
    print(f"wrote {ds.n_samples} samples of {ds.n_classes} classes to {out}")
    return EXIT_OK


def write_trace(path, trace):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([c for c, _ in TRACE_COLUMNS])
        for row in trace:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for _, k in TRACE_COLUMNS[1:]])


def cmd_train(args):
    start = time.perf_counter()
    cfg = _train_config(args)
    ds = load_dataset(args.data)
    out = _out_dir(args.out)
    result, czsl, gzsl = train_and_evaluate(ds, cfg)
    result.model.save(out / "params.npz", extra={"config": asdict(cfg)})
    write_trace(out / "loss_trace.csv", result.trace)
    write_json(out / "metrics.json", {"czsl": czsl.to_dict(), "gzsl": gzsl.to_dict()})
    outputs = ["params.npz", "loss_trace.csv", "metrics.json"]
    RunManifest("train", asdict(cfg), cfg.seed, duration_s=time.perf_counter() - start,
                outputs=outputs, extra={"ablation": args.ablation}).write(out)
    first, last = result.trace[0]["total"], result.trace[-1]["total"]
    print(f"loss {fmt(first)} -> {fmt(last)} over {len(result.trace)} epochs")
    print(f"czsl acc {fmt(czsl.acc_czsl)}  gzsl U {fmt(gzsl.U)} S {fmt(gzsl.S)} H {fmt(gzsl.H)}")
    return EXIT_OK


def cmd_eval(args):
    start = time.perf_counter()
    model, meta = VsgmnModel.load(args.params)
    ds = load_dataset(args.data)
    emb = model.embedding
    if emb.input_dim != ds.feature_dim or emb.output_dim != ds.attr_dim:
        raise DimensionError(
            f"parameters expect F={emb.input_dim}, K={emb.output_dim}; "
            f"dataset has F={ds.feature_dim}, K={ds.attr_dim}"
        )
    gamma = args.gamma if args.gamma is not None else meta.get("config", {}).get("gamma", 1.0)
    preds = predict_dataset(model, ds, args.mode, gamma)
    metrics = evaluate(preds, ds, args.mode)
    out = _out_dir(args.out or Path(args.params).parent / f"eval_{args.mode}")
    write_json(out / "metrics.json", metrics.to_dict())
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["instance_id", "true_class", "predicted_class"])
        for i, y, p in zip(ds.test_instances, ds.labels[ds.test_instances], preds):
            w.writerow([int(i), int(y), int(p)])
    RunManifest("eval", {"mode": args.mode, "gamma": gamma, "params": str(args.params)},
                meta.get("config", {}).get("seed", 0), duration_s=time.perf_counter() - start,
                outputs=["metrics.json", "predictions.csv"]).write(out)
    if args.mode == "czsl":
        print(f"czsl acc {fmt(metrics.acc_czsl)}")
    else:
        print(f"gzsl U {fmt(metrics.U)} S {fmt(metrics.S)} H {fmt(metrics.H)}")
    return EXIT_OK


def cmd_gradcheck(args):
    start = time.perf_counter()
    toy = build_dataclass(ToyModelConfig, read_config(args.config))
    variants = [args.variant] if args.variant else list(VARIANTS)
    fault = ad.inject_fault(args.inject_fault) if args.inject_fault else contextlib.nullcontext()
    failures = []
    with fault:
        kernels = kernel_report(toy.seed)
        for name, err in kernels.items():
            ok = err < KERNEL_TOL
            print(f"kernel {name:<20} {fmt(err):>12}  {'ok' if ok else 'FAIL'}")
            if not ok:
                failures.append(f"kernel {name}")
        for variant in variants:
            groups = model_gradcheck(variant, toy)
            for name, err in groups.items():
                ok = err < MODEL_TOL
                print(f"{variant} {name:<32} {fmt(err):>12}  {'ok' if ok else 'FAIL'}")
                if not ok:
                    failures.append(f"{variant} {name}")
    print(f"gradcheck finished in {fmt(time.perf_counter() - start)} s")
    if failures:
        print("FAIL: " + ", ".join(failures), file=sys.stderr)
        return EXIT_FAIL
    print("PASS")
    return EXIT_OK


def _cell_dir(out, index):
    return Path(out) / f"cell_{index:03d}"


def _sweep_cell(ds, base_cfg, index, overrides, out):
    """Train and evaluate one grid cell; failures become error rows."""
    start = time.perf_counter()
    directory = _out_dir(_cell_dir(out, index))
    row = {"cell": index, **overrides}
    try:
        typed = TrainConfig.from_mapping(overrides)
        cfg = replace(base_cfg, **{k: getattr(typed, k) for k in overrides}).validate()
        row.update({k: getattr(cfg, k) for k in overrides})
        result, czsl, gzsl = train_and_evaluate(ds, cfg)
        row.update(acc=czsl.acc_czsl, U=gzsl.U, S=gzsl.S, H=gzsl.H,
                   final_loss=result.trace[-1]["total"], error="")
        write_json(directory / "metrics.json", {"czsl": czsl.to_dict(), "gzsl": gzsl.to_dict()})
        config, seed = asdict(cfg), cfg.seed
    except (VsgmnError, FloatingPointError) as exc:
        row.update({k: None for k in METRIC_COLUMNS}, error=f"{type(exc).__name__}: {exc}")
        config, seed = {"overrides": overrides}, base_cfg.seed
    RunManifest("sweep-cell", config, seed, duration_s=time.perf_counter() - start,
                outputs=["metrics.json"] if not row["error"] else [],
                extra={"overrides": overrides, "row": row}).write(directory)
    return row


def _completed_row(out, index, overrides):
    path = _cell_dir(out, index) / "manifest.json"
    if not path.is_file():
        return None
    try:
        extra = json.loads(path.read_text(encoding="utf-8")).get("extra", {})
    except json.JSONDecodeError:
        return None
    if extra.get("overrides") != overrides or "row" not in extra:
        return None
    return extra["row"]


def cmd_sweep(args):
    start = time.perf_counter()
    base_cfg = _train_config(args)
    grid = read_grid(args.grid)
    cells = grid_cells(grid)
    ds = load_dataset(args.data)
    out = _out_dir(args.out)

    rows, todo = {}, []
    for i, cell in enumerate(cells):
        done = _completed_row(out, i, cell) if args.resume else None
        if done is not None:
            rows[i] = done
        else:
            todo.append((i, cell))
    log.info("sweep: %d cells, %d to run", len(cells), len(todo))
    if args.jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = {i: pool.submit(_sweep_cell, ds, base_cfg, i, cell, out) for i, cell in todo}
            for i, fut in futures.items():
                rows[i] = fut.result()
    else:
        for i, cell in todo:
            rows[i] = _sweep_cell(ds, base_cfg, i, cell, out)

    ordered = sort_results([rows[i] for i in range(len(cells))])
    columns = ["cell", *grid, *METRIC_COLUMNS, "error"]
    with open(out / "results.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in ordered:
            w.writerow(["" if row.get(c) is None else
                        repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])
    RunManifest("sweep", {"base": asdict(base_cfg), "grid": grid}, base_cfg.seed,
                duration_s=time.perf_counter() - start, outputs=["results.csv"]).write(out)
    failed = sum(1 for r in ordered if r.get("error"))
    print(f"{len(ordered)} cells ({failed} failed); best H {fmt(ordered[0].get('H') or 0.0)}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="vsgmn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic dataset directory")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_synth)

    def training_flags(p):
        p.add_argument("--config")
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--ablation", choices=list(ABLATIONS))
        p.add_argument("--gamma", type=float)

    p = sub.add_parser("train", help="train and evaluate one configuration")
    training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate saved parameters")
    p.add_argument("--params", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("czsl", "gzsl"), required=True)
    p.add_argument("--gamma", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check on a toy model")
    p.add_argument("--config")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--inject-fault", metavar="KERNEL", choices=ad.KERNELS, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="grid search over training settings")
    training_flags(p)
    p.add_argument("--grid", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_sweep)
    return parser


def configure_logging():
    """Route the package logger to stderr at the ``VSGMN_LOG`` level."""
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    level = levels.get(os.environ.get("VSGMN_LOG", "error").lower(), logging.ERROR)
    log.setLevel(level)
    if not log.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        log.addHandler(handler)
    return level


def main(argv=None):
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingDivergenceError as exc:
        print(f"error: training diverged in term {exc.term}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (VsgmnError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
