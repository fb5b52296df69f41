"""Command-line entry point: ``isgib <verb> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import tomli
import torch

from .graph import (
    DatasetError, Graph, MissingFileError, load_dataset, load_planetoid_raw, make_shift_benchmark,
    save_dataset,
)
from .metrics import format_pm
from .report import (
    MissingCheckpointError, SWEEP_GRID, ablation, export_heatmaps, noise_sweep,
    write_results_csv, write_rows_csv,
)
from .synthetic import citation_like_graph
from .trainer import FAMILIES, RunConfig, evaluate, load_checkpoint, train, train_erm

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_BAD_CONFIG = 3
EXIT_MISSING_DATA = 4
EXIT_MISSING_CHECKPOINT = 5

VERBS = ("prepare", "train", "eval", "ablate", "sweep", "heatmap")
SYNTHETIC = "synthetic"

log = logging.getLogger("isgib")


class ConfigError(ValueError):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run config ([run] table)")
    common.add_argument("--family", choices=FAMILIES, default=SYNTHETIC,
                        help="built-in defaults used when --config is absent")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--dataset", help="dataset directory, raw cora directory, or 'synthetic'")
    common.add_argument("--gammas", help="three comma-separated weights, e.g. 0.5,0.1,0.5")
    common.add_argument("--metric", choices=("dot", "cosine", "p_l1", "p_l2", "cmd", "mmd"))
    common.add_argument("--backbone", choices=("sage", "gcn", "gin"))
    common.add_argument("--ib-sign", choices=("paper", "flipped"))
    common.add_argument("--epochs", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="isgib", description=__doc__)
    sub = p.add_subparsers(dest="verb", metavar="{" + ",".join(VERBS) + "}")
    sub.required = True

    prep = sub.add_parser("prepare", parents=[common], help="build a shifted benchmark on disk")
    prep.add_argument("--mu", type=float, default=0.0)
    prep.add_argument("--sigma", type=float, default=1.0)
    prep.add_argument("--train-noise", help="mu,sigma noise for training copies (default clean)")

    tr = sub.add_parser("train", parents=[common], help="train one model")
    tr.add_argument("--method", choices=("isgib", "erm"), default="isgib")

    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", help="checkpoint directory (default OUT/checkpoint)")

    ab = sub.add_parser("ablate", parents=[common], help="run the four-rung gamma ladder")
    ab.add_argument("--seeds", type=int, default=5)

    sw = sub.add_parser("sweep", parents=[common], help="sweep validation/test noise (mu, sigma)")
    sw.add_argument("--seeds", type=int, default=5)
    sw.add_argument("--grid", help="semicolon-separated mu/sigma pairs, e.g. '0/1;1/2'")
    sw.add_argument("--with-erm", action="store_true", help="also sweep the ERM baseline")

    hm = sub.add_parser("heatmap", parents=[common], help="export relation heat maps")
    hm.add_argument("--checkpoint", help="checkpoint directory (default OUT/checkpoint)")
    hm.add_argument("--png", action="store_true", help="also render PNGs (needs matplotlib)")
    hm.add_argument("--batch", type=int, default=128)
    return p


# ---------------------------------------------------------------------------
# argument plumbing


def _floats(text: str, n: int | None, what: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"{what}: expected comma-separated numbers, got {text!r}") from exc
    if n is not None and len(vals) != n:
        raise ConfigError(f"{what}: expected {n} values, got {len(vals)}")
    return vals


def _config(args) -> RunConfig:
    overrides = {}
    if args.gammas:
        overrides["gammas"] = _floats(args.gammas, 3, "--gammas")
    for key in ("seed", "metric", "backbone", "ib_sign", "epochs"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    if args.dataset and args.dataset != SYNTHETIC:
        overrides["dataset"] = str(args.dataset)
    try:
        if args.config:
            base = RunConfig.from_toml(args.config)
            return replace(base, **overrides) if overrides else base
        return RunConfig.from_family(args.family, **overrides)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {args.config}") from exc
    except (tomli.TOMLDecodeError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed config: {exc}") from exc


def _base_graph(source: str | None, seed: int) -> Graph:
    """A single clean graph: the synthetic generator, raw cora files, or a one-graph dataset."""
    if source in (None, SYNTHETIC):
        return citation_like_graph(seed=seed)
    path = Path(source)
    if (path / "cora.content").is_file():
        return load_planetoid_raw(path)
    data = load_dataset(path)
    graphs = data.all_graphs()
    if len(graphs) != 1:
        raise DatasetError(f"{path} holds {len(graphs)} graphs; a single base graph is needed")
    return graphs[0]


def _dataset(args, config: RunConfig):
    if not config.dataset:
        raise MissingFileError("no dataset given; pass --dataset DIR (see 'isgib prepare')")
    return load_dataset(config.dataset, None if config.task == "node" else config.task)


def _checkpoint(args, out: Path) -> Path:
    return Path(args.checkpoint) if args.checkpoint else out / "checkpoint"


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# verbs


def cmd_prepare(args, out: Path) -> int:
    seed = 0 if args.seed is None else args.seed
    graph = _base_graph(args.dataset, seed)
    train_noise = _floats(args.train_noise, 2, "--train-noise") if args.train_noise else None
    split = make_shift_benchmark(graph, seed, mu=args.mu, sigma=args.sigma, train_noise=train_noise)
    save_dataset(split, out)
    print(f"wrote {len(split.all_graphs())} graphs to {out}")
    return EXIT_OK


def cmd_train(args, out: Path) -> int:
    config = _config(args)
    data = _dataset(args, config)
    out.mkdir(parents=True, exist_ok=True)
    config.to_toml(out / "config.toml")
    fn = train_erm if args.method == "erm" else train
    res = fn(config, data, checkpoint_dir=out / "checkpoint", log_path=out / "log.csv")
    write_results_csv(out / "results.csv", [res], [args.method])
    print(f"best val {res.best_val_metric:.4f} (epoch {res.epoch_of_best}); "
          f"test {config.eval_metric} {res.test_metric:.4f}")
    return EXIT_OK


def cmd_eval(args, out: Path) -> int:
    ck = _checkpoint(args, out)
    try:
        model, config, manifest = load_checkpoint(ck)
    except FileNotFoundError as exc:
        raise MissingCheckpointError(str(exc)) from exc
    if args.dataset and args.dataset != SYNTHETIC:
        config = replace(config, dataset=args.dataset)
    data = _dataset(args, config)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, graphs in (("train", data.train_graphs), ("val", data.val_graphs),
                         ("test", data.test_graphs)):
        if graphs:
            v = evaluate(model, graphs, data.task, config.eval_metric, config.torch_dtype)
            rows.append({"split": name, "metric": config.eval_metric, "value": v})
            print(f"{name:5s} {config.eval_metric} {v:.4f}")
    write_rows_csv(out / "eval.csv", rows, f"; checkpoint epoch {manifest['epoch']}")
    return EXIT_OK


def cmd_ablate(args, out: Path) -> int:
    config = _config(args)
    data = _dataset(args, config)
    out.mkdir(parents=True, exist_ok=True)
    config.to_toml(out / "config.toml")
    seeds = range(config.seed, config.seed + args.seeds)
    rows, results = ablation(config, data, seeds)
    methods = [r_method for row in rows for r_method in [row["method"]] * args.seeds]
    write_results_csv(out / "results.csv", results, methods)
    write_rows_csv(out / "ablation.csv", rows)
    for row, res in zip(rows, [results[k:k + args.seeds] for k in range(0, len(results), args.seeds)]):
        ok = [r.test_metric for r in res if r.ok]
        print(f"gammas={row['gammas']}: {format_pm(ok) if ok else 'failed'}")
    return EXIT_OK


def _grid(text: str | None):
    if not text:
        return SWEEP_GRID
    try:
        return tuple(tuple(float(v) for v in pair.split("/")) for pair in text.split(";"))
    except ValueError as exc:
        raise ConfigError(f"--grid: expected 'mu/sigma;mu/sigma', got {text!r}") from exc


def cmd_sweep(args, out: Path) -> int:
    config = _config(args)
    graph = _base_graph(args.dataset, config.seed)
    out.mkdir(parents=True, exist_ok=True)
    config.to_toml(out / "config.toml")
    methods = ("isgib", "erm") if args.with_erm else ("isgib",)
    seeds = range(config.seed, config.seed + args.seeds)
    rows, results = noise_sweep(config, graph, _grid(args.grid), seeds, methods=methods,
                                benchmark_seed=config.seed)
    labels = [row["method"] for row in rows for _ in seeds]
    write_results_csv(out / "results.csv", results, labels)
    write_rows_csv(out / "sweep.csv", rows, "; train copies carry N(0, 1) noise")
    for row in rows:
        print(f"{row['method']:5s} mu={row['mu']:g} sigma={row['sigma']:g}: "
              f"{100 * row['mean']:.2f} ± {100 * row['std']:.2f}")
    return EXIT_OK


def cmd_heatmap(args, out: Path) -> int:
    ck = _checkpoint(args, out)
    try:
        _, config, _ = load_checkpoint(ck)
    except FileNotFoundError as exc:
        raise MissingCheckpointError(str(exc)) from exc
    if args.dataset and args.dataset != SYNTHETIC:
        config = replace(config, dataset=args.dataset)
    data = _dataset(args, config)
    graph = (data.test_graphs or data.train_graphs)[0]
    info = export_heatmaps(ck, graph, out, b=args.batch, seed=config.seed, png=args.png)
    _write_json(out / "alignment.json", {"alignment": info["alignment"], "graph": graph.name})
    print(f"alignment ||norm(R_H) - norm(R_Y)||_F = {info['alignment']:.6f}")
    return EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "sweep": cmd_sweep, "heatmap": cmd_heatmap}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("ISGIB_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        return COMMANDS[args.verb](args, Path(args.out))
    except ConfigError as exc:
        print(f"isgib: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except MissingCheckpointError as exc:
        print(f"isgib: missing checkpoint: {exc}", file=sys.stderr)
        return EXIT_MISSING_CHECKPOINT
    except (MissingFileError, DatasetError) as exc:
        print(f"isgib: dataset error: {exc}", file=sys.stderr)
        return EXIT_MISSING_DATA
    except Exception as exc:  # noqa: BLE001 - reported as a diagnostic
        print(f"isgib: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
