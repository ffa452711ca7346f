"""Command line entry point: ``latentmorse <command> [flags]``.

Commands share one output directory; each reads what the previous one wrote:

    gen      train.csv, test.csv
    train    model.json, loss_history.csv
    analyze  valid_cells.txt, map_edges.txt, condensation_edges.txt,
             morse_edges.txt, cell_labels.csv, morse_summary.json
    eval     metrics.csv
    plot     roa.svg
    direct   direct_*.txt / direct_summary.json (no learning)
    ablate   ablation.csv

Exit codes: 0 success, 2 config error, 3 pipeline failure, 4 restart budget
exhausted.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import morse
from .config import Config, ConfigError, load_config, preset
from .dataset import DatasetError, TrajectoryDataset
from .evaluation import ablation_suite, report_csv, report_text, score
from .grid import GridError
from .neural import CheckpointError, load_checkpoint, save_checkpoint, write_history
from .pipeline import (RestartBudgetExhausted, analyze, direct_analysis, fit, generate,
                       training_subset)
from .plot import UnsupportedDimension, render_roa

log = logging.getLogger("latentmorse")

EXIT_OK, EXIT_CONFIG, EXIT_PIPELINE, EXIT_RESTARTS = 0, 2, 3, 4


class PipelineFailure(RuntimeError):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--system", choices=["pendulum", "bistable"],
                        help="preset to start from when no config file is given")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", default="out")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    common.add_argument("--latent-dim", type=int)
    common.add_argument("--grid-k")
    common.add_argument("--lipschitz-mult", type=float)
    common.add_argument("--l4", choices=["on", "off"])
    common.add_argument("--fraction", type=float)
    common.add_argument("--epochs", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="latentmorse", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("gen", "roll out trajectories and write train/test CSV files"),
        ("train", "train the autoencoder (with restarts) and write a checkpoint"),
        ("analyze", "latent Morse graph, retraction and cell labels"),
        ("eval", "precision / recall / F on the test split"),
        ("direct", "Morse graph of the raw system on its own state space"),
        ("plot", "SVG of the latent RoA labels"),
    ]:
        sub.add_parser(name, parents=[common], help=helptext)
    ab = sub.add_parser("ablate", parents=[common], help="rerun the pipeline over one axis")
    ab.add_argument("--axis", choices=["fraction", "lipschitz", "l4", "latent_dim"])
    return parser


def resolve_config(args) -> Config:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = preset(args.system or "pendulum")
    if args.system and args.config and cfg.system.name != args.system:
        raise ConfigError(f"--system {args.system} conflicts with config system {cfg.system.name}")
    overrides = [
        ("run", "seed", args.seed),
        ("run", "workers", args.workers),
        ("train", "latent_dim", args.latent_dim),
        ("grid", "k", args.grid_k),
        ("morse", "lipschitz_mult", args.lipschitz_mult),
        ("train", "l4", args.l4),
        ("train", "fraction", args.fraction),
        ("train", "epochs", args.epochs),
    ]
    for section, key, value in overrides:
        if value is not None:
            cfg.set(section, key, value)
    if getattr(args, "axis", None):
        cfg.eval.axis = args.axis
    cfg.validate()
    return cfg


def effective_config_text(cfg: Config) -> str:
    # worker count never changes results, so it is left out
    lines = [line for line in cfg.to_text().splitlines() if not line.startswith("workers =")]
    return "\n".join(lines) + "\n"


def _load_dataset(path: Path) -> TrajectoryDataset:
    if not path.exists():
        raise PipelineFailure(f"{path} not found; run 'gen' first")
    return TrajectoryDataset.load(path)


def _train_for_analysis(out: Path, cfg: Config) -> TrajectoryDataset:
    return training_subset(_load_dataset(out / "train.csv"), cfg)


def cmd_gen(cfg: Config, out: Path) -> int:
    train, test = generate(cfg)
    train.save(out / "train.csv")
    test.save(out / "test.csv")
    print(f"train: {len(train)} trajectories, {train.n_pairs} pairs, "
          f"success rate {train.success_rate:.3f}")
    print(f"test:  {len(test)} trajectories")
    if len(test) == 0:
        log.warning("test split is empty")
    return EXIT_OK


def cmd_train(cfg: Config, out: Path) -> int:
    train = _load_dataset(out / "train.csv")
    code = EXIT_OK
    try:
        result = fit(train, cfg)
    except RestartBudgetExhausted as exc:
        log.error("%s", exc)
        if exc.last is None:
            return EXIT_RESTARTS
        result, code = exc.last, EXIT_RESTARTS
    save_checkpoint(result.model, out / "model.json")
    write_history(result.history, out / "loss_history.csv")
    restarts = len(result.attempts) - 1
    status = "converged" if code == EXIT_OK else "restart budget exhausted"
    print(f"{status}: seed {result.seed} after {restarts} restart(s); "
          f"attractors {result.analysis.decomposition.n_attractors}")
    return code


def cmd_analyze(cfg: Config, out: Path) -> int:
    model = load_checkpoint(out / "model.json", expected_latent_dim=cfg.train.latent_dim)
    train = _train_for_analysis(out, cfg)
    a = analyze(model, train, cfg)
    d = a.decomposition
    a.grid.write_valid(out / "valid_cells.txt")
    morse.write_edges(out / "map_edges.txt", morse.map_edges(a.mvmap),
                      "F: cell -> cell, -1 = OutOfDomain")
    morse.write_edges(out / "condensation_edges.txt", d.condensation.edges(),
                      "CG(F): component -> component")
    morse.write_edges(out / "morse_edges.txt", d.morse_edges, "MG(F): Morse node -> Morse node")
    info = morse.summary(d, a.bistable)
    info["lipschitz_estimate"] = a.lipschitz_estimate
    if a.bistable is not None:
        morse.write_cell_labels(out / "cell_labels.csv", a.grid, a.bistable.cell_labels)
    else:
        info["error"] = a.error
    (out / "morse_summary.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")
    print(f"Morse graph: {d.n_morse} nodes, minimal {d.minimal}, attractors {d.n_attractors}")
    if a.bistable is None:
        log.error("%s", a.error)
        return EXIT_PIPELINE
    b = a.bistable
    print(f"|G|={len(b.good)} |U|={len(b.unsafe)} |R|={len(b.rest)}  L={a.lipschitz:.4g}")
    return EXIT_OK


def cmd_eval(cfg: Config, out: Path) -> int:
    model = load_checkpoint(out / "model.json", expected_latent_dim=cfg.train.latent_dim)
    labels = out / "cell_labels.csv"
    if not labels.exists():
        raise PipelineFailure(f"{labels} not found; run 'analyze' first")
    classifier = morse.read_cell_labels(labels)
    test = _load_dataset(out / "test.csv")
    m = score(model, classifier, test)
    flag = " (precision undefined: no predicted successes)" if m.precision_undefined else ""
    (out / "metrics.csv").write_text(
        "P,R,F,n_test,true_success,pred_success,hit,precision_undefined\n"
        f"{m.precision:.6f},{m.recall:.6f},{m.f_score:.6f},{m.n},{m.n_true_success},"
        f"{m.n_pred_success},{m.n_hit},{int(m.precision_undefined)}\n")
    print(f"P={m.precision:.3f} R={m.recall:.3f} F={m.f_score:.3f}{flag}")
    return EXIT_OK


def cmd_direct(cfg: Config, out: Path) -> int:
    r = direct_analysis(cfg)
    d = r.decomposition
    morse.write_edges(out / "direct_map_edges.txt", morse.map_edges(r.mvmap),
                      "F: cell -> cell, -1 = OutOfDomain")
    morse.write_edges(out / "direct_morse_edges.txt", d.morse_edges,
                      "MG(F): Morse node -> Morse node")
    roa_cells = np.full(r.grid.n_cells, -1)
    real = r.mvmap.cells >= 0
    roa_cells[r.mvmap.cells[real]] = r.roa[real]
    (out / "direct_roa.csv").write_text(
        "linear_index,attractor\n" + "".join(f"{i},{v}\n" for i, v in enumerate(roa_cells)))
    info = morse.summary(d)
    info["node_cells"] = {a: d.cells_of(a).tolist() for a in range(d.n_morse)}
    (out / "direct_summary.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")
    print(f"cells: {r.grid.n_cells}  Morse nodes: {d.n_morse}  edges: {d.morse_edges}  "
          f"minimal: {d.minimal}")
    return EXIT_OK


def cmd_plot(cfg: Config, out: Path) -> int:
    model = load_checkpoint(out / "model.json", expected_latent_dim=cfg.train.latent_dim)
    classifier = morse.read_cell_labels(out / "cell_labels.csv")
    overlays = []
    train_path = out / "train.csv"
    if train_path.exists():
        train = TrajectoryDataset.load(train_path)
        overlays = [model.encode(t.states) for t in train.trajectories[:20]]
    (out / "roa.svg").write_bytes(render_roa(classifier.grid, classifier.labels, overlays))
    print(f"wrote {out / 'roa.svg'}")
    return EXIT_OK


def cmd_ablate(cfg: Config, out: Path) -> int:
    train = _load_dataset(out / "train.csv")
    test = _load_dataset(out / "test.csv")
    rows = ablation_suite(train, test, cfg, cfg.eval.axis)
    (out / "ablation.csv").write_text(report_csv(rows))
    print(report_text(rows))
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "analyze": cmd_analyze, "eval": cmd_eval,
            "direct": cmd_direct, "plot": cmd_plot, "ablate": cmd_ablate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(effective_config_text(cfg))
    except OSError as exc:
        print(f"cannot write to {out}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PipelineFailure, DatasetError, CheckpointError, GridError, UnsupportedDimension,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
