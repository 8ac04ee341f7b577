"""Command-line entry point ``mhc``.

Values resolve as flags > config file > command defaults > dataclass defaults.
Exit codes: 0 success, 1 invalid configuration, 2 dataset problem,
3 every seed diverged.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import analysis, plots
from .gnn import MODES, ConfigError, ModelConfig
from .graphs import (DatasetError, DisconnectedGraphError, Graph, graph_from_spec, homophily,
                     load_dataset, resolve_dataset_path, wl_distinguishes)
from .train import SuiteRow, TrainConfig, run_suite, write_csv

log = logging.getLogger("mhc")

EXIT_OK, EXIT_CONFIG, EXIT_DATASET, EXIT_DIVERGED = 0, 1, 2, 3
DEFAULT_DEPTHS = (2, 4, 8, 16, 32, 64, 128)
ABLATION_MODES = ("full", "dynamic_only", "static_only", "no_sinkhorn")


class DivergedError(RuntimeError):
    pass


# --------------------------------------------------------------------------- experiment config


@dataclass
class ExperimentConfig:
    dataset: str | None = None
    graph: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    analysis: dict = field(default_factory=dict)
    output_dir: str = "results"
    graph_seed: int = 0
    jobs: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        d = dict(d)
        try:
            if "model" in d:
                d["model"] = ModelConfig.from_dict(d["model"])
            if "train" in d:
                d["train"] = TrainConfig.from_dict(d["train"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if not isinstance(d.get("analysis", {}), dict):
            raise ConfigError("analysis must be an object")
        return cls(**d)


def read_json(path: str | Path) -> dict:
    """Parse a JSON object; syntax errors report line and column."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return doc


def _merge(base: dict, over: Mapping) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


MODEL_FLAGS = {"backbone": "backbone", "layers": "layers", "streams": "streams", "hidden": "hidden",
               "dropout": "dropout", "mode": "mode", "gat_heads": "gat_heads",
               "alpha_init": "alpha_init", "post_init": "post_init",
               "baseline_residual": "baseline_residual"}
TRAIN_FLAGS = {"lr": "lr", "weight_decay": "weight_decay", "epochs": "max_epochs",
               "patience": "patience", "seeds": "seeds", "split": "split", "clip": "clip"}


def flag_overrides(args: argparse.Namespace) -> dict:
    """The explicitly given flags as a partial experiment document."""
    doc: dict = {"model": {}, "train": {}}
    for flag, key in MODEL_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            doc["model"][key] = v
    sk = {}
    if getattr(args, "sinkhorn_T", None) is not None:
        sk["T"] = args.sinkhorn_T
    if getattr(args, "sinkhorn_tau", None) is not None:
        sk["tau"] = args.sinkhorn_tau
    if getattr(args, "sinkhorn_stopgrad", None):
        sk["stopgrad"] = True
    if sk:
        doc["model"]["sinkhorn"] = sk
    for flag, key in TRAIN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            doc["train"][key] = v
    if getattr(args, "seed", None) is not None:
        doc["train"]["seeds"] = [args.seed]
    for key in ("dataset", "graph", "jobs", "graph_seed"):
        v = getattr(args, key, None)
        if v is not None:
            doc[key] = v
    if getattr(args, "out", None) is not None:
        doc["output_dir"] = args.out
    return doc


def resolve_config(args: argparse.Namespace, command_defaults: Mapping | None = None) -> ExperimentConfig:
    doc: dict = {}
    if command_defaults:
        doc = _merge(doc, command_defaults)
    if getattr(args, "config", None):
        doc = _merge(doc, read_json(args.config))
    doc = _merge(doc, flag_overrides(args))
    model = doc.get("model", {})
    if model.get("mode") == "baseline" and "streams" not in model:
        model["streams"] = 1
    return ExperimentConfig.from_dict(doc)


def load_graph(cfg: ExperimentConfig) -> Graph:
    if cfg.dataset and cfg.graph:
        raise ConfigError("give either a dataset or a graph generator, not both")
    if cfg.dataset:
        return load_dataset(resolve_dataset_path(cfg.dataset))
    if cfg.graph:
        try:
            return graph_from_spec(cfg.graph, cfg.graph_seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    raise ConfigError("no dataset or graph given (--dataset PATH or --graph SPEC)")


def _meta(cfg: ExperimentConfig, command: str, **extra) -> dict:
    return {"command": command, "config": cfg.to_dict(), **extra}


def _print_rows(rows: Sequence[SuiteRow], title: str = ""):
    if title:
        print(title)
    width = max([len(r.config) for r in rows] + [6])
    for r in rows:
        p = "" if not np.isfinite(r.p_value) else f"  p={r.p_value:.3g}"
        div = f"  diverged {r.n_diverged}/{r.n_runs}" if r.n_diverged else ""
        print(f"  {r.config:<{width}}  {100 * r.mean:6.2f} ± {100 * r.std:5.2f}{p}{div}")


def _check_diverged(rows: Sequence[SuiteRow]):
    if rows and all(r.n_diverged == r.n_runs for r in rows):
        raise DivergedError("every run diverged")


# --------------------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    g = load_graph(cfg)
    name = args.name or _config_name(cfg.model)
    out = Path(cfg.output_dir)
    rows, _ = run_suite(g, {name: cfg.model}, cfg.train, out_dir=out, jobs=cfg.jobs,
                        experiment="train")
    _print_rows(rows, f"{g.name}: test accuracy (%) over {len(cfg.train.seeds)} seed(s)")
    print(f"wrote {out / 'summary.csv'}")
    _check_diverged(rows)
    return EXIT_OK


def _config_name(m: ModelConfig) -> str:
    if m.is_baseline:
        return f"{m.backbone}-baseline-L{m.layers}"
    tag = "" if m.mode == "full" else f"-{m.mode}"
    return f"{m.backbone}-mhc-n{m.streams}{tag}-L{m.layers}"


def cmd_depth_scan(args) -> int:
    # the depth-scan baseline is a plain stacked GCN, F(h), unless overridden
    cfg = resolve_config(args, {"model": {"baseline_residual": False}})
    g = load_graph(cfg)
    depths = args.depths or list(DEFAULT_DEPTHS)
    streams = args.streams_list or [2, 4]
    out = Path(cfg.output_dir)
    base = cfg.model
    table = []
    all_rows: list[SuiteRow] = []
    for L in depths:
        configs = {"baseline": replace(base, layers=L, streams=1, mode="baseline")}
        for n in streams:
            configs[f"mhc-n{n}"] = replace(base, layers=L, streams=n,
                                           mode="full" if base.is_baseline else base.mode)
        rows, _ = run_suite(g, configs, cfg.train, out_dir=out, jobs=cfg.jobs,
                            baseline="baseline", experiment=f"depth{L}",
                            summary_name=f"summary_depth{L}.csv")
        _print_rows(rows, f"depth {L}")
        all_rows += rows
        for r in rows:
            table.append([L, r.config, r.mean, r.std, r.p_value, r.n_runs, r.n_diverged])
    header = ["depth", "config", "mean", "std", "p_value", "n_runs", "n_diverged"]
    path = write_csv(out / "depth_scan.csv", header, table,
                     _meta(cfg, "depth-scan", depths=depths, streams=streams))
    ax = plots.Axes(f"{g.name}: accuracy vs depth", "layers", "test accuracy", logx=True)
    for name in ["baseline"] + [f"mhc-n{n}" for n in streams]:
        pts = [(row[0], row[2], row[3]) for row in table if row[1] == name]
        ax.add(name, [p[0] for p in pts], [p[1] for p in pts],
               band=([p[1] - p[2] for p in pts], [p[1] + p[2] for p in pts]))
    try:
        plots.save(ax, out / "depth_scan.svg")
    except ValueError:
        log.warning("no finite accuracies to plot")
    print(f"wrote {path}")
    _check_diverged(all_rows)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args, {"model": {"layers": 4, "hidden": 16}})
    g = load_graph(cfg)
    m = cfg.model
    if m.is_baseline:
        m = replace(m, mode="full", streams=4)
    configs = {mode: replace(m, mode=mode) for mode in ABLATION_MODES}
    out = Path(cfg.output_dir)
    rows, _ = run_suite(g, configs, cfg.train, out_dir=out, jobs=cfg.jobs, baseline="full",
                        experiment="ablation", summary_name="ablation.csv")
    _print_rows(rows, f"{g.name}: ablation at L={m.layers}, d={m.hidden}, n={m.streams}")
    print(f"wrote {out / 'ablation.csv'}")
    _check_diverged(rows)
    return EXIT_OK


def cmd_theory_wl(args) -> int:
    g1 = graph_from_spec(args.g1)
    g2 = graph_from_spec(args.g2)
    same = wl_distinguishes(g1, g2)
    print(f"1-WL distinguishes: {str(same).lower()}")
    return EXIT_OK


def cmd_theory_smoothing(args) -> int:
    try:
        g = graph_from_spec(args.graph, args.graph_seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    n = args.streams
    common = dict(layers=args.layers, hidden=args.hidden, dropout=0.0,
                  activation=args.weights != "identity",
                  baseline_residual=bool(args.baseline_residual))
    if n == 1 and not args.uniform_maps:
        m = ModelConfig(mode="baseline", streams=1, **common)
    elif args.uniform_maps:
        m = analysis.uniform_maps_config(n, **common)
    else:
        m = ModelConfig(mode="full", streams=n, **common)
    trace = analysis.measure_smoothing(g, m, args.weights, m.layers, seed=args.seed)
    out = Path(args.out or "results")
    stem = args.name or f"smoothing_{g.name}_{args.weights}_n{n}"
    path = trace.to_csv(out / f"{stem}.csv")
    gamma = analysis.spectral_gap(g)
    try:
        fit = analysis.fit_decay(trace, gamma=gamma)
        analysis.write_fits(out / f"{stem}_fit.csv", {stem: fit}, trace.config)
        print(f"fitted rho={fit.rho:.6f} (R^2={fit.r2:.4f}); 1-gamma={1 - gamma:.6f}; "
              f"(1-gamma)^(1/n)={(1 - gamma) ** (1 / n):.6f}")
    except (ValueError, FloatingPointError) as exc:
        print(f"no decay fit: {exc}")
    ax = plots.Axes(f"{g.name} ({args.weights}, n={n})", "layer", "metric", logy=True)
    layers = list(range(trace.num_layers + 1))
    ax.add("pairwise distance", layers, trace.pairwise_dist.tolist())
    ax.add("Dirichlet energy", layers, trace.dirichlet.tolist())
    try:
        plots.save(ax, out / f"{stem}.svg")
    except ValueError:
        pass
    print(f"wrote {path}")
    return EXIT_OK


def cmd_theory_expressiveness(args) -> int:
    seeds = args.seeds or [0, 1, 2]
    report = analysis.expressiveness_experiment(seeds=seeds, epochs=args.epochs)
    out = Path(args.out or "results")
    path = analysis.write_report(out / "expressiveness.json", report)
    print(f"1-WL distinguishes: {str(report['wl_distinguishes']).lower()}")
    print(f"GIN constant-feature embedding gap: {report['gin_constant_max_diff']:.3g}")
    print(f"cycle-4 signature separates: {str(report['cycle4']['separates']).lower()}")
    print(f"neighbourhood structure separates: {str(report['neighborhood_profiles']['separates']).lower()}")
    for run in report["trained_separation"]["runs"]:
        print(f"  seed {run['seed']}: mHC-GIN separation accuracy {run['train_accuracy']:.3f}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_theory_bench(args) -> int:
    rows = analysis.complexity_bench(args.N or [5000], args.d, args.n, args.T, args.repeats,
                                     seed=args.graph_seed or 0)
    out = Path(args.out or "results")
    meta = {"command": "theory bench", "N": args.N or [5000], "d": args.d, "n": args.n,
            "T": args.T}
    ops_path, _ = analysis.write_bench(out, rows, meta)
    for r in rows:
        print(f"N={r.num_nodes} n={r.n}: baseline {r.baseline_ms:.2f} ms, mHC {r.mhc_ms:.2f} ms, "
              f"overhead {100 * r.overhead:.1f}%; analytic extra {r.ops.extra} ops "
              f"({r.ops.extra // r.num_nodes}N)")
    print(f"wrote {ops_path}")
    return EXIT_OK


def cmd_dataset(args) -> int:
    g = load_dataset(resolve_dataset_path(args.path))
    if args.action == "validate":
        print(f"{g.name}: ok ({g.num_nodes} nodes, {g.num_edges} edges)")
        return EXIT_OK
    info = {"name": g.name, "nodes": g.num_nodes, "edges": g.num_edges,
            "directed_edges": g.num_directed_edges,
            "features": None if g.features is None else g.features.shape[1],
            "classes": g.num_classes, "homophily": round(homophily(g), 4),
            "connected": g.is_connected(),
            "self_loops_dropped": g.meta.get("self_loops_dropped", 0),
            "splits": {k: int(v.sum()) for k, v in (g.masks or {}).items()}}
    for k, v in info.items():
        print(f"{k}: {v}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser, model: bool = True, train: bool = True):
    p.add_argument("--config", help="experiment JSON (flags override its values)")
    p.add_argument("--dataset", help="dataset directory or name under $MHC_DATA_DIR")
    p.add_argument("--graph", help="generator spec, e.g. cycle:8, sbm:20,20:0.5:0.05, citation-like")
    p.add_argument("--graph-seed", dest="graph_seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--jobs", type=int, help="worker processes for seeds/configs")
    if model:
        g = p.add_argument_group("model")
        g.add_argument("--backbone", choices=("gcn", "sage", "gat", "gin"))
        g.add_argument("--layers", type=int)
        g.add_argument("--streams", type=int)
        g.add_argument("--hidden", type=int)
        g.add_argument("--dropout", type=float)
        g.add_argument("--mode", choices=MODES)
        g.add_argument("--gat-heads", dest="gat_heads", type=int)
        g.add_argument("--alpha-init", dest="alpha_init", type=float)
        g.add_argument("--post-init", dest="post_init", type=float,
                       help="initial h_post entries (default min(1, 2/sqrt(layers)))")
        g.add_argument("--baseline-residual", dest="baseline_residual",
                       action=argparse.BooleanOptionalAction, default=None,
                       help="baseline layer x + F(x) (default) or plain F(x)")
        g.add_argument("--sinkhorn-T", dest="sinkhorn_T", type=int)
        g.add_argument("--sinkhorn-tau", dest="sinkhorn_tau", type=float)
        g.add_argument("--sinkhorn-stopgrad", dest="sinkhorn_stopgrad", action="store_true",
                       default=None, help="do not differentiate through Sinkhorn")
    if train:
        g = p.add_argument_group("training")
        g.add_argument("--lr", type=float)
        g.add_argument("--weight-decay", dest="weight_decay", type=float)
        g.add_argument("--epochs", type=int)
        g.add_argument("--patience", type=int)
        g.add_argument("--seeds", type=_ints, help="comma-separated seeds")
        g.add_argument("--seed", type=int, help="single seed (overrides --seeds)")
        g.add_argument("--split", choices=("provided", "random"))
        g.add_argument("--clip", type=float, help="gradient-norm clip")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mhc", description="Multi-stream hyper-connected GNN experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one configuration over seeds")
    _common(t)
    t.add_argument("--name", help="row label in summary.csv")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("depth-scan", help="baseline vs n-stream models across depths")
    _common(d)
    d.add_argument("--depths", type=_ints)
    d.add_argument("--streams-list", dest="streams_list", type=_ints)
    d.set_defaults(func=cmd_depth_scan)

    a = sub.add_parser("ablate", help="full / dynamic_only / static_only / no_sinkhorn")
    _common(a)
    a.set_defaults(func=cmd_ablate)

    th = sub.add_parser("theory", help="measurement harnesses")
    tsub = th.add_subparsers(dest="theory", required=True)
    s = tsub.add_parser("smoothing", help="per-layer over-smoothing trace and decay fit")
    s.add_argument("--graph", default="cycle:8", help="generator spec")
    s.add_argument("--graph-seed", dest="graph_seed", type=int, default=0)
    s.add_argument("--mode", dest="weights", choices=analysis.WEIGHT_MODES[:2], default="identity",
                   help="weight regime: W = I without nonlinearity, or random orthogonal W with ReLU")
    s.add_argument("--streams", type=int, default=1)
    s.add_argument("--uniform-maps", dest="uniform_maps", action="store_true",
                   help="fix pre = post = 1/n and res = I (otherwise the initial learned maps)")
    s.add_argument("--baseline-residual", dest="baseline_residual",
                   action=argparse.BooleanOptionalAction, default=False,
                   help="single-stream layer h + F(h) instead of F(h)")
    s.add_argument("--layers", type=int, default=32)
    s.add_argument("--hidden", type=int, default=16)
    s.add_argument("--seed", type=int, default=0, help="seed for the random input state")
    s.add_argument("--name", help="output file stem")
    s.add_argument("--out")
    s.set_defaults(func=cmd_theory_smoothing)
    w = tsub.add_parser("wl", help="1-WL colour refinement on two graphs")
    w.add_argument("--g1", default="shrikhande")
    w.add_argument("--g2", default="rook4")
    w.set_defaults(func=cmd_theory_wl)
    e = tsub.add_parser("expressiveness", help="Shrikhande vs rook experiment")
    e.add_argument("--seeds", type=_ints)
    e.add_argument("--epochs", type=int, default=100)
    e.add_argument("--out")
    e.set_defaults(func=cmd_theory_expressiveness)
    b = tsub.add_parser("bench", help="per-layer forward time and analytic op counts")
    b.add_argument("--N", type=_ints, help="node counts, comma-separated")
    b.add_argument("--n", type=_ints, default=[4], help="stream counts, comma-separated")
    b.add_argument("--d", type=int, default=128)
    b.add_argument("--T", type=int, default=10)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--graph-seed", dest="graph_seed", type=int)
    b.add_argument("--out")
    b.set_defaults(func=cmd_theory_bench)

    ds = sub.add_parser("dataset", help="inspect a dataset directory")
    ds.add_argument("action", choices=("validate", "info"))
    ds.add_argument("path")
    ds.set_defaults(func=cmd_dataset)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, DisconnectedGraphError) as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except DivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
