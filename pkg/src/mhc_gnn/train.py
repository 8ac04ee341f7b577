"""Full-batch training: Adam, plateau LR schedule, early stopping, multi-seed suites."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from . import autodiff as ad
from .gnn import ConfigError, GraphContext, ModelConfig, init_params, leaves, model_forward, predict
from .graphs import Graph
from .linalg import NonFiniteError, Rng

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (42, 123, 456, 789, 1024)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 5e-4
    max_epochs: int = 500
    patience: int = 100
    sched_patience: int = 50
    sched_factor: float = 0.5
    seeds: list[int] = field(default_factory=lambda: list(DEFAULT_SEEDS))
    split: str = "provided"  # or "random": stratified 60/20/20 per seed
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    clip: float | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.split_ratios = tuple(self.split_ratios)
        self.betas = tuple(self.betas)
        if self.lr <= 0 or self.weight_decay < 0 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("lr > 0, weight_decay >= 0, max_epochs >= 1, patience >= 1 required")
        if self.patience > self.max_epochs:
            raise ConfigError("patience cannot exceed max_epochs")
        if self.split not in ("provided", "random"):
            raise ConfigError(f"split must be 'provided' or 'random', got {self.split!r}")
        if not 0 < self.sched_factor < 1:
            raise ConfigError("sched_factor must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8,
              frozen: set[str] | None = None) -> tuple[dict[str, np.ndarray], AdamState]:
    """Classic Adam with L2 weight decay folded into the gradient.

    Returns new parameter arrays; the inputs are not modified.
    """
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = {}
    for k, p in params.items():
        if frozen and k in frozen:
            out[k] = p
            continue
        g = grads[k]
        if weight_decay:
            g = g + weight_decay * p
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        out[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return out, state


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0:
        return grads
    s = max_norm / total
    return {k: g * s for k, g in grads.items()}


# --------------------------------------------------------------------------- splits


def stratified_split(labels: np.ndarray, ratios: Sequence[float], rng: Rng) -> dict[str, np.ndarray]:
    """Per-class random split into train/val/test boolean masks."""
    labels = np.asarray(labels)
    n = len(labels)
    masks = {k: np.zeros(n, dtype=bool) for k in ("train", "val", "test")}
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_tr = int(round(ratios[0] * len(idx)))
        n_va = int(round(ratios[1] * len(idx)))
        masks["train"][idx[:n_tr]] = True
        masks["val"][idx[n_tr:n_tr + n_va]] = True
        masks["test"][idx[n_tr + n_va:]] = True
    return masks


def resolve_masks(g: Graph, tcfg: TrainConfig, seed: int) -> dict[str, np.ndarray]:
    if tcfg.split == "provided":
        if not g.masks or not all(k in g.masks for k in ("train", "val", "test")):
            raise ConfigError(f"{g.name} has no provided train/val/test split")
        return g.masks
    return stratified_split(g.labels, tcfg.split_ratios, Rng(seed).child(1))


# --------------------------------------------------------------------------- training


@dataclass
class RunRecord:
    seed: int
    model: dict
    train: dict
    train_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    epsilon: list[list[float]] = field(default_factory=list)
    test_acc: float | None = None
    best_val_acc: float | None = None
    best_epoch: int = -1
    epochs_run: int = 0
    wall_seconds: float = 0.0
    diverged: bool = False
    message: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


def accuracy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits[mask], axis=1) == labels[mask]))


def train_model(g: Graph, mcfg: ModelConfig, tcfg: TrainConfig, seed: int,
                ctx: GraphContext | None = None, frozen: set[str] | None = None,
                init: Mapping[str, np.ndarray] | None = None) -> RunRecord:
    """Train one model on one seed; test accuracy is taken at the best-validation epoch."""
    if g.features is None or g.labels is None:
        raise ConfigError("training needs node features and labels")
    ctx = ctx or GraphContext(g)
    masks = resolve_masks(g, tcfg, seed)
    rng = Rng(seed)
    params = dict(init) if init is not None else init_params(
        mcfg, g.features.shape[1], g.num_classes, rng.child(2))
    rec = RunRecord(seed, mcfg.to_dict(), tcfg.to_dict())
    state = AdamState()
    lr = tcfg.lr
    best_val, since_best, bad_epochs = -1.0, 0, 0
    t0 = time.perf_counter()
    for epoch in range(tcfg.max_epochs):
        try:
            tape = ad.Tape()
            lv = leaves(tape, params, frozen=frozen)
            res = model_forward(ctx, mcfg, lv, train=True, rng=rng.child(3, epoch))
            loss = ad.cross_entropy(res.logits, g.labels, masks["train"])
            grads = tape.gradients(loss, lv)
            if tcfg.clip:
                grads = clip_grad_norm(grads, tcfg.clip)
            params, state = adam_step(params, grads, state, lr, tcfg.weight_decay,
                                      tcfg.betas, tcfg.adam_eps, frozen)
            logits = predict(ctx, mcfg, params)
            if not np.all(np.isfinite(logits)):
                raise NonFiniteError("non-finite logits")
        except NonFiniteError as exc:
            rec.diverged = True
            rec.message = f"epoch {epoch}: {exc}"
            log.warning("seed %d diverged at epoch %d", seed, epoch)
            break
        val = accuracy(logits, g.labels, masks["val"])
        rec.train_loss.append(float(loss.value))
        rec.val_acc.append(val)
        rec.lr.append(lr)
        if res.maps:
            rec.epsilon.append(res.epsilon_per_layer())
        rec.epochs_run = epoch + 1
        if val > best_val:
            best_val, since_best, bad_epochs = val, 0, 0
            rec.best_epoch = epoch
            rec.best_val_acc = val
            rec.test_acc = accuracy(logits, g.labels, masks["test"])
        else:
            since_best += 1
            bad_epochs += 1
            if bad_epochs > tcfg.sched_patience:
                lr *= tcfg.sched_factor
                bad_epochs = 0
        if since_best >= tcfg.patience:
            break
    rec.wall_seconds = time.perf_counter() - t0
    return rec


# --------------------------------------------------------------------------- suites


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence], meta: Mapping) -> Path:
    """CSV with a header row and a trailing ``# config_hash=...`` comment line."""
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    buf.write(f"# config_hash={config_hash(meta)}\n")
    path.write_text(buf.getvalue())
    return path


def _fmt(v):
    if isinstance(v, float):
        if not np.isfinite(v):
            return "nan" if np.isnan(v) else ("inf" if v > 0 else "-inf")
        # fixed point for ordinary magnitudes, scientific for tiny or huge ones
        return f"{v:.6e}" if v and not 1e-3 <= abs(v) < 1e9 else f"{v:.6f}"
    return v


@dataclass
class SuiteRow:
    config: str
    mean: float
    std: float
    p_value: float
    n_runs: int
    n_diverged: int
    accs: list[float]


def paired_p_value(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-sided paired t-test; NaN when the differences have no variance."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if len(a) != len(b) or len(a) < 2:
        return float("nan")
    diff = a - b
    if np.allclose(diff, diff[0], rtol=0, atol=0):
        return float("nan")
    return float(stats.ttest_rel(a, b).pvalue)


def _run_one(args):
    g, mcfg, tcfg, seed = args
    return train_model(g, mcfg, tcfg, seed)


def run_suite(g: Graph, configs: Mapping[str, ModelConfig], tcfg: TrainConfig,
              seeds: Sequence[int] | None = None, baseline: str | None = None,
              out_dir: str | Path | None = None, jobs: int = 1,
              experiment: str = "suite", summary_name: str = "summary.csv",
              ) -> tuple[list[SuiteRow], dict[str, list[RunRecord]]]:
    """Train every config on every seed; aggregate mean/std and paired p-values.

    Records go to ``out_dir/runs/<experiment>/<config>/<seed>.json`` and the
    table to ``out_dir/<summary_name>`` when ``out_dir`` is given.
    """
    seeds = list(seeds if seeds is not None else tcfg.seeds)
    tasks = [(name, seed) for name in configs for seed in seeds]
    args = [(g, configs[name], tcfg, seed) for name, seed in tasks]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, args))
    else:
        results = [_run_one(a) for a in args]
    records: dict[str, list[RunRecord]] = {name: [] for name in configs}
    for (name, _), rec in zip(tasks, results):
        records[name].append(rec)

    def accs(name):
        return [r.test_acc if r.test_acc is not None else float("nan") for r in records[name]]

    rows = []
    for name in configs:
        a = np.asarray(accs(name))
        ok = a[np.isfinite(a)]
        p = float("nan")
        if baseline is not None and baseline in records and name != baseline:
            p = paired_p_value(a, accs(baseline))
        elif baseline is not None and name == baseline:
            p = paired_p_value(a, a)
        rows.append(SuiteRow(name, float(ok.mean()) if ok.size else float("nan"),
                             float(ok.std()) if ok.size else float("nan"), p,
                             len(a), sum(r.diverged for r in records[name]), a.tolist()))
    if out_dir is not None:
        out = Path(out_dir)
        for name, recs in records.items():
            d = out / "runs" / experiment / name
            d.mkdir(parents=True, exist_ok=True)
            for r in recs:
                (d / f"{r.seed}.json").write_text(r.to_json())
        meta = {"experiment": experiment, "seeds": seeds, "train": tcfg.to_dict(),
                "configs": {k: v.to_dict() for k, v in configs.items()}, "graph": g.name}
        write_csv(out / summary_name, ["config", "mean", "std", "p_value", "n_runs", "n_diverged"],
                  [[r.config, r.mean, r.std, r.p_value, r.n_runs, r.n_diverged] for r in rows], meta)
    return rows, records
