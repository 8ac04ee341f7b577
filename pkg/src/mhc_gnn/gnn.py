"""Message-passing backbones, the multi-stream hyper-connection layer and the model stack.

Shapes: N nodes, n streams, d hidden width.  A multi-stream state is an
(N, n, d) array; per-node mixing maps are ``pre`` (N, n), ``post`` (N, n) and
``res`` (N, n, n).
"""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, fields
from functools import cached_property
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from . import kernels
from .graphs import Graph, normalize_adjacency
from .linalg import Rng
from .sinkhorn import identity_deviation, sinkhorn_project, stochastic_deviation

BACKBONES = ("gcn", "sage", "gat", "gin")
MODES = ("full", "dynamic_only", "static_only", "no_sinkhorn", "baseline")


class ConfigError(ValueError):
    pass


@dataclass
class SinkhornConfig:
    T: int = 10
    tau: float = 0.1
    stopgrad: bool = False


@dataclass
class FixedMaps:
    """Override the learned maps with constants (same for every node)."""

    pre: list[float]
    post: list[float]
    res: list[list[float]]


@dataclass
class ModelConfig:
    backbone: str = "gcn"
    layers: int = 8
    streams: int = 4
    hidden: int = 128
    dropout: float = 0.5
    gat_heads: int = 8
    gin_eps: float = 0.0
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    mode: str = "full"
    # baseline layer is x + F(x) when True, F(x) when False
    baseline_residual: bool = True
    alpha_init: float = 0.01
    # initial h_post entry; None means min(1, 2/sqrt(layers)), which keeps the
    # activation growth of a deep residual stack independent of depth
    post_init: float | None = None
    rms_eps: float = 1e-8
    activation: bool = True
    fixed_maps: FixedMaps | None = None

    def __post_init__(self):
        if isinstance(self.sinkhorn, dict):
            self.sinkhorn = SinkhornConfig(**self.sinkhorn)
        if isinstance(self.fixed_maps, dict):
            self.fixed_maps = FixedMaps(**self.fixed_maps)
        self.validate()

    def validate(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; choose from {BACKBONES}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.layers < 0 or self.streams < 1 or self.hidden < 1:
            raise ConfigError("layers >= 0, streams >= 1 and hidden >= 1 required")
        if self.mode == "baseline" and self.streams != 1:
            raise ConfigError("baseline mode runs a single stream (streams=1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.backbone == "gat" and self.hidden % self.gat_heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by {self.gat_heads} heads")
        if self.post_init is not None and not 0.0 < self.post_init < 2.0:
            raise ConfigError("post_init must lie in (0, 2), the range of 2 sigmoid")
        if self.sinkhorn.T < 1 or self.sinkhorn.tau <= 0:
            raise ConfigError("Sinkhorn needs T >= 1 and tau > 0")
        fm = self.fixed_maps
        if fm is not None:
            n = self.streams
            if (np.shape(fm.pre) != (n,) or np.shape(fm.post) != (n,)
                    or np.shape(fm.res) != (n, n)):
                raise ConfigError(f"fixed maps must have shapes ({n},), ({n},), ({n},{n})")

    @property
    def initial_post(self) -> float:
        if self.post_init is not None:
            return self.post_init
        return min(1.0, 2.0 / np.sqrt(max(self.layers, 1)))

    @property
    def is_baseline(self) -> bool:
        return self.mode == "baseline"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("sinkhorn"), Mapping):
            sk = set(d["sinkhorn"]) - {f.name for f in fields(SinkhornConfig)}
            if sk:
                raise ConfigError(f"unknown sinkhorn keys: {sorted(sk)}")
        return cls(**d)


# --------------------------------------------------------------------------- graph operators


class GraphContext:
    """Sparse operators and edge lists for one graph, built on first use."""

    def __init__(self, g: Graph):
        self.graph = g
        self.num_nodes = g.num_nodes

    @cached_property
    def gcn(self) -> sp.csr_matrix:
        return normalize_adjacency(self.graph, self_loops=True).matrix

    @cached_property
    def adj(self) -> sp.csr_matrix:
        return self.graph.adjacency()

    @cached_property
    def mean(self) -> sp.csr_matrix:
        deg = self.graph.degrees().astype(np.float64)
        inv = np.where(deg > 0, 1.0 / np.maximum(deg, 1.0), 0.0)
        return (sp.diags(inv) @ self.adj).tocsr()

    @cached_property
    def gat_edges(self) -> tuple[np.ndarray, np.ndarray]:
        src, dst = self.graph.directed_edges()
        loops = np.arange(self.num_nodes)
        return np.r_[src, loops], np.r_[dst, loops]


# --------------------------------------------------------------------------- parameters


def _glorot(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform((fan_in, fan_out), -a, a)


def _stream(rng: Rng, name: str) -> Rng:
    return rng.child(zlib.crc32(name.encode()))


def backbone_param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d = cfg.hidden
    if cfg.backbone == "gcn":
        return {"W": (d, d), "b": (1, d)}
    if cfg.backbone == "sage":
        return {"W": (2 * d, d), "b": (1, d)}
    if cfg.backbone == "gat":
        h = cfg.gat_heads
        return {"W": (d, d), "a_src": (h, d // h), "a_dst": (h, d // h), "b": (1, d)}
    return {"eps": (1,), "W1": (d, d), "b1": (1, d), "W2": (d, d), "b2": (1, d)}


def init_params(cfg: ModelConfig, in_dim: int, num_classes: int, rng: Rng) -> dict[str, np.ndarray]:
    """Parameters keyed by dotted name.

    Every tensor is drawn from its own named stream, so parameters shared by
    two configurations (input head, backbones, classifier) start identical.
    """
    d, n = cfg.hidden, cfg.streams
    p: dict[str, np.ndarray] = {}

    def put(name, value):
        p[name] = np.asarray(value, dtype=np.float64)

    put("input.W", _glorot(_stream(rng, "input.W"), in_dim, d))
    put("input.b", np.zeros((1, d)))
    for k in range(cfg.layers):
        pre = f"layer{k}."
        for name, shape in backbone_param_shapes(cfg).items():
            key = pre + "gnn." + name
            if name == "eps":
                put(key, np.full(shape, cfg.gin_eps))
            elif name.startswith("b"):
                put(key, np.zeros(shape))
            elif name.startswith("a_"):
                put(key, _glorot(_stream(rng, key), shape[0], shape[1]))
            else:
                put(key, _glorot(_stream(rng, key), *shape))
        if cfg.is_baseline:
            continue
        s = 1.0 / np.sqrt(d)
        put(pre + "theta_pre", _stream(rng, pre + "theta_pre").normal((1, d), s))
        put(pre + "theta_post", _stream(rng, pre + "theta_post").normal((1, d), s))
        put(pre + "theta_res", _stream(rng, pre + "theta_res").normal((n, d), s))
        for a in ("alpha_pre", "alpha_post", "alpha_res"):
            put(pre + a, np.full((1,), cfg.alpha_init))
        put(pre + "b_pre", np.zeros((1, n)))
        # 2 sigmoid(b) = initial_post
        q = cfg.initial_post / 2.0
        put(pre + "b_post", np.full((1, n), np.log(q / (1.0 - q))))
        put(pre + "B_res", np.zeros((n, n)))
    put("classifier.W", _glorot(_stream(rng, "classifier.W"), d, num_classes))
    put("classifier.b", np.zeros((1, num_classes)))
    return p


def layer_params(params: Mapping[str, ad.Var], k: int) -> dict[str, ad.Var]:
    pre = f"layer{k}."
    return {name[len(pre):]: v for name, v in params.items() if name.startswith(pre)}


# --------------------------------------------------------------------------- backbones


def backbone_forward(kind: str, h: ad.Var, ctx: GraphContext, p: Mapping[str, ad.Var],
                     cfg: ModelConfig) -> ad.Var:
    """One message-passing function F: (N, d) -> (N, d)."""
    act = cfg.activation
    if kind == "gcn":
        z = ad.spmm(ctx.gcn, h) @ p["gnn.W"] + p["gnn.b"]
        return ad.relu(z) if act else z
    if kind == "sage":
        z = ad.concat([h, ad.spmm(ctx.mean, h)], axis=1) @ p["gnn.W"] + p["gnn.b"]
        return ad.relu(z) if act else z
    if kind == "gat":
        return _gat(h, ctx, p, cfg)
    if kind == "gin":
        agg = h * (1.0 + p["gnn.eps"]) + ad.spmm(ctx.adj, h)
        z = ad.relu(agg @ p["gnn.W1"] + p["gnn.b1"]) @ p["gnn.W2"] + p["gnn.b2"]
        return ad.relu(z) if act else z
    raise ConfigError(f"unknown backbone {kind!r}")


def _gat(h, ctx, p, cfg):
    n_nodes, d = h.shape
    heads = cfg.gat_heads
    dh = d // heads
    src, dst = ctx.gat_edges
    z = ad.reshape(h @ p["gnn.W"], (n_nodes, heads, dh))
    s_src = ad.sum(z * p["gnn.a_src"], axis=2)  # (N, H)
    s_dst = ad.sum(z * p["gnn.a_dst"], axis=2)
    e = ad.leaky_relu(ad.take_rows(s_src, src) + ad.take_rows(s_dst, dst), 0.2)
    att = ad.segment_softmax(e, dst, n_nodes)  # (E, H)
    msg = ad.take_rows(z, src) * ad.reshape(att, (len(src), heads, 1))
    out = ad.reshape(ad.segment_sum(msg, dst, n_nodes), (n_nodes, d)) + p["gnn.b"]
    return ad.elu(out) if cfg.activation else out


# --------------------------------------------------------------------------- mixing maps


@dataclass
class MixingMaps:
    pre: ad.Var  # (N, n)
    post: ad.Var  # (N, n)
    res: ad.Var  # (N, n, n)
    deviation: float = 0.0  # Sinkhorn row/col residual (0 when not projected)

    def epsilon(self) -> np.ndarray:
        return identity_deviation(self.res.value)


def compute_mappings(x: ad.Var, p: Mapping[str, ad.Var], cfg: ModelConfig) -> MixingMaps:
    n_nodes, n, _ = x.shape
    tape = x.tape
    if cfg.fixed_maps is not None:
        fm = cfg.fixed_maps
        return MixingMaps(
            tape.const(np.broadcast_to(np.asarray(fm.pre, float), (n_nodes, n)).copy()),
            tape.const(np.broadcast_to(np.asarray(fm.post, float), (n_nodes, n)).copy()),
            tape.const(np.broadcast_to(np.asarray(fm.res, float), (n_nodes, n, n)).copy()),
        )
    dynamic = cfg.mode != "static_only"
    static = cfg.mode != "dynamic_only"

    pre_logit = post_logit = res_hat = None
    if dynamic:
        # theta x~^T with x~ = x * s: project the raw streams in one GEMM
        # against the stacked thetas, then apply the per-stream RMS factor
        flat = ad.reshape(x, (n_nodes * n, -1))
        thetas = ad.concat([p["theta_pre"], p["theta_post"], p["theta_res"]], axis=0)
        proj = ad.reshape(flat @ ad.swapaxes(thetas, 0, 1), (n_nodes, n, n + 2))
        proj = proj * ad.rms_scale(x, cfg.rms_eps)
        pre_logit = p["alpha_pre"] * ad.index(proj, (slice(None), slice(None), 0))
        post_logit = p["alpha_post"] * ad.index(proj, (slice(None), slice(None), 1))
        # res_hat[i, j] = theta_res[i] . x~_j
        res_hat = p["alpha_res"] * ad.swapaxes(ad.index(proj, (slice(None), slice(None), slice(2, None))), 1, 2)
    if static:
        if dynamic:
            pre_logit = pre_logit + p["b_pre"]
            post_logit = post_logit + p["b_post"]
            res_hat = res_hat + p["B_res"]
        else:
            pre_logit = ad.broadcast_to(p["b_pre"], (n_nodes, n))
            post_logit = ad.broadcast_to(p["b_post"], (n_nodes, n))
            res_hat = ad.broadcast_to(ad.reshape(p["B_res"], (1, n, n)), (n_nodes, n, n))
    pre = ad.sigmoid(pre_logit)
    post = 2.0 * ad.sigmoid(post_logit)
    if cfg.mode == "no_sinkhorn":
        return MixingMaps(pre, post, res_hat, 0.0)
    sk = cfg.sinkhorn
    batch = sinkhorn_project(res_hat, sk.T, sk.tau, stopgrad=sk.stopgrad)
    return MixingMaps(pre, post, batch.matrices, batch.deviation)


def mhc_layer_forward(x: ad.Var, ctx: GraphContext, p: Mapping[str, ad.Var], cfg: ModelConfig,
                      maps: MixingMaps | None = None,
                      drop: Callable[[ad.Var], ad.Var] | None = None) -> tuple[ad.Var, MixingMaps]:
    """x' = res @ x + post^T F(pre @ x) for every node.

    F runs once on the (N, d) stream aggregate, each node aggregated with its
    own ``pre`` row, and its output is spread back over the streams by ``post``.
    ``drop`` (dropout) applies to F's input only, never to the residual path.
    Without anything to differentiate the mixing runs in fused kernels.
    """
    if (maps is None and drop is None and not x.requires_grad
            and not any(v.requires_grad for v in p.values())):
        return _mhc_layer_nograd(x, ctx, p, cfg)
    n_nodes, n, d = x.shape
    if maps is None:
        maps = compute_mappings(x, p, cfg)
    agg = ad.reshape(ad.reshape(maps.pre, (n_nodes, 1, n)) @ x, (n_nodes, d))
    if drop is not None:
        agg = drop(agg)
    f = backbone_forward(cfg.backbone, agg, ctx, p, cfg)
    mixed = maps.res @ x
    spread = ad.reshape(maps.post, (n_nodes, n, 1)) * ad.reshape(f, (n_nodes, 1, d))
    return mixed + spread, maps


def _is_reduction(cfg: ModelConfig) -> bool:
    fm = cfg.fixed_maps
    return (cfg.streams == 1 and fm is not None
            and fm.pre[0] == 1.0 and fm.post[0] == 1.0 and fm.res[0][0] == 1.0)


def _mhc_layer_nograd(x, ctx, p, cfg):
    tape = x.tape
    n_nodes, n, d = x.shape
    xv = kernels.as_f8(x.value)
    if _is_reduction(cfg):
        # pre = post = res = [1]: the layer is exactly h + F(h)
        h = tape.const(xv.reshape(n_nodes, d))
        out = h + backbone_forward(cfg.backbone, h, ctx, p, cfg)
        one = np.ones((n_nodes, 1))
        maps = MixingMaps(tape.const(one), tape.const(one), tape.const(one.reshape(n_nodes, 1, 1)))
        return ad.reshape(out, (n_nodes, 1, d)), maps
    if cfg.fixed_maps is not None:
        fixed = compute_mappings(x, p, cfg)
        pre, post, res = fixed.pre.value, fixed.post.value, fixed.res.value
        agg = kernels.aggregate(kernels.as_f8(pre), xv)
        dev = 0.0
    else:
        dynamic = cfg.mode != "static_only"
        static = cfg.mode != "dynamic_only"
        project = cfg.mode != "no_sinkhorn"
        if dynamic:
            thetas = np.vstack([p["theta_pre"].value, p["theta_post"].value, p["theta_res"].value])
            alphas = np.array([p[a].value.item() for a in ("alpha_pre", "alpha_post", "alpha_res")])
        else:
            thetas, alphas = np.zeros((n + 2, d)), np.zeros(3)
        if static:
            b_pre, b_post, B_res = (p["b_pre"].value.ravel(), p["b_post"].value.ravel(),
                                    p["B_res"].value)
        else:
            b_pre, b_post, B_res = np.zeros(n), np.zeros(n), np.zeros((n, n))
        sk = cfg.sinkhorn
        pre, post, res, agg = kernels.mixing_maps(
            xv, kernels.as_f8(thetas), alphas, kernels.as_f8(b_pre), kernels.as_f8(b_post),
            kernels.as_f8(B_res), dynamic, static, project, sk.T, float(sk.tau), cfg.rms_eps)
        dev = stochastic_deviation(res) if project else 0.0
    f = backbone_forward(cfg.backbone, tape.const(agg), ctx, p, cfg)
    out = kernels.stream_update(res, xv, kernels.as_f8(post), kernels.as_f8(f.value))
    maps = MixingMaps(tape.const(pre), tape.const(post), tape.const(res), dev)
    return tape.const(out), maps


# --------------------------------------------------------------------------- model


@dataclass
class ForwardResult:
    logits: ad.Var
    maps: list[MixingMaps]
    states: list[np.ndarray]

    def epsilon_per_layer(self) -> list[float]:
        return [float(np.mean(m.epsilon())) for m in self.maps]


def model_forward(ctx: GraphContext, cfg: ModelConfig, params: Mapping[str, ad.Var],
                  train: bool = False, rng: Rng | None = None,
                  features: np.ndarray | None = None, keep_states: bool = False) -> ForwardResult:
    """Input projection, L layers, stream-mean readout, linear classifier."""
    tape = params["input.W"].tape
    feats = ctx.graph.features if features is None else features
    if feats is None:
        raise ConfigError("graph has no node features")
    if feats.shape[1] != params["input.W"].shape[0]:
        raise ConfigError(f"feature width {feats.shape[1]} does not match input.W")
    n_nodes, d, n = ctx.num_nodes, cfg.hidden, cfg.streams
    # dropout hits the input of each message-passing function, not the residual path
    active = train and cfg.dropout > 0.0

    def drop(k):
        if not active:
            return None
        return lambda v: ad.dropout(v, cfg.dropout, rng.child(k) if rng else None, train)

    h = tape.const(feats) @ params["input.W"] + params["input.b"]
    maps_out: list[MixingMaps] = []
    states: list[np.ndarray] = []
    if cfg.is_baseline:
        for k in range(cfg.layers):
            dk = drop(k)
            f = backbone_forward(cfg.backbone, dk(h) if dk else h, ctx, layer_params(params, k), cfg)
            h = h + f if cfg.baseline_residual else f
            if keep_states:
                states.append(h.value.reshape(n_nodes, 1, d))
        out = h
    else:
        x = ad.broadcast_to(ad.reshape(h, (n_nodes, 1, d)), (n_nodes, n, d))
        for k in range(cfg.layers):
            x, maps = mhc_layer_forward(x, ctx, layer_params(params, k), cfg, drop=drop(k))
            maps_out.append(maps)
            if keep_states:
                states.append(x.value)
        out = ad.mean(x, axis=1)
    dk = drop(cfg.layers)
    out = dk(out) if dk else out
    logits = out @ params["classifier.W"] + params["classifier.b"]
    return ForwardResult(logits, maps_out, states)


def residual_product(maps: list[np.ndarray]) -> tuple[np.ndarray, float]:
    """Ordered product H_{L-1} ... H_1 H_0 and its distance from doubly stochastic."""
    if not maps:
        raise ValueError("need at least one layer")
    prod = np.asarray(maps[0], dtype=np.float64)
    for m in maps[1:]:
        prod = np.asarray(m) @ prod
    return prod, stochastic_deviation(prod)


def leaves(tape: ad.Tape, params: Mapping[str, np.ndarray], requires_grad: bool = True,
           frozen: set[str] | None = None) -> dict[str, ad.Var]:
    frozen = frozen or set()
    return {k: tape.var(v, requires_grad and k not in frozen, name=k) for k, v in params.items()}


def predict(ctx: GraphContext, cfg: ModelConfig, params: Mapping[str, np.ndarray],
            features: np.ndarray | None = None) -> np.ndarray:
    tape = ad.Tape()
    res = model_forward(ctx, cfg, leaves(tape, params, False), train=False, features=features)
    return res.logits.value


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray],
                    cfg: ModelConfig | None = None) -> Path:
    """Flat little-endian float64 blob ``<path>.bin`` plus a JSON manifest ``<path>.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f8")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    manifest = {"dtype": "float64", "byteorder": "little", "tensors": entries,
                "config": cfg.to_dict() if cfg else None}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1))
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], ModelConfig | None]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    blob = path.with_suffix(".bin").read_bytes()
    params = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=e["offset"])
        params[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    cfg = ModelConfig.from_dict(manifest["config"]) if manifest.get("config") else None
    return params, cfg
