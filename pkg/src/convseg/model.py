"""EdgeConv layers and the per-category DGCNN part-segmentation network.

Network layout for one scene of N points::

    points (N x 3)
      -> EdgeConv x L   (graph rebuilt in each layer's input space)
      -> concat of the L EdgeConv outputs           F   (N x sum(C_l))
      -> dense to ``global_channels``, max over N   g   (global_channels)
      -> [F | g] -> dense head layers, each followed by dropout
      -> dense to ``num_parts``                     logits (N x P)

A dense layer is linear -> batch norm (optional) -> activation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import tensor_core as tc
from .errors import CategoryMismatchError, ConfigError, DimensionError, NeighborhoodError
from .knn_graph import DEFAULT_K, KnnGraph, dynamic_graph, pairwise_sq_dist

CATEGORIES = ("chair", "bed", "lamp", "storage_furniture", "table")
CHAIR_DROPOUT = 0.6
OTHER_DROPOUT = 0.4


def default_dropout(category: str) -> float:
    return CHAIR_DROPOUT if category == "chair" else OTHER_DROPOUT


@dataclass(frozen=True)
class CategoryConfig:
    category: str
    num_parts: int
    dropout_rate: float | None = None
    k_neighbors: int = DEFAULT_K
    edge_conv_channels: tuple[int, ...] = (64, 64, 64)
    global_channels: int = 1024
    head_channels: tuple[int, ...] = (512, 256)
    activation: str = "relu"
    leaky_slope: float = 0.2
    use_batch_norm: bool = True
    static_graph: bool = False
    bn_momentum: float = tc.BN_MOMENTUM
    bn_eps: float = tc.BN_EPSILON
    component_vote: str = "mean"

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ConfigError(f"unknown category {self.category!r}; expected one of {CATEGORIES}")
        if self.dropout_rate is None:
            object.__setattr__(self, "dropout_rate", default_dropout(self.category))
        object.__setattr__(self, "edge_conv_channels", tuple(self.edge_conv_channels))
        object.__setattr__(self, "head_channels", tuple(self.head_channels))
        if self.num_parts < 2:
            raise ConfigError(f"num_parts must be >= 2, got {self.num_parts}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.k_neighbors < 1:
            raise ConfigError("k_neighbors must be >= 1")
        if not self.edge_conv_channels:
            raise ConfigError("at least one EdgeConv layer is required")
        if any(c < 1 for c in (*self.edge_conv_channels, *self.head_channels, self.global_channels)):
            raise ConfigError("channel widths must be positive")
        if self.activation not in ("relu", "leaky_relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.component_vote not in ("mean", "majority"):
            raise ConfigError(f"unknown component vote {self.component_vote!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["edge_conv_channels"] = list(self.edge_conv_channels)
        d["head_channels"] = list(self.head_channels)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "CategoryConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelParams:
    config: CategoryConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.params.items()},
                           {k: v.copy() for k, v in self.buffers.items()})

    def check_category(self, category: str) -> None:
        if category != self.config.category:
            raise CategoryMismatchError(
                f"model trained for {self.config.category!r} applied to a {category!r} scene")


def layer_shapes(config: CategoryConfig) -> list[tuple[str, int, int]]:
    """``(prefix, fan_in, fan_out)`` for each weight matrix, in parameter order."""
    shapes = []
    c_in = 3
    for i, c in enumerate(config.edge_conv_channels):
        shapes.append((f"edge{i}", 2 * c_in, c))
        c_in = c
    concat = sum(config.edge_conv_channels)
    shapes.append(("global", concat, config.global_channels))
    c_in = concat + config.global_channels
    for i, c in enumerate(config.head_channels):
        shapes.append((f"head{i}", c_in, c))
        c_in = c
    shapes.append(("out", c_in, config.num_parts))
    return shapes


def _has_bn(prefix: str, config: CategoryConfig) -> bool:
    return config.use_batch_norm and prefix != "out"


def model_init(config: CategoryConfig, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit BN scale."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    for prefix, fan_in, fan_out in layer_shapes(config):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"{prefix}.weight"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        params[f"{prefix}.bias"] = np.zeros(fan_out)
        if _has_bn(prefix, config):
            params[f"{prefix}.gamma"] = np.ones(fan_out)
            params[f"{prefix}.beta"] = np.zeros(fan_out)
            buffers[f"{prefix}.running_mean"] = np.zeros(fan_out)
            buffers[f"{prefix}.running_var"] = np.ones(fan_out)
    return ModelParams(config, params, buffers)


def check_params(mp: ModelParams) -> None:
    """Raise :class:`DimensionError` if tensors disagree with the config."""
    expected = model_init_shapes(mp.config)
    for group, table in (("params", mp.params), ("buffers", mp.buffers)):
        want = expected[group]
        if set(want) != set(table):
            missing = sorted(set(want) - set(table))
            extra = sorted(set(table) - set(want))
            raise DimensionError(f"{group} mismatch: missing {missing}, unexpected {extra}")
        for name, shape in want.items():
            if table[name].shape != shape:
                raise DimensionError(f"{name} has shape {table[name].shape}, config implies {shape}")
            if not np.isfinite(table[name]).all():
                raise tc.InstabilityError(f"non-finite values in {name}")


def model_init_shapes(config: CategoryConfig) -> dict[str, dict[str, tuple[int, ...]]]:
    params: dict[str, tuple[int, ...]] = {}
    buffers: dict[str, tuple[int, ...]] = {}
    for prefix, fan_in, fan_out in layer_shapes(config):
        params[f"{prefix}.weight"] = (fan_in, fan_out)
        params[f"{prefix}.bias"] = (fan_out,)
        if _has_bn(prefix, config):
            params[f"{prefix}.gamma"] = (fan_out,)
            params[f"{prefix}.beta"] = (fan_out,)
            buffers[f"{prefix}.running_mean"] = (fan_out,)
            buffers[f"{prefix}.running_var"] = (fan_out,)
    return {"params": params, "buffers": buffers}


# ---------------------------------------------------------------------------
# dense and edge layers
# ---------------------------------------------------------------------------

@dataclass
class LayerParams:
    weight: np.ndarray
    bias: np.ndarray
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None


def _layer(mp: ModelParams, prefix: str) -> LayerParams:
    p, b = mp.params, mp.buffers
    return LayerParams(p[f"{prefix}.weight"], p[f"{prefix}.bias"],
                       p.get(f"{prefix}.gamma"), p.get(f"{prefix}.beta"),
                       b.get(f"{prefix}.running_mean"), b.get(f"{prefix}.running_var"))


@dataclass
class NormActCache:
    pre_act: np.ndarray
    bn: tc.BatchNormCache | None
    running: tuple[np.ndarray, np.ndarray] | None


def _norm_act(pre: np.ndarray, lp: LayerParams, cfg: CategoryConfig, mode: str):
    if lp.gamma is not None:
        y, bn_cache, running = tc.batch_norm(pre, lp.gamma, lp.beta, lp.running_mean,
                                             lp.running_var, mode, cfg.bn_momentum, cfg.bn_eps)
    else:
        y, bn_cache, running = pre, None, None
    out = tc.activation(y, cfg.activation, cfg.leaky_slope)
    return out, NormActCache(y, bn_cache, running)


def _norm_act_backward(grad: np.ndarray, cache: NormActCache, cfg: CategoryConfig):
    """Return ``(dpre, dgamma, dbeta)``."""
    d_y = tc.activation_backward(grad, cache.pre_act, cfg.activation, cfg.leaky_slope)
    if cache.bn is None:
        return d_y, None, None
    return tc.batch_norm_backward(d_y, cache.bn)


@dataclass
class EdgeConvCache:
    x: np.ndarray
    neighbors: np.ndarray
    w_top: np.ndarray
    w_bottom: np.ndarray
    norm: NormActCache
    argmax: np.ndarray
    edge_out: np.ndarray


def edge_conv(features, graph: KnnGraph, lp: LayerParams, cfg: CategoryConfig,
              mode: str = "train"):
    """EdgeConv: ``max_j act(BN(W . [x_i, x_j - x_i] + b))``.

    Uses ``W . [x_i, x_j - x_i] = x_i (W_top - W_bottom) + x_j W_bottom`` so
    the matrix products run per point instead of per edge.
    Returns ``(out, cache)``.
    """
    x = tc.as_array(features, "edge_conv features")
    n, c_in = x.shape
    if graph.n_points != n:
        raise DimensionError(f"graph has {graph.n_points} points, features have {n}")
    if lp.weight.shape[0] != 2 * c_in:
        raise DimensionError(f"edge weight {lp.weight.shape} needs {2 * c_in} input rows")
    k = graph.k
    nb = graph.neighbors
    w_top, w_bottom = lp.weight[:c_in], lp.weight[c_in:]
    center = x @ (w_top - w_bottom) + lp.bias
    other = x @ w_bottom
    pre = (center[:, None, :] + other[nb]).reshape(n * k, -1)
    act, norm = _norm_act(pre, lp, cfg, mode)
    edge_out = act.reshape(n, k, -1)
    pooled, argmax = tc.max_aggregate(edge_out)
    return pooled, EdgeConvCache(x, nb, w_top, w_bottom, norm, argmax, edge_out)


def edge_conv_backward(grad: np.ndarray, cache: EdgeConvCache, cfg: CategoryConfig):
    """Return ``(dx, grads)`` where grads has keys weight/bias/gamma/beta."""
    n, k = cache.neighbors.shape
    d_edge = tc.max_aggregate_backward(grad, cache.argmax, k).reshape(n * k, -1)
    d_pre, d_gamma, d_beta = _norm_act_backward(d_edge, cache.norm, cfg)
    d_pre = d_pre.reshape(n, k, -1)
    d_center = d_pre.sum(axis=1)
    d_other = np.zeros_like(d_center)
    np.add.at(d_other, cache.neighbors.ravel(), d_pre.reshape(n * k, -1))
    w_diff = cache.w_top - cache.w_bottom
    dx = d_center @ w_diff.T + d_other @ cache.w_bottom.T
    d_wdiff = cache.x.T @ d_center
    d_wbottom = cache.x.T @ d_other - d_wdiff
    grads = {"weight": np.vstack([d_wdiff, d_wbottom]), "bias": d_center.sum(axis=0)}
    if d_gamma is not None:
        grads["gamma"], grads["beta"] = d_gamma, d_beta
    return dx, grads


# ---------------------------------------------------------------------------
# full network
# ---------------------------------------------------------------------------

@dataclass
class ForwardCache:
    mode: str
    graphs: list[KnnGraph]
    edge: list[EdgeConvCache]
    concat: np.ndarray
    global_norm: NormActCache
    global_argmax: np.ndarray
    global_vec: np.ndarray
    head_inputs: list[np.ndarray]
    head_norm: list[NormActCache]
    head_masks: list[tc.DropoutMask]
    head_out: np.ndarray
    new_buffers: dict[str, np.ndarray]
    global_act: np.ndarray
    relu: bool

    def kink_gap(self) -> float:
        """Distance of this forward pass from the nearest non-smooth point.

        Covers activation inputs, max-pool winners and (for rebuilt graphs)
        the k-th vs (k+1)-th neighbour distance.
        """
        gaps = [np.abs(c.norm.pre_act).min() for c in self.edge]
        gaps.append(np.abs(self.global_norm.pre_act).min())
        gaps += [np.abs(h.pre_act).min() for h in self.head_norm]
        relu = self.relu
        gaps += [tc.max_aggregate_gap(c.edge_out, relu) for c in self.edge]
        gaps.append(tc.max_aggregate_gap(self.global_act[None], relu))
        for layer, c in enumerate(self.edge[1:], start=1):
            graph = self.graphs[layer]
            if graph is self.graphs[0]:
                continue
            d = pairwise_sq_dist(c.x)
            np.fill_diagonal(d, np.inf)
            srt = np.sort(d, axis=1)
            if graph.k < srt.shape[1] - 1:
                gaps.append((srt[:, graph.k] - srt[:, graph.k - 1]).min())
        return float(min(gaps))


def forward_with_cache(points, mp: ModelParams, mode: str = "eval",
                       rng: np.random.Generator | None = None):
    cfg = mp.config
    pts = tc.as_array(points, "points")
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DimensionError(f"expected N x 3 points, got {pts.shape}")
    n = pts.shape[0]
    if n <= cfg.k_neighbors:
        raise NeighborhoodError(f"scene has {n} points, need more than k={cfg.k_neighbors}")
    new_buffers = dict(mp.buffers)

    def keep_running(prefix, norm):
        if norm.running is not None and mode == "train":
            new_buffers[f"{prefix}.running_mean"], new_buffers[f"{prefix}.running_var"] = norm.running

    graphs, edge_caches, outputs = [], [], []
    x = pts
    coord_graph = dynamic_graph(pts, cfg.k_neighbors)
    for i in range(len(cfg.edge_conv_channels)):
        graph = coord_graph if (i == 0 or cfg.static_graph) else dynamic_graph(x, cfg.k_neighbors)
        x, cache = edge_conv(x, graph, _layer(mp, f"edge{i}"), cfg, mode)
        keep_running(f"edge{i}", cache.norm)
        graphs.append(graph)
        edge_caches.append(cache)
        outputs.append(x)
    concat = np.concatenate(outputs, axis=1)

    gl = _layer(mp, "global")
    g_act, g_norm = _norm_act(concat @ gl.weight + gl.bias, gl, cfg, mode)
    keep_running("global", g_norm)
    g_vec, g_arg = tc.max_aggregate(g_act[None])

    n_local = concat.shape[1]
    h = concat
    head_inputs, head_norm, masks = [], [], []
    for i in range(len(cfg.head_channels)):
        lp = _layer(mp, f"head{i}")
        if i == 0:
            pre = h @ lp.weight[:n_local] + (g_vec @ lp.weight[n_local:] + lp.bias)
        else:
            pre = h @ lp.weight + lp.bias
        head_inputs.append(h)
        a, norm = _norm_act(pre, lp, cfg, mode)
        keep_running(f"head{i}", norm)
        h, mask = tc.dropout(a, cfg.dropout_rate, mode, rng)
        head_norm.append(norm)
        masks.append(mask)
    out = _layer(mp, "out")
    if cfg.head_channels:
        logits = h @ out.weight + out.bias
    else:
        logits = h @ out.weight[:n_local] + (g_vec @ out.weight[n_local:] + out.bias)
    cache = ForwardCache(mode, graphs, edge_caches, concat, g_norm, g_arg, g_vec,
                         head_inputs, head_norm, masks, h, new_buffers, g_act,
                         cfg.activation == "relu")
    return logits, cache


def model_forward(points, mp: ModelParams, mode: str = "eval",
                  rng: np.random.Generator | None = None) -> np.ndarray:
    return forward_with_cache(points, mp, mode, rng)[0]


def model_backward(d_logits: np.ndarray, cache: ForwardCache, mp: ModelParams) -> dict[str, np.ndarray]:
    """Gradients of every entry of ``mp.params`` given ``dL/dlogits``."""
    cfg = mp.config
    p = mp.params
    grads: dict[str, np.ndarray] = {}
    n_local = cache.concat.shape[1]

    def put(prefix, d_gamma, d_beta):
        if d_gamma is not None:
            grads[f"{prefix}.gamma"], grads[f"{prefix}.beta"] = d_gamma, d_beta

    w_out = p["out.weight"]
    grads["out.bias"] = d_logits.sum(axis=0)
    d_concat = np.zeros_like(cache.concat)
    if cfg.head_channels:
        grads["out.weight"] = cache.head_out.T @ d_logits
        d_h = d_logits @ w_out.T
        d_gvec = None
        for i in reversed(range(len(cfg.head_channels))):
            d_a = tc.dropout_backward(d_h, cache.head_masks[i])
            d_pre, d_gamma, d_beta = _norm_act_backward(d_a, cache.head_norm[i], cfg)
            put(f"head{i}", d_gamma, d_beta)
            grads[f"head{i}.bias"] = d_pre.sum(axis=0)
            w = p[f"head{i}.weight"]
            h_in = cache.head_inputs[i]
            if i == 0:
                col = d_pre.sum(axis=0, keepdims=True)
                grads["head0.weight"] = np.vstack([h_in.T @ d_pre, cache.global_vec.T @ col])
                d_concat += d_pre @ w[:n_local].T
                d_gvec = col @ w[n_local:].T
            else:
                grads[f"head{i}.weight"] = h_in.T @ d_pre
                d_h = d_pre @ w.T
    else:
        col = d_logits.sum(axis=0, keepdims=True)
        grads["out.weight"] = np.vstack([cache.concat.T @ d_logits, cache.global_vec.T @ col])
        d_concat += d_logits @ w_out[:n_local].T
        d_gvec = col @ w_out[n_local:].T

    n = cache.concat.shape[0]
    d_gact = tc.max_aggregate_backward(d_gvec, cache.global_argmax, n)[0]
    d_gpre, d_gamma, d_beta = _norm_act_backward(d_gact, cache.global_norm, cfg)
    put("global", d_gamma, d_beta)
    grads["global.weight"] = cache.concat.T @ d_gpre
    grads["global.bias"] = d_gpre.sum(axis=0)
    d_concat += d_gpre @ p["global.weight"].T

    widths = cfg.edge_conv_channels
    offsets = np.cumsum((0,) + widths)
    d_next = None
    for i in reversed(range(len(widths))):
        d_out = d_concat[:, offsets[i]:offsets[i + 1]]
        if d_next is not None:
            d_out = d_out + d_next
        d_next, g = edge_conv_backward(d_out, cache.edge[i], cfg)
        for key, val in g.items():
            grads[f"edge{i}.{key}"] = val
    return {name: grads[name] for name in p}


# ---------------------------------------------------------------------------
# per-component labels
# ---------------------------------------------------------------------------

def component_aggregate(logits, component_ids, method: str = "mean") -> dict[int, int]:
    """One label per connected component.

    ``mean`` averages the logits over the component's points and takes the
    argmax; ``majority`` votes over per-point argmaxes.  Ties go to the
    lowest class index in both cases.
    """
    logits = tc.as_array(logits, "logits")
    ids = np.asarray(component_ids)
    if ids.size == 0:
        raise tc.ParameterError("component_aggregate needs at least one component")
    if ids.shape != (logits.shape[0],):
        raise DimensionError(f"{ids.shape[0]} component ids for {logits.shape[0]} logit rows")
    uniq, inverse = np.unique(ids, return_inverse=True)
    n_cls = logits.shape[1]
    if method == "mean":
        sums = np.zeros((uniq.size, n_cls))
        np.add.at(sums, inverse, logits)
        counts = np.bincount(inverse, minlength=uniq.size)
        labels = (sums / counts[:, None]).argmax(axis=1)
    elif method == "majority":
        votes = np.zeros((uniq.size, n_cls), dtype=np.int64)
        np.add.at(votes, (inverse, logits.argmax(axis=1)), 1)
        labels = votes.argmax(axis=1)
    else:
        raise tc.ParameterError(f"unknown aggregation {method!r}")
    return {int(c): int(l) for c, l in zip(uniq, labels)}
