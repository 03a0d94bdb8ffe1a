"""Finite-difference checks for every differentiable op and a tiny network."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor_core as tc
from .errors import ParameterError
from .knn_graph import knn_brute_force
from .model import (CategoryConfig, LayerParams, ModelParams, edge_conv, edge_conv_backward,
                    forward_with_cache, model_backward, model_init)

TINY_MODEL = dict(category="lamp", num_parts=3, k_neighbors=2, edge_conv_channels=(4, 4),
                  global_channels=8, head_channels=(8,))

Case = Callable[[np.random.Generator], tuple]


def _projected(out_shape, rng):
    """Random projection making a tensor-valued op scalar."""
    return rng.normal(size=out_shape)


def _case_matmul(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    r = _projected((3, 2), rng)

    def fn(p):
        out = tc.matmul(p["a"], p["b"])
        da, db = tc.matmul_backward(r, p["a"], p["b"])
        return float((out * r).sum()), {"a": da, "b": db}
    return fn, {"a": a, "b": b}, None


def _case_linear(rng):
    x, w, b = rng.normal(size=(5, 3)), rng.normal(size=(3, 4)), rng.normal(size=4)
    r = _projected((5, 4), rng)

    def fn(p):
        out = tc.linear(p["x"], p["w"], p["b"])
        dx, dw, db = tc.linear_backward(r, p["x"], p["w"])
        return float((out * r).sum()), {"x": dx, "w": dw, "b": db}
    return fn, {"x": x, "w": w, "b": b}, None


def _case_activation(kind, slope):
    def case(rng):
        x = rng.normal(size=(4, 5))
        r = _projected(x.shape, rng)

        def fn(p):
            out = tc.activation(p["x"], kind, slope)
            return float((out * r).sum()), {"x": tc.activation_backward(r, p["x"], kind, slope)}
        return fn, {"x": x}, lambda p: float(np.abs(p["x"]).min())
    return case


def _case_dropout(rng):
    x = rng.normal(size=(6, 4))
    r = _projected(x.shape, rng)
    seed = int(rng.integers(1 << 31))

    def fn(p):
        out, mask = tc.dropout(p["x"], 0.4, "train", np.random.default_rng(seed))
        return float((out * r).sum()), {"x": tc.dropout_backward(r, mask)}
    return fn, {"x": x}, None


def _case_batch_norm(mode):
    def case(rng):
        x = rng.normal(size=(6, 3)) * 2 + 1
        gamma, beta = rng.normal(size=3), rng.normal(size=3)
        rm, rv = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
        r = _projected(x.shape, rng)

        def fn(p):
            out, cache, _ = tc.batch_norm(p["x"], p["gamma"], p["beta"], rm, rv, mode)
            dx, dg, db = tc.batch_norm_backward(r, cache)
            return float((out * r).sum()), {"x": dx, "gamma": dg, "beta": db}
        return fn, {"x": x, "gamma": gamma, "beta": beta}, None
    return case


def _case_max_aggregate(rng):
    e = rng.normal(size=(3, 4, 2))
    r = _projected((3, 2), rng)

    def fn(p):
        pooled, arg = tc.max_aggregate(p["e"])
        return float((pooled * r).sum()), {"e": tc.max_aggregate_backward(r, arg, 4)}
    return fn, {"e": e}, lambda p: tc.max_aggregate_gap(p["e"])


def _case_softmax_ce(rng):
    logits = rng.normal(size=(5, 4)) * 2
    labels = rng.integers(0, 4, size=5)

    def fn(p):
        loss, g = tc.softmax_cross_entropy(p["logits"], labels)
        return loss, {"logits": g}
    return fn, {"logits": logits}, None


def _case_edge_conv(rng):
    cfg = CategoryConfig(**TINY_MODEL)
    n, k, c_in, c_out = 6, 3, 2, 3
    x = rng.normal(size=(n, c_in))
    graph = knn_brute_force(x, k)
    p0 = {"x": x, "weight": rng.normal(size=(2 * c_in, c_out)), "bias": rng.normal(size=c_out),
          "gamma": rng.normal(size=c_out), "beta": rng.normal(size=c_out)}
    rm, rv = np.zeros(c_out), np.ones(c_out)
    r = _projected((n, c_out), rng)

    def run(p):
        lp = LayerParams(p["weight"], p["bias"], p["gamma"], p["beta"], rm, rv)
        return edge_conv(p["x"], graph, lp, cfg, "train")

    def fn(p):
        out, cache = run(p)
        dx, g = edge_conv_backward(r, cache, cfg)
        return float((out * r).sum()), {"x": dx, **g}

    def kink(p):
        _, cache = run(p)
        return min(float(np.abs(cache.norm.pre_act).min()),
                   tc.max_aggregate_gap(cache.edge_out, only_positive=True))
    return fn, p0, kink


def _case_tiny_model(rng):
    cfg = CategoryConfig(**TINY_MODEL)
    base = model_init(cfg, int(rng.integers(1 << 31)))
    params = {k: v + 0.3 * rng.normal(size=v.shape) for k, v in base.params.items()}
    pts = rng.normal(size=(8, 3))
    labels = rng.integers(0, cfg.num_parts, size=8)
    seed = int(rng.integers(1 << 31))

    def run(p):
        mp = ModelParams(cfg, p, base.buffers)
        return mp, forward_with_cache(pts, mp, "train", np.random.default_rng(seed))

    def fn(p):
        mp, (logits, cache) = run(p)
        loss, d = tc.softmax_cross_entropy(logits, labels)
        return loss, model_backward(d, cache, mp)
    return fn, params, lambda p: run(p)[1][1].kink_gap()


CASES: dict[str, Case] = {
    "matmul": _case_matmul,
    "linear": _case_linear,
    "relu": _case_activation("relu", 0.0),
    "leaky_relu": _case_activation("leaky_relu", 0.1),
    "dropout": _case_dropout,
    "batch_norm_train": _case_batch_norm("train"),
    "batch_norm_eval": _case_batch_norm("eval"),
    "max_aggregate": _case_max_aggregate,
    "softmax_cross_entropy": _case_softmax_ce,
    "edge_conv": _case_edge_conv,
    "tiny_model": _case_tiny_model,
}


def check_case(name: str, points: int = 20, seed: int = 0, max_rejects: int = 1000) -> float:
    """Max relative error over ``points`` random probe points of one case.

    Probe points that land within the kink margin are redrawn.
    """
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst, done, rejected = 0.0, 0, 0
    while done < points:
        fn, params, kink = CASES[name](rng)
        try:
            err = tc.gradient_check(fn, params, kink_distance=kink)
        except ParameterError:
            rejected += 1
            if rejected > max_rejects:
                raise
            continue
        worst = max(worst, err)
        done += 1
    return worst


def run_suite(points: int = 20, seed: int = 0) -> dict[str, float]:
    return {name: check_case(name, points, seed) for name in CASES}
