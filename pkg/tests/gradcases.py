"""Small graphs exercising every layer and loss for finite-difference checks."""

from __future__ import annotations

import numpy as np
import torch

from oilseg.graph import TRAINING, Graph, finite_diff_check


def _projected(build, x_shape, out_shape, channels=None, **attrs):
    """Graph: ``image`` -> layer -> elementwise product with a fixed probe -> sum."""
    rng = np.random.default_rng(7)
    g = Graph({"image": channels or x_shape[1], "probe": 0}, dtype=torch.float64)
    out = build(g, rng, **attrs)
    g.add("mul", (out, "probe"), "proj")
    g.add("sum", "proj", "objective")
    g.outputs = ["objective"]
    inputs = {"image": rng.normal(size=x_shape), "probe": rng.normal(size=out_shape)}
    return g, inputs


def conv_case():
    def build(g, rng):
        g.add_param("c.weight", rng.normal(size=(4, 3, 3, 3)) * 0.5)
        g.add_param("c.bias", rng.normal(size=4))
        return g.add("conv2d", "image", "c", params=("c.weight", "c.bias"))

    return _projected(build, (2, 3, 5, 5), (2, 4, 5, 5))


def bn_case():
    def build(g, rng):
        g.add_param("bn.scale", rng.uniform(0.5, 1.5, 3))
        g.add_param("bn.shift", rng.normal(size=3))
        g.add_param("bn.running_mean", np.zeros(3), trainable=False)
        g.add_param("bn.running_var", np.ones(3), trainable=False)
        return g.add("batch_norm", "image", "bn",
                     params=("bn.scale", "bn.shift", "bn.running_mean", "bn.running_var"))

    return _projected(build, (3, 3, 4, 4), (3, 3, 4, 4))


def se_case():
    def build(g, rng):
        g.add_param("se.reduce", rng.normal(size=(8, 2)) * 0.5)
        g.add_param("se.expand", rng.normal(size=(2, 8)) * 0.5)
        return g.add("squeeze_excitation", "image", "se", params=("se.reduce", "se.expand"))

    return _projected(build, (2, 8, 3, 3), (2, 8, 3, 3))


def upsample_case():
    return _projected(lambda g, rng: g.add("upsample2", "image", "up"), (2, 2, 3, 4), (2, 2, 6, 8))


def pool_case():
    return _projected(lambda g, rng: g.add("max_pool2", "image", "pool"), (2, 2, 4, 4), (2, 2, 2, 2))


def dense_case():
    def build(g, rng):
        x = g.add("flatten", "image", "flat")
        g.add_param("d.weight", rng.normal(size=(12, 5)) * 0.4)
        g.add_param("d.bias", rng.normal(size=5))
        return g.add("dense", x, "d", params=("d.weight", "d.bias"))

    return _projected(build, (3, 3, 2, 2), (3, 5))


def activation_case(kind):
    def build(g, rng):
        return g.add(kind, "image", kind, **({"dim": 1} if kind == "softmax" else {}))

    return _projected(build, (2, 4, 3, 3), (2, 4, 3, 3))


def loss_case(kind):
    rng = np.random.default_rng(11)
    g = Graph({"x": 0, "target": 0}, dtype=torch.float64)
    attrs = {}
    if kind == "categorical_ce":
        g.add("softmax", "x", "p", dim=-1)
        logits = rng.normal(size=(4, 3))
        target = np.eye(3)[rng.integers(0, 3, 4)]
    else:
        logits = rng.normal(size=(2, 1, 4, 4))
        target = (rng.random((2, 1, 4, 4)) < 0.4).astype(float)
        if kind == "lovasz":
            # margins kept away from hinge kinks and sort ties
            logits = np.sign(logits) * (0.3 + np.abs(logits))
            g.add("add", ("x", "x"), "p")
        else:
            g.add("sigmoid", "x", "p")
        if kind == "weighted_bce":
            attrs = {"class_weight": 2.0}
        if kind == "focal":
            attrs = {"alpha": 0.25, "gamma": 2.0}
    g.add(kind, ("p", "target"), "loss", **attrs)
    g.outputs = ["loss"]
    return g, {"x": logits, "target": target}


LAYER_CASES = {
    "conv2d": conv_case,
    "batch_norm": bn_case,
    "squeeze_excitation": se_case,
    "upsample2": upsample_case,
    "max_pool2": pool_case,
    "dense": dense_case,
    "relu": lambda: activation_case("relu"),
    "sigmoid": lambda: activation_case("sigmoid"),
    "softmax": lambda: activation_case("softmax"),
}

LOSS_CASES = {k: (lambda k=k: loss_case(k)) for k in ("weighted_bce", "focal", "jaccard", "lovasz", "categorical_ce")}


def run_case(name: str, tolerance: float = 1e-3):
    """Gradient check of one case with respect to parameters and the first input."""
    cases = {**LAYER_CASES, **LOSS_CASES}
    g, inputs = cases[name]()
    first = "x" if "x" in inputs else "image"
    return finite_diff_check(g, inputs, epsilon=1e-5, tolerance=tolerance, wrt_inputs=(first,), mode=TRAINING)
