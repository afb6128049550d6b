"""Graph builders for the OFCN segmenter and the category classifier.

Also holds the structural analyses (receptive field, parameter count),
activation maximisation, and self-describing model files (an OSEG
checkpoint plus a JSON architecture descriptor next to it).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import layers
from .graph import INFERENCE, Graph, GraphError, backprop, execute_graph, load_checkpoint, save_checkpoint

OFCN_DEPTH = 5
OFCN_POOLS = 4
CLASSIFIER_CHANNELS = (32, 64, 128, 256, 512)
CLASSIFIER_INPUT = 160


@dataclass
class ModelSpec:
    kind: str = "ofcn"
    width: int = 32
    use_bn: bool = True
    use_se: bool = True
    dropout_rate: float = 0.1
    se_ratio: int = layers.SE_RATIO
    num_classes: int | None = None
    channels: list[int] = field(default_factory=list)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def ofcn_channels(n: int) -> list[int]:
    return [n, 2 * n, 4 * n, 8 * n, 16 * n, 8 * n, 4 * n, 2 * n, n]


class _Builder:
    def __init__(self, graph: Graph, rng: np.random.Generator):
        self.g = graph
        self.rng = rng

    def conv(self, x, name, cin, cout, k=3, init="he"):
        fan_in = cin * k * k
        if init == "he":
            w = self.rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin, k, k))
        else:
            lim = np.sqrt(6.0 / (fan_in + cout * k * k))
            w = self.rng.uniform(-lim, lim, (cout, cin, k, k))
        self.g.add_param(f"{name}.weight", w)
        self.g.add_param(f"{name}.bias", np.zeros(cout))
        return self.g.add("conv2d", x, name, params=(f"{name}.weight", f"{name}.bias"))

    def bn(self, x, name, c):
        self.g.add_param(f"{name}.scale", np.ones(c))
        self.g.add_param(f"{name}.shift", np.zeros(c))
        self.g.add_param(f"{name}.running_mean", np.zeros(c), trainable=False)
        self.g.add_param(f"{name}.running_var", np.ones(c), trainable=False)
        return self.g.add(
            "batch_norm", x, name,
            params=(f"{name}.scale", f"{name}.shift", f"{name}.running_mean", f"{name}.running_var"),
        )

    def se(self, x, name, c, ratio):
        if c % ratio:
            raise GraphError(f"SE ratio {ratio} does not divide {c} channels")
        h = c // ratio
        self.g.add_param(f"{name}.reduce", self.rng.normal(0.0, np.sqrt(2.0 / c), (c, h)))
        self.g.add_param(f"{name}.expand", self.rng.normal(0.0, np.sqrt(1.0 / h), (h, c)))
        return self.g.add("squeeze_excitation", x, name, params=(f"{name}.reduce", f"{name}.expand"))

    def dense(self, x, name, cin, cout, init="he"):
        if init == "he":
            w = self.rng.normal(0.0, np.sqrt(2.0 / cin), (cin, cout))
        else:
            lim = np.sqrt(6.0 / (cin + cout))
            w = self.rng.uniform(-lim, lim, (cin, cout))
        self.g.add_param(f"{name}.weight", w)
        self.g.add_param(f"{name}.bias", np.zeros(cout))
        return self.g.add("dense", x, name, params=(f"{name}.weight", f"{name}.bias"))

    def conv_bn_relu(self, x, prefix, i, cin, cout, use_bn):
        x = self.conv(x, f"{prefix}_conv{i}", cin, cout)
        if use_bn:
            x = self.bn(x, f"{prefix}_bn{i}", cout)
        return self.g.add("relu", x, f"{prefix}_relu{i}")


def build_ofcn(
    n: int,
    use_bn: bool = True,
    use_se: bool = True,
    dropout_rate: float = 0.1,
    se_ratio: int = layers.SE_RATIO,
    seed: int = 0,
) -> Graph:
    """OFCN(n): four pooled encoder blocks, a bottleneck block and four decoder blocks.

    Outputs ``prob`` (sigmoid) and ``logits``. Input ``image`` is N x 1 x H x W
    with H, W divisible by 16.
    """
    if n < 1:
        raise GraphError("OFCN width must be >= 1")
    spec = ModelSpec("ofcn", n, use_bn, use_se, dropout_rate, se_ratio, None, ofcn_channels(n), seed)
    g = Graph({"image": 1})
    b = _Builder(g, np.random.default_rng(seed))
    x, cin = "image", 1
    skips = []
    for i, c in enumerate(spec.channels[:OFCN_DEPTH], start=1):
        p = f"enc{i}"
        x = b.conv_bn_relu(x, p, 1, cin, c, use_bn)
        x = b.conv_bn_relu(x, p, 2, c, c, use_bn)
        if i < OFCN_DEPTH:
            skips.append((x, c))
            x = g.add("max_pool2", x, f"{p}_pool")
            if use_se:
                x = b.se(x, f"{p}_se", c, se_ratio)
        x = g.add("dropout", x, f"{p}_drop", rate=dropout_rate)
        cin = c
    for i, c in enumerate(spec.channels[OFCN_DEPTH:], start=1):
        p = f"dec{i}"
        skip, cs = skips.pop()
        x = g.add("upsample2", x, f"{p}_up")
        x = g.add("concat", (x, skip), f"{p}_cat")
        x = b.conv_bn_relu(x, p, 1, cin + cs, c, use_bn)
        x = b.conv_bn_relu(x, p, 2, c, c, use_bn)
        x = g.add("dropout", x, f"{p}_drop", rate=dropout_rate)
        cin = c
    b.conv(x, "logits", cin, 1, k=1, init="glorot")
    g.add("sigmoid", "logits", "prob")
    g.outputs = ["prob", "logits"]
    g.descriptor = spec.to_dict()
    return g


def build_classifier(
    num_classes: int,
    use_bn: bool = True,
    use_se: bool = True,
    dropout_rate: float = 0.1,
    se_ratio: int = layers.SE_RATIO,
    seed: int = 0,
    input_size: int = CLASSIFIER_INPUT,
) -> Graph:
    """Five [conv-BN-ReLU-maxpool-SE] blocks and a two-layer dense softmax head.

    Input ``image`` is N x 2 x 160 x 160 (VV patch, soft OFCN mask).
    """
    if num_classes not in (2, 3, 4):
        raise GraphError(f"num_classes must be 2, 3 or 4, got {num_classes}")
    if input_size % 32:
        raise GraphError("classifier input size must be divisible by 32")
    spec = ModelSpec("classifier", CLASSIFIER_CHANNELS[0], use_bn, use_se, dropout_rate, se_ratio,
                     num_classes, list(CLASSIFIER_CHANNELS), seed)
    g = Graph({"image": 2})
    b = _Builder(g, np.random.default_rng(seed))
    x, cin = "image", 2
    for i, c in enumerate(CLASSIFIER_CHANNELS, start=1):
        x = b.conv_bn_relu(x, f"b{i}", 1, cin, c, use_bn)
        x = g.add("max_pool2", x, f"b{i}_pool")
        if use_se:
            x = b.se(x, f"b{i}_se", c, se_ratio)
        cin = c
    x = g.add("flatten", x, "flatten")
    side = input_size // 32
    x = b.dense(x, "head_dense1", side * side * cin, 256)
    if use_bn:
        x = b.bn(x, "head_bn", 256)
    x = g.add("relu", x, "head_relu")
    x = g.add("dropout", x, "head_drop", rate=dropout_rate)
    b.dense(x, "class_logits", 256, num_classes, init="glorot")
    g.add("softmax", "class_logits", "probs", dim=-1)
    g.outputs = ["probs", "class_logits"]
    g.descriptor = spec.to_dict() | {"input_size": input_size}
    return g


def build_pixelwise(weight: float = 1.0, bias: float = 0.0, channels: int = 1) -> Graph:
    """1x1 convolution followed by a sigmoid: a dihedral-equivariant stand-in model."""
    g = Graph({"image": channels})
    g.add_param("logits.weight", np.full((1, channels, 1, 1), weight))
    g.add_param("logits.bias", np.array([bias]))
    g.add("conv2d", "image", "logits", params=("logits.weight", "logits.bias"))
    g.add("sigmoid", "logits", "prob")
    g.outputs = ["prob", "logits"]
    g.descriptor = {"kind": "pixelwise", "weight": weight, "bias": bias, "channels": channels}
    return g


def pooling_depth(graph: Graph) -> int:
    return sum(1 for n in graph.nodes if n.op == "max_pool2")


def is_fully_convolutional(graph: Graph) -> bool:
    return not any(n.op in ("dense", "flatten") for n in graph.nodes)


# structural analyses -------------------------------------------------------


@dataclass
class ReceptiveFieldEntry:
    layer: str
    receptive_field: int
    jump: int


@dataclass
class ReceptiveFieldReport:
    entries: list[ReceptiveFieldEntry]

    def __getitem__(self, layer: str) -> ReceptiveFieldEntry:
        for e in self.entries:
            if e.layer == layer:
                return e
        raise KeyError(layer)

    @property
    def deepest(self) -> int:
        return self.entries[-1].receptive_field

    def block_values(self) -> list[int]:
        """Receptive field at the end of each encoder block (last pool or conv)."""
        last: dict[str, int] = {}
        for e in self.entries:
            last[e.layer.split("_")[0]] = e.receptive_field
        return list(last.values())


def receptive_field(graph: Graph, prefix: str = "enc") -> ReceptiveFieldReport:
    """Receptive field of conv/pool layers along the encoder path.

    Uses rf' = rf + (k - 1) * jump and jump' = jump * stride.
    """
    rf, jump = 1, 1
    entries = []
    for node in graph.nodes:
        if not node.name.startswith(prefix):
            continue
        if node.op == "conv2d":
            k = graph.params[node.params[0]].shape[-1]
            rf += (k - 1) * jump
        elif node.op == "max_pool2":
            rf += jump
            jump *= 2
        else:
            continue
        entries.append(ReceptiveFieldEntry(node.name, rf, jump))
    return ReceptiveFieldReport(entries)


def param_count(graph: Graph) -> int:
    """Number of trainable scalars; batch-norm running statistics excluded."""
    return sum(int(p.numel()) for p in graph.params.values())


def param_breakdown(graph: Graph) -> list[tuple[str, int]]:
    rows: dict[str, int] = {}
    for name, p in graph.params.items():
        layer = name.rsplit(".", 1)[0]
        rows[layer] = rows.get(layer, 0) + int(p.numel())
    return list(rows.items())


# activation maximisation --------------------------------------------------


@dataclass
class ActivationMaximization:
    image: np.ndarray
    trace: list[float]


def activation_maximization(
    graph: Graph,
    layer: str,
    filter_index: int,
    steps: int = 50,
    step_size: float = 0.05,
    rng: np.random.Generator | int | None = 0,
    size: tuple[int, int] = (64, 64),
    max_halvings: int = 8,
) -> ActivationMaximization:
    """Gradient ascent on the input to maximise one filter's mean activation.

    Starts from uniform noise in [0, 1] and clamps to [0, 1] after every step.
    A step that lowers the activation is retried with half the step size;
    if no retry helps the image is left unchanged, so the trace never drops.
    """
    graph.node(layer)
    rng = np.random.default_rng(rng)
    channels = next(iter(graph.inputs.values())) or 1
    input_name = next(iter(graph.inputs))
    x = torch.as_tensor(rng.uniform(0.0, 1.0, (1, channels, *size)), dtype=graph.dtype)

    def objective(img: torch.Tensor, grad: bool):
        img = img.clone().requires_grad_(grad)
        run = execute_graph(graph, {input_name: img}, INFERENCE)
        act = run.values[layer]
        if act.dim() < 2 or not 0 <= filter_index < act.shape[1]:
            raise GraphError(f"layer {layer!r} has no filter {filter_index}")
        value = act[:, filter_index].mean()
        if not grad:
            return float(value.detach()), None
        g = backprop(run, value, wrt_inputs=(input_name,))[f"input:{input_name}"]
        return float(value.detach()), g

    current, _ = objective(x, False)
    trace = [current]
    for _ in range(steps):
        _, g = objective(x, True)
        g = g / (g.pow(2).mean().sqrt() + 1e-12)
        eta = step_size
        for _ in range(max_halvings + 1):
            cand = (x + eta * g).clamp(0.0, 1.0)
            value, _ = objective(cand, False)
            if value >= current:
                x, current = cand, value
                break
            eta /= 2
        trace.append(current)
    img = x[0].detach().numpy()
    return ActivationMaximization(img[0] if channels == 1 else img, trace)


# persistence --------------------------------------------------------------


def descriptor_path(path) -> Path:
    return Path(str(path) + ".json")


def save_model(graph: Graph, path) -> None:
    save_checkpoint(graph, path)
    descriptor_path(path).write_text(json.dumps(graph.descriptor, indent=2, sort_keys=True))


def graph_from_descriptor(d: dict) -> Graph:
    kind = d.get("kind")
    if kind == "ofcn":
        return build_ofcn(d["width"], d["use_bn"], d["use_se"], d["dropout_rate"], d["se_ratio"], d.get("seed", 0))
    if kind == "classifier":
        return build_classifier(d["num_classes"], d["use_bn"], d["use_se"], d["dropout_rate"], d["se_ratio"],
                                d.get("seed", 0), d.get("input_size", CLASSIFIER_INPUT))
    if kind == "pixelwise":
        return build_pixelwise(d["weight"], d["bias"], d.get("channels", 1))
    raise GraphError(f"unknown model kind {kind!r}")


def load_model(path) -> Graph:
    dpath = descriptor_path(path)
    if not dpath.exists():
        raise GraphError(f"missing architecture descriptor {dpath}")
    d = json.loads(dpath.read_text())
    graph = graph_from_descriptor(d)
    graph.load_state(load_checkpoint(path))
    graph.descriptor = d
    return graph
