"""Static computation graphs: declaration, execution, gradients, checkpoints.

A :class:`Graph` is an ordered list of :class:`Node` records plus a named
parameter table. Graphs are declared once by the model builders and executed
many times with :func:`execute_graph`; :func:`backprop` returns gradients of a
scalar with respect to the trainable parameters (and optionally the inputs).
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import layers, losses

TRAINING = "training"
INFERENCE = "inference"

CHECKPOINT_MAGIC = b"OSEG"
CHECKPOINT_VERSION = 1


class GraphError(RuntimeError):
    pass


@dataclass
class Node:
    name: str
    op: str
    inputs: tuple[str, ...]
    params: tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict)


class Graph:
    """Node list + parameter table.

    ``params`` holds trainable tensors, ``buffers`` holds non-trainable state
    (batch-norm running statistics). Both live in one namespace.
    """

    def __init__(self, inputs: dict[str, int], dtype: torch.dtype = torch.float32):
        self.inputs = dict(inputs)
        self.nodes: list[Node] = []
        self.params: dict[str, torch.Tensor] = {}
        self.buffers: dict[str, torch.Tensor] = {}
        self.outputs: list[str] = []
        self.dtype = dtype
        self.descriptor: dict = {}
        self._names = set(inputs)

    def add(self, op: str, inputs, name: str | None = None, params=(), **attrs) -> str:
        if op not in OPS:
            raise GraphError(f"unknown op {op!r}")
        if isinstance(inputs, str):
            inputs = (inputs,)
        for i in inputs:
            if i not in self._names:
                raise GraphError(f"node {name or op!r} consumes undefined value {i!r}")
        for p in params:
            if p not in self.params and p not in self.buffers:
                raise GraphError(f"node {name or op!r} references missing parameter {p!r}")
        name = name or f"{op}_{len(self.nodes)}"
        if name in self._names:
            raise GraphError(f"duplicate node name {name!r}")
        self._names.add(name)
        self.nodes.append(Node(name, op, tuple(inputs), tuple(params), attrs))
        return name

    def add_param(self, name: str, value, trainable: bool = True) -> str:
        t = torch.as_tensor(np.asarray(value), dtype=self.dtype).clone()
        if trainable:
            t.requires_grad_(True)
            self.params[name] = t
        else:
            self.buffers[name] = t
        return name

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise GraphError(f"no node named {name!r}")

    def state(self) -> dict[str, torch.Tensor]:
        return {**self.params, **self.buffers}

    def to(self, dtype: torch.dtype) -> "Graph":
        """Deep copy with every parameter cast to ``dtype``."""
        g = copy.copy(self)
        g.nodes = list(self.nodes)
        g._names = set(self._names)
        g.dtype = dtype
        g.params = {k: v.detach().to(dtype).clone().requires_grad_(True) for k, v in self.params.items()}
        g.buffers = {k: v.detach().to(dtype).clone() for k, v in self.buffers.items()}
        g.descriptor = copy.deepcopy(self.descriptor)
        return g

    def copy(self) -> "Graph":
        return self.to(self.dtype)

    def load_state(self, state: dict) -> None:
        missing = set(self.state()) - set(state)
        if missing:
            raise GraphError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        with torch.no_grad():
            for k, v in self.state().items():
                src = torch.as_tensor(np.asarray(state[k]), dtype=self.dtype)
                if src.shape != v.shape:
                    raise GraphError(f"parameter {k}: checkpoint shape {tuple(src.shape)} != {tuple(v.shape)}")
                v.copy_(src)

    def has_stochastic_nodes(self) -> bool:
        return any(n.op == "dropout" and n.attrs.get("rate", 0) > 0 for n in self.nodes)


@dataclass
class Execution:
    graph: Graph
    mode: str
    values: dict[str, torch.Tensor]
    inputs: dict[str, torch.Tensor]
    grad_enabled: bool

    @property
    def outputs(self) -> dict[str, torch.Tensor]:
        return {k: self.values[k] for k in self.graph.outputs}

    def __getitem__(self, key: str) -> torch.Tensor:
        return self.values[key]


@dataclass
class _Context:
    graph: Graph
    training: bool
    generator: torch.Generator | None
    updates: dict


def _p(ctx: _Context, name: str) -> torch.Tensor:
    return ctx.graph.params.get(name, ctx.graph.buffers.get(name))


def _op_conv(ctx, node, xs):
    w = _p(ctx, node.params[0])
    b = _p(ctx, node.params[1]) if len(node.params) > 1 else None
    return layers.conv2d(xs[0], w, b)


def _op_bn(ctx, node, xs):
    scale, shift, rm, rv = (_p(ctx, n) for n in node.params)
    y, update = layers.batch_norm(
        xs[0], scale, shift, rm, rv, ctx.training,
        momentum=node.attrs.get("momentum", layers.BN_MOMENTUM),
        eps=node.attrs.get("eps", layers.BN_EPSILON),
    )
    if update is not None:
        ctx.updates[node.params[2]] = update[0]
        ctx.updates[node.params[3]] = update[1]
    return y


def _op_se(ctx, node, xs):
    ps = [_p(ctx, n) for n in node.params]
    if len(ps) == 2:
        return layers.squeeze_excitation(xs[0], ps[0], ps[1])
    return layers.squeeze_excitation(xs[0], ps[0], ps[2], ps[1], ps[3])


def _op_dense(ctx, node, xs):
    w = _p(ctx, node.params[0])
    b = _p(ctx, node.params[1]) if len(node.params) > 1 else None
    return layers.dense(xs[0], w, b)


def _op_dropout(ctx, node, xs):
    return layers.dropout(xs[0], node.attrs.get("rate", 0.0), ctx.training, ctx.generator)


def _op_softmax(ctx, node, xs):
    return layers.activation(xs[0], "softmax", dim=node.attrs.get("dim", -1))


def _op_loss(kind):
    def run(ctx, node, xs):
        a = node.attrs
        if kind == "weighted_bce":
            return losses.weighted_bce(xs[0], xs[1], a.get("class_weight", 1.0))
        if kind == "focal":
            return losses.focal_loss(xs[0], xs[1], a.get("alpha", 0.25), a.get("gamma", 2.0))
        if kind == "jaccard":
            return losses.jaccard_loss(xs[0], xs[1])
        if kind == "lovasz":
            return losses.lovasz_loss(xs[0], xs[1], a.get("per_image", True))
        return losses.categorical_ce(xs[0], xs[1])

    return run


OPS: dict[str, Callable] = {
    "conv2d": _op_conv,
    "batch_norm": _op_bn,
    "relu": lambda ctx, node, xs: torch.relu(xs[0]),
    "sigmoid": lambda ctx, node, xs: torch.sigmoid(xs[0]),
    "softmax": _op_softmax,
    "max_pool2": lambda ctx, node, xs: layers.max_pool2(xs[0]),
    "squeeze_excitation": _op_se,
    "upsample2": lambda ctx, node, xs: layers.bilinear_upsample2(xs[0]),
    "concat": lambda ctx, node, xs: torch.cat(xs, dim=1),
    "dropout": _op_dropout,
    "flatten": lambda ctx, node, xs: xs[0].permute(0, 2, 3, 1).reshape(xs[0].shape[0], -1),
    "dense": _op_dense,
    "add": lambda ctx, node, xs: xs[0] + xs[1],
    "mul": lambda ctx, node, xs: xs[0] * xs[1],
    "sum": lambda ctx, node, xs: xs[0].sum(),
    "mean": lambda ctx, node, xs: xs[0].mean(),
    **{k: _op_loss(k) for k in losses.LOSS_KINDS},
}


def _as_tensor(x, dtype) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == dtype else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def execute_graph(
    graph: Graph,
    inputs: dict,
    mode: str = INFERENCE,
    rng: torch.Generator | int | None = None,
    update_stats: bool = True,
    check_finite: bool = True,
) -> Execution:
    """Run every node in declaration order.

    In training mode dropout is active, batch norm uses batch statistics and
    (unless ``update_stats`` is false) writes new running statistics back into
    the graph. ``rng`` may be a seed, which freezes the dropout masks.
    """
    if mode not in (TRAINING, INFERENCE):
        raise GraphError(f"mode must be {TRAINING!r} or {INFERENCE!r}")
    for name in graph.inputs:
        if name not in inputs:
            raise GraphError(f"missing graph input {name!r}")
    if isinstance(rng, int):
        rng = torch.Generator().manual_seed(rng)
    values = {k: _as_tensor(v, graph.dtype) for k, v in inputs.items()}
    for name, channels in graph.inputs.items():
        x = values[name]
        if channels and x.dim() == 4 and x.shape[1] != channels:
            raise GraphError(f"input {name!r} has {x.shape[1]} channels, graph declares {channels}")
    training = mode == TRAINING
    grad_enabled = training or any(v.requires_grad for v in values.values())
    ctx = _Context(graph, training, rng, {})
    with torch.set_grad_enabled(grad_enabled):
        for node in graph.nodes:
            xs = [values[i] for i in node.inputs]
            try:
                out = OPS[node.op](ctx, node, xs)
            except (layers.LayerError, losses.LossError, RuntimeError) as exc:
                if isinstance(exc, GraphError):
                    raise
                raise GraphError(f"node {node.name!r} ({node.op}): {exc}") from exc
            values[node.name] = out
    if check_finite:
        _check_finite(graph, values)
    if update_stats and ctx.updates:
        with torch.no_grad():
            for k, v in ctx.updates.items():
                graph.buffers[k].copy_(v)
    return Execution(graph, mode, values, {k: values[k] for k in inputs}, grad_enabled)


def _check_finite(graph: Graph, values: dict) -> None:
    # NaN/Inf propagate to the outputs; only then walk the nodes to name the first offender
    if all(torch.isfinite(values[o].detach()).all() for o in graph.outputs if o in values):
        return
    for node in graph.nodes:
        bad = ~torch.isfinite(values[node.name].detach())
        if bad.any():
            idx = tuple(int(i) for i in torch.nonzero(bad)[0])
            raise GraphError(f"non-finite activation in node {node.name!r} at index {idx}")


def backprop(run: Execution, loss, wrt_inputs=False) -> dict[str, torch.Tensor]:
    """Gradients of a scalar with respect to trainable parameters.

    ``loss`` is a node name of ``run.graph`` or a scalar tensor computed from
    the run's values. ``wrt_inputs`` adds gradients for the graph inputs that
    require grad (``True``) or for the named inputs (an iterable).
    """
    if not run.grad_enabled:
        raise GraphError("backprop needs a forward pass executed with gradients enabled")
    value = run.values[loss] if isinstance(loss, str) else loss
    if value.numel() != 1:
        raise GraphError(f"loss must be a scalar, got shape {tuple(value.shape)}")
    targets: dict[str, torch.Tensor] = dict(run.graph.params)
    if wrt_inputs:
        names = run.inputs if wrt_inputs is True else wrt_inputs
        for name in names:
            x = run.inputs[name]
            if not x.requires_grad:
                raise GraphError(f"input {name!r} does not require grad")
            targets[f"input:{name}"] = x
    names = list(targets)
    grads = torch.autograd.grad(value.reshape(()), [targets[n] for n in names], allow_unused=True)
    return {n: (torch.zeros_like(targets[n]) if g is None else g) for n, g in zip(names, grads)}


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(
    graph: Graph,
    inputs: dict,
    output: str | None = None,
    epsilon: float = 1e-3,
    tolerance: float = 1e-3,
    wrt_inputs: tuple[str, ...] = (),
    check_params: bool = True,
    max_elements: int | None = None,
    mode: str = TRAINING,
    rng_seed: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients with central differences in float64.

    The scalar checked is node ``output`` (default: the graph's first
    output). Stochastic nodes must have their masks frozen through
    ``rng_seed``. ``max_elements`` samples that many entries per tensor.
    """
    if epsilon <= 0:
        raise GraphError("epsilon must be positive")
    if mode == TRAINING and graph.has_stochastic_nodes() and rng_seed is None:
        raise GraphError("stochastic nodes are active; pass rng_seed to freeze dropout masks")
    g64 = graph.to(torch.float64)
    output = output or graph.outputs[0]
    x64 = {k: _as_tensor(v, torch.float64).detach().clone() for k, v in inputs.items()}

    def evaluate() -> float:
        with torch.no_grad():
            run = execute_graph(g64, x64, mode, rng=rng_seed, update_stats=False, check_finite=False)
        return float(run.values[output].detach())

    for name in wrt_inputs:
        x64[name].requires_grad_(True)
    run = execute_graph(g64, x64, mode, rng=rng_seed, update_stats=False)
    grads = backprop(run, output, wrt_inputs=wrt_inputs or False)
    for name in wrt_inputs:
        x64[name] = x64[name].detach()

    tensors = {}
    if check_params:
        tensors.update({n: g64.params[n] for n in g64.params})
    tensors.update({f"input:{n}": x64[n] for n in wrt_inputs})

    pick = np.random.default_rng(seed)
    errors = {}
    for name, tensor in tensors.items():
        flat = tensor.data.view(-1)
        analytic = grads[name].reshape(-1)
        idx = np.arange(flat.numel())
        if max_elements is not None and flat.numel() > max_elements:
            idx = pick.choice(flat.numel(), max_elements, replace=False)
        worst = 0.0
        for i in idx:
            orig = float(flat[i])
            flat[i] = orig + epsilon
            fp = evaluate()
            flat[i] = orig - epsilon
            fm = evaluate()
            flat[i] = orig
            numeric = (fp - fm) / (2 * epsilon)
            worst = max(worst, relative_error(float(analytic[i]), numeric))
        errors[name] = worst
    return GradCheckReport(errors, tolerance)


def save_checkpoint(state, path) -> None:
    """Write a named tensor table in the OSEG little-endian f32 format."""
    if isinstance(state, Graph):
        state = state.state()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(state))]
    for name, value in state.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise GraphError(f"{path}: bad checkpoint magic")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise GraphError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) * 4
            if off + size > len(buf):
                raise GraphError(f"{path}: truncated payload in parameter {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=off).reshape(dims).copy()
            off += size
    except struct.error as exc:
        raise GraphError(f"{path}: truncated payload") from exc
    return out
