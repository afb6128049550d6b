"""Mini-batch training with best-F1 checkpointing, two-stage training and a
resumable random hyperparameter search."""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data.augment import AugmentConfig, augment
from .data.labels import CATEGORIES
from .data.patches import Sample
from .evaluation import classification_metrics, f1_from_counts
from .graph import INFERENCE, TRAINING, Graph, GraphError, backprop, execute_graph
from .losses import LossConfig, categorical_ce, segmentation_loss
from .models import build_ofcn, is_fully_convolutional, save_model
from .optim import OptimizerState, optimizer_step

log = logging.getLogger(__name__)

KERNEL_OPS = ("conv2d", "dense", "squeeze_excitation")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    use_bn: bool = True
    use_se: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    l2_penalty: float = 0.0
    dropout: float = 0.1
    learning_rate: float = 1e-3
    class_weight: float = 2.0
    batch_size: int = 16
    epochs: int = 100
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig.none)
    optimizer: str = "adam"

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if self.epochs < 0:
            raise TrainingError("epochs must be >= 0")
        if self.l2_penalty < 0 or self.learning_rate <= 0:
            raise TrainingError("l2_penalty must be >= 0 and learning_rate > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise TrainingError("dropout must lie in [0, 1)")

    @classmethod
    def c1(cls, **overrides) -> "TrainConfig":
        """Best configuration of the reference search: BN, SE, no L2, dropout 0.1, LR 1e-3, CW 2."""
        base = dict(use_bn=True, use_se=True, loss=LossConfig("weighted_bce", 2.0), l2_penalty=0.0,
                    dropout=0.1, learning_rate=1e-3, class_weight=2.0)
        return cls(**(base | overrides))

    def loss_config(self) -> LossConfig:
        if self.loss.kind == "weighted_bce":
            return replace(self.loss, class_weight=self.class_weight)
        return self.loss

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    val_f1: list[float] = field(default_factory=list)
    best_epoch: int = -1
    wall_time: float = 0.0
    start_checksum: str = ""
    end_checksum: str = ""

    @property
    def best_f1(self) -> float:
        return self.val_f1[self.best_epoch] if self.best_epoch >= 0 else float("nan")

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "acc", "val_f1"])
            for i, row in enumerate(zip(self.loss, self.accuracy, self.val_f1)):
                w.writerow([i, *row])
        return path


def checksum(graph: Graph) -> str:
    h = hashlib.sha256()
    for name in sorted(graph.state()):
        h.update(name.encode())
        h.update(graph.state()[name].detach().cpu().numpy().tobytes())
    return h.hexdigest()


def kernel_params(graph: Graph) -> list[str]:
    """Weights subject to the L2 penalty: conv, dense and SE kernels (no biases, no BN)."""
    names = []
    for node in graph.nodes:
        if node.op in KERNEL_OPS:
            names.extend(p for p in node.params if p in graph.params and graph.params[p].dim() >= 2)
    return names


# batches ------------------------------------------------------------------


class _Task:
    """Turns samples into tensors and scores for one training objective."""

    def __init__(self, graph: Graph, category: str | None):
        if category is not None and category not in CATEGORIES:
            raise TrainingError(f"unknown category {category!r}")
        self.category = category
        self.classes = len(CATEGORIES[category]) if category else None
        if category is not None and "probs" not in graph.outputs:
            raise TrainingError("classification training needs a classifier graph")
        if category is None and "prob" not in graph.outputs:
            raise TrainingError("segmentation training needs a graph with a 'prob' output")

    def inputs(self, samples: list[Sample]) -> torch.Tensor:
        vv = np.stack([s.vv for s in samples]).astype(np.float32)[:, None]
        if self.category is None:
            return torch.from_numpy(vv)
        # second channel: the slick mask standing in for the OFCN soft output
        soft = np.stack([s.extra.get("soft", s.mask) for s in samples]).astype(np.float32)[:, None]
        return torch.from_numpy(np.concatenate([vv, soft], axis=1))

    def targets(self, samples: list[Sample]) -> torch.Tensor:
        if self.category is None:
            return torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.float32)[:, None])
        idx = [self.label(s) for s in samples]
        return torch.nn.functional.one_hot(torch.tensor(idx), self.classes).float()

    def label(self, s: Sample) -> int:
        if s.categories is None:
            raise TrainingError("classification sample without category labels")
        return s.categories.index(self.category)


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    chunks = [order[i : i + size] for i in range(0, len(order), size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        # batch norm needs more than one sample per channel in dense layers
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def predict_samples(graph: Graph, samples: list[Sample], category: str | None = None, batch: int = 16) -> np.ndarray:
    """Inference-mode outputs: soft maps (N, H, W) or class probabilities (N, k)."""
    task = _Task(graph, category)
    out = []
    with torch.no_grad():
        for i in range(0, len(samples), batch):
            x = task.inputs(samples[i : i + batch]).to(graph.dtype)
            run = execute_graph(graph, {"image": x}, INFERENCE)
            y = run.values["probs"] if category else run.values["prob"][:, 0]
            out.append(y.numpy())
    return np.concatenate(out)


def validation_score(graph: Graph, samples: list[Sample], category: str | None = None) -> float:
    """Pooled pixel F1 at 0.5, or macro F1 for a category classifier."""
    probs = predict_samples(graph, samples, category)
    if category:
        return classification_metrics(probs, [s.categories.index(category) for s in samples], category).macro_f1
    pred = probs >= 0.5
    truth = np.stack([s.mask for s in samples]).astype(bool)
    return f1_from_counts(int(np.sum(pred & truth)), int(np.sum(pred & ~truth)), int(np.sum(~pred & truth))).f1


# training -----------------------------------------------------------------


def train(
    model: Graph,
    train_set: list[Sample],
    val_set: list[Sample],
    config: TrainConfig,
    category: str | None = None,
    checkpoint_path=None,
    on_epoch=None,
) -> tuple[Graph, TrainHistory]:
    """Train ``model`` in place and return it holding its best-validation weights.

    With ``category`` set the model is a classifier for that category and the
    validation score is macro F1; otherwise it is pixel F1 at 0.5.
    """
    if not train_set:
        raise TrainingError("training set is empty")
    if not val_set:
        raise TrainingError("validation set is empty")
    task = _Task(model, category)
    history = TrainHistory(start_checksum=checksum(model))
    start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    state = OptimizerState(config.optimizer, config.learning_rate)
    loss_cfg = config.loss_config()
    l2_names = kernel_params(model) if config.l2_penalty > 0 else []
    best_state = None
    best = -np.inf

    for epoch in range(config.epochs):
        order = rng.permutation(len(train_set))
        total, correct, count, loss_sum, seen = 0, 0, 0, 0.0, 0
        for b, idx in enumerate(_batches(order, config.batch_size)):
            samples = [train_set[i] for i in idx]
            if not config.augment.is_identity:
                samples = [augment(s, config.augment, rng) for s in samples]
            x = task.inputs(samples).to(model.dtype)
            y = task.targets(samples).to(model.dtype)
            try:
                run = execute_graph(model, {"image": x}, TRAINING, rng=gen)
            except GraphError as exc:
                raise TrainingError(f"epoch {epoch} batch {b}: {exc}") from exc
            if category:
                loss = categorical_ce(run.values["probs"], y)
                pred = run.values["probs"].argmax(dim=1)
                correct += int((pred == y.argmax(dim=1)).sum())
                total += len(samples)
            else:
                loss = segmentation_loss(loss_cfg, run.values["prob"], run.values["logits"], y)
                correct += int(((run.values["prob"] >= 0.5) == (y > 0.5)).sum())
                total += y.numel()
            if l2_names:
                loss = loss + config.l2_penalty * sum((model.params[n] ** 2).sum() for n in l2_names)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {b}")
            grads = backprop(run, loss)
            optimizer_step(state, model.params, grads)
            loss_sum += float(loss.detach()) * len(samples)
            seen += len(samples)
            count += 1
        history.loss.append(loss_sum / seen)
        history.accuracy.append(correct / total)
        score = validation_score(model, val_set, category)
        history.val_f1.append(score)
        if score > best:
            best = score
            history.best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state().items()}
            if checkpoint_path is not None:
                save_model(model, checkpoint_path)
        log.info("epoch %d loss %.4f acc %.4f val %.4f", epoch, history.loss[-1], history.accuracy[-1], score)
        if on_epoch is not None:
            on_epoch(epoch, history)
    if best_state is not None:
        model.load_state(best_state)
    history.wall_time = time.perf_counter() - start
    history.end_checksum = checksum(model)
    return model, history


def downsample_sample(s: Sample, factor: int = 2) -> Sample:
    """Block-average the VV patch; a mask pixel is oil when at least half its block is."""
    h, w = s.vv.shape
    if h % factor or w % factor:
        raise TrainingError(f"patch {h}x{w} not divisible by {factor}")
    vv = s.vv.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    m = s.mask.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3)) >= 0.5
    return replace(s, vv=vv.astype(np.float32), mask=m.astype(np.uint8))


def train_two_stage(
    model: Graph,
    train_set: list[Sample],
    val_set: list[Sample],
    config: TrainConfig,
    stage1_epochs: int,
    stage2_epochs: int,
    checkpoint_path=None,
) -> tuple[Graph, list[TrainHistory]]:
    """Half-resolution stage then full-resolution stage on the same weights."""
    if not is_fully_convolutional(model):
        raise TrainingError("two-stage training needs a fully convolutional model")
    small_train = [downsample_sample(s) for s in train_set]
    small_val = [downsample_sample(s) for s in val_set]
    model, h1 = train(model, small_train, small_val, replace(config, epochs=stage1_epochs))
    model, h2 = train(model, train_set, val_set, replace(config, epochs=stage2_epochs, seed=config.seed + 1),
                      checkpoint_path=checkpoint_path)
    return model, [h1, h2]


# search -------------------------------------------------------------------


@dataclass
class SearchSpace:
    use_bn: tuple = (True, False)
    use_se: tuple = (True, False)
    loss: tuple = ("weighted_bce", "jaccard", "focal", "lovasz")
    l2_penalty: tuple = (0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2)
    dropout: tuple = (0.0, 0.1, 0.25, 0.5)
    learning_rate: tuple = (1e-4, 5e-4, 1e-3, 5e-3)
    class_weight: tuple = (1.0, 2.0, 3.0, 5.0)

    def axes(self) -> list[tuple[str, tuple]]:
        return [(k, tuple(v)) for k, v in asdict(self).items()]

    @property
    def size(self) -> int:
        return int(np.prod([len(v) for _, v in self.axes()]))

    def config_at(self, index: int, **base) -> TrainConfig:
        values = {}
        for name, grid in reversed(self.axes()):
            index, r = divmod(index, len(grid))
            values[name] = grid[r]
        loss = LossConfig(values.pop("loss"))
        return TrainConfig(loss=loss, **values, **base)

    def contains(self, config: TrainConfig) -> bool:
        d = asdict(self)
        return all(getattr(config, k) in d[k] for k in d if k != "loss") and config.loss.kind in self.loss


def _trial_key(cfg: TrainConfig) -> str:
    d = cfg.to_dict()
    d.pop("seed", None)
    return json.dumps(d, sort_keys=True)


@dataclass
class Trial:
    config: TrainConfig
    val_f1: float
    seed: int
    duration: float
    index: int


def hparam_search(
    space: SearchSpace,
    budget: int,
    train_set: list[Sample],
    val_set: list[Sample],
    rng: int = 0,
    epochs: int = 5,
    width: int = 16,
    batch_size: int = 32,
    log_path=None,
) -> list[Trial]:
    """Random search without replacement; returns trials ranked by validation F1.

    The sampling order is a fixed permutation of the grid for a given seed, so
    a resumed search with a larger budget extends the previous trials. Trials
    already in ``log_path`` are reused, never repeated.
    """
    if budget < 1:
        raise TrainingError("budget must be >= 1")
    order = np.random.default_rng(rng).permutation(space.size)
    indices = [int(i) for i in itertools.islice(itertools.cycle(order), budget)]
    done: dict[str, Trial] = {}
    log_path = Path(log_path) if log_path else None
    if log_path and log_path.exists():
        for line in log_path.read_text().splitlines():
            if line.strip():
                r = json.loads(line)
                cfg = TrainConfig.from_dict(r["config"])
                done[_trial_key(cfg)] = Trial(cfg, r["val_f1"], r["seed"], r["duration"], r["index"])
    trials = []
    for n, index in enumerate(indices):
        cfg = space.config_at(index, epochs=epochs, batch_size=batch_size, seed=int(rng) * 100003 + n)
        key = _trial_key(cfg)
        if key in done:
            trials.append(done[key])
            continue
        model = build_ofcn(width, cfg.use_bn, cfg.use_se, cfg.dropout, seed=cfg.seed)
        t0 = time.perf_counter()
        try:
            _, hist = train(model, train_set, val_set, cfg)
            score = hist.best_f1
        except TrainingError as exc:
            log.warning("trial %d failed: %s", index, exc)
            score = 0.0
        trial = Trial(cfg, float(score), cfg.seed, time.perf_counter() - t0, index)
        done[key] = trial
        trials.append(trial)
        if log_path:
            with log_path.open("a") as fh:
                fh.write(json.dumps({"config": cfg.to_dict(), "val_f1": trial.val_f1, "seed": trial.seed,
                                     "duration": trial.duration, "index": index}) + "\n")
    unique = {_trial_key(t.config): t for t in trials}
    return sorted(unique.values(), key=lambda t: (-t.val_f1, t.index))
