"""Class-incremental training strategies and their replay buffers.

Four strategies produce the per-stage checkpoint sequence the attack and
metric layers consume: iCaRL-style rehearsal with a sigmoid/distillation head,
greedy-balanced retraining (GDumb-style), and two experience-replay variants
with asymmetric losses (restricted cross-entropy, contrastive features).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import Tensor
from .data import LabeledImages, StageStream, cumulative_test
from .seeding import derive_seed, rng_for

STRATEGIES = ("icarl", "gdumb", "er-ace", "er-aml")


class StrategyConfigError(ValueError):
    pass


class BufferStateError(RuntimeError):
    pass


class LabelConsistencyError(ValueError):
    pass


@dataclass
class StrategyConfig:
    strategy: str = "icarl"
    epochs: int = 4
    batch_size: int = 64
    lr: float = 0.05
    lr_stage_decay: float = 1.0  # stage t trains at lr * decay^(t-1)
    momentum: float = 0.9
    weight_decay: float = 0.0
    buffer_capacity: int = 200
    distill_temperature: float = 1.0
    contrastive_temperature: float = 0.1
    gdumb_epochs: int = 40
    nme_classifier: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise StrategyConfigError(f"unknown strategy {self.strategy!r}")
        for name in ("epochs", "batch_size", "buffer_capacity", "gdumb_epochs"):
            if getattr(self, name) <= 0:
                raise StrategyConfigError(f"{name} must be positive")
        if self.distill_temperature <= 0 or self.contrastive_temperature <= 0:
            raise StrategyConfigError("temperatures must be positive")
        if not 0 < self.lr_stage_decay <= 1:
            raise StrategyConfigError("lr_stage_decay must lie in (0, 1]")

    def stage_lr(self, stage: int) -> float:
        return self.lr * self.lr_stage_decay ** (stage - 1)


class ReplayBuffer:
    """Fixed-budget exemplar store; insertion policy decides who stays."""

    def __init__(self, capacity: int, policy: str):
        if capacity < 1:
            raise StrategyConfigError("buffer capacity must be positive")
        self.capacity = capacity
        self.policy = policy
        self.images: list[np.ndarray] = []
        self.labels: list[int] = []

    def __len__(self):
        return len(self.images)

    def class_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for y in self.labels:
            counts[y] = counts.get(y, 0) + 1
        return counts

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.images:
            raise BufferStateError("replay buffer is empty")
        return np.stack(self.images), np.asarray(self.labels, dtype=np.int64)

    # herding policy -------------------------------------------------------
    def set_class(self, cls: int, images_in_order: np.ndarray):
        keep = [i for i, y in enumerate(self.labels) if y != cls]
        self.images = [self.images[i] for i in keep]
        self.labels = [self.labels[i] for i in keep]
        for img in images_in_order:
            self.images.append(np.array(img))
            self.labels.append(int(cls))

    def shrink_class(self, cls: int, m: int):
        """Keep the first m stored exemplars of cls (herding order is a priority)."""
        kept = 0
        keep_idx = []
        for i, y in enumerate(self.labels):
            if y == cls:
                if kept < m:
                    keep_idx.append(i)
                    kept += 1
            else:
                keep_idx.append(i)
        self.images = [self.images[i] for i in keep_idx]
        self.labels = [self.labels[i] for i in keep_idx]

    # balanced (greedy) policy ---------------------------------------------
    def balanced_insert(self, image: np.ndarray, label: int, rng: np.random.Generator):
        if len(self) < self.capacity:
            self.images.append(np.array(image))
            self.labels.append(int(label))
            return
        counts = self.class_counts()
        kmax = max(counts.values())
        if counts.get(int(label), 0) >= kmax:
            return
        largest = min(c for c, v in counts.items() if v == kmax)
        members = [i for i, y in enumerate(self.labels) if y == largest]
        evict = members[int(rng.integers(0, len(members)))]
        self.images[evict] = np.array(image)
        self.labels[evict] = int(label)


def reservoir_update(buffer: ReplayBuffer, image: np.ndarray, label: int,
                     stream_position: int, seed: int) -> ReplayBuffer:
    """Classical reservoir sampling; the draw for position i depends only on
    (seed, i), so replaying a stream reproduces the buffer exactly."""
    if len(buffer) < buffer.capacity:
        buffer.images.append(np.array(image))
        buffer.labels.append(int(label))
        return buffer
    j = int(rng_for(seed, "reservoir", stream_position).integers(0, stream_position + 1))
    if j < buffer.capacity:
        buffer.images[j] = np.array(image)
        buffer.labels[j] = int(label)
    return buffer


# ---------------------------------------------------------------------------
# exemplar selection and nearest-mean classification


def herding_select(features: np.ndarray, m: int) -> np.ndarray:
    """Greedy picks keeping the running exemplar mean closest to the class mean.

    Returns min(m, n) distinct indices in selection order; ties resolve to the
    lowest index.
    """
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("herding needs a non-empty [n, d] feature matrix")
    if m < 1:
        raise ValueError("m must be >= 1")
    feats = features.astype(np.float64)
    n = feats.shape[0]
    mu = feats.mean(axis=0)
    selected: list[int] = []
    running = np.zeros_like(mu)
    taken = np.zeros(n, dtype=bool)
    for k in range(1, min(m, n) + 1):
        dists = np.linalg.norm(mu[None, :] - (running[None, :] + feats) / k, axis=1)
        dists[taken] = np.inf
        pick = int(np.argmin(dists))
        selected.append(pick)
        taken[pick] = True
        running += feats[pick]
    return np.asarray(selected, dtype=np.int64)


def nme_classify(model: models.Network, exemplar_means: dict[int, np.ndarray],
                 x: np.ndarray) -> int:
    return int(nme_predict(model, exemplar_means, x[None])[0])


def nme_predict(model: models.Network, exemplar_means: dict[int, np.ndarray],
                images: np.ndarray) -> np.ndarray:
    """Nearest class mean over L2-normalized features; ties pick the lowest id."""
    if not exemplar_means:
        raise BufferStateError("no exemplar means available")
    classes = sorted(exemplar_means)
    mus = np.stack([exemplar_means[c] for c in classes]).astype(np.float64)
    mus /= np.maximum(np.linalg.norm(mus, axis=1, keepdims=True), 1e-12)
    feats = models.features_of(model, images).astype(np.float64)
    feats /= np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
    d2 = ((feats[:, None, :] - mus[None, :, :]) ** 2).sum(axis=2)
    picks = d2.argmin(axis=1)  # first minimum = lowest class id (sorted order)
    return np.asarray([classes[p] for p in picks], dtype=np.int64)


# ---------------------------------------------------------------------------
# losses


def erace_loss(logits: Tensor, labels: np.ndarray, is_incoming: np.ndarray,
               current_classes, seen_classes) -> Tensor:
    """Asymmetric CE: incoming rows range over current + in-batch classes,
    replay rows over all seen classes; mean over the whole batch."""
    labels = np.asarray(labels)
    is_incoming = np.asarray(is_incoming, dtype=bool)
    n, width = logits.data.shape
    present = set(int(y) for y in labels[is_incoming])
    allowed_in = sorted(set(int(c) for c in current_classes) | present)
    allowed_replay = sorted(int(c) for c in seen_classes)
    for i in range(n):
        allowed = allowed_in if is_incoming[i] else allowed_replay
        if int(labels[i]) not in allowed:
            raise LabelConsistencyError(
                f"label {int(labels[i])} outside the allowed set of sample {i}")
    mask = np.full((n, width), models.MASK_VALUE, dtype=logits.dtype)
    mask[np.ix_(is_incoming, allowed_in)] = 0.0
    mask[np.ix_(~is_incoming, allowed_replay)] = 0.0
    return ad.mean(ad.softmax_cross_entropy(ad.shift(logits, mask), labels))


def eraml_loss(features: Tensor, logits: Tensor, labels: np.ndarray,
               is_incoming: np.ndarray, seen_classes, temperature: float) -> Tensor:
    """Contrastive loss on incoming features plus CE on replay rows.

    Total is the sum of the two means; an incoming sample without a positive
    pair is skipped (contributes 0)."""
    labels = np.asarray(labels)
    is_incoming = np.asarray(is_incoming, dtype=bool)
    inc = np.flatnonzero(is_incoming)
    rep = np.flatnonzero(~is_incoming)
    terms: list[Tensor] = []
    if inc.size >= 2:
        z = ad.l2_normalize(ad.take_rows(features, inc))
        terms.append(ad.supcon_loss(z, labels[inc], temperature))
    if rep.size:
        masked = models.apply_mask(ad.take_rows(logits, rep), seen_classes,
                                   logits.data.shape[1])
        terms.append(ad.mean(ad.softmax_cross_entropy(masked, labels[rep])))
    if not terms:
        return Tensor(np.asarray(logits.dtype.type(0.0)))
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


# ---------------------------------------------------------------------------
# stage training


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield perm[lo:lo + batch_size]


def _optimizer(model: models.Network, cfg: StrategyConfig, stage: int = 1) -> ad.SGD:
    return ad.SGD(model.parameters(), cfg.stage_lr(stage), cfg.momentum, cfg.weight_decay)


def _train_step(model, opt, loss_fn, defense, prev_model, x, y, seen, current):
    """One SGD step with optional defense hooks around the strategy loss."""
    x_train = x
    if defense is not None:
        x_train = defense.transform_batch(model, x, y, seen)
    opt.zero_grad()
    loss = loss_fn(x_train)
    if defense is not None:
        loss = defense.augment_loss(loss, model, prev_model, x_train, y, seen, current)
    loss.backward()
    if defense is not None:
        defense.inject_gradients(model, x_train, y, seen)
    opt.step()
    if defense is not None:
        defense.after_batch(model, x_train, y, seen)


def icarl_train_stage(model: models.Network, stage_data: LabeledImages,
                      buffer: ReplayBuffer, prev_model: models.Network | None,
                      old_classes, current_classes, cfg: StrategyConfig,
                      rng: np.random.Generator, defense=None, stage: int = 1):
    """Sigmoid-BCE over seen classes; old-class targets distill from prev model."""
    old = sorted(int(c) for c in old_classes)
    if old and prev_model is None:
        raise StrategyConfigError("previous-stage model required once old classes exist")
    current = sorted(int(c) for c in current_classes)
    seen = sorted(old + current)
    width = model.head_width
    class_mask = np.zeros(width, dtype=np.float32)
    class_mask[seen] = 1.0

    if len(buffer):
        bimg, blab = buffer.as_arrays()
        images = np.concatenate([stage_data.images, bimg])
        labels = np.concatenate([stage_data.labels, blab])
    else:
        images, labels = stage_data.images, stage_data.labels

    opt = _optimizer(model, cfg, stage)
    current_arr = np.asarray(current)
    for _ in range(cfg.epochs):
        for idx in _batches(len(labels), cfg.batch_size, rng):
            xb, yb = images[idx], labels[idx]

            def loss_fn(x_in, yb=yb):
                targets = np.zeros((len(yb), width), dtype=np.float32)
                is_new = np.isin(yb, current_arr)
                targets[np.flatnonzero(is_new), yb[is_new]] = 1.0
                if old:
                    with ad.no_grad():
                        prev_z = prev_model.forward(x_in).data
                    zo = prev_z[:, old] / cfg.distill_temperature
                    ez = np.exp(-np.abs(zo))
                    targets[:, old] = np.where(zo >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
                logits = model.forward(x_in)
                return ad.mean(ad.sigmoid_bce(logits, targets, class_mask))

            _train_step(model, opt, loss_fn, defense, prev_model, xb, yb, seen, current)
    return model


def update_icarl_exemplars(model: models.Network, stage_data: LabeledImages,
                           buffer: ReplayBuffer, seen_classes, current_classes):
    """Shrink old exemplar sets and herd new ones; per-class budget capacity//seen."""
    m = max(1, buffer.capacity // len(list(seen_classes)))
    for cls in sorted(set(buffer.labels)):
        buffer.shrink_class(cls, m)
    for cls in sorted(int(c) for c in current_classes):
        idx = np.flatnonzero(stage_data.labels == cls)
        if idx.size == 0:
            continue
        feats = models.features_of(model, stage_data.images[idx]).astype(np.float64)
        feats /= np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
        order = herding_select(feats, m)
        buffer.set_class(cls, stage_data.images[idx[order]])


def exemplar_class_means(model: models.Network, buffer: ReplayBuffer) -> dict[int, np.ndarray]:
    means: dict[int, np.ndarray] = {}
    if not len(buffer):
        return means
    images, labels = buffer.as_arrays()
    feats = models.features_of(model, images).astype(np.float64)
    feats /= np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
    for cls in sorted(set(int(y) for y in labels)):
        means[cls] = feats[labels == cls].mean(axis=0)
    return means


def gdumb_train_stage(stage_data: LabeledImages, buffer: ReplayBuffer,
                      cfg: StrategyConfig, model_builder, seen_classes,
                      evict_rng: np.random.Generator, defense=None,
                      prev_model=None) -> models.Network:
    """Greedy-balanced buffer update, then retrain from scratch on the buffer.

    The trained model is a pure function of (buffer contents, config seed):
    init and batch-order streams are derived from the seed alone.
    """
    for i in range(len(stage_data)):
        buffer.balanced_insert(stage_data.images[i], int(stage_data.labels[i]), evict_rng)
    if not len(buffer):
        raise BufferStateError("gdumb buffer empty after update")
    images, labels = buffer.as_arrays()
    model = model_builder(derive_seed(cfg.seed, "gdumb.init"))
    seen = sorted(int(c) for c in seen_classes)
    opt = _optimizer(model, cfg)
    rng = rng_for(cfg.seed, "gdumb.train")
    for _ in range(cfg.gdumb_epochs):
        for idx in _batches(len(labels), cfg.batch_size, rng):
            xb, yb = images[idx], labels[idx]

            def loss_fn(x_in, yb=yb):
                masked = models.masked_logits(model, x_in, seen)
                return ad.mean(ad.softmax_cross_entropy(masked, yb))

            _train_step(model, opt, loss_fn, defense, prev_model, xb, yb, seen, seen)
    return model


def replay_train_stage(model: models.Network, stage_data: LabeledImages,
                       buffer: ReplayBuffer, variant: str, current_classes,
                       seen_classes, cfg: StrategyConfig, rng: np.random.Generator,
                       stream_position: int, defense=None, prev_model=None,
                       stage: int = 1) -> int:
    """Shared ER loop for er-ace / er-aml; returns the new stream position."""
    seen = sorted(int(c) for c in seen_classes)
    current = sorted(int(c) for c in current_classes)
    opt = _optimizer(model, cfg, stage)
    reservoir_seed = derive_seed(cfg.seed, "reservoir-stream")
    for _ in range(cfg.epochs):
        for idx in _batches(len(stage_data), cfg.batch_size, rng):
            xb, yb = stage_data.images[idx], stage_data.labels[idx]
            k = min(cfg.batch_size, len(buffer))
            if k:
                ridx = rng.choice(len(buffer), size=k, replace=False)
                bimg, blab = buffer.as_arrays()
                x = np.concatenate([xb, bimg[ridx]])
                y = np.concatenate([yb, blab[ridx]])
            else:
                x, y = xb, yb
            inc = np.zeros(len(y), dtype=bool)
            inc[:len(yb)] = True

            def loss_fn(x_in, y=y, inc=inc):
                feats = model.features(x_in)
                logits = model.layers[-1](feats)
                if variant == "er-ace":
                    return erace_loss(logits, y, inc, current, seen)
                return eraml_loss(feats, logits, y, inc, seen,
                                  cfg.contrastive_temperature)

            _train_step(model, opt, loss_fn, defense, prev_model, x, y, seen, current)
            for i in range(len(yb)):
                reservoir_update(buffer, xb[i], int(yb[i]), stream_position,
                                 reservoir_seed)
                stream_position += 1
    return stream_position


# ---------------------------------------------------------------------------
# scenario driver


@dataclass
class ScenarioResult:
    checkpoints: list[models.Checkpoint]
    clean_accuracy: list[float]
    nme_means: list[dict[int, np.ndarray]] = field(default_factory=list)

    @property
    def num_stages(self) -> int:
        return len(self.checkpoints)


def clone_model(model: models.Network) -> models.Network:
    dtype = next(iter(model.parameters().values())).data.dtype
    net = models.build_from_arch_id(model.arch_id, seed=0, dtype=dtype)
    net.load_state(model.state())
    net.seen_classes = list(model.seen_classes)
    net.loss_kind = model.loss_kind
    net.strategy = model.strategy
    return net


def evaluate_accuracy(model: models.Network, dataset: LabeledImages,
                      nme_means: dict[int, np.ndarray] | None = None) -> float:
    if nme_means:
        pred = nme_predict(model, nme_means, dataset.images)
    else:
        pred = models.predict(model, dataset.images)
    return float((pred == dataset.labels).mean())


def run_scenario(stream: StageStream, cfg: StrategyConfig, model_builder,
                 defense=None) -> ScenarioResult:
    """Train stage 1..T, snapshotting a checkpoint after every stage."""
    num_stages = stream.num_stages
    buffer_policy = {"icarl": "herding", "gdumb": "balanced",
                     "er-ace": "reservoir", "er-aml": "reservoir"}[cfg.strategy]
    buffer = ReplayBuffer(cfg.buffer_capacity, buffer_policy)
    model = model_builder(derive_seed(cfg.seed, "init"))
    if cfg.strategy == "icarl":
        model.loss_kind = "bce"
    model.strategy = cfg.strategy
    prev_model: models.Network | None = None
    evict_rng = rng_for(cfg.seed, "gdumb.evict")
    stream_position = 0

    checkpoints: list[models.Checkpoint] = []
    accuracy: list[float] = []
    nme_means: list[dict[int, np.ndarray]] = []
    for t in range(1, num_stages + 1):
        stage_train = stream.stages[t - 1][0]
        current = stream.class_map[t - 1]
        seen = stream.seen_classes(t)
        old = stream.seen_classes(t - 1) if t > 1 else []
        rng = rng_for(cfg.seed, "train-stage", t)
        if defense is not None:
            defense.stage_begin(t)

        if cfg.strategy == "icarl":
            icarl_train_stage(model, stage_train, buffer, prev_model, old, current,
                              cfg, rng, defense, stage=t)
            update_icarl_exemplars(model, stage_train, buffer, seen, current)
        elif cfg.strategy == "gdumb":
            model = gdumb_train_stage(stage_train, buffer, cfg, model_builder, seen,
                                      evict_rng, defense, prev_model)
            model.strategy = cfg.strategy
        else:
            stream_position = replay_train_stage(
                model, stage_train, buffer, cfg.strategy, current, seen, cfg, rng,
                stream_position, defense, prev_model, stage=t)

        model.seen_classes = list(seen)
        stage_means = exemplar_class_means(model, buffer) if cfg.strategy == "icarl" else {}
        nme_means.append(stage_means)
        aux = {}
        if stage_means:
            aux["nme_means"] = np.stack([stage_means[c] for c in sorted(stage_means)])
        checkpoints.append(models.snapshot(model, t, seen, cfg.strategy, cfg.seed, aux))
        eval_means = stage_means if (cfg.nme_classifier and cfg.strategy == "icarl") else None
        accuracy.append(evaluate_accuracy(model, cumulative_test(stream, t), eval_means))
        prev_model = clone_model(model)

    return ScenarioResult(checkpoints, accuracy, nme_means)
