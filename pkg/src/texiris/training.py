"""Stage-1 autoencoder pre-training and Stage-2 supervised refinement."""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .checkpoint import save_checkpoint
from .errors import ConfigurationError, InputError, NumericalError, TrainingError
from .losses import cross_entropy, reconstruction_loss, ssim
from .models import (Autoencoder, CombNetVariant, build_autoencoder, build_combnet, encoder_state,
                     load_state)
from .tensor import Tensor, no_grad

STAGE_LR = {1: 0.5, 2: 0.01}


@dataclass
class TrainConfig:
    stage: int = 2
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = None  # None -> STAGE_LR[stage]
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_at: float = 0.6  # fraction of epochs after which lr is scaled
    lr_decay: float = 0.1
    seed: int = 0
    pool: str = "eap"
    head: str = "tel"
    checkpoint: str = None
    val_fraction: float = 0.2
    freeze_encoder: bool = False
    log: bool = False

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigurationError(f"stage must be 1 or 2, got {self.stage}")
        if self.learning_rate is None:
            self.learning_rate = STAGE_LR[self.stage]
        # zero is allowed: a frozen run is a useful baseline
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 for batch normalisation")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigurationError("val_fraction must lie in (0, 1)")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.pool not in ("max", "eap") or self.head not in ("tel", "fc"):
            raise ConfigurationError(f"bad pool/head combination {self.pool}/{self.head}")

    def lr_at(self, epoch):
        """Step schedule; ``epoch`` counts from 0."""
        if epoch >= int(self.lr_decay_at * self.epochs):
            return self.learning_rate * self.lr_decay
        return self.learning_rate


@dataclass
class TrainReport:
    stage: int
    losses: list = field(default_factory=list)
    metrics: list = field(default_factory=list)  # val SSIM (stage 1) / accuracy (stage 2)
    initial_metric: float = float("nan")
    best_epoch: int = -1
    wall_time: float = 0.0
    checkpoint_id: str = ""

    @property
    def best_metric(self):
        return self.metrics[self.best_epoch] if self.metrics else float("nan")

    def to_dict(self):
        out = asdict(self)
        out["best_metric"] = self.best_metric
        return out

    def loss_csv(self):
        rows = ["epoch,loss,metric"]
        rows += [f"{i + 1},{l!r},{m!r}" for i, (l, m) in enumerate(zip(self.losses, self.metrics))]
        return "\n".join(rows) + "\n"


def sgd_step(params, grads, cfg, velocity=None, lr=None):
    """SGD with momentum and L2 weight decay, in place.

    v <- momentum * v + g + weight_decay * p;  p <- p - lr * v
    Returns the velocity buffers (created on first use).
    """
    lr = cfg.learning_rate if lr is None else lr
    if velocity is None:
        velocity = [np.zeros_like(p.data) for p in params]
    for p, g, v in zip(params, grads, velocity):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ConfigurationError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        v *= cfg.momentum
        v += g
        if cfg.weight_decay:
            v += cfg.weight_decay * p.data
        p.data -= lr * v
    return velocity


class SGD:
    def __init__(self, params, cfg):
        self.params, self.cfg, self.velocity = list(params), cfg, None

    def step(self, lr=None):
        self.velocity = sgd_step(self.params, [p.grad for p in self.params], self.cfg,
                                 self.velocity, lr)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def stratified_split(labels, fraction, rng):
    """Indices (train, val) with ``fraction`` of every class held out.

    Classes with a single sample stay entirely in the training part.
    """
    labels = np.asarray(labels)
    train, val = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = int(round(fraction * len(idx))) if len(idx) > 1 else 0
        k = min(max(k, 1 if len(idx) > 1 else 0), len(idx) - 1)
        val.extend(idx[:k])
        train.extend(idx[k:])
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(val, dtype=np.int64))


def _batches(index, batch_size, rng):
    # shuffled membership, sorted within a batch so sums do not depend on order
    order = rng.permutation(index)
    for start in range(0, len(order), batch_size):
        yield np.sort(order[start:start + batch_size])


def _fingerprint(state):
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(np.ascontiguousarray(state[name], dtype="<f4").tobytes())
    return h.hexdigest()[:16]


def _emit(cfg, **record):
    if cfg.log:
        print(json.dumps(record), flush=True)


def mean_ssim(model, images, batch_size=32):
    model.eval()
    total = 0.0
    with no_grad():
        for start in range(0, len(images), batch_size):
            x = Tensor(images[start:start + batch_size])
            total += ssim(model(x), x).item() * len(x)
    return total / len(images)


def predict(model, images, batch_size=32):
    model.eval()
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            out.append(model(Tensor(images[start:start + batch_size])).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model, images, labels, batch_size=32):
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict(model, images, batch_size) == labels))


def _copy_state(model):
    return {k: np.array(v) for k, v in model.state_dict().items()}


def train_stage1(dataset, cfg):
    """Pre-train the encoder by minimising 1 - SSIM of the reconstruction.

    Returns the encoder weights of the epoch with the best validation SSIM and
    the training report.
    """
    if cfg.stage != 1:
        raise ConfigurationError("train_stage1 needs a stage-1 config")
    if len(dataset) == 0:
        raise InputError("empty dataset")
    started = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = stratified_split(dataset.labels, cfg.val_fraction, rng)
    if len(val_idx) == 0:
        val_idx = train_idx

    encoder, decoder = build_autoencoder(cfg.pool, seed=cfg.seed)
    model = Autoencoder(encoder, decoder)
    opt = SGD(model.parameters(), cfg)
    report = TrainReport(stage=1)
    report.initial_metric = mean_ssim(model, dataset.images[val_idx])
    best_state, best = None, -np.inf
    for epoch in range(cfg.epochs):
        model.train()
        lr = cfg.lr_at(epoch)
        losses = []
        try:
            for chunk in _batches(train_idx, cfg.batch_size, rng):
                x = Tensor(dataset.images[chunk])
                loss = reconstruction_loss(x, model(x))
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
                losses.append(loss.item())
            metric = mean_ssim(model, dataset.images[val_idx])
        except NumericalError as exc:
            raise TrainingError(f"stage 1 diverged in epoch {epoch + 1}: {exc}", epoch + 1) from exc
        report.losses.append(float(np.mean(losses)))
        report.metrics.append(metric)
        if metric > best:
            best, report.best_epoch = metric, epoch
            best_state = encoder_state(model)
        _emit(cfg, stage=1, epoch=epoch + 1, loss=report.losses[-1], metric=metric)
    report.wall_time = time.perf_counter() - started
    report.checkpoint_id = _fingerprint(best_state)
    if cfg.checkpoint:
        save_checkpoint(best_state, cfg.checkpoint, {
            "stage": 1, "pool": cfg.pool, "head": cfg.head, "seed": cfg.seed,
            "epoch": report.best_epoch + 1})
        report.checkpoint_id = str(cfg.checkpoint)
    return best_state, report


def train_stage2(dataset, encoder_init, cfg, input_hw=None):
    """Train encoder + classification head with cross-entropy.

    ``encoder_init`` is ``"random"``/``None`` or a stage-1 encoder state. The
    returned model carries the weights of the best validation epoch.
    """
    if cfg.stage != 2:
        raise ConfigurationError("train_stage2 needs a stage-2 config")
    if len(dataset) == 0:
        raise InputError("empty dataset")
    k = int(dataset.labels.max()) + 1
    if dataset.labels.min() < 0 or set(np.unique(dataset.labels)) != set(range(k)):
        raise InputError("labels must be contiguous 0..K-1")
    started = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = stratified_split(dataset.labels, cfg.val_fraction, rng)
    if len(val_idx) == 0:
        val_idx = train_idx

    pretrained = not (encoder_init is None or isinstance(encoder_init, str))
    variant = CombNetVariant(pool=cfg.pool, head=cfg.head,
                             init="pretrained" if pretrained else "random")
    hw = tuple(input_hw or dataset.images.shape[2:])
    model = build_combnet(variant, k, hw, encoder_state=encoder_init if pretrained else None,
                          seed=cfg.seed)
    params = [p for name, p in model.named_parameters()
              if not (cfg.freeze_encoder and name.startswith("encoder."))]
    opt = SGD(params, cfg)
    images, labels = dataset.images, dataset.labels

    report = TrainReport(stage=2)
    report.initial_metric = accuracy(model, images[val_idx], labels[val_idx])
    best_state, best = _copy_state(model), -np.inf
    for epoch in range(cfg.epochs):
        model.train()
        if cfg.freeze_encoder:
            model.encoder.eval()
        lr = cfg.lr_at(epoch)
        losses = []
        try:
            for chunk in _batches(train_idx, cfg.batch_size, rng):
                loss = cross_entropy(model(Tensor(images[chunk])), labels[chunk])
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
                losses.append(loss.item())
            metric = accuracy(model, images[val_idx], labels[val_idx])
        except NumericalError as exc:
            raise TrainingError(f"stage 2 diverged in epoch {epoch + 1}: {exc}", epoch + 1) from exc
        report.losses.append(float(np.mean(losses)))
        report.metrics.append(metric)
        if metric > best:
            best, report.best_epoch = metric, epoch
            best_state = _copy_state(model)
        _emit(cfg, stage=2, epoch=epoch + 1, loss=report.losses[-1], metric=metric)
    load_state(model, best_state)
    model.eval()
    report.wall_time = time.perf_counter() - started
    report.checkpoint_id = _fingerprint(best_state)
    if cfg.checkpoint:
        save_checkpoint(best_state, cfg.checkpoint, {
            "stage": 2, "pool": cfg.pool, "head": cfg.head, "seed": cfg.seed,
            "epoch": report.best_epoch + 1, "num_classes": k, "input_hw": list(hw)})
        report.checkpoint_id = str(cfg.checkpoint)
    return model, report
