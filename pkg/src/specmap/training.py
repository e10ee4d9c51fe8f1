"""Losses, the Adam optimizer, learning-rate schedules, and the two-stage
training protocol: classifier and mapper pretraining, then joint
fidelity+mimic refinement of the mapper against the frozen classifier.

Batch order and dropout masks are keyed by (seed, epoch) and the optimizer
step counter, so trajectories are reproducible and resume exactly from a
checkpoint. Mapper stages iterate utterance batches (the mimic term needs
whole utterances to rebuild context windows); the frame-level DNN
classifier pretrains on shuffled frame batches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .data import SplitData
from .formats import Checkpoint, load_checkpoint, save_checkpoint
from .models import Model
from .tensor import Tape, Tensor, backward
from .util import rng_stream


class DivergenceError(RuntimeError):
    """Training loss left the finite, bounded regime."""


@dataclass
class TrainConfig:
    epochs: int = 5
    lr0: float = 1e-4
    alpha: float = 0.0
    seed: int = 0
    batch_frames: int = 128
    batch_utts: int = 2
    lr_mode: str = "exp"            # exp: staircase decay; drop: one-shot cut
    decay: float = 0.95
    decay_every: int = 10_000
    lr_drop_factor: float = 0.1
    patience: int = 3
    min_rel_improve: float = 0.005
    divergence_limit: float = 1e6
    stop_dev_factor: float | None = None
    restore_best: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must be in (0, 1]")
        if self.lr_mode not in ("exp", "drop"):
            raise ValueError(f"unknown lr mode {self.lr_mode!r}")


def lr_schedule(step: int, cfg: TrainConfig, mode: str | None = None,
                dropped: bool = False) -> float:
    """Learning rate at a step: staircase decay, or a post-trigger cut to
    one tenth of the initial rate."""
    if step < 0:
        raise ValueError("step must be non-negative")
    mode = mode or cfg.lr_mode
    if mode == "exp":
        return cfg.lr0 * cfg.decay ** (step // cfg.decay_every)
    if mode == "drop":
        return cfg.lr0 * cfg.lr_drop_factor if dropped else cfg.lr0
    raise ValueError(f"unknown lr mode {mode!r}")


class DropTrigger:
    """Fires once after `patience` dev evaluations without enough relative
    improvement; stays fired."""

    def __init__(self, patience: int, min_rel_improve: float):
        self.patience = patience
        self.min_rel_improve = min_rel_improve
        self.best = math.inf
        self.stale = 0
        self.dropped = False

    def observe(self, dev_loss: float) -> bool:
        if self.dropped:
            return True
        if dev_loss < self.best * (1.0 - self.min_rel_improve):
            self.best = dev_loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.dropped = True
        return self.dropped


class Adam:
    """Bias-corrected Adam over a named parameter dict; frozen entries are
    skipped, a missing gradient on a trainable one is an error."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if not p.requires_grad:
                continue
            if p.grad is None:
                raise ValueError(f"missing gradient for trainable parameter {name}")
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            p.data = p.data - lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
        return out

    def load_state(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for name, p in self.params.items():
            m = np.asarray(arrays[f"m/{name}"], dtype=np.float64)
            v = np.asarray(arrays[f"v/{name}"], dtype=np.float64)
            if m.shape != p.data.shape or v.shape != p.data.shape:
                raise ValueError(f"optimizer state shape mismatch for {name}")
            self.m[name] = m.copy()
            self.v[name] = v.copy()
        self.t = int(t)


# ---------------------------------------------------------------------------
# losses


def fidelity_loss(mapped: Tensor, target) -> Tensor:
    """Mean squared error between mapped frames and the clean frames."""
    return ops.mse(mapped, target)


def mimic_loss(clean_logits, denoised_logits: Tensor, classifier: Model) -> Tensor:
    """Mean squared distance between the frozen classifier's pre-softmax
    outputs on clean and on mapped features; gradient reaches the mapper only."""
    if not classifier.frozen:
        raise ValueError("mimic loss requires a frozen classifier")
    return ops.mse(denoised_logits, Tensor(np.asarray(clean_logits)))


def joint_loss(fid: Tensor, mim: Tensor | None, alpha: float) -> Tensor:
    if mim is None or alpha == 0.0:
        return fid
    return ops.add(fid, ops.scale(mim, alpha))


def suggest_alpha(fidelity_value: float, mimic_value: float) -> float:
    """Mimic weight that balances the two loss magnitudes at stage start.

    The published weights (0.1 for a frame-DNN teacher, 0.05 for the
    recurrent one) encode this balance for real speech corpora; corpora
    with different logit scales need their own value.
    """
    if mimic_value <= 0:
        raise ValueError("mimic loss must be positive to balance against")
    return fidelity_value / mimic_value


def _check_finite(value: float, what: str, limit: float) -> None:
    if not math.isfinite(value) or value > limit:
        raise DivergenceError(f"{what} diverged: {value!r} (limit {limit:g})")


# ---------------------------------------------------------------------------
# evaluation helpers (plain forward passes, no tape)


def map_split(mapper: Model, data: SplitData, batch_rows: int = 512) -> np.ndarray:
    """Run the mapper over a whole split in eval mode; returns (N, 257)."""
    out = np.empty_like(data.clean)
    for lo in range(0, data.num_frames, batch_rows):
        rows = np.arange(lo, min(lo + batch_rows, data.num_frames))
        x = data.mapper_input(mapper.arch, rows)
        out[rows] = mapper.forward(x, mode="eval").data
    return out


def split_fidelity(data: SplitData, mapped: np.ndarray | None = None) -> float:
    """MSE of mapped (or raw noisy, when None) frames against clean frames."""
    base = data.noisy if mapped is None else mapped
    return float(np.mean((base - data.clean) ** 2))


def classifier_logits(classifier: Model, data: SplitData, base: np.ndarray,
                      batch_rows: int = 512) -> np.ndarray:
    """Frozen/eval classifier outputs over a base (N, 257) feature matrix."""
    n = data.num_frames
    out = np.empty((n, classifier.num_classes))
    if classifier.arch == "dnn":
        for lo in range(0, n, batch_rows):
            rows = np.arange(lo, min(lo + batch_rows, n))
            out[rows] = classifier.forward(data.gather_spliced(base, rows), mode="eval").data
    else:
        for u in range(data.num_utts):
            rows = data.utt_rows(u)
            out[rows] = classifier.forward(base[rows], mode="eval").data
    return out


def logits_metrics(logits: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """(cross entropy, frame accuracy) of logits against integer labels."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    ce = float(-logp[np.arange(len(labels)), labels].mean())
    acc = float((logits.argmax(axis=1) == labels).mean())
    return ce, acc


def classifier_metrics(classifier: Model, data: SplitData,
                       base: np.ndarray | None = None) -> tuple[float, float]:
    base = data.clean if base is None else base
    return logits_metrics(classifier_logits(classifier, data, base), data.labels)


# ---------------------------------------------------------------------------
# shared plumbing


def _utt_batches(num_utts: int, batch_utts: int, rng) -> list[np.ndarray]:
    order = rng.permutation(num_utts)
    return [order[i : i + batch_utts] for i in range(0, num_utts, batch_utts)]


def _frame_batches(num_frames: int, batch_frames: int, rng) -> list[np.ndarray]:
    order = rng.permutation(num_frames)
    return [order[i : i + batch_frames] for i in range(0, num_frames, batch_frames)]


def _snapshot(model: Model) -> dict[str, np.ndarray]:
    return {name: arr.copy() for name, arr in model.state_arrays().items()}


class TrainResult:
    """Final trace plus the best-dev parameter snapshot (already restored)."""

    def __init__(self, trace: list[dict], best_dev: float):
        self.trace = trace
        self.best_dev = best_dev


# ---------------------------------------------------------------------------
# classifier pretraining


def pretrain_classifier(classifier: Model, train_data: SplitData, dev_data: SplitData,
                        cfg: TrainConfig, adam: Adam | None = None,
                        start_epoch: int = 0) -> TrainResult:
    """Minimise frame cross-entropy on clean features.

    The frame-level model trains on shuffled frame batches of spliced rows;
    the recurrent model trains utterance by utterance with full
    backpropagation through time.
    """
    if classifier.frozen:
        raise ValueError("cannot train a frozen classifier")
    adam = adam or Adam(classifier.params)
    trace: list[dict] = []
    best = math.inf
    best_state = _snapshot(classifier)
    trigger = DropTrigger(cfg.patience, cfg.min_rel_improve)
    dropped = False

    clean_spliced = train_data.gather_spliced if classifier.arch == "dnn" else None
    for epoch in range(start_epoch, cfg.epochs):
        order_rng = rng_stream(cfg.seed, "order", epoch)
        if classifier.arch == "dnn":
            batches = _frame_batches(train_data.num_frames, cfg.batch_frames, order_rng)
        else:
            batches = _utt_batches(train_data.num_utts, min(cfg.batch_utts, 4), order_rng)

        for batch in batches:
            lr = lr_schedule(adam.t, cfg, dropped=dropped)
            drop_rng = rng_stream(cfg.seed, "dropout", adam.t)
            adam.zero_grads()
            with Tape() as tape:
                if classifier.arch == "dnn":
                    logits = classifier.forward(clean_spliced(train_data.clean, batch),
                                                mode="train")
                    loss = ops.softmax_cross_entropy(logits, train_data.labels[batch])
                else:
                    total = int(sum(train_data.bounds[u + 1] - train_data.bounds[u]
                                    for u in batch))
                    loss = None
                    for u in batch:
                        rows = train_data.utt_rows(u)
                        logits = classifier.forward(train_data.clean[rows], mode="train",
                                                    rng=drop_rng)
                        ce = ops.softmax_cross_entropy(logits, train_data.labels[rows])
                        part = ops.scale(ce, len(rows) / total)
                        loss = part if loss is None else ops.add(loss, part)
            _check_finite(loss.item(), "classifier cross-entropy", cfg.divergence_limit)
            backward(tape, loss)
            adam.step(lr)
            trace.append({"step": adam.t, "lr": lr, "joint": loss.item()})

        dev_ce, _ = classifier_metrics(classifier, dev_data)
        trace.append({"step": adam.t, "lr": lr_schedule(adam.t, cfg, dropped=dropped),
                      "dev_ce": dev_ce})
        if cfg.lr_mode == "drop":
            dropped = trigger.observe(dev_ce)
        if dev_ce < best:
            best = dev_ce
            best_state = _snapshot(classifier)

    if cfg.restore_best:
        classifier.load_state(best_state)
    return TrainResult(trace, best)


# ---------------------------------------------------------------------------
# mapper training (fidelity-only and joint fidelity+mimic)


class _MimicContext:
    """Frozen classifier plus cached clean-speech logits for a split."""

    def __init__(self, classifier: Model, train_data: SplitData, dev_data: SplitData):
        if not classifier.frozen:
            raise ValueError("mimic training requires a frozen classifier")
        self.classifier = classifier
        self.train_logits = classifier_logits(classifier, train_data, train_data.clean)
        self.dev_logits = classifier_logits(classifier, dev_data, dev_data.clean)

    def denoised_logits(self, data: SplitData, batch, mapped: Tensor) -> Tensor:
        """Classifier outputs on mapped frames, differentiable through them."""
        parts = []
        offset = 0
        for u in batch:
            t_len = int(data.bounds[u + 1] - data.bounds[u])
            utt_frames = ops.slice_rows(mapped, offset, offset + t_len)
            if self.classifier.arch == "dnn":
                parts.append(ops.splice_rows(utt_frames, context=5))
            else:
                parts.append(self.classifier.forward(utt_frames, mode="eval"))
            offset += t_len
        if self.classifier.arch == "dnn":
            return self.classifier.forward(ops.concat_rows(parts), mode="eval")
        return ops.concat_rows(parts)


def _dev_eval(mapper: Model, dev_data: SplitData, mimic: _MimicContext | None,
              alpha: float):
    mapped = map_split(mapper, dev_data)
    dev_fid = split_fidelity(dev_data, mapped)
    dev_ce = None
    objective = dev_fid
    if mimic is not None:
        logits = classifier_logits(mimic.classifier, dev_data, mapped)
        dev_ce, _ = logits_metrics(logits, dev_data.labels)
        if alpha > 0.0:
            dev_mim = float(np.mean((logits - mimic.dev_logits) ** 2))
            objective = dev_fid + alpha * dev_mim
    return dev_fid, dev_ce, objective


def _train_mapper(mapper: Model, train_data: SplitData, dev_data: SplitData,
                  cfg: TrainConfig, mimic: _MimicContext | None,
                  adam: Adam | None = None, start_epoch: int = 0) -> TrainResult:
    adam = adam or Adam(mapper.params)
    trace: list[dict] = []
    trigger = DropTrigger(cfg.patience, cfg.min_rel_improve)
    dropped = False
    alpha = cfg.alpha

    initial_fid, initial_ce, initial_obj = _dev_eval(mapper, dev_data, mimic, alpha)
    trace.append({"step": adam.t, "lr": lr_schedule(adam.t, cfg, dropped=dropped),
                  "dev_fidelity": initial_fid, "dev_ce": initial_ce})
    best = initial_obj
    best_state = _snapshot(mapper)

    for epoch in range(start_epoch, cfg.epochs):
        order_rng = rng_stream(cfg.seed, "utt_order", epoch)
        for batch in _utt_batches(train_data.num_utts, cfg.batch_utts, order_rng):
            rows = np.concatenate([train_data.utt_rows(u) for u in batch])
            x = train_data.mapper_input(mapper.arch, rows)
            target = train_data.clean[rows]
            lr = lr_schedule(adam.t, cfg, dropped=dropped)
            drop_rng = rng_stream(cfg.seed, "dropout", adam.t)
            adam.zero_grads()
            with Tape() as tape:
                mapped = mapper.forward(x, mode="train", rng=drop_rng)
                fid = fidelity_loss(mapped, target)
                mim = None
                if mimic is not None and alpha > 0.0:
                    denoised = mimic.denoised_logits(train_data, batch, mapped)
                    mim = mimic_loss(mimic.train_logits[rows], denoised, mimic.classifier)
                loss = joint_loss(fid, mim, alpha)
            _check_finite(loss.item(), "mapper loss", cfg.divergence_limit)
            backward(tape, loss)
            adam.step(lr)
            row = {"step": adam.t, "lr": lr, "fidelity": fid.item(), "joint": loss.item()}
            if mim is not None:
                row["mimic"] = mim.item()
            trace.append(row)

        dev_fid, dev_ce, objective = _dev_eval(mapper, dev_data, mimic, alpha)
        trace.append({"step": adam.t, "lr": lr_schedule(adam.t, cfg, dropped=dropped),
                      "dev_fidelity": dev_fid, "dev_ce": dev_ce})
        if cfg.lr_mode == "drop":
            dropped = trigger.observe(objective)
        if objective < best:
            best = objective
            best_state = _snapshot(mapper)
        if cfg.stop_dev_factor is not None and dev_fid <= cfg.stop_dev_factor * initial_fid:
            break

    if cfg.restore_best:
        mapper.load_state(best_state)
    return TrainResult(trace, best)


def pretrain_mapper(mapper: Model, train_data: SplitData, dev_data: SplitData,
                    cfg: TrainConfig, adam: Adam | None = None,
                    start_epoch: int = 0) -> TrainResult:
    """Stage one: minimise the fidelity loss on parallel noisy/clean frames."""
    if mapper.frozen:
        raise ValueError("cannot train a frozen mapper")
    return _train_mapper(mapper, train_data, dev_data, cfg, mimic=None,
                         adam=adam, start_epoch=start_epoch)


def train_mimic(mapper: Model, classifier: Model, train_data: SplitData,
                dev_data: SplitData, cfg: TrainConfig, adam: Adam | None = None,
                start_epoch: int = 0) -> TrainResult:
    """Stage two: continue mapper training on fidelity + alpha * mimic.

    The classifier must be frozen; with alpha == 0 the mimic branch is not
    evaluated at all, so the run reproduces fidelity-only training exactly.
    """
    if mapper.frozen:
        raise ValueError("cannot train a frozen mapper")
    if not classifier.frozen:
        raise ValueError("mimic training requires a frozen classifier")
    mimic = _MimicContext(classifier, train_data, dev_data) if cfg.alpha > 0.0 else None
    return _train_mapper(mapper, train_data, dev_data, cfg, mimic=mimic,
                         adam=adam, start_epoch=start_epoch)


# ---------------------------------------------------------------------------
# checkpoint bridge


def save_training_state(path, model: Model, adam: Adam | None = None,
                        epoch: int = 0, extra_config: dict | None = None) -> None:
    """Write a checkpoint and snap the live state onto its float32 values.

    The snap makes saving a deterministic transformation of the training
    state: continuing in-process after a save and resuming from the file
    follow bitwise-identical trajectories.
    """
    role = model.config()["role"]
    tensors = {f"{role}/{name}": arr for name, arr in model.state_arrays().items()}
    config = {**model.config(), **(extra_config or {})}
    optimizer = None
    counters = None
    if adam is not None:
        optimizer = {f"adam/{key}": arr for key, arr in adam.state_arrays().items()}
        counters = {"step": adam.t, "epoch": epoch}
    save_checkpoint(path, tensors, config, optimizer=optimizer, counters=counters)
    restore_training_state(load_checkpoint(path), model, adam)


def restore_training_state(ck: Checkpoint, model: Model, adam: Adam | None = None) -> None:
    """Load model (and optionally optimizer) arrays out of a checkpoint."""
    role = model.config()["role"]
    prefix = f"{role}/"
    arrays = {name[len(prefix):]: arr for name, arr in ck.tensors.items()
              if name.startswith(prefix)}
    model.load_state(arrays)
    if adam is not None and ck.optimizer is not None:
        opt = {name[len("adam/"):]: arr for name, arr in ck.optimizer.items()}
        adam.load_state(opt, ck.counters.get("step", 0))
