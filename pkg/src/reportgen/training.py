"""Teacher-forced training: Adam, global-norm clipping, plateau schedule, early stop."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig
from .errors import ConfigError, CorruptDataError, DataError, NumericAbort
from .initializers import xavier_init  # noqa: F401  (part of the training surface)
from .metrics import ALL_LABELS
from .model import ReportModel
from .tokenizer import PAD_ID, Vocabulary, build_vocab, encode, pad_batch

META_FORMAT = "reportgen-meta 1"
HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "lr")


def cross_entropy_loss(logits, targets, pad_mask=None) -> Tensor:
    """Mean -log softmax(logits)[target]; ``pad_mask`` is True where a position is ignored."""
    keep = None if pad_mask is None else ~np.asarray(pad_mask, dtype=bool)
    return ad.cross_entropy(logits, targets, keep)


def teacher_forcing(ids: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Padded [B, T] ids -> decoder inputs, next-token targets and the PAD mask."""
    inputs, targets = ids[:, :-1], ids[:, 1:]
    return inputs, targets, targets == PAD_ID


@dataclass
class TrainState:
    params: dict[str, Tensor]
    lr: float
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    best_val: float = math.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))


def adam_step(state: TrainState, grads: Mapping[str, np.ndarray], lr: float | None = None,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> TrainState:
    """Bias-corrected Adam update of ``state.params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericAbort(name)
    lr = state.lr if lr is None else lr
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, g in grads.items():
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        state.params[name].data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float = 1.0) -> dict[str, np.ndarray]:
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}


class PlateauScheduler:
    """Multiply the rate by ``factor`` once the loss has failed to improve for
    more than ``patience`` consecutive calls.  Improvement means beating the
    best loss by the relative ``threshold``.
    """

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 3, min_lr: float = 1e-6,
                 threshold: float = 1e-4):
        if not 0.0 < factor < 1.0:
            raise ConfigError(f"scheduler factor must lie in (0, 1), got {factor}")
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.threshold = threshold
        self.best = math.inf
        self.num_bad = 0

    def step(self, loss: float) -> float:
        if loss < self.best * (1.0 - self.threshold):
            self.best = loss
            self.num_bad = 0
        else:
            self.num_bad += 1
        if self.num_bad > self.patience:
            self.lr = max(self.lr * self.factor, self.min_lr)
            self.num_bad = 0
        return self.lr


def plateau_scheduler(scheduler: PlateauScheduler, val_loss: float) -> float:
    return scheduler.step(val_loss)


@dataclass
class Batchable:
    """Images and encoded reports ready for teacher forcing."""

    images: np.ndarray  # [N, 1, H, W]
    sequences: list[list[int]]
    labels: np.ndarray  # [N, len(ALL_LABELS)] multi-hot

    def __len__(self):
        return len(self.sequences)

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.images[idx], pad_batch([self.sequences[i] for i in idx]), self.labels[idx]


def prepare(cases: Sequence, vocab: Vocabulary, max_len: int) -> Batchable:
    if not cases:
        raise DataError("cannot train or evaluate on an empty split")
    images = np.stack([np.asarray(c.image, dtype=np.float64) for c in cases])
    seqs = [encode(c.report, vocab, max_len) for c in cases]
    labels = np.array([[float(l in c.labels) for l in ALL_LABELS] for c in cases])
    return Batchable(images, seqs, labels)


def batch_loss(model: ReportModel, images, ids, labels=None, *, training=False, rng=None) -> tuple[Tensor, float]:
    """Loss tensor for one batch plus the number of target tokens it averages over."""
    inputs, targets, pad = teacher_forcing(ids)
    memory = model.encode(images)
    loss = cross_entropy_loss(model.logits(inputs, memory, training=training, rng=rng), targets, pad)
    if model.probe and labels is not None:
        p = model.finding_probabilities(memory)
        y = Tensor(labels)
        tiny = 1e-12
        bce = ad.add(ad.mul(y, ad.log(ad.add(p, tiny))),
                     ad.mul(Tensor(1.0 - labels), ad.log(ad.add(ad.scale(p, -1.0), 1.0 + tiny))))
        loss = ad.sub(loss, ad.mean(bce))
    return loss, float((~pad).sum())


def evaluate_loss(model: ReportModel, data: Batchable, batch_size: int) -> float:
    """Token-weighted eval-mode cross-entropy over a whole split."""
    total = count = 0.0
    with ad.no_grad():
        for start in range(0, len(data), batch_size):
            idx = np.arange(start, min(start + batch_size, len(data)))
            images, ids, _ = data.batch(idx)
            loss, n = batch_loss(model, images, ids)  # no labels: plain cross-entropy
            total += float(loss.data) * n
            count += n
    return total / count


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainResult:
    model: ReportModel
    state: TrainState
    history: list[EpochRecord]
    vocab: Vocabulary
    final_train_loss: float  # eval-mode cross-entropy on the training split, best params
    stopped_early: bool = False


def train(train_cases: Sequence, val_cases: Sequence, cfg: RunConfig, *, vocab: Vocabulary | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Fit a fresh model; the parameters with the best validation loss are kept.

    Epoch 0 only measures the initial validation loss, which seeds both the
    scheduler and early stopping.
    """
    tc = cfg.train
    if vocab is None:
        vocab = build_vocab(c.report for c in train_cases)
    dec_cfg = _with_vocab(cfg, vocab)
    train_data = prepare(train_cases, vocab, dec_cfg.max_len)
    val_data = prepare(val_cases, vocab, dec_cfg.max_len)

    model = ReportModel(cfg.encoder, dec_cfg, seed=tc.seed)
    state = TrainState(model.params, lr=tc.learning_rate)
    scheduler = PlateauScheduler(tc.learning_rate, tc.scheduler_factor, tc.scheduler_patience, tc.min_lr)
    order_rng = np.random.default_rng([tc.seed, 101])
    dropout_rng = np.random.default_rng([tc.seed, 102])

    state.best_val = evaluate_loss(model, val_data, tc.batch_size)
    scheduler.step(state.best_val)
    best = _snapshot(model)
    history: list[EpochRecord] = []
    stopped = False

    for epoch in range(1, tc.epochs + 1):
        order = order_rng.permutation(len(train_data))
        losses = []
        for start in range(0, len(order), tc.batch_size):
            images, ids, labels = train_data.batch(order[start : start + tc.batch_size])
            model.zero_grad()
            loss, _ = batch_loss(model, images, ids, labels, training=True, rng=dropout_rng)
            loss.backward()
            grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in state.params.items()}
            adam_step(state, clip_gradients(grads, tc.gradient_clipping), lr=scheduler.lr)
            losses.append(float(loss.data))
        lr_used = scheduler.lr
        val = evaluate_loss(model, val_data, tc.batch_size)
        scheduler.step(val)
        state.lr = scheduler.lr
        record = EpochRecord(epoch, float(np.mean(losses)), val, lr_used)
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if val < state.best_val:
            state.best_val, state.best_epoch = val, epoch
            state.epochs_since_improvement = 0
            best = _snapshot(model)
        else:
            state.epochs_since_improvement += 1
            if state.epochs_since_improvement >= tc.early_stop_patience:
                stopped = True
                break

    for name, values in best.items():
        model.params[name].data[...] = values
    final = evaluate_loss(model, train_data, tc.batch_size)
    return TrainResult(model, state, history, vocab, final, stopped)


def _with_vocab(cfg: RunConfig, vocab: Vocabulary):
    return replace(cfg.decoder, vocab_size=len(vocab))


def _snapshot(model: ReportModel) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.params.items()}


def split_for_training(data_dir, cfg: RunConfig):
    """(train, validation) cases; overfit runs use every case for both."""
    from .data import load_split

    if cfg.train.overfit:
        cases = load_split(data_dir, "all")
        return cases, cases
    return load_split(data_dir, "train"), load_split(data_dir, "val")


# -- persistence -----------------------------------------------------------

def meta_path(checkpoint: str | Path) -> Path:
    return Path(str(checkpoint) + ".meta")


def save_checkpoint(path: str | Path, result: TrainResult, cfg: RunConfig) -> None:
    """Parameters, a ``.meta`` key=value sidecar, and ``vocab.txt`` beside them."""
    path = Path(path)
    ad.save_params(path, result.model.params)
    vocab_file = path.parent / "vocab.txt"
    result.vocab.save(vocab_file)
    doc = cfg.to_dict()
    doc["model"]["decoder"]["vocab_size"] = len(result.vocab)
    lines = [
        f"format={META_FORMAT}",
        f"epoch={result.state.best_epoch}",
        f"val_loss={result.state.best_val!r}",
        f"train_loss={result.final_train_loss!r}",
        f"vocab_file={vocab_file.name}",
        f"config={json.dumps(doc, sort_keys=True)}",
    ]
    meta_path(path).write_text("\n".join(lines) + "\n")


def read_meta(path: str | Path) -> dict[str, str]:
    mp = meta_path(path)
    try:
        text = mp.read_text()
    except FileNotFoundError:
        raise CorruptDataError(f"{mp}: missing checkpoint metadata") from None
    meta = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
    if meta.get("format") != META_FORMAT:
        raise CorruptDataError(f"{mp}: unrecognised metadata format")
    return meta


def load_checkpoint(path: str | Path) -> tuple[ReportModel, Vocabulary, RunConfig, dict[str, str]]:
    path = Path(path)
    meta = read_meta(path)
    cfg = RunConfig.from_dict(json.loads(meta["config"]), apply_env=False)
    vocab = Vocabulary.load(path.parent / meta["vocab_file"])
    if cfg.decoder.vocab_size != len(vocab):
        raise ConfigError(f"vocabulary has {len(vocab)} words but the model expects {cfg.decoder.vocab_size}")
    params = ad.load_params(path)
    model = ReportModel(cfg.encoder, cfg.decoder, seed=cfg.train.seed, params=params)
    return model, vocab, cfg, meta


def write_history(path: str | Path, history: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for r in history:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr)])


def read_history(path: str | Path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]), float(r["lr"])) for r in rows]
