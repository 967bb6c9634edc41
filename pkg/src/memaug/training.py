"""Training loops, MLM/classification evaluation, gradient checking, and
the layer-selection sweep harness.

The desk-scale defaults (lr 1e-3, tiny batches) are tuned for models around
L=6, d_model=32; `TrainConfig.paper_fine_tuning()` carries the reference
fine-tuning hyperparameters (lr 4e-5, Adam eps 1e-8, betas 0.9/0.999,
head dropout 0.5) for documentation and presets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward, cross_entropy
from .data import ClassificationTask, MaskedBatch, batch_encode, mask_tokens
from .encoder import EncoderModel
from .errors import (ConfigError, DataError, DivergenceError,
                     GradientCheckError)
from .model import (LogitsFusionModel, MemoryAugmentedModel,
                    predict_class_logits)
from .optim import AdamState, adam_step

EVAL_MASK_SEED = 123457  # fixed so MLM losses are comparable across models


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 8
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    mask_prob: float = 0.15
    dropout: float = 0.0          # classification-head dropout
    max_steps: int = 0            # 0 = no cap
    frozen: bool = True
    strategy: object = None       # optional FusionSpec, carried for reports

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ConfigError("mask_prob must be in [0, 1]")

    @classmethod
    def paper_fine_tuning(cls, **overrides) -> "TrainConfig":
        """Reference fine-tuning preset (underfits desk-scale models)."""
        base = dict(epochs=10, batch_size=16, lr=4e-5, adam_beta1=0.9,
                    adam_beta2=0.999, adam_eps=1e-8, dropout=0.5)
        base.update(overrides)
        return cls(**base)

    def adam(self) -> AdamState:
        return AdamState(lr=self.lr, beta1=self.adam_beta1,
                         beta2=self.adam_beta2, eps=self.adam_eps)


@dataclass
class EvalReport:
    seed: int
    fingerprint: str
    accuracy: float = None
    macro_f1: float = None
    micro_f1: float = None
    mlm_losses: dict = field(default_factory=dict)

    def kv_lines(self) -> list:
        lines = [f"seed={self.seed}", f"fingerprint={self.fingerprint}"]
        for name in ("accuracy", "macro_f1", "micro_f1"):
            value = getattr(self, name)
            if value is not None:
                lines.append(f"{name}={value:.6f}")
        for corpus, loss in self.mlm_losses.items():
            lines.append(f"mlm_loss.{corpus}={loss:.6f}")
        return lines


# ---------------------------------------------------------------------------
# shared forward helpers
# ---------------------------------------------------------------------------

def _model_fingerprint(model) -> str:
    if isinstance(model, EncoderModel):
        return model.store.fingerprint()
    if isinstance(model, MemoryAugmentedModel):
        return model.domain.store.fingerprint()
    if isinstance(model, LogitsFusionModel):
        return model.domain.store.fingerprint()
    return "unknown"


def _named_trainables(model) -> dict:
    if isinstance(model, EncoderModel):
        return dict(model.store.trainable_items())
    return model.named_trainables()


def mlm_batch_loss(model, batch: MaskedBatch, train: bool = False, rng=None):
    """Mean cross-entropy over the batch's masked positions.

    Returns (loss Tensor, number of scored positions); the count is zero
    when nothing was masked, in which case loss is None.
    """
    labels = batch.labels.reshape(-1)
    count = int((labels != ad.IGNORE_INDEX).sum())
    if count == 0:
        return None, 0
    if isinstance(model, MemoryAugmentedModel):
        acts, _ = model.forward(batch.input_ids, batch.pad_mask,
                                train=train, rng=rng)
    else:
        acts = model.forward(batch.input_ids, batch.pad_mask,
                             train=train, rng=rng)
    logits = model.mlm_logits(acts)
    return cross_entropy(logits, labels), count


def _iter_doc_batches(lines, batch_size, order=None):
    idx = order if order is not None else np.arange(len(lines))
    for start in range(0, len(idx), batch_size):
        yield [lines[i] for i in idx[start:start + batch_size]]


# ---------------------------------------------------------------------------
# MLM training and evaluation
# ---------------------------------------------------------------------------

def pretrain_mlm(model, corpus, config: TrainConfig, tag: str = "mlm"):
    """Adam-optimized MLM training; returns the per-step loss curve."""
    if not corpus:
        raise DataError("empty pretraining corpus")
    vocab, max_len = model.vocab, model.config.max_seq_len
    rng = np.random.default_rng(config.seed)
    params = _named_trainables(model)
    state = config.adam()
    curve = []
    for _ in range(config.epochs):
        order = rng.permutation(len(corpus))
        for docs in _iter_doc_batches(corpus, config.batch_size, order):
            ids, pad = batch_encode(docs, vocab, max_len)
            batch = mask_tokens(ids, pad, vocab, config.mask_prob, rng=rng)
            loss, count = mlm_batch_loss(model, batch, train=True, rng=rng)
            if count == 0:
                continue
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(
                    f"non-finite MLM loss at step {len(curve)}")
            for t in params.values():
                t.zero_grad()
            backward(loss)
            adam_step(params, state)
            curve.append(value)
            if config.max_steps and len(curve) >= config.max_steps:
                _note(model, f"{tag} steps={len(curve)} seed={config.seed}")
                return curve
    _note(model, f"{tag} steps={len(curve)} seed={config.seed}")
    return curve


def adapt(model, corpus, config: TrainConfig, mode: str = "dapt"):
    """Continued MLM training on a domain corpus (dapt) or on the task's own
    training text (tapt); composition of the two is sequential calls."""
    if mode not in ("dapt", "tapt"):
        raise ConfigError(f"unknown adaptation mode '{mode}'")
    return pretrain_mlm(model, corpus, config, tag=mode)


def eval_mlm_loss(model, corpus, batch_size: int = 16,
                  eval_seed: int = EVAL_MASK_SEED,
                  mask_prob: float = 0.15) -> float:
    """Mean MLM loss under fixed-seed masking; no parameter updates."""
    if not corpus:
        raise DataError("empty evaluation corpus")
    vocab, max_len = model.vocab, model.config.max_seq_len
    rng = np.random.default_rng(eval_seed)
    total, count = 0.0, 0
    for docs in _iter_doc_batches(corpus, batch_size):
        ids, pad = batch_encode(docs, vocab, max_len)
        batch = mask_tokens(ids, pad, vocab, mask_prob, rng=rng)
        with ad.no_grad():
            loss, n = mlm_batch_loss(model, batch)
        if n:
            total += float(loss.data) * n
            count += n
    if count == 0:
        raise DataError("no maskable positions in evaluation corpus")
    return total / count


# ---------------------------------------------------------------------------
# classification metrics
# ---------------------------------------------------------------------------

def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        cm[int(t), int(p)] += 1
    return cm


def accuracy_score(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    return float((y_true == y_pred).mean())


def macro_f1(y_true, y_pred, num_classes: int) -> float:
    """Unweighted mean of per-class F1; empty denominators score zero."""
    cm = confusion_matrix(y_true, y_pred, num_classes)
    f1s = []
    for c in range(num_classes):
        tp = cm[c, c]
        denom = 2 * tp + (cm[c].sum() - tp) + (cm[:, c].sum() - tp)
        f1s.append(0.0 if denom == 0 else 2 * tp / denom)
    return float(np.mean(f1s))


def micro_f1(y_true, y_pred, num_classes: int) -> float:
    cm = confusion_matrix(y_true, y_pred, num_classes)
    tp = np.trace(cm)
    fp = cm.sum() - tp
    denom = 2 * tp + 2 * fp  # single-label: FP count equals FN count
    return float(0.0 if denom == 0 else 2 * tp / denom)


# ---------------------------------------------------------------------------
# classification fine-tuning
# ---------------------------------------------------------------------------

def _predict_examples(model, examples, batch_size: int, vocab, max_len):
    preds = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        ids, pad = batch_encode([ex.text for ex in chunk], vocab, max_len)
        logits = predict_class_logits(model, ids, pad)
        preds.extend(np.argmax(logits, axis=1).tolist())
    return preds


def evaluate_classification(model, examples, batch_size: int = 16):
    if not examples:
        raise DataError("empty evaluation split")
    num_classes = model.classifier[0]
    y_true = [ex.label for ex in examples]
    y_pred = _predict_examples(model, examples, batch_size,
                               model.vocab, model.config.max_seq_len)
    return {
        "accuracy": accuracy_score(y_true, y_pred),
        "macro_f1": macro_f1(y_true, y_pred, num_classes),
        "micro_f1": micro_f1(y_true, y_pred, num_classes),
    }


def _trainable_snapshot(params: dict) -> dict:
    return {n: t.data.copy() for n, t in params.items()}


def _trainable_restore(params: dict, snap: dict) -> None:
    for n, arr in snap.items():
        params[n].data[...] = arr


def _note(model, text: str) -> None:
    if isinstance(model, EncoderModel):
        model.lineage.append(text)
    elif isinstance(model, MemoryAugmentedModel):
        model.lineage_note(text)
    elif isinstance(model, LogitsFusionModel):
        model.domain.lineage.append(text)


def finetune_classify(model, task: ClassificationTask, config: TrainConfig,
                      num_head_layers: int = 1):
    """Train on the train split, keep the best dev-macro-F1 checkpoint,
    report test metrics.  Returns (EvalReport, per-epoch history)."""
    if not task.train:
        raise DataError("empty train split")
    if hasattr(model, "add_classifier"):
        model.add_classifier(task.num_classes, num_head_layers,
                             seed=config.seed)
    vocab, max_len = model.vocab, model.config.max_seq_len
    rng = np.random.default_rng(config.seed)
    params = _named_trainables(model)
    state = config.adam()
    best = (-1.0, _trainable_snapshot(params))
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(task.train))
        losses = []
        for start in range(0, len(order), config.batch_size):
            chunk = [task.train[i] for i in order[start:start + config.batch_size]]
            ids, pad = batch_encode([ex.text for ex in chunk], vocab, max_len)
            labels = np.array([ex.label for ex in chunk], dtype=np.int64)
            if isinstance(model, LogitsFusionModel):
                logits, _ = model.forward(ids, pad, train=True, rng=rng)
            elif isinstance(model, MemoryAugmentedModel):
                acts, _ = model.forward(ids, pad, train=True, rng=rng)
                logits = model.classify_logits(acts, ids, config.dropout,
                                               train=True, rng=rng)
            else:
                acts = model.forward(ids, pad, train=True, rng=rng)
                logits = model.classify_logits(acts, ids, config.dropout,
                                               train=True, rng=rng)
            loss = cross_entropy(logits, labels)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss in epoch {epoch}")
            for t in params.values():
                t.zero_grad()
            backward(loss)
            adam_step(params, state)
            losses.append(value)
        dev = evaluate_classification(model, task.dev) if task.dev else None
        score = dev["macro_f1"] if dev else -float(np.mean(losses))
        history.append({"epoch": epoch,
                        "train_loss": float(np.mean(losses)),
                        "dev_macro_f1": dev["macro_f1"] if dev else float("nan")})
        if score > best[0]:
            best = (score, _trainable_snapshot(params))
    _trainable_restore(params, best[1])
    metrics = evaluate_classification(model, task.test)
    report = EvalReport(seed=config.seed,
                        fingerprint=_model_fingerprint(model),
                        accuracy=metrics["accuracy"],
                        macro_f1=metrics["macro_f1"],
                        micro_f1=metrics["micro_f1"])
    _note(model, f"finetune classes={task.num_classes} seed={config.seed}")
    return report, history


def multi_seed_reports(run_one, seeds) -> dict:
    """Five-seed style protocol: collect reports, emit mean and std."""
    reports = [run_one(seed) for seed in seeds]
    summary = {}
    for name in ("accuracy", "macro_f1", "micro_f1"):
        values = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if values:
            summary[f"{name}_mean"] = float(np.mean(values))
            summary[f"{name}_std"] = float(np.std(values))
    return {"reports": reports, "summary": summary}


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(loss_fn, params: dict, h: float = 1e-5,
               samples_per_param: int = 2, seed: int = 0,
               tolerance: float = None) -> dict:
    """Central finite differences against analytic gradients.

    Every parameter tensor is reported; within each, a deterministic sample
    of entries is perturbed (full enumeration would be quadratic in model
    size).  Relative error uses max(|analytic|, |numeric|, 1e-5) as scale.
    """
    for t in params.values():
        t.zero_grad()
    backward(loss_fn())
    analytic = {n: (t.grad.copy() if t.grad is not None
                    else np.zeros_like(t.data)) for n, t in params.items()}
    for t in params.values():
        t.grad = None
    rng = np.random.default_rng(seed)
    report = {}
    for name, t in params.items():
        flat = t.data.reshape(-1)
        k = min(samples_per_param, flat.size)
        picks = rng.choice(flat.size, size=k, replace=False)
        worst = 0.0
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(loss_fn().data)
            flat[i] = orig - h
            f_minus = float(loss_fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-5)
            worst = max(worst, rel)
        report[name] = worst
    if tolerance is not None:
        bad = {n: e for n, e in report.items() if e > tolerance}
        if bad:
            worst_name = max(bad, key=bad.get)
            raise GradientCheckError(
                f"gradient check failed for '{worst_name}' "
                f"(rel err {bad[worst_name]:.3e} > {tolerance:.1e})")
    return report


def mlm_grad_check(model, batch: MaskedBatch, **kwargs) -> dict:
    """Gradient-check every trainable group through the MLM loss."""

    def loss_fn():
        loss, count = mlm_batch_loss(model, batch)
        if count == 0:
            raise DataError("gradient check batch has no masked positions")
        return loss

    return grad_check(loss_fn, _named_trainables(model), **kwargs)


# ---------------------------------------------------------------------------
# layer-selection sweep
# ---------------------------------------------------------------------------

def equal_interval_pairs(num_layers: int) -> list:
    """Chunk fusion pairs (low, high) that keep one fixed layer interval,
    e.g. (1,7)..(6,12) for a 12-layer model."""
    if num_layers < 2 or num_layers % 2:
        raise ConfigError("equal-interval pairs need an even layer count")
    half = num_layers // 2
    return [(i, i + half) for i in range(1, half + 1)]


def quarter_layers(num_layers: int) -> list:
    """Quarter-depth fusion candidates, e.g. [3, 6, 9, 12] at depth 12."""
    return sorted({max(1, math.ceil(num_layers * q))
                   for q in (0.25, 0.5, 0.75, 1.0)})


@dataclass
class SweepRow:
    assignment: str
    seed: int
    accuracy: float
    macro_f1: float
    micro_f1: float


def layer_sweep(run_cell, assignments, seeds) -> list:
    """Run one fine-tune per (assignment, seed); run_cell returns EvalReport."""
    rows = []
    for assignment in assignments:
        for seed in seeds:
            report = run_cell(assignment, seed)
            rows.append(SweepRow(str(assignment), seed, report.accuracy,
                                 report.macro_f1, report.micro_f1))
    return rows


def aggregate_sweep(rows) -> list:
    """Mean and std of macro-F1 per assignment, in first-seen order."""
    order, grouped = [], {}
    for row in rows:
        if row.assignment not in grouped:
            grouped[row.assignment] = []
            order.append(row.assignment)
        grouped[row.assignment].append(row.macro_f1)
    return [(a, float(np.mean(grouped[a])), float(np.std(grouped[a])))
            for a in order]


def sweep_fused(general: EncoderModel, backbone: EncoderModel, family: str,
                assignments, task: ClassificationTask, config: TrainConfig,
                seeds, variant: str = "memory") -> list:
    """Sweep fusion-layer assignments for one strategy family.

    `assignments` holds layer indices for single/gated or (low, high) pairs
    for chunk_gated; each cell fine-tunes a fresh copy of the backbone."""
    from .fusion import FusionSpec

    if family not in ("single", "gated", "chunk_gated"):
        raise ConfigError(f"cannot sweep family '{family}'")

    def run_cell(assignment, seed):
        if family == "chunk_gated":
            low, high = assignment
            spec = FusionSpec("chunk_gated", variant, dst_low=low,
                              dst_high=high)
        else:
            spec = FusionSpec(family, variant, dst=int(assignment))
        domain = backbone.copy(f"sweep {family} {assignment} seed={seed}")
        fused = MemoryAugmentedModel(general, domain, spec, seed=seed)
        report, _ = finetune_classify(fused, task, replace(config, seed=seed))
        return report

    return layer_sweep(run_cell, assignments, seeds)
