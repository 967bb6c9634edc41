"""Compose a frozen general encoder with a trainable domain encoder, plus
the logit-sum and probability-ensemble baselines."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import EncoderActivations, EncoderModel, MemoryCache
from .errors import ConfigError
from .fusion import FusionSpec, init_fusion_params, make_attention_hook, plan_fusion


def _check_compatible(general: EncoderModel, domain: EncoderModel) -> None:
    if general.vocab.tokens != domain.vocab.tokens:
        raise ConfigError("general and domain encoders must share one vocabulary")
    if general.config.max_seq_len != domain.config.max_seq_len:
        raise ConfigError("general and domain encoders must share max_seq_len")
    if general.config.d_model != domain.config.d_model:
        raise ConfigError("memory width requires equal d_model on both sides")


class MemoryAugmentedModel:
    """Domain encoder whose hooked layers attend into representations cached
    from a general encoder.  With `frozen` set (the default) the general
    side receives no gradients and its bytes never change; clearing it is
    the unfrozen ablation."""

    def __init__(self, general: EncoderModel, domain: EncoderModel,
                 fusion: FusionSpec, frozen: bool = True, seed: int = 0):
        _check_compatible(general, domain)
        self.general = general
        self.domain = domain
        self.frozen = bool(frozen)
        self.fusion = fusion.resolved(general.config.num_layers,
                                      domain.config.num_layers)
        if self.frozen:
            general.freeze()
        else:
            general.unfreeze()
        domain.unfreeze()  # the domain side is the trainable backbone
        init_fusion_params(domain.store, domain.config.d_model,
                           domain.config.num_heads, self.fusion,
                           np.random.default_rng(seed),
                           domain.config.num_layers)

    @property
    def vocab(self):
        return self.domain.vocab

    @property
    def config(self):
        return self.domain.config

    @property
    def classifier(self):
        return self.domain.classifier

    def add_classifier(self, num_classes: int, num_head_layers: int = 1,
                       seed: int = 0) -> None:
        self.domain.add_classifier(num_classes, num_head_layers, seed)

    def forward(self, ids, pad_mask=None, train: bool = False, rng=None,
                memory_override: dict = None):
        """Cache the general side, build memories, run the hooked domain
        stack.  Returns (activations, diagnostics); diagnostics carry the
        per-token gate mixture weights when a gated strategy is active."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if pad_mask is None:
            pad_mask = np.ones(ids.shape, dtype=bool)
        pad_mask = np.asarray(pad_mask, dtype=bool)

        if self.frozen:
            cache = self.general.memory_cache(ids, pad_mask)
        else:
            acts = self.general.forward(ids, pad_mask, train=False)
            cache = MemoryCache(acts.layers, self.general.config.fingerprint(),
                                acts.batch, acts.seq_len)

        diag: dict = {}
        builders = plan_fusion(self.fusion, self.general.config.num_layers,
                               self.domain.config.num_layers, self.domain.store)
        memories = {i: build(cache, diag) for i, build in builders.items()}
        if memory_override:
            memories.update(memory_override)

        n_rows = ids.size
        hooks = {}
        for i, m_f in memories.items():
            n_mem = m_f.data.shape[0]
            if n_mem == n_rows:
                mem_mask = pad_mask
            else:
                mem_mask = np.ones((ids.shape[0], n_mem // ids.shape[0]),
                                   dtype=bool)
            hooks[i] = make_attention_hook(self.fusion, i, m_f,
                                           self.domain.store,
                                           self.domain.config.num_heads,
                                           pad_mask, mem_mask)
        acts = self.domain.forward(ids, pad_mask, hooks=hooks,
                                   train=train, rng=rng)
        return acts, diag

    def mlm_logits(self, acts: EncoderActivations) -> Tensor:
        return self.domain.mlm_logits(acts)

    def classify_logits(self, acts, ids, head_dropout=0.0, train=False,
                        rng=None) -> Tensor:
        return self.domain.classify_logits(acts, ids, head_dropout, train, rng)

    def named_trainables(self) -> dict:
        params = {f"domain.{n}": t for n, t in self.domain.store.trainable_items()}
        if not self.frozen:
            params.update({f"general.{n}": t
                           for n, t in self.general.store.trainable_items()})
        return params

    def lineage_note(self, note: str) -> None:
        self.domain.lineage.append(note)


class LogitsFusionModel:
    """Sum of class logits from a frozen-body general encoder (with its own
    trainable head) and a fully trainable domain encoder; trained end to end."""

    def __init__(self, general: EncoderModel, domain: EncoderModel,
                 num_classes: int, num_head_layers: int = 1, seed: int = 0):
        _check_compatible(general, domain)
        general.freeze()
        domain.unfreeze()
        general.add_classifier(num_classes, num_head_layers, seed)
        domain.add_classifier(num_classes, num_head_layers, seed)
        if general.classifier != domain.classifier:
            raise ConfigError("general and domain heads must agree on classes")
        self.general = general
        self.domain = domain

    @property
    def vocab(self):
        return self.domain.vocab

    @property
    def config(self):
        return self.domain.config

    @property
    def classifier(self):
        return self.domain.classifier

    def forward(self, ids, pad_mask=None, train: bool = False, rng=None):
        with ad.no_grad():
            gen_acts = self.general.forward(ids, pad_mask, train=False)
        gen_logits = self.general.classify_logits(gen_acts, ids,
                                                  train=train, rng=rng)
        dom_acts = self.domain.forward(ids, pad_mask, train=train, rng=rng)
        dom_logits = self.domain.classify_logits(dom_acts, ids,
                                                 train=train, rng=rng)
        return ad.add(gen_logits, dom_logits), {}

    def named_trainables(self) -> dict:
        params = {f"domain.{n}": t for n, t in self.domain.store.trainable_items()}
        params.update({f"general.{n}": t
                       for n, t in self.general.store.trainable_items()})
        return params


def predict_class_logits(model, ids, pad_mask=None) -> np.ndarray:
    """Evaluation-mode class logits as a plain array, for any model kind."""
    with ad.no_grad():
        if isinstance(model, EncoderModel):
            acts = model.forward(ids, pad_mask)
            return model.classify_logits(acts, ids).data
        if isinstance(model, MemoryAugmentedModel):
            acts, _ = model.forward(ids, pad_mask)
            return model.classify_logits(acts, ids).data
        if isinstance(model, LogitsFusionModel):
            logits, _ = model.forward(ids, pad_mask)
            return logits.data
    raise ConfigError(f"cannot classify with {type(model).__name__}")


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def ensemble_predict(model_a, model_b, ids, pad_mask=None) -> np.ndarray:
    """Average the two models' predicted class probabilities."""
    pa = _softmax(predict_class_logits(model_a, ids, pad_mask))
    pb = _softmax(predict_class_logits(model_b, ids, pad_mask))
    if pa.shape != pb.shape:
        raise ConfigError(f"class count mismatch: {pa.shape} vs {pb.shape}")
    return 0.5 * (pa + pb)


def _store_census(store, component: str, name_filter=None):
    trainable = frozen = 0
    for name, t in store.items():
        if name_filter is not None and not name_filter(name):
            continue
        if store.is_frozen(name):
            frozen += t.data.size
        else:
            trainable += t.data.size
    return (component, trainable, frozen)


def param_census(model) -> list:
    """Rows of (component, trainable parameter count, frozen count)."""
    if isinstance(model, EncoderModel):
        return [_store_census(model.store, "encoder")]
    if isinstance(model, MemoryAugmentedModel):
        rows = [
            _store_census(model.general.store, "general encoder"),
            _store_census(model.domain.store, "domain encoder",
                          lambda n: not n.startswith(("fusion.", "head."))),
            _store_census(model.domain.store, "fusion",
                          lambda n: n.startswith("fusion.")),
            _store_census(model.domain.store, "task head",
                          lambda n: n.startswith("head.")),
        ]
        return rows
    if isinstance(model, LogitsFusionModel):
        return [
            _store_census(model.general.store, "general encoder",
                          lambda n: not n.startswith("head.")),
            _store_census(model.general.store, "general head",
                          lambda n: n.startswith("head.")),
            _store_census(model.domain.store, "domain encoder"),
        ]
    raise ConfigError(f"no census for {type(model).__name__}")


def fusion_added_trainable(model: MemoryAugmentedModel) -> int:
    """Trainable parameters the fusion strategy added over the bare encoder."""
    for component, trainable, _ in param_census(model):
        if component == "fusion":
            return trainable
    return 0
