"""Multi-layer transformer encoder with MLM and classification heads.

Post-norm residual layout (attention -> add -> LN -> FFN -> add -> LN),
GELU feed-forward, learned absolute positions, and an MLM head tied to the
token embedding table.  Batches are processed as one stacked (B*n, d)
tensor; attention is restricted to each sequence's block by a boolean
column mask, so padding and neighbouring sequences contribute exactly zero
weight.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import CLS_ID, NUM_SPECIALS, Vocab
from .errors import ConfigError, DataError, ShapeError
from .optim import ParamStore


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int
    d_model: int
    num_heads: int
    d_ff: int
    vocab_size: int
    max_seq_len: int
    dropout: float = 0.0

    def __post_init__(self):
        if self.num_layers < 0:
            raise ConfigError("num_layers must be >= 0")
        if self.num_heads < 1 or self.d_model % self.num_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} must divide evenly into "
                f"{self.num_heads} heads")
        if self.max_seq_len < 1:
            raise ConfigError("max_seq_len must be >= 1")
        if self.vocab_size < NUM_SPECIALS:
            raise ConfigError("vocab_size must include the reserved specials")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class LayerParams:
    """View over one layer's tensors in a ParamStore."""

    FIELDS = ("attn.wq", "attn.wk", "attn.wv", "attn.wo",
              "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
              "ln1.gain", "ln1.bias", "ln2.gain", "ln2.bias")

    def __init__(self, store: ParamStore, prefix: str):
        self.wq = store[prefix + "attn.wq"]
        self.wk = store[prefix + "attn.wk"]
        self.wv = store[prefix + "attn.wv"]
        self.wo = store[prefix + "attn.wo"]
        self.ffn_w1 = store[prefix + "ffn.w1"]
        self.ffn_b1 = store[prefix + "ffn.b1"]
        self.ffn_w2 = store[prefix + "ffn.w2"]
        self.ffn_b2 = store[prefix + "ffn.b2"]
        self.ln1_gain = store[prefix + "ln1.gain"]
        self.ln1_bias = store[prefix + "ln1.bias"]
        self.ln2_gain = store[prefix + "ln2.gain"]
        self.ln2_bias = store[prefix + "ln2.bias"]


def init_encoder_params(config: EncoderConfig, rng, store: ParamStore = None,
                        prefix: str = "") -> ParamStore:
    if store is None:
        store = ParamStore()
    d, ff, scale = config.d_model, config.d_ff, 0.02

    def normal(shape):
        return Tensor(rng.normal(0.0, scale, shape))

    store.add(prefix + "embed.tok", normal((config.vocab_size, d)))
    store.add(prefix + "embed.pos", normal((config.max_seq_len, d)))
    for i in range(1, config.num_layers + 1):
        lp = f"{prefix}layer{i}."
        for name in ("attn.wq", "attn.wk", "attn.wv", "attn.wo"):
            store.add(lp + name, normal((d, d)))
        store.add(lp + "ffn.w1", normal((d, ff)))
        store.add(lp + "ffn.b1", Tensor(np.zeros(ff)))
        store.add(lp + "ffn.w2", normal((ff, d)))
        store.add(lp + "ffn.b2", Tensor(np.zeros(d)))
        for ln in ("ln1", "ln2"):
            store.add(lp + ln + ".gain", Tensor(np.ones(d)))
            store.add(lp + ln + ".bias", Tensor(np.zeros(d)))
    store.add(prefix + "mlm.bias", Tensor(np.zeros(config.vocab_size)))
    return store


def split_heads(t, batch: int, num_heads: int):
    """(B*n, d) -> (B*heads, n, d/heads) for batched attention."""
    n = t.shape[0] // batch
    dk = t.shape[1] // num_heads
    four = ad.reshape(t, (batch, n, num_heads, dk))
    return ad.reshape(ad.transpose_axes(four, (0, 2, 1, 3)),
                      (batch * num_heads, n, dk))


def merge_heads(t, batch: int, num_heads: int):
    """(B*heads, n, dk) -> (B*n, heads*dk)."""
    n, dk = t.shape[1], t.shape[2]
    four = ad.reshape(t, (batch, num_heads, n, dk))
    return ad.reshape(ad.transpose_axes(four, (0, 2, 1, 3)),
                      (batch * n, num_heads * dk))


def normalize_pad_mask(pad_mask, n_rows: int) -> np.ndarray:
    """Accept (n,), (B, n), or None (one full-length sequence)."""
    if pad_mask is None:
        return np.ones((1, n_rows), dtype=bool)
    pad = np.asarray(pad_mask, dtype=bool)
    return pad[None, :] if pad.ndim == 1 else pad


def attention_mask(pad_mask: np.ndarray, mem_mask, num_heads: int):
    """(B, n) pad flags (+ optional (B, m) memory flags) to a
    (B*heads, n, n+m) keep mask over attention columns."""
    cols = pad_mask if mem_mask is None else \
        np.concatenate([pad_mask, mem_mask], axis=1)
    b, total = cols.shape
    n = pad_mask.shape[1]
    tiled = np.broadcast_to(cols[:, None, :], (b, n, total))
    return np.repeat(tiled, num_heads, axis=0)


@dataclass
class EncoderActivations:
    embedded: Tensor
    layers: list
    batch: int
    seq_len: int
    pad_mask: np.ndarray

    @property
    def final(self) -> Tensor:
        return self.layers[-1] if self.layers else self.embedded

    def cls_rows(self) -> np.ndarray:
        return np.arange(self.batch, dtype=np.int64) * self.seq_len


@dataclass
class MemoryCache:
    """Per-layer hidden states of the frozen general encoder, one entry per
    transformer layer (the embedding output is not included)."""

    layers: list
    config_fingerprint: str
    batch: int = 1
    seq_len: int = 0

    def __len__(self) -> int:
        return len(self.layers)


def embed(ids: np.ndarray, store: ParamStore, config: EncoderConfig,
          prefix: str = "") -> Tensor:
    """Token embedding plus learned absolute position embedding."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    b, n = ids.shape
    if n > config.max_seq_len:
        raise DataError(f"sequence length {n} exceeds max_seq_len "
                        f"{config.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise DataError("token id out of vocabulary range")
    tok = ad.take_rows(store[prefix + "embed.tok"], ids.reshape(-1))
    pos = ad.take_rows(store[prefix + "embed.pos"], np.tile(np.arange(n), b))
    return ad.add(tok, pos)


def self_attention(x: Tensor, layer: LayerParams, pad_mask,
                   num_heads: int) -> Tensor:
    """Standard multi-head scaled dot-product attention; pad columns get
    exactly zero weight and sequences in a batch never see each other."""
    pad = normalize_pad_mask(pad_mask, x.shape[0])
    batch = pad.shape[0]
    q = split_heads(ad.matmul(x, layer.wq), batch, num_heads)
    k = split_heads(ad.matmul(x, layer.wk), batch, num_heads)
    v = split_heads(ad.matmul(x, layer.wv), batch, num_heads)
    inv = 1.0 / np.sqrt(q.shape[2])
    scores = ad.scale(ad.bmm(q, ad.transpose_axes(k, (0, 2, 1))), inv)
    attn = ad.softmax_last(scores, attention_mask(pad, None, num_heads))
    return ad.matmul(merge_heads(ad.bmm(attn, v), batch, num_heads), layer.wo)


def encoder_forward(ids: np.ndarray, pad_mask, store: ParamStore,
                    config: EncoderConfig, prefix: str = "",
                    hooks: dict = None, train: bool = False,
                    rng=None) -> EncoderActivations:
    """Run the stack; a hook at layer i replaces that layer's attention call.

    hooks maps 1-based layer indices to callables (h_prev, layer_params) ->
    attention output.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    b, n = ids.shape
    if pad_mask is None:
        pad_mask = np.ones((b, n), dtype=bool)
    pad_mask = np.asarray(pad_mask, dtype=bool)
    if pad_mask.shape != ids.shape:
        raise ShapeError(f"pad_mask shape {pad_mask.shape} != ids {ids.shape}")
    if hooks:
        bad = [i for i in hooks if not 1 <= i <= config.num_layers]
        if bad:
            raise ConfigError(f"fusion hook at invalid layer(s) {bad}; "
                              f"valid range is 1..{config.num_layers}")
    drop = config.dropout if train else 0.0
    x = embed(ids, store, config, prefix)
    x = ad.dropout(x, drop, rng)
    outputs = []
    embedded = x
    for i in range(1, config.num_layers + 1):
        lp = LayerParams(store, f"{prefix}layer{i}.")
        if hooks and i in hooks:
            attn = hooks[i](x, lp)
        else:
            attn = self_attention(x, lp, pad_mask, config.num_heads)
        attn = ad.dropout(attn, drop, rng)
        h = ad.layer_norm(ad.add(x, attn), lp.ln1_gain, lp.ln1_bias)
        ff = ad.matmul(ad.gelu(ad.add(ad.matmul(h, lp.ffn_w1), lp.ffn_b1)),
                       lp.ffn_w2)
        ff = ad.add(ff, lp.ffn_b2)
        ff = ad.dropout(ff, drop, rng)
        x = ad.layer_norm(ad.add(h, ff), lp.ln2_gain, lp.ln2_bias)
        outputs.append(x)
    return EncoderActivations(embedded, outputs, b, n, pad_mask)


def mlm_logits(final_hidden: Tensor, store: ParamStore,
               prefix: str = "") -> Tensor:
    """Project to the vocabulary with weights tied to the embedding table."""
    table = store[prefix + "embed.tok"]
    return ad.add(ad.matmul(final_hidden, ad.transpose(table)),
                  store[prefix + "mlm.bias"])


def init_classifier_params(store: ParamStore, config: EncoderConfig,
                           num_classes: int, num_head_layers: int, rng,
                           prefix: str = "") -> None:
    d = config.d_model
    if num_head_layers not in (1, 2):
        raise ConfigError("classification head supports 1 or 2 layers")
    if num_head_layers == 1:
        store.add(prefix + "head.w0", Tensor(rng.normal(0, 0.02, (d, num_classes))))
        store.add(prefix + "head.b0", Tensor(np.zeros(num_classes)))
    else:
        store.add(prefix + "head.w0", Tensor(rng.normal(0, 0.02, (d, d))))
        store.add(prefix + "head.b0", Tensor(np.zeros(d)))
        store.add(prefix + "head.w1", Tensor(rng.normal(0, 0.02, (d, num_classes))))
        store.add(prefix + "head.b1", Tensor(np.zeros(num_classes)))


def classify_logits(acts: EncoderActivations, store: ParamStore,
                    num_head_layers: int, prefix: str = "",
                    head_dropout: float = 0.0, train: bool = False,
                    rng=None) -> Tensor:
    """Class logits from the position-0 (CLS) vector of each sequence."""
    drop = head_dropout if train else 0.0
    cls = ad.take_rows(acts.final, acts.cls_rows())
    cls = ad.dropout(cls, drop, rng)
    if num_head_layers == 1:
        return ad.add(ad.matmul(cls, store[prefix + "head.w0"]),
                      store[prefix + "head.b0"])
    h = ad.tanh(ad.add(ad.matmul(cls, store[prefix + "head.w0"]),
                       store[prefix + "head.b0"]))
    h = ad.dropout(h, drop, rng)
    return ad.add(ad.matmul(h, store[prefix + "head.w1"]),
                  store[prefix + "head.b1"])


class EncoderModel:
    """An encoder plus its parameters, vocabulary, and lineage notes."""

    def __init__(self, config: EncoderConfig, vocab: Vocab, seed: int = 0,
                 store: ParamStore = None, lineage=None):
        if len(vocab) != config.vocab_size:
            raise ConfigError(f"vocab has {len(vocab)} entries but config "
                              f"says {config.vocab_size}")
        self.config = config
        self.vocab = vocab
        self.store = store if store is not None else init_encoder_params(
            config, np.random.default_rng(seed))
        self.lineage = list(lineage) if lineage else [f"init seed={seed}"]
        self.classifier = None  # (num_classes, num_head_layers)

    def forward(self, ids, pad_mask=None, hooks=None, train=False, rng=None):
        return encoder_forward(ids, pad_mask, self.store, self.config,
                               hooks=hooks, train=train, rng=rng)

    def mlm_logits(self, acts: EncoderActivations) -> Tensor:
        return mlm_logits(acts.final, self.store)

    def add_classifier(self, num_classes: int, num_head_layers: int = 1,
                       seed: int = 0) -> None:
        if self.classifier is not None:
            if self.classifier != (num_classes, num_head_layers):
                raise ConfigError("classifier already attached with a "
                                  "different shape")
            return
        init_classifier_params(self.store, self.config, num_classes,
                               num_head_layers, np.random.default_rng(seed))
        self.classifier = (num_classes, num_head_layers)

    def classify_logits(self, acts: EncoderActivations, ids,
                        head_dropout: float = 0.0, train: bool = False,
                        rng=None) -> Tensor:
        if self.classifier is None:
            raise ConfigError("no classification head attached")
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        if (ids[:, 0] != CLS_ID).any():
            raise DataError("classification input must start with <cls>")
        return classify_logits(acts, self.store, self.classifier[1],
                               head_dropout=head_dropout, train=train, rng=rng)

    def memory_cache(self, ids, pad_mask=None) -> MemoryCache:
        """All per-layer hidden states, recorded without gradients or dropout."""
        with ad.no_grad():
            acts = self.forward(ids, pad_mask, train=False)
        return MemoryCache(acts.layers, self.config.fingerprint(),
                           acts.batch, acts.seq_len)

    def freeze(self) -> None:
        self.store.freeze_all()

    def unfreeze(self) -> None:
        self.store.unfreeze_all()

    def copy(self, note: str = None) -> "EncoderModel":
        store = ParamStore()
        for name, t in self.store.items():
            store.add(name, Tensor(t.data.copy()),
                      frozen=self.store.is_frozen(name))
        lineage = self.lineage + ([note] if note else [])
        out = EncoderModel(self.config, self.vocab, store=store,
                           lineage=lineage)
        out.classifier = self.classifier
        return out

    def fingerprint(self) -> str:
        return self.store.fingerprint()
