"""Building the memory representation and fusing it into the encoder.

Four strategies pick which cached layers feed which encoder layers:

  single       last cached layer into one layer (no new parameters)
  multi        layer i of the cache into layer i (no new parameters)
  gated        per-token softmax mixture over all cached layers, scored by a
               linear gate, into one layer (adds d_model + 1 parameters)
  chunk_gated  gated mixing applied separately to the lower and upper halves
               of the cache, fused at two layers (adds 2 * (d_model + 1))

Three attention variants consume the built memory at a hooked layer:

  memory  keys/values derived from the memory with the layer's own
          projection weights and appended behind the layer's own pairs
  cross   a second attention pass with dedicated projections, queries from
          the self-attention output, residual-added
  gate    per-head sigmoid blend of local attention and memory attention
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import (LayerParams, MemoryCache, attention_mask, merge_heads,
                      normalize_pad_mask, split_heads)
from .errors import ConfigError, ShapeError
from .optim import ParamStore

STRATEGIES = ("single", "multi", "gated", "chunk_gated")
VARIANTS = ("memory", "cross", "gate")


def default_top_layer(num_layers: int) -> int:
    """Three-quarter depth, the best single fusion point in a 12-layer sweep."""
    return max(1, math.ceil(0.75 * num_layers))


@dataclass(frozen=True)
class FusionSpec:
    strategy: str
    variant: str = "memory"
    dst: int = None
    split: int = None
    dst_low: int = None
    dst_high: int = None

    def resolved(self, l_general: int, l_domain: int) -> "FusionSpec":
        """Fill unset layer choices with scaled defaults and validate."""
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy '{self.strategy}'")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant '{self.variant}'")
        kw = asdict(self)
        if self.strategy in ("single", "gated") and kw["dst"] is None:
            kw["dst"] = default_top_layer(l_domain)
        if self.strategy == "chunk_gated":
            if kw["split"] is None:
                kw["split"] = l_general // 2
            if kw["dst_low"] is None:
                kw["dst_low"] = kw["split"]
            if kw["dst_high"] is None:
                kw["dst_high"] = l_domain
        spec = FusionSpec(**kw)
        spec.validate(l_general, l_domain)
        return spec

    def validate(self, l_general: int, l_domain: int) -> None:
        if self.strategy in ("single", "gated"):
            if not (self.dst and 1 <= self.dst <= l_domain):
                raise ConfigError(f"dst={self.dst} outside 1..{l_domain}")
        elif self.strategy == "multi":
            if l_general != l_domain:
                raise ConfigError("multi-layer transfer needs equal depths, "
                                  f"got {l_general} vs {l_domain}")
        elif self.strategy == "chunk_gated":
            if not (self.split and 1 <= self.split < l_general):
                raise ConfigError(f"split={self.split} outside 1..{l_general - 1}")
            for name in ("dst_low", "dst_high"):
                v = getattr(self, name)
                if not (v and 1 <= v <= l_domain):
                    raise ConfigError(f"{name}={v} outside 1..{l_domain}")
            if self.dst_low == self.dst_high:
                raise ConfigError("chunk fusion layers must differ")

    def hook_layers(self, l_domain: int) -> tuple:
        if self.strategy in ("single", "gated"):
            return (self.dst,)
        if self.strategy == "multi":
            return tuple(range(1, l_domain + 1))
        return tuple(sorted((self.dst_low, self.dst_high)))


def init_fusion_params(store: ParamStore, d_model: int, num_heads: int,
                       spec: FusionSpec, rng, l_domain: int) -> None:
    """Register strategy gates and variant weights; skips existing entries
    (a checkpoint loader restores them before the model is assembled)."""

    def add(name, tensor):
        if name not in store:
            store.add(name, tensor)

    if spec.strategy == "gated":
        add("fusion.gate.weight", Tensor(np.zeros((d_model, 1))))
        add("fusion.gate.bias", Tensor(np.zeros(1)))
    elif spec.strategy == "chunk_gated":
        for side in ("low", "high"):
            add(f"fusion.gate_{side}.weight", Tensor(np.zeros((d_model, 1))))
            add(f"fusion.gate_{side}.bias", Tensor(np.zeros(1)))
    if spec.variant == "cross":
        for i in spec.hook_layers(l_domain):
            for w in ("wq", "wk", "wv", "wo"):
                add(f"fusion.layer{i}.cross.{w}",
                    Tensor(rng.normal(0.0, 0.02, (d_model, d_model))))
    elif spec.variant == "gate":
        for i in spec.hook_layers(l_domain):
            add(f"fusion.layer{i}.gate_attn.logit", Tensor(np.zeros(num_heads)))


# ---------------------------------------------------------------------------
# memory builders
# ---------------------------------------------------------------------------

def build_memory_single(cache: MemoryCache) -> Tensor:
    """The last cached hidden state, unchanged."""
    if len(cache) == 0:
        raise ConfigError("memory cache is empty")
    return cache.layers[-1]


def build_memory_gated(layers, weight: Tensor, bias: Tensor,
                       diag: dict = None, diag_key: str = "alpha") -> Tensor:
    """Per-token softmax mixture over the given cache slice.

    Each token's layer scores come from one shared linear gate; the mixture
    weights therefore sum to one per token by construction.
    """
    layers = list(layers)
    if not layers:
        raise ConfigError("gated memory needs a non-empty cache slice")
    scores = [ad.add(ad.matmul(m, weight), bias) for m in layers]
    alpha = ad.softmax_rows(ad.concat_cols(scores))
    if diag is not None:
        diag[diag_key] = alpha.data.copy()
    mixed = ad.mul(ad.slice_cols(alpha, 0, 1), layers[0])
    for l in range(1, len(layers)):
        mixed = ad.add(mixed, ad.mul(ad.slice_cols(alpha, l, l + 1), layers[l]))
    return mixed


def build_memory_chunked(cache: MemoryCache, split: int,
                         gate_low, gate_high, diag: dict = None):
    """Gated mixing applied to cache layers 1..split and split+1..L."""
    if not 1 <= split < len(cache):
        raise ConfigError(f"split={split} outside 1..{len(cache) - 1}")
    low = build_memory_gated(cache.layers[:split], *gate_low,
                             diag=diag, diag_key="alpha_low")
    high = build_memory_gated(cache.layers[split:], *gate_high,
                              diag=diag, diag_key="alpha_high")
    return low, high


def plan_fusion(spec: FusionSpec, l_general: int, l_domain: int,
                store: ParamStore = None) -> dict:
    """Map each hooked domain layer to a builder(cache, diag) -> memory."""
    spec.validate(l_general, l_domain)
    if spec.strategy == "single":
        return {spec.dst: lambda cache, diag: build_memory_single(cache)}
    if spec.strategy == "multi":
        return {i: (lambda cache, diag, i=i: cache.layers[i - 1])
                for i in range(1, l_domain + 1)}
    if spec.strategy == "gated":
        w, b = store["fusion.gate.weight"], store["fusion.gate.bias"]
        return {spec.dst: lambda cache, diag: build_memory_gated(
            cache.layers, w, b, diag=diag)}

    w_lo = (store["fusion.gate_low.weight"], store["fusion.gate_low.bias"])
    w_hi = (store["fusion.gate_high.weight"], store["fusion.gate_high.bias"])

    def low(cache, diag):
        return build_memory_gated(cache.layers[:spec.split], *w_lo,
                                  diag=diag, diag_key="alpha_low")

    def high(cache, diag):
        return build_memory_gated(cache.layers[spec.split:], *w_hi,
                                  diag=diag, diag_key="alpha_high")

    return {spec.dst_low: low, spec.dst_high: high}


# ---------------------------------------------------------------------------
# attention variants
# ---------------------------------------------------------------------------

def _resolve_masks(h_prev: Tensor, m_f: Tensor, pad_mask, mem_mask):
    """Normalize pad/memory masks to (B, n) and (B, m_per_seq).

    Memory rows are positionally aligned with input tokens, so an aligned
    memory shares the pad mask; a zero-row memory gets an empty mask and
    any other (debug) size is fully allowed.
    """
    pad = normalize_pad_mask(pad_mask, h_prev.shape[0])
    batch = pad.shape[0]
    n_mem = m_f.data.shape[0]
    if mem_mask is None:
        if n_mem == h_prev.shape[0]:
            mem_mask = pad
        else:
            mem_mask = np.ones((batch, n_mem // batch), dtype=bool)
    else:
        mem_mask = np.asarray(mem_mask, dtype=bool)
        if mem_mask.ndim == 1:
            mem_mask = mem_mask[None, :]
    return pad, mem_mask


def _check_width(h: Tensor, m_f: Tensor) -> None:
    if m_f.data.ndim != 2 or m_f.data.shape[1] != h.data.shape[1]:
        raise ShapeError(f"memory width {m_f.data.shape} does not match "
                         f"hidden width {h.data.shape}")


def memory_attention(h_prev: Tensor, m_f: Tensor, layer: LayerParams,
                     num_heads: int, pad_mask=None, mem_mask=None) -> Tensor:
    """Attention with memory-derived key/value pairs appended behind the
    layer's own, reusing the layer's projection weights.  With a zero-row
    memory this reduces bitwise to standard self-attention.
    """
    _check_width(h_prev, m_f)
    pad, mem = _resolve_masks(h_prev, m_f, pad_mask, mem_mask)
    batch = pad.shape[0]
    q = split_heads(ad.matmul(h_prev, layer.wq), batch, num_heads)
    k = split_heads(ad.matmul(h_prev, layer.wk), batch, num_heads)
    v = split_heads(ad.matmul(h_prev, layer.wv), batch, num_heads)
    mk = split_heads(ad.matmul(m_f, layer.wk), batch, num_heads)
    mv = split_heads(ad.matmul(m_f, layer.wv), batch, num_heads)
    kt = ad.concat([k, mk], axis=1)
    vt = ad.concat([v, mv], axis=1)
    inv = 1.0 / np.sqrt(q.shape[2])
    scores = ad.scale(ad.bmm(q, ad.transpose_axes(kt, (0, 2, 1))), inv)
    attn = ad.softmax_last(scores, attention_mask(pad, mem, num_heads))
    return ad.matmul(merge_heads(ad.bmm(attn, vt), batch, num_heads),
                     layer.wo)


def cross_attention_fuse(h_self_out: Tensor, m_f: Tensor, cross: dict,
                         num_heads: int, pad_mask=None,
                         mem_mask=None) -> Tensor:
    """Second attention pass: queries from the self-attention output,
    keys/values from the memory via dedicated projections, residual-added."""
    _check_width(h_self_out, m_f)
    pad, mem = _resolve_masks(h_self_out, m_f, pad_mask, mem_mask)
    batch = pad.shape[0]
    q = split_heads(ad.matmul(h_self_out, cross["wq"]), batch, num_heads)
    k = split_heads(ad.matmul(m_f, cross["wk"]), batch, num_heads)
    v = split_heads(ad.matmul(m_f, cross["wv"]), batch, num_heads)
    inv = 1.0 / np.sqrt(q.shape[2])
    scores = ad.scale(ad.bmm(q, ad.transpose_axes(k, (0, 2, 1))), inv)
    cols = np.repeat(np.broadcast_to(mem[:, None, :],
                                     (batch, pad.shape[1], mem.shape[1])),
                     num_heads, axis=0)
    attn = ad.softmax_last(scores, cols)
    fused = ad.matmul(merge_heads(ad.bmm(attn, v), batch, num_heads),
                      cross["wo"])
    return ad.add(h_self_out, fused)


def gate_attention_fuse(h_prev: Tensor, m_f: Tensor, layer: LayerParams,
                        gate_logit: Tensor, num_heads: int, pad_mask=None,
                        mem_mask=None) -> Tensor:
    """Per-head sigmoid blend of local attention and memory attention,
    both computed with the layer's own projection weights."""
    _check_width(h_prev, m_f)
    pad, mem = _resolve_masks(h_prev, m_f, pad_mask, mem_mask)
    batch, n = pad.shape
    q = split_heads(ad.matmul(h_prev, layer.wq), batch, num_heads)
    k = split_heads(ad.matmul(h_prev, layer.wk), batch, num_heads)
    v = split_heads(ad.matmul(h_prev, layer.wv), batch, num_heads)
    mk = split_heads(ad.matmul(m_f, layer.wk), batch, num_heads)
    mv = split_heads(ad.matmul(m_f, layer.wv), batch, num_heads)
    inv = 1.0 / np.sqrt(q.shape[2])
    loc_scores = ad.scale(ad.bmm(q, ad.transpose_axes(k, (0, 2, 1))), inv)
    loc = ad.bmm(ad.softmax_last(loc_scores,
                                 attention_mask(pad, None, num_heads)), v)
    mem_scores = ad.scale(ad.bmm(q, ad.transpose_axes(mk, (0, 2, 1))), inv)
    mem_cols = np.repeat(np.broadcast_to(mem[:, None, :],
                                         (batch, n, mem.shape[1])),
                         num_heads, axis=0)
    mem_att = ad.bmm(ad.softmax_last(mem_scores, mem_cols), mv)
    # blend per head in the (B, heads, n, dk) layout
    dk = q.shape[2]
    loc4 = ad.reshape(loc, (batch, num_heads, n, dk))
    mem4 = ad.reshape(mem_att, (batch, num_heads, n, dk))
    b4 = ad.reshape(ad.sigmoid(gate_logit), (1, num_heads, 1, 1))
    one = Tensor(np.ones((1, num_heads, 1, 1)))
    blended = ad.add(ad.mul(b4, mem4), ad.mul(ad.sub(one, b4), loc4))
    merged = merge_heads(ad.reshape(blended, (batch * num_heads, n, dk)),
                         batch, num_heads)
    return ad.matmul(merged, layer.wo)


def make_attention_hook(spec: FusionSpec, layer_idx: int, m_f: Tensor,
                        store: ParamStore, num_heads: int,
                        pad_mask: np.ndarray, mem_mask: np.ndarray):
    """Bind one hooked layer's attention replacement for encoder_forward."""
    from .encoder import self_attention  # local to keep encoder fusion-free

    if spec.variant == "memory":
        def hook(h_prev, lp):
            return memory_attention(h_prev, m_f, lp, num_heads,
                                    pad_mask=pad_mask, mem_mask=mem_mask)
    elif spec.variant == "cross":
        cross = {w: store[f"fusion.layer{layer_idx}.cross.{w}"]
                 for w in ("wq", "wk", "wv", "wo")}

        def hook(h_prev, lp):
            base = self_attention(h_prev, lp, pad_mask, num_heads)
            return cross_attention_fuse(base, m_f, cross, num_heads,
                                        pad_mask=pad_mask, mem_mask=mem_mask)
    else:
        logit = store[f"fusion.layer{layer_idx}.gate_attn.logit"]

        def hook(h_prev, lp):
            return gate_attention_fuse(h_prev, m_f, lp, logit, num_heads,
                                       pad_mask=pad_mask, mem_mask=mem_mask)
    return hook
