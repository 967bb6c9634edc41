"""Vocabulary, synthetic two-domain corpora, MLM masking, and planted tasks.

Corpora are first-order Markov chains over a shared token inventory.  The
"general" chain and the two domain chains keep a configurable fraction of
successor structure in common, so continued training on a domain measurably
degrades held-out general text while still exercising shared patterns.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
SPECIAL_TOKENS = ("<pad>", "<unk>", "<cls>", "<sep>", "<mask>")
NUM_SPECIALS = len(SPECIAL_TOKENS)


class Vocab:
    """Bijective token/id mapping with the five reserved specials at 0..4."""

    def __init__(self, content_tokens):
        tokens = tuple(content_tokens)
        if len(set(tokens)) != len(tokens):
            raise DataError("duplicate content tokens")
        if any(t in SPECIAL_TOKENS for t in tokens):
            raise DataError("content token collides with a special token")
        self._tokens = SPECIAL_TOKENS + tokens
        self._ids = {t: i for i, t in enumerate(self._tokens)}

    @classmethod
    def from_lines(cls, lines) -> "Vocab":
        """Whitespace tokens ranked by frequency (ties broken lexically)."""
        counts = Counter()
        for line in lines:
            counts.update(line.split())
        if not counts:
            raise DataError("cannot build a vocabulary from an empty corpus")
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        return cls(ordered)

    def __len__(self) -> int:
        return len(self._tokens)

    @property
    def tokens(self) -> tuple:
        return self._tokens

    @property
    def content_tokens(self) -> tuple:
        return self._tokens[NUM_SPECIALS:]

    def token_id(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def encode(self, text) -> np.ndarray:
        toks = text.split() if isinstance(text, str) else list(text)
        return np.array([self._ids.get(t, UNK_ID) for t in toks], dtype=np.int64)

    def decode(self, ids) -> list:
        return [self._tokens[int(i)] for i in ids]


@dataclass(eq=False)
class DomainSpec:
    """A first-order Markov text generator for one synthetic domain."""

    name: str
    tokens: tuple
    transitions: np.ndarray
    initial: np.ndarray
    doc_len: tuple = (12, 24)
    seed: int = 0

    def __post_init__(self):
        t = len(self.tokens)
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        if self.transitions.shape != (t, t):
            raise DataError(f"transition table must be {t}x{t}")
        if np.abs(self.transitions.sum(axis=1) - 1.0).max() > 1e-12:
            raise DataError("transition rows must sum to 1")
        if (self.transitions < 0).any():
            raise DataError("transition probabilities must be non-negative")
        if self.initial.shape != (t,) or abs(self.initial.sum() - 1.0) > 1e-12:
            raise DataError("initial distribution must sum to 1")
        lo, hi = self.doc_len
        if not (1 <= lo <= hi):
            raise DataError("invalid document length range")


def gen_domain_corpus(spec: DomainSpec, num_docs: int) -> list:
    """Sample documents from the chain; byte-identical per (spec, seed)."""
    rng = np.random.default_rng(spec.seed)
    n_tok = len(spec.tokens)
    lo, hi = spec.doc_len
    # Inverse-CDF sampling keeps per-token draws cheap and deterministic.
    cdf = np.cumsum(spec.transitions, axis=1)
    cdf[:, -1] = 1.0
    init_cdf = np.cumsum(spec.initial)
    init_cdf[-1] = 1.0
    docs = []
    for _ in range(num_docs):
        length = int(rng.integers(lo, hi + 1))
        state = int(np.searchsorted(init_cdf, rng.random(), side="right"))
        state = min(state, n_tok - 1)
        out = [state]
        draws = rng.random(length - 1)
        for r in draws:
            state = min(int(np.searchsorted(cdf[state], r, side="right")), n_tok - 1)
            out.append(state)
        docs.append(" ".join(spec.tokens[i] for i in out))
    return docs


def _successor_table(rng, n_tok: int, p_succ: float) -> np.ndarray:
    """Row i puts p_succ on a designated successor, the rest spread uniformly."""
    succ = rng.permutation(n_tok)
    # avoid self-loops so bigram structure is always informative
    for i in range(n_tok):
        if succ[i] == i:
            j = (i + 1) % n_tok
            succ[i], succ[j] = succ[j], succ[i]
    table = np.full((n_tok, n_tok), (1.0 - p_succ) / (n_tok - 1))
    for i in range(n_tok):
        table[i, i] = 0.0
    # redistribute the removed self-loop mass
    table *= (1.0 - p_succ) / table.sum(axis=1, keepdims=True)
    table[np.arange(n_tok), succ] += p_succ
    return table


def _rewire(base: np.ndarray, rng, rows, p_succ: float) -> np.ndarray:
    """Give the listed rows a fresh successor, keeping the same concentration."""
    n_tok = base.shape[0]
    table = base.copy()
    for i in rows:
        old = int(np.argmax(table[i]))
        choices = [j for j in range(n_tok) if j not in (i, old)]
        new = int(rng.choice(choices))
        row = np.full(n_tok, (1.0 - p_succ) / (n_tok - 2))
        row[i] = 0.0
        row[old] = 0.0
        row *= (1.0 - p_succ) / row.sum()
        row[new] += p_succ
        table[i] = row
    return table


def default_domain_specs(num_tokens: int = 60, overlap: float = 0.5,
                         p_succ: float = 0.85, seed: int = 0,
                         doc_len: tuple = (12, 24)) -> dict:
    """Build the general / domain_a / domain_b generator trio.

    `overlap` is the fraction of tokens whose successor the domains share
    with the general chain; the rest are rewired, which is what makes
    domain adaptation overwrite general structure.
    """
    if num_tokens < 10:
        raise DataError("need at least 10 content tokens")
    if not 0.0 <= overlap <= 1.0:
        raise DataError("overlap must be in [0, 1]")
    tokens = tuple(f"w{i:03d}" for i in range(num_tokens))
    rng = np.random.default_rng(seed)
    general = _successor_table(rng, num_tokens, p_succ)
    n_rewire = int(round((1.0 - overlap) * num_tokens))
    rows = rng.permutation(num_tokens)[:n_rewire]
    dom_a = _rewire(general, rng, rows, p_succ)
    rows_b = rng.permutation(num_tokens)[:n_rewire]
    dom_b = _rewire(general, rng, rows_b, p_succ)
    initial = np.full(num_tokens, 1.0 / num_tokens)
    return {
        "general": DomainSpec("general", tokens, general, initial, doc_len, seed + 1),
        "domain_a": DomainSpec("domain_a", tokens, dom_a, initial, doc_len, seed + 2),
        "domain_b": DomainSpec("domain_b", tokens, dom_b, initial, doc_len, seed + 3),
    }


def gen_mixed_corpus(primary: DomainSpec, secondary: DomainSpec,
                     num_docs: int, mix: float = 0.3,
                     seg_len: tuple = (4, 8), seed: int = None) -> list:
    """Regime-switching documents: segments from the primary chain with a
    `mix` share of secondary-chain segments spliced in.

    Domain text in the wild keeps plenty of general-language stretches;
    this is what makes a frozen general memory informative while domain
    statistics are being learned.
    """
    if primary.tokens != secondary.tokens:
        raise DataError("mixed corpus needs a shared token inventory")
    if not 0.0 <= mix <= 1.0:
        raise DataError("mix must be in [0, 1]")
    rng = np.random.default_rng(primary.seed if seed is None else seed)
    n_tok = len(primary.tokens)
    cdfs = {}
    for key, spec in (("p", primary), ("s", secondary)):
        cdf = np.cumsum(spec.transitions, axis=1)
        cdf[:, -1] = 1.0
        cdfs[key] = cdf
    lo, hi = primary.doc_len
    docs = []
    for _ in range(num_docs):
        length = int(rng.integers(lo, hi + 1))
        out = [int(rng.integers(n_tok))]
        while len(out) < length:
            cdf = cdfs["s" if rng.random() < mix else "p"]
            state = out[-1]
            for r in rng.random(int(rng.integers(seg_len[0], seg_len[1] + 1))):
                state = min(int(np.searchsorted(cdf[state], r, side="right")),
                            n_tok - 1)
                out.append(state)
                if len(out) >= length:
                    break
        docs.append(" ".join(primary.tokens[i] for i in out))
    return docs


def split_corpus(lines, train_frac: float = 0.7, seed: int = 0):
    """Deterministic shuffle then split (the 70/30 pretrain/test protocol)."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(lines))
    cut = int(round(train_frac * len(lines)))
    train = [lines[i] for i in order[:cut]]
    test = [lines[i] for i in order[cut:]]
    return train, test


# ---------------------------------------------------------------------------
# encoding and MLM masking
# ---------------------------------------------------------------------------

def encode_document(text: str, vocab: Vocab, max_seq_len: int) -> np.ndarray:
    toks = text.split()[: max_seq_len - 2]
    return np.concatenate([[CLS_ID], vocab.encode(toks), [SEP_ID]]).astype(np.int64)


def batch_encode(texts, vocab: Vocab, max_seq_len: int):
    """Encode and pad to the longest sequence in the batch."""
    seqs = [encode_document(t, vocab, max_seq_len) for t in texts]
    n = max(len(s) for s in seqs)
    ids = np.full((len(seqs), n), PAD_ID, dtype=np.int64)
    pad_mask = np.zeros((len(seqs), n), dtype=bool)
    for b, s in enumerate(seqs):
        ids[b, : len(s)] = s
        pad_mask[b, : len(s)] = True
    return ids, pad_mask


@dataclass
class MaskedBatch:
    input_ids: np.ndarray   # [B, n] after corruption
    labels: np.ndarray      # [B, n], original id at selected positions else -1
    pad_mask: np.ndarray    # [B, n] bool, True at real tokens


def mask_tokens(ids: np.ndarray, pad_mask: np.ndarray, vocab: Vocab,
                mask_prob: float = 0.15, rng=None, seed: int = 0,
                force_mask: bool = False) -> MaskedBatch:
    """BERT-style corruption: of the selected positions, 80% become <mask>,
    10% a random content token, 10% stay unchanged.  Specials and pads are
    never selected.  `force_mask` sends every selected position to <mask>.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    ids = np.asarray(ids, dtype=np.int64)
    pad_mask = np.asarray(pad_mask, dtype=bool)
    selectable = pad_mask & (ids >= NUM_SPECIALS)
    sel = selectable & (rng.random(ids.shape) < mask_prob)
    labels = np.full(ids.shape, -1, dtype=np.int64)
    labels[sel] = ids[sel]
    out = ids.copy()
    mode = rng.random(ids.shape)
    randoms = rng.integers(NUM_SPECIALS, len(vocab), size=ids.shape)
    if force_mask:
        out[sel] = MASK_ID
    else:
        out[sel & (mode < 0.8)] = MASK_ID
        repl = sel & (mode >= 0.8) & (mode < 0.9)
        out[repl] = randoms[repl]
    return MaskedBatch(out, labels, pad_mask)


# ---------------------------------------------------------------------------
# planted classification task
# ---------------------------------------------------------------------------

@dataclass
class LabeledExample:
    doc_id: int
    label: int
    text: str


@dataclass
class ClassificationTask:
    num_classes: int
    train: list
    dev: list
    test: list
    probe_tokens: tuple = ()
    general_successor: dict = field(default_factory=dict)
    domain_successor: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def split(self, name: str):
        return {"train": self.train, "dev": self.dev, "test": self.test}[name]


def gen_classification_task(general_spec: DomainSpec, domain_spec: DomainSpec,
                            num_examples: int, num_classes: int, seed: int = 0,
                            signal: float = 1.0, num_probes: int = 12,
                            noise_plants: int = 2,
                            splits=(0.5, 0.2, 0.3)) -> ClassificationTask:
    """Label documents by the transition statistics of their planted bigrams.

    A reserved probe-token set is excluded from the background text.  A
    class-c document plants (C-1-c) bigrams that follow the general chain
    (probe followed by its general successor), c that follow the domain
    chain, and a few noise plants (probe followed by neither successor).
    The probes are drawn fresh per document, so the label cannot be read
    off fixed marker tokens: it requires judging each planted pair against
    both chains' statistics, which is what a frozen general memory retains
    and an adapted backbone forgets.  `signal` is the probability that each
    informative plant is kept rather than degraded to noise.
    """
    if num_classes < 2:
        raise DataError("need at least 2 classes")
    if general_spec.tokens != domain_spec.tokens:
        raise DataError("task spec pair must share one token inventory")
    rng = np.random.default_rng(seed)
    tokens = general_spec.tokens
    n_tok = len(tokens)
    succ_g = np.argmax(general_spec.transitions, axis=1)
    succ_d = np.argmax(domain_spec.transitions, axis=1)
    diverged = [i for i in range(n_tok) if succ_g[i] != succ_d[i]]
    if len(diverged) < num_probes:
        raise DataError(f"need {num_probes} diverged tokens, "
                        f"have {len(diverged)}")
    # keep successor tokens out of the probe set so planted pairs can never
    # chain into accidental extra plants at splice seams
    probes, probe_set = [], set()
    for i in map(int, rng.permutation(diverged)):
        succs = {int(succ_g[i]), int(succ_d[i])}
        if i in probe_set or probe_set & succs:
            continue
        if any(int(succ_g[p]) == i or int(succ_d[p]) == i for p in probes):
            continue
        probes.append(i)
        probe_set.add(i)
        if len(probes) == num_probes:
            break
    if len(probes) < num_probes:
        raise DataError("could not reserve a clean probe-token set")
    probes = sorted(probes)
    probe_set = set(probes)
    # background chain over non-probe tokens only, rows renormalized
    keep = np.array([i for i in range(n_tok) if i not in probe_set])
    bg = domain_spec.transitions[np.ix_(keep, keep)]
    bg = bg / bg.sum(axis=1, keepdims=True)
    cdf = np.cumsum(bg, axis=1)
    cdf[:, -1] = 1.0
    lo, hi = domain_spec.doc_len
    plants_per_doc = num_classes - 1

    def sample_background(length):
        state = int(rng.integers(len(keep)))
        out = [int(keep[state])]
        for r in rng.random(length - 1):
            state = min(int(np.searchsorted(cdf[state], r, side="right")),
                        len(keep) - 1)
            out.append(int(keep[state]))
        return out

    def noise_successor(probe):
        while True:
            y = int(rng.integers(n_tok))
            if y not in (probe, int(succ_g[probe]), int(succ_d[probe])) \
                    and y not in probe_set:
                return y

    def build_doc(label):
        toks = sample_background(int(rng.integers(lo, hi + 1)))
        chosen = rng.choice(probes, size=plants_per_doc + noise_plants,
                            replace=False)
        plants = []
        for slot, probe in enumerate(map(int, chosen)):
            if slot < num_classes - 1 - label:
                kind = "general" if rng.random() < signal else "noise"
            elif slot < plants_per_doc:
                kind = "domain" if rng.random() < signal else "noise"
            else:
                kind = "noise"
            if kind == "general":
                plants.append((probe, int(succ_g[probe])))
            elif kind == "domain":
                plants.append((probe, int(succ_d[probe])))
            else:
                plants.append((probe, noise_successor(probe)))
        for pair in plants:
            # never splice into another plant: only positions between
            # background tokens or at the ends keep every pair intact
            while True:
                pos = int(rng.integers(len(toks) + 1))
                left = toks[pos - 1] if pos > 0 else None
                if left in probe_set:
                    continue
                toks[pos:pos] = list(pair)
                break
        return " ".join(tokens[i] for i in toks)

    examples = []
    for doc_id in range(num_examples):
        label = doc_id % num_classes
        examples.append(LabeledExample(doc_id, label, build_doc(label)))
    order = rng.permutation(num_examples)
    n_train = int(round(splits[0] * num_examples))
    n_dev = int(round(splits[1] * num_examples))
    idx = {"train": order[:n_train],
           "dev": order[n_train:n_train + n_dev],
           "test": order[n_train + n_dev:]}
    return ClassificationTask(
        num_classes=num_classes,
        train=[examples[i] for i in idx["train"]],
        dev=[examples[i] for i in idx["dev"]],
        test=[examples[i] for i in idx["test"]],
        probe_tokens=tuple(tokens[i] for i in probes),
        general_successor={tokens[i]: tokens[int(succ_g[i])] for i in probes},
        domain_successor={tokens[i]: tokens[int(succ_d[i])] for i in probes},
        meta={"seed": seed, "signal": signal,
              "plants_per_doc": plants_per_doc, "noise_plants": noise_plants},
    )


def write_task_files(task: ClassificationTask, prefix: str) -> list:
    """One 'label<TAB>document' line per example; returns written paths."""
    paths = []
    for name in ("train", "dev", "test"):
        path = f"{prefix}.{name}.tsv"
        with open(path, "w", encoding="utf-8") as fh:
            for ex in task.split(name):
                fh.write(f"{ex.label}\t{ex.text}\n")
        paths.append(path)
    return paths


def read_task_files(prefix: str) -> ClassificationTask:
    splits = {}
    num_classes = 0
    doc_id = 0
    for name in ("train", "dev", "test"):
        examples = []
        with open(f"{prefix}.{name}.tsv", encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                label_str, text = line.split("\t", 1)
                label = int(label_str)
                num_classes = max(num_classes, label + 1)
                examples.append(LabeledExample(doc_id, label, text))
                doc_id += 1
        splits[name] = examples
    if not splits["train"]:
        raise DataError(f"empty train split in {prefix}.train.tsv")
    return ClassificationTask(num_classes, splits["train"], splits["dev"],
                              splits["test"])
