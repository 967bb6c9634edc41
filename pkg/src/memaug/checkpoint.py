"""Bit-exact binary checkpoints for encoder and fused models.

Layout: magic, version, header length, canonical JSON header, then the
named tensors as little-endian float64 in lexicographic name order, and a
trailing SHA-256 over everything before it.  Saving a loaded checkpoint
reproduces the original file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict

import numpy as np

from .autodiff import Tensor
from .data import NUM_SPECIALS, Vocab
from .encoder import EncoderConfig, EncoderModel
from .errors import CheckpointError
from .fusion import FusionSpec
from .model import MemoryAugmentedModel
from .optim import ParamStore

MAGIC = b"MAUG"
FORMAT_VERSION = 1


def _manifest(store: ParamStore, prefix: str = "") -> list:
    rows = []
    for name in sorted(store.names()):
        t = store[name]
        rows.append({"name": prefix + name,
                     "shape": list(t.data.shape),
                     "frozen": store.is_frozen(name)})
    return rows


def _header_and_tensors(model):
    if isinstance(model, EncoderModel):
        header = {
            "kind": "encoder",
            "config": asdict(model.config),
            "vocab": list(model.vocab.content_tokens),
            "lineage": list(model.lineage),
            "classifier": list(model.classifier) if model.classifier else None,
            "tensors": _manifest(model.store),
        }
        lookup = {row["name"]: model.store[row["name"]]
                  for row in header["tensors"]}
        return header, lookup
    if isinstance(model, MemoryAugmentedModel):
        manifest = (_manifest(model.general.store, "general.")
                    + _manifest(model.domain.store, "domain."))
        manifest.sort(key=lambda r: r["name"])
        header = {
            "kind": "fused",
            "general_config": asdict(model.general.config),
            "domain_config": asdict(model.domain.config),
            "fusion": asdict(model.fusion),
            "frozen": model.frozen,
            "vocab": list(model.vocab.content_tokens),
            "lineage": list(model.domain.lineage),
            "classifier": (list(model.classifier)
                           if model.classifier else None),
            "tensors": manifest,
        }
        lookup = {}
        for row in manifest:
            side, name = row["name"].split(".", 1)
            store = model.general.store if side == "general" else model.domain.store
            lookup[row["name"]] = store[name]
        return header, lookup
    raise CheckpointError(f"cannot checkpoint {type(model).__name__}")


def save_checkpoint(model, path: str) -> None:
    header, lookup = _header_and_tensors(model)
    header["format_version"] = FORMAT_VERSION
    hbytes = json.dumps(header, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION),
             struct.pack("<Q", len(hbytes)), hbytes]
    for row in header["tensors"]:
        arr = np.ascontiguousarray(lookup[row["name"]].data, dtype="<f8")
        parts.append(arr.tobytes())
    blob = b"".join(parts)
    digest = hashlib.sha256(blob).digest()
    with open(path, "wb") as fh:
        fh.write(blob)
        fh.write(digest)


def _read_and_verify(path: str):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 12 + 32 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    blob, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(blob).digest() != digest:
        raise CheckpointError(f"{path} failed its integrity checksum")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path} has format version {version}, "
                              f"expected {FORMAT_VERSION}")
    hlen = struct.unpack("<Q", blob[8:16])[0]
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    payload = blob[16 + hlen:]
    return header, payload


def _restore_tensors(header, payload):
    tensors = {}
    offset = 0
    for row in header["tensors"]:
        shape = tuple(row["shape"])
        size = int(np.prod(shape)) if shape else 1
        nbytes = size * 8
        if offset + nbytes > len(payload):
            raise CheckpointError("checkpoint payload is truncated")
        arr = np.frombuffer(payload, dtype="<f8", count=size,
                            offset=offset).reshape(shape).copy()
        tensors[row["name"]] = (arr, row["frozen"])
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError("checkpoint payload has trailing bytes")
    return tensors


def _build_store(tensors, prefix: str = "") -> ParamStore:
    store = ParamStore()
    for name, (arr, frozen) in tensors.items():
        if name.startswith(prefix):
            store.add(name[len(prefix):], Tensor(arr), frozen=frozen)
    return store


def load_checkpoint(path: str):
    """Reconstruct the saved model; the header is authoritative for configs,
    vocabulary, and the fusion spec."""
    header, payload = _read_and_verify(path)
    tensors = _restore_tensors(header, payload)
    vocab = Vocab(header["vocab"])
    classifier = header.get("classifier")
    if header["kind"] == "encoder":
        config = EncoderConfig(**header["config"])
        model = EncoderModel(config, vocab, store=_build_store(tensors),
                             lineage=header["lineage"])
        if classifier:
            model.classifier = tuple(classifier)
        return model
    if header["kind"] == "fused":
        general = EncoderModel(EncoderConfig(**header["general_config"]),
                               vocab, store=_build_store(tensors, "general."),
                               lineage=["loaded general side"])
        domain = EncoderModel(EncoderConfig(**header["domain_config"]),
                              vocab, store=_build_store(tensors, "domain."),
                              lineage=header["lineage"])
        if classifier:
            domain.classifier = tuple(classifier)
        fusion = FusionSpec(**header["fusion"])
        return MemoryAugmentedModel(general, domain, fusion,
                                    frozen=header["frozen"])
    raise CheckpointError(f"unknown checkpoint kind '{header['kind']}'")


def vocab_token_count(path: str) -> int:
    header, _ = _read_and_verify(path)
    return len(header["vocab"]) + NUM_SPECIALS


def checkpoint_fusion(path: str):
    """The fusion spec recorded in a fused checkpoint header, else None."""
    header, _ = _read_and_verify(path)
    if header["kind"] != "fused":
        return None
    return FusionSpec(**header["fusion"])
