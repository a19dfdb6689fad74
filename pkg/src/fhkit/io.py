"""Binary and JSON file formats: features, alignments, checkpoints, manifests."""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

from .alignment import AlignmentEntry
from .errors import DataError
from .inventory import PhonemeInventory
from . import model as fm

FEATURE_MAGIC = b"FHF1"
FEATURE_VERSION = 1
CHECKPOINT_MAGIC = b"FHCK"
CHECKPOINT_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()[:16]


def _atomic_write(path, data: bytes):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


# -- features ---------------------------------------------------------------

def write_features(path, feats) -> None:
    x = np.ascontiguousarray(feats, dtype="<f4")
    if x.ndim != 2:
        raise DataError("features must be a (T, D) matrix")
    T, D = x.shape
    _atomic_write(path, FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, T, D) + x.tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 16 or data[:4] != FEATURE_MAGIC:
        raise DataError(f"{path}: not a feature file (bad magic)")
    version, T, D = struct.unpack("<III", data[4:16])
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported feature version {version}")
    if len(data) != 16 + 4 * T * D:
        raise DataError(f"{path}: truncated feature file")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(T, D).astype(np.float32)


# -- alignments -------------------------------------------------------------

def write_alignment(path, entries, inv: PhonemeInventory, header_extra=None) -> None:
    header = {"inventory_hash": inv.hash(), "inventory": inv.to_dict()}
    header.update(header_extra or {})
    lines = [canonical_json(header)]
    for e in entries:
        lines.append(canonical_json({"id": e.id, "labels": [int(v) for v in e.labels],
                                     "provenance": e.provenance}))
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_alignment(path, inv: PhonemeInventory | None = None):
    """Returns ``(entries, header)``; checks the inventory hash when given."""
    with open(path) as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty alignment file")
    try:
        header = json.loads(lines[0])
        file_inv = PhonemeInventory.from_dict(header["inventory"])
        if header.get("inventory_hash") != file_inv.hash():
            raise DataError(f"{path}: inventory hash does not match embedded inventory")
        if inv is not None and inv.hash() != header["inventory_hash"]:
            raise DataError(f"{path}: inventory-hash mismatch (alignment vs model)")
        entries = []
        for ln in lines[1:]:
            d = json.loads(ln)
            labels = np.asarray(d["labels"], dtype=np.int64)
            if labels.size and (labels.min() < 0 or labels.max() >= file_inv.num_state_classes):
                raise DataError(f"{path}: label out of range in {d['id']}")
            entries.append(AlignmentEntry(d["id"], labels, d["provenance"]))
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise DataError(f"{path}: malformed alignment file: {e}") from None
    return entries, header


# -- checkpoints ------------------------------------------------------------

def write_checkpoint(path, model: fm.FactoredModel, extra_meta=None) -> None:
    """Magic, u32 version, u32 metadata length, JSON metadata, raw f32 arrays."""
    arrays = [(n, model.params[n]) for n in model.param_names()]
    if model.feat_mean is not None:
        arrays += [("feat_mean", model.feat_mean), ("feat_std", model.feat_std)]
    meta = {
        "inventory": model.inventory.to_dict(),
        "inventory_hash": model.inventory.hash(),
        "model": model.config_dict(),
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    meta.update(extra_meta or {})
    meta_bytes = canonical_json(meta).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in arrays)
    _atomic_write(path, CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes))
                  + meta_bytes + body)


def read_checkpoint(path):
    """Returns ``(model, metadata)``; parameters come back as float64."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    version, meta_len = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    if len(data) < 12 + meta_len:
        raise DataError(f"{path}: truncated checkpoint")
    try:
        meta = json.loads(data[12:12 + meta_len])
    except json.JSONDecodeError:
        raise DataError(f"{path}: corrupt checkpoint metadata") from None
    inv = PhonemeInventory.from_dict(meta["inventory"])
    mcfg = meta["model"]
    model = fm.FactoredModel(inv, fm.EncoderConfig(**mcfg["encoder"]), mcfg["context_order"],
                             mcfg["simplified_heads"])
    offset = 12 + meta_len
    arrays = {}
    for spec in meta["arrays"]:
        n = int(np.prod(spec["shape"])) if spec["shape"] else 1
        end = offset + 4 * n
        if end > len(data):
            raise DataError(f"{path}: truncated checkpoint")
        arrays[spec["name"]] = np.frombuffer(data, dtype="<f4", count=n, offset=offset) \
            .reshape(spec["shape"]).astype(np.float64)
        offset = end
    if offset != len(data):
        raise DataError(f"{path}: trailing bytes in checkpoint")
    model.feat_mean = arrays.pop("feat_mean", None)
    model.feat_std = arrays.pop("feat_std", None)
    expected = model.param_shapes()
    if set(arrays) != set(expected):
        raise DataError(f"{path}: parameter set does not match model configuration")
    for n, shape in expected.items():
        if tuple(arrays[n].shape) != tuple(shape):
            raise DataError(f"{path}: bad shape for {n}")
    model.params = {n: arrays[n] for n in expected}
    return model, meta


# -- manifests --------------------------------------------------------------

def write_manifest(path, records) -> None:
    lines = [canonical_json(r) for r in records]
    _atomic_write(path, ("\n".join(lines) + ("\n" if lines else "")).encode())


def read_manifest(path) -> list[dict]:
    base = os.path.dirname(os.path.abspath(path))
    records = []
    seen = set()
    with open(path) as f:
        for ln in f:
            if not ln.strip():
                continue
            try:
                r = json.loads(ln)
                uid, feat, transcript = r["id"], r["feature_file"], r["transcript"]
            except (json.JSONDecodeError, KeyError) as e:
                raise DataError(f"{path}: malformed manifest line: {e}") from None
            if uid in seen:
                raise DataError(f"{path}: duplicate utterance id {uid!r}")
            seen.add(uid)
            feat_path = feat if os.path.isabs(feat) else os.path.join(base, feat)
            if not os.path.exists(feat_path):
                raise DataError(f"{path}: missing feature file {feat}")
            records.append({"id": uid, "feature_file": feat_path,
                            "transcript": transcript.split() if isinstance(transcript, str) else list(transcript)})
    return records
