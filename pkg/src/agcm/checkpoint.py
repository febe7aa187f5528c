"""Binary weight snapshots.

Layout: 8-byte magic, little-endian u32 header length, UTF-8 JSON header,
then the raw float64 little-endian parameter payloads concatenated in
header order.  The header records the config snapshot, seed, arbitrary
run metadata, a parameter index (name, shape, offset in doubles, size),
and an FNV-1a 64 digest of the payload so corruption is detected at load.

Nothing time- or host-dependent is written, so a given model state always
serializes to identical bytes.
"""

import json
import struct

import numpy as np

MAGIC = b"AGCMCKP1"
VERSION = 1

_FNV_OFFSET = 0xcbf29ce484222325
_FNV_PRIME = 0x100000001b3


def fnv1a64(data):
    """FNV-1a 64-bit hash of a bytes-like object."""
    h = _FNV_OFFSET
    for byte in bytes(data):
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def params_digest(store):
    """Order-independent digest of a parameter store's current values."""
    h = 0
    for name in sorted(store.names()):
        h ^= fnv1a64(name.encode("ascii") + store[name].values.tobytes())
    return f"{h:016x}"


def save_params(path, store, config_dict, kind, seed, extra=None):
    """Serialize a parameter store with its config snapshot."""
    index = []
    chunks = []
    offset = 0
    for name, t in store.items():
        arr = np.ascontiguousarray(t.values, dtype=np.float64)
        index.append({"name": name, "shape": list(arr.shape),
                      "offset": offset, "size": int(arr.size)})
        chunks.append(arr.tobytes())  # C-order float64, little-endian on all supported hosts
        offset += arr.size
    payload = b"".join(chunks)
    header = {
        "version": VERSION,
        "kind": kind,
        "config": config_dict,
        "seed": int(seed),
        "params": index,
        "digest": f"{fnv1a64(payload):016x}",
    }
    if extra:
        header["extra"] = extra
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        f.write(payload)


def load_params(path):
    """Read a checkpoint; returns (header dict, {name: ndarray})."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + hlen:
        raise ValueError(f"{path}: truncated header")
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    payload = blob[12 + hlen:]
    if f"{fnv1a64(payload):016x}" != header["digest"]:
        raise ValueError(f"{path}: payload digest mismatch")
    flat = np.frombuffer(payload, dtype="<f8")
    params = {}
    for ent in header["params"]:
        a = flat[ent["offset"]:ent["offset"] + ent["size"]]
        if a.size != ent["size"]:
            raise ValueError(f"{path}: truncated payload at {ent['name']}")
        params[ent["name"]] = a.reshape(ent["shape"]).copy()
    return header, params


def assign_params(store, params):
    """Copy loaded arrays into a freshly built store; names must agree."""
    want = set(store.names())
    have = set(params)
    if want != have:
        missing = sorted(want - have)
        surplus = sorted(have - want)
        raise ValueError(f"checkpoint/model mismatch: missing {missing}, surplus {surplus}")
    for name, t in store.items():
        arr = params[name]
        if tuple(arr.shape) != t.values.shape:
            raise ValueError(f"{name}: shape {arr.shape} vs model {t.values.shape}")
        t.values[:] = arr


def save_visual(path, model, extra=None):
    save_params(path, model.store, model.cfg.to_dict(), "visual", model.seed, extra=extra)


def load_visual(path):
    """Rebuild a VisualModel from a checkpoint."""
    from .concept_model import VisualModel
    from .config import ModelConfig
    header, params = load_params(path)
    if header.get("kind") != "visual":
        raise ValueError(f"{path}: checkpoint kind {header.get('kind')!r}, expected 'visual'")
    cfg = ModelConfig.from_dict(header["config"])
    model = VisualModel(cfg, seed=header["seed"])
    assign_params(model.store, params)
    return model, header
