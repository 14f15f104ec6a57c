"""On-disk formats: tensor files, pair manifests and checkpoints.

Tensor file layout (little endian)::

    b"CHT1" | u8 rank | rank x u32 dims | prod(dims) x f32 values (row-major)

Values are stored as float32 and loaded back as float64.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .flow import AnnotatedPair
from .matching import FeatureLevel
from .traincheck import Sample

MAGIC = b"CHT1"


class FormatError(ValueError):
    """A file does not follow its declared format."""


def write_tensor(path, t):
    t = np.asarray(t)
    if not (1 <= t.ndim <= 6):
        raise FormatError(f"tensor rank must be in [1, 6], got {t.ndim}")
    header = MAGIC + struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def read_tensor(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    if len(raw) < 5:
        raise FormatError(f"{path}: truncated header")
    rank = raw[4]
    if not (1 <= rank <= 6):
        raise FormatError(f"{path}: rank {rank} outside [1, 6]")
    end = 5 + 4 * rank
    if len(raw) < end:
        raise FormatError(f"{path}: truncated header")
    shape = struct.unpack(f"<{rank}I", raw[5:end])
    expected = end + 4 * int(np.prod(shape))
    if len(raw) != expected:
        raise FormatError(f"{path}: length mismatch (expected {expected} bytes, got {len(raw)})")
    return np.frombuffer(raw, dtype="<f4", offset=end).reshape(shape).astype(np.float64)


MANIFEST_KEYS = {"src_features", "trg_features", "src_size", "trg_size", "src_kps", "trg_kps", "trg_bbox"}
REQUIRED_KEYS = MANIFEST_KEYS - {"trg_bbox"}


def load_manifest(path):
    """Read a pair manifest into a Sample (feature paths resolve relative to the manifest)."""
    try:
        with open(path) as f:
            d = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(d, dict):
        raise FormatError(f"{path}: manifest must be a JSON object")
    unknown = sorted(set(d) - MANIFEST_KEYS)
    missing = sorted(REQUIRED_KEYS - set(d))
    if unknown or missing:
        raise FormatError(f"{path}: unknown keys {unknown}, missing keys {missing}")
    base = os.path.dirname(os.path.abspath(path))
    if len(d["src_features"]) != len(d["trg_features"]) or not d["src_features"]:
        raise FormatError(f"{path}: need the same non-zero number of source and target feature levels")

    def levels(paths):
        return [FeatureLevel(f"level{i}", read_tensor(os.path.join(base, p))) for i, p in enumerate(paths)]

    try:
        pair = AnnotatedPair(d["src_kps"], d["trg_kps"], d["src_size"], d["trg_size"], d.get("trg_bbox"))
    except (ValueError, TypeError) as e:
        raise FormatError(f"{path}: {e}") from None
    return Sample(levels(d["src_features"]), levels(d["trg_features"]), pair)


def write_manifest(path, src_paths, trg_paths, pair):
    d = {
        "src_features": list(src_paths),
        "trg_features": list(trg_paths),
        "src_size": list(pair.src_size),
        "trg_size": list(pair.trg_size),
        "src_kps": pair.src_kps.tolist(),
        "trg_kps": pair.trg_kps.tolist(),
    }
    if pair.trg_bbox is not None:
        d["trg_bbox"] = list(pair.trg_bbox)
    with open(path, "w") as f:
        json.dump(d, f, indent=1)


def save_sample(directory, sample, name="pair"):
    """Write a Sample's features and manifest under ``directory``; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    src_paths, trg_paths = [], []
    for l, (s, t) in enumerate(zip(sample.src_levels, sample.trg_levels)):
        src_paths.append(f"{name}_src{l}.cht")
        trg_paths.append(f"{name}_trg{l}.cht")
        write_tensor(os.path.join(directory, src_paths[-1]), s.tensor)
        write_tensor(os.path.join(directory, trg_paths[-1]), t.tensor)
    path = os.path.join(directory, f"{name}.json")
    write_manifest(path, src_paths, trg_paths, sample.pair)
    return path


def save_checkpoint(directory, params, cfg, step):
    """One tensor file per parameter plus ``manifest.json``."""
    os.makedirs(directory, exist_ok=True)
    files = {}
    for name, value in params.items():
        fname = name.replace(".", "_") + ".cht"
        write_tensor(os.path.join(directory, fname), np.atleast_1d(value))
        files[name] = {"file": fname, "shape": list(np.shape(value))}
    manifest = {
        "scheme": cfg.scheme,
        "kernel_6d": list(cfg.kernel_6d),
        "kernel_4d": list(cfg.kernel_4d),
        "seed": cfg.seed,
        "step": step,
        "params": files,
    }
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_checkpoint(directory):
    """Returns ``(params, manifest)``."""
    with open(os.path.join(directory, "manifest.json")) as f:
        manifest = json.load(f)
    params = {}
    for name, entry in manifest["params"].items():
        params[name] = read_tensor(os.path.join(directory, entry["file"])).reshape(entry["shape"])
    return params, manifest
