"""On-disk formats for tensors and model checkpoints.

Tensor file layout (shared repo-wide):

* 8-byte magic ``PGMMTNSR``
* 4-byte little-endian version (currently 1)
* 4-byte little-endian byte length of a UTF-8 metadata block, then the
  block itself: ``key: value`` lines carrying name, shape and dtype
* raw little-endian IEEE-754 values in row-major order

A model checkpoint is a directory of one tensor file per parameter plus a
``manifest.txt`` listing module names, shapes, and the config key-values.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"PGMMTNSR"
VERSION = 1
MANIFEST_NAME = "manifest.txt"

_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(IOError):
    """Malformed or mismatched checkpoint data."""


def save_tensor(path, array, name=""):
    """Write one array in the tensor file format."""
    arr = np.ascontiguousarray(array.data if isinstance(array, Tensor) else array)
    if arr.dtype.name not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {arr.dtype.name}")
    meta = (f"name: {name}\n"
            f"shape: {' '.join(str(d) for d in arr.shape)}\n"
            f"dtype: {arr.dtype.name}\n").encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        fh.write(arr.astype(_DTYPES[arr.dtype.name], copy=False).tobytes(order="C"))


def load_tensor(path):
    """Read a tensor file; returns (name, array)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read tensor file {path}: {e}") from e
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a tensor file (bad magic)")
    version, = struct.unpack_from("<I", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported tensor format version {version}")
    meta_len, = struct.unpack_from("<I", raw, 12)
    meta_end = 16 + meta_len
    if meta_end > len(raw):
        raise CheckpointError(f"{path}: truncated metadata block")
    meta = {}
    for line in raw[16:meta_end].decode("utf-8").splitlines():
        if ":" in line:
            k, v = line.split(":", 1)
            meta[k.strip()] = v.strip()
    try:
        shape = tuple(int(s) for s in meta["shape"].split()) if meta["shape"] else ()
        dtype = _DTYPES[meta["dtype"]]
    except KeyError as e:
        raise CheckpointError(f"{path}: metadata missing {e}") from e
    count = int(np.prod(shape)) if shape else 1
    try:
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=meta_end)
    except ValueError as e:
        raise CheckpointError(f"{path}: payload shorter than shape {shape}") from e
    return meta.get("name", ""), arr.reshape(shape).astype(meta["dtype"])


def _slug(name):
    return name.replace(".", "_") + ".tnsr"


def save_checkpoint(dirpath, named_params, config=None):
    """Write a directory checkpoint: one tensor file per parameter + manifest."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    lines = ["format: signflow-checkpoint", "version: 1", ""]
    if config:
        lines.append("[config]")
        for k in sorted(config):
            lines.append(f"{k} = {config[k]}")
        lines.append("")
    lines.append("[tensors]")
    for name in sorted(named_params):
        arr = named_params[name]
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        save_tensor(dirpath / _slug(name), arr, name=name)
        shape = " ".join(str(d) for d in arr.shape)
        lines.append(f"{name} = {_slug(name)} [{shape}]")
    (dirpath / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(dirpath):
    """Read a directory checkpoint; returns (named arrays, config dict)."""
    dirpath = Path(dirpath)
    manifest = dirpath / MANIFEST_NAME
    if not manifest.is_file():
        raise CheckpointError(f"missing manifest: {manifest}")
    config, tensors = {}, {}
    section = None
    for line in manifest.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("["):
            section = line.strip("[]")
            continue
        if line.startswith("format:"):
            continue
        if line.startswith("version:"):
            if line.split(":", 1)[1].strip() != "1":
                raise CheckpointError(f"{manifest}: unsupported checkpoint version")
            continue
        if section == "config" and "=" in line:
            k, v = line.split("=", 1)
            config[k.strip()] = v.strip()
        elif section == "tensors" and "=" in line:
            name, rest = line.split("=", 1)
            fname = rest.strip().split(" ")[0]
            fpath = dirpath / fname
            if not fpath.is_file():
                raise CheckpointError(f"manifest references missing tensor file {fpath}")
            stored_name, arr = load_tensor(fpath)
            tensors[name.strip()] = arr
    return tensors, config


def restore_module(module, tensors, prefix=""):
    """Copy checkpoint arrays into a Module's parameters, shape-checked."""
    params = module.named_parameters()
    for name, p in params.items():
        key = prefix + name
        if key not in tensors:
            raise CheckpointError(f"checkpoint missing tensor {key}")
        arr = tensors[key]
        if tuple(arr.shape) != tuple(p.shape):
            raise CheckpointError(
                f"checkpoint tensor {key} has shape {tuple(arr.shape)}, "
                f"model expects {tuple(p.shape)}")
        p.data = arr.astype(p.data.dtype, copy=True)
