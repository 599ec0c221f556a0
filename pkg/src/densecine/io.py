"""Tensor directories: ``meta.json`` plus one raw little-endian float32 file per tensor."""

import json
import os

import numpy as np

META_NAME = "meta.json"


def write_tensor_dir(path, tensors, meta=None):
    """Write ``tensors`` (name -> array) into ``path``.

    Every array is stored row-major as little-endian float32 in ``<name>.bin``.
    Shapes and the original dtypes are recorded in ``meta.json`` next to any
    extra ``meta`` fields.
    """
    os.makedirs(path, exist_ok=True)
    entries = {}
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        fname = name + ".bin"
        np.ascontiguousarray(arr, dtype="<f4").tofile(os.path.join(path, fname))
        entries[name] = {"file": fname, "shape": list(arr.shape), "dtype": "float32",
                         "source_dtype": str(arr.dtype)}
    doc = dict(meta or {})
    doc["tensors"] = entries
    with open(os.path.join(path, META_NAME), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_meta(path):
    with open(os.path.join(path, META_NAME)) as fh:
        return json.load(fh)


def read_tensor_dir(path):
    """Inverse of :func:`write_tensor_dir`; returns ``(tensors, meta)``."""
    meta = read_meta(path)
    tensors = {}
    for name, entry in meta["tensors"].items():
        fpath = os.path.join(path, entry["file"])
        arr = np.fromfile(fpath, dtype="<f4")
        shape = tuple(entry["shape"])
        if arr.size != int(np.prod(shape)):
            raise ValueError(f"{fpath}: expected {int(np.prod(shape))} values, found {arr.size}")
        tensors[name] = arr.reshape(shape)
    return tensors, meta
