"""Base-64 array convention shared by dataset records and latent dumps.

An array is stored as ``{"dtype": "<f4", "shape": [...], "b64": "..."}`` with
raw little-endian bytes in C order.
"""

from __future__ import annotations

import base64

import numpy as np


def encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a)
    if a.dtype.kind == "f":
        dt = np.dtype("<f8") if a.dtype.itemsize == 8 else np.dtype("<f4")
    elif a.dtype.kind in "iu":
        dt = np.dtype("<i8")
    elif a.dtype.kind == "b":
        dt = np.dtype("|u1")
    else:
        raise TypeError(f"unsupported dtype {a.dtype}")
    raw = np.ascontiguousarray(a, dtype=dt).tobytes()
    return {"dtype": dt.str, "shape": list(a.shape), "b64": base64.b64encode(raw).decode("ascii")}


def decode_array(obj: dict) -> np.ndarray:
    dt = np.dtype(obj["dtype"])
    raw = base64.b64decode(obj["b64"], validate=True)
    shape = tuple(int(s) for s in obj["shape"])
    a = np.frombuffer(raw, dtype=dt)
    if a.size != int(np.prod(shape)):
        raise ValueError(f"array payload has {a.size} items, shape {shape} needs {int(np.prod(shape))}")
    return a.reshape(shape).astype(dt.newbyteorder("="), copy=True)
