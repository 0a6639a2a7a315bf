"""Float array <-> JSON helpers.  Numbers are written as 17-significant-digit
strings so a decode/encode cycle is bit-exact."""

from __future__ import annotations

import numpy as np


def enc_float(x: float) -> str:
    return format(float(x), ".17g")


def dec_float(s) -> float:
    return float(s)


def enc_array(a) -> dict:
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": [enc_float(v) for v in a.ravel()]}


def dec_array(d: dict) -> np.ndarray:
    return np.array([float(v) for v in d["data"]], dtype=float).reshape(d["shape"])
