"""Flat binary parameter files.

Layout: one UTF-8 JSON header line (model kind, config echo, tensor names and
shapes, total count) followed by the tensors as contiguous little-endian
float64 values in header order.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = "weakftm.params"


class ParamFileError(ValueError):
    pass


def save_params(path, kind: str, config: dict, params: Mapping[str, np.ndarray]) -> None:
    names = list(params)
    header = {
        "magic": MAGIC,
        "kind": kind,
        "config": config,
        "tensors": [[n, list(params[n].shape)] for n in names],
        "param_count": int(sum(params[n].size for n in names)),
    }
    with Path(path).open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())


def load_params(path, kind: str | None = None) -> tuple[dict, dict, dict[str, np.ndarray]]:
    """Returns ``(header, config, params)``."""
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise ParamFileError(f"{path}: missing header line")
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParamFileError(f"{path}: bad header ({exc})") from None
    if header.get("magic") != MAGIC:
        raise ParamFileError(f"{path}: not a parameter file")
    if kind is not None and header.get("kind") != kind:
        raise ParamFileError(f"{path}: holds a {header.get('kind')!r} model, expected {kind!r}")
    body = np.frombuffer(data[nl + 1 :], dtype="<f8")
    if body.size != header["param_count"]:
        raise ParamFileError(f"{path}: expected {header['param_count']} values, found {body.size}")
    params, pos = {}, 0
    for name, shape in header["tensors"]:
        n = int(np.prod(shape, dtype=np.int64))
        params[name] = body[pos : pos + n].reshape(shape).astype(float)
        pos += n
    if pos != body.size:
        raise ParamFileError(f"{path}: tensor shapes do not add up to the parameter count")
    return header, header["config"], params
