"""Tensor archive: a zip of named little-endian float32 ``.npy`` members plus
one JSON metadata record.

Zip member timestamps are pinned so that equal contents give equal bytes;
``numpy.load`` can read the tensors directly.
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

META_NAME = "meta.json"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save_archive(path: str | Path, tensors: Mapping[str, Any], meta: Mapping[str, Any]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f4"))
            buf = io.BytesIO()
            np.lib.format.write_array(buf, arr, allow_pickle=False)
            zf.writestr(_member(f"{name}.npy"), buf.getvalue())
        text = json.dumps(meta, sort_keys=True, indent=2) + "\n"
        zf.writestr(_member(META_NAME), text.encode("utf-8"))


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, Any] = {}
    with zipfile.ZipFile(path, "r") as zf:
        for name in zf.namelist():
            data = zf.read(name)
            if name == META_NAME:
                meta = json.loads(data.decode("utf-8"))
            elif name.endswith(".npy"):
                tensors[name[: -len(".npy")]] = np.lib.format.read_array(io.BytesIO(data), allow_pickle=False)
    return tensors, meta
