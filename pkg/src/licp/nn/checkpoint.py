"""Single-file weight checkpoints: JSON manifest line + float32 blobs."""
from __future__ import annotations

import json

import numpy as np

FORMAT = "licp-ckpt-1"


def save_checkpoint(path, arrays: dict, meta: dict | None = None):
    entries = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    header = {"format": FORMAT, "meta": meta or {}, "entries": entries}
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for k, _ in ((e["name"], e) for e in entries):
            fh.write(np.asarray(arrays[k], dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns (arrays dict of float64 ndarrays, meta dict)."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != FORMAT:
            raise ValueError(f"{path}: not a licp checkpoint")
        arrays = {}
        for e in header["entries"]:
            shape = tuple(e["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(4 * n)
            if len(buf) != 4 * n:
                raise ValueError(f"{path}: truncated blob for {e['name']}")
            arr = np.frombuffer(buf, dtype="<f4").astype(float)
            arrays[e["name"]] = arr.reshape(shape) if shape else float(arr[0])
    return arrays, header["meta"]
