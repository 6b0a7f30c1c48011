"""Parameter checkpoints.

A checkpoint is an uncompressed ``.npz`` archive. Each parameter is stored
as an array under its own name; the reserved entry ``__manifest__`` holds a
UTF-8 JSON document::

    {"format": "fewmatch-params", "version": 1,
     "matcher": {...Matcher.to_dict()...},
     "tensors": [{"name": ..., "shape": [...], "dtype": "float64"}, ...],
     "meta": {...free-form provenance...}}

Tensor order in ``tensors`` is the parameter order of the model.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .models import Matcher, Params

FORMAT = "fewmatch-params"
VERSION = 1
MANIFEST = "__manifest__"


class CheckpointError(ValueError):
    pass


def save_params(path, params: Params, matcher: Matcher, meta: dict | None = None) -> None:
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "matcher": matcher.to_dict(),
        "tensors": [{"name": k, "shape": list(v.shape), "dtype": str(v.dtype).removeprefix("torch.")}
                    for k, v in params.items()],
        "meta": meta or {},
    }
    # fixed timestamps keep identical parameters byte-identical on disk
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        def put(name, data):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, data)
        put(MANIFEST + ".npy", _npy(np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)))
        for k, v in params.items():
            put(k + ".npy", _npy(v.detach().cpu().numpy()))


def _npy(arr) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr)
    return buf.getvalue()


def load_params(path, matcher: Matcher | None = None) -> tuple[Params, Matcher, dict]:
    """Read a checkpoint; if ``matcher`` is given it must match the stored architecture."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        z = np.load(path, allow_pickle=False)
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    if not hasattr(z, "files"):
        raise CheckpointError(f"{path}: not an npz archive")
    with z:
        if MANIFEST not in z.files:
            raise CheckpointError(f"{path}: missing manifest")
        manifest = json.loads(z[MANIFEST].tobytes().decode())
        if manifest.get("format") != FORMAT:
            raise CheckpointError(f"{path}: not a {FORMAT} file")
        stored = Matcher.from_dict(manifest["matcher"])
        if matcher is not None and matcher != stored:
            raise CheckpointError(f"architecture mismatch: checkpoint has {stored}, expected {matcher}")
        params = {}
        for entry in manifest["tensors"]:
            arr = z[entry["name"]]
            if list(arr.shape) != entry["shape"] or str(arr.dtype) != entry["dtype"]:
                raise CheckpointError(f"{path}: tensor {entry['name']} disagrees with manifest")
            params[entry["name"]] = torch.from_numpy(arr.copy())
    return params, stored, manifest.get("meta", {})
