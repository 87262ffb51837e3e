"""Byte-reproducible archive of named arrays.

The container is an uncompressed zip holding one ``.npy`` member per array
plus ``meta.json``, so ``numpy.load`` can open it too.  Member timestamps are
pinned and members are written in sorted order, which makes
``save -> load -> save`` byte-identical.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
import zipfile

import numpy as np
import torch

from .errors import CheckpointError

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def atomic_write_bytes(path, data: bytes):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _to_numpy(a):
    if torch.is_tensor(a):
        return a.detach().cpu().numpy()
    return np.asarray(a)


def dumps(arrays: dict, meta: dict) -> bytes:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            member = io.BytesIO()
            np.lib.format.write_array(member, np.require(_to_numpy(arrays[name]), requirements="C"), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=_EPOCH), member.getvalue())
        meta = dict(meta, format_version=FORMAT_VERSION)
        zf.writestr(zipfile.ZipInfo("meta.json", date_time=_EPOCH), json.dumps(meta, sort_keys=True, indent=1))
    return buf.getvalue()


def save(path, arrays: dict, meta: dict):
    atomic_write_bytes(path, dumps(arrays, meta))


def load(path):
    """Read an archive; returns ``(arrays, meta)`` or raises ``CheckpointError``."""
    try:
        with zipfile.ZipFile(path) as zf:
            bad = zf.testzip()
            if bad is not None:
                raise CheckpointError(f"{path}: corrupted member {bad}")
            meta = json.loads(zf.read("meta.json"))
            arrays = {}
            for name in zf.namelist():
                if name.endswith(".npy"):
                    arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    except CheckpointError:
        raise
    except (OSError, KeyError, ValueError, zipfile.BadZipFile, EOFError) as exc:
        raise CheckpointError(f"cannot read archive {path}: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')}")
    return arrays, meta


def save_parameters(path, module: torch.nn.Module, config: dict, extra_meta: dict | None = None):
    meta = {"kind": "parameters", "config_hash": config_hash(config), "config": config}
    meta.update(extra_meta or {})
    save(path, dict(module.state_dict()), meta)


def load_parameters(path, module: torch.nn.Module, config: dict):
    arrays, meta = load(path)
    if meta.get("config_hash") != config_hash(config):
        raise CheckpointError(f"{path}: config hash mismatch")
    state = {k: torch.from_numpy(v.copy()) for k, v in arrays.items()}
    try:
        module.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not fit the model ({exc})") from exc
    return meta
