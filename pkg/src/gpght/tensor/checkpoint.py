"""Bit-exact parameter checkpoints (``.npz`` with a JSON header)."""
from __future__ import annotations

import json
import zipfile

import numpy as np

from .optim import ParameterStore

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_store(path, store: ParameterStore, header: dict | None = None) -> None:
    arrays = {}
    for name, t in store.params.items():
        arrays[f"param/{name}"] = t.data
        arrays[f"adam_m/{name}"] = store.m[name]
        arrays[f"adam_v/{name}"] = store.v[name]
    meta = {"version": FORMAT_VERSION, "adam_step": store.step, "names": list(store.params),
            "header": header or {}}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    # a fixed member timestamp keeps identical checkpoints byte-identical (np.savez stamps "now")
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for key, value in arrays.items():
            info = zipfile.ZipInfo(key + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asarray(value), allow_pickle=False)


def read_header(path) -> dict:
    return _load(path)[0]["header"]


def _load(path):
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(z["__meta__"].tobytes().decode())
            arrays = {k: z[k] for k in z.files if k != "__meta__"}
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if meta.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('version')} != {FORMAT_VERSION}")
    return meta, arrays


def load_store(path, store: ParameterStore) -> dict:
    """Load values and Adam state into ``store`` in place; returns the header.

    Parameter names and shapes must match exactly.
    """
    meta, arrays = _load(path)
    if meta["names"] != list(store.params):
        raise CheckpointError("checkpoint parameter names do not match the model")
    for name, t in store.params.items():
        value = arrays[f"param/{name}"]
        if value.shape != t.shape:
            raise CheckpointError(f"shape mismatch for {name}: {value.shape} vs {t.shape}")
        t.data = np.array(value, dtype=np.float64)
        store.m[name] = np.array(arrays[f"adam_m/{name}"], dtype=np.float64)
        store.v[name] = np.array(arrays[f"adam_v/{name}"], dtype=np.float64)
        t.grad = None
    store.step = int(meta["adam_step"])
    return meta["header"]
