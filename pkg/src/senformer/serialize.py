"""Binary tensor containers, single-file checkpoints, and dataset files.

TensorContainer layout (little-endian):

    magic   4 bytes  b"SENF"
    version u32      1
    dtype   u8       0 = float32, 1 = uint8, 2 = int32
    ndim    u8
    extents ndim x u32
    payload row-major element bytes

A pack file (checkpoint or dataset) is

    magic    8 bytes  b"SENFPACK"
    mlen     u32      manifest length in bytes
    manifest JSON     {"format", "version", "meta", "tensors": {name: {offset, length}}}
    blobs             concatenated TensorContainers; offsets relative to blob start

Writes go to a temporary file and are renamed into place, so a failed write
never corrupts an existing checkpoint.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"SENF"
PACK_MAGIC = b"SENFPACK"
CONTAINER_VERSION = 1
PACK_VERSION = 1

_DTYPE_TO_CODE = {"float32": 0, "uint8": 1, "int32": 2}
_CODE_TO_DTYPE = {0: "<f4", 1: "u1", 2: "<i4"}


class ContainerError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


def encode_tensor(arr: np.ndarray) -> bytes:
    name = arr.dtype.name
    if name == "float64":
        raise TypeError("float64 tensors are not serializable; checkpoints are float32")
    if name not in _DTYPE_TO_CODE:
        raise TypeError(f"unsupported dtype {name}; expected float32, uint8 or int32")
    code = _DTYPE_TO_CODE[name]
    le = arr.astype(_CODE_TO_DTYPE[code], copy=False)
    header = MAGIC + struct.pack("<I", CONTAINER_VERSION) + struct.pack("<BB", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(le).tobytes()


def decode_tensor(buf: bytes, offset: int = 0):
    """Returns (array, end_offset); header is validated before the payload
    size is even computed, so corrupted magics are rejected immediately."""
    base = offset
    if len(buf) - offset < 10:
        raise ContainerError("truncated container header", base)
    if buf[offset : offset + 4] != MAGIC:
        raise ContainerError(f"bad magic {buf[offset:offset + 4]!r}, expected {MAGIC!r}", base)
    offset += 4
    (version,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if version != CONTAINER_VERSION:
        raise ContainerError(f"unsupported container version {version}", base)
    code, ndim = struct.unpack_from("<BB", buf, offset)
    offset += 2
    if code not in _CODE_TO_DTYPE:
        raise ContainerError(f"unknown dtype code {code}", base)
    if len(buf) - offset < 4 * ndim:
        raise ContainerError("truncated extents", base)
    shape = struct.unpack_from(f"<{ndim}I", buf, offset)
    offset += 4 * ndim
    dt = np.dtype(_CODE_TO_DTYPE[code])
    n = 1
    for s in shape:
        n *= s
    nbytes = n * dt.itemsize
    if len(buf) - offset < nbytes:
        raise ContainerError(f"payload truncated: need {nbytes} bytes, have {len(buf) - offset}", base)
    arr = np.frombuffer(buf, dtype=dt, count=n, offset=offset).reshape(shape)
    # frombuffer views are read-only; hand back an owned, writable array
    return arr.astype(arr.dtype.newbyteorder("=")), offset + nbytes


def write_tensors(path: str, tensors: dict, meta: dict | None = None, kind: str = "pack"):
    """Write named arrays plus a JSON manifest atomically."""
    blobs = []
    entries = {}
    pos = 0
    for name, arr in tensors.items():
        blob = encode_tensor(np.asarray(arr))
        entries[name] = {"offset": pos, "length": len(blob)}
        blobs.append(blob)
        pos += len(blob)
    manifest = {
        "format": f"senformer-{kind}",
        "version": PACK_VERSION,
        "meta": meta or {},
        "tensors": entries,
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(PACK_MAGIC)
        fh.write(struct.pack("<I", len(mbytes)))
        fh.write(mbytes)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_tensors(path: str):
    """Returns (manifest dict, {name: array})."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 12 or buf[:8] != PACK_MAGIC:
        raise ContainerError(f"not a senformer pack file (magic {buf[:8]!r})", 0)
    (mlen,) = struct.unpack_from("<I", buf, 8)
    if len(buf) < 12 + mlen:
        raise ContainerError("truncated manifest", 8)
    manifest = json.loads(buf[12 : 12 + mlen].decode("utf-8"))
    blob_base = 12 + mlen
    arrays = {}
    for name, entry in manifest["tensors"].items():
        arr, _ = decode_tensor(buf, blob_base + entry["offset"])
        arrays[name] = arr
    return manifest, arrays


# -- checkpoints -----------------------------------------------------------------


def _model_arrays(model, optimizer=None, iteration: int = 0) -> dict:
    arrays = {}
    for name, p in model.named_parameters():
        arrays[f"param/{name}"] = p.data
    for name, buf in model.named_buffers():
        arrays[f"buffer/{name}"] = buf
    if optimizer is not None:
        for key, arr in optimizer.state_arrays().items():
            arrays[f"opt/{key}"] = arr
    arrays["meta/iteration"] = np.array([iteration], dtype=np.int32)
    return arrays


def save_checkpoint(path: str, model, optimizer=None, iteration: int = 0, config=None):
    from .config import config_to_dict

    meta = {"iteration": iteration}
    if config is not None:
        meta["config"] = config_to_dict(config)
    write_tensors(path, _model_arrays(model, optimizer, iteration), meta=meta, kind="checkpoint")


def load_into(path: str, model, optimizer=None) -> int:
    """Restore parameters, buffers, and optimizer state; returns the iteration."""
    manifest, arrays = read_tensors(path)
    for name, p in model.named_parameters():
        key = f"param/{name}"
        if key not in arrays:
            raise KeyError(f"checkpoint missing parameter {name!r}")
        if tuple(arrays[key].shape) != tuple(p.shape):
            raise ValueError(f"parameter {name!r}: checkpoint shape {arrays[key].shape} vs model {p.shape}")
        p.data = arrays[key].astype(p.data.dtype.name).copy()
    for name, buf in model.named_buffers():
        key = f"buffer/{name}"
        if key not in arrays:
            raise KeyError(f"checkpoint missing buffer {name!r}")
        buf[...] = arrays[key]
    if optimizer is not None:
        opt_arrays = {k[len("opt/"):]: v for k, v in arrays.items() if k.startswith("opt/")}
        if opt_arrays:
            optimizer.load_state_arrays(opt_arrays)
    return int(arrays["meta/iteration"][0])


def load_checkpoint_model(path: str):
    """Rebuild the model recorded in a checkpoint; returns (model, config, iteration)."""
    from .config import config_from_dict
    from .learner import build_ensemble_model

    manifest, _ = read_tensors(path)
    meta = manifest.get("meta", {})
    if "config" not in meta:
        raise ValueError(f"checkpoint {path} carries no config; cannot rebuild the model")
    cfg = config_from_dict(meta["config"])
    model = build_ensemble_model(cfg.model, seed=cfg.train.seed)
    iteration = load_into(path, model)
    return model, cfg, iteration


# -- datasets --------------------------------------------------------------------


def save_dataset(path: str, samples, n_classes: int):
    from .data import SegmentationSample  # noqa: F401  (type of the elements)

    if not samples:
        raise ValueError("refusing to write an empty dataset")
    images = np.stack([s.image for s in samples]).astype(np.float32)
    labels = np.stack([s.labels for s in samples]).astype(np.uint8)
    meta = {"count": len(samples), "n_classes": n_classes}
    write_tensors(path, {"images": images, "labels": labels}, meta=meta, kind="dataset")


def load_dataset(path: str):
    from .data import SegmentationSample

    manifest, arrays = read_tensors(path)
    images = arrays["images"]
    labels = arrays["labels"]
    return [SegmentationSample(image=images[i], labels=labels[i]) for i in range(images.shape[0])]
