"""Grid conventions and the ``.cmt`` tensor file format.

Array layouts used across the package:

* frames: ``(H, W, 3)`` float, values in [0, 1]
* label maps: ``(H, W)`` uint8, ``IGNORE`` (255) for unlabeled pixels
* flow fields: ``(H, W, 2)`` float, components ``(dx, dy)``
* feature / score maps: ``(D, H, W)`` float (channel first)

Flow is always backward: ``flow[y, x] = (dx, dy)`` means pixel ``(x, y)`` of
frame ``t`` corresponds to pixel ``(x - dx, y - dy)`` of frame ``t - 1``.
"""
from __future__ import annotations

import os
import struct

import numpy as np

IGNORE = 255

MAGIC = b"CMT1"
DTYPE_U8 = 0
DTYPE_F32 = 1

_DTYPES = {DTYPE_U8: np.dtype("u1"), DTYPE_F32: np.dtype("<f4")}


class TensorFormatError(ValueError):
    """Raised for malformed ``.cmt`` files or inconsistent payloads."""


def write_tensor(path, kind, dims, payload):
    """Write a tensor file.

    ``payload`` may be raw bytes or anything numpy can turn into an array of
    the requested dtype. Returns nothing; raises ``TensorFormatError`` when the
    payload length does not match ``dims``.
    """
    if kind not in _DTYPES:
        raise TensorFormatError(f"unknown dtype code {kind}")
    dims = [int(d) for d in dims]
    if not dims:
        raise TensorFormatError("dims must be nonempty")
    if len(dims) > 255 or any(d < 0 or d >= 2**32 for d in dims):
        raise TensorFormatError(f"unrepresentable dims {dims}")
    dtype = _DTYPES[kind]
    if isinstance(payload, (bytes, bytearray, memoryview)):
        raw = bytes(payload)
    else:
        raw = np.ascontiguousarray(np.asarray(payload).ravel(), dtype=dtype).tobytes()
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) != expected:
        raise TensorFormatError(
            f"payload has {len(raw)} bytes, dims {dims} need {expected}"
        )
    header = MAGIC + struct.pack("<BB", kind, len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(raw)


def read_tensor(path):
    """Read a tensor file written by :func:`write_tensor`.

    Returns ``(kind, dims, payload_bytes)``.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic")
    kind, ndim = struct.unpack_from("<BB", blob, 4)
    if kind not in _DTYPES:
        raise TensorFormatError(f"{path}: unknown dtype code {kind}")
    off = 6 + 4 * ndim
    if len(blob) < off:
        raise TensorFormatError(f"{path}: truncated header")
    dims = list(struct.unpack_from(f"<{ndim}I", blob, 6))
    need = int(np.prod(dims, dtype=np.int64)) * _DTYPES[kind].itemsize
    payload = blob[off:]
    if len(payload) < need:
        raise TensorFormatError(f"{path}: truncated payload ({len(payload)} < {need} bytes)")
    if len(payload) > need:
        raise TensorFormatError(f"{path}: trailing bytes after payload")
    return kind, dims, payload


def save_array(path, arr):
    """Store a numpy array, picking u8 for integer label data and f32 otherwise."""
    arr = np.asarray(arr)
    if arr.dtype == np.uint8:
        write_tensor(path, DTYPE_U8, arr.shape, arr)
    else:
        write_tensor(path, DTYPE_F32, arr.shape, arr.astype("<f4"))


def load_array(path):
    kind, dims, payload = read_tensor(path)
    return np.frombuffer(payload, dtype=_DTYPES[kind]).reshape(dims).copy()


def downsample_labels(labels, fheight, fwidth):
    """Block-majority downsampling of a label map.

    Ties go to the smallest class id; ``IGNORE`` only wins when it holds a
    strict majority of the block.
    """
    labels = np.asarray(labels)
    h, w = labels.shape
    if fheight <= 0 or fwidth <= 0 or h % fheight or w % fwidth:
        raise ValueError(f"cannot downsample {h}x{w} to {fheight}x{fwidth}: non-integer ratio")
    bh, bw = h // fheight, w // fwidth
    if bh == 1 and bw == 1:
        return labels.copy()
    blocks = labels.reshape(fheight, bh, fwidth, bw).transpose(0, 2, 1, 3).reshape(fheight, fwidth, bh * bw)
    size = bh * bw
    ignore_count = (blocks == IGNORE).sum(axis=-1)
    valid = np.where(blocks == IGNORE, 0, blocks.astype(np.int64) + 1)
    nbins = max(int(valid.max()) + 1, 2)
    flat = valid.reshape(-1, size)
    offsets = np.arange(flat.shape[0])[:, None] * nbins
    counts = np.bincount((flat + offsets).ravel(), minlength=flat.shape[0] * nbins)
    counts = counts.reshape(flat.shape[0], nbins)[:, 1:]
    # argmax returns the first maximum, i.e. the smallest class id on ties
    best = counts.argmax(axis=1).reshape(fheight, fwidth)
    out = best.astype(labels.dtype)
    out[2 * ignore_count > size] = IGNORE
    return out


def check_labels(labels, num_classes):
    """Raise ``ValueError`` if a label map holds ids outside ``[0, num_classes)``."""
    labels = np.asarray(labels)
    bad = (labels != IGNORE) & (labels >= num_classes)
    if bad.any():
        raise ValueError(f"label ids {np.unique(labels[bad]).tolist()} out of range for {num_classes} classes")
