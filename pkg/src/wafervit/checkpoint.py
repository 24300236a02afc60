"""Bit-exact checkpoint files.

Layout::

    b"WVCK0001"
    u32 little-endian header length
    header: UTF-8 JSON {"config", "tensors": [{"name", "shape", "offset"}], "optimizer", "extra"}
    payload: little-endian float32 tensors in directory order

``offset`` is relative to the first payload byte.  The header is written
with sorted keys and no optional whitespace so identical models always
serialize to identical bytes.
"""

from collections import OrderedDict
import json
import struct
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import FormatError
from .tensor import Tensor
from .vit import VitConfig, VitModel, param_shapes

MAGIC = b"WVCK0001"
_LEN = struct.Struct("<I")
_F32 = np.dtype("<f4")


def to_bytes(model: VitModel, optimizer: Optional[dict] = None, extra: Optional[dict] = None) -> bytes:
    """Serialize model parameters plus optional optimizer state.

    ``optimizer`` is ``{"step": int, "m": {name: array}, "v": {name: array}, ...}``;
    moment tensors are stored as ``adam.m.<name>`` / ``adam.v.<name>``.
    """
    arrays = OrderedDict((name, p.data) for name, p in model.params.items())
    opt_meta = None
    if optimizer is not None:
        opt_meta = {k: v for k, v in optimizer.items() if k not in ("m", "v")}
        for slot in ("m", "v"):
            for name, arr in optimizer.get(slot, {}).items():
                arrays[f"adam.{slot}.{name}"] = arr
    directory, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        buf = np.ascontiguousarray(arr, dtype=_F32).tobytes()
        directory.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    header = {"config": model.config.to_dict(), "tensors": directory,
              "optimizer": opt_meta, "extra": extra or {}}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _LEN.pack(len(hbytes)) + hbytes + b"".join(chunks)


def from_bytes(buf: bytes, dtype=None) -> Tuple[VitModel, Optional[dict], dict]:
    if buf[:8] != MAGIC:
        raise FormatError(f"bad checkpoint magic {bytes(buf[:8])!r}, expected {MAGIC!r}")
    if len(buf) < 12:
        raise FormatError("checkpoint truncated inside header length")
    (hlen,) = _LEN.unpack_from(buf, 8)
    start = 12 + hlen
    if len(buf) < start:
        raise FormatError("checkpoint truncated inside JSON header")
    try:
        header = json.loads(buf[12:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint header is not valid JSON: {exc}") from None
    config = VitConfig.from_dict(header["config"])
    arrays: Dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        lo = start + entry["offset"]
        hi = lo + 4 * n
        if hi > len(buf):
            raise FormatError(f"tensor {entry['name']} runs past end of file")
        arrays[entry["name"]] = np.frombuffer(buf, dtype=_F32, count=n, offset=lo).reshape(shape)
    params = OrderedDict()
    for name in param_shapes(config):
        if name not in arrays:
            raise FormatError(f"checkpoint lacks tensor {name}")
        params[name] = Tensor(arrays[name], dtype=dtype)
    model = VitModel(config, params)
    optimizer = header.get("optimizer")
    if optimizer is not None:
        optimizer = dict(optimizer)
        for slot in ("m", "v"):
            prefix = f"adam.{slot}."
            optimizer[slot] = {k[len(prefix):]: np.array(a, dtype=dtype or np.float32)
                               for k, a in arrays.items() if k.startswith(prefix)}
    return model, optimizer, header.get("extra") or {}


def save(path, model: VitModel, optimizer: Optional[dict] = None, extra: Optional[dict] = None) -> bytes:
    buf = to_bytes(model, optimizer, extra)
    with open(path, "wb") as fh:
        fh.write(buf)
    return buf


def load(path, dtype=None) -> Tuple[VitModel, Optional[dict], dict]:
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), dtype=dtype)
