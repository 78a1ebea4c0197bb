"""Binary persistence for model weights and tracking history.

File layout, all integers little-endian:

* magic ``RSTK`` (4 bytes)
* format version, u32
* training step counter, u64
* config echo: u32 byte length + UTF-8 text
* tensor count, u32
* per tensor, sorted by name: u16 name length, UTF-8 name, u8 ndim,
  ndim u32 dims, then the float32 payload in C order

Sorting plus fixed-width fields make save -> load -> save byte-identical.
"""

import io
import struct

import numpy as np

from .errors import ConfigurationError
from .reasoning import HistoryBuffer
from .state_codec import VALID_SOURCES, StateTokenPair

MAGIC = b"RSTK"
VERSION = 1


def _write_tensor(fh, name, arr):
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ConfigurationError(f"tensor name too long: {name[:40]}...")
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(arr.astype("<f4", copy=False).tobytes(order="C"))


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise ConfigurationError("truncated checkpoint")
    return buf


def _read_tensor(fh):
    (nlen,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, nlen).decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(ndim))
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(shape)
    return name, data.astype(np.float32)


def save_checkpoint(path, tensors, step=0, config_text=""):
    """Write a named float32 tensor table plus step counter and config echo."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<Q", int(step)))
    cfg = config_text.encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        _write_tensor(buf, name, tensors[name])
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Returns (tensors dict, step, config_text). Strict about the container."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ConfigurationError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {version}")
        (step,) = struct.unpack("<Q", _read_exact(fh, 8))
        (clen,) = struct.unpack("<I", _read_exact(fh, 4))
        config_text = _read_exact(fh, clen).decode("utf-8")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors = {}
        for _ in range(count):
            name, arr = _read_tensor(fh)
            if name in tensors:
                raise ConfigurationError(f"duplicate tensor name {name!r}")
            tensors[name] = arr
        if fh.read(1):
            raise ConfigurationError("trailing bytes after tensor table")
    return tensors, step, config_text


def save_model(path, model, step=0, config_text=""):
    save_checkpoint(path, model.state_dict(), step=step, config_text=config_text)


def load_model(path, model):
    """Load weights into a model; name or shape mismatches raise."""
    tensors, step, config_text = load_checkpoint(path)
    model.load_state_dict(tensors)
    return step, config_text


def save_history(path, buffer):
    """Persist a HistoryBuffer so a tracking session can resume."""
    tensors = {}
    for i, pair in enumerate(buffer.entries()):
        key = f"entry.{i:06d}"
        tensors[f"{key}.spatial"] = pair.spatial
        tensors[f"{key}.channel"] = pair.channel
        tensors[f"{key}.meta"] = np.array(
            [pair.frame_index, VALID_SOURCES.index(pair.source)], dtype=np.float32
        )
    save_checkpoint(path, tensors, step=len(buffer), config_text=f"window={buffer.window}")


def load_history(path):
    tensors, count, config_text = load_checkpoint(path)
    try:
        window = int(config_text.split("=", 1)[1])
    except (IndexError, ValueError):
        raise ConfigurationError(f"history config echo unreadable: {config_text!r}")
    buffer = HistoryBuffer(window)
    for i in range(count):
        key = f"entry.{i:06d}"
        try:
            spatial = tensors[f"{key}.spatial"]
            channel = tensors[f"{key}.channel"]
            meta = tensors[f"{key}.meta"]
        except KeyError as exc:
            raise ConfigurationError(f"history missing tensor {exc.args[0]!r}")
        buffer.push(
            StateTokenPair(
                spatial=spatial,
                channel=channel,
                frame_index=int(meta[0]),
                source=VALID_SOURCES[int(meta[1])],
            )
        )
    return buffer
