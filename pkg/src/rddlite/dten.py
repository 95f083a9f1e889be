"""DTEN1 tensor files and checkpoint directories.

Layout: ``b"DTEN1"``, one u8 rank, ``rank`` little-endian u32 extents, then
the payload as little-endian float32 in row-major order.
"""
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DTEN1"


class DtenError(ValueError):
    pass


def encode(array):
    a = np.asarray(array)
    if a.ndim > 255:
        raise DtenError("rank exceeds 255")
    header = MAGIC + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode(buf):
    if buf[:5] != MAGIC:
        raise DtenError("bad magic, not a DTEN1 file")
    rank = buf[5]
    end = 6 + 4 * rank
    if len(buf) < end:
        raise DtenError("truncated header")
    shape = struct.unpack(f"<{rank}I", buf[6:end])
    n = int(np.prod(shape, dtype=np.int64))
    if len(buf) != end + 4 * n:
        raise DtenError(f"payload size mismatch for shape {shape}")
    return np.frombuffer(buf, dtype="<f4", count=n, offset=end).reshape(shape).astype(np.float64)


def write(path, array):
    Path(path).write_bytes(encode(array))


def read(path):
    return decode(Path(path).read_bytes())


def save_checkpoint(directory, params, extra=None):
    """Write ``params`` (name -> array) as DTEN1 files plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in sorted(params):
        fname = name.replace("/", "__") + ".dten"
        write(directory / fname, np.asarray(params[name]))
        files[name] = fname
    manifest = {"format": "DTEN1", "params": files}
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory / "manifest.json"


def load_checkpoint(directory):
    """Return ``(params, manifest)``; params are float64 arrays."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    params = {name: read(directory / fname) for name, fname in manifest["params"].items()}
    return params, manifest
