"""Binary checkpoint container.

Layout (little-endian)::

    b"LFV1"  u32 version  u32 n_arrays
    n_arrays x (u32 name_len, utf-8 name, u32 rank, rank x u64 extent, f64 payload)
    u64 state_len, utf-8 JSON state (sorted keys)

The JSON state carries the config, optimizer step count, lexico state and
the numpy bit-generator state.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"LFV1"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    arrays: dict = field(default_factory=dict)
    state: dict = field(default_factory=dict)

    def to_bytes(self):
        parts = [MAGIC, struct.pack("<II", VERSION, len(self.arrays))]
        for name in sorted(self.arrays):
            arr = np.asarray(self.arrays[name], dtype="<f8")
            raw = name.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<I", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            parts.append(arr.tobytes())
        blob = json.dumps(self.state, sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts.append(struct.pack("<Q", len(blob)))
        parts.append(blob)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data):
        if data[:4] != MAGIC:
            raise CheckpointError("bad magic; not a checkpoint file")
        version, n = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 12
        arrays = {}
        try:
            for _ in range(n):
                (ln,) = struct.unpack_from("<I", data, off)
                off += 4
                name = data[off:off + ln].decode("utf-8")
                off += ln
                (rank,) = struct.unpack_from("<I", data, off)
                off += 4
                shape = struct.unpack_from(f"<{rank}Q", data, off)
                off += 8 * rank
                count = int(np.prod(shape)) if rank else 1
                arr = np.frombuffer(data, dtype="<f8", count=count, offset=off)
                arrays[name] = arr.reshape(shape).astype(np.float64)
                off += 8 * count
            (ln,) = struct.unpack_from("<Q", data, off)
            off += 8
            state = json.loads(data[off:off + ln].decode("utf-8"))
        except (struct.error, ValueError) as e:
            raise CheckpointError(f"truncated or corrupt checkpoint: {e}") from e
        return cls(arrays, state)

    def save(self, path):
        """Atomic write: temp file in the same directory, then rename."""
        path = os.fspath(path)
        d = os.path.dirname(os.path.abspath(path))
        fd, tmp = tempfile.mkstemp(dir=d, prefix=".ckpt-")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(self.to_bytes())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())
