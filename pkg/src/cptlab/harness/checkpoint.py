"""Binary checkpoints.

Layout (all integers little-endian)::

    magic        8 bytes   b"CPTCKPT\\0"
    version      u32       1
    epoch        u32       next epoch to run
    config_hash  32 bytes  sha256 of the canonical config JSON
    n_tensors    u32
    shape table  n_tensors x { name_len u16, name utf-8, dtype u8 (1=f32, 2=f64),
                               ndim u8, dims u32[ndim] }
    payload      raw little-endian values of each tensor, table order
    rng          state u128, inc u128, has_uint32 u8, uinteger u32   (PCG64)
    extras_len   u32
    extras       utf-8 JSON (metrics so far, cost ledger)

Tensors are named ``param/<layer>.<name>`` and ``velocity/<layer>.<name>``.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CPTCKPT\x00"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    epoch: int
    config_hash: str
    tensors: dict  # name -> ndarray, insertion ordered
    rng_state: dict
    extras: dict = field(default_factory=dict)


def _u128(v):
    return int(v).to_bytes(16, "little")


def save_checkpoint(path, ckpt: Checkpoint):
    parts = [MAGIC, struct.pack("<II", VERSION, ckpt.epoch), bytes.fromhex(ckpt.config_hash)]
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<BB{arr.ndim}I", code, arr.ndim, *arr.shape))
    for arr in ckpt.tensors.values():
        parts.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    st = ckpt.rng_state
    if st.get("bit_generator") != "PCG64":
        raise CheckpointError("only PCG64 generator state can be stored")
    parts.append(_u128(st["state"]["state"]) + _u128(st["state"]["inc"]))
    parts.append(struct.pack("<BI", int(st["has_uint32"]), int(st["uinteger"])))
    extras = json.dumps(ckpt.extras, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(extras)) + extras)
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(8) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, epoch = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    chash = r.take(32).hex()
    (n,) = r.unpack("<I")
    table = []
    for _ in range(n):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode()
        code, ndim = r.unpack("<BB")
        dims = r.unpack(f"<{ndim}I")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code}")
        table.append((name, _DTYPES[code], dims))
    tensors = {}
    for name, dt, dims in table:
        count = int(np.prod(dims)) if dims else 1
        raw = r.take(count * dt.itemsize)
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    state = int.from_bytes(r.take(16), "little")
    inc = int.from_bytes(r.take(16), "little")
    has32, uint = r.unpack("<BI")
    (ln,) = r.unpack("<I")
    extras = json.loads(r.take(ln).decode())
    rng_state = {"bit_generator": "PCG64", "state": {"state": state, "inc": inc},
                 "has_uint32": has32, "uinteger": uint}
    return Checkpoint(epoch, chash, tensors, rng_state, extras)
