"""Binary checkpoints.

Layout (all little-endian)::

    b"VTUB" | u32 version | u32 entry count
    per entry: u16 name length | UTF-8 name | u8 rank | u32 dims[rank] | 32-bit values

Parameters are stored as ``<module>/<param name>`` float32 entries.  Extra
state is stored under ``state/``: ``state/f/<key>[/<i>]`` for float arrays,
``state/i/<key>`` for integers (two u32 words, low first) and
``state/json/<key>`` for JSON documents (UTF-8 padded with spaces to whole
words), which carries RNG states and configuration snapshots.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict

import numpy as np

from parallax.errors import FormatError, UsageError

MAGIC = b"VTUB"
VERSION = 1


def write_entries(path, entries) -> None:
    """Write ``(name, array)`` pairs; arrays must be float32 or uint32."""
    entries = list(entries.items() if isinstance(entries, dict) else entries)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries:
        arr = np.asarray(arr)
        if arr.dtype == np.float32:
            raw = arr.astype("<f4", copy=False)
        elif arr.dtype == np.uint32:
            raw = arr.astype("<u4", copy=False)
        else:
            raise UsageError(f"entry {name!r}: only 32-bit float/uint payloads are storable, got {arr.dtype}")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF or arr.ndim > 0xFF:
            raise UsageError(f"entry {name!r}: name or rank too large")
        chunks.append(struct.pack("<H", len(encoded)) + encoded + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(raw).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_entries(path) -> "OrderedDict[str, np.ndarray]":
    """Read a checkpoint; every payload comes back as raw uint32 words."""
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated checkpoint at offset {pos}: needed {n} bytes for {what}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r} at offset 0 (expected {MAGIC!r})")
    pos = 4
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at offset 4")
    out = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"entry name at offset {pos - name_len} is not UTF-8") from exc
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        size = int(np.prod(dims, dtype=np.int64))
        words = np.frombuffer(take(4 * size, f"values of {name!r}"), dtype="<u4").astype(np.uint32)
        out[name] = words.reshape(dims)
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after last entry at offset {pos}")
    return out


def _json_words(doc) -> np.ndarray:
    raw = json.dumps(doc, sort_keys=True).encode("utf-8")
    raw += b" " * (-len(raw) % 4)
    return np.frombuffer(raw, dtype="<u4").astype(np.uint32)


def _int_words(value: int) -> np.ndarray:
    value = int(value)
    if not 0 <= value < 2**64:
        raise UsageError(f"integer state {value} outside [0, 2**64)")
    return np.array([value & 0xFFFFFFFF, value >> 32], dtype=np.uint32)


def checkpoint_save(path, modules: dict, state: dict | None = None) -> None:
    """Save parameters of each named module plus arbitrary float/int/JSON ``state``."""
    entries = []
    for mod_name, module in modules.items():
        for pname, p in module.named_parameters():
            if p.dtype != np.float32:
                raise UsageError(f"{mod_name}/{pname}: checkpoints store float32 parameters only")
            entries.append((f"{mod_name}/{pname}", p.data))
    for key, value in (state or {}).items():
        if isinstance(value, np.ndarray):
            entries.append((f"state/f/{key}", value.astype(np.float32)))
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, np.ndarray) for v in value):
            entries.extend((f"state/f/{key}/{i}", v.astype(np.float32)) for i, v in enumerate(value))
        elif isinstance(value, (bool, np.bool_)):
            entries.append((f"state/json/{key}", _json_words(bool(value))))
        elif isinstance(value, (int, np.integer)):
            entries.append((f"state/i/{key}", _int_words(value)))
        else:
            entries.append((f"state/json/{key}", _json_words(value)))
    write_entries(path, entries)


def checkpoint_load(path, modules: dict | None = None):
    """Load a checkpoint.

    Returns ``(params, state)`` where ``params`` maps module name to an ordered
    ``{param name: float32 array}``.  When ``modules`` is given, their
    parameters are restored in place.
    """
    entries = read_entries(path)
    params: dict = {}
    state: dict = {}
    lists: dict = {}
    for name, words in entries.items():
        if name.startswith("state/f/"):
            key = name[len("state/f/") :]
            head, _, tail = key.rpartition("/")
            if head and tail.isdigit():
                lists.setdefault(head, {})[int(tail)] = words.view(np.float32)
            else:
                state[key] = words.view(np.float32)
        elif name.startswith("state/i/"):
            lo, hi = (int(w) for w in words)
            state[name[len("state/i/") :]] = lo | (hi << 32)
        elif name.startswith("state/json/"):
            state[name[len("state/json/") :]] = json.loads(words.tobytes().decode("utf-8"))
        else:
            mod_name, _, pname = name.partition("/")
            params.setdefault(mod_name, OrderedDict())[pname] = words.view(np.float32)
    for key, items in lists.items():
        state[key] = [items[i] for i in sorted(items)]
    for mod_name, module in (modules or {}).items():
        if mod_name not in params:
            raise FormatError(f"checkpoint has no parameters for module {mod_name!r}")
        module.load_state_dict(params[mod_name])
    return params, state


def save_trainer(path, trainer, config: dict | None = None) -> None:
    st = trainer.state()
    state = {
        "m": st["m"],
        "v": st["v"],
        "opt_step": st["opt_step"],
        "epoch": st["epoch"],
        "step": st["step"],
        "flagged_run": st["flagged_run"],
        "rng": st["rng"],
    }
    if config is not None:
        state["config"] = config
    checkpoint_save(path, {"model": trainer.model}, state)


def load_trainer(path, trainer) -> dict:
    """Restore a :class:`parallax.stability.Trainer` in place; returns the raw state."""
    params, state = checkpoint_load(path)
    trainer.load_state({**state, "model": params["model"]})
    return state
