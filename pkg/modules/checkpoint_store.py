"""
WTS1 checkpoint containers and memory-mapped access to tensor series.

File layout (little-endian):
    bytes 0-3   magic b"WTS1"
    bytes 4-7   uint32 header length H
    bytes 8..   UTF-8 JSON header {"step": int, "tensors": {name: {dtype, shape, offset, nbytes}}}
    data region starts at the first multiple of 64 >= 8 + H; offsets are relative to it.
"""
import os
import re
import json
import math
import struct
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from modules.artifacts import atomic_write_bytes
from modules.errors import CheckpointFormatError, SeriesError

logger = logging.getLogger(__name__)

MAGIC = b"WTS1"
ALIGNMENT = 64
DTYPES: Dict[str, np.dtype] = {"f16": np.dtype("<f2"), "f32": np.dtype("<f4")}
FILENAME_RE = re.compile(r"^step-(\d+)\.wts$")
READ_BLOCK_BYTES = 8 << 20

TensorSpec = Tuple[str, Sequence[int], object]


def checkpoint_filename(step: int) -> str:
    return f"step-{step:08d}.wts"


def _align(offset: int, alignment: int = ALIGNMENT) -> int:
    return (offset + alignment - 1) // alignment * alignment


@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: str
    shape: Tuple[int, ...]
    offset: int
    nbytes: int

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def to_json(self) -> dict:
        return {"dtype": self.dtype, "shape": list(self.shape), "offset": self.offset, "nbytes": self.nbytes}


def _check_shape(name: str, shape: Sequence[int]) -> Tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s <= 0 for s in shape):
        raise CheckpointFormatError(f"[{name}] empty shape {list(shape)}")
    return shape


def encode_checkpoint(step: int, tensors: Mapping[str, TensorSpec]) -> bytes:
    if step < 0:
        raise CheckpointFormatError(f"step must be non-negative, got {step}")

    metas: List[TensorMeta] = []
    payloads: List[bytes] = []
    cursor = 0
    for name, (dtype, shape, values) in tensors.items():
        if dtype not in DTYPES:
            raise CheckpointFormatError(f"[{name}] unsupported dtype {dtype!r}")
        shape = _check_shape(name, shape)
        flat = np.asarray(values).reshape(-1)
        if flat.size != math.prod(shape):
            raise CheckpointFormatError(
                f"[{name}] value length {flat.size} does not match shape {list(shape)}"
            )
        data = flat.astype(DTYPES[dtype], copy=False).tobytes()
        cursor = _align(cursor)
        metas.append(TensorMeta(name, dtype, shape, cursor, len(data)))
        payloads.append(data)
        cursor += len(data)

    header = json.dumps(
        {"step": int(step), "tensors": {m.name: m.to_json() for m in metas}},
        separators=(",", ":"),
    ).encode("utf-8")
    data_start = _align(8 + len(header))

    buf = bytearray(data_start + cursor)
    buf[0:4] = MAGIC
    buf[4:8] = struct.pack("<I", len(header))
    buf[8:8 + len(header)] = header
    for meta, data in zip(metas, payloads):
        start = data_start + meta.offset
        buf[start:start + meta.nbytes] = data
    return bytes(buf)


def write_checkpoint(step: int, tensors: Mapping[str, TensorSpec], path) -> Path:
    """
    Serialize `tensors` (name -> (dtype, shape, values)) as one WTS1 file.
    Names are unique by construction of the mapping.
    """
    blob = encode_checkpoint(step, tensors)
    try:
        path = atomic_write_bytes(path, blob)
    except OSError as e:
        logger.error(f"[Checkpoint Write Error] {path}: {e}", exc_info=True)
        raise
    logger.debug(f"Wrote checkpoint step={step} tensors={len(tensors)} to {path}")
    return path


class CheckpointReader:
    """
    Parses the header eagerly and maps the data region lazily, so a reader can be
    created for every checkpoint without touching tensor bytes.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._buffer: Optional[np.memmap] = None
        self.step, self.tensors, self.data_start = self._read_header()

    def _read_header(self) -> Tuple[int, Dict[str, TensorMeta], int]:
        try:
            file_size = os.path.getsize(self.path)
            with open(self.path, "rb") as fh:
                prefix = fh.read(8)
                if len(prefix) < 8 or prefix[:4] != MAGIC:
                    raise CheckpointFormatError(f"[{self.path.name}] bad magic, not a WTS1 file")
                (header_len,) = struct.unpack("<I", prefix[4:8])
                if 8 + header_len > file_size:
                    raise CheckpointFormatError(f"[{self.path.name}] header runs past end of file")
                header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointFormatError(f"[{self.path.name}] unreadable header: {e}")

        if not isinstance(header, dict) or not isinstance(header.get("step"), int) \
                or not isinstance(header.get("tensors"), dict):
            raise CheckpointFormatError(f"[{self.path.name}] header must hold integer 'step' and 'tensors'")

        data_start = _align(8 + header_len)
        metas: Dict[str, TensorMeta] = {}
        for name, raw in header["tensors"].items():
            try:
                dtype = raw["dtype"]
                shape = _check_shape(name, raw["shape"])
                meta = TensorMeta(name, dtype, shape, int(raw["offset"]), int(raw["nbytes"]))
            except (KeyError, TypeError) as e:
                raise CheckpointFormatError(f"[{self.path.name}] malformed entry for {name!r}: {e}")
            if dtype not in DTYPES:
                raise CheckpointFormatError(f"[{self.path.name}] {name}: unsupported dtype {dtype!r}")
            if meta.nbytes != meta.size * DTYPES[dtype].itemsize:
                raise CheckpointFormatError(f"[{self.path.name}] {name}: nbytes does not match shape")
            if meta.offset < 0 or data_start + meta.offset + meta.nbytes > file_size:
                raise CheckpointFormatError(f"[{self.path.name}] {name}: payload outside file")
            metas[name] = meta

        ordered = sorted(metas.values(), key=lambda m: m.offset)
        for prev, cur in zip(ordered, ordered[1:]):
            if prev.offset + prev.nbytes > cur.offset:
                raise CheckpointFormatError(f"[{self.path.name}] tensors {prev.name} and {cur.name} overlap")
        return header["step"], metas, data_start

    def __len__(self) -> int:
        return len(self.tensors)

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __getitem__(self, name: str) -> np.ndarray:
        """Read-only array view backed by the mapped file."""
        if name not in self.tensors:
            raise KeyError(f"[{self.path.name}] no tensor named {name!r}")
        if self._buffer is None:
            self._buffer = np.memmap(self.path, dtype=np.uint8, mode="r")
        meta = self.tensors[name]
        return np.ndarray(meta.shape, dtype=DTYPES[meta.dtype], buffer=self._buffer,
                          offset=self.data_start + meta.offset)

    def read(self, name: str) -> np.ndarray:
        return np.array(self[name])

    def read_strided(self, name: str, start: int = 0, stride: int = 1,
                     block_bytes: int = READ_BLOCK_BYTES) -> np.ndarray:
        """
        Every `stride`-th element of the flattened tensor from `start`, promoted to f32.
        Each block is read through its own mapping and released before the next one,
        so resident memory stays near one block plus the output.
        """
        if name not in self.tensors:
            raise KeyError(f"[{self.path.name}] no tensor named {name!r}")
        meta = self.tensors[name]
        dtype = DTYPES[meta.dtype]
        count = len(range(start, meta.size, stride))
        out = np.empty(count, dtype=np.float32)
        per_block = max(1, block_bytes // (stride * dtype.itemsize))
        base = self.data_start + meta.offset
        for first in range(0, count, per_block):
            n = min(per_block, count - first)
            lo = start + first * stride
            window = np.memmap(self.path, dtype=dtype, mode="r", offset=base + lo * dtype.itemsize,
                               shape=((n - 1) * stride + 1,))
            out[first:first + n] = window[::stride]
            del window
        return out

    def close(self) -> None:
        self._buffer = None


@dataclass(frozen=True)
class CheckpointEntry:
    step: int
    path: Path


@dataclass
class CheckpointSeries:
    entries: List[CheckpointEntry]
    tensor_names: List[str]
    tensor_meta: Dict[str, Tuple[str, Tuple[int, ...]]] = field(default_factory=dict)
    directory: Optional[Path] = None

    @property
    def steps(self) -> List[int]:
        return [e.step for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def reader(self, index: int) -> CheckpointReader:
        return CheckpointReader(self.entries[index].path)


def open_series(directory) -> CheckpointSeries:
    directory = Path(directory)
    if not directory.is_dir():
        raise SeriesError(f"[{directory}] not a directory")

    by_step: Dict[int, Path] = {}
    readers: Dict[int, CheckpointReader] = {}
    for path in sorted(directory.iterdir()):
        match = FILENAME_RE.match(path.name)
        if not match:
            continue
        step = int(match.group(1))
        if step in by_step:
            raise SeriesError(f"[{path.name}] duplicate step {step} (also {by_step[step].name})")
        reader = CheckpointReader(path)
        if reader.step != step:
            raise SeriesError(f"[{path.name}] header step {reader.step} disagrees with filename step {step}")
        by_step[step] = path
        readers[step] = reader

    if not by_step:
        raise SeriesError(f"[{directory}] no checkpoints")

    steps = sorted(by_step)
    first = readers[steps[0]]
    names = [n for n in first.tensors if all(n in readers[s] for s in steps)]
    meta: Dict[str, Tuple[str, Tuple[int, ...]]] = {}
    for name in names:
        ref = first.tensors[name]
        for s in steps[1:]:
            other = readers[s].tensors[name]
            if (other.dtype, other.shape) != (ref.dtype, ref.shape):
                raise SeriesError(
                    f"[{by_step[s].name}] inconsistent tensor shapes for {name}: "
                    f"{other.dtype}{list(other.shape)} vs {ref.dtype}{list(ref.shape)}"
                )
        meta[name] = (ref.dtype, ref.shape)

    logger.info(f"Opened series {directory}: {len(steps)} checkpoints, {len(names)} shared tensors")
    return CheckpointSeries(
        entries=[CheckpointEntry(s, by_step[s]) for s in steps],
        tensor_names=names,
        tensor_meta=meta,
        directory=directory,
    )


@dataclass
class SeriesSlice:
    """One flattened tensor across T checkpoints; a (T x K) f32 matrix."""
    tensor: str
    steps: List[int]
    K: int
    stride: int = 1
    start: int = 0
    shape: Tuple[int, ...] = ()
    loader: Optional[Callable[[], np.ndarray]] = field(default=None, repr=False)
    _values: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def from_array(cls, tensor: str, steps: Sequence[int], values: np.ndarray) -> "SeriesSlice":
        values = np.ascontiguousarray(values, dtype=np.float32)
        if values.ndim != 2 or values.shape[0] != len(steps):
            raise SeriesError(f"[{tensor}] values must be (T x K) with T = {len(steps)}")
        return cls(tensor=tensor, steps=list(steps), K=values.shape[1], shape=(values.shape[1],), _values=values)

    @property
    def T(self) -> int:
        return len(self.steps)

    @property
    def values(self) -> np.ndarray:
        if self._values is None:
            if self.loader is None:
                raise SeriesError(f"[{self.tensor}] slice has neither values nor a loader")
            self._values = self.loader()
        return self._values


def flatten_series(series: CheckpointSeries, tensor: str, stride: int = 1) -> SeriesSlice:
    if tensor not in series.tensor_meta:
        raise SeriesError(f"unknown tensor {tensor!r}; available: {', '.join(series.tensor_names)}")
    if stride < 1:
        raise SeriesError(f"stride must be >= 1, got {stride}")

    _, shape = series.tensor_meta[tensor]
    total = math.prod(shape)
    start = 0
    K = len(range(start, total, stride))
    entries = list(series.entries)

    def load() -> np.ndarray:
        out = np.empty((len(entries), K), dtype=np.float32)
        for t, entry in enumerate(entries):
            out[t] = CheckpointReader(entry.path).read_strided(tensor, start, stride)
        logger.debug(f"Materialized {tensor}: T={len(entries)} K={K} stride={stride}")
        return out

    return SeriesSlice(tensor=tensor, steps=[e.step for e in entries], K=K, stride=stride,
                       start=start, shape=tuple(shape), loader=load)
