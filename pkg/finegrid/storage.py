"""On-disk formats: grid files, checkpoints, CSV tables and XDG directories."""

import csv
import logging
import os
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import CheckpointError, FormatError
from .grid import FlowGrid, Granularity

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

GRID_MAGIC = b"UFLW"
GRID_VERSION = 1
GRID_HEADER = struct.Struct("<4sHBBHIIII")

CHECKPOINT_MAGIC = b"UMSR"
CHECKPOINT_VERSION = 1
CHECKPOINT_HEADER = struct.Struct("<4sHBH")

_FLOAT_CODES = {4: "<f4", 8: "<f8"}


def get_data_dir() -> Path:
    """Get XDG-compliant data directory."""
    xdg_data = os.environ.get("XDG_DATA_HOME", os.path.expanduser("~/.local/share"))
    data_dir = Path(xdg_data) / "finegrid"
    data_dir.mkdir(parents=True, exist_ok=True)
    return data_dir


def get_state_dir() -> Path:
    """Get XDG-compliant state directory for logs."""
    xdg_state = os.environ.get("XDG_STATE_HOME", os.path.expanduser("~/.local/state"))
    state_dir = Path(xdg_state) / "finegrid" / "logs"
    state_dir.mkdir(parents=True, exist_ok=True)
    return state_dir


def _precision_code(dtype: np.dtype) -> int:
    return 8 if np.dtype(dtype) == np.float64 else 4


# ============================================================================
# Grid files
# ============================================================================


def encode_grid(grid: FlowGrid, precision: Optional[int] = None) -> bytes:
    code = precision or _precision_code(grid.frames.dtype)
    if code not in _FLOAT_CODES:
        raise FormatError(f"precision must be 4 or 8 bytes, got {code}")
    header = GRID_HEADER.pack(GRID_MAGIC, GRID_VERSION, code, int(grid.granularity),
                              grid.upscale, grid.n_frames, grid.height, grid.width,
                              grid.slots_per_day)
    payload = np.ascontiguousarray(grid.frames, dtype=_FLOAT_CODES[code]).tobytes()
    return header + payload


def decode_grid(blob: bytes) -> FlowGrid:
    if len(blob) < GRID_HEADER.size:
        raise FormatError("truncated header")
    magic, version, code, gran, upscale, t, h, w, spd = GRID_HEADER.unpack_from(blob)
    if magic != GRID_MAGIC:
        raise FormatError("bad magic")
    if version != GRID_VERSION:
        raise FormatError(f"unsupported version {version}")
    if code not in _FLOAT_CODES:
        raise FormatError(f"bad precision {code}")
    if gran not in (Granularity.COARSE, Granularity.FINE):
        raise FormatError(f"bad granularity {gran}")
    if upscale < 1:
        raise FormatError("bad upscale factor 0")
    if spd < 1:
        raise FormatError("bad slots_per_day 0")

    expected = t * h * w * code
    payload = blob[GRID_HEADER.size:]
    if len(payload) < expected:
        raise FormatError(f"truncated payload: header declares {expected} bytes, found {len(payload)}")
    if len(payload) > expected:
        raise FormatError(f"trailing data: {len(payload) - expected} extra bytes")
    frames = np.frombuffer(payload, dtype=_FLOAT_CODES[code]).reshape(t, h, w)
    if not np.all(np.isfinite(frames)):
        raise FormatError("non-finite values")
    if frames.size and frames.min() < 0:
        raise FormatError("negative values")
    native = np.float64 if code == 8 else np.float32
    return FlowGrid.from_frames(frames.astype(native), Granularity(gran), upscale, spd)


def save_grid(grid: FlowGrid, path: PathLike, precision: Optional[int] = None):
    """Write ``grid`` in the binary grid format."""
    data = encode_grid(grid, precision)
    with open(path, "wb") as f:
        f.write(data)
    logger.info("wrote %s grid %s (%d frames)", grid.granularity.name.lower(), path, grid.n_frames)


def load_grid(path: PathLike) -> FlowGrid:
    with open(path, "rb") as f:
        data = f.read()
    try:
        return decode_grid(data)
    except FormatError as e:
        raise FormatError(f"{path}: {e}") from None


# ============================================================================
# CSV
# ============================================================================


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path: PathLike) -> Tuple[List[str], List[List[str]]]:
    with open(path, "r", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty CSV file") from None
        return header, [row for row in reader if row]


def export_csv(grid: FlowGrid, path: PathLike):
    """Write every cell as a ``t,i,j,value`` row."""
    t, i, j = np.indices(grid.frames.shape).reshape(3, -1)
    values = grid.frames.reshape(-1)
    write_csv(path, ("t", "i", "j", "value"),
              zip(t.tolist(), i.tolist(), j.tolist(), values.tolist()))


def import_csv(path: PathLike, granularity: Granularity, upscale: int, slots_per_day: int,
               height: int, width: int, frames: Optional[int] = None) -> FlowGrid:
    """Read ``t,i,j,value`` rows into a grid; cells without a row are 0."""
    header, rows = read_csv(path)
    if [h.strip().lower() for h in header] != ["t", "i", "j", "value"]:
        raise FormatError(f"{path}: expected columns t,i,j,value, got {','.join(header)}")
    try:
        parsed = [(int(r[0]), int(r[1]), int(r[2]), float(r[3])) for r in rows]
    except (ValueError, IndexError):
        raise FormatError(f"{path}: malformed row") from None

    n = frames if frames is not None else (max((p[0] for p in parsed), default=-1) + 1)
    values = np.zeros((n, height, width), dtype=np.float64)
    for t, i, j, v in parsed:
        if not (0 <= t < n and 0 <= i < height and 0 <= j < width):
            raise FormatError(f"{path}: cell ({t},{i},{j}) outside {n}x{height}x{width}")
        if v < 0:
            raise FormatError(f"{path}: negative values")
        values[t, i, j] = v
    return FlowGrid.from_frames(values, granularity, upscale, slots_per_day)


# ============================================================================
# Checkpoints
# ============================================================================


class Stage(IntEnum):
    I = 1
    II = 2
    III = 3


@dataclass
class Checkpoint:
    """Named parameter segments tagged with the training stage that produced them."""
    stage: Stage
    segments: Dict[str, np.ndarray] = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def group(self, name: str) -> Dict[str, np.ndarray]:
        """Segments of one group with the ``<group>.`` prefix stripped."""
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.segments.items() if k.startswith(prefix)}

    @property
    def groups(self) -> List[str]:
        return sorted({k.split(".", 1)[0] for k in self.segments})


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, ckpt.version, int(ckpt.stage),
                                    len(ckpt.segments))]
    for name, values in ckpt.segments.items():
        raw_name = name.encode("utf-8")
        values = np.asarray(values)
        code = _precision_code(values.dtype)
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", values.ndim))
        parts.append(struct.pack(f"<{values.ndim}I", *values.shape))
        parts.append(struct.pack("<B", code))
        parts.append(np.ascontiguousarray(values, dtype=_FLOAT_CODES[code]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))


def decode_checkpoint(blob: bytes) -> Checkpoint:
    reader = _Reader(blob)
    magic, version, stage, count = reader.unpack(CHECKPOINT_HEADER.format, "header")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        stage = Stage(stage)
    except ValueError:
        raise CheckpointError(f"bad stage tag {stage}") from None

    segments: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "segment name length")
        name = reader.take(name_len, "segment name").decode("utf-8", errors="replace")
        (rank,) = reader.unpack("<B", f"rank of {name}")
        dims = reader.unpack(f"<{rank}I", f"shape of {name}")
        (code,) = reader.unpack("<B", f"precision of {name}")
        if code not in _FLOAT_CODES:
            raise CheckpointError(f"segment {name}: bad precision {code}")
        n = int(np.prod(dims, dtype=np.int64))
        raw = reader.take(n * code, f"values of {name}")
        segments[name] = np.frombuffer(raw, dtype=_FLOAT_CODES[code]).reshape(dims).astype(
            np.float64 if code == 8 else np.float32)
    if reader.pos != len(blob):
        raise CheckpointError(f"trailing data after {count} segments")
    return Checkpoint(stage, segments, version)


def save_checkpoint(ckpt: Checkpoint, path: PathLike):
    data = encode_checkpoint(ckpt)
    with open(path, "wb") as f:
        f.write(data)
    logger.info("wrote stage %s checkpoint %s (%d segments)", ckpt.stage.name, path,
                len(ckpt.segments))


def load_checkpoint(path: PathLike) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    try:
        return decode_checkpoint(data)
    except CheckpointError as e:
        raise CheckpointError(f"{path}: {e}") from None
