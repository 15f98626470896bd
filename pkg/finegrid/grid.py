"""Flow grids: the data model, coarsening, scaling, splits and synthetic data."""

import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .config import DataConfig, SynthConfig
from .errors import DimensionError, FormatError, UsageError
from .tensor import Tensor, add, scale

logger = logging.getLogger(__name__)

GridLike = Union["FlowGrid", np.ndarray]


class Granularity(IntEnum):
    COARSE = 0
    FINE = 1


def frame_timestamps(indices: Sequence[int], slots_per_day: int) -> np.ndarray:
    """(day_index, slot_index) for each absolute frame index."""
    idx = np.asarray(indices, dtype=np.int64)
    return np.stack([idx // slots_per_day, idx % slots_per_day], axis=-1).reshape(-1, 2)


@dataclass(frozen=True)
class FlowGrid:
    """A timestamped ``T x H x W`` sequence of non-negative flow maps.

    ``frames`` is stored read-only; ``timestamps`` holds (day, slot) per frame.
    """
    frames: np.ndarray
    granularity: Granularity
    upscale: int
    slots_per_day: int
    timestamps: np.ndarray = field(default=None)

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 3:
            raise DimensionError(f"flow grid frames must be T x H x W, got {frames.shape}")
        if self.upscale < 1 or self.slots_per_day < 1:
            raise FormatError("upscale and slots_per_day must be positive")
        if frames.size and np.min(frames) < 0:
            raise FormatError("negative flow values")
        frames = frames.copy()
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

        ts = self.timestamps
        if ts is None:
            ts = frame_timestamps(range(frames.shape[0]), self.slots_per_day)
        ts = np.asarray(ts, dtype=np.int64).reshape(-1, 2)
        if ts.shape[0] != frames.shape[0]:
            raise DimensionError(f"{ts.shape[0]} timestamps for {frames.shape[0]} frames")
        ts.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "granularity", Granularity(self.granularity))

    @classmethod
    def from_frames(cls, frames, granularity=Granularity.COARSE, upscale: int = 2,
                    slots_per_day: int = 48, start: int = 0) -> "FlowGrid":
        frames = np.asarray(frames)
        ts = frame_timestamps(range(start, start + frames.shape[0]), slots_per_day)
        return cls(frames, Granularity(granularity), upscale, slots_per_day, ts)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def slots(self) -> np.ndarray:
        return self.timestamps[:, 1]

    def select(self, indices: Union[range, Sequence[int], np.ndarray]) -> "FlowGrid":
        """Sub-sequence of frames, keeping their original timestamps."""
        idx = np.asarray(list(indices) if isinstance(indices, range) else indices, dtype=np.intp)
        return FlowGrid(self.frames[idx], self.granularity, self.upscale,
                        self.slots_per_day, self.timestamps[idx])

    def __len__(self) -> int:
        return self.n_frames


def _frames_of(grid: GridLike) -> np.ndarray:
    return grid.frames if isinstance(grid, FlowGrid) else np.asarray(grid)


# ============================================================================
# Coarsening and the structural constraint
# ============================================================================


def block_sum(values: np.ndarray, factor: int) -> np.ndarray:
    """Sum each ``factor x factor`` block of the last two axes."""
    values = np.asarray(values)
    *lead, h, w = values.shape
    if factor < 1 or h % factor or w % factor:
        raise DimensionError(f"grid {h}x{w} is not divisible by upscale factor {factor}")
    blocks = values.reshape(*lead, h // factor, factor, w // factor, factor)
    return blocks.sum(axis=(-3, -1))


def coarsen(fine: GridLike, factor: Optional[int] = None) -> GridLike:
    """Aggregate a fine grid into its coarse counterpart by block sums."""
    if isinstance(fine, FlowGrid):
        s = factor or fine.upscale
        return FlowGrid(block_sum(fine.frames, s), Granularity.COARSE, s,
                        fine.slots_per_day, fine.timestamps)
    if factor is None:
        raise UsageError("coarsen needs an upscale factor for raw arrays")
    return block_sum(fine, factor)


def validate_constraint(coarse: GridLike, fine: GridLike, factor: Optional[int] = None) -> float:
    """Max over frames and cells of ``|coarse - block_sum(fine)|``.

    The caller compares the result against its own tolerance.
    """
    if factor is None:
        if isinstance(fine, FlowGrid):
            factor = fine.upscale
        elif isinstance(coarse, FlowGrid):
            factor = coarse.upscale
        else:
            raise UsageError("validate_constraint needs an upscale factor for raw arrays")
    c = np.asarray(_frames_of(coarse), dtype=np.float64)
    f = np.asarray(_frames_of(fine), dtype=np.float64)
    if c.shape[:-2] != f.shape[:-2] or c.shape[-2] * factor != f.shape[-2] \
            or c.shape[-1] * factor != f.shape[-1]:
        raise DimensionError(f"coarse {c.shape} and fine {f.shape} do not pair at factor {factor}")
    if c.size == 0:
        return 0.0
    return float(np.max(np.abs(c - block_sum(f, factor))))


def mean_partition(coarse: np.ndarray, factor: int) -> np.ndarray:
    """Spread each coarse value uniformly over its ``factor x factor`` subregions."""
    coarse = np.asarray(coarse)
    spread = np.repeat(np.repeat(coarse, factor, axis=-2), factor, axis=-1)
    return spread / (factor * factor)


# ============================================================================
# Scaling
# ============================================================================


@dataclass(frozen=True)
class ScalerParams:
    """Affine map of ``[min, max]`` onto ``[0, 1]``."""
    min: float
    max: float

    def __post_init__(self):
        if not self.max > self.min:
            raise UsageError(f"scaler max {self.max} must exceed min {self.min}")

    @property
    def span(self) -> float:
        return self.max - self.min


def fit_scaler(grid: GridLike) -> ScalerParams:
    """Fit on training frames only; a constant grid widens max to min + 1."""
    values = _frames_of(grid)
    if values.size == 0:
        raise UsageError("cannot fit a scaler on an empty grid")
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi <= lo:
        hi = lo + 1.0
    return ScalerParams(lo, hi)


def apply_scaler(params: ScalerParams, values):
    if isinstance(values, Tensor):
        return scale(add(values, -params.min), 1.0 / params.span)
    values = np.asarray(values)
    return (values - params.min) / params.span


def invert_scaler(params: ScalerParams, values):
    if isinstance(values, Tensor):
        return add(scale(values, params.span), params.min)
    values = np.asarray(values)
    return values * params.span + params.min


# ============================================================================
# Splits
# ============================================================================


@dataclass(frozen=True)
class DatasetSplit:
    """Chronological, disjoint train / val / test frame ranges."""
    train: range
    val: range
    test: range

    def __post_init__(self):
        if not (self.train.start == 0 and self.train.stop == self.val.start
                and self.val.stop == self.test.start):
            raise UsageError("split ranges must be contiguous and chronological")

    @property
    def n_frames(self) -> int:
        return self.test.stop

    def part(self, name: str) -> range:
        if name not in ("train", "val", "test"):
            raise UsageError(f"unknown split {name!r}")
        return getattr(self, name)


def chronological_split(n_frames: int, train_frac: float = 0.7, val_frac: float = 0.1) -> DatasetSplit:
    n_train = int(np.floor(n_frames * train_frac))
    n_val = int(np.floor(n_frames * val_frac))
    if n_train < 1 or n_train + n_val >= n_frames:
        raise UsageError(
            f"{n_frames} frames cannot be split {train_frac}/{val_frac} with a non-empty test part"
        )
    return DatasetSplit(range(0, n_train), range(n_train, n_train + n_val),
                        range(n_train + n_val, n_frames))


@dataclass(frozen=True)
class FlowData:
    """Paired coarse/fine grids with their split."""
    coarse: FlowGrid
    fine: FlowGrid
    split: DatasetSplit

    def __post_init__(self):
        if self.coarse.granularity != Granularity.COARSE or self.fine.granularity != Granularity.FINE:
            raise FormatError("granularity: expected a coarse and a fine grid")
        if self.coarse.n_frames != self.fine.n_frames:
            raise DimensionError(
                f"coarse has {self.coarse.n_frames} frames, fine has {self.fine.n_frames}"
            )
        s = self.upscale
        if (self.fine.height, self.fine.width) != (s * self.coarse.height, s * self.coarse.width):
            raise DimensionError(
                f"fine {self.fine.height}x{self.fine.width} is not {s}x coarse "
                f"{self.coarse.height}x{self.coarse.width}"
            )
        if self.split.n_frames != self.coarse.n_frames:
            raise DimensionError(f"split covers {self.split.n_frames} of {self.coarse.n_frames} frames")

    @classmethod
    def from_grids(cls, coarse: FlowGrid, fine: FlowGrid, train_frac: float = 0.7,
                   val_frac: float = 0.1) -> "FlowData":
        return cls(coarse, fine, chronological_split(coarse.n_frames, train_frac, val_frac))

    @property
    def upscale(self) -> int:
        return self.fine.upscale

    def part(self, name: str) -> Tuple[FlowGrid, FlowGrid]:
        indices = self.split.part(name)
        return self.coarse.select(indices), self.fine.select(indices)


# ============================================================================
# Synthetic data
# ============================================================================


def synth_generate(cfg: SynthConfig) -> Tuple[FlowGrid, FlowGrid]:
    """Moving Gaussian blobs on daily-periodic loops plus clipped noise.

    Values are rounded to whole counts so the coarse grid is an exact block
    sum of the fine grid in either precision.
    """
    rng = np.random.default_rng(cfg.seed)
    s = cfg.upscale
    fh, fw = cfg.height * s, cfg.width * s
    slots = np.arange(cfg.frames) % cfg.slots_per_day
    phase = 2 * np.pi * slots / cfg.slots_per_day

    rows = np.arange(fh, dtype=np.float64)[:, None]
    cols = np.arange(fw, dtype=np.float64)[None, :]
    fine = np.zeros((cfg.frames, fh, fw), dtype=np.float64)

    for _ in range(cfg.blobs):
        center = rng.uniform([0.25 * fh, 0.25 * fw], [0.75 * fh, 0.75 * fw])
        radius = cfg.blob_speed * rng.uniform(0.15, 0.35) * np.array([fh, fw])
        loops = int(rng.integers(1, 3))
        offset = rng.uniform(0, 2 * np.pi)
        intensity_offset = rng.uniform(0, 2 * np.pi)
        width = cfg.blob_width * rng.uniform(0.75, 1.25)

        cr = center[0] + radius[0] * np.sin(loops * phase + offset)
        cc = center[1] + radius[1] * np.cos(loops * phase + offset)
        amp = cfg.peak * (0.6 + 0.4 * np.sin(phase + intensity_offset))
        d2 = (rows[None] - cr[:, None, None]) ** 2 + (cols[None] - cc[:, None, None]) ** 2
        fine += amp[:, None, None] * np.exp(-d2 / (2 * width * width))

    if cfg.noise > 0:
        fine += rng.normal(0.0, cfg.noise, size=fine.shape)
    fine = np.round(np.clip(fine, 0.0, None))

    fine_grid = FlowGrid.from_frames(fine, Granularity.FINE, s, cfg.slots_per_day)
    coarse_grid = coarsen(fine_grid)
    logger.info("generated %d frames, coarse %dx%d, fine %dx%d",
                cfg.frames, cfg.height, cfg.width, fh, fw)
    return fine_grid, coarse_grid


def synth_data(cfg: DataConfig) -> FlowData:
    """Generate and split a synthetic dataset."""
    fine, coarse = synth_generate(cfg)
    return FlowData.from_grids(coarse, fine, cfg.train_frac, cfg.val_frac)
