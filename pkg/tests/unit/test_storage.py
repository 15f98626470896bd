"""Tests for finegrid.storage module - grid files, checkpoints and CSV."""

import numpy as np
import pytest

from finegrid.errors import CheckpointError, FormatError
from finegrid.grid import Granularity
from finegrid.storage import (
    CHECKPOINT_MAGIC,
    GRID_HEADER,
    GRID_MAGIC,
    GRID_VERSION,
    Checkpoint,
    Stage,
    decode_checkpoint,
    decode_grid,
    encode_checkpoint,
    encode_grid,
    export_csv,
    get_data_dir,
    get_state_dir,
    import_csv,
    load_checkpoint,
    load_grid,
    read_csv,
    save_checkpoint,
    save_grid,
    write_csv,
)


def raw_grid(values, code=8, magic=GRID_MAGIC):
    values = np.asarray(values, dtype=np.float64)
    t, h, w = values.shape
    header = GRID_HEADER.pack(magic, GRID_VERSION, code, int(Granularity.FINE), 2, t, h, w, 4)
    return header + values.astype("<f8" if code == 8 else "<f4").tobytes()


class TestGridFiles:
    """Tests for the binary grid format."""

    def test_save_load(self, tmp_path, fine_grid):
        """A saved grid should load back with identical frames and metadata."""
        path = tmp_path / "fine.ufg"
        save_grid(fine_grid, path)
        loaded = load_grid(path)

        np.testing.assert_array_equal(loaded.frames, fine_grid.frames)
        assert loaded.granularity == Granularity.FINE
        assert loaded.upscale == 2
        assert loaded.slots_per_day == 3
        np.testing.assert_array_equal(loaded.timestamps, fine_grid.timestamps)

    def test_header_starts_with_magic(self, fine_grid):
        assert encode_grid(fine_grid)[:4] == b"UFLW"

    def test_single_precision(self, fine_grid):
        """Precision 4 should store float32 payloads."""
        blob = encode_grid(fine_grid, precision=4)
        assert len(blob) == GRID_HEADER.size + fine_grid.frames.size * 4
        assert decode_grid(blob).frames.dtype == np.float32

    def test_bad_precision(self, fine_grid):
        with pytest.raises(FormatError):
            encode_grid(fine_grid, precision=2)

    def test_bad_magic(self):
        """Should reject a file that does not start with the grid magic."""
        with pytest.raises(FormatError, match="bad magic"):
            decode_grid(raw_grid(np.ones((1, 2, 2)), magic=b"XXXX"))

    def test_truncated_payload(self):
        """A payload shorter than the header declares should be rejected."""
        with pytest.raises(FormatError, match="truncated"):
            decode_grid(raw_grid(np.ones((2, 2, 2)))[:-3])

    def test_truncated_header(self):
        with pytest.raises(FormatError, match="truncated header"):
            decode_grid(b"UFLW")

    def test_trailing_bytes(self):
        with pytest.raises(FormatError, match="trailing"):
            decode_grid(raw_grid(np.ones((1, 2, 2))) + b"\x00")

    def test_negative_values(self):
        """Negative flow values should be rejected on load."""
        with pytest.raises(FormatError, match="negative"):
            decode_grid(raw_grid([[[1.0, -1.0], [0.0, 2.0]]]))

    def test_non_finite_values(self):
        with pytest.raises(FormatError, match="non-finite"):
            decode_grid(raw_grid([[[np.nan, 0.0], [0.0, 0.0]]]))

    def test_load_error_names_path(self, tmp_path):
        path = tmp_path / "broken.ufg"
        path.write_bytes(b"nope")
        with pytest.raises(FormatError, match="broken.ufg"):
            load_grid(path)


class TestCsv:
    """Tests for CSV import and export."""

    def test_export_import(self, tmp_path, coarse_grid):
        """Exported t,i,j,value rows should import to the same grid."""
        path = tmp_path / "coarse.csv"
        export_csv(coarse_grid, path)
        loaded = import_csv(path, Granularity.COARSE, 2, 3, coarse_grid.height, coarse_grid.width)
        np.testing.assert_array_equal(loaded.frames, coarse_grid.frames)

    def test_export_header(self, tmp_path, coarse_grid):
        path = tmp_path / "coarse.csv"
        export_csv(coarse_grid, path)
        header, rows = read_csv(path)
        assert header == ["t", "i", "j", "value"]
        assert len(rows) == coarse_grid.frames.size

    def test_missing_cells_are_zero(self, tmp_path):
        path = tmp_path / "sparse.csv"
        write_csv(path, ("t", "i", "j", "value"), [(1, 0, 1, 4.0)])
        grid = import_csv(path, Granularity.COARSE, 2, 4, 2, 2)
        assert grid.n_frames == 2
        assert grid.frames[1].tolist() == [[0.0, 4.0], [0.0, 0.0]]
        assert grid.frames[0].sum() == 0

    def test_wrong_columns(self, tmp_path):
        path = tmp_path / "bad.csv"
        write_csv(path, ("time", "row", "col", "v"), [(0, 0, 0, 1.0)])
        with pytest.raises(FormatError, match="t,i,j,value"):
            import_csv(path, Granularity.COARSE, 2, 4, 1, 1)

    def test_cell_outside_grid(self, tmp_path):
        path = tmp_path / "bad.csv"
        write_csv(path, ("t", "i", "j", "value"), [(0, 3, 0, 1.0)])
        with pytest.raises(FormatError, match="outside"):
            import_csv(path, Granularity.COARSE, 2, 4, 2, 2)

    def test_negative_value(self, tmp_path):
        path = tmp_path / "bad.csv"
        write_csv(path, ("t", "i", "j", "value"), [(0, 0, 0, -2.0)])
        with pytest.raises(FormatError, match="negative"):
            import_csv(path, Granularity.COARSE, 2, 4, 1, 1)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(FormatError, match="empty"):
            read_csv(path)

    def test_floats_round_trip_exactly(self, tmp_path):
        path = tmp_path / "loss.csv"
        write_csv(path, ("epoch", "loss"), [(1, 0.1 + 0.2)])
        _, rows = read_csv(path)
        assert float(rows[0][1]) == 0.1 + 0.2


class TestCheckpoints:
    """Tests for the tagged parameter checkpoint format."""

    def test_save_load(self, tmp_path):
        """Segments, shapes and the stage tag should survive a save and load."""
        ckpt = Checkpoint(Stage.II, {
            "encoder_c.block0.wq": np.arange(6.0).reshape(2, 3),
            "encoder_c.block0.ln_gamma": np.ones(3, dtype=np.float32),
        })
        path = tmp_path / "encoder_c.ckpt"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)

        assert loaded.stage == Stage.II
        assert list(loaded.segments) == list(ckpt.segments)
        np.testing.assert_array_equal(loaded.segments["encoder_c.block0.wq"],
                                      ckpt.segments["encoder_c.block0.wq"])
        assert loaded.segments["encoder_c.block0.wq"].dtype == np.float64
        assert loaded.segments["encoder_c.block0.ln_gamma"].dtype == np.float32

    def test_magic(self):
        assert encode_checkpoint(Checkpoint(Stage.I))[:4] == CHECKPOINT_MAGIC

    def test_group_strips_prefix(self):
        ckpt = Checkpoint(Stage.III, {"encoder_b.w": np.ones(1), "fusion.w": np.zeros(2)})
        assert list(ckpt.group("encoder_b")) == ["w"]
        assert ckpt.groups == ["encoder_b", "fusion"]

    def test_bad_magic(self):
        blob = bytearray(encode_checkpoint(Checkpoint(Stage.I, {"a.w": np.ones(2)})))
        blob[:4] = b"UFLW"
        with pytest.raises(CheckpointError, match="bad magic"):
            decode_checkpoint(bytes(blob))

    def test_bad_stage_tag(self):
        blob = bytearray(encode_checkpoint(Checkpoint(Stage.I)))
        blob[6] = 9
        with pytest.raises(CheckpointError, match="stage"):
            decode_checkpoint(bytes(blob))

    def test_truncated_segment_named(self):
        """Truncation inside a segment should name that segment."""
        blob = encode_checkpoint(Checkpoint(Stage.I, {"encoder_b.w": np.ones((4, 4))}))
        with pytest.raises(CheckpointError, match="encoder_b.w"):
            decode_checkpoint(blob[:-8])

    def test_trailing_data(self):
        blob = encode_checkpoint(Checkpoint(Stage.I, {"a.w": np.ones(2)}))
        with pytest.raises(CheckpointError, match="trailing"):
            decode_checkpoint(blob + b"\x01")

    def test_load_error_names_path(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"UM")
        with pytest.raises(CheckpointError, match="bad.ckpt"):
            load_checkpoint(path)


class TestDirectories:
    """Tests for XDG directory helpers."""

    def test_data_dir_under_xdg(self, tmp_path):
        assert get_data_dir() == tmp_path / "data" / "finegrid"
        assert get_data_dir().is_dir()

    def test_state_dir_under_xdg(self, tmp_path):
        assert get_state_dir() == tmp_path / "state" / "finegrid" / "logs"
