import struct

import numpy as np
import pandas as pd
import pytest

from Modules.config import CHECKPOINT_MAGIC
from Modules.errors import ArtifactError, CorruptHeaderError, ShapeTableError, TruncatedPayloadError
from Modules.store import (
    atomic_write_bytes, checkpoint_name, decode_tensors, encode_tensors, is_seed_complete,
    list_seed_dirs, missing_artifacts, prepare_seed_dir, read_csv, read_json, read_tensors,
    write_csv, write_json, write_tensors,
)


class TestTensorContainer:
    def test_layout(self):
        blob = encode_tensors({"w": np.array([[1.0, 2.0]])})
        head = len(CHECKPOINT_MAGIC)
        assert blob[:head] == CHECKPOINT_MAGIC
        assert struct.unpack("<I", blob[head:head + 4]) == (1,)
        assert blob.endswith(struct.pack("<2d", 1.0, 2.0))

    def test_preserves_order_and_values(self, rng, tmp_path):
        tensors = {"b": rng.standard_normal(3), "a": rng.standard_normal((2, 4)), "s": np.array(2.5)}
        back = read_tensors(write_tensors(tmp_path / "t.bin", tensors))
        assert list(back) == ["b", "a", "s"]
        for name, arr in tensors.items():
            np.testing.assert_array_equal(back[name], arr)

    def test_bad_magic(self):
        with pytest.raises(CorruptHeaderError):
            decode_tensors(b"NOPE" + b"\x00" * 16)

    def test_truncated(self):
        blob = encode_tensors({"w": np.ones(4)})
        with pytest.raises(TruncatedPayloadError, match="values of 'w'"):
            decode_tensors(blob[:-1])

    def test_trailing_bytes(self):
        with pytest.raises(ShapeTableError):
            decode_tensors(encode_tensors({"w": np.ones(2)}) + b"\x01")

    def test_duplicate_name(self):
        one = encode_tensors({"w": np.ones(1)})
        entry = one[len(CHECKPOINT_MAGIC) + 4:]
        blob = CHECKPOINT_MAGIC + struct.pack("<I", 2) + entry + entry
        with pytest.raises(ShapeTableError, match="twice"):
            decode_tensors(blob)


class TestFiles:
    def test_atomic_write_leaves_no_temp_files(self, tmp_path):
        atomic_write_bytes(tmp_path / "sub" / "x.bin", b"abc")
        assert [p.name for p in (tmp_path / "sub").iterdir()] == ["x.bin"]

    def test_json_is_sorted_and_round_trips(self, tmp_path):
        path = write_json(tmp_path / "m.json", {"b": 1, "a": [1.5, None]})
        assert path.read_text().index('"a"') < path.read_text().index('"b"')
        assert read_json(path) == {"a": [1.5, None], "b": 1}

    def test_csv_keeps_full_precision(self, tmp_path):
        frame = pd.DataFrame({"x": [0.1 + 0.2, 1 / 3]})
        back = read_csv(write_csv(tmp_path / "f.csv", frame))
        assert back["x"].tolist() == frame["x"].tolist()

    def test_csv_reload_is_exact(self, tmp_path):
        frame = pd.DataFrame({"acc": [k / 37 for k in range(38)] + [0.1 + 0.2]})
        back = read_csv(write_csv(tmp_path / "acc.csv", frame))
        assert back["acc"].tolist() == frame["acc"].tolist()


class TestLayout:
    def test_checkpoint_name(self):
        assert checkpoint_name(3) == "ckpt_task_3.bin"

    @staticmethod
    def _complete(d):
        for name in ("manifest.json", "acc_matrix.csv", "metrics.json", "loss.csv"):
            (d / name).write_text("{}")

    def test_refuses_to_overwrite(self, tmp_path):
        d = prepare_seed_dir(tmp_path / "0")
        self._complete(d)
        with pytest.raises(ArtifactError, match="artifacts exist"):
            prepare_seed_dir(d)
        prepare_seed_dir(d, force=True)
        assert not any(d.iterdir())

    def test_clears_an_interrupted_trial(self, tmp_path):
        d = prepare_seed_dir(tmp_path / "0")
        (d / "ckpt_task_1.bin").write_bytes(b"partial")
        prepare_seed_dir(d)
        assert not any(d.iterdir())

    def test_completeness(self, tmp_path):
        d = prepare_seed_dir(tmp_path / "0")
        assert not is_seed_complete(d)
        self._complete(d)
        assert is_seed_complete(d)
        assert missing_artifacts(d, ["manifest.json", "cka.csv"]) == ["cka.csv"]

    def test_seed_dirs_sorted_numerically(self, tmp_path):
        for s in ("10", "2", "notes"):
            (tmp_path / s).mkdir()
        assert [p.name for p in list_seed_dirs(tmp_path)] == ["2", "10"]
        (tmp_path / "2" / "manifest.json").write_text("{}")
        assert list_seed_dirs(tmp_path / "2") == [tmp_path / "2"]
