import numpy as np
import pytest
import torch

from coupling_gen.io import (
    JsonlWriter,
    load_checkpoint,
    load_module_arrays,
    module_arrays,
    read_array_dump,
    read_jsonl,
    read_sequences,
    save_checkpoint,
    write_array_dump,
    write_image_grid,
    write_sequences,
)


@pytest.mark.parametrize("dtype", [np.uint8, np.int32, np.int64, np.float32])
def test_array_dump_roundtrip(tmp_path, dtype):
    a = (np.arange(24).reshape(2, 3, 4) % 7).astype(dtype)
    write_array_dump(tmp_path / "a.bin", a)
    raw = (tmp_path / "a.bin").read_bytes()
    assert raw[:2] == b"CG" and len(raw) == 16 + a.nbytes
    b = read_array_dump(tmp_path / "a.bin")
    assert b.dtype == a.dtype and np.array_equal(a, b)


def test_array_dump_rejects_bad_input(tmp_path):
    with pytest.raises(ValueError):
        write_array_dump(tmp_path / "x.bin", np.zeros(3, dtype=np.float64))
    (tmp_path / "bad.bin").write_bytes(b"XX" + bytes(14))
    with pytest.raises(ValueError):
        read_array_dump(tmp_path / "bad.bin")


def test_sequences_and_jsonl(tmp_path):
    t = np.array([[0, 1, 2], [3, 0, 1]])
    write_sequences(tmp_path / "s.txt", t)
    assert np.array_equal(read_sequences(tmp_path / "s.txt"), t)
    w = JsonlWriter(tmp_path / "log.jsonl")
    w.write({"a": 1})
    w.write_all([{"b": 2}])
    assert read_jsonl(tmp_path / "log.jsonl") == [{"a": 1}, {"b": 2}]


def test_checkpoint_roundtrip(tmp_path):
    m = torch.nn.Linear(3, 2)
    save_checkpoint(tmp_path / "c.npz", module_arrays(m, "lin."), {"kind": "x", "epoch": 3})
    arrays, meta = load_checkpoint(tmp_path / "c.npz")
    assert meta == {"kind": "x", "epoch": 3}
    m2 = torch.nn.Linear(3, 2)
    load_module_arrays(m2, arrays, "lin.")
    assert torch.equal(m.weight, m2.weight)


def test_image_grid_png(tmp_path):
    from PIL import Image

    write_image_grid(tmp_path / "g.png", np.ones((5, 4, 4)), ncol=3)
    img = Image.open(tmp_path / "g.png")
    assert img.size == (3 * 5 + 1, 2 * 5 + 1)
