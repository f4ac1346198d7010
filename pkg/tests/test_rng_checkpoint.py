"""Randomness and checkpoint container contracts."""

import numpy as np
import pytest

from narflow.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from narflow.rng import RandomSource


class TestRandomSource:
    def test_reproducible_from_seed(self):
        a = RandomSource(42).normal((100,))
        b = RandomSource(42).normal((100,))
        assert (a == b).all()

    def test_spawned_streams_are_independent_and_stable(self):
        root = RandomSource(7)
        x = root.spawn("alpha").normal((50,))
        y = root.spawn("beta").normal((50,))
        assert not np.allclose(x, y)
        assert (RandomSource(7).spawn("alpha").normal((50,)) == x).all()

    def test_spawn_does_not_disturb_parent(self):
        a = RandomSource(3)
        a.spawn("child")
        b = RandomSource(3)
        assert (a.normal((10,)) == b.normal((10,))).all()

    def test_counter_based_generator(self):
        assert isinstance(RandomSource(0)._gen.bit_generator, np.random.Philox)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = RandomSource(1)
        arrays = {
            "enc/w": rng.normal((3, 4), dtype=np.float32),
            "flow/s": rng.normal((5,), dtype=np.float64),
            "steps": np.array([7], dtype=np.int64),
        }
        path = tmp_path / "m.nckpt"
        save_checkpoint(path, arrays, digest="abc123")
        loaded, digest = load_checkpoint(path)
        assert digest == "abc123"
        assert set(loaded) == set(arrays)
        for k in arrays:
            assert loaded[k].dtype == arrays[k].dtype
            assert (loaded[k] == arrays[k]).all()
            assert loaded[k].tobytes() == arrays[k].tobytes()

    def test_digest_mismatch_rejected(self, tmp_path):
        path = tmp_path / "m.nckpt"
        save_checkpoint(path, {"w": np.zeros(2, dtype=np.float32)}, digest="aaa")
        with pytest.raises(CheckpointError, match="digest mismatch"):
            load_checkpoint(path, expected_digest="bbb")

    def test_not_a_checkpoint(self, tmp_path):
        p = tmp_path / "junk.nckpt"
        p.write_bytes(b"not a checkpoint at all")
        with pytest.raises(CheckpointError, match="not a checkpoint"):
            load_checkpoint(p)
