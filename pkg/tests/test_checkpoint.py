import struct

import numpy as np
import pytest

from bispike import checkpoint as ck
from bispike import train as tr


def quick_config(**changes):
    base = dict(steps=40, batch_size=16, warmup_steps=5, eval_every=10, n_train=256, n_val=64, seq_len=8,
                peak_lr=1e-3, model=tr.toy_model_config(n_layers=1, d_model=16, d_ff=32, T=2))
    base.update(changes)
    return tr.TrainConfig(**base)


@pytest.fixture(scope="module")
def trained():
    saved = {}

    def grab(row, state):
        if row["step"] == 20:
            saved["state"] = state.snapshot()

    res = tr.train_loop(quick_config(), on_row=grab)
    return res, saved["state"]


def parse_header(buf):
    magic = buf[:4]
    version, count = struct.unpack("<II", buf[4:12])
    (name_len,) = struct.unpack("<I", buf[12:16])
    name = buf[16:16 + name_len].decode()
    return magic, version, count, name


class TestFormat:
    def test_header_layout(self, tmp_path):
        p = tmp_path / "a.splm"
        ck.write_entries(p, {"x": np.arange(6, dtype=np.float32).reshape(2, 3)})
        buf = p.read_bytes()
        assert parse_header(buf) == (b"SPLM", 1, 1, "x")
        rank, d0, d1 = struct.unpack("<III", buf[17:29])
        assert (rank, d0, d1) == (2, 2, 3)
        np.testing.assert_array_equal(np.frombuffer(buf[29:], "<f4"), np.arange(6))
        assert len(buf) == 29 + 24

    def test_float32_only(self, tmp_path):
        with pytest.raises(ck.CheckpointError):
            ck.write_entries(tmp_path / "a.splm", {"x": np.zeros(2)})

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.splm"
        p.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ck.NotACheckpointError):
            ck.read_entries(p)

    def test_version_mismatch(self, tmp_path):
        p = tmp_path / "v.splm"
        ck.write_entries(p, {"x": np.zeros(1, np.float32)})
        buf = bytearray(p.read_bytes())
        buf[4:8] = struct.pack("<I", 2)
        p.write_bytes(bytes(buf))
        with pytest.raises(ck.CheckpointVersionError):
            ck.read_entries(p)

    @pytest.mark.parametrize("cut", [6, 10, 14, 18, 30, -1])
    def test_truncated(self, tmp_path, cut):
        p = tmp_path / "t.splm"
        ck.write_entries(p, {"x": np.ones((2, 3), np.float32)})
        p.write_bytes(p.read_bytes()[:cut])
        with pytest.raises(ck.TruncatedCheckpointError):
            ck.read_entries(p)

    def test_errors_are_distinct(self):
        kinds = {ck.NotACheckpointError, ck.CheckpointVersionError, ck.TruncatedCheckpointError}
        assert len(kinds) == 3 and all(issubclass(k, ck.CheckpointError) for k in kinds)


class TestRoundTrip:
    def test_bitwise(self, tmp_path, trained):
        res, _ = trained
        st = res.state
        p = tmp_path / "c.splm"
        ck.checkpoint_save(p, st.model, st.opt, st.step, run_config={"train": {"steps": 40}})
        back = ck.checkpoint_load(p)
        assert back.step == st.step == 40 and back.rng_counter == 40
        assert back.model.config == st.model.config
        assert back.run_config == {"train": {"steps": 40}}
        for name, prm in st.model.params.items():
            assert back.model.params[name].data.tobytes() == prm.data.tobytes()
            assert back.opt.m[name].tobytes() == st.opt.m[name].tobytes()
            assert back.opt.v[name].tobytes() == st.opt.v[name].tobytes()
        assert dict(back.model.alpha) == dict(st.model.alpha) and back.model.alpha.frozen
        assert back.opt.step == st.opt.step

    def test_resave_is_byte_identical(self, tmp_path, trained):
        st = trained[0].state
        a, b = tmp_path / "a.splm", tmp_path / "b.splm"
        ck.checkpoint_save(a, st.model, st.opt, st.step)
        back = ck.checkpoint_load(a)
        ck.checkpoint_save(b, back.model, back.opt, back.step)
        assert a.read_bytes() == b.read_bytes()

    def test_loaded_model_gives_identical_logits(self, tmp_path, trained):
        st = trained[0].state
        p = tmp_path / "c.splm"
        ck.checkpoint_save(p, st.model, st.opt, st.step)
        x = trained[0].dataset.val_x[:8]
        assert ck.checkpoint_load(p).model(x).data.tobytes() == st.model(x).data.tobytes()

    def test_resume_equals_unbroken_run(self, tmp_path, trained):
        res, mid = trained
        p = tmp_path / "mid.splm"
        ck.checkpoint_save(p, mid.model, mid.opt, mid.step)
        resumed = tr.train_loop(quick_config(), resume=ck.checkpoint_load(p).train_state())
        assert resumed.rows == [r for r in res.rows if r["step"] > 20]
        assert [r["step"] for r in resumed.rows] == [30, 40]

    def test_missing_parameter(self, tmp_path, trained):
        st = trained[0].state
        p = tmp_path / "c.splm"
        ck.checkpoint_save(p, st.model)
        entries = ck.read_entries(p)
        del entries["param/head.w"]
        ck.write_entries(p, entries)
        with pytest.raises(ck.CheckpointError, match="head.w"):
            ck.checkpoint_load(p)
