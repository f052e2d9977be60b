import numpy as np
import pytest

from orformer import checkpoint as ckpt_io
from orformer.checkpoint import Checkpoint, CheckpointError


def example():
    rng = np.random.default_rng(0)
    return Checkpoint("stage1", {"enc.w": rng.normal(size=(3, 4)), "codebook.codes": rng.normal(size=(5, 2)),
                                 "scalar": np.array(1.5)},
                      {"d": 4, "mode": "occ_aware"}, {"state": 7})


def test_save_load_save_is_byte_identical(tmp_path):
    ck = example()
    ckpt_io.save(ck, tmp_path / "a.ckpt")
    back = ckpt_io.load(tmp_path / "a.ckpt")
    ckpt_io.save(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert back.stage == "stage1" and back.config == ck.config and back.rng == ck.rng
    for k in ck.tensors:
        assert back.tensors[k].tobytes() == ck.tensors[k].tobytes()
    assert back.tensors["scalar"].shape == ()


def test_header_counts_match_payload():
    raw = ckpt_io.to_bytes(example())
    head, _, payload = raw.partition(b"end\n")
    lines = head.decode().splitlines()
    assert lines[0] == "ORF1"
    n = int(lines[4].split()[1])
    elements = 0
    for entry in lines[5:5 + n]:
        name, tag, rank, *dims = entry.split()
        assert tag == "f32" and int(rank) == len(dims)
        elements += int(np.prod([int(d) for d in dims]))
    assert elements == len(payload) // 4 and len(payload) % 4 == 0


def test_truncation_names_the_short_tensor():
    raw = ckpt_io.to_bytes(example())
    with pytest.raises(CheckpointError, match="scalar"):
        ckpt_io.from_bytes(raw[:-4])
    # cutting into the middle tensor names that one
    with pytest.raises(CheckpointError, match="codebook.codes"):
        ckpt_io.from_bytes(raw[:-4 - 4 - 8])


def test_bad_magic_and_trailing_bytes():
    raw = ckpt_io.to_bytes(example())
    with pytest.raises(CheckpointError, match="magic"):
        ckpt_io.from_bytes(b"ORF2" + raw[4:])
    with pytest.raises(CheckpointError, match="trailing"):
        ckpt_io.from_bytes(raw + b"\0\0\0\0")


def test_non_finite_rejected():
    ck = example()
    ck.tensors["enc.w"][0, 0] = np.nan
    with pytest.raises(CheckpointError):
        ckpt_io.to_bytes(ck)
    raw = bytearray(ckpt_io.to_bytes(example()))
    payload_start = raw.index(b"end\n") + 4
    raw[payload_start:payload_start + 4] = np.array([np.inf], dtype="<f4").tobytes()
    with pytest.raises(CheckpointError, match="non-finite"):
        ckpt_io.from_bytes(bytes(raw))


def test_assign_checks_names_and_shapes():
    from orformer.autodiff import Tensor
    live = {"enc.w": Tensor(np.zeros((3, 4), dtype=np.float32))}
    ckpt_io.assign(live, example().tensors)
    assert live["enc.w"].data.tobytes() == example().tensors["enc.w"].tobytes()
    with pytest.raises(CheckpointError, match="shape"):
        ckpt_io.assign({"enc.w": Tensor(np.zeros((4, 3)))}, example().tensors)
    with pytest.raises(CheckpointError, match="lacks"):
        ckpt_io.assign({"dec.w": Tensor(np.zeros(2))}, example().tensors)


def test_stage_tag():
    with pytest.raises(CheckpointError):
        example().require_stage("stage2")
    assert example().select("enc.").keys() == {"enc.w"}


def test_save_leaves_no_temp_files(tmp_path):
    ckpt_io.save(example(), tmp_path / "sub" / "x.ckpt")
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["x.ckpt"]
