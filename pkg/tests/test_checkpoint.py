import json

import numpy as np
import pytest

from abstractor_lab.checkpoint import MAGIC, load_checkpoint, read_checkpoint, save_checkpoint
from abstractor_lab.errors import CheckpointError
from abstractor_lab.harness import decoder_inputs
from abstractor_lab.rng import Rng

from helpers import build, sample_batch


@pytest.fixture
def saved(tmp_path):
    spec, model = build("arch_b", seed=3)
    path = save_checkpoint(tmp_path / "m.ckpt", model, spec.spec_hash(), seed=3, epoch=7, metrics={"val_loss": 0.5})
    return spec, model, path


def test_round_trip_is_bit_exact(saved):
    spec, model, path = saved
    _, fresh = build("arch_b", seed=99)
    header = load_checkpoint(path, fresh, spec_hash=spec.spec_hash())
    assert header["epoch"] == 7 and header["seed"] == 3 and header["metrics"] == {"val_loss": 0.5}
    for name, arr in model.state_dict().items():
        assert np.array_equal(arr, fresh.state_dict()[name]), name
    x, y = sample_batch(spec, 4, Rng(0))
    a = model(x, decoder_inputs(y)).data
    b = fresh(x, decoder_inputs(y)).data
    assert np.array_equal(a, b)


def test_no_temp_file_left(saved):
    _, _, path = saved
    assert [p.name for p in path.parent.iterdir()] == ["m.ckpt"]


def test_bad_magic(saved, tmp_path):
    _, _, path = saved
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOT-A-CKPT\n" + path.read_bytes()[len(MAGIC):])
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(bad)


def test_corrupted_header(saved, tmp_path):
    _, _, path = saved
    raw = path.read_bytes()
    start = raw.index(b"{")
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(raw[:start] + b"#" + raw[start + 1:])
    with pytest.raises(CheckpointError, match="header"):
        read_checkpoint(bad)


def test_truncated_body(saved, tmp_path):
    _, _, path = saved
    bad = tmp_path / "short.ckpt"
    bad.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(bad)


def test_version_mismatch(saved, tmp_path):
    _, _, path = saved
    raw = path.read_bytes()
    rest = raw[len(MAGIC):]
    nl = rest.index(b"\n")
    n = int(rest[:nl])
    header = json.loads(rest[nl + 1: nl + 1 + n])
    header["version"] = 99
    head = json.dumps(header, sort_keys=True).encode()
    bad = tmp_path / "v99.ckpt"
    bad.write_bytes(MAGIC + f"{len(head)}\n".encode() + head + rest[nl + 1 + n:])
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(bad)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "nope.ckpt")


def test_hash_mismatch_raises_unless_partial(saved):
    _, model, path = saved
    spec_a, arch_a = build("arch_a", seed=5)
    with pytest.raises(CheckpointError, match="spec hash"):
        load_checkpoint(path, arch_a, spec_hash=spec_a.spec_hash())
    before = arch_a.state_dict()
    header = load_checkpoint(path, arch_a, spec_hash=spec_a.spec_hash(), allow_partial=True)
    loaded = set(header["loaded"])
    src = model.state_dict()
    after = arch_a.state_dict()
    assert loaded
    for name in after:
        if name in loaded:
            assert np.array_equal(after[name], src[name]), name
        else:
            assert np.array_equal(after[name], before[name]), name
    assert loaded == {n for n in after if n in src and src[n].shape == after[n].shape}


def test_strict_load_of_other_architecture_is_checkpoint_error(saved):
    _, _, path = saved
    _, transformer = build("transformer")
    with pytest.raises(CheckpointError):
        load_checkpoint(path, transformer)
