import numpy as np
import pytest

from bevuncert.checkpoint import MAGIC, CheckpointError, load_into, read_checkpoint, save_checkpoint
from bevuncert.nn import ParamSet


def _params(seed=0, extra=False):
    rng = np.random.default_rng(seed)
    p = ParamSet()
    p.new("a.weight", rng.standard_normal((3, 4)))
    p.new("a.bias", rng.standard_normal((1, 4)))
    if extra:
        p.new("b.weight", rng.standard_normal((4, 2)))
    return p


def test_round_trip_is_bit_exact(tmp_path):
    p = _params()
    p["a.bias"].value[0, 0] = np.nextafter(1.0, 2.0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(p, path)
    q = _params(seed=1)
    load_into(q, path)
    for a, b in zip(p, q):
        assert a.value.tobytes() == b.value.tobytes()


def test_layout(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(_params(), path)
    blob = path.read_bytes()
    assert blob.startswith((MAGIC + "\n2\na.weight 3 4\na.bias 1 4\n").encode())
    assert len(blob) == len(MAGIC) + 1 + 2 + len("a.weight 3 4\na.bias 1 4\n") + 8 * 16
    names = [n for n, _ in read_checkpoint(path)]
    assert names == ["a.weight", "a.bias"]


def test_same_params_same_bytes(tmp_path):
    save_checkpoint(_params(), tmp_path / "a.ckpt")
    save_checkpoint(_params(), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_extension_enforced(tmp_path):
    with pytest.raises(CheckpointError, match=".ckpt"):
        save_checkpoint(_params(), tmp_path / "m.bin")


@pytest.mark.parametrize("mutate,match", [
    (lambda b: b"NOT-A-CKPT" + b[10:], "magic"),
    (lambda b: b[:-8], "ends inside"),
    (lambda b: b + b"\x00", "trailing"),
    (lambda b: b.replace(b"\n2\n", b"\nx\n", 1), "count"),
])
def test_corruption_detected(tmp_path, mutate, match):
    path = tmp_path / "m.ckpt"
    save_checkpoint(_params(), path)
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(CheckpointError, match=match):
        read_checkpoint(path)


def test_config_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(_params(extra=True), path)
    with pytest.raises(CheckpointError, match="unexpected"):
        load_into(_params(), path)
    save_checkpoint(_params(), path)
    with pytest.raises(CheckpointError, match="missing"):
        load_into(_params(extra=True), path)
    other = ParamSet()
    other.new("a.weight", np.zeros((4, 3)))
    other.new("a.bias", np.zeros((1, 4)))
    with pytest.raises(CheckpointError, match="shape"):
        load_into(other, path)
