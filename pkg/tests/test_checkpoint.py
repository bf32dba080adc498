import numpy as np
import pytest

from lfrclab.checkpoint import (MAGIC, checkpoint_from_model, from_bytes, load_checkpoint, model_from_checkpoint,
                                save_checkpoint, to_bytes)
from lfrclab.errors import FormatError, IncompatibleCheckpointError
from lfrclab.models import forward, init_model, mini_resnet_spec, mlp_spec


def make_ckpt(spec=None):
    model = init_model(spec or mini_resnet_spec((1, 6, 6), 3, channels=(2, 3)), seed=4)
    return model, checkpoint_from_model(model, 2, "best", 0.5, "ab" * 32, 4)


def test_round_trip_is_bit_exact(tmp_path):
    model, ckpt = make_ckpt()
    path = save_checkpoint(ckpt, tmp_path / "m.ckpt")
    back = load_checkpoint(path)
    for name, value in ckpt.parameters.items():
        assert back.parameters[name].tobytes() == value.astype(np.float64).tobytes()
    restored = model_from_checkpoint(back)
    x = np.random.default_rng(0).random((3, 1, 6, 6)).astype(np.float32)
    assert forward(restored, x).data.tobytes() == forward(model, x).data.tobytes()
    assert (back.epoch, back.kind, back.metric, back.seed) == (2, "best", 0.5, 4)


def test_serialization_is_deterministic():
    _, ckpt = make_ckpt()
    assert to_bytes(ckpt) == to_bytes(ckpt)
    assert to_bytes(ckpt).startswith(MAGIC)


@pytest.mark.parametrize("cut", [3, 12, 40, -40, -1])
def test_truncation_is_a_format_error(cut):
    _, ckpt = make_ckpt()
    raw = to_bytes(ckpt)
    with pytest.raises(FormatError):
        from_bytes(raw[:cut])


def test_corruption_is_detected():
    _, ckpt = make_ckpt()
    raw = bytearray(to_bytes(ckpt))
    raw[-50] ^= 0xFF
    with pytest.raises(FormatError, match="digest"):
        from_bytes(bytes(raw))


def test_bad_magic():
    _, ckpt = make_ckpt()
    with pytest.raises(FormatError, match="magic"):
        from_bytes(b"NOTACKPT" + to_bytes(ckpt)[8:])


def test_version_mismatch():
    _, ckpt = make_ckpt()
    raw = bytearray(to_bytes(ckpt))
    raw[8] = 99
    with pytest.raises(IncompatibleCheckpointError, match="version"):
        from_bytes(bytes(raw))


def test_hash_mismatch():
    _, ckpt = make_ckpt()
    with pytest.raises(IncompatibleCheckpointError):
        from_bytes(to_bytes(ckpt), expected_hash="cd" * 32)
    assert from_bytes(to_bytes(ckpt), expected_hash="ab" * 32).config_hash == "ab" * 32


def test_mismatched_spec_names_the_parameter():
    _, ckpt = make_ckpt()
    other = mini_resnet_spec((1, 6, 6), 3, channels=(2, 5))
    with pytest.raises(IncompatibleCheckpointError, match="block2"):
        from_bytes(to_bytes(ckpt), spec=other)
    with pytest.raises(IncompatibleCheckpointError):
        model_from_checkpoint(ckpt, mlp_spec([36, 4, 3]))
