import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from emma.checkpoint import Checkpoint, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from emma.config import RunConfig
from emma.encoders import EncoderStack
from emma.errors import DigestError, FormatError
from emma.pipeline import build_model, model_checkpoint


def sample_ckpt():
    rng = np.random.default_rng(0)
    return Checkpoint(
        "seed = 0\n",
        {"b.w": rng.standard_normal((3, 4)).astype(np.float32), "a.x": np.arange(5, dtype=np.int64), "c": np.ones(2)},
    )


def test_round_trip_bytes(tmp_path):
    ck = sample_ckpt()
    d1 = save_checkpoint(ck, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back == ck
    assert save_checkpoint(back, tmp_path / "b.ckpt") == d1
    assert back.tensors["b.w"].dtype == np.float32


@settings(max_examples=30, deadline=None)
@given(
    st.dictionaries(
        st.text("abcdefgh.", min_size=1, max_size=8),
        arrays(st.sampled_from([np.float32, np.float64, np.int64]), array_shapes(min_dims=0, max_dims=3, max_side=4)),
        max_size=4,
    ),
    st.text(max_size=30),
)
def test_round_trip_property(tensors, text):
    ck = Checkpoint(text, tensors)
    blob = to_bytes(ck)
    back = from_bytes(blob)
    assert to_bytes(back) == blob
    for k, v in tensors.items():
        assert back.tensors[k].tobytes() == np.ascontiguousarray(v).astype(v.dtype.newbyteorder("<")).tobytes()


def test_flipped_payload_byte():
    blob = bytearray(to_bytes(sample_ckpt()))
    blob[-40] ^= 0x10
    with pytest.raises(DigestError):
        from_bytes(bytes(blob))


def test_bad_magic():
    blob = bytearray(to_bytes(sample_ckpt()))
    blob[3] = ord("X")
    with pytest.raises(FormatError, match="magic"):
        from_bytes(bytes(blob))


def test_unknown_version():
    blob = bytearray(to_bytes(sample_ckpt()))
    blob[8] = 7
    with pytest.raises(FormatError, match="version"):
        from_bytes(bytes(blob))


def test_truncated():
    blob = to_bytes(sample_ckpt())
    with pytest.raises(FormatError, match="truncated") as exc:
        from_bytes(blob[:60] + blob[-32:])
    assert exc.value.offset is not None


def test_desk_model_checkpoint_is_small():
    cfg = RunConfig()
    stack = EncoderStack.init(cfg.encoder(), 0)
    stack.freeze()
    blob = to_bytes(model_checkpoint(cfg, build_model(cfg, stack)))
    assert len(blob) < 1 << 20
