import hashlib
import json
import struct

import numpy as np
import pytest

from iaa import tensor as T
from iaa.adaptor import Model, mm_forward
from iaa.backbone import build_backbone, text_forward
from iaa.checkpoint import (
    MAGIC,
    CheckpointError,
    CheckpointFormatError,
    HashMismatchError,
    TruncatedCheckpointError,
    VersionMismatchError,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)

from conftest import TINY, random_image, tiny_model


def _perturb(model, rng):
    for _, t in model.named_parameters():
        t.data = t.data + rng.normal(0, 0.01, t.shape).astype(t.dtype)


@pytest.mark.parametrize("variant,dup", [("A", True), ("B", False), ("C", True)])
def test_round_trip_is_bit_exact(tmp_path, rng, variant, dup):
    m = tiny_model(variant, duplicate_io=dup)
    _perturb(m, rng)
    m.meta = {"stage": "Stage2-PT", "seed": 4}
    path = save_checkpoint(m, tmp_path / "m.ckpt")
    back = load_checkpoint(path)
    a, b = dict(m.named_parameters()), dict(back.named_parameters())
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].data.dtype == b[k].data.dtype
        np.testing.assert_array_equal(a[k].data, b[k].data)
    assert back.meta == {"stage": "Stage2-PT", "seed": 4}
    assert back.adaptor.metadata() == m.adaptor.metadata()
    assert all(not t.trainable for _, t in back.named_parameters())
    img, toks = random_image(rng), rng.integers(0, 512, 6)
    with T.no_grad():
        np.testing.assert_array_equal(mm_forward(back.backbone, back.adaptor, img, toks).data, mm_forward(m.backbone, m.adaptor, img, toks).data)


def test_backbone_only_and_float64(tmp_path, rng):
    m = Model(build_backbone(TINY)).astype(np.float64)
    path = save_checkpoint(m, tmp_path / "bb.ckpt", {"kind": "pretrained"})
    back = load_checkpoint(path)
    assert back.adaptor is None and back.meta == {"kind": "pretrained"}
    assert back.backbone.embed.dtype == np.float64
    assert back.backbone.sha256() == m.backbone.sha256()
    toks = rng.integers(0, 512, 5)
    with T.no_grad():
        np.testing.assert_array_equal(text_forward(back.backbone, toks).data, text_forward(m.backbone, toks).data)
    assert not list(tmp_path.glob("*.tmp"))


def _independent_parse(buf):
    """Walk the byte layout with struct alone."""
    assert buf[:8] == MAGIC
    version, hlen = struct.unpack_from("<II", buf, 8)
    pos = 16
    header = buf[pos : pos + hlen]
    pos += hlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    names = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        names.append(buf[pos : pos + nlen].decode())
        pos += nlen
        tag, rank = struct.unpack_from("<BB", buf, pos)
        pos += 2
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        pos += int(np.prod(dims)) * {1: 4, 2: 8}[tag]
    assert buf[pos:] == hashlib.sha256(header).digest()
    return version, json.loads(header), names


def test_byte_layout(tmp_path):
    m = tiny_model("B")
    path = save_checkpoint(m, tmp_path / "m.ckpt")
    version, header, names = _independent_parse(path.read_bytes())
    assert version == 1
    assert header["backbone"]["d_model"] == TINY.d_model
    assert header["adaptor"]["variant"] == "B"
    assert names == [n for n, _ in m.named_parameters()]
    # Canonical JSON: sorted keys, no whitespace.
    raw = path.read_bytes()
    hlen = struct.unpack_from("<I", raw, 12)[0]
    assert raw[16 : 16 + hlen] == json.dumps(header, sort_keys=True, separators=(",", ":")).encode()


@pytest.fixture
def saved(tmp_path):
    path = save_checkpoint(tiny_model("C"), tmp_path / "m.ckpt")
    return path, path.read_bytes()


@pytest.mark.parametrize("frac", [0.0, 0.001, 0.01, 0.3, 0.7, 0.999])
def test_truncation_raises(saved, frac):
    path, raw = saved
    path.write_bytes(raw[: int(len(raw) * frac)])
    with pytest.raises(CheckpointError):
        read_checkpoint(path)
    if frac > 0.01:
        with pytest.raises(TruncatedCheckpointError):
            read_checkpoint(path)


def test_one_byte_short_is_truncation(saved):
    path, raw = saved
    path.write_bytes(raw[:-1])
    with pytest.raises(TruncatedCheckpointError):
        load_checkpoint(path)


def test_header_edit_detected(saved):
    path, raw = saved
    i = raw.index(b'"variant":"C"') + len(b'"variant":"')
    path.write_bytes(raw[:i] + b"B" + raw[i + 1 :])
    with pytest.raises(HashMismatchError):
        read_checkpoint(path)


def test_version_mismatch(saved):
    path, raw = saved
    path.write_bytes(raw[:8] + struct.pack("<I", 2) + raw[12:])
    with pytest.raises(VersionMismatchError):
        read_checkpoint(path)


def test_bad_magic_and_trailing_bytes(saved):
    path, raw = saved
    path.write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointFormatError):
        read_checkpoint(path)
    path.write_bytes(raw + b"\0")
    with pytest.raises(CheckpointFormatError):
        read_checkpoint(path)


def test_missing_file_is_os_error(tmp_path):
    with pytest.raises(OSError):
        load_checkpoint(tmp_path / "nope.ckpt")
