import math
import struct
import zlib

import pytest
import torch

from stsc.codec import init_params
from stsc.storage import (COLUMNS, MAGIC, CheckpointError, CheckpointVersionError, MetricsRow, MetricsSchemaError,
                          checkpoint_bytes, load_checkpoint, read_metrics, save_checkpoint, write_metrics)

from .conftest import TINY


def random_params():
    g = torch.Generator().manual_seed(0)
    return {
        "a.weight": torch.randn(3, 4, generator=g),
        "b": torch.randn(5, generator=g, dtype=torch.float64),
        "scalar": torch.tensor(1.5),
        "idx": torch.arange(6, dtype=torch.int64).reshape(2, 3),
        "flags": torch.tensor([True, False]),
        "empty": torch.zeros(0, 4),
    }


def test_roundtrip_bit_exact(tmp_path):
    params = random_params()
    header = {"codec": TINY.to_dict(), "round": 7, "seed": 3}
    save_checkpoint(tmp_path / "p.ckpt", params, header)
    loaded, hdr = load_checkpoint(tmp_path / "p.ckpt")
    assert list(loaded) == list(params)
    for k in params:
        assert loaded[k].dtype == params[k].dtype
        assert loaded[k].shape == params[k].shape
        assert torch.equal(loaded[k], params[k])
    assert hdr["codec"] == TINY.to_dict()
    assert hdr["round"] == 7 and hdr["format_version"] == 1


def test_codec_params_roundtrip(tmp_path):
    params = init_params(TINY)
    save_checkpoint(tmp_path / "c.ckpt", params, {})
    loaded, _ = load_checkpoint(tmp_path / "c.ckpt")
    assert all(torch.equal(loaded[k], params[k]) for k in params)


def test_serialization_deterministic():
    p = random_params()
    assert checkpoint_bytes(p, {"x": 1}) == checkpoint_bytes(p, {"x": 1})


def test_layout_magic_and_crc():
    buf = checkpoint_bytes(random_params(), {})
    assert buf[:8] == MAGIC
    assert struct.unpack("<I", buf[8:12])[0] == 1
    assert struct.unpack("<I", buf[-4:])[0] == zlib.crc32(buf[:-4]) & 0xFFFFFFFF


def test_tampered_byte_detected(tmp_path):
    buf = bytearray(checkpoint_bytes(random_params(), {}))
    buf[len(buf) // 2] ^= 0x01
    path = tmp_path / "t.ckpt"
    path.write_bytes(bytes(buf))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


@pytest.mark.parametrize("cut", [1, 4, 50])
def test_truncation_detected(tmp_path, cut):
    buf = checkpoint_bytes(random_params(), {})
    path = tmp_path / "t.ckpt"
    path.write_bytes(buf[:-cut])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_unknown_version(tmp_path):
    buf = bytearray(checkpoint_bytes(random_params(), {}))
    buf[8:12] = struct.pack("<I", 99)
    path = tmp_path / "v.ckpt"
    path.write_bytes(bytes(buf))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\0" * 40)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_metrics_append_and_reread(tmp_path):
    path = tmp_path / "m.tsv"
    row = MetricsRow.from_mse("exp", "awgn", 12.0, 3, 0.01, 0.9, series="global", note="a\tb")
    write_metrics(path, [row])
    write_metrics(path, [row])
    lines = path.read_text().splitlines()
    assert lines[0].split("\t") == list(COLUMNS)
    assert len(lines) == 3 and lines[1] == lines[2]
    back = read_metrics(path)
    assert back == [row, row]
    assert back[0].psnr_db == pytest.approx(20.0, abs=1e-12)


def test_metrics_psnr_consistent_with_mse(tmp_path):
    path = tmp_path / "m.tsv"
    write_metrics(path, [MetricsRow.from_mse("e", "rician", s, 0, 10 ** (-s / 10 - 1)) for s in range(5)])
    for r in read_metrics(path):
        assert r.psnr_db == pytest.approx(-10 * math.log10(r.mse), abs=1e-9)


def test_ssim_column_may_be_empty(tmp_path):
    path = tmp_path / "m.tsv"
    write_metrics(path, [MetricsRow.from_mse("e", "awgn", 0, 1, 0.1)])
    assert read_metrics(path)[0].ssim is None


@pytest.mark.parametrize("bad", [
    MetricsRow("e", "awgn", 0.0, 0, 0.01, 25.0),
    MetricsRow("e", "awgn", math.nan, 0, 0.01, 20.0),
    MetricsRow("", "awgn", 0.0, 0, 0.01, 20.0),
    MetricsRow("e", "awgn", 0.0, 0, -1.0, 20.0),
])
def test_schema_violation_rejected(tmp_path, bad):
    path = tmp_path / "m.tsv"
    with pytest.raises(MetricsSchemaError):
        write_metrics(path, [bad])
    assert read_metrics(path) == []
