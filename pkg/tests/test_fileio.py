import json

import numpy as np
import pytest

from accar.data import Pair, PairSource, SynthDataSpec, read_dataset, read_manifest, sample_pair, write_dataset
from accar.fileio import (FormatError, decode_table, encode_table, load_array, read_tensors, save_array,
                          write_pgm, write_tensors)


def test_roundtrip(tmp_path):
    entries = {"w": np.random.default_rng(0).normal(size=(3, 2, 4)), "seg": np.arange(6).reshape(2, 3),
               "scalar": np.float64(2.5), "meta": {"a": 1, "b": [1, 2]}}
    write_tensors(tmp_path / "t.acct", entries)
    back = read_tensors(tmp_path / "t.acct")
    np.testing.assert_array_equal(back["w"], entries["w"])
    assert back["seg"].dtype == np.int64
    np.testing.assert_array_equal(back["seg"], entries["seg"])
    assert back["scalar"] == 2.5 and back["scalar"].shape == ()
    assert back["meta"] == {"a": 1, "b": [1, 2]}
    assert list(back) == list(entries)


def test_bit_exact_floats():
    x = np.array([np.pi, -0.0, 1e-310, np.inf])
    y = decode_table(encode_table({"x": x}))["x"]
    assert y.tobytes() == x.tobytes()


def test_deterministic_encoding():
    e = {"a": np.ones(3), "m": {"z": 1, "a": 2}}
    assert encode_table(e) == encode_table(dict(e))


def test_truncated():
    blob = encode_table({"a": np.ones(10)})
    with pytest.raises(FormatError, match="checksum"):
        decode_table(blob[:-9])


def test_bit_flip():
    blob = bytearray(encode_table({"a": np.ones(10)}))
    blob[30] ^= 0x01
    with pytest.raises(FormatError):
        decode_table(bytes(blob))


def test_bad_magic():
    with pytest.raises(FormatError):
        decode_table(b"NOPE" + bytes(20))


def test_unknown_version():
    import struct
    import zlib
    body = b"ACCT" + struct.pack("<II", 99, 0)
    with pytest.raises(FormatError, match="version"):
        decode_table(body + struct.pack("<I", zlib.crc32(body)))


def test_single_array(tmp_path):
    arr = np.random.default_rng(1).random((5, 5))
    save_array(tmp_path / "a.acct", arr)
    np.testing.assert_array_equal(load_array(tmp_path / "a.acct"), arr)
    write_tensors(tmp_path / "b.acct", {"other": arr})
    with pytest.raises(FormatError):
        load_array(tmp_path / "b.acct")


def test_pgm(tmp_path):
    write_pgm(tmp_path / "x.pgm", np.array([[0.0, 1.0], [0.5, 2.0]]))
    raw = (tmp_path / "x.pgm").read_bytes()
    assert raw.startswith(b"P5\n2 2\n255\n")
    assert list(raw[-4:]) == [0, 255, 128, 255]


class TestDataset:
    def test_sample_pair_deterministic(self):
        spec = SynthDataSpec(seed=3)
        a, b = sample_pair(spec, 2), sample_pair(spec, 2)
        np.testing.assert_array_equal(a.moving, b.moving)
        np.testing.assert_array_equal(a.true_field, b.true_field)
        assert a.meta == b.meta

    def test_default_amplitude_is_quarter_spacing(self):
        meta = sample_pair(SynthDataSpec(mesh_spacings=(16,)), 0).meta
        assert meta["mesh_spacing"] == 16 and meta["amplitude"] == 4.0

    def test_pool_repeats_pairs(self):
        spec = SynthDataSpec(pool_size=2)
        np.testing.assert_array_equal(sample_pair(spec, 0).moving, sample_pair(spec, 4).moving)
        assert not np.array_equal(sample_pair(spec, 0).moving, sample_pair(spec, 1).moving)

    def test_noise_variance_is_exact(self):
        spec = SynthDataSpec(noise_std=0.2)
        noisy = sample_pair(spec, 0)
        clean = sample_pair(SynthDataSpec(), 0)
        np.testing.assert_allclose((noisy.fixed - clean.fixed) ** 2, noisy.noise_var, atol=1e-15)
        assert noisy.noise_var.max() == pytest.approx(0.04) and noisy.noise_var.min() == 0.0

    def test_spec_roundtrip(self):
        spec = SynthDataSpec(mesh_spacings=(8, 32), noise_std=0.1, pool_size=3, seed=9)
        assert SynthDataSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec

    def test_write_read(self, tmp_path):
        spec = SynthDataSpec(seed=1, noise_std=0.1)
        write_dataset(tmp_path, spec, 3)
        manifest = read_manifest(tmp_path)
        assert len(manifest["pairs"]) == 3
        pairs = read_dataset(tmp_path)
        ref = sample_pair(spec, 1)
        np.testing.assert_array_equal(pairs[1].fixed, ref.fixed)
        np.testing.assert_array_equal(pairs[1].moving_seg, ref.moving_seg)
        np.testing.assert_array_equal(pairs[1].noise_var, ref.noise_var)
        source = PairSource(str(tmp_path))
        np.testing.assert_array_equal(source.get(4).moving, pairs[1].moving)

    def test_rewrite_is_byte_identical(self, tmp_path):
        spec = SynthDataSpec(seed=2)
        write_dataset(tmp_path / "a", spec, 2)
        write_dataset(tmp_path / "b", spec, 2)
        for name in ("manifest.json", "pair_0001/moving.acct", "pair_0001/true_field.acct"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_bad_version(self, tmp_path):
        write_dataset(tmp_path, SynthDataSpec(), 1)
        m = json.loads((tmp_path / "manifest.json").read_text())
        m["format_version"] = 999
        (tmp_path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(ValueError):
            read_dataset(tmp_path)
