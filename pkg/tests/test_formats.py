import numpy as np
import pytest

from scc_loc import formats
from scc_loc.errors import FormatError
from scc_loc.geo import DsmRaster
from scc_loc.retrieval import FeatureMap


@pytest.fixture
def sample_dsm():
    rng = np.random.default_rng(0)
    return DsmRaster(
        origin_x=12.5, origin_y=-3.0, cell_size=1.5,
        data=rng.normal(size=(9, 7)).astype(np.float32), nodata=-7777.0,
    )


@pytest.fixture
def sample_features():
    rng = np.random.default_rng(1)
    return FeatureMap(
        tokens=rng.normal(size=(5, 6, 8)).astype(np.float32),
        cls=rng.normal(size=8).astype(np.float32),
    )


def test_dsm_round_trip(tmp_path, sample_dsm):
    p = tmp_path / "a.sccd"
    formats.write_dsm(p, sample_dsm)
    back = formats.read_dsm(p)
    assert back.origin_x == sample_dsm.origin_x
    assert back.origin_y == sample_dsm.origin_y
    assert back.cell_size == sample_dsm.cell_size
    assert back.nodata == sample_dsm.nodata
    assert np.array_equal(back.data, sample_dsm.data)


def test_features_round_trip(tmp_path, sample_features):
    p = tmp_path / "a.sccf"
    formats.write_features(p, sample_features)
    back = formats.read_features(p)
    assert np.array_equal(back.tokens, sample_features.tokens)
    assert np.array_equal(back.cls, sample_features.cls)


def test_features_without_cls(tmp_path):
    fm = FeatureMap(tokens=np.ones((2, 3, 4), dtype=np.float32))
    p = tmp_path / "nocls.sccf"
    formats.write_features(p, fm)
    assert formats.read_features(p).cls is None


def test_matches_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    rec = rng.uniform(0, 100, size=(17, 5)).astype(np.float32)
    p = tmp_path / "a.sccm"
    formats.write_matches(p, rec)
    assert np.array_equal(formats.read_matches(p), rec)


def test_matches_count_zero(tmp_path):
    p = tmp_path / "z.sccm"
    formats.write_matches(p, np.zeros((0, 5)))
    assert formats.read_matches(p).shape == (0, 5)


def test_bad_magic_names_offset(tmp_path, sample_dsm):
    p = tmp_path / "bad.sccd"
    formats.write_dsm(p, sample_dsm)
    raw = bytearray(p.read_bytes())
    raw[:4] = b"XXXX"
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="byte 0"):
        formats.read_dsm(p)


def test_bad_version(tmp_path, sample_features):
    p = tmp_path / "v.sccf"
    formats.write_features(p, sample_features)
    raw = bytearray(p.read_bytes())
    raw[4] = 99
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        formats.read_features(p)


@pytest.mark.parametrize("cut", [2, 5, 9, 20, -10, -1])
def test_truncation_fuzz_all_formats(tmp_path, sample_dsm, sample_features, cut):
    """Truncated files are rejected, and the message carries a byte offset."""
    cases = []
    p1 = tmp_path / "t.sccd"
    formats.write_dsm(p1, sample_dsm)
    cases.append((p1, formats.read_dsm))
    p2 = tmp_path / "t.sccf"
    formats.write_features(p2, sample_features)
    cases.append((p2, formats.read_features))
    p3 = tmp_path / "t.sccm"
    formats.write_matches(p3, np.ones((4, 5), dtype=np.float32))
    cases.append((p3, formats.read_matches))

    for path, reader in cases:
        raw = path.read_bytes()
        n = cut if cut > 0 else len(raw) + cut
        if n >= len(raw):
            continue
        path.write_bytes(raw[:n])
        with pytest.raises(FormatError, match="byte"):
            reader(path)


def test_trailing_garbage_rejected(tmp_path):
    p = tmp_path / "g.sccm"
    formats.write_matches(p, np.ones((2, 5), dtype=np.float32))
    p.write_bytes(p.read_bytes() + b"\x00\x01")
    with pytest.raises(FormatError, match="trailing"):
        formats.read_matches(p)


def test_image_npy_round_trip(tmp_path):
    img = np.random.default_rng(3).uniform(0, 1, size=(20, 30)).astype(np.float32)
    p = tmp_path / "img.npy"
    formats.save_image(p, img)
    assert np.array_equal(formats.load_image(p), img)


def test_image_png_round_trip(tmp_path):
    img = np.linspace(0, 1, 600, dtype=np.float32).reshape(20, 30)
    p = tmp_path / "img.png"
    formats.save_image(p, img)
    back = formats.load_image(p)
    assert back.shape == (20, 30)
    assert np.abs(back - img).max() < 1.0 / 255.0 + 1e-6
