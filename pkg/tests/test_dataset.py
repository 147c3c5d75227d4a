import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from segblend.dataset import (
    DatasetError,
    DatasetManifest,
    SegSample,
    crop,
    crop_offset,
    load_sample,
    read_manifest,
    unique_categories,
    write_image,
    write_label,
    write_manifest,
)

from conftest import make_sample


def decode_indexed_png(path):
    """Minimal PNG reader for 8-bit, non-interlaced palette/grey images."""
    data = open(path, "rb").read()
    assert data[:8] == b"\x89PNG\r\n\x1a\n"
    pos, idat, width = 8, b"", None
    while pos < len(data):
        (length,) = struct.unpack(">I", data[pos : pos + 4])
        kind = data[pos + 4 : pos + 8]
        body = data[pos + 8 : pos + 8 + length]
        if kind == b"IHDR":
            width, height, depth, colour, _, _, interlace = struct.unpack(">IIBBBBB", body)
            assert depth == 8 and colour in (0, 3) and interlace == 0
        elif kind == b"IDAT":
            idat += body
        pos += 12 + length
    raw = zlib.decompress(idat)
    rows, prev, stride = [], bytearray(width), width + 1
    for r in range(height):
        ftype, line = raw[r * stride], bytearray(raw[r * stride + 1 : (r + 1) * stride])
        for i in range(width):
            a = line[i - 1] if i else 0
            b = prev[i]
            c = prev[i - 1] if i else 0
            if ftype == 1:
                line[i] = (line[i] + a) & 0xFF
            elif ftype == 2:
                line[i] = (line[i] + b) & 0xFF
            elif ftype == 3:
                line[i] = (line[i] + (a + b) // 2) & 0xFF
            elif ftype == 4:
                p = a + b - c
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                pred = a if pa <= pb and pa <= pc else (b if pb <= pc else c)
                line[i] = (line[i] + pred) & 0xFF
        rows.append(bytes(line))
        prev = line
    return np.frombuffer(b"".join(rows), dtype=np.uint8).reshape(height, width)


def write_pair(tmp_path, id, image, label, n_classes=21):
    write_image(tmp_path / f"{id}.jpg.png", image)
    write_label(tmp_path / f"{id}_lab.png", label)
    m = DatasetManifest(entries=[(id, f"{id}.jpg.png", f"{id}_lab.png")], n_classes=n_classes)
    write_manifest(m, tmp_path / "m.tsv")
    return read_manifest(tmp_path / "m.tsv")


def test_load_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (5, 7, 3)) / 255.0
    lab = rng.integers(0, 21, (5, 7)).astype(np.uint8)
    m = write_pair(tmp_path, "a", img, lab)
    s = load_sample(m, "a")
    assert s.image.shape == (5, 7, 3) and s.label.shape == (5, 7)
    np.testing.assert_array_equal(s.label, lab)
    np.testing.assert_allclose(s.image, img, atol=1e-12)
    assert s.image.min() >= 0 and s.image.max() <= 1


def test_load_rejects_out_of_range_label(tmp_path):
    lab = np.zeros((4, 4), np.uint8)
    lab[1, 1] = 200
    m = write_pair(tmp_path, "a", np.zeros((4, 4, 3)), lab)
    with pytest.raises(DatasetError, match="label value out of range"):
        load_sample(m, "a")


def test_load_dimension_mismatch(tmp_path):
    write_image(tmp_path / "i.png", np.zeros((4, 5, 3)))
    write_label(tmp_path / "l.png", np.zeros((4, 4), np.uint8))
    m = DatasetManifest(entries=[("a", "i.png", "l.png")], n_classes=21, root=tmp_path)
    with pytest.raises(DatasetError, match="dimension mismatch"):
        load_sample(m, "a")


def test_load_missing_file(tmp_path):
    m = DatasetManifest(entries=[("a", "nope.png", "nope2.png")], n_classes=21, root=tmp_path)
    with pytest.raises(FileNotFoundError):
        load_sample(m, "a")


def test_voc_indexed_label_matches_independent_decoder(tmp_path, rng):
    lab = rng.choice(np.array([0, 15, 255], np.uint8), size=(23, 31))
    m = write_pair(tmp_path, "voc", np.zeros((23, 31, 3)), lab)
    s = load_sample(m, "voc")
    oracle = decode_indexed_png(tmp_path / "voc_lab.png")
    assert set(np.unique(s.label)) == {0, 15, 255}
    np.testing.assert_array_equal(np.bincount(s.label.ravel(), minlength=256),
                                  np.bincount(oracle.ravel(), minlength=256))
    assert Image.open(tmp_path / "voc_lab.png").mode == "P"


def test_manifest_header_and_validation(tmp_path):
    (tmp_path / "m.tsv").write_text("#classes=5 background=0 ignore=255\nx\ta.png\tb.png\n")
    m = read_manifest(tmp_path / "m.tsv")
    assert (m.n_classes, m.background_index, m.ignore_index) == (5, 0, 255)
    assert m.ids == ["x"]
    (tmp_path / "bad.tsv").write_text("x\ta.png\tb.png\n")
    with pytest.raises(DatasetError, match="header"):
        read_manifest(tmp_path / "bad.tsv")
    with pytest.raises(DatasetError, match="unique"):
        DatasetManifest(entries=[("x", "a", "b"), ("x", "c", "d")], n_classes=3)
    with pytest.raises(DatasetError):
        DatasetManifest(n_classes=1)
    with pytest.raises(DatasetError):
        DatasetManifest(n_classes=3, background_index=3)


@pytest.mark.parametrize("values, expected", [
    ({0, 255, 7}, {7}),
    ({0, 255}, set()),
])
def test_unique_categories_rule(values, expected):
    lab = np.array(sorted(values), dtype=np.uint8).reshape(1, -1)
    assert unique_categories(lab) == expected


def test_unique_categories_brute_force():
    lab = np.array([[0, 3, 3], [12, 255, 0]], dtype=np.uint8)
    brute = {int(v) for row in lab for v in row if v not in (0, 255)}
    assert unique_categories(lab) == brute == {3, 12}


def test_center_crop_offset():
    rng = np.random.default_rng(0)
    s = make_sample("a", rng.integers(0, 21, (600, 600)), rng)
    assert crop_offset((600, 600), 513) == (43, 43)
    c = crop(s, 513, "center")
    assert c.shape == (513, 513)
    np.testing.assert_array_equal(c.label, s.label[43:556, 43:556])
    np.testing.assert_array_equal(c.image, s.image[43:556, 43:556])


@pytest.mark.parametrize("mode", ["center", "random"])
def test_crop_identity_at_size(mode):
    rng = np.random.default_rng(0)
    s = make_sample("a", rng.integers(0, 21, (513, 513)), rng)
    c = crop(s, 513, mode, rng)
    np.testing.assert_array_equal(c.image, s.image)
    np.testing.assert_array_equal(c.label, s.label)


def test_crop_pads_small_inputs():
    rng = np.random.default_rng(0)
    s = make_sample("a", rng.integers(0, 21, (100, 100)), rng)
    c = crop(s, 513, "random", rng)
    assert c.shape == (513, 513)
    assert int((c.label == 255).sum()) == 513 ** 2 - 100 ** 2
    assert float(c.image[100:, :].max()) == 0.0


def test_crop_rejects_zero_size():
    s = make_sample("a", np.zeros((4, 4)))
    with pytest.raises(DatasetError):
        crop(s, 0)


def test_random_crop_deterministic_given_seed():
    s = make_sample("a", np.random.default_rng(0).integers(0, 5, (40, 50)))
    c1 = crop(s, 17, "random", np.random.default_rng(9))
    c2 = crop(s, 17, "random", np.random.default_rng(9))
    np.testing.assert_array_equal(c1.label, c2.label)


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 30), w=st.integers(1, 30), size=st.integers(1, 40),
       seed=st.integers(0, 2**16), n=st.integers(2, 30))
def test_crop_preserves_label_invariant(h, w, size, seed, n):
    rng = np.random.default_rng(seed)
    lab = rng.integers(0, n, (h, w)).astype(np.uint8)
    s = SegSample("x", rng.random((h, w, 3)), lab)
    c = crop(s, size, "random", rng)
    assert c.shape == (size, size) and c.image.shape == (size, size, 3)
    assert np.all((c.label < n) | (c.label == 255))
    assert unique_categories(c.label) <= set(range(1, n))


@settings(max_examples=30, deadline=None)
@given(h=st.integers(1, 20), w=st.integers(1, 20), extra=st.integers(0, 10))
def test_center_crop_idempotent_when_large(h, w, extra):
    rng = np.random.default_rng(h * 100 + w)
    s = make_sample("x", rng.integers(0, 4, (h, w)), rng)
    size = max(h, w) + extra
    once = crop(s, size, "center")
    twice = crop(once, size, "center")
    np.testing.assert_array_equal(once.label, twice.label)
    np.testing.assert_array_equal(once.image, twice.image)
