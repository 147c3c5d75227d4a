import numpy as np

from segblend import synth
from segblend.cooccur import compute_cooccurrence, cooccurrence_from_labels
from segblend.dataset import load_all, read_label, read_manifest, unique_categories


def test_generate_deterministic_and_valid():
    a = synth.generate(30, seed=4)
    b = synth.generate(30, seed=4)
    for x, y in zip(a, b):
        assert np.array_equal(x.sample.image, y.sample.image)
    for it in a:
        s = it.sample
        assert s.image.shape == (64, 64, 3) and s.label.shape == (64, 64)
        assert 0 <= s.image.min() and s.image.max() <= 1
        assert unique_categories(s.label) <= {1, 2, 3}
        # an instance id covers a single class
        for k in np.unique(it.instances[it.instances > 0]):
            assert len(np.unique(s.label[it.instances == k])) == 1
        assert ((it.instances > 0) == (s.label > 0)).all()


def test_instances_numbered_consecutively():
    for it in synth.generate(40, seed=1):
        ids = sorted(int(v) for v in np.unique(it.instances) if v)
        assert ids == list(range(1, len(ids) + 1))


def test_circles_and_rectangles_co_occur_most():
    labels = [it.sample.label for it in synth.generate(300, seed=0)]
    c = cooccurrence_from_labels(labels, synth.N_CLASSES).counts
    assert c[1, 2] > c[1, 3] and c[1, 2] > c[2, 3]


def test_write_dataset_round_trip(tmp_path):
    items = synth.generate(5, seed=2, size=24)
    path = synth.write_dataset(items, tmp_path)
    m = read_manifest(path)
    assert m.n_classes == 4 and len(m.ids) == 5
    samples = load_all(m)
    for it, s in zip(items, samples):
        assert np.array_equal(s.label, it.sample.label)
        assert np.abs(s.image - it.sample.image).max() <= 0.5 / 255 + 1e-12
        assert np.array_equal(read_label(tmp_path / "instances" / f"{s.id}.png"), it.instances)
    assert compute_cooccurrence(m).n == 4


def test_occlusion_split():
    samples = [it.sample for it in synth.generate(10, seed=0)]
    occ = synth.occlusion_test_split(samples, 0.7, seed=3)
    assert len(occ) == 10
    for s, o in zip(samples, occ):
        dom, other = o.id.split("+")
        assert dom == s.id and other != s.id
        partner = next(p for p in samples if p.id == other)
        np.testing.assert_allclose(o.image, 0.7 * s.image + 0.3 * partner.image, atol=1e-12)
        assert np.array_equal(o.label, s.label)
