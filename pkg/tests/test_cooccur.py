import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segblend.cooccur import (
    CooccurrenceMatrix,
    compute_cooccurrence,
    cooccurrence_from_labels,
    load_matrix,
    pair_similarity,
    save_matrix,
)
from segblend.dataset import DatasetError, in_memory_manifest

from conftest import label_with, make_sample


def brute_force_counts(labels, n, background=0, ignore=255):
    counts = np.zeros((n, n), dtype=np.int64)
    for lab in labels:
        present = {int(v) for v in lab.ravel()} - {background, ignore}
        for i in range(n):
            for j in range(n):
                if i in present and j in present:
                    counts[i, j] += 1
    return counts


def brute_force_pixel_weighted(labels, n, background=0, ignore=255):
    counts = np.zeros((n, n), dtype=np.int64)
    for lab in labels:
        present = {int(v) for v in lab.ravel()} - {background, ignore}
        for i in present:
            for j in present:
                counts[i, j] += sum(1 for v in lab.ravel() if v == i)
    return counts


@pytest.fixture
def three_image_matrix():
    labels = [label_with({1, 2}), label_with({1}), label_with({2, 3})]
    return cooccurrence_from_labels(labels, 4)


def test_three_image_example(three_image_matrix):
    c = three_image_matrix.counts
    assert c[1, 2] == 1 and c[2, 3] == 1 and c[1, 3] == 0
    assert c[1, 1] == 2 and c[2, 2] == 2
    assert c[0].sum() == 0 and c[:, 0].sum() == 0


def test_single_class_has_no_off_diagonal():
    m = cooccurrence_from_labels([label_with({5})], 8)
    off = m.counts - np.diag(np.diag(m.counts))
    assert not off.any() and m.counts[5, 5] == 1


def test_compute_from_manifest_matches_labels():
    samples = [make_sample(f"s{i}", label_with(c)) for i, c in enumerate([{1, 2}, {1}, {2, 3}])]
    manifest = in_memory_manifest(samples, 4)
    m = compute_cooccurrence(manifest, samples=samples)
    assert m == cooccurrence_from_labels([s.label for s in samples], 4)


def test_empty_manifest_rejected():
    with pytest.raises(DatasetError, match="empty dataset"):
        compute_cooccurrence(in_memory_manifest([], 4))


def test_ignore_and_background_excluded():
    lab = np.array([[0, 255, 2], [2, 0, 255]], np.uint8)
    m = cooccurrence_from_labels([lab], 4)
    assert m.counts.sum() == 1 and m.counts[2, 2] == 1


def test_pixel_weighted_literal_reading():
    lab = np.array([[1, 1, 1, 2]], np.uint8)
    m = cooccurrence_from_labels([lab, np.array([[2, 2]], np.uint8)], 3, mode="pixel-weighted")
    assert m.counts[1, 2] == 3 and m.counts[2, 1] == 1
    assert m.counts[2, 2] == 3 and m.counts[1, 1] == 3


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), n_images=st.integers(1, 20), n=st.integers(2, 8))
def test_matches_brute_force(seed, n_images, n):
    rng = np.random.default_rng(seed)
    labels = []
    for _ in range(n_images):
        h, w = rng.integers(1, 17, 2)
        lab = rng.integers(0, n, (h, w)).astype(np.uint8)
        lab[rng.random((h, w)) < 0.1] = 255
        labels.append(lab)
    m = cooccurrence_from_labels(labels, n)
    np.testing.assert_array_equal(m.counts, brute_force_counts(labels, n))
    np.testing.assert_array_equal(m.counts, m.counts.T)
    pw = cooccurrence_from_labels(labels, n, mode="pixel-weighted")
    np.testing.assert_array_equal(pw.counts, brute_force_pixel_weighted(labels, n))
    perm = rng.permutation(n_images)
    assert cooccurrence_from_labels([labels[i] for i in perm], n) == m


def test_pair_similarity_examples(three_image_matrix):
    counts = np.zeros((4, 4), np.int64)
    counts[2, 1] = 5
    assert pair_similarity({1}, {2}, CooccurrenceMatrix(counts)) == 5
    assert pair_similarity(set(), {1, 2}, three_image_matrix) == 0
    # counts[1][1] + counts[1][2] + counts[3][1] + counts[3][2]
    assert pair_similarity({1, 2}, {1, 3}, three_image_matrix) == 2 + 1 + 0 + 1


def test_pair_similarity_exhaustive(three_image_matrix):
    c = three_image_matrix.counts
    for k in itertools.combinations(range(1, 4), 2):
        for m in itertools.combinations(range(1, 4), 2):
            expected = sum(int(c[i][j]) for i in m for j in k)
            assert pair_similarity(set(k), set(m), three_image_matrix) == expected


def test_pair_similarity_rejects_bad_index(three_image_matrix):
    with pytest.raises(DatasetError):
        pair_similarity({7}, {1}, three_image_matrix)


def test_matrix_round_trip(tmp_path, three_image_matrix):
    save_matrix(three_image_matrix, tmp_path / "m.txt")
    assert load_matrix(tmp_path / "m.txt") == three_image_matrix
    assert (tmp_path / "m.txt").read_text().splitlines()[0] == "n=4 mode=image-count"


def test_matrix_round_trip_21(tmp_path):
    counts = np.random.default_rng(3).integers(0, 10**9, (21, 21))
    m = CooccurrenceMatrix(counts, "pixel-weighted")
    save_matrix(m, tmp_path / "m.txt")
    back = load_matrix(tmp_path / "m.txt")
    assert back.mode == "pixel-weighted"
    assert np.array_equal(back.counts, counts) and back.counts.size == 441


@pytest.mark.parametrize("text", [
    "n=2 mode=image-count\n1 -1\n0 1\n",
    "n=2 mode=image-count\n1 1\n",
    "n=2 mode=image-count\n1 1 1\n0 1\n",
    "n=2 mode=bogus\n1 1\n0 1\n",
    "rows\n",
    "n=2 mode=image-count\n1 x\n0 1\n",
])
def test_malformed_matrix_files(tmp_path, text):
    (tmp_path / "m.txt").write_text(text)
    with pytest.raises(DatasetError):
        load_matrix(tmp_path / "m.txt")


def test_top_pairs(three_image_matrix):
    assert three_image_matrix.top_pairs(5) == [(1, 2, 1), (2, 3, 1)]
