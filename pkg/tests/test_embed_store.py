import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from unic.embed_store import (EmbeddingSet, FormatError, MixtureParams,
                              generate_gaussian_mixture, make_gcd_split, read_csv_embeddings,
                              read_embeddings, read_split, write_embeddings, write_split)
from unic.knn import compute_neighborhoods
from unic.neighbors import positive_purity


def test_round_trip_small(tmp_path):
    es = EmbeddingSet(np.array([[1, 2], [3, 4], [5, 6]]), np.array([0, 1, 1]))
    write_embeddings(es, tmp_path / "a.emb")
    back = read_embeddings(tmp_path / "a.emb")
    assert back == es
    assert back.labels.tolist() == [0, 1, 1]


def test_file_size_single_entry(tmp_path):
    write_embeddings(EmbeddingSet(np.array([[0.0]])), tmp_path / "a.emb")
    # magic + n + dim + label flag + one float32
    assert (tmp_path / "a.emb").stat().st_size == 8 + 4 + 4 + 1 + 4


def test_header_bytes(tmp_path):
    write_embeddings(EmbeddingSet(np.array([[1.5, -2.0]]), np.array([7])), tmp_path / "a.emb")
    raw = (tmp_path / "a.emb").read_bytes()
    assert raw[:8] == b"UNICEMB1"
    assert raw[8:17] == bytes([1, 0, 0, 0, 2, 0, 0, 0, 1])
    assert np.frombuffer(raw[17:25], "<f4").tolist() == [1.5, -2.0]
    assert np.frombuffer(raw[25:], "<i4").tolist() == [7]


def test_nan_rejected():
    with pytest.raises(ValueError, match="non-finite data"):
        EmbeddingSet(np.array([[1.0, np.nan]]))


@pytest.mark.parametrize("bad", [[], [[]]])
def test_empty_rejected(bad):
    with pytest.raises(ValueError):
        EmbeddingSet(np.array(bad))


def test_label_length_mismatch():
    with pytest.raises(ValueError):
        EmbeddingSet(np.zeros((3, 2)), np.array([0, 1]))


def test_version_rejected(tmp_path):
    write_embeddings(EmbeddingSet(np.ones((2, 2))), tmp_path / "a.emb")
    raw = bytearray((tmp_path / "a.emb").read_bytes())
    raw[7:8] = b"2"
    (tmp_path / "b.emb").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="unsupported format version"):
        read_embeddings(tmp_path / "b.emb")


def test_bad_magic(tmp_path):
    (tmp_path / "x.emb").write_bytes(b"NOTMAGIC" + bytes(9))
    with pytest.raises(FormatError, match="bad magic"):
        read_embeddings(tmp_path / "x.emb")


def test_truncated(tmp_path):
    write_embeddings(EmbeddingSet(np.ones((4, 3)), np.arange(4)), tmp_path / "a.emb")
    raw = (tmp_path / "a.emb").read_bytes()
    (tmp_path / "t.emb").write_bytes(raw[:30])
    with pytest.raises(FormatError, match="truncated payload"):
        read_embeddings(tmp_path / "t.emb")
    (tmp_path / "l.emb").write_bytes(raw[:-2])
    with pytest.raises(FormatError, match="label block length mismatch"):
        read_embeddings(tmp_path / "l.emb")


@settings(max_examples=40, deadline=None)
@given(
    data=hnp.arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 5)),
                    elements=st.floats(-1e6, 1e6, width=32)),
    with_labels=st.booleans(),
    seed=st.integers(0, 1000),
)
def test_round_trip_property(tmp_path_factory, data, with_labels, seed):
    labels = None
    if with_labels:
        labels = np.random.default_rng(seed).integers(-1, 5, size=data.shape[0])
    es = EmbeddingSet(data, labels)
    path = tmp_path_factory.mktemp("rt") / "p.emb"
    write_embeddings(es, path)
    back = read_embeddings(path)
    assert back.data.tobytes() == es.data.tobytes()
    assert back == es


def test_csv_import(tmp_path):
    (tmp_path / "a.csv").write_text("1,2,0\n3,4,1\n5,6,1\n")
    es = read_csv_embeddings(tmp_path / "a.csv", with_labels=True)
    assert es.data.tolist() == [[1, 2], [3, 4], [5, 6]]
    assert es.labels.tolist() == [0, 1, 1]
    assert read_csv_embeddings(tmp_path / "a.csv").dim == 3


def test_csv_row_limit(tmp_path):
    (tmp_path / "big.csv").write_text("1.0\n" * 10_000)
    with pytest.raises(ValueError, match="fewer than"):
        read_csv_embeddings(tmp_path / "big.csv")


class TestGenerator:
    def test_separable_pair(self):
        es, _ = generate_gaussian_mixture(MixtureParams(k=2, dim=2, n=10, separation=100, seed=7))
        nb = compute_neighborhoods(es, 3, 4)
        assert positive_purity(nb.positives, es.labels).mean() == 1.0
        # linear separability: the two class means project apart with no overlap
        mu = [es.data[es.labels == c].mean(0) for c in (0, 1)]
        proj = es.data @ (mu[1] - mu[0])
        assert proj[es.labels == 0].max() < proj[es.labels == 1].min()

    def test_single_class(self):
        es, _ = generate_gaussian_mixture(MixtureParams(k=1, dim=3, n=20, seed=1))
        assert (es.labels == 0).all()

    def test_seed_sensitivity(self):
        a, _ = generate_gaussian_mixture(MixtureParams(k=3, dim=4, n=30, seed=7))
        b, _ = generate_gaussian_mixture(MixtureParams(k=3, dim=4, n=30, seed=8))
        assert not np.array_equal(a.data, b.data)

    def test_determinism(self):
        p = MixtureParams(k=4, dim=5, n=41, seed=3, labeled_fraction=0.5, old_class_fraction=0.5)
        (a, sa), (b, sb) = generate_gaussian_mixture(p), generate_gaussian_mixture(p)
        assert a.data.tobytes() == b.data.tobytes() and a == b and sa == sb

    def test_balanced_sizes(self):
        es, _ = generate_gaussian_mixture(MixtureParams(k=3, dim=2, n=11, seed=0))
        assert sorted(np.bincount(es.labels).tolist()) == [3, 4, 4]

    def test_mean_separation(self):
        p = MixtureParams(k=6, dim=8, n=60000, separation=5, seed=2)
        es, _ = generate_gaussian_mixture(p)
        means = np.array([es.data[es.labels == c].mean(0) for c in range(6)])
        d = np.sqrt(((means[:, None] - means[None]) ** 2).sum(-1))
        # empirical means carry O(1/sqrt(10000)) noise
        assert d[np.triu_indices(6, 1)].min() > 5 - 0.1

    def test_n_less_than_k(self):
        with pytest.raises(ValueError):
            MixtureParams(k=5, dim=2, n=4)

    def test_separation_monotone_purity(self):
        purities = []
        for sep in (1, 4, 16):
            es, _ = generate_gaussian_mixture(MixtureParams(k=5, dim=8, n=300, separation=sep, seed=4))
            nb = compute_neighborhoods(es, 10, 150)
            purities.append(positive_purity(nb.positives, es.labels).mean())
        assert purities[0] <= purities[1] <= purities[2]


class TestSplit:
    def _set(self, k=10, per=9):
        return EmbeddingSet(np.zeros((k * per, 1)), np.repeat(np.arange(k), per))

    def test_half_old_half_labeled(self):
        es = self._set(10, 9)
        split = make_gcd_split(es, 0.5, 0.5, seed=0)
        assert len(split.old_classes) == 5 and len(split.new_classes) == 5
        for c in split.old_classes:
            assert split.labeled_mask[es.labels == c].sum() == 4  # floor(0.5 * 9)
        assert not split.labeled_mask[np.isin(es.labels, list(split.new_classes))].any()
        split.validate(es.labels)

    def test_no_labels_means_clustering(self):
        split = make_gcd_split(self._set(), 0.5, 0.0, seed=0)
        assert not split.labeled_mask.any()

    def test_fully_supervised(self):
        es = self._set()
        split = make_gcd_split(es, 1.0, 1.0, seed=0)
        assert split.labeled_mask.all() and not split.new_classes

    def test_deterministic(self):
        es = self._set()
        assert make_gcd_split(es, 0.5, 0.5, 3) == make_gcd_split(es, 0.5, 0.5, 3)
        assert make_gcd_split(es, 0.5, 0.5, 3) != make_gcd_split(es, 0.5, 0.5, 4)

    def test_requires_labels(self):
        with pytest.raises(ValueError, match="missing labels"):
            make_gcd_split(EmbeddingSet(np.zeros((3, 1))), 0.5, 0.5, 0)

    @settings(max_examples=30, deadline=None)
    @given(old=st.floats(0, 1), lab=st.floats(0, 1), seed=st.integers(0, 99))
    def test_soundness(self, old, lab, seed):
        es = EmbeddingSet(np.zeros((60, 1)),
                          np.random.default_rng(seed).integers(0, 6, size=60))
        split = make_gcd_split(es, old, lab, seed)
        assert set(es.labels[split.labeled_mask].tolist()) <= split.old_classes

    def test_file_round_trip(self, tmp_path):
        split = make_gcd_split(self._set(), 0.5, 0.5, seed=1)
        write_split(split, tmp_path / "s.json")
        assert read_split(tmp_path / "s.json") == split
