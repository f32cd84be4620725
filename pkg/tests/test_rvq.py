import itertools

import numpy as np
import pytest

from chorebot.errors import FormatError, InsufficientDataError
from chorebot.rvq import Codebook, fit


def exhaustive_optimum(X: np.ndarray, K: int) -> float:
    """Brute-force k-means optimum: try every assignment of points to K clusters."""
    n = X.shape[0]
    best = np.inf
    for assignment in itertools.product(range(K), repeat=n):
        inertia = 0.0
        for j in range(K):
            members = X[[i for i in range(n) if assignment[i] == j]]
            if members.shape[0]:
                inertia += float(np.sum((members - members.mean(axis=0)) ** 2))
        best = min(best, inertia)
    return best


def nested_clusters():
    """Two coarse clusters at +-10, each with +-0.5 sub-structure."""
    pts = []
    for coarse in (-10.0, 10.0):
        for fine in (-0.5, 0.5):
            for jitter in (0.0, 0.01, -0.01):
                pts.append([coarse + fine + jitter, coarse - fine - jitter])
    return np.array(pts)


class TestFit:
    def test_two_pair_means(self):
        X = np.array([[0.0, 0.0], [0.2, 0.0], [5.0, 5.0], [5.2, 5.0]])
        book = fit(X, K=2, L=1, seed=0)
        got = sorted(book.layers[0].tolist())
        expected = sorted([[0.1, 0.0], [5.1, 5.0]])
        np.testing.assert_allclose(got, expected, atol=1e-12)
        # brute-force check that those means are the global optimum
        assert book.inertia[0] == pytest.approx(exhaustive_optimum(X, 2), abs=1e-12)

    def test_k1_is_global_mean(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(20, 3))
        book = fit(X, K=1, L=1, seed=0)
        np.testing.assert_allclose(book.layers[0][0], X.mean(axis=0), atol=1e-12)

    def test_near_optimal_on_small_instances(self):
        rng = np.random.default_rng(11)
        for trial in range(20):
            n = int(rng.integers(3, 9))
            K = int(rng.integers(1, 4))
            if n < K:
                continue
            X = rng.normal(size=(n, 2))
            book = fit(X, K=K, L=1, iters=200, seed=trial)
            assert book.inertia[0] <= 1.05 * exhaustive_optimum(X, K) + 1e-12

    def test_deterministic_per_seed(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(60, 4))
        a = fit(X, K=5, L=3, seed=9)
        b = fit(X, K=5, L=3, seed=9)
        for ca, cb in zip(a.layers, b.layers):
            assert np.array_equal(ca, cb)
        c = fit(X, K=5, L=3, seed=10)
        assert any(not np.array_equal(x, y) for x, y in zip(a.layers, c.layers))

    def test_insufficient_vectors_rejected(self):
        with pytest.raises(InsufficientDataError):
            fit(np.zeros((3, 2)), K=4, L=1)

    def test_zero_data(self):
        X = np.zeros((10, 3))
        book = fit(X, K=2, L=2, seed=0)
        for C in book.layers:
            np.testing.assert_allclose(C, 0.0, atol=0)
        np.testing.assert_allclose(book.decode([0, 1]), 0.0, atol=0)


class TestEncodeDecode:
    def test_centroid_identity(self):
        rng = np.random.default_rng(3)
        X = rng.uniform(-1, 1, size=(40, 3)) + np.repeat(np.arange(4), 10)[:, None] * 8
        book = fit(X, K=4, L=1, seed=1)
        codes = book.encode(book.layers[0][3])
        assert codes == [3]
        np.testing.assert_allclose(book.decode(codes), book.layers[0][3], atol=0)

    def test_exhaustive_idempotence(self):
        book = fit(nested_clusters(), K=2, L=2, iters=200, seed=0)
        for codes in itertools.product(range(2), repeat=2):
            decoded = book.decode(list(codes))
            assert book.encode(decoded) == list(codes)

    def test_tie_breaks_to_lower_index(self):
        book = Codebook(layers=[np.array([[1.0], [-1.0]])], K=2, L=1, iters=0, seed=0)
        assert book.encode(np.array([0.0])) == [0]

    def test_single_layer_decode(self):
        book = Codebook(layers=[np.array([[1.0, 2.0], [3.0, 4.0]])], K=2, L=1,
                        iters=0, seed=0)
        np.testing.assert_array_equal(book.decode([1]), [3.0, 4.0])

    def test_dimension_mismatch_rejected(self):
        book = fit(np.random.default_rng(0).normal(size=(10, 3)), K=2, L=1)
        with pytest.raises(FormatError):
            book.encode(np.zeros(4))

    def test_code_out_of_range_rejected(self):
        book = fit(np.random.default_rng(0).normal(size=(10, 3)), K=2, L=1)
        with pytest.raises(IndexError):
            book.decode([5])

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(8)
        X = rng.normal(size=(30, 4))
        book = fit(X, K=3, L=2, seed=4)
        batch = book.encode_batch(X)
        for i in range(X.shape[0]):
            assert book.encode(X[i]) == batch[i].tolist()
        np.testing.assert_allclose(
            book.decode_batch(batch)[7], book.decode(batch[7]), atol=0
        )


class TestRefinement:
    def test_mean_error_non_increasing_in_layers(self):
        rng = np.random.default_rng(21)
        for trial in range(10):
            X = rng.normal(size=(50, 4)) * rng.uniform(0.5, 2.0)
            errs = []
            for L in (1, 2, 3):
                book = fit(X, K=3, L=L, seed=trial)
                err = float(np.mean(np.linalg.norm(X - book.reconstruct(X), axis=1)))
                errs.append(err)
            assert errs[1] <= errs[0] + 1e-12
            assert errs[2] <= errs[1] + 1e-12

    def test_extra_layer_never_hurts_training_vectors(self):
        rng = np.random.default_rng(22)
        X = rng.normal(size=(40, 3))
        book = fit(X, K=4, L=2, seed=0)
        one_layer = Codebook(layers=book.layers[:1], K=book.K, L=1,
                             iters=book.iters, seed=book.seed)
        full = np.linalg.norm(X - book.reconstruct(X), axis=1)
        coarse = np.linalg.norm(X - one_layer.reconstruct(X), axis=1)
        assert float(np.mean(full)) <= float(np.mean(coarse)) + 1e-12


def test_serialization_round_trip(tmp_path):
    rng = np.random.default_rng(30)
    book = fit(rng.normal(size=(40, 5)), K=4, L=2, seed=3)
    path = tmp_path / "book.rvq"
    book.save(path)
    back = Codebook.load(path)
    assert back.K == book.K and back.L == book.L and back.seed == book.seed
    for a, b in zip(book.layers, back.layers):
        assert np.array_equal(a, b)
    book.save(tmp_path / "book2.rvq")
    back.save(tmp_path / "book3.rvq")
    assert (tmp_path / "book2.rvq").read_bytes() == (tmp_path / "book3.rvq").read_bytes()
