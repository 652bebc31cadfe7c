import numpy as np
import pytest

from lshmf.data import Triplets, compute_baselines
from lshmf.datasets import low_rank_matrix, random_sparse
from lshmf.factorization import (ModelParams, TrainConfig,
                                 TrainingDivergedError, init_params,
                                 learning_rate, objective_value, predict,
                                 rmse, sgd_update, split_neighbors,
                                 train_basic, train_full)
from lshmf.similarity import NeighborTable, SimilarityConfig, gsm_topk, random_topk

from conftest import make_ratings


def make_params(M, N, F, K, neighbors=None, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    return ModelParams(
        mu=float(rng.normal(3.0, 0.2)),
        b=rng.normal(0, 0.2, M), b_hat=rng.normal(0, 0.2, N),
        U=rng.uniform(0, scale, (M, F)), V=rng.uniform(0, scale, (N, F)),
        W=rng.normal(0, 0.1, (N, K)), C=rng.normal(0, 0.1, (N, K)),
        neighbors=neighbors)


def random_neighbors(N, K, seed):
    return random_topk(N, K, seed) if K > 0 else None


def fd_direction(params, ratings, i, j, mutate, h=1e-5):
    """Central finite difference of -(1/2) d(e^2)/d(theta) via the predictor."""
    r = ratings.rating(i, j)

    def sq(delta):
        p = params.copy()
        mutate(p, delta)
        return (r - predict(i, j, p, ratings)) ** 2

    return -0.5 * (sq(h) - sq(-h)) / (2 * h)


def analytic_directions(params, ratings, i, j):
    """Update directions extracted from one sgd_update step with unit rates."""
    p = params.copy()
    sgd_update(i, j, p, rates=(1.0,) * 6, regs=(0.0,) * 6, ratings=ratings)
    return {
        "b": p.b[i] - params.b[i],
        "b_hat": p.b_hat[j] - params.b_hat[j],
        "U": p.U[i] - params.U[i],
        "V": p.V[j] - params.V[j],
        "W": p.W[j] - params.W[j],
        "C": p.C[j] - params.C[j],
    }


class TestLearningRate:
    def test_t0_gives_alpha(self):
        assert learning_rate(0.04, 0.3, 0) == 0.04

    def test_published_values(self):
        assert learning_rate(0.04, 0.3, 1) == pytest.approx(0.030769230769230771, rel=1e-12)
        assert learning_rate(0.04, 0.3, 4) == pytest.approx(0.04 / 3.4, rel=1e-12)

    def test_strictly_decreasing(self):
        vals = [learning_rate(0.04, 0.3, t) for t in range(1001)]
        assert all(a > b for a, b in zip(vals, vals[1:]))


class TestInitParams:
    def test_zero_scale(self, random_ratings):
        cfg = TrainConfig(F=4, K=0, init_scale=0.0, seed=1)
        stats = random_ratings.baselines()
        p = init_params(random_ratings.M, random_ratings.N, 4, 0, None, stats, cfg)
        assert not p.U.any() and not p.V.any()

    def test_seed_reproducible(self, random_ratings):
        cfg = TrainConfig(F=4, K=0, seed=5)
        stats = random_ratings.baselines()
        p1 = init_params(random_ratings.M, random_ratings.N, 4, 0, None, stats, cfg)
        p2 = init_params(random_ratings.M, random_ratings.N, 4, 0, None, stats, cfg)
        assert np.array_equal(p1.U, p2.U) and np.array_equal(p1.V, p2.V)

    def test_default_scale_bounds_dot(self, random_ratings):
        cfg = TrainConfig(F=16, K=0, seed=2)
        stats = random_ratings.baselines()
        p = init_params(random_ratings.M, random_ratings.N, 16, 0, None, stats, cfg)
        dots = p.U @ p.V.T
        assert dots.min() >= 0.0 and dots.max() <= 1.0

    def test_biases_from_stats(self, random_ratings):
        cfg = TrainConfig(F=2, K=0, seed=0)
        stats = random_ratings.baselines()
        p = init_params(random_ratings.M, random_ratings.N, 2, 0, None, stats, cfg)
        assert p.mu == stats.mu
        np.testing.assert_array_equal(p.b, stats.b)

    def test_wc_zero(self, random_ratings):
        K = 3
        nbr = random_neighbors(random_ratings.N, K, 0)
        cfg = TrainConfig(F=2, K=K, seed=0)
        p = init_params(random_ratings.M, random_ratings.N, 2, K, nbr,
                        random_ratings.baselines(), cfg)
        assert not p.W.any() and not p.C.any()


class TestSplitNeighbors:
    def test_all_rated(self):
        r = make_ratings([0, 0, 0], [0, 1, 2], [1, 2, 3])
        nbr = NeighborTable(3, 2, np.array([[1, 2], [0, 2], [0, 1]], dtype=np.int32))
        s = split_neighbors(0, 0, nbr, r)
        assert len(s.explicit) == 2 and len(s.implicit) == 0

    def test_none_rated(self):
        r = make_ratings([0, 1, 1], [0, 1, 2], [1, 2, 3])
        nbr = NeighborTable(3, 2, np.array([[1, 2], [0, 2], [0, 1]], dtype=np.int32))
        s = split_neighbors(0, 0, nbr, r)
        assert len(s.explicit) == 0 and len(s.implicit) == 2

    def test_mixed_partition(self):
        rng = np.random.default_rng(3)
        r = random_sparse(10, 8, 0.4, seed=3)
        nbr = random_topk(8, 4, seed=1)
        for i in range(r.M):
            for j in range(r.N):
                s = split_neighbors(i, j, nbr, r)
                assert sorted(list(s.explicit) + list(s.implicit)) == [0, 1, 2, 3]
                for k in s.explicit:
                    assert r.rating(i, int(nbr.entries[j, k])) is not None
                for k in s.implicit:
                    assert r.rating(i, int(nbr.entries[j, k])) is None


class TestPredict:
    def test_baseline_only(self, balanced_toy):
        p = make_params(3, 3, 2, 0, seed=0)
        p.U[:] = 0
        p.V[:] = 0
        assert predict(0, 1, p, balanced_toy) == pytest.approx(
            p.mu + p.b[0] + p.b_hat[1])

    def test_empty_neighbor_sets(self):
        # no neighbors at all: baseline + dot product
        r = make_ratings([0], [0], [4.0])
        p = make_params(1, 1, 2, 0, seed=1)
        expected = p.mu + p.b[0] + p.b_hat[0] + float(p.U[0] @ p.V[0])
        assert predict(0, 0, p, r) == pytest.approx(expected)

    def test_toy_hand_value(self, balanced_toy):
        # one explicit neighbor (r=4, baseline 3, w=0.1), one implicit (c=0.2),
        # u.v = 0.5, baseline 3 -> 3 + 1*(4-3)*0.1 + 1*0.2 + 0.5 = 3.8
        nbr = NeighborTable(3, 2, np.array([[1, 2], [0, 2], [0, 1]], dtype=np.int32))
        p = ModelParams(mu=3.0, b=np.zeros(3), b_hat=np.zeros(3),
                        U=np.array([[0.5], [0.0], [0.0]]),
                        V=np.array([[0.0], [0.0], [1.0]]),
                        W=np.array([[0.0, 0.0], [0.0, 0.0], [0.1, 0.0]]),
                        C=np.array([[0.0, 0.0], [0.0, 0.0], [0.0, 0.2]]),
                        neighbors=nbr)
        assert predict(0, 2, p, balanced_toy) == pytest.approx(3.8, abs=1e-12)

    def test_out_of_range(self, balanced_toy):
        p = make_params(3, 3, 2, 0)
        with pytest.raises(IndexError):
            predict(5, 0, p, balanced_toy)

    def test_clamp(self, balanced_toy):
        p = make_params(3, 3, 2, 0, seed=4)
        raw = predict(0, 0, p, balanced_toy)
        lo, hi = raw + 0.5, raw + 1.0
        assert predict(0, 0, p, balanced_toy, clamp=(lo, hi)) == pytest.approx(lo)

    def test_nesting_reduces_to_dot(self, random_ratings):
        K = 3
        nbr = random_neighbors(random_ratings.N, K, 2)
        p = make_params(random_ratings.M, random_ratings.N, 4, K, nbr, seed=3)
        p.mu = 0.0
        p.b[:] = 0
        p.b_hat[:] = 0
        p.W[:] = 0
        p.C[:] = 0
        for i in range(0, random_ratings.M, 3):
            for j in range(0, random_ratings.N, 2):
                assert predict(i, j, p, random_ratings) == pytest.approx(
                    float(p.U[i] @ p.V[j]), abs=1e-12)


class TestSgdUpdate:
    def test_zero_error_no_change(self):
        r = make_ratings([0], [0], [4.0])
        p = ModelParams(mu=4.0, b=np.zeros(1), b_hat=np.zeros(1),
                        U=np.zeros((1, 2)), V=np.zeros((1, 2)),
                        W=np.zeros((1, 0)), C=np.zeros((1, 0)), neighbors=None)
        before = p.copy()
        e = sgd_update(0, 0, p, rates=(0.1,) * 6, regs=(0.0,) * 6, ratings=r)
        assert e == 0.0
        assert np.array_equal(p.U, before.U) and p.b[0] == before.b[0]

    def test_scalar_hand_case(self):
        # u=1, v=2, r=4, mu=b=bhat=0: e=2, u<-1.4, v<-2.2
        r = make_ratings([0], [0], [4.0])
        p = ModelParams(mu=0.0, b=np.zeros(1), b_hat=np.zeros(1),
                        U=np.array([[1.0]]), V=np.array([[2.0]]),
                        W=np.zeros((1, 0)), C=np.zeros((1, 0)), neighbors=None)
        e = sgd_update(0, 0, p, rates=(0.0, 0.0, 0.1, 0.1, 0.0, 0.0),
                       regs=(0.0,) * 6, ratings=r)
        assert e == pytest.approx(2.0)
        assert p.U[0, 0] == pytest.approx(1.4)
        assert p.V[0, 0] == pytest.approx(2.2)

    def test_missing_rating(self, balanced_toy):
        p = make_params(3, 3, 2, 0)
        with pytest.raises(ValueError):
            sgd_update(2, 0, p, (0.1,) * 6, (0.0,) * 6, balanced_toy)

    @pytest.mark.parametrize("F,K", [(1, 0), (2, 2), (8, 4)])
    def test_gradient_directions(self, F, K):
        rng = np.random.default_rng(F * 10 + K)
        r = random_sparse(7, 9, 0.5, seed=F + K)
        nbr = random_neighbors(r.N, K, seed=1)
        p = make_params(r.M, r.N, F, K, nbr, seed=F * 3 + K)
        k = rng.integers(0, r.nnz)
        i, j = int(r.entry_rows[k]), int(r.entry_cols[k])
        got = analytic_directions(p, r, i, j)

        def check(val, mutate):
            fd = fd_direction(p, r, i, j, mutate)
            assert val == pytest.approx(fd, rel=1e-4, abs=1e-9)

        check(got["b"], lambda q, d: q.b.__setitem__(i, q.b[i] + d))
        check(got["b_hat"], lambda q, d: q.b_hat.__setitem__(j, q.b_hat[j] + d))
        for f in range(F):
            check(got["U"][f], lambda q, d, f=f: q.U.__setitem__((i, f), q.U[i, f] + d))
            check(got["V"][f], lambda q, d, f=f: q.V.__setitem__((j, f), q.V[j, f] + d))
        for kk in range(K):
            check(got["W"][kk], lambda q, d, kk=kk: q.W.__setitem__((j, kk), q.W[j, kk] + d))
            check(got["C"][kk], lambda q, d, kk=kk: q.C.__setitem__((j, kk), q.C[j, kk] + d))


class TestTrainBasic:
    def test_zero_epochs_returns_init(self, random_ratings):
        cfg = TrainConfig(F=3, K=0, epochs=0, seed=7)
        p = train_basic(random_ratings, cfg)
        rng = np.random.default_rng(7)
        scale = 1.0 / np.sqrt(3)
        np.testing.assert_array_equal(p.U, rng.uniform(0, scale, (random_ratings.M, 3)))
        assert p.mu == 0.0 and not p.b.any()

    def test_rank2_recovery(self):
        r = low_rank_matrix(20, 20, 2, seed=3)
        cfg = TrainConfig(F=2, K=0, alpha_u=0.1, alpha_v=0.1, lambda_u=0.0,
                          lambda_v=0.0, beta=0.0, epochs=50, seed=0)
        p = train_basic(r, cfg)
        assert rmse(p, r.triplets(), r) < 0.05

    def test_deterministic(self, random_ratings):
        cfg = TrainConfig(F=3, K=0, epochs=5, seed=1)
        p1 = train_basic(random_ratings, cfg)
        p2 = train_basic(random_ratings, cfg)
        assert np.array_equal(p1.U, p2.U) and np.array_equal(p1.V, p2.V)

    def test_sorted_rows_runs(self, random_ratings):
        cfg = TrainConfig(F=3, K=0, epochs=2, seed=1)
        p = train_basic(random_ratings, cfg, sort_rows_by_count=True)
        assert p.all_finite()

    def test_racy_mode_smoke(self):
        r = random_sparse(40, 30, 0.3, seed=2)
        cfg = TrainConfig(F=4, K=0, alpha_u=0.02, alpha_v=0.02, epochs=5, seed=0)
        p = train_basic(r, cfg, racy_workers=2)
        assert p.all_finite()

    def test_divergence_raises(self, random_ratings):
        cfg = TrainConfig(F=3, K=0, alpha_u=1e12, alpha_v=1e12, epochs=3, seed=1)
        with pytest.raises(TrainingDivergedError) as err:
            train_basic(random_ratings, cfg)
        assert err.value.epoch >= 0


class TestTrainFull:
    def test_zero_epochs_is_init(self, random_ratings):
        K = 3
        nbr = random_neighbors(random_ratings.N, K, 4)
        cfg = TrainConfig(F=3, K=K, epochs=0, seed=2)
        p = train_full(random_ratings, nbr, cfg)
        expected = init_params(random_ratings.M, random_ratings.N, 3, K, nbr,
                               random_ratings.baselines(), cfg)
        assert np.array_equal(p.U, expected.U)
        assert np.array_equal(p.b, expected.b)
        assert not p.W.any()

    def test_full_beats_basic_on_structured_toy(self):
        # strong bias structure at low density: the biased neighborhood model
        # should not lose to bias-free basic MF at equal rank and rates
        rng = np.random.default_rng(8)
        M, N = 50, 30
        b_u = rng.normal(0, 1.0, M)
        b_i = rng.normal(0, 1.0, N)
        mask = rng.random((M, N)) < 0.25
        rows, cols = np.nonzero(mask)
        vals = 3.5 + b_u[rows] + b_i[cols] + rng.normal(0, 0.5, len(rows))
        r = make_ratings(rows, cols, vals, M=M, N=N)
        from lshmf.data import split_holdout
        train, test = split_holdout(r, 0.15, seed=0)
        nbr = gsm_topk(train, SimilarityConfig(K=4))
        cfg_b = TrainConfig(F=2, K=0, alpha_u=0.04, alpha_v=0.04,
                            lambda_u=0.03, lambda_v=0.03, epochs=60, seed=0)
        cfg_f = TrainConfig(F=2, K=4, alpha_b=0.04, alpha_b_hat=0.04,
                            alpha_u=0.04, alpha_v=0.04, lambda_b=0.03,
                            lambda_b_hat=0.03, lambda_u=0.03, lambda_v=0.03,
                            epochs=60, seed=0)
        basic = train_basic(train, cfg_b)
        full = train_full(train, nbr, cfg_f)
        assert rmse(full, test, train) <= rmse(basic, test, train)

    def test_k0_single_update_matches_basic_rule(self, balanced_toy):
        # with K=0 the full update degenerates to the biased basic-MF rules
        p = make_params(3, 3, 2, 0, seed=9)
        q = p.copy()
        rates = (0.05, 0.07, 0.02, 0.03, 0.0, 0.0)
        regs = (0.01, 0.02, 0.03, 0.04, 0.0, 0.0)
        e = sgd_update(0, 0, p, rates, regs, balanced_toy)
        pred = q.mu + q.b[0] + q.b_hat[0] + float(q.U[0] @ q.V[0])
        e_manual = 4.0 - pred
        assert e == pytest.approx(e_manual, abs=1e-12)
        assert p.b[0] == pytest.approx(q.b[0] + 0.05 * (e_manual - 0.01 * q.b[0]))
        assert p.b_hat[0] == pytest.approx(q.b_hat[0] + 0.07 * (e_manual - 0.02 * q.b_hat[0]))
        np.testing.assert_allclose(p.U[0], q.U[0] + 0.02 * (e_manual * q.V[0] - 0.03 * q.U[0]))
        np.testing.assert_allclose(p.V[0], q.V[0] + 0.03 * (e_manual * q.U[0] - 0.04 * q.V[0]))

    def test_objective_descends_with_small_rates(self):
        r = random_sparse(25, 18, 0.35, seed=5)
        K = 3
        nbr = random_neighbors(r.N, K, 6)
        small = dict(alpha_b=0.00035, alpha_b_hat=0.00035, alpha_u=0.00035,
                     alpha_v=0.00035, alpha_w=0.00002, alpha_c=0.00002)
        cfg0 = TrainConfig(F=4, K=K, epochs=0, seed=3, **small)
        cfg1 = TrainConfig(F=4, K=K, epochs=1, seed=3, **small)
        p0 = train_full(r, nbr, cfg0)
        p1 = train_full(r, nbr, cfg1)
        regs = cfg1.regs
        assert objective_value(p1, r, regs) < objective_value(p0, r, regs)

    def test_divergence_raises_with_epoch(self, random_ratings):
        nbr = random_neighbors(random_ratings.N, 2, 1)
        cfg = TrainConfig(F=3, K=2, alpha_b=1e12, alpha_b_hat=1e12, alpha_u=1e12,
                          alpha_v=1e12, alpha_w=1e12, alpha_c=1e12, epochs=3, seed=1)
        with pytest.raises(TrainingDivergedError):
            train_full(random_ratings, nbr, cfg)

    def test_structural_space_law(self, random_ratings):
        K = 4
        F = 3
        nbr = random_neighbors(random_ratings.N, K, 2)
        cfg = TrainConfig(F=F, K=K, epochs=1, seed=0)
        p = train_full(random_ratings, nbr, cfg)
        N, M = random_ratings.N, random_ratings.M
        assert p.W.size == N * K and p.C.size == N * K
        assert p.neighbors.entries.size == N * K
        total = p.U.size + p.V.size + p.W.size + p.C.size + p.neighbors.entries.size
        assert total == M * F + N * F + 3 * N * K


class TestRmse:
    def test_perfect(self, balanced_toy):
        p = ModelParams(mu=3.0, b=np.zeros(3), b_hat=np.zeros(3),
                        U=np.zeros((3, 1)), V=np.zeros((3, 1)),
                        W=np.zeros((3, 0)), C=np.zeros((3, 0)), neighbors=None)
        t = Triplets(np.array([0, 1]), np.array([1, 1]), np.array([3.0, 3.0]))
        assert rmse(p, t, balanced_toy) == 0.0

    def test_single_off_by_one(self, balanced_toy):
        p = ModelParams(mu=3.0, b=np.zeros(3), b_hat=np.zeros(3),
                        U=np.zeros((3, 1)), V=np.zeros((3, 1)),
                        W=np.zeros((3, 0)), C=np.zeros((3, 0)), neighbors=None)
        t = Triplets(np.array([0]), np.array([1]), np.array([4.0]))
        assert rmse(p, t, balanced_toy) == pytest.approx(1.0)

    def test_two_errors(self, balanced_toy):
        p = ModelParams(mu=3.0, b=np.zeros(3), b_hat=np.zeros(3),
                        U=np.zeros((3, 1)), V=np.zeros((3, 1)),
                        W=np.zeros((3, 0)), C=np.zeros((3, 0)), neighbors=None)
        t = Triplets(np.array([0, 1]), np.array([1, 1]), np.array([4.0, 5.0]))
        assert rmse(p, t, balanced_toy) == pytest.approx(np.sqrt(2.5), rel=1e-12)
        assert np.sqrt(2.5) == pytest.approx(1.5811388300841898)

    def test_permutation_invariance(self, random_ratings):
        p = make_params(random_ratings.M, random_ratings.N, 3, 0, seed=2)
        t = random_ratings.triplets()
        perm = np.random.default_rng(0).permutation(len(t))
        t2 = Triplets(t.rows[perm], t.cols[perm], t.values[perm])
        assert rmse(p, t, random_ratings) == pytest.approx(
            rmse(p, t2, random_ratings), rel=1e-14)

    def test_unscale(self, balanced_toy):
        p = ModelParams(mu=3.0, b=np.zeros(3), b_hat=np.zeros(3),
                        U=np.zeros((3, 1)), V=np.zeros((3, 1)),
                        W=np.zeros((3, 0)), C=np.zeros((3, 0)), neighbors=None)
        t = Triplets(np.array([0]), np.array([1]), np.array([4.0]))
        assert rmse(p, t, balanced_toy, unscale=20.0) == pytest.approx(20.0)

    def test_empty_errors(self, balanced_toy):
        p = make_params(3, 3, 1, 0)
        t = Triplets(np.array([], int), np.array([], int), np.array([]))
        with pytest.raises(ValueError):
            rmse(p, t, balanced_toy)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, random_ratings):
        K = 3
        nbr = random_neighbors(random_ratings.N, K, 5)
        cfg = TrainConfig(F=4, K=K, epochs=3, seed=1)
        p = train_full(random_ratings, nbr, cfg)
        path = tmp_path / "model.bin"
        p.save(path)
        q = ModelParams.load(path)
        assert q.mu == p.mu
        for name in ("b", "b_hat", "U", "V", "W", "C"):
            np.testing.assert_array_equal(getattr(q, name), getattr(p, name))
        np.testing.assert_array_equal(q.neighbors.entries, p.neighbors.entries)

    def test_round_trip_k0(self, tmp_path, random_ratings):
        cfg = TrainConfig(F=2, K=0, epochs=1, seed=1)
        p = train_basic(random_ratings, cfg)
        path = tmp_path / "model.bin"
        p.save(path)
        q = ModelParams.load(path)
        np.testing.assert_array_equal(q.U, p.U)
        assert q.neighbors is None and q.K == 0
