import numpy as np
import pytest

from lshmf.data import Triplets
from lshmf.datasets import random_sparse
from lshmf.factorization import TrainConfig, train_full
from lshmf.lsh import (HashState, LshConfig, RowHashes, assign_row_hashes,
                       compute_hash_state, simlsh_topk)
from lshmf.online import (absorb_increment, extend_params,
                          extend_ratings, holdback_variables, make_increment,
                          topk_for_new, train_incremental,
                          update_hashes_incremental)

from conftest import make_ratings


def make_batch(base_M, base_N, rows, cols, vals, **kw):
    t = Triplets(np.asarray(rows, np.int32), np.asarray(cols, np.int32),
                 np.asarray(vals, float))
    return make_increment(base_M, base_N, t, **kw)


def random_case(seed, M=30, N=22, n_rows=3, n_cols=4):
    full = random_sparse(M, N, 0.25, seed=seed)
    return holdback_variables(full, n_rows, n_cols, seed=seed)


class TestIncrementBatch:
    def test_rejects_old_old_pairs(self):
        with pytest.raises(ValueError, match="no new variable"):
            make_batch(2, 2, [0], [1], [3.0], new_row_count=1, new_col_count=0)

    def test_counts_derived(self):
        b = make_batch(2, 2, [2, 0], [0, 3], [1.0, 2.0])
        assert b.new_row_count == 1 and b.new_col_count == 2
        assert b.M_hat == 3 and b.N_hat == 4

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            make_batch(2, 2, [9], [0], [1.0], new_row_count=1, new_col_count=0)


class TestExtendRatings:
    def test_concatenation(self):
        r = make_ratings([0, 1], [0, 1], [1, 2], M=2, N=2)
        b = make_batch(2, 2, [2], [0], [5.0])
        ext = extend_ratings(r, b)
        assert ext.M == 3 and ext.N == 2 and ext.nnz == 3
        assert ext.rating(2, 0) == 5.0
        assert ext.rating(0, 0) == 1.0


class TestUpdateHashesIncremental:
    def test_no_new_data_unchanged(self):
        r = random_sparse(10, 8, 0.4, seed=1)
        cfg = LshConfig(G=4, p=2, q=3, psi_exponent=1, seed=2)
        state = compute_hash_state(r, cfg)
        batch = make_batch(10, 8, [], [], [], new_row_count=0, new_col_count=0)
        hashes = assign_row_hashes(10, cfg)
        out = update_hashes_incremental(state, batch, hashes)
        np.testing.assert_array_equal(out.acc, state.acc)
        np.testing.assert_array_equal(out.sig, state.sig)

    def test_hand_case(self):
        # accumulators (-2,-4,-6); one new rating 10 whose row hash is 111
        # contributes +10 per bit -> (8, 6, 4), signature 111
        acc = np.array([-2.0, -4.0, -6.0]).reshape(1, 1, 1, 3)
        cfg = LshConfig(G=3, p=1, q=1, psi_exponent=1, seed=0)
        state = HashState(acc=acc, sig=(acc >= 0).astype(np.uint8), config=cfg)
        bits = np.zeros((4, 1, 1, 3), dtype=np.uint8)
        bits[3, 0, 0, :] = 1
        hashes = RowHashes(bits=bits, seed=0)
        batch = make_batch(3, 1, [3], [0], [10.0], new_row_count=1, new_col_count=0)
        out = update_hashes_incremental(state, batch, hashes)
        np.testing.assert_array_equal(out.acc.ravel(), [8.0, 6.0, 4.0])
        np.testing.assert_array_equal(out.sig.ravel(), [1, 1, 1])

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_full_recompute_bitwise(self, seed):
        orig, batch, _, _ = random_case(seed)
        cfg = LshConfig(G=6, p=2, q=4, psi_exponent=2, seed=seed)
        state = compute_hash_state(orig, cfg)
        hashes = assign_row_hashes(batch.M_hat, cfg)
        inc = update_hashes_incremental(state, batch, hashes)
        full = compute_hash_state(extend_ratings(orig, batch), cfg)
        np.testing.assert_array_equal(inc.acc, full.acc)
        np.testing.assert_array_equal(inc.sig, full.sig)

    def test_wrong_state_size(self):
        r = random_sparse(10, 8, 0.4, seed=1)
        cfg = LshConfig(G=4, p=1, q=1, psi_exponent=1, seed=0)
        state = compute_hash_state(r, cfg)
        batch = make_batch(10, 9, [10], [8], [2.0])  # base_N=9 != state.N=8
        with pytest.raises(ValueError):
            update_hashes_incremental(state, batch, assign_row_hashes(11, cfg))


class TestTopkForNew:
    def test_planted_duplicate_found(self):
        # new column duplicates old column 0 exactly
        rows = [0, 1, 2, 3, 4, 0, 2, 1, 3]
        cols = [0, 0, 0, 0, 0, 1, 1, 2, 2]
        vals = [5, 4, 3, 2, 1, 2, 2, 3, 3]
        orig = make_ratings(rows, cols, vals, M=5, N=3)
        cfg = LshConfig(G=8, p=1, q=4, psi_exponent=1, seed=3)
        tbl, state = simlsh_topk(orig, cfg, K=2)
        batch = make_batch(5, 3, [0, 1, 2, 3, 4], [3, 3, 3, 3, 3],
                           [5, 4, 3, 2, 1])
        hashes = assign_row_hashes(5, cfg)
        state2 = update_hashes_incremental(state, batch, hashes)
        ext = topk_for_new(state2, tbl, K=2, seed=3)
        assert ext.entries[3, 0] == 0  # the duplicate wins every group

    def test_old_rows_unchanged(self):
        orig, batch, _, _ = random_case(11)
        cfg = LshConfig(G=6, p=2, q=3, psi_exponent=1, seed=1)
        tbl, state = simlsh_topk(orig, cfg, K=4)
        hashes = assign_row_hashes(batch.M_hat, cfg)
        state2 = update_hashes_incremental(state, batch, hashes)
        ext = topk_for_new(state2, tbl, K=4, seed=1)
        assert ext.entries[:orig.N].tobytes() == tbl.entries.tobytes()
        ext.validate()

    def test_k_mismatch(self):
        orig, batch, _, _ = random_case(12)
        cfg = LshConfig(G=6, p=2, q=3, psi_exponent=1, seed=1)
        tbl, state = simlsh_topk(orig, cfg, K=4)
        state2 = update_hashes_incremental(
            state, batch, assign_row_hashes(batch.M_hat, cfg))
        with pytest.raises(ValueError):
            topk_for_new(state2, tbl, K=5, seed=0)


class TestTrainIncremental:
    def _setup(self, seed, epochs=6):
        orig, batch, _, _ = random_case(seed)
        lsh = LshConfig(G=6, p=2, q=4, psi_exponent=1, seed=seed)
        cfg = TrainConfig(F=3, K=4, epochs=epochs, seed=seed)
        tbl, state = simlsh_topk(orig, lsh, K=4)
        params = train_full(orig, tbl, cfg)
        return orig, batch, state, tbl, params, cfg

    def test_requires_extended_params(self):
        orig, batch, state, tbl, params, cfg = self._setup(0)
        with pytest.raises(ValueError):
            train_incremental(params, batch, tbl, extend_ratings(orig, batch), cfg)

    @pytest.mark.parametrize("seed", range(3))
    def test_old_params_bit_identical(self, seed):
        orig, batch, state, tbl, params, cfg = self._setup(seed)
        before = params.copy()
        ext_params, _, ext_ratings, _ = absorb_increment(params, state, orig,
                                                         batch, cfg)
        assert ext_params.b[:orig.M].tobytes() == before.b.tobytes()
        assert ext_params.b_hat[:orig.N].tobytes() == before.b_hat.tobytes()
        assert ext_params.U[:orig.M].tobytes() == before.U.tobytes()
        assert ext_params.V[:orig.N].tobytes() == before.V.tobytes()
        assert ext_params.W[:orig.N].tobytes() == before.W.tobytes()
        assert ext_params.C[:orig.N].tobytes() == before.C.tobytes()
        assert ext_params.neighbors.entries[:orig.N].tobytes() == \
            before.neighbors.entries.tobytes()
        assert ext_params.all_finite()

    def test_empty_batch_identity(self):
        orig, batch, state, tbl, params, cfg = self._setup(1)
        empty = make_batch(orig.M, orig.N, [], [], [],
                           new_row_count=0, new_col_count=0)
        before = params.copy()
        ext_params, ext_state, _, _ = absorb_increment(params, state, orig,
                                                       empty, cfg)
        assert ext_params.M == orig.M and ext_params.N == orig.N
        assert ext_params.b.tobytes() == before.b.tobytes()
        assert ext_params.U.tobytes() == before.U.tobytes()
        np.testing.assert_array_equal(ext_state.acc, state.acc)

    def test_new_bias_init_from_batch_means(self):
        orig, batch, state, tbl, params, cfg = self._setup(2)
        hashes = assign_row_hashes(batch.M_hat, state.config)
        state2 = update_hashes_incremental(state, batch, hashes)
        nbr2 = topk_for_new(state2, tbl, params.K, 0)
        ext = extend_params(params, batch, nbr2, cfg)
        for i in range(orig.M, batch.M_hat):
            sel = batch.rows == i
            if sel.any():
                expected = batch.values[sel].mean() - params.mu
                assert ext.b[i] == pytest.approx(expected)
            else:
                assert ext.b[i] == 0.0
        assert not ext.W[orig.N:].any() and not ext.C[orig.N:].any()


class TestHoldbackVariables:
    def test_partition_and_maps(self):
        full = random_sparse(40, 25, 0.3, seed=5)
        orig, batch, row_map, col_map = holdback_variables(full, 4, 5, seed=5)
        assert orig.nnz + len(batch.rows) == full.nnz
        assert sorted(row_map.tolist()) == list(range(40))
        assert sorted(col_map.tolist()) == list(range(25))
        assert orig.M == 36 and orig.N == 20
        batch.validate()
