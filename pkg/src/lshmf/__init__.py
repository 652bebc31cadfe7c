"""Neighborhood-aware sparse matrix factorization with hash-based Top-K
neighbor search, online incremental updates and conflict-free parallel
training."""

from .data import (BaselineStats, ParseError, RatingTriplet, SparseRatings,
                   Triplets, build_indices, compute_baselines, parse_ratings,
                   split_holdout, transform_ratings)
from .factorization import (ModelParams, NeighborSplit, TrainConfig,
                            TrainingDivergedError, init_params, learning_rate,
                            objective_value, predict, rmse, sgd_update,
                            split_neighbors, train_basic, train_full)
from .lsh import (HashState, LshConfig, RowHashes, assign_row_hashes,
                  coarse_candidates, compute_hash_state, fine_topk,
                  minhash_signatures, minhash_topk, rp_signature_bits,
                  rpcos_topk, simlsh_signature, simlsh_topk)
from .online import (IncrementBatch, absorb_increment, extend_params,
                     extend_ratings, holdback_variables, make_increment,
                     topk_for_new, train_incremental,
                     update_hashes_incremental)
from .parallel import (BlockPartition, InstrumentReport, RotationSchedule,
                       make_partition, parallel_train)
from .similarity import (NeighborTable, SimilarityConfig, gsm_topk, pearson,
                         random_topk, shrunk_similarity)

__version__ = "0.1.0"
