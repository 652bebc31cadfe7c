"""Command-line entry points: ingest, split, topk, train, eval, online-update,
bench-topk.

Configuration comes from an optional flat ``key = value`` file (``--config``)
with command-line flags taking precedence.  ``LSHMF_SEED`` is the seed
fallback when neither source sets one.  Every run is reproducible from its
configuration and seed; only wall-clock columns vary between runs.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import datasets
from .data import SparseRatings, Triplets, build_indices, parse_ratings, transform_ratings
from .factorization import ModelParams, TrainConfig, rmse, train_basic, train_full
from .lsh import HashState, LshConfig, minhash_topk, rpcos_topk, simlsh_topk
from .online import absorb_increment, make_increment
from .parallel import parallel_train
from .similarity import NeighborTable, SimilarityConfig, gsm_topk, random_topk

IDS_MAGIC = "LSHMF-I"

PROVIDERS = ("gsm", "simlsh", "minhash", "rpcos", "random")


def _read_config_file(path: str) -> dict:
    out = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad config line: {raw.rstrip()}")
            key, value = line.split("=", 1)
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _strip_defaults(sp: argparse.ArgumentParser) -> None:
    """Defer optional-flag defaults so config-file values can slot in between.

    Flags parse as None unless given explicitly; resolution order is explicit
    flag > config file > declared default.
    """
    defaults = {}
    types = {}
    for action in sp._actions:
        if action.dest in ("help", "command") or action.required:
            continue
        if isinstance(action.const, bool) or isinstance(action.default, bool):
            continue  # store_true flags keep argparse semantics
        defaults[action.dest] = action.default
        types[action.dest] = action.type or str
        action.default = None
    sp.set_defaults(_deferred_defaults=defaults, _arg_types=types)


def _apply_config(args: argparse.Namespace) -> None:
    """Fill unset args from the config file, then from deferred defaults."""
    cfg = _read_config_file(args.config) if getattr(args, "config", None) else {}
    defaults = getattr(args, "_deferred_defaults", {})
    types = getattr(args, "_arg_types", {})
    for key, raw in cfg.items():
        if hasattr(args, key) and getattr(args, key) is None:
            setattr(args, key, types.get(key, str)(raw))
    for key, value in defaults.items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)


def _seed_of(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("LSHMF_SEED")
    return int(env) if env else 0


def _save_ids(path, ratings: SparseRatings) -> None:
    with open(path, "w") as fh:
        fh.write(f"{IDS_MAGIC} v1 {ratings.M} {ratings.N}\n")
        for rid in ratings.row_ids or [str(i) for i in range(ratings.M)]:
            fh.write(f"{rid}\n")
        for cid in ratings.col_ids or [str(j) for j in range(ratings.N)]:
            fh.write(f"{cid}\n")


def _load_ids(path):
    with open(path) as fh:
        header = fh.readline().split()
        if header[0] != IDS_MAGIC:
            raise ValueError(f"{path}: not an {IDS_MAGIC} file")
        M, N = int(header[2]), int(header[3])
        row_ids = [fh.readline().rstrip("\n") for _ in range(M)]
        col_ids = [fh.readline().rstrip("\n") for _ in range(N)]
    return row_ids, col_ids


def _train_config(args, seed) -> TrainConfig:
    kw = dict(F=args.f, K=args.k, epochs=args.epochs, seed=seed)
    if args.alpha is not None:
        kw.update(alpha_b=args.alpha, alpha_b_hat=args.alpha,
                  alpha_u=args.alpha, alpha_v=args.alpha)
    if args.lambda_uv is not None:
        kw.update(lambda_b=args.lambda_uv, lambda_b_hat=args.lambda_uv,
                  lambda_u=args.lambda_uv, lambda_v=args.lambda_uv)
    for flag, name in (("alpha_w", "alpha_w"), ("alpha_c", "alpha_c"),
                       ("lambda_w", "lambda_w"), ("lambda_c", "lambda_c"),
                       ("beta", "beta"), ("init_scale", "init_scale")):
        v = getattr(args, flag, None)
        if v is not None:
            kw[name] = v
    if args.clamp:
        lo, hi = (float(x) for x in args.clamp.split(","))
        kw["clamp_range"] = (lo, hi)
    return TrainConfig(**kw)


def _build_neighbors(ratings, provider, K, seed, args):
    """Dispatch to the requested Top-K provider; returns (table, hash_state|None)."""
    if K > ratings.N - 1:
        raise ValueError(f"K={K} exceeds N-1={ratings.N - 1}")
    if provider == "gsm":
        return gsm_topk(ratings, SimilarityConfig(K=K, lambda_rho=args.lambda_rho)), None
    if provider == "simlsh":
        cfg = LshConfig(G=args.g, p=args.p, q=args.q,
                        psi_exponent=args.psi_exponent, seed=seed)
        return simlsh_topk(ratings, cfg, K)
    if provider == "minhash":
        return minhash_topk(ratings, args.num_hashes, args.bands, K, seed), None
    if provider == "rpcos":
        return rpcos_topk(ratings, args.planes, args.p, args.q, K, seed), None
    if provider == "random":
        return random_topk(ratings.N, K, seed), None
    raise ValueError(f"unknown provider {provider!r}")


def _load_test(path) -> Triplets:
    return SparseRatings.load(path).triplets()


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    with open(args.input) as fh:
        triplets = parse_ratings(fh, delimiter=args.delimiter)
    triplets = transform_ratings(triplets, zero_floor=args.zero_floor, scale=args.scale)
    ratings = build_indices(triplets)
    ratings.save(args.output)
    _save_ids(args.output + ".ids", ratings)
    print(f"ingested M={ratings.M} N={ratings.N} nnz={ratings.nnz} -> {args.output}")
    return 0


def cmd_split(args) -> int:
    from .data import split_holdout
    ratings = SparseRatings.load(args.input)
    train, test = split_holdout(ratings, args.test_fraction, _seed_of(args))
    train.save(args.train_out)
    build_indices(test, M=ratings.M, N=ratings.N).save(args.test_out)
    print(f"split nnz={ratings.nnz} -> train {train.nnz}, test {len(test)}")
    return 0


def cmd_topk(args) -> int:
    ratings = SparseRatings.load(args.input)
    seed = _seed_of(args)
    t0 = time.perf_counter()
    table, state = _build_neighbors(ratings, args.provider, args.k, seed, args)
    wall = time.perf_counter() - t0
    table.write_csv(args.output)
    if args.hash_state_out:
        if state is None:
            raise ValueError("--hash-state-out requires --provider simlsh")
        state.save(args.hash_state_out)
    print(f"provider={args.provider} wall_seconds={wall:.3f} -> {args.output}")
    if args.overlap_against:
        other = NeighborTable.read_csv(args.overlap_against)
        inter = [len(np.intersect1d(table.entries[j], other.entries[j]))
                 for j in range(table.N)]
        print(f"overlap_mean_fraction={np.mean(inter) / table.K:.4f}")
    return 0


def cmd_train(args) -> int:
    ratings = SparseRatings.load(args.train)
    test = _load_test(args.test) if args.test else None
    seed = _seed_of(args)
    cfg = _train_config(args, seed)
    unscale = args.unscale

    rows = []
    stage_times: list = []
    wall0 = time.perf_counter()

    def callback(epoch, params):
        wall = time.perf_counter() - wall0
        tr = rmse(params, ratings.triplets(), ratings, unscale=unscale,
                  clamp=cfg.clamp_range)
        te = (rmse(params, test, ratings, unscale=unscale, clamp=cfg.clamp_range)
              if test is not None and len(test) else float("nan"))
        rows.append((epoch, wall, tr, te))

    if args.mode == "basic":
        params = train_basic(ratings, cfg, with_biases=args.with_biases,
                             sort_rows_by_count=args.sort_rows,
                             racy_workers=args.racy_workers,
                             epoch_callback=callback)
    else:
        if args.neighbors:
            table = NeighborTable.read_csv(args.neighbors)
        else:
            table, _ = _build_neighbors(ratings, args.provider, args.k, seed, args)
        if args.workers > 1:
            params = parallel_train(ratings, table, cfg, D=args.workers,
                                    epoch_callback=callback,
                                    stage_times=stage_times)
        else:
            params = train_full(ratings, table, cfg, epoch_callback=callback)

    if args.metrics_out:
        with open(args.metrics_out, "w") as fh:
            fh.write("epoch,wall_seconds_cumulative,train_rmse,test_rmse\n")
            for epoch, wall, tr, te in rows:
                fh.write(f"{epoch},{wall:.3f},{tr:.6f},{te:.6f}\n")
            if rows:
                _, wall, tr, te = rows[-1]
                fh.write(f"final,{wall:.3f},{tr:.6f},{te:.6f}\n")
            else:
                fh.write(f"final,{time.perf_counter() - wall0:.3f},nan,nan\n")
            # per-stage wall seconds for multi-worker runs; rmse columns empty
            for epoch, stage, sec in stage_times:
                fh.write(f"stage-{epoch}-{stage},{sec:.4f},,\n")
    if args.model_out:
        params.save(args.model_out)
    if rows:
        print(f"final train_rmse={rows[-1][2]:.6f} test_rmse={rows[-1][3]:.6f}")
    else:
        print("no epochs run")
    return 0


def cmd_eval(args) -> int:
    params = ModelParams.load(args.model)
    ratings = SparseRatings.load(args.ratings)
    test = _load_test(args.test)
    clamp = None
    if args.clamp:
        lo, hi = (float(x) for x in args.clamp.split(","))
        clamp = (lo, hi)
    value = rmse(params, test, ratings, unscale=args.unscale, clamp=clamp)
    print(f"rmse={value:.6f}")
    return 0


def cmd_online_update(args) -> int:
    from .data import parse_ratings_extending
    params = ModelParams.load(args.model)
    ratings = SparseRatings.load(args.ratings)
    state = HashState.load(args.hash_state)
    seed = _seed_of(args)

    ids_path = args.ids or (args.ratings + ".ids")
    if os.path.exists(ids_path):
        row_ids, col_ids = _load_ids(ids_path)
    else:
        row_ids = [str(i) for i in range(ratings.M)]
        col_ids = [str(j) for j in range(ratings.N)]
    with open(args.increment) as fh:
        inc = parse_ratings_extending(fh, row_ids, col_ids, delimiter=args.delimiter)
    inc = transform_ratings(inc, zero_floor=args.zero_floor, scale=args.scale)
    batch = make_increment(ratings.M, ratings.N, inc,
                           new_row_count=inc.M - ratings.M,
                           new_col_count=inc.N - ratings.N)

    test = _load_test(args.test) if args.test else None
    cfg = _train_config(args, seed)
    before = (rmse(params, test, ratings, unscale=args.unscale)
              if test is not None else float("nan"))
    params_ext, state_ext, ratings_ext, _ = absorb_increment(
        params, state, ratings, batch, cfg)
    after = (rmse(params_ext, test, ratings_ext, unscale=args.unscale)
             if test is not None else float("nan"))
    print(f"{before:.6f},{after:.6f},{after - before:+.6f}")
    if args.model_out:
        params_ext.save(args.model_out)
    if args.hash_state_out:
        state_ext.save(args.hash_state_out)
    return 0


def cmd_bench_topk(args) -> int:
    seed = _seed_of(args)
    if args.synthetic:
        m, n, density = args.synthetic.split(",")
        ratings = datasets.random_sparse(int(m), int(n), float(density), seed=seed)
    elif args.input:
        ratings = SparseRatings.load(args.input)
    else:
        raise ValueError("bench-topk needs --input or --synthetic M,N,density")
    providers = args.providers.split(",") if args.providers else list(PROVIDERS)

    # warm the compiled kernels on a small instance so JIT time is excluded
    warm = datasets.random_sparse(30, 40, 0.2, seed=0)
    for prov in providers:
        _build_neighbors(warm, prov, 4, 0, args)

    lines = ["provider,wall_seconds,aux_bytes,online_state_bytes,notes"]
    for prov in providers:
        t0 = time.perf_counter()
        table, state = _build_neighbors(ratings, prov, args.k, seed, args)
        wall = time.perf_counter() - t0
        online_bytes = 0
        if prov == "gsm":
            aux = ratings.N * ratings.N * 8
            note = "N^2 similarity entries (streamed in O(N) resident rows)"
        elif prov == "simlsh":
            aux = state.sig.nbytes + args.q * ratings.N * 8
            online_bytes = state.acc.nbytes
            note = "signatures + bucket keys; accumulators kept for online updates"
        elif prov == "minhash":
            aux = ratings.N * args.num_hashes * 8 + args.bands * ratings.N * 8
            note = "signatures + band keys"
        elif prov == "rpcos":
            aux = ratings.N * args.p * args.planes * args.q + args.q * ratings.N * 8
            note = "sign bits + bucket keys"
        else:
            aux = 0
            note = "no auxiliary structure"
        lines.append(f"{prov},{wall:.3f},{aux},{online_bytes},{note}")
    report = "\n".join(lines)
    print(report)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(report + "\n")
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def _add_common(sp):
    sp.add_argument("--config", help="flat key = value config file")
    sp.add_argument("--seed", type=int, default=None,
                    help="RNG seed (falls back to LSHMF_SEED, then 0)")


def _add_provider_opts(sp):
    sp.add_argument("--provider", choices=PROVIDERS, default="simlsh")
    sp.add_argument("--lambda-rho", dest="lambda_rho", type=float, default=100.0)
    sp.add_argument("--g", type=int, default=8, help="signature bits per map")
    sp.add_argument("--p", type=int, default=3, help="maps per coarse group")
    sp.add_argument("--q", type=int, default=100, help="coarse groups")
    sp.add_argument("--psi-exponent", dest="psi_exponent", type=int, default=2)
    sp.add_argument("--num-hashes", dest="num_hashes", type=int, default=128)
    sp.add_argument("--bands", type=int, default=32)
    sp.add_argument("--planes", type=int, default=8,
                    help="hyperplanes per map for rpcos")


def _add_train_opts(sp):
    sp.add_argument("--f", type=int, default=32, help="rank")
    sp.add_argument("--k", type=int, default=32, help="neighbors per column")
    sp.add_argument("--epochs", type=int, default=50)
    sp.add_argument("--alpha", type=float, default=None,
                    help="learning rate for b, b_hat, u, v")
    sp.add_argument("--alpha-w", dest="alpha_w", type=float, default=None)
    sp.add_argument("--alpha-c", dest="alpha_c", type=float, default=None)
    sp.add_argument("--beta", type=float, default=None, help="rate decay")
    sp.add_argument("--lambda-uv", dest="lambda_uv", type=float, default=None,
                    help="regularizer for b, b_hat, u, v")
    sp.add_argument("--lambda-w", dest="lambda_w", type=float, default=None)
    sp.add_argument("--lambda-c", dest="lambda_c", type=float, default=None)
    sp.add_argument("--init-scale", dest="init_scale", type=float, default=None)
    sp.add_argument("--clamp", default=None, help="lo,hi prediction clamp at eval")
    sp.add_argument("--unscale", type=float, default=None,
                    help="multiply errors back to original units")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lshmf",
                                 description="Sparse neighborhood matrix factorization")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("ingest", help="parse a ratings file into the matrix format")
    _add_common(sp)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--delimiter", default=None)
    sp.add_argument("--zero-floor", dest="zero_floor", type=float, default=None)
    sp.add_argument("--scale", type=float, default=None)
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("split", help="holdout split of a matrix file")
    _add_common(sp)
    sp.add_argument("--input", required=True)
    sp.add_argument("--test-fraction", dest="test_fraction", type=float, default=0.1)
    sp.add_argument("--train-out", dest="train_out", required=True)
    sp.add_argument("--test-out", dest="test_out", required=True)
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("topk", help="build a Top-K neighbor table")
    _add_common(sp)
    _add_provider_opts(sp)
    sp.add_argument("--input", required=True)
    sp.add_argument("--k", type=int, default=32)
    sp.add_argument("--output", required=True)
    sp.add_argument("--hash-state-out", dest="hash_state_out", default=None)
    sp.add_argument("--overlap-against", dest="overlap_against", default=None)
    sp.set_defaults(func=cmd_topk)

    sp = sub.add_parser("train", help="train a model, emitting per-epoch metrics")
    _add_common(sp)
    _add_provider_opts(sp)
    _add_train_opts(sp)
    sp.add_argument("--train", required=True)
    sp.add_argument("--test", default=None)
    sp.add_argument("--mode", choices=("full", "basic"), default="full")
    sp.add_argument("--neighbors", default=None, help="neighbor CSV to reuse")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--with-biases", dest="with_biases", action="store_true")
    sp.add_argument("--sort-rows", dest="sort_rows", action="store_true",
                    help="update densest rows first")
    sp.add_argument("--racy-workers", dest="racy_workers", type=int, default=0)
    sp.add_argument("--metrics-out", dest="metrics_out", default=None)
    sp.add_argument("--model-out", dest="model_out", default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a test set")
    _add_common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--ratings", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--unscale", type=float, default=None)
    sp.add_argument("--clamp", default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("online-update", help="absorb an increment file")
    _add_common(sp)
    _add_train_opts(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--ratings", required=True)
    sp.add_argument("--hash-state", dest="hash_state", required=True)
    sp.add_argument("--increment", required=True)
    sp.add_argument("--ids", default=None, help="id sidecar of the original ingest")
    sp.add_argument("--delimiter", default=None)
    sp.add_argument("--zero-floor", dest="zero_floor", type=float, default=None)
    sp.add_argument("--scale", type=float, default=None)
    sp.add_argument("--test", default=None)
    sp.add_argument("--model-out", dest="model_out", default=None)
    sp.add_argument("--hash-state-out", dest="hash_state_out", default=None)
    sp.set_defaults(func=cmd_online_update)

    sp = sub.add_parser("bench-topk", help="time/space report for the providers")
    _add_common(sp)
    _add_provider_opts(sp)
    sp.add_argument("--input", default=None)
    sp.add_argument("--synthetic", default=None, help="M,N,density")
    sp.add_argument("--k", type=int, default=32)
    sp.add_argument("--providers", default=None, help="comma list (default: all)")
    sp.add_argument("--output", default=None)
    sp.set_defaults(func=cmd_bench_topk)

    for child in sub.choices.values():
        _strip_defaults(child)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_config(args)
        return args.func(args)
    except Exception as exc:  # surface I/O and training errors with nonzero status
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
