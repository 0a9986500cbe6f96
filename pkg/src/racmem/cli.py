"""``racmem`` command line: data generation, indexing, k-NN caching, training,
evaluation, memory growth, gradient checks and attention traces.

Exit codes: 0 success, 1 check failure, 2 usage or validation error,
3 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from ._binio import FormatError
from .datagen import (
    LongTailSpec,
    MemorySpec,
    VALUE_MODES,
    gen_longtail,
    gen_memory,
    read_dataset,
    read_sidecar,
    write_dataset,
    write_sidecar,
)
from .index import (
    ExactIndex,
    StaleCacheError,
    build_ivf,
    knn_digest,
    precompute_knn,
    read_ivf,
    read_knn_cache,
    write_ivf,
    write_knn_cache,
)
from .fusion import attention_trace
from .nn import read_checkpoint, write_checkpoint
from .store import read_store, write_store
from .training import (
    MODES,
    TrainConfig,
    build_head,
    evaluate,
    gather_neighbors,
    grow_memory_eval,
    head_from_params,
    model_grad_check,
    train,
)

log = logging.getLogger("racmem")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class CheckFailed(Exception):
    pass


# --- helpers ---------------------------------------------------------------

def _n_probe(value):
    if value is None or value == "all":
        return value
    return int(value)


def _write_json(path: Path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _config_echo(args, out_dir: Path, name: str = "config.json", **resolved) -> None:
    doc = {k: v for k, v in vars(args).items() if k != "func"}
    doc.update(resolved)
    doc["version"] = __version__
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / name, doc)


def _file_echo(args, out_file: Path, **resolved) -> None:
    """Config echo for subcommands whose output is a single file."""
    _config_echo(args, out_file.parent, out_file.name + ".config.json", **resolved)


def _load_data(data_dir: Path):
    side = read_sidecar(data_dir / "data.json")
    C = side["num_classes"]
    tr = read_dataset(data_dir / "train.racm", side["train_labels"], C, "train")
    ev = read_dataset(data_dir / "eval.racm", side["eval_labels"], C, "eval")
    return side, tr, ev


def _open_index(store, index_path):
    return ExactIndex(store) if index_path is None else read_ivf(index_path, store)


def _thresholds(args):
    return (args.many_min, args.low_max)


# --- subcommands -----------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    spec = LongTailSpec(args.classes, args.head, args.tail, args.dim, args.spread,
                        args.eval_per_class, args.seed)
    tr, ev, protos = gen_longtail(spec)
    value_dim = args.value_dim or args.dim
    mem_spread = args.spread if args.memory_spread is None else args.memory_spread
    rel_frac = args.relevant_per_class / args.memory_size
    dis_frac = 1.0 - rel_frac * args.classes if args.distractor_fraction is None else args.distractor_fraction
    mspec = MemorySpec(args.memory_size, rel_frac, max(0.0, dis_frac), args.value_mode, mem_spread,
                       args.seed * 1000 + 1, "memory")
    memory = gen_memory(protos, mspec, args.dim, value_dim)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(tr, out / "train.racm")
    write_dataset(ev, out / "eval.racm")
    write_store(memory, out / "memory.racm")
    write_sidecar(out / "data.json", spec, tr, ev, protos, mspec, value_dim)
    _config_echo(args, out, value_dim=value_dim, memory_spread=mem_spread,
                 distractor_fraction=mspec.distractor_fraction)
    print(f"wrote {len(tr)} train, {len(ev)} eval, {memory.count} memory rows to {out}")
    return EXIT_OK


def cmd_gen_memory(args) -> int:
    """Extra memory for an existing dataset, e.g. planted rows for growth runs."""
    side = read_sidecar(Path(args.data) / "data.json")
    protos = side["prototypes"]
    C, d = protos.shape
    rel = np.zeros(C)
    classes = range(C) if args.classes_from is None else range(args.classes_from, C)
    for c in classes:
        rel[c] = args.relevant_per_class
    size = args.size or int(rel.sum())
    value_dim = side["value_dim"] or d
    mem_spread = side["memory_spec"]["spread"] if side["memory_spec"] else side["spec"]["spread"]
    spec = MemorySpec(size, tuple(float(r) / size for r in rel), 0.0,
                      side["memory_spec"]["value_mode"] if side["memory_spec"] else "text_proxy",
                      mem_spread, args.seed, args.tag)
    store = gen_memory(protos, spec, d, value_dim)
    out = Path(args.out)
    write_store(store, out)
    _file_echo(args, out, size=size)
    print(f"wrote {store.count} rows to {out}")
    return EXIT_OK


def cmd_build_index(args) -> int:
    store = read_store(args.store)
    n_lists = None if args.lists == "auto" else int(args.lists)
    index = build_ivf(store, n_lists, args.seed, args.iters)
    out = Path(args.out)
    write_ivf(index, out)
    probe = index.resolve_n_probe(None)
    _file_echo(args, out, n_lists=index.n_lists, default_n_probe=probe)
    print(f"n_lists {index.n_lists}, default n_probe {probe}, {store.count} rows")
    return EXIT_OK


def cmd_precompute_knn(args) -> int:
    if args.store is None:
        raise ValueError("--store is required")
    store = read_store(args.store)
    queries = read_store(args.queries).keys
    index = _open_index(store, args.index)
    cache = precompute_knn(index, queries, args.k, _n_probe(args.n_probe), args.exclude_self)
    out = Path(args.out)
    write_knn_cache(cache, out)
    _file_echo(args, out, n_probe=index.resolve_n_probe(_n_probe(args.n_probe)),
               digest=cache.digest.hex())
    print(f"cached {args.k}-NN for {cache.n_queries} queries, digest {cache.digest.hex()[:16]}")
    return EXIT_OK


def cmd_train(args) -> int:
    side, tr, ev = _load_data(Path(args.data))
    out = Path(args.out)
    cfg = TrainConfig(args.epochs, args.batch, args.lr, args.wd, args.warmup_epochs, args.k,
                      args.tau, args.epsilon, args.seed, _thresholds(args))
    store = cache = None
    d_prime = 0
    if args.mode in ("mean_knn", "mam"):
        if args.store is None:
            raise ValueError(f"--store is required for mode {args.mode}")
        store = read_store(args.store)
        d_prime = store.value_dim
        index = _open_index(store, args.index)
        n_probe = _n_probe(args.n_probe)
        expected = knn_digest(index, tr.embeddings, args.k, n_probe, args.exclude_self)
        if args.cache is not None:
            cache = read_knn_cache(args.cache, expected)
        else:
            cache = precompute_knn(index, tr.embeddings, args.k, n_probe, args.exclude_self)
    head = build_head(args.mode, tr.dim, tr.num_classes, d_prime, args.layers, args.seed)
    out.mkdir(parents=True, exist_ok=True)
    _config_echo(args, out, batch=cfg.resolved_batch(len(tr)), d_prime=d_prime)
    with open(out / "history.jsonl", "w") as hist:
        def on_epoch(rec):
            hist.write(json.dumps(rec, sort_keys=True) + "\n")
            print(json.dumps(rec, sort_keys=True))

        train(head, tr, cfg, store, cache, eval_set=None if args.no_eval else ev, on_epoch=on_epoch)
    write_checkpoint(head.params, out / "checkpoint.racp")
    return EXIT_OK


def cmd_eval(args) -> int:
    side, tr, ev = _load_data(Path(args.data))
    head = head_from_params(read_checkpoint(args.checkpoint))
    store = read_store(args.store) if head.uses_retrieval else None
    index = _open_index(store, args.index) if store is not None else None
    m = evaluate(head, ev if args.split == "eval" else tr, store, index, args.k,
                 tr.class_counts, _thresholds(args), n_probe=_n_probe(args.n_probe))
    doc = m.summary()
    doc["per_class"] = [None if np.isnan(x) else float(x) for x in m.per_class]
    out = Path(args.out)
    _config_echo(args, out, mode=head.mode)
    _write_json(out / "metrics.json", doc)
    print(json.dumps(m.summary(), sort_keys=True))
    return EXIT_OK


def cmd_grow_memory(args) -> int:
    side, tr, ev = _load_data(Path(args.data))
    head = head_from_params(read_checkpoint(args.checkpoint))
    if not head.uses_retrieval:
        raise ValueError("growing the memory only affects retrieval modes")
    small, extra = read_store(args.store), read_store(args.extra)
    before, after = grow_memory_eval(head, ev, small, extra, args.k, tr.class_counts,
                                     _thresholds(args))
    doc = {"before": before.summary(), "after": after.summary(),
           "extra_rows": extra.count, "memory_rows": small.count}
    out = Path(args.out)
    _config_echo(args, out)
    _write_json(out / "grow.json", doc)
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    rep = model_grad_check(args.mode, args.dim, args.d_prime, args.k, args.layers, args.classes,
                           args.batch, args.epsilon, args.seed, args.step, args.max_coords,
                           args.tol)
    doc = {"max_rel_err": rep.max_rel_err, "worst_param": rep.worst_param,
           "worst_index": list(rep.worst_index), "n_checked": rep.n_checked,
           "noise_floor": rep.noise_floor, "tolerance": args.tol,
           "passed": rep.passed(args.tol)}
    if args.out:
        out = Path(args.out)
        _config_echo(args, out)
        _write_json(out / "grad_check.json", doc)
    print(f"max_rel_err {rep.max_rel_err:.3e} ({rep.worst_param}{list(rep.worst_index)}), "
          f"{rep.n_checked} coords, tolerance {args.tol:g}")
    if not rep.passed(args.tol):
        raise CheckFailed(f"gradient check failed: {rep.max_rel_err:.3e} >= {args.tol:g}")
    return EXIT_OK


def cmd_trace(args) -> int:
    side, tr, ev = _load_data(Path(args.data))
    head = head_from_params(read_checkpoint(args.checkpoint))
    if head.mode != "mam":
        raise ValueError("trace needs a mam checkpoint")
    ds = ev if args.split == "eval" else tr
    if not 0 <= args.query_id < len(ds):
        raise ValueError(f"query id {args.query_id} outside [0, {len(ds)})")
    store = read_store(args.store)
    index = _open_index(store, args.index)
    ids, _ = index.search(ds.embeddings[args.query_id:args.query_id + 1], args.k,
                          n_probe=_n_probe(args.n_probe))
    M, V = gather_neighbors(store, ids)
    z = ds.embeddings[args.query_id:args.query_id + 1].astype(np.float32)
    text = attention_trace(z, M, V, head.params, ids).to_json(0)
    if args.out:
        out = Path(args.out)
        _config_echo(args, out)
        with open(out / "trace.json", "w") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


# --- parser ----------------------------------------------------------------

def _add_common(p, out_required=True):
    p.add_argument("--out", required=out_required, help="output directory or file")
    p.add_argument("--threads", type=int, default=None,
                   help="cap on BLAS worker threads (default: all cores)")


def _add_thresholds(p):
    p.add_argument("--many-min", type=int, default=100, help="many-shot: count > this")
    p.add_argument("--low-max", type=int, default=20, help="low-shot: count < this")


def _add_retrieval(p, k_default=100):
    p.add_argument("--store", help="memory store (.racm)")
    p.add_argument("--index", help="IVF index file; exact search when omitted")
    p.add_argument("--n-probe", default=None, help="IVF lists to probe (int or 'all')")
    p.add_argument("--k", type=int, default=k_default)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="racmem", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthetic long-tailed dataset plus memory")
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--head", type=int, default=100)
    p.add_argument("--tail", type=int, default=5)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--spread", type=float, default=0.3)
    p.add_argument("--eval-per-class", type=int, default=50)
    p.add_argument("--memory-size", type=int, default=50_000)
    p.add_argument("--relevant-per-class", type=int, default=20)
    p.add_argument("--distractor-fraction", type=float, default=None,
                   help="default: every non-relevant row is a distractor")
    p.add_argument("--memory-spread", type=float, default=None, help="default: --spread")
    p.add_argument("--value-mode", choices=VALUE_MODES, default="text_proxy")
    p.add_argument("--value-dim", type=int, default=None, help="default: --dim")
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("gen-memory", help="extra relevant rows for an existing dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--relevant-per-class", type=int, default=20)
    p.add_argument("--classes-from", type=int, default=None,
                   help="only plant rows for classes >= this index (the tail)")
    p.add_argument("--size", type=int, default=None, help="default: relevant rows only")
    p.add_argument("--tag", default="extra")
    p.add_argument("--seed", type=int, default=1)
    _add_common(p)
    p.set_defaults(func=cmd_gen_memory)

    p = sub.add_parser("build-index", help="IVF index over a memory store")
    p.add_argument("--store", required=True)
    p.add_argument("--lists", default="auto", help="number of lists or 'auto' (round(sqrt(count)))")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iters", type=int, default=25)
    _add_common(p)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("precompute-knn", help="cache k-NN of a query set")
    p.add_argument("--queries", required=True, help="query set (.racm), e.g. train.racm")
    p.add_argument("--exclude-self", action="store_true",
                   help="query i never retrieves memory row i (memory is the query set)")
    _add_retrieval(p)
    _add_common(p)
    p.set_defaults(func=cmd_precompute_knn, store=None)

    p = sub.add_parser("train", help="train a classifier head")
    p.add_argument("--data", required=True, help="directory written by gen-data")
    p.add_argument("--mode", choices=MODES, default="mam")
    p.add_argument("--layers", type=int, default=8)
    p.add_argument("--cache", help="k-NN cache from precompute-knn; computed when omitted")
    p.add_argument("--exclude-self", action="store_true")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=None, help="default: min(512, N // 10)")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--wd", type=float, default=0.2)
    p.add_argument("--warmup-epochs", type=float, default=1.0)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-eval", action="store_true", help="skip per-epoch evaluation")
    _add_retrieval(p)
    _add_thresholds(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="shot-bucketed accuracy of a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("eval", "train"), default="eval")
    _add_retrieval(p)
    _add_thresholds(p)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grow-memory", help="evaluate before/after merging extra memory")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--extra", required=True, help="rows to merge (.racm)")
    p.add_argument("--store", required=True)
    p.add_argument("--k", type=int, default=100)
    _add_thresholds(p)
    _add_common(p)
    p.set_defaults(func=cmd_grow_memory)

    p = sub.add_parser("grad-check", help="finite-difference check of a random model")
    p.add_argument("--mode", choices=MODES, default="mam")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--d-prime", type=int, default=6)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--batch", type=int, default=3)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--max-coords", type=int, default=64)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    _add_common(p, out_required=False)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("trace", help="per-layer attention weights for one query")
    p.add_argument("--data", default="data")
    p.add_argument("--checkpoint", default="run/checkpoint.racp")
    p.add_argument("--query-id", type=int, required=True)
    p.add_argument("--split", choices=("eval", "train"), default="eval")
    _add_retrieval(p, k_default=10)
    p.set_defaults(store="data/memory.racm")
    _add_common(p, out_required=False)
    p.set_defaults(func=cmd_trace)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:  # argparse: 0 for --help/--version, 2 for usage errors
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    threads = args.threads or os.cpu_count() or 1
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except CheckFailed as e:
        print(f"racmem: {e}", file=sys.stderr)
        return EXIT_CHECK
    except (OSError, FormatError, StaleCacheError) as e:
        print(f"racmem: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"racmem: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
