"""Command-line entry point: ``tapret <subcommand> [flags]``.

Every subcommand writes its fully resolved config into its output artifact
and exits 0 only when no error records were produced.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from tapret.config import RunConfig, load_config, parse_kv
from tapret.embedder import EmbedConfig, Embedder
from tapret.errors import ConfigError, TapretError
from tapret.prompts import PROMPT_LADDER, ModalityInput, PromptFlags, Role
from tapret.reranker import FRAMING_PRESETS, Reranker, get_framing
from tapret.retrieval import TwoStageRetriever, VectorIndex, load_corpus, rag_answer
from tapret.store import EmbeddingStore

log = logging.getLogger("tapret")

PROBE_KINDS = ("alpha", "beta", "synonym", "framing", "wordprob", "gradient")


def dump_json(obj, path: str | None) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def common_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("run config (override --config)")
    g.add_argument("--config", help="YAML or JSON run config")
    g.add_argument("--backend", help="backend id (toy, hf)")
    g.add_argument("--backend-param", action="append", metavar="KEY=VALUE", help="backend constructor argument")
    g.add_argument("--tap", help="embedding tap, e.g. attn@L, mlp@L, mlp@L-1")
    g.add_argument("--flags", help="prompt constraints: a|b|c|d, all, none, or a comma list")
    g.add_argument("--task-hint", help="counterpart description for the task-alignment clause")
    g.add_argument("--framing", choices=FRAMING_PRESETS)
    g.add_argument("--reranker", choices=("model", "oracle", "embedding"))
    g.add_argument("--K", type=int, dest="K")
    g.add_argument("--M", type=int, dest="M")
    g.add_argument("--jobs", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--fusion-weight", type=float)
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_config(args) -> RunConfig:
    overrides = {
        "backend": args.backend,
        "backend_params": parse_kv(args.backend_param) if args.backend_param else None,
        "tap": args.tap,
        "flags": args.flags,
        "task_hint": args.task_hint,
        "framing": args.framing,
        "reranker": args.reranker,
        "K": args.K,
        "M": args.M,
        "jobs": args.jobs,
        "seed": args.seed,
        "fusion_weight": args.fusion_weight,
    }
    if getattr(args, "grid", None):
        overrides["grid"] = [a.strip() for a in args.grid.split(",") if a.strip()]
    return load_config(args.config, overrides)


def make_embedder(cfg: RunConfig, backend=None) -> Embedder:
    backend = backend or cfg.make_backend()
    return Embedder(backend, EmbedConfig(tap=cfg.tap, flags=cfg.prompt_flags(), task_hint=cfg.task_hint))


def query_from_args(args) -> ModalityInput:
    segs = []
    for img in args.image or ():
        segs.append(("image", img))
    segs.append(("text", args.text))
    return ModalityInput(tuple(segs), Role.QUERY)


# -- subcommands ------------------------------------------------------------


def cmd_embed(args, cfg: RunConfig) -> int:
    records, errors = load_corpus(args.corpus, role=args.role)
    embedder = make_embedder(cfg)
    batch = embedder.embed_batch([r.input for r in records], [r.id for r in records], jobs=cfg.jobs)
    errors = errors + [{"id": records[i].id, "error": f"{type(e).__name__}: {e}"} for i, e in batch.errors]
    store = EmbeddingStore.from_records(
        batch.ok,
        config={"run": cfg.to_json(), "corpus": str(args.corpus), "role": args.role, "errors": errors},
        backend_id=embedder.backend.id,
        d=embedder.backend.descriptor.d_model,
        tap=embedder.tap.spec(),
    )
    store.save(args.out)
    print(f"embedded {store.count} records, d={store.d}")
    for e in errors:
        log.error("error record: %s", e)
    return 1 if errors else 0


def cmd_index(args, cfg: RunConfig) -> int:
    stores = [EmbeddingStore.load(p) for p in args.stores]
    d = stores[0].d
    index = VectorIndex(d)
    for s in stores:
        index.add(s.records())
    recs = [index.records[i] for i in index.ids]
    merged = EmbeddingStore.from_records(
        recs, config={"run": cfg.to_json(), "sources": [str(p) for p in args.stores]},
        backend_id=stores[0].backend_id, d=d, tap=stores[0].tap,
    )
    merged.save(args.out)
    print(f"indexed {index.count} records, d={d}")
    return 0


def _retriever(cfg: RunConfig, args, embedder: Embedder) -> tuple[TwoStageRetriever, list]:
    records, errors = load_corpus(args.corpus)
    if args.store:
        store = EmbeddingStore.load(args.store)
        recs = store.records()
    else:
        batch = embedder.embed_batch([r.input for r in records], [r.id for r in records], jobs=cfg.jobs)
        recs = batch.ok
        errors = errors + [{"id": records[i].id, "error": str(e)} for i, e in batch.errors]
    index = VectorIndex(embedder.backend.descriptor.d_model).add(recs)
    reranker = Reranker(embedder.backend, get_framing(cfg.framing), jobs=cfg.jobs)
    corpus = {r.id: r.input for r in records}
    return TwoStageRetriever(embedder, index, corpus, reranker, fusion_weight=cfg.fusion_weight), errors


def cmd_search(args, cfg: RunConfig) -> int:
    embedder = make_embedder(cfg)
    retriever, errors = _retriever(cfg, args, embedder)
    if args.queries:
        queries, qerr = load_corpus(args.queries, role=Role.QUERY)
        errors += qerr
        items = [(q.id, q.input) for q in queries]
    else:
        items = [("query", query_from_args(args))]
    out = {}
    for qid, q in items:
        out[qid] = [s.to_json() for s in retriever.search(q, cfg.K, cfg.M)]
    dump_json({"config": cfg.to_json(), "results": out, "errors": errors}, args.out)
    return 1 if errors else 0


def cmd_rerank(args, cfg: RunConfig) -> int:
    backend = cfg.make_backend()
    records, errors = load_corpus(args.corpus)
    if args.ids:
        wanted = set(args.ids)
        records = [r for r in records if r.id in wanted]
    if not records:
        raise TapretError("no candidates to rerank")
    reranker = Reranker(backend, get_framing(cfg.framing), jobs=cfg.jobs)
    scores = reranker.rerank(query_from_args(args), [(r.id, r.input) for r in records])
    errors += [{"id": s.candidate_id, "error": s.error} for s in scores if s.error]
    dump_json({"config": cfg.to_json(), "results": [s.to_json() for s in scores], "errors": errors}, args.out)
    return 1 if errors else 0


def cmd_eval(args, cfg: RunConfig) -> int:
    from tapret.experiments import GridRunner, Workload

    queries, qerr = load_corpus(args.queries, role=Role.QUERY)
    corpus, cerr = load_corpus(args.corpus)
    backend = cfg.make_backend()
    results = GridRunner(cfg, backend, Workload(queries, corpus)).run()
    rows = []
    for r in results:
        row = r.to_json()
        row["config"] = {**cfg.to_json(), **r.config}
        rows.append(row)
    errors = qerr + cerr
    dump_json({"config": cfg.to_json(), "grid": cfg.grid, "results": rows, "errors": errors}, args.out)
    for r in results:
        c = r.config
        log.info("tap=%s prompt=%s framing=%s M=%s P@1=%.4f", c["tap"], c["prompt"], c["framing"], c["M"], r.precision_at_1)
    print(f"{len(results)} cells evaluated")
    return 1 if errors else 0


def cmd_probe(args, cfg: RunConfig) -> int:
    from tapret import probes

    backend = cfg.make_backend()
    flags = PROMPT_LADDER.get(args.probe_flags) or PromptFlags.parse(args.probe_flags)
    layers = range(args.first_layer, backend.descriptor.n_layers + 1) if args.first_layer else None
    kind = args.kind
    if kind == "alpha":
        report = probes.sublayer_shift_profile(backend, probes.load_probe_strings(), layers, flags)
    elif kind == "beta":
        report = probes.lexical_alignment_profile(backend, probes.load_probe_strings(), layers, flags)
    elif kind == "synonym":
        report = probes.synonym_similarity(backend, probes.load_synonym_pairs(), layers, flags)
    elif kind == "framing":
        report = probes.framing_bias_report(backend, [get_framing(n) for n in FRAMING_PRESETS])
    elif kind == "wordprob":
        rows = probes.word_probability_table(backend, args.text or "A dog runs across a sunny park.", flags, args.top_k)
        report = probes.ProbeReport(
            probes.ProbeKind.WORD_PROB,
            scalars={f"{i:03d}:{r.token_id}:{r.token}": r.probability for i, r in enumerate(rows)},
            metadata={"backend_id": backend.id, "samples": 1, "table": [vars(r) for r in rows]},
        )
    else:
        report = probes.gradient_report(backend, n_samples=args.samples, seed=cfg.seed)
    payload = report.to_json()
    payload["config"] = cfg.to_json()
    dump_json(payload, args.out)
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
    return 0


def cmd_rag(args, cfg: RunConfig) -> int:
    embedder = make_embedder(cfg)
    retriever, errors = _retriever(cfg, args, embedder)
    ans = rag_answer(retriever, query_from_args(args), cfg.K, cfg.M, max_new_tokens=cfg.max_new_tokens)
    if ans.error:
        errors.append({"error": ans.error})
    dump_json(
        {
            "config": cfg.to_json(),
            "answer_text": ans.answer_text,
            "evidence": [s.to_json() for s in ans.evidence],
            "prompt": ans.prompt,
            "errors": errors,
        },
        args.out,
    )
    return 1 if errors else 0


def build_parser() -> argparse.ArgumentParser:
    common = common_parser()
    parser = argparse.ArgumentParser(prog="tapret", description="Training-free two-stage retrieval toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("embed", parents=[common], help="embed a JSONL corpus into a store")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--role", choices=[r.value for r in Role], default="target")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("index", parents=[common], help="merge embedding stores into one index file")
    p.add_argument("stores", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    for name, func, helptext in (
        ("search", cmd_search, "two-stage search over a corpus"),
        ("rag", cmd_rag, "retrieve, rerank and answer with one backend"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--corpus", required=True)
        p.add_argument("--store", help="precomputed embedding store for the corpus")
        p.add_argument("--text", default="", help="query text")
        p.add_argument("--image", action="append", help="query image reference (repeatable)")
        if name == "search":
            p.add_argument("--queries", help="JSONL file of queries instead of --text")
        p.add_argument("--out")
        p.set_defaults(func=func)

    p = sub.add_parser("rerank", parents=[common], help="score a query against corpus candidates")
    p.add_argument("--corpus", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--image", action="append")
    p.add_argument("--ids", nargs="*", help="restrict to these candidate ids")
    p.add_argument("--out")
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("eval", parents=[common], help="Precision@1 over an ablation grid")
    p.add_argument("--queries", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--grid", help="comma list of axes to sweep: tap,prompt,framing,M")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", parents=[common], help="run a diagnostic probe")
    p.add_argument("kind", choices=PROBE_KINDS)
    p.add_argument("--out")
    p.add_argument("--csv", help="also write a plot-ready CSV table")
    p.add_argument("--probe-flags", help="prompt flags for probe inputs (default: none)", default="none")
    p.add_argument("--first-layer", type=int, help="probe layers first..L (default: all)")
    p.add_argument("--text", help="input for wordprob")
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--samples", type=int, default=100, help="random h' draws for gradient")
    p.set_defaults(func=cmd_probe)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TapretError, OSError, KeyError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
