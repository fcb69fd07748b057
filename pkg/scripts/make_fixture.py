"""Write the synthetic caption-retrieval fixture as query/corpus JSONL files.

    python scripts/make_fixture.py --out fixtures/ --queries 12 --distractors 12
    python scripts/make_fixture.py --out fixtures/ --constructed   # gold at known embedding ranks
"""

import argparse
from pathlib import Path

from tapret.embedder import EmbedConfig, Embedder
from tapret.backend import ToyBackend, ToyConfig
from tapret.fixtures import constructed_task, synthetic_task
from tapret.prompts import PROMPT_LADDER
from tapret.retrieval import save_corpus


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="fixtures")
    ap.add_argument("--queries", type=int, default=12)
    ap.add_argument("--distractors", type=int, default=12)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--constructed", action="store_true", help="assign gold by toy-embedding rank (pool of 8)")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.constructed:
        embedder = Embedder(ToyBackend(ToyConfig(seed=1729)), EmbedConfig(flags=PROMPT_LADDER["d"]))
        queries, corpus = constructed_task(embedder, args.queries, args.distractors, seed=args.seed)
    else:
        queries, corpus = synthetic_task(args.queries, args.distractors, seed=args.seed)
    save_corpus(queries, out / "queries.jsonl")
    save_corpus(corpus, out / "corpus.jsonl")
    print(f"wrote {len(queries)} queries and {len(corpus)} candidates to {out}")


if __name__ == "__main__":
    main()
