"""Write every layer-wise probe for one backend as CSV tables.

    python scripts/run_probes.py --out probes/ --backend-param seed=1729
"""

import argparse
from pathlib import Path

from tapret import probes
from tapret.config import RunConfig, parse_kv
from tapret.reranker import FRAMING_PRESETS, get_framing


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="probes")
    ap.add_argument("--backend", default="toy")
    ap.add_argument("--backend-param", action="append", default=[])
    ap.add_argument("--samples", type=int, default=100)
    args = ap.parse_args()

    backend = RunConfig(backend=args.backend, backend_params=parse_kv(args.backend_param)).make_backend()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    strings = probes.load_probe_strings()
    reports = {
        "alpha": probes.sublayer_shift_profile(backend, strings),
        "beta": probes.lexical_alignment_profile(backend, strings),
        "synonym": probes.synonym_similarity(backend, probes.load_synonym_pairs()),
        "framing": probes.framing_bias_report(backend, [get_framing(n) for n in FRAMING_PRESETS]),
        "gradient": probes.gradient_report(backend, n_samples=args.samples),
    }
    for name, rep in reports.items():
        (out / f"{name}.csv").write_text(rep.to_csv())
        (out / f"{name}.json").write_text(rep.dumps())
    alpha = reports["alpha"]
    for row in alpha.per_layer:
        print(f"alpha {row.sublayer}@{row.layer}: {row.mean:.4f} +- {row.std:.4f}")
    print("framing bias:", {k: round(v, 4) for k, v in reports["framing"].scalars.items()})
    print(f"wrote {len(reports)} probe tables to {out}")


if __name__ == "__main__":
    main()
