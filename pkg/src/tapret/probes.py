"""Diagnostics for how the last MLP pulls hidden states toward the LM head, and for label-framing bias.

Per-layer probes run each input through the one-word-summary prompt and read
the residual stream at the last prompt position.

    shift      alpha_attn[l] = cos(h_mlp[l-1], h_attn[l])
               alpha_mlp[l]  = cos(h_attn[l],  h_mlp[l])
    alignment  beta_*[l]     = cos(h_*[l], w[y*]),  y* = greedy next token
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

from tapret.backend.base import Backend, SubLayerTap, Sublayer, all_taps
from tapret.errors import EmptySampleError, InvalidTapError
from tapret.prompts import ModalityInput, PromptFlags, build_embed_prompt, load_template_file, render
from tapret.reranker import FramingConfig


class ProbeKind(enum.Enum):
    ALPHA = "alpha"
    BETA = "beta"
    SYNONYM = "synonym"
    FRAMING = "framing"
    WORD_PROB = "wordprob"
    GRADIENT = "gradient"


@dataclass
class LayerStat:
    layer: int
    sublayer: str
    mean: float
    std: float
    n: int


@dataclass
class ProbeReport:
    kind: ProbeKind
    per_layer: list[LayerStat] = field(default_factory=list)
    scalars: dict[str, float] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def row(self, layer: int, sublayer: str | Sublayer) -> LayerStat:
        sub = sublayer.value if isinstance(sublayer, Sublayer) else sublayer
        for r in self.per_layer:
            if r.layer == layer and r.sublayer == sub:
                return r
        raise KeyError((layer, sub))

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "per_layer": [asdict(r) for r in self.per_layer],
            "scalars": self.scalars,
            "metadata": self.metadata,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if self.per_layer:
            w.writerow(["kind", "layer", "sublayer", "mean", "std", "n"])
            for r in self.per_layer:
                w.writerow([self.kind.value, r.layer, r.sublayer, repr(r.mean), repr(r.std), r.n])
        else:
            w.writerow(["kind", "name", "value"])
            for k in sorted(self.scalars):
                w.writerow([self.kind.value, k, repr(self.scalars[k])])
        return buf.getvalue()


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity clipped to [-1, 1]; identical vectors give exactly 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.array_equal(a, b) and np.any(a):
        return 1.0
    c = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    return min(1.0, max(-1.0, c))


def _layers(backend: Backend, layer_range: Iterable[int] | None) -> list[int]:
    L = backend.descriptor.n_layers
    layers = list(layer_range) if layer_range is not None else list(range(1, L + 1))
    for l in layers:
        if not 1 <= l <= L:
            raise InvalidTapError(f"probe layer {l} outside 1..{L}")
    return sorted(set(layers))


def _last_states(backend: Backend, inp: ModalityInput, flags: PromptFlags | None, task_hint=None):
    spec = build_embed_prompt(inp, flags, task_hint)
    tokens = backend.encode_pieces(spec.pieces)
    return backend.forward_with_taps(tokens, all_taps(backend.descriptor.n_layers))


def _aggregate(kind, samples: dict[tuple[int, str], list[float]], backend: Backend, n: int) -> ProbeReport:
    order = {"attn": 0, "mlp": 1}
    rows = []
    for (layer, sub), vals in sorted(samples.items(), key=lambda kv: (kv[0][0], order[kv[0][1]])):
        arr = np.asarray(vals)
        rows.append(LayerStat(layer, sub, float(arr.mean()), float(arr.std()), len(vals)))
    return ProbeReport(kind, rows, metadata={"samples": n, "backend_id": backend.id})


def _as_inputs(items) -> list[ModalityInput]:
    return [x if isinstance(x, ModalityInput) else ModalityInput.text(x) for x in items]


def sublayer_shift_profile(
    backend: Backend, inputs: Sequence, layer_range: Iterable[int] | None = None, flags: PromptFlags | None = None
) -> ProbeReport:
    inputs = _as_inputs(inputs)
    if not inputs:
        raise EmptySampleError("shift profile needs at least one input")
    layers = _layers(backend, layer_range)
    samples: dict[tuple[int, str], list[float]] = {}
    for inp in inputs:
        b = _last_states(backend, inp, flags)
        for l in layers:
            h_prev = b.state(l - 1, Sublayer.MLP)
            h_attn = b.state(l, Sublayer.ATTN)
            h_mlp = b.state(l, Sublayer.MLP)
            samples.setdefault((l, "attn"), []).append(cosine(h_prev, h_attn))
            samples.setdefault((l, "mlp"), []).append(cosine(h_attn, h_mlp))
    return _aggregate(ProbeKind.ALPHA, samples, backend, len(inputs))


def lexical_alignment_profile(
    backend: Backend, inputs: Sequence, layer_range: Iterable[int] | None = None, flags: PromptFlags | None = None
) -> ProbeReport:
    inputs = _as_inputs(inputs)
    if not inputs:
        raise EmptySampleError("alignment profile needs at least one input")
    layers = _layers(backend, layer_range)
    samples: dict[tuple[int, str], list[float]] = {}
    predicted = []
    for inp in inputs:
        b = _last_states(backend, inp, flags)
        w = backend.lm_head_column(b.predicted_token)
        predicted.append(b.predicted_token)
        for l in layers:
            for sub in Sublayer:
                samples.setdefault((l, sub.value), []).append(cosine(b.state(l, sub), w))
    report = _aggregate(ProbeKind.BETA, samples, backend, len(inputs))
    report.metadata["predicted_tokens"] = predicted
    return report


def synonym_similarity(
    backend: Backend,
    pairs: Sequence[tuple[str, str]],
    layer_range: Iterable[int] | None = None,
    flags: PromptFlags | None = None,
) -> ProbeReport:
    if not pairs:
        raise EmptySampleError("synonym probe needs at least one pair")
    layers = _layers(backend, layer_range)
    samples: dict[tuple[int, str], list[float]] = {}
    for a, b in pairs:
        ba = _last_states(backend, ModalityInput.text(a), flags)
        bb = _last_states(backend, ModalityInput.text(b), flags)
        for l in layers:
            for sub in Sublayer:
                samples.setdefault((l, sub.value), []).append(cosine(ba.state(l, sub), bb.state(l, sub)))
    return _aggregate(ProbeKind.SYNONYM, samples, backend, len(pairs))


@dataclass(frozen=True)
class WordProb:
    token_id: int
    token: str
    probability: float


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def word_probability_table(
    backend: Backend,
    inp: ModalityInput | str,
    flags: PromptFlags | None = None,
    top_k: int = 10,
    task_hint: str | None = None,
) -> list[WordProb]:
    """Top-k next-token probabilities at the embedding position.

    The full stack (final MLP and final norm included) feeds the LM head here;
    this is a visualization aid, not the embedding path.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    V = backend.descriptor.vocab_size
    if top_k > V:
        warnings.warn(f"top_k={top_k} exceeds vocabulary size {V}; clipping", stacklevel=2)
        top_k = V
    inp = inp if isinstance(inp, ModalityInput) else ModalityInput.text(inp)
    spec = build_embed_prompt(inp, flags, task_hint)
    bundle = backend.forward_with_taps(backend.encode_pieces(spec.pieces), [])
    p = softmax(bundle.final_logits)
    ids = np.arange(V)
    order = np.lexsort((ids, -p))[:top_k]
    return [WordProb(int(i), backend.decode([int(i)]), float(p[i])) for i in order]


# -- framing bias -----------------------------------------------------------


def context_free_logits(backend: Backend, framing: FramingConfig, template_file: str = "rerank"):
    """Option logits for the context-free instruction in both label orders.

    Returns ``(z_first_order, z_swapped_order)``, each a pair indexed like
    ``framing.options``.
    """
    tmpl = load_template_file(template_file)["context_free"]
    opt_ids = framing.option_ids(backend)
    a, b = (o.label_text for o in framing.options)
    out = []
    for first, second in ((a, b), (b, a)):
        pieces = render(tmpl, first=first, second=second)
        tokens = backend.encode_pieces(pieces)
        out.append(tuple(backend.option_logits(tokens, opt_ids)))
    return out[0], out[1]


def framing_bias_detail(backend: Backend, framing: FramingConfig) -> dict:
    (z1a, z2a), (z1b, z2b) = context_free_logits(backend, framing)
    z1 = (z1a + z1b) / 2.0
    z2 = (z2a + z2b) / 2.0
    gap = z1 - z2
    p1 = 1.0 / (1.0 + math.exp(-gap)) if gap >= 0 else math.exp(gap) / (1.0 + math.exp(gap))
    # |2*sigmoid(g) - 1| == tanh(|g|/2), symmetric in the labels by construction
    bias = math.tanh(abs(gap) / 2.0)
    return {"framing": framing.name, "logit_first": z1, "logit_second": z2, "p_first": p1, "bias": bias}


def framing_bias(backend: Backend, framing: FramingConfig) -> float:
    """0 when the model has no context-free preference between the labels, 1 at full skew."""
    return framing_bias_detail(backend, framing)["bias"]


def framing_bias_report(backend: Backend, framings: Sequence[FramingConfig]) -> ProbeReport:
    report = ProbeReport(ProbeKind.FRAMING, metadata={"backend_id": backend.id, "samples": len(framings)})
    details = []
    for f in framings:
        d = framing_bias_detail(backend, f)
        report.scalars[f.name] = d["bias"]
        details.append(d)
    report.metadata["details"] = details
    return report


# -- gradient identity ------------------------------------------------------


@dataclass
class GradientCheck:
    analytic: np.ndarray
    numeric: np.ndarray
    max_abs_diff: float
    span_residual: float


def cross_entropy(W: np.ndarray, h: np.ndarray, target: int) -> float:
    z = W.T @ h
    m = z.max()
    return float(m + math.log(np.exp(z - m).sum()) - z[target])


def analytic_gradient(W: np.ndarray, h: np.ndarray, target: int) -> np.ndarray:
    """sum_v p(v|h) w_v - w_target."""
    p = softmax(W.T @ h)
    return W @ p - W[:, target]


def gradient_identity_check(W: np.ndarray, h_prime: np.ndarray, target: int, step: float = 1e-3) -> GradientCheck:
    """Compare the closed-form cross-entropy gradient with central differences.

    ``span_residual`` is the norm of the gradient left over after least-squares
    projection onto the span of the LM-head columns.
    """
    W = np.asarray(W, dtype=np.float64)
    h = np.asarray(h_prime, dtype=np.float64)
    if h.shape != (W.shape[0],):
        raise ValueError(f"h_prime must have length {W.shape[0]}")
    g = analytic_gradient(W, h, target)
    num = np.empty_like(h)
    for i in range(h.size):
        e = np.zeros_like(h)
        e[i] = step
        num[i] = (cross_entropy(W, h + e, target) - cross_entropy(W, h - e, target)) / (2 * step)
    coef, *_ = np.linalg.lstsq(W, g, rcond=None)
    resid = float(np.linalg.norm(W @ coef - g))
    return GradientCheck(g, num, float(np.max(np.abs(g - num))), resid)


def gradient_report(backend: Backend, n_samples: int = 100, seed: int = 0, step: float = 1e-3) -> ProbeReport:
    rng = np.random.default_rng(seed)
    W = backend.unembedding()
    d, V = W.shape
    diffs, resids = [], []
    for _ in range(n_samples):
        h = rng.normal(size=d)
        target = int(rng.integers(V))
        chk = gradient_identity_check(W, h, target, step)
        diffs.append(chk.max_abs_diff)
        resids.append(chk.span_residual)
    return ProbeReport(
        ProbeKind.GRADIENT,
        scalars={"max_abs_diff": float(max(diffs)), "max_span_residual": float(max(resids))},
        metadata={"samples": n_samples, "backend_id": backend.id, "seed": seed, "step": step},
    )


# -- shipped probe data -----------------------------------------------------


def load_synonym_pairs() -> list[tuple[str, str]]:
    text = resources.files("tapret.data").joinpath("synonyms.txt").read_text(encoding="utf-8")
    pairs = []
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            a, b = line.split(",")
            pairs.append((a.strip(), b.strip()))
    return pairs


def load_probe_strings() -> list[str]:
    text = resources.files("tapret.data").joinpath("probe_strings.txt").read_text(encoding="utf-8")
    return [l.strip() for l in text.splitlines() if l.strip() and not l.startswith("#")]
