"""BLEU, edit distance and the reliability analyses (consistency, degradation
curve, sentence-BLEU histogram)."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np

from .autograd import no_grad
from .rng import stream

MAX_ORDER = 4


def ngram_counts(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def clipped_matches(hyp, ref, n):
    """(clipped matching n-grams, total hypothesis n-grams)."""
    h, r = ngram_counts(hyp, n), ngram_counts(ref, n)
    return sum(min(c, r[g]) for g, c in h.items()), max(len(hyp) - n + 1, 0)


def brevity_penalty(hyp_len, ref_len):
    if hyp_len == 0:
        return 0.0
    return 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)


def corpus_bleu(hypotheses, references):
    """Corpus BLEU-4 in [0, 100] from pooled clipped n-gram counts, no smoothing."""
    if len(hypotheses) != len(references):
        raise ValueError("corpus_bleu: hypothesis and reference counts differ")
    if not hypotheses:
        raise ValueError("corpus_bleu: empty hypothesis set")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            m, t = clipped_matches(hyp, ref, n)
            matches[n - 1] += m
            totals[n - 1] += t
    if min(matches) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / MAX_ORDER
    return 100.0 * brevity_penalty(hyp_len, ref_len) * math.exp(log_p)


def sentence_bleu(hyp, ref):
    """Sentence BLEU-4 with add-one smoothing on the n >= 2 precisions."""
    if not ref:
        raise ValueError("sentence_bleu: empty reference")
    m1, t1 = clipped_matches(hyp, ref, 1)
    if m1 == 0:
        return 0.0
    log_p = math.log(m1 / t1)
    for n in range(2, MAX_ORDER + 1):
        m, t = clipped_matches(hyp, ref, n)
        log_p += math.log((m + 1) / (t + 1))
    return 100.0 * brevity_penalty(len(hyp), len(ref)) * math.exp(log_p / MAX_ORDER)


def edit_distance(a, b):
    """Levenshtein distance with unit insert/delete/substitute costs."""
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def token_accuracy(hypotheses, references):
    """Fraction of reference positions (EOS included) matched by the hypothesis."""
    hit = total = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = list(hyp) + [None], list(ref) + [None]
        hit += sum(a == b for a, b in zip(h, r))
        total += len(r)
    if total == 0:
        raise ValueError("token_accuracy: no references")
    return hit / total


def _pair_bleu(a, b):
    if not a and not b:
        return 100.0
    if not a or not b:
        return 0.0
    return 0.5 * (sentence_bleu(a, b) + sentence_bleu(b, a))


@dataclass
class ConsistencyReport:
    exact_match_rate: float
    mean_pairwise_output_bleu: float
    mean_encoder_distance: float
    n_sets: int
    n_pairs: int
    skipped_sets: int = 0


def consistency_report(model, params, equiv_sets, batch_size=256):
    """Agreement of greedy decodes (and pooled encoder states) within each set."""
    usable = [s for s in equiv_sets if len(s.x_s) >= 2]
    skipped = len(equiv_sets) - len(usable)
    if not usable:
        raise ValueError("consistency_report: no set has two or more members")
    flat = [x for s in usable for x in s.x_s]
    outputs, pooled = [], []
    with no_grad():
        for i in range(0, len(flat), batch_size):
            chunk = flat[i:i + batch_size]
            outputs.extend(model.greedy_decode(params, chunk))
            pooled.append(model.encode(params, chunk).pooled())
    pooled = np.concatenate(pooled)
    exact = bleu = dist = 0.0
    n_pairs = 0
    start = 0
    for s in usable:
        idx = range(start, start + len(s.x_s))
        for i, j in combinations(idx, 2):
            exact += outputs[i] == outputs[j]
            bleu += _pair_bleu(outputs[i], outputs[j])
            diff = pooled[i] - pooled[j]
            dist += float(diff @ diff)
            n_pairs += 1
        start += len(s.x_s)
    return ConsistencyReport(exact / n_pairs, bleu / n_pairs, dist / n_pairs, len(usable), n_pairs, skipped)


def translate(model, params, sources, batch_size=256, beam=None, length_penalty=0.6):
    if beam:
        return [model.beam_decode(params, x, beam=beam, length_penalty=length_penalty) for x in sources]
    out = []
    for i in range(0, len(sources), batch_size):
        out.extend(model.greedy_decode(params, sources[i:i + batch_size]))
    return out


@dataclass
class DegradationCurve:
    proportions: list
    bleu: list

    def drop(self):
        return self.bleu[0] - self.bleu[-1]


def replacement_order(n, seed):
    return stream(seed, "degradation").permutation(n)


def degradation_curve(model, params, samples, paraphrases, proportions=(0.0, 0.25, 0.5, 0.75, 1.0),
                      seed=0, beam=None):
    """Corpus BLEU when a seeded fraction of inputs is swapped for a paraphrase.

    ``samples`` are ``(x, y)`` pairs and ``paraphrases[k]`` an equivalent
    source for sample ``k``.  Replaced subsets are nested across proportions.
    """
    for p in proportions:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"proportion {p} outside [0, 1]")
    n = len(samples)
    order = replacement_order(n, seed)
    refs = [y for _, y in samples]
    cache = {}

    def outputs(sources):
        key = tuple(tuple(x) for x in sources)
        missing = [x for x in dict.fromkeys(key) if x not in cache]
        if missing:
            for x, h in zip(missing, translate(model, params, [list(m) for m in missing], beam=beam)):
                cache[x] = h
        return [cache[x] for x in key]

    scores = []
    for p in proportions:
        chosen = set(order[: int(round(p * n))].tolist())
        sources = [paraphrases[k] if k in chosen else samples[k][0] for k in range(n)]
        scores.append(corpus_bleu(outputs(sources), refs))
    return DegradationCurve(list(proportions), scores)


DEFAULT_BIN_EDGES = (0, 20, 40, 60, 80, 100)


def histogram(scores, bin_edges=DEFAULT_BIN_EDGES):
    """Counts per ``[lo, hi)`` bin; the last bin is closed."""
    edges = list(bin_edges)
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bin edges must be strictly increasing")
    counts = [0] * (len(edges) - 1)
    for s in scores:
        for k in range(len(counts)):
            last = k == len(counts) - 1
            if edges[k] <= s < edges[k + 1] or (last and s == edges[-1]):
                counts[k] += 1
                break
    return counts


def bleu_histogram(model, params, samples, bin_edges=DEFAULT_BIN_EDGES, beam=None):
    hyps = translate(model, params, [x for x, _ in samples], beam=beam)
    return histogram([sentence_bleu(h, y) for h, (_, y) in zip(hyps, samples)], bin_edges)


def low_quality_count(counts, bin_edges=DEFAULT_BIN_EDGES, threshold=40):
    return sum(c for c, lo in zip(counts, bin_edges) if lo < threshold)


@dataclass
class MetricsReport:
    run_id: str
    seed: int
    sections: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)
