"""Equivalent-source generation: alignment-driven word substitution followed by
noisy round-trip translation and EditDist x Overlap candidate selection."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .metrics import edit_distance
from .model import N_RESERVED
from .rng import derive_seed, stream
from .trainer import EquivSet

log = logging.getLogger(__name__)


@dataclass
class GenConfig:
    replace_ratio: float = 0.2
    top_k: int = 20
    n_round_trip: int = 8
    select_count: int = 1
    noise_sigma: float = 1.0
    em_iterations: int = 5
    maximize: bool = True
    max_pad_attempts: int = 20
    seed: int = 0

    def validate(self):
        errors = []
        if not 0.0 < self.replace_ratio <= 1.0:
            errors.append("replace_ratio must lie in (0, 1]")
        if self.top_k < 1:
            errors.append("top_k must be >= 1")
        if self.n_round_trip < 1:
            errors.append("n_round_trip must be >= 1")
        if not 0 <= self.select_count < self.n_round_trip:
            errors.append("select_count must satisfy 0 <= select_count < n_round_trip")
        if self.noise_sigma < 0:
            errors.append("noise_sigma must be non-negative")
        if self.em_iterations < 1:
            errors.append("em_iterations must be >= 1")
        return errors

    def digest(self):
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class GenStats:
    skipped_positions: int = 0
    dropped_candidates: int = 0
    padded_members: int = 0
    short_sets: int = 0


class AlignTable:
    """Lexical table p(t | s) with shared-translation source neighbours.

    ``similar[s]`` lists the source words ``s'`` ranked by
    ``sum_t p(t|s) p(t|s')``, best first, at most ``top_k`` long.
    """

    def __init__(self, src_words, tgt_words, prob, log_likelihoods, top_k=20):
        self.src_words = list(src_words)
        self.tgt_words = list(tgt_words)
        self.prob = np.asarray(prob, dtype=np.float64)
        self.log_likelihoods = list(log_likelihoods)
        self.top_k = top_k
        self._src_index = {w: i for i, w in enumerate(self.src_words)}
        self._tgt_index = {w: i for i, w in enumerate(self.tgt_words)}
        self.similarity = self.prob @ self.prob.T
        self.similar = {w: self._rank(i) for i, w in enumerate(self.src_words)}

    def _rank(self, i):
        row = self.similarity[i]
        order = np.lexsort((np.arange(len(row)), -row))
        ranked = [self.src_words[j] for j in order if j != i and row[j] > 0.0]
        return ranked[: self.top_k]

    def p(self, tgt, src):
        i, j = self._src_index.get(src), self._tgt_index.get(tgt)
        return 0.0 if i is None or j is None else float(self.prob[i, j])

    def translations(self, src, k=None):
        """``(target, probability)`` pairs for ``src``, most probable first."""
        i = self._src_index[src]
        row = self.prob[i]
        order = np.lexsort((np.arange(len(row)), -row))[: k or len(row)]
        return [(self.tgt_words[j], float(row[j])) for j in order]

    def candidates(self, src):
        return self.similar.get(src, [])

    def to_dict(self):
        return {
            "src_words": self.src_words,
            "tgt_words": self.tgt_words,
            "prob": self.prob.tolist(),
            "log_likelihoods": self.log_likelihoods,
            "top_k": self.top_k,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["src_words"], d["tgt_words"], d["prob"], d["log_likelihoods"], d["top_k"])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _index(pairs):
    src, tgt = {}, {}
    for x, y in pairs:
        if not x or not y:
            raise ValueError("train_aligner: empty sentence in corpus")
        for w in x:
            src.setdefault(w, len(src))
        for w in y:
            tgt.setdefault(w, len(tgt))
    return src, tgt


def corpus_log_likelihood(prob, encoded):
    """sum over pairs and target words of log((1/|x|) sum_i p(y_j | x_i))."""
    total = 0.0
    for xs, ys in encoded:
        total += float(np.log(prob[np.ix_(xs, ys)].sum(axis=0) / len(xs)).sum())
    return total


def em_step(prob, encoded):
    """One EM update of p(t | s); the alignment posterior factorizes per target word."""
    counts = np.zeros_like(prob)
    for xs, ys in encoded:
        sub = prob[np.ix_(xs, ys)]
        np.add.at(counts, (xs[:, None], ys[None, :]), sub / sub.sum(axis=0, keepdims=True))
    return counts / counts.sum(axis=1, keepdims=True)


def train_aligner(pairs, iterations=5, top_k=20):
    """Lexical translation table from EM over ``(source, target)`` token sequences.

    Starts from the uniform table; ``log_likelihoods[k]`` is the corpus
    log-likelihood after ``k`` updates.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("train_aligner: empty corpus")
    if iterations < 1:
        raise ValueError("train_aligner: need at least one EM iteration")
    src, tgt = _index(pairs)
    encoded = [(np.array([src[w] for w in x]), np.array([tgt[w] for w in y])) for x, y in pairs]
    prob = np.full((len(src), len(tgt)), 1.0 / len(tgt))
    lls = [corpus_log_likelihood(prob, encoded)]
    for _ in range(iterations):
        prob = em_step(prob, encoded)
        lls.append(corpus_log_likelihood(prob, encoded))
    return AlignTable(list(src), list(tgt), prob, lls, top_k)


def replacement_count(n, ratio):
    return min(n, math.ceil(round(ratio * n, 9)))


def substitute_words(x, table, cfg, seed, stats=None):
    """Replace ``ceil(ratio * len)`` uniformly chosen positions by a uniform draw
    from each word's similar-word list.  Reserved ids are never touched."""
    if not x:
        raise ValueError("substitute_words: empty input")
    rng = stream(seed, "substitute")
    eligible = [i for i, w in enumerate(x) if w >= N_RESERVED]
    count = min(len(eligible), replacement_count(len(x), cfg.replace_ratio))
    out = list(x)
    if count == 0:
        return out
    for pos in sorted(rng.choice(len(eligible), size=count, replace=False).tolist()):
        i = eligible[pos]
        cands = table.candidates(x[i])
        if not cands:
            log.info("no substitution candidates for %r; position %d kept", x[i], i)
            if stats is not None:
                stats.skipped_positions += 1
            continue
        out[i] = cands[int(rng.integers(len(cands)))]
    return out


@dataclass
class RoundTrip:
    source: list
    pivot: list


def noisy_round_trip(x_sub, fwd, bwd, cfg, seed, stats=None):
    """``J`` noisy forward decodes of ``x_sub`` and their noise-free back-translations.

    ``fwd`` and ``bwd`` are ``(model, params)`` pairs.  Candidates whose pivot
    or back-translation is empty or unterminated are dropped.
    """
    fwd_model, fwd_params = fwd
    bwd_model, bwd_params = bwd
    J = cfg.n_round_trip
    seeds = [derive_seed(seed, "round_trip", j) for j in range(J)]
    pivots, done = fwd_model.greedy_decode(fwd_params, [list(x_sub)] * J, noise_sigma=cfg.noise_sigma,
                                           seed=seeds, with_finished=True)
    kept = [p for p, ok in zip(pivots, done) if p and ok]
    dropped = J - len(kept)
    out = []
    if kept:
        sources, done = bwd_model.greedy_decode(bwd_params, kept, with_finished=True)
        for src, piv, ok in zip(sources, kept, done):
            if src and ok:
                out.append(RoundTrip(src, piv))
            else:
                dropped += 1
    if dropped:
        log.info("round trip dropped %d degenerate candidates", dropped)
        if stats is not None:
            stats.dropped_candidates += dropped
    return out


def overlap_ratio(a, b):
    sa, sb = set(a), set(b)
    union = sa | sb
    return len(sa & sb) / len(union) if union else 0.0


def score_candidates(y_primes, y):
    """Normalized edit distance times token-set Jaccard overlap, per candidate."""
    weights = []
    for yp in y_primes:
        longest = max(len(yp), len(y))
        if longest == 0:
            weights.append(0.0)
            continue
        weights.append(edit_distance(yp, y) / longest * overlap_ratio(yp, y))
    return weights


def select_candidates(weights, k, maximize=True):
    """Indices of the ``k`` best non-zero weights; ties keep the earlier index."""
    live = [i for i, w in enumerate(weights) if w > 0.0]
    live.sort(key=lambda i: (-weights[i] if maximize else weights[i], i))
    return live[:k]


def build_equiv_set(x, y, fwd, bwd, table, cfg, seed, stats=None):
    """EquivSet ``[x] + selected`` and the weight of each selected member
    (``None`` for members padded by substitution alone)."""
    members, weights = [list(x)], []
    if cfg.select_count == 0:
        return EquivSet(list(x), list(y), members), weights
    seen = {tuple(x)}
    x_sub = substitute_words(x, table, cfg, derive_seed(seed, "step1"), stats)
    cands = noisy_round_trip(x_sub, fwd, bwd, cfg, seed, stats)
    scores = score_candidates([c.pivot for c in cands], y)
    for i in select_candidates(scores, len(scores), cfg.maximize):
        if len(weights) == cfg.select_count:
            break
        key = tuple(cands[i].source)
        if key in seen:
            continue
        seen.add(key)
        members.append(list(cands[i].source))
        weights.append(scores[i])
    attempt = 0
    while len(weights) < cfg.select_count and attempt < cfg.max_pad_attempts:
        alt = substitute_words(x, table, cfg, derive_seed(seed, "pad", attempt), stats)
        attempt += 1
        if tuple(alt) in seen:
            continue
        seen.add(tuple(alt))
        members.append(alt)
        weights.append(None)
        if stats is not None:
            stats.padded_members += 1
    if len(weights) < cfg.select_count:
        log.info("equivalence set short: %d of %d members", len(weights), cfg.select_count)
        if stats is not None:
            stats.short_sets += 1
    return EquivSet(list(x), list(y), members), weights


def cache_key(corpus_hash, cfg):
    return hashlib.sha256(f"{corpus_hash}:{cfg.digest()}".encode()).hexdigest()[:16]


def generate_equiv_sets(rows, fwd, bwd, table, cfg, stats=None):
    """One EquivSet per ``(x, y)`` row; sample ``k`` uses its own derived seed."""
    out = []
    for k, (x, y) in enumerate(rows):
        seed = derive_seed(cfg.seed, "equiv", k)
        es, weights = build_equiv_set(x, y, fwd, bwd, table, cfg, seed, stats)
        out.append((es, seed, weights))
    return out


def write_equiv_cache(path, generated):
    with open(path, "w", encoding="utf-8") as fh:
        for k, (es, seed, weights) in enumerate(generated):
            rec = {"id": k, "x": es.x, "y": es.y, "x_s": es.x_s, "seed": seed, "weights": weights}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_equiv_cache(path):
    sets = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                sets.append(EquivSet(rec["x"], rec["y"], rec["x_s"]))
    return sets


def flip_pairs(rows):
    return [(y, x) for x, y in rows]

