"""Synthetic many-to-one translation task with a ground-truth paraphrase oracle.

Concepts alternate between two word classes: even ids are modifiers, odd ids
are heads.  A concept sequence is canonical when every positional pair
``(2k, 2k+1)`` that mixes the classes has the modifier first.  The target is
the canonical sequence spelled with one token per concept.  The source picks a
synonym per concept and swaps each mixed pair with probability ``swap_prob``,
so the target stays a deterministic function of the source.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import asdict, dataclass
from pathlib import Path

from .model import Vocab
from .rng import stream

MAX_VOCAB = 50_000


class CorpusError(ValueError):
    pass


@dataclass
class SynthSpec:
    n_concepts: int = 60
    synonyms_per_concept: int = 3
    min_len: int = 3
    max_len: int = 10
    swap_prob: float = 0.3
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 400
    seed: int = 7

    def validate(self):
        errors = []
        if self.n_concepts < 1 or self.synonyms_per_concept < 1:
            errors.append("n_concepts and synonyms_per_concept must be >= 1")
        if not 1 <= self.min_len <= self.max_len:
            errors.append("need 1 <= min_len <= max_len")
        if not 0.0 <= self.swap_prob <= 1.0:
            errors.append("swap_prob must lie in [0, 1]")
        if min(self.n_train, self.n_dev, self.n_test) < 0:
            errors.append("split sizes must be non-negative")
        if self.n_concepts * self.synonyms_per_concept > MAX_VOCAB:
            errors.append(f"source vocabulary would exceed {MAX_VOCAB} tokens")
        return errors

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def source_token(concept, synonym):
    return f"s{concept}_{synonym}"


def target_token(concept):
    return f"t{concept}"


def is_modifier(concept):
    return concept % 2 == 0


def canonicalize(concepts):
    out = list(concepts)
    for k in range(0, len(out) - 1, 2):
        a, b = out[k], out[k + 1]
        if not is_modifier(a) and is_modifier(b):
            out[k], out[k + 1] = b, a
    return out


def mixed_pairs(concepts):
    return [k for k in range(0, len(concepts) - 1, 2)
            if is_modifier(concepts[k]) != is_modifier(concepts[k + 1])]


class SynthTask:
    def __init__(self, spec):
        errors = spec.validate()
        if errors:
            raise CorpusError("; ".join(errors))
        self.spec = spec
        self._concept_of = {
            source_token(c, s): c
            for c in range(spec.n_concepts) for s in range(spec.synonyms_per_concept)
        }

    def source_vocab(self):
        return Vocab(source_token(c, s) for c in range(self.spec.n_concepts)
                     for s in range(self.spec.synonyms_per_concept))

    def target_vocab(self):
        return Vocab(target_token(c) for c in range(self.spec.n_concepts))

    def render(self, concepts, rng):
        """Surface source tokens for a canonical concept sequence."""
        order = list(concepts)
        for k in mixed_pairs(order):
            if self.spec.swap_prob > 0 and rng.random() < self.spec.swap_prob:
                order[k], order[k + 1] = order[k + 1], order[k]
        syn = self.spec.synonyms_per_concept
        return [source_token(c, int(rng.integers(syn))) for c in order]

    def target(self, concepts):
        return [target_token(c) for c in canonicalize(concepts)]

    def decode_concepts(self, tokens):
        """Concept per source position, or ``None`` if any token is unknown."""
        try:
            return [self._concept_of[t] for t in tokens]
        except KeyError:
            return None

    def canonical_concepts(self, tokens):
        concepts = self.decode_concepts(tokens)
        return None if concepts is None else canonicalize(concepts)

    def reference(self, tokens):
        concepts = self.canonical_concepts(tokens)
        if concepts is None:
            raise CorpusError(f"not decodable: {' '.join(tokens)}")
        return self.target(concepts)

    def _sample(self, rng):
        spec = self.spec
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        concepts = canonicalize(rng.integers(spec.n_concepts, size=n).tolist())
        return self.render(concepts, rng), self.target(concepts)

    def generate(self):
        spec = self.spec
        rng = stream(spec.seed, "corpus")
        sizes = {"train": spec.n_train, "dev": spec.n_dev, "test": spec.n_test}
        seen = set()
        corpus = {}
        budget = 50 * sum(sizes.values()) + 1000
        for split, size in sizes.items():
            rows = []
            while len(rows) < size:
                budget -= 1
                if budget < 0:
                    raise CorpusError("task too small for the requested split sizes")
                x, y = self._sample(rng)
                key = " ".join(x)
                if key in seen:
                    continue
                seen.add(key)
                rows.append((x, y))
            corpus[split] = rows
        return corpus

    def n_renderings(self, tokens):
        concepts = self.canonical_concepts(tokens)
        if concepts is None:
            raise CorpusError(f"not decodable: {' '.join(tokens)}")
        swaps = 2 ** len(mixed_pairs(concepts)) if self.spec.swap_prob > 0 else 1
        return self.spec.synonyms_per_concept ** len(concepts) * swaps

    def _all_renderings(self, concepts):
        syn = self.spec.synonyms_per_concept
        pairs = mixed_pairs(concepts) if self.spec.swap_prob > 0 else []
        for flips in itertools.product((False, True), repeat=len(pairs)):
            order = list(concepts)
            for k, flip in zip(pairs, flips):
                if flip:
                    order[k], order[k + 1] = order[k + 1], order[k]
            for choice in itertools.product(range(syn), repeat=len(order)):
                yield [source_token(c, s) for c, s in zip(order, choice)]

    def _uniform_rendering(self, concepts, rng):
        order = list(concepts)
        if self.spec.swap_prob > 0:
            for k in mixed_pairs(order):
                if rng.random() < 0.5:
                    order[k], order[k + 1] = order[k + 1], order[k]
        syn = self.spec.synonyms_per_concept
        return [source_token(c, int(rng.integers(syn))) for c in order]

    def oracle_variants(self, tokens, n, seed=0):
        """``n`` distinct re-renderings of ``tokens``, all different from it.

        Variants are uniform over the alternative renderings, so every
        admissible pair order is as likely as its swap.
        """
        if n == 0:
            return []
        concepts = self.canonical_concepts(tokens)
        if concepts is None:
            raise CorpusError(f"not decodable: {' '.join(tokens)}")
        total = self.n_renderings(tokens)
        if n > total - 1:
            raise CorpusError(f"only {total - 1} alternative renderings exist, asked for {n}")
        key = int(hashlib.sha256(" ".join(tokens).encode()).hexdigest()[:8], 16)
        rng = stream(seed, "oracle", key)
        if total <= 4096 and 2 * n > total:
            pool = [r for r in self._all_renderings(concepts) if r != list(tokens)]
            idx = rng.permutation(len(pool))[:n]
            return [pool[i] for i in sorted(idx)]
        out, seen = [], {" ".join(tokens)}
        while len(out) < n:
            r = self._uniform_rendering(concepts, rng)
            k = " ".join(r)
            if k not in seen:
                seen.add(k)
                out.append(r)
        return out

    def coverage(self, rows):
        """Concepts never seen in the targets of ``rows``."""
        seen = {t for _, y in rows for t in y}
        return [c for c in range(self.spec.n_concepts) if target_token(c) not in seen]


def write_corpus(corpus, spec, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, rows in corpus.items():
        with open(out / f"{split}.tsv", "w", encoding="utf-8") as fh:
            for x, y in rows:
                fh.write(" ".join(x) + "\t" + " ".join(y) + "\n")
    (out / "spec.json").write_text(spec.to_json() + "\n")


def read_split(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            src, tgt = line.split("\t")
            rows.append((src.split(), tgt.split()))
    return rows


def corpus_digest(rows):
    h = hashlib.sha256()
    for x, y in rows:
        h.update((" ".join(x) + "\t" + " ".join(y) + "\n").encode("utf-8"))
    return h.hexdigest()[:16]
