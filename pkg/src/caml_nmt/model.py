"""Small pre-norm transformer encoder-decoder with a parallel reconstruction head.

All forward functions are pure in the parameter set they receive, so the same
:class:`Seq2Seq` can be evaluated under the live parameters, a frozen copy or
inner-loop adapted parameters.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .params import ModelParams

PAD, BOS, EOS, UNK, MASK = 0, 1, 2, 3, 4
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>", "<mask>")
N_RESERVED = len(RESERVED)
NEG_INF = -1e9


class Vocab:
    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:5]) != RESERVED:
            tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate vocabulary entries")
        if len(tokens) < 6:
            raise ValueError("vocabulary needs at least one non-reserved token")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, words):
        return [self.stoi.get(w, UNK) for w in words]

    def decode(self, ids):
        return [self.itos[i] for i in ids]

    def digest(self):
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()[:16]


@dataclass
class ModelConfig:
    d_model: int = 32
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_recon_layers: int = 2
    ffn_dim: int = 64
    dropout: float = 0.1
    label_smoothing: float = 0.1
    max_len: int = 16
    noise_site: str = "encoder"

    def validate(self):
        errors = []
        if self.d_model % self.n_heads:
            errors.append(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_recon_layers < 1:
            errors.append("n_recon_layers must be >= 1")
        if min(self.n_enc_layers, self.n_dec_layers, self.ffn_dim, self.max_len) < 1:
            errors.append("layer counts, ffn_dim and max_len must be positive")
        if not 0.0 <= self.dropout < 1.0:
            errors.append("dropout must lie in [0, 1)")
        if self.noise_site not in ("encoder", "embedding"):
            errors.append(f"noise_site must be 'encoder' or 'embedding', got {self.noise_site!r}")
        return errors


@dataclass
class EncoderOutput:
    states: Tensor
    mask: np.ndarray  # True at real (non-pad) positions

    def pooled(self):
        m = self.mask[..., None].astype(np.float64)
        return (self.states.data * m).sum(axis=1) / m.sum(axis=1)


def count_parameters(cfg, src_vocab_size, tgt_vocab_size):
    d, f = cfg.d_model, cfg.ffn_dim
    ln = 2 * d
    attn = 4 * d * d
    ffn = d * f + f + f * d + d
    enc_layer = 2 * ln + attn + ffn
    dec_layer = 3 * ln + 2 * attn + ffn
    enc = src_vocab_size * d + cfg.n_enc_layers * enc_layer + ln
    dec = tgt_vocab_size * d + cfg.n_dec_layers * dec_layer + ln + d * tgt_vocab_size + tgt_vocab_size
    rec = src_vocab_size * d + cfg.n_recon_layers * dec_layer + ln + d * src_vocab_size + src_vocab_size
    return enc + dec + rec


def sinusoid_table(n, d):
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def pad_batch(seqs, append=(), prepend=()):
    rows = [list(prepend) + list(s) + list(append) for s in seqs]
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


class Seq2Seq:
    def __init__(self, cfg, src_vocab, tgt_vocab):
        errors = cfg.validate()
        if errors:
            raise ValueError("; ".join(errors))
        self.cfg = cfg
        self.src_vocab = src_vocab
        self.tgt_vocab = tgt_vocab
        self._pos = sinusoid_table(cfg.max_len + 2, cfg.d_model)

    # parameters

    def init_params(self, seed):
        cfg = self.cfg
        d, f = cfg.d_model, cfg.ffn_dim
        rng = np.random.default_rng(seed)
        params = ModelParams()

        def dense(name, n_in, n_out, bias=True):
            limit = math.sqrt(6.0 / (n_in + n_out))
            params.add(name + ".w", rng.uniform(-limit, limit, size=(n_in, n_out)))
            if bias:
                params.add(name + ".b", np.zeros(n_out))

        def norm(name):
            params.add(name + ".g", np.ones(d))
            params.add(name + ".b", np.zeros(d))

        def attention(name):
            for w in ("q", "k", "v", "o"):
                dense(f"{name}.{w}", d, d, bias=False)

        def ffn(name):
            dense(name + ".fc1", d, f)
            dense(name + ".fc2", f, d)

        nsrc, ntgt = len(self.src_vocab), len(self.tgt_vocab)
        params.add("enc.embed", rng.normal(0.0, d ** -0.5, size=(nsrc, d)))
        for i in range(cfg.n_enc_layers):
            p = f"enc.layer{i}"
            norm(p + ".ln1")
            attention(p + ".self")
            norm(p + ".ln2")
            ffn(p + ".ffn")
        norm("enc.ln_f")
        for role, n_layers, vocab in (("dec", cfg.n_dec_layers, ntgt), ("rec", cfg.n_recon_layers, nsrc)):
            params.add(f"{role}.embed", rng.normal(0.0, d ** -0.5, size=(vocab, d)))
            for i in range(n_layers):
                p = f"{role}.layer{i}"
                norm(p + ".ln1")
                attention(p + ".self")
                norm(p + ".ln2")
                attention(p + ".cross")
                norm(p + ".ln3")
                ffn(p + ".ffn")
            norm(f"{role}.ln_f")
            dense(f"{role}.out", d, vocab)
        return params

    def num_parameters(self):
        return count_parameters(self.cfg, len(self.src_vocab), len(self.tgt_vocab))

    # building blocks

    def _dropout(self, x, rng):
        p = self.cfg.dropout
        if rng is None or p <= 0.0:
            return x
        return ag.dropout(x, rng.random(x.shape) >= p, p)

    def _embed(self, params, name, ids, rng):
        if ids.shape[1] > self._pos.shape[0]:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_len {self.cfg.max_len}")
        x = ag.embedding(params[name], ids) * math.sqrt(self.cfg.d_model)
        x = x + self._pos[: ids.shape[1]]
        return self._dropout(x, rng)

    def _norm(self, params, name, x):
        return ag.layer_norm(x, params[name + ".g"], params[name + ".b"])

    def _dense(self, params, name, x):
        y = x @ params[name + ".w"]
        if name + ".b" in params:
            y = y + params[name + ".b"]
        return y

    def _attention(self, params, name, x, mem, bias):
        b, lq, d = x.shape
        lk = mem.shape[1]
        h = self.cfg.n_heads
        dk = d // h

        def heads(t, n):
            return t.reshape(b, n, h, dk).transpose(0, 2, 1, 3)

        q = heads(x @ params[name + ".q.w"], lq)
        k = heads(mem @ params[name + ".k.w"], lk)
        v = heads(mem @ params[name + ".v.w"], lk)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dk)) + bias
        ctx = ag.softmax(scores) @ v
        ctx = ctx.transpose(0, 2, 1, 3).reshape(b, lq, d)
        return ctx @ params[name + ".o.w"]

    def _ffn(self, params, name, x, rng):
        hdn = ag.relu(self._dense(params, name + ".fc1", x))
        return self._dense(params, name + ".fc2", self._dropout(hdn, rng))

    @staticmethod
    def _key_bias(mask):
        return np.where(mask, 0.0, NEG_INF)[:, None, None, :]

    def _check_ids(self, ids, vocab, what):
        if ids.size and (ids.min() < 0 or ids.max() >= len(vocab)):
            raise ValueError(f"{what} id out of range for vocabulary of size {len(vocab)}")
        if ids.shape[1] > self.cfg.max_len + 1:
            raise ValueError(f"{what} length {ids.shape[1] - 1} exceeds max_len {self.cfg.max_len}")

    # model passes

    def encode(self, params, sources, noise_sigma=0.0, seed=None, rng=None):
        """Encode a batch of source id sequences (EOS is appended here).

        ``noise_sigma > 0`` adds N(0, sigma^2) noise drawn from ``seed`` at the
        configured site.  A list of seeds gives every row its own stream.
        ``rng`` supplies dropout masks (``None`` disables dropout).
        """
        ids = pad_batch(sources, append=(EOS,))
        self._check_ids(ids, self.src_vocab, "source")
        mask = ids != PAD
        noise = None
        if noise_sigma > 0.0:
            shape = (ids.shape[1], self.cfg.d_model)
            if isinstance(seed, (list, tuple)):
                if len(seed) != len(ids):
                    raise ValueError(f"encode: {len(seed)} noise seeds for {len(ids)} rows")
                noise = np.stack([np.random.default_rng(s).standard_normal(shape) for s in seed])
            else:
                noise = np.random.default_rng(seed).standard_normal((len(ids), *shape))
            noise = noise * noise_sigma
        x = self._embed(params, "enc.embed", ids, rng)
        if noise is not None and self.cfg.noise_site == "embedding":
            x = x + noise
        bias = self._key_bias(mask)
        for i in range(self.cfg.n_enc_layers):
            p = f"enc.layer{i}"
            hn = self._norm(params, p + ".ln1", x)
            x = x + self._dropout(self._attention(params, p + ".self", hn, hn, bias), rng)
            x = x + self._dropout(self._ffn(params, p + ".ffn", self._norm(params, p + ".ln2", x), rng), rng)
        x = self._norm(params, "enc.ln_f", x)
        if noise is not None and self.cfg.noise_site == "encoder":
            x = x + noise
        return EncoderOutput(x, mask)

    def _decoder_stack(self, params, role, ids, enc, self_bias, rng):
        x = self._embed(params, f"{role}.embed", ids, rng)
        cross_bias = self._key_bias(enc.mask)
        n_layers = self.cfg.n_dec_layers if role == "dec" else self.cfg.n_recon_layers
        for i in range(n_layers):
            p = f"{role}.layer{i}"
            hn = self._norm(params, p + ".ln1", x)
            x = x + self._dropout(self._attention(params, p + ".self", hn, hn, self_bias), rng)
            hn = self._norm(params, p + ".ln2", x)
            x = x + self._dropout(self._attention(params, p + ".cross", hn, enc.states, cross_bias), rng)
            x = x + self._dropout(self._ffn(params, p + ".ffn", self._norm(params, p + ".ln3", x), rng), rng)
        x = self._norm(params, f"{role}.ln_f", x)
        return self._dense(params, f"{role}.out", x)

    def decode_teacher_forced(self, params, enc, tgt_in, rng=None):
        """Logits ``[B, T, V_tgt]`` for decoder inputs ``tgt_in`` (rows start with BOS)."""
        tgt_in = np.asarray(tgt_in, dtype=np.int64)
        if tgt_in.ndim != 2 or not np.all(tgt_in[:, 0] == BOS):
            raise ValueError("decoder input rows must start with BOS")
        self._check_ids(tgt_in, self.tgt_vocab, "target")
        t = tgt_in.shape[1]
        causal = np.triu(np.full((t, t), NEG_INF), k=1)
        self_bias = causal[None, None] + self._key_bias(tgt_in != PAD)
        return self._decoder_stack(params, "dec", tgt_in, enc, self_bias, rng)

    def reconstruct(self, params, enc, masked, rng=None):
        """Parallel logits ``[B, L, V_src]`` for a masked source batch (ids incl. EOS)."""
        masked = np.asarray(masked, dtype=np.int64)
        self._check_ids(masked, self.src_vocab, "reconstruction input")
        return self._decoder_stack(params, "rec", masked, enc, self._key_bias(masked != PAD), rng)

    # decoding

    def step_log_probs(self, params, enc, prefixes):
        """Log-probabilities of the next token for each prefix row (all start with BOS)."""
        logits = self.decode_teacher_forced(params, enc, prefixes)
        last = logits.data[:, -1, :]
        z = last - last.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def greedy_decode(self, params, sources, max_len=None, noise_sigma=0.0, seed=None, with_finished=False):
        """Batched greedy decoding; returns content-token lists (no BOS/EOS)."""
        max_len = max_len or self.cfg.max_len
        with no_grad():
            enc = self.encode(params, sources, noise_sigma=noise_sigma, seed=seed)
            n = len(sources)
            prefix = np.full((n, 1), BOS, dtype=np.int64)
            done = np.zeros(n, dtype=bool)
            for _ in range(max_len):
                logp = self.step_log_probs(params, enc, prefix)
                logp[:, [PAD, BOS]] = -np.inf
                nxt = logp.argmax(axis=-1)
                nxt = np.where(done, PAD, nxt)
                prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
                done |= nxt == EOS
                if done.all():
                    break
        outs = []
        for row in prefix[:, 1:]:
            toks = []
            for tok in row:
                if tok in (EOS, PAD):
                    break
                toks.append(int(tok))
            outs.append(toks)
        return (outs, done.tolist()) if with_finished else outs

    def beam_decode(self, params, source, beam=5, length_penalty=0.6, max_len=None):
        max_len = max_len or self.cfg.max_len
        with no_grad():
            enc = self.encode(params, [source])

            def step(prefixes):
                rows = np.asarray([[BOS] + list(p) for p in prefixes], dtype=np.int64)
                tiled = EncoderOutput(Tensor(np.repeat(enc.states.data, len(prefixes), axis=0)),
                                      np.repeat(enc.mask, len(prefixes), axis=0))
                return self.step_log_probs(params, tiled, rows)

            return beam_search(step, EOS, beam, max_len, length_penalty)[0]


def length_normalised(score, length, length_penalty):
    return score / (((5.0 + length) / 6.0) ** length_penalty)


def beam_search(step_fn, eos, beam, max_len, length_penalty=0.6, banned=(PAD, BOS)):
    """Generic beam search over ``step_fn(prefixes) -> [n, V]`` log-probabilities.

    At every step the ``k`` best expansions of the live hypotheses are kept;
    those ending in ``eos`` leave the beam and ``k`` shrinks accordingly.
    Hypotheses still alive at ``max_len`` are finished as truncated.  Returns
    ``(tokens, raw_score)`` of the finished hypothesis with the best
    length-normalised score; ties go to the earlier finisher, then the
    lexicographically smaller token sequence.  ``eos`` is not included in
    the returned tokens.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    alive = [((), 0.0)]
    finished = []  # (norm_score, finish_step, tokens, raw_score)
    k = beam
    for t in range(1, max_len + 1):
        if k == 0 or not alive:
            break
        logp = np.asarray(step_fn([toks for toks, _ in alive]), dtype=np.float64)
        cand = []
        for i, (toks, score) in enumerate(alive):
            for v in range(logp.shape[1]):
                if v in banned:
                    continue
                cand.append((score + logp[i, v], i, v))
        cand.sort(key=lambda c: (-c[0], c[1], c[2]))
        nxt = []
        for score, i, v in cand[:k]:
            toks = alive[i][0]
            if v == eos:
                finished.append((length_normalised(score, len(toks) + 1, length_penalty), t, toks, score))
            else:
                nxt.append((toks + (v,), score))
        k -= len(cand[:k]) - len(nxt)
        alive = nxt
    for toks, score in alive:
        finished.append((length_normalised(score, len(toks), length_penalty), max_len, toks, score))
    best = min(finished, key=lambda f: (-f[0], f[1], f[2]))
    return list(best[2]), best[3]
