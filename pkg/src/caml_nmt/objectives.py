"""Training objectives: translation NLL, the two consistency losses and the
meta-train / meta-test composites.

Batched helpers average over the scored positions of the whole batch; the
single-pair spellings (``sentence_loss_LS``, ``word_loss_LW``) are the batch
functions applied to a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .model import BOS, EOS, MASK, PAD, pad_batch
from .rng import stream


@dataclass
class LossWeights:
    gamma: float = 1.0
    epsilon: float = 0.5
    inner_lr: float = 1e-4
    label_smoothing: float = 0.1

    def validate(self):
        errors = []
        if self.gamma < 0 or self.epsilon < 0:
            errors.append("gamma and epsilon must be non-negative")
        if self.inner_lr <= 0:
            errors.append("inner_lr must be positive")
        return errors


@dataclass(frozen=True)
class MaskPlan:
    positions: tuple
    ratio: float
    seed: int


def nll_loss(logits, targets, label_smoothing=0.0):
    """Mean smoothed cross-entropy over non-PAD ``targets``."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = targets != PAD
    if not mask.any():
        raise ValueError("nll_loss: every target is PAD")
    return ag.cross_entropy(logits, targets, mask, label_smoothing)


def teacher_forcing(targets):
    """Decoder inputs (BOS + y) and outputs (y + EOS) for a batch of targets."""
    return pad_batch(targets, prepend=(BOS,)), pad_batch(targets, append=(EOS,))


def translation_loss(model, params, sources, targets, label_smoothing=0.0, rng=None):
    enc = model.encode(params, sources, rng=rng)
    tgt_in, tgt_out = teacher_forcing(targets)
    return nll_loss(model.decode_teacher_forced(params, enc, tgt_in, rng=rng), tgt_out, label_smoothing)


def make_mask_plan(x_i, x_j, ratio=0.15, seed=0):
    shared = min(len(x_i), len(x_j))
    if shared < 1:
        raise ValueError("make_mask_plan: both sentences must be non-empty")
    count = min(shared, max(1, int(np.floor(ratio * shared + 0.5))))
    rng = stream(seed, "mask")
    return MaskPlan(tuple(sorted(int(p) for p in rng.choice(shared, size=count, replace=False))), ratio, seed)


def _masked_inputs(seqs, plans):
    ids = pad_batch(seqs, append=(EOS,))
    scored = np.zeros(ids.shape, dtype=bool)
    for row, plan in enumerate(plans):
        pos = list(plan.positions)
        scored[row, pos] = True
    masked = np.where(scored, MASK, ids)
    return masked, ids, scored


def _reconstruction_nll(model, params, sources, targets, plans, rng):
    if not any(p.positions for p in plans):
        raise ValueError("empty mask plan")
    enc = model.encode(params, sources, rng=rng)
    masked, gold, scored = _masked_inputs(targets, plans)
    logits = model.reconstruct(params, enc, masked, rng=rng)
    return ag.cross_entropy(logits, gold, scored)


def sentence_loss(model, pairs, plans, params, params_j=None, rng=None):
    """Batched L_S: reconstruct masked x_j from x_i and masked x_i from x_j.

    ``params`` conditions the x_i -> x_j direction and ``params_j`` (default
    ``params``) the x_j -> x_i direction.
    """
    params_j = params if params_j is None else params_j
    xs_i = [p[0] for p in pairs]
    xs_j = [p[1] for p in pairs]
    forward = _reconstruction_nll(model, params, xs_i, xs_j, plans, rng)
    backward = _reconstruction_nll(model, params_j, xs_j, xs_i, plans, rng)
    return forward + backward


def sentence_loss_LS(model, x_i, x_j, plan, params, rng=None):
    return sentence_loss(model, [(x_i, x_j)], [plan], params, rng=rng)


def teacher_distribution(model, params_frozen, sources, targets):
    with no_grad():
        enc = model.encode(params_frozen, sources)
        tgt_in, _ = teacher_forcing(targets)
        logits = model.decode_teacher_forced(params_frozen, enc, tgt_in).data
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def word_loss(model, refs, alts, targets, params_live, params_frozen, rng=None):
    """Batched L_W: cross-entropy of the live distribution on ``alts`` against
    the frozen teacher's distribution on ``refs``, per decoding step."""
    if len(refs) != len(alts) or len(refs) != len(targets):
        raise ValueError("word_loss: batch sizes differ")
    teacher = teacher_distribution(model, params_frozen, refs, targets)
    enc = model.encode(params_live, alts, rng=rng)
    tgt_in, tgt_out = teacher_forcing(targets)
    logits = model.decode_teacher_forced(params_live, enc, tgt_in, rng=rng)
    if logits.shape != teacher.shape:
        raise ValueError(f"word_loss: step mismatch {logits.shape} vs {teacher.shape}")
    return ag.soft_cross_entropy(logits, teacher, tgt_out != PAD)


def word_loss_LW(model, x_ref, x_alt, y, params_live, params_frozen, rng=None):
    return word_loss(model, [x_ref], [x_alt], [y], params_live, params_frozen, rng=rng)


def frozen_copy(params):
    """Stop-gradient copy: plain constant tensors keyed by path."""
    return {n: Tensor(t.data.copy()) for n, t in params.items()}


def consistency_loss(model, alts, lives, targets, params, mask_ratio, mask_seed,
                     use_ls=True, use_lw=True, translation_weight=0.0,
                     label_smoothing=0.0, rng=None, parts=None):
    """One meta-train term per row: L_S(x_alt, x_live) + L_W(teacher x_alt, live x_live).

    ``translation_weight > 0`` adds that multiple of L_N(y | x_live).
    """
    total = None
    if use_ls:
        plans = [make_mask_plan(a, b, mask_ratio, mask_seed + r) for r, (a, b) in enumerate(zip(alts, lives))]
        ls = sentence_loss(model, list(zip(lives, alts)), plans, params, rng=rng)
        total = ls
        if parts is not None:
            parts["L_S"] = ls.item()
    if use_lw:
        lw = word_loss(model, alts, lives, targets, params, frozen_copy(params), rng=rng)
        total = lw if total is None else total + lw
        if parts is not None:
            parts["L_W"] = lw.item()
    if translation_weight > 0:
        ln = translation_loss(model, params, lives, targets, label_smoothing, rng=rng)
        total = ln * translation_weight if total is None else total + ln * translation_weight
        if parts is not None:
            parts["L_T"] = ln.item()
    if total is None:
        raise ValueError("consistency_loss: no active terms")
    return total


def meta_train_loss(model, support_pairs, y, params, mask_ratio=0.15, mask_seed=0,
                    use_ls=True, use_lw=True, translation_weight=0.0, rng=None):
    """Sum over sampled ``(x_i, x_not_i)`` pairs of L_S + L_W for one equivalence set.

    The teacher side of L_W reads ``x_not_i`` under a stop-gradient copy of
    ``params``; the live side reads ``x_i``.
    """
    if not support_pairs:
        raise ValueError("meta_train_loss: no support pairs")
    total = None
    for k, (x_i, x_not_i) in enumerate(support_pairs):
        term = consistency_loss(model, [x_not_i], [x_i], [y], params, mask_ratio, mask_seed + k,
                                use_ls, use_lw, translation_weight, rng=rng)
        total = term if total is None else total + term
    return total


def tie(theta_prime, theta):
    """View of ``theta_prime`` whose gradients flow into ``theta``.

    The inner-loop displacement ``theta_prime - theta`` is held constant,
    the first-order treatment of the adapted parameters.
    """
    return {n: ag.alias(theta_prime[n].data, theta[n]) for n in theta}


def meta_test_loss(model, xs, ys, xs_alt, theta, theta_prime, weights, mask_ratio=0.15, mask_seed=0,
                   use_ls=True, use_lw=True, teacher=None, rng=None, parts=None):
    """gamma * L_N(y | x; theta) + epsilon * [L_S(x, x_alt) + L_W(x -> x_alt)].

    The x side of L_S runs under ``theta`` and the x_alt side under the tied
    ``theta_prime``.  L_W's teacher reads x under a stop-gradient copy of
    ``theta`` (or ``teacher`` if given); its live side reads x_alt under the
    tied ``theta_prime``.
    """
    ln = translation_loss(model, theta, xs, ys, weights.label_smoothing, rng=rng)
    if parts is not None:
        parts["L_N"] = ln.item()
    total = ln * weights.gamma
    if weights.epsilon == 0.0 or not (use_ls or use_lw):
        return total
    if theta_prime is None:
        raise ValueError("meta_test_loss: theta_prime required when epsilon > 0")
    adapted = theta if theta_prime is theta else tie(theta_prime, theta)
    reg = None
    if use_ls:
        plans = [make_mask_plan(x, a, mask_ratio, mask_seed + r) for r, (x, a) in enumerate(zip(xs, xs_alt))]
        reg = sentence_loss(model, list(zip(xs, xs_alt)), plans, theta, params_j=adapted, rng=rng)
        if parts is not None:
            parts["L_S"] = reg.item()
    if use_lw:
        frozen = frozen_copy(theta) if teacher is None else teacher
        lw = word_loss(model, xs, xs_alt, ys, adapted, frozen, rng=rng)
        if parts is not None:
            parts["L_W"] = lw.item()
        reg = lw if reg is None else reg + lw
    return total + reg * weights.epsilon
