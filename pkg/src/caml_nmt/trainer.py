"""Training loops: NLL pretraining, CAML, first-order MAML and the MTL baseline."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

from .autograd import NumericError
from .objectives import (LossWeights, consistency_loss, meta_test_loss, tie,
                         translation_loss)
from .optim import AdamState, adam_step, sgd_step
from .params import read_snapshot, write_snapshot
from .rng import derive_seed, stream

MODES = ("baseline", "mtl", "maml", "caml")


@dataclass
class EquivSet:
    x: list
    y: list
    x_s: list  # equivalent sources; may contain x itself

    @property
    def size(self):
        return len(self.x_s)


@dataclass
class TrainConfig:
    mode: str = "caml"
    epochs_pretrain: int = 5
    epochs: int = 5
    n_equiv: int = 2
    inner_steps: int | None = None  # None -> 2 * n_equiv
    inner_lr: float = 1e-4
    base_lr: float = 1e-3
    warmup_steps: int = 4000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    gamma: float = 1.0
    epsilon: float = 0.5
    mask_ratio: float = 0.15
    label_smoothing: float = 0.1
    use_ls: bool = True
    use_lw: bool = True
    meta_translation: bool = False
    augment: bool = False
    batch_size: int = 32
    grad_accum: int = 1
    max_steps: int | None = None
    seed: int = 1

    @property
    def T(self):
        return 2 * self.n_equiv if self.inner_steps is None else self.inner_steps

    def weights(self):
        return LossWeights(self.gamma, self.epsilon, self.inner_lr, self.label_smoothing)

    def validate(self):
        errors = []
        if self.mode not in MODES:
            errors.append(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.epochs_pretrain < 0 or self.epochs < 0:
            errors.append("epochs must be non-negative")
        if self.T < 0:
            errors.append("inner_steps must be non-negative")
        if self.inner_lr < 0:
            errors.append("inner_lr must be non-negative")
        if self.gamma < 0 or self.epsilon < 0:
            errors.append("gamma and epsilon must be non-negative")
        if self.batch_size < 1 or self.grad_accum < 1:
            errors.append("batch_size and grad_accum must be >= 1")
        if not 0.0 <= self.mask_ratio <= 1.0:
            errors.append("mask_ratio must lie in [0, 1]")
        if self.mode in ("caml", "maml", "mtl") and self.n_equiv < 2:
            errors.append(f"mode {self.mode} needs n_equiv >= 2")
        return errors


class TrainingDiverged(RuntimeError):
    pass


def ordered_pairs(n):
    return [(i, j) for i in range(n) for j in range(n) if i != j]


def sample_pairs(n, T, rng):
    """T ordered distinct pairs: shuffled enumeration, reshuffled when exhausted."""
    base = ordered_pairs(n)
    if T and not base:
        raise ValueError("need at least two sentences to form pairs")
    out = []
    while len(out) < T:
        out.extend(base[k] for k in rng.permutation(len(base)))
    return out[:T]


def inner_loop(model, theta, sets, T, beta, seed, mask_ratio=0.15, use_ls=True, use_lw=True,
               translation_weight=0.0, dropout=True, trace=None):
    """T plain gradient steps of size ``beta`` on L_S + L_W over sampled pairs.

    Works on a scratch copy: ``theta`` is left bit-identical and the adapted
    parameters are returned.  Row ``r`` of each step uses the next sampled
    pair ``(i, j)`` of ``sets[r]``: ``x_s[i]`` is the live input and ``x_s[j]``
    the teacher input.  The masked positions are drawn once and shared by
    all T steps.
    """
    if T < 0:
        raise ValueError("T must be non-negative")
    prime = theta.clone()
    if T == 0 or beta == 0.0:
        return prime
    pair_rng = stream(seed, "inner-pairs")
    schedules = [sample_pairs(s.size, T, pair_rng) for s in sets]
    mask_seed = derive_seed(seed, "inner-mask")
    for t in range(T):
        lives = [s.x_s[schedules[r][t][0]] for r, s in enumerate(sets)]
        alts = [s.x_s[schedules[r][t][1]] for r, s in enumerate(sets)]
        ys = [s.y for s in sets]
        rng = stream(seed, "inner-dropout", t) if dropout else None
        parts = {} if trace is not None else None
        loss = consistency_loss(model, alts, lives, ys, prime, mask_ratio, mask_seed,
                                use_ls, use_lw, translation_weight, rng=rng, parts=parts)
        loss.backward()
        if trace is not None:
            trace.append(loss.item())
        sgd_step(prime, beta)
    return prime


def maml_inner_loop(model, theta, sets, T, beta, seed, label_smoothing=0.1, dropout=True):
    """T plain gradient steps on the mean L_N over every (x_s[i], y) of ``sets``."""
    prime = theta.clone()
    if T == 0 or beta == 0.0:
        return prime
    sources = [x for s in sets for x in s.x_s]
    targets = [s.y for s in sets for _ in s.x_s]
    for t in range(T):
        rng = stream(seed, "inner-dropout", t) if dropout else None
        translation_loss(model, prime, sources, targets, label_smoothing, rng=rng).backward()
        sgd_step(prime, beta)
    return prime


class Trainer:
    """Owns the live parameters, the Adam state and the step/epoch counters."""

    def __init__(self, model, params, config, log_path=None, timing_path=None):
        errors = config.validate()
        if errors:
            raise ValueError("; ".join(errors))
        self.model = model
        self.params = params
        self.cfg = config
        self.adam = AdamState(config.base_lr, config.warmup_steps, config.adam_beta1,
                              config.adam_beta2, config.adam_eps)
        self.step = 0
        self.epoch = 0
        self.batch_in_epoch = 0
        self.history = []
        self.log_path = Path(log_path) if log_path else None
        self.timing_path = Path(timing_path) if timing_path else None

    # bookkeeping

    def _names(self, uses_rec):
        roles = ("enc", "dec", "rec") if uses_rec else ("enc", "dec")
        return self.params.names(roles)

    def _log(self, record, started):
        self.history.append(record)
        if self.log_path:
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        if self.timing_path:
            with open(self.timing_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"step": record["step"], "wall": time.perf_counter() - started}) + "\n")

    def _batches(self, items):
        order = stream(self.cfg.seed, "data", self.epoch).permutation(len(items))
        b = self.cfg.batch_size
        return [[items[k] for k in order[i:i + b]] for i in range(0, len(items), b)]

    def _budget_left(self):
        return self.cfg.max_steps is None or self.step < self.cfg.max_steps

    # losses for one micro-batch: (loss, logged parts, whether the reconstruction head is used)

    def baseline_loss(self, batch, rng):
        ln = translation_loss(self.model, self.params, [x for x, _ in batch], [y for _, y in batch],
                              self.cfg.label_smoothing, rng=rng)
        return ln * self.cfg.gamma, {"L_N": ln.item()}, False

    def _pick_alternatives(self, sets):
        rng = stream(self.cfg.seed, "outer-pick", self.step)
        alts = []
        for s in sets:
            others = [k for k, xs in enumerate(s.x_s) if xs != s.x] or list(range(s.size))
            alts.append(s.x_s[others[int(rng.integers(len(others)))]])
        return alts

    def caml_loss(self, sets, rng, inner=True):
        """Inner loop to theta', then the meta-test loss at theta.

        With ``inner=False`` the adapted parameters are theta itself, which
        is the multi-task (MTL) objective.
        """
        cfg = self.cfg
        consistency = cfg.epsilon > 0 and (cfg.use_ls or cfg.use_lw)
        prime = self.params
        if inner and consistency and cfg.T > 0:
            prime = inner_loop(self.model, self.params, sets, cfg.T, cfg.inner_lr,
                               derive_seed(cfg.seed, "inner", self.step), cfg.mask_ratio,
                               cfg.use_ls, cfg.use_lw, 1.0 if cfg.meta_translation else 0.0)
        parts = {}
        loss = meta_test_loss(self.model, [s.x for s in sets], [s.y for s in sets],
                              self._pick_alternatives(sets) if consistency else None,
                              self.params, prime, cfg.weights(), cfg.mask_ratio,
                              derive_seed(cfg.seed, "outer-mask", self.step),
                              cfg.use_ls, cfg.use_lw, rng=rng, parts=parts)
        return loss, parts, consistency and cfg.use_ls

    def maml_loss(self, sets, rng):
        """First-order MAML: adapt on the support sources, score L_N(y | x) at theta'."""
        cfg = self.cfg
        prime = maml_inner_loop(self.model, self.params, sets, cfg.T, cfg.inner_lr,
                                derive_seed(cfg.seed, "inner", self.step), cfg.label_smoothing)
        ln = translation_loss(self.model, tie(prime, self.params), [s.x for s in sets],
                              [s.y for s in sets], cfg.label_smoothing, rng=rng)
        return ln, {"L_N": ln.item()}, False

    def optimizer_step(self, micro_batches, loss_fn):
        """Accumulate gradients over ``micro_batches`` and apply one Adam step."""
        k = len(micro_batches)
        logged, uses_rec = {}, False
        for m, batch in enumerate(micro_batches):
            loss, parts, rec = loss_fn(batch, stream(self.cfg.seed, "dropout", self.step, m))
            (loss if k == 1 else loss * (1.0 / k)).backward()
            uses_rec |= rec
            for key, value in parts.items():
                logged[key] = logged.get(key, 0.0) + value / k
        logged["lr"] = adam_step(self.params, self.adam, self._names(uses_rec))
        return logged

    def caml_step(self, sets):
        return self.optimizer_step([sets], self.caml_loss)

    # epochs

    def _run(self, items, loss_fn, mode, until_epoch, evaluate):
        k = self.cfg.grad_accum
        while self.epoch < until_epoch:
            batches = self._batches(items)
            groups = [batches[i:i + k] for i in range(0, len(batches), k)]
            while self.batch_in_epoch < len(groups):
                if not self._budget_left():
                    return
                started = time.perf_counter()
                try:
                    parts = self.optimizer_step(groups[self.batch_in_epoch], loss_fn)
                except NumericError as exc:
                    raise TrainingDiverged(f"step {self.step}: {exc}") from exc
                self.step += 1
                self.batch_in_epoch += 1
                record = {"step": self.step, "epoch": self.epoch, "mode": mode}
                record.update({k: parts[k] for k in ("L_N", "L_S", "L_W", "L_T", "lr") if k in parts})
                self._log(record, started)
            self.epoch += 1
            self.batch_in_epoch = 0
            if evaluate is not None:
                evaluate(self)

    def _target(self, epochs, absolute):
        return absolute if epochs is None else self.epoch + epochs

    def pretrain(self, pairs, epochs=None, evaluate=None):
        """L_N-only epochs over (x, y) pairs (the warm start).

        Without ``epochs`` the phase runs until epoch ``epochs_pretrain``,
        which makes a resumed run pick up where it stopped.
        """
        if not pairs:
            raise ValueError("pretrain: empty corpus")
        until = self._target(epochs, self.cfg.epochs_pretrain)
        self._run(list(pairs), self.baseline_loss, "pretrain", until, evaluate)
        return self.params

    def train(self, sets, epochs=None, evaluate=None):
        """Mode-specific epochs over equivalence sets (after the warm start)."""
        if not sets:
            raise ValueError("train: empty corpus")
        cfg = self.cfg
        until = self._target(epochs, cfg.epochs_pretrain + cfg.epochs)
        if cfg.mode == "baseline":
            pairs = [(s.x, s.y) for s in sets]
            if cfg.augment:
                pairs += [(xs, s.y) for s in sets for xs in s.x_s if xs != s.x]
            self._run(pairs, self.baseline_loss, "baseline", until, evaluate)
        elif cfg.mode == "mtl":
            self._run(list(sets), lambda b, r: self.caml_loss(b, r, inner=False), "mtl", until, evaluate)
        elif cfg.mode == "maml":
            self._run(list(sets), self.maml_loss, "maml", until, evaluate)
        elif cfg.mode == "caml":
            self._run(list(sets), self.caml_loss, "caml", until, evaluate)
        else:
            raise ValueError(f"unknown mode {cfg.mode!r}")
        return self.params

    # checkpoints

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_snapshot(self.params.snapshot(), directory / "params.bin")
        self.adam.save(directory / "adam")
        state = {"step": self.step, "epoch": self.epoch, "batch_in_epoch": self.batch_in_epoch}
        (directory / "trainer.json").write_text(json.dumps(state, sort_keys=True) + "\n")

    def load(self, directory):
        directory = Path(directory)
        self.params.restore(read_snapshot(directory / "params.bin"))
        self.adam = AdamState.load(directory / "adam")
        state = json.loads((directory / "trainer.json").read_text())
        self.step, self.epoch, self.batch_in_epoch = state["step"], state["epoch"], state["batch_in_epoch"]


def config_dict(cfg):
    return asdict(cfg)
