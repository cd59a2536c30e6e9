"""Experiment orchestration shared by the command line and the acceptance
suite: data generation, training runs with dev evaluation, evaluation
reports and the ablation grid."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .equiv_gen import (GenStats, cache_key, flip_pairs, generate_equiv_sets, read_equiv_cache,
                        train_aligner, write_equiv_cache)
from .metrics import (MetricsReport, bleu_histogram, consistency_report, corpus_bleu,
                      degradation_curve, low_quality_count, token_accuracy, translate)
from .model import ModelConfig, Seq2Seq, Vocab
from .params import ModelParams, read_snapshot, write_snapshot
from .rng import derive_seed
from .synth import CorpusError, SynthSpec, SynthTask, corpus_digest, read_split, write_corpus
from .trainer import EquivSet, Trainer

SPLITS = ("train", "dev", "test")


class DataError(RuntimeError):
    pass


# data


def _encode_rows(rows, sv, tv):
    return [(sv.encode(x), tv.encode(y)) for x, y in rows]


def _oracle_sets(task, rows, ids, n, seed):
    sets = []
    for k, ((x, _), (xi, yi)) in enumerate(zip(rows, ids)):
        n_k = min(n, task.n_renderings(x) - 1)
        variants = task.oracle_variants(x, n_k, seed=derive_seed(seed, "oracle-set", k))
        sv = task.source_vocab()
        sets.append((EquivSet(xi, yi, [xi] + [sv.encode(v) for v in variants]), seed, None))
    return sets


def _train_round_trip_model(cfg, src_vocab, tgt_vocab, pairs, name):
    model = Seq2Seq(cfg.model, src_vocab, tgt_vocab)
    seed = derive_seed(cfg.train.seed, name)
    params = model.init_params(seed)
    tcfg = replace(cfg.train, mode="baseline", epochs_pretrain=cfg.data.rt_epochs, epochs=0,
                   seed=seed, max_steps=None)
    Trainer(model, params, tcfg).pretrain(pairs)
    return model, params


def _pipeline_key(cfg, corpus_hash):
    extra = json.dumps({"model": asdict(cfg.model), "train": asdict(cfg.train),
                        "rt_epochs": cfg.data.rt_epochs}, sort_keys=True)
    return _digest(cache_key(corpus_hash, cfg.gen), extra, code_version())


def gen_data(cfg, out_dir, log=print):
    """Corpus, aligner table, oracle sets and (optionally) pipeline sets under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    task = SynthTask(cfg.synth)
    corpus = task.generate()
    write_corpus(corpus, cfg.synth, out)
    sv, tv = task.source_vocab(), task.target_vocab()
    ids = {s: _encode_rows(corpus[s], sv, tv) for s in SPLITS}
    table = train_aligner(ids["train"], cfg.gen.em_iterations, cfg.gen.top_k)
    table.save(out / "aligner.json")
    counts = {"train": cfg.gen.select_count, "dev": cfg.data.eval_variants, "test": cfg.data.eval_variants}
    for split in SPLITS:
        seed = derive_seed(cfg.gen.seed, "oracle", SPLITS.index(split))
        write_equiv_cache(out / f"oracle_{split}.jsonl",
                          _oracle_sets(task, corpus[split], ids[split], counts[split], seed))
    corpus_hash = corpus_digest(corpus["train"])
    meta = {"corpus_hash": corpus_hash, "sizes": {s: len(corpus[s]) for s in SPLITS}}
    if cfg.data.pipeline:
        key = _pipeline_key(cfg, corpus_hash)
        cache = out / f"equiv_pipeline-{key}.jsonl"
        meta["pipeline_key"] = key
        if cache.is_file():
            log(f"pipeline cache {cache.name} present; reused")
            previous = json.loads((out / "gen_meta.json").read_text()) if (out / "gen_meta.json").is_file() else {}
            meta["pipeline_stats"] = previous.get("pipeline_stats")
        else:
            log(f"training round-trip models for {cfg.data.rt_epochs} epochs")
            fwd = _train_round_trip_model(cfg, sv, tv, ids["train"], "rt-forward")
            bwd = _train_round_trip_model(cfg, tv, sv, flip_pairs(ids["train"]), "rt-backward")
            stats = GenStats()
            generated = generate_equiv_sets(ids["train"], fwd, bwd, table, cfg.gen, stats)
            write_equiv_cache(cache, generated)
            meta["pipeline_stats"] = asdict(stats)
        _link_pipeline(out, cache)
    (out / "gen_meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return meta


def _link_pipeline(out, cache):
    target = out / "equiv_pipeline.jsonl"
    target.write_bytes(cache.read_bytes())


@dataclass
class Dataset:
    task: SynthTask
    src_vocab: Vocab
    tgt_vocab: Vocab
    train: list
    dev: list
    test: list
    train_sets: list
    dev_sets: list
    test_sets: list
    corpus_hash: str


def load_dataset(data_dir, equiv_source="oracle"):
    d = Path(data_dir)
    spec_path = d / "spec.json"
    if not spec_path.is_file():
        raise DataError(f"no corpus at {d} (missing {spec_path.name}); run gen-data first")
    try:
        task = SynthTask(SynthSpec(**json.loads(spec_path.read_text())))
        sv, tv = task.source_vocab(), task.target_vocab()
        rows = {s: _encode_rows(read_split(d / f"{s}.tsv"), sv, tv) for s in SPLITS}
        train_file = d / ("oracle_train.jsonl" if equiv_source == "oracle" else "equiv_pipeline.jsonl")
        sets = {s: read_equiv_cache(d / f"oracle_{s}.jsonl") for s in ("dev", "test")}
        sets["train"] = read_equiv_cache(train_file)
    except (OSError, ValueError, KeyError, TypeError, CorpusError) as exc:
        raise DataError(f"cannot read corpus at {d}: {exc}") from exc
    raw_train = read_split(d / "train.tsv")
    return Dataset(task, sv, tv, rows["train"], rows["dev"], rows["test"], sets["train"],
                   sets["dev"], sets["test"], corpus_digest(raw_train))


def check_sets(sets, n_equiv, mode):
    if mode == "baseline":
        return
    bad = sum(1 for s in sets if s.size != n_equiv)
    if bad:
        raise DataError(f"{bad} training sets do not have n_equiv = {n_equiv} members; "
                        f"regenerate data with gen.select_count = {n_equiv - 1}")


# checkpoints


def save_model(directory, model, params):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_snapshot(params.snapshot(), directory / "params.bin")
    sidecar = {
        "model": asdict(model.cfg),
        "src_vocab": model.src_vocab.itos,
        "tgt_vocab": model.tgt_vocab.itos,
        "src_vocab_hash": model.src_vocab.digest(),
        "tgt_vocab_hash": model.tgt_vocab.digest(),
    }
    (directory / "model.json").write_text(json.dumps(sidecar, sort_keys=True, indent=1) + "\n")


def load_model(directory):
    directory = Path(directory)
    if not (directory / "model.json").is_file():
        raise DataError(f"no checkpoint at {directory} (missing model.json)")
    sidecar = json.loads((directory / "model.json").read_text())
    model = Seq2Seq(ModelConfig(**sidecar["model"]), Vocab(sidecar["src_vocab"]), Vocab(sidecar["tgt_vocab"]))
    params = ModelParams.from_snapshot(read_snapshot(directory / "params.bin"))
    return model, params


def check_vocab(model, data):
    for side, mv, dv in (("source", model.src_vocab, data.src_vocab), ("target", model.tgt_vocab, data.tgt_vocab)):
        if mv != dv:
            raise DataError(f"{side} vocabulary mismatch: checkpoint {mv.digest()} vs data {dv.digest()}")


# evaluation


def dev_metrics(model, params, rows, sets, beam=0):
    hyps = translate(model, params, [x for x, _ in rows], beam=beam or None)
    refs = [y for _, y in rows]
    out = {"bleu": corpus_bleu(hyps, refs), "token_accuracy": token_accuracy(hyps, refs)}
    if any(s.size >= 2 for s in sets):
        out["exact_match_rate"] = consistency_report(model, params, sets).exact_match_rate
    return out


def evaluate(model, params, data, analyses, settings, run_id="run", seed=0):
    """MetricsReport with one section per requested analysis."""
    report = MetricsReport(run_id, seed)
    samples = data.test
    beam = settings.beam or None
    if "bleu" in analyses:
        hyps = translate(model, params, [x for x, _ in samples], beam=beam, length_penalty=settings.length_penalty)
        refs = [y for _, y in samples]
        report.sections["bleu"] = {"corpus_bleu": corpus_bleu(hyps, refs),
                                   "token_accuracy": token_accuracy(hyps, refs), "n": len(samples)}
    if "consistency" in analyses:
        report.sections["consistency"] = asdict(consistency_report(model, params, data.test_sets))
    if "degradation" in analyses:
        para = [s.x_s[1] if s.size > 1 else s.x for s in data.test_sets]
        curve = degradation_curve(model, params, samples, para, settings.proportions, seed=seed, beam=beam)
        report.sections["degradation"] = {"proportions": curve.proportions, "bleu": curve.bleu, "drop": curve.drop()}
    if "histogram" in analyses:
        counts = bleu_histogram(model, params, samples, settings.bin_edges, beam=beam)
        report.sections["histogram"] = {"bin_edges": list(settings.bin_edges), "counts": counts,
                                        "low_quality": low_quality_count(counts, settings.bin_edges)}
    return report


def write_report(report, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{report.run_id}-seed{report.seed}"
    paths = [out / f"metrics-{stem}.json"]
    paths[0].write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")
    deg = report.sections.get("degradation")
    if deg:
        paths.append(out / f"degradation-{stem}.csv")
        _write_csv(paths[-1], ["proportion", "bleu"], zip(deg["proportions"], deg["bleu"]))
    hist = report.sections.get("histogram")
    if hist:
        edges = hist["bin_edges"]
        paths.append(out / f"histogram-{stem}.csv")
        _write_csv(paths[-1], ["lo", "hi", "count"], zip(edges, edges[1:], hist["counts"]))
    return paths


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# training runs


def code_version():
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def run_id_of(cfg):
    return hashlib.sha256(cfg.to_json().encode()).hexdigest()[:12]


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())


def _truncate_jsonl(path, last_step, key="step"):
    if not path.is_file():
        return
    keep = [line for line in path.read_text().splitlines() if json.loads(line)[key] <= last_step]
    path.write_text("".join(line + "\n" for line in keep))


def run_training(cfg, out_dir, resume=False, log=print):
    """Warm start, then mode-specific training with per-epoch dev evaluation.

    ``out_dir`` receives manifest.json, config.yaml, train.jsonl (per-step
    losses), timing.jsonl (wall time), dev.jsonl (per-epoch dev metrics),
    checkpoint/ (resumable state) and best/ (best dev BLEU parameters).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(cfg.data.dir, cfg.data.equiv_source)
    check_sets(data.train_sets, cfg.train.n_equiv, cfg.train.mode)
    model = Seq2Seq(cfg.model, data.src_vocab, data.tgt_vocab)
    params = model.init_params(derive_seed(cfg.train.seed, "init"))
    trainer = Trainer(model, params, cfg.train, out / "train.jsonl", out / "timing.jsonl")
    manifest = {
        "run_id": run_id_of(cfg),
        "config": cfg.flat(),
        "corpus_hash": data.corpus_hash,
        "code_version": code_version(),
        "seed": cfg.train.seed,
        "started": _now(),
        "finished": None,
        "outputs": {k: str(out / v) for k, v in (("log", "train.jsonl"), ("dev", "dev.jsonl"),
                                                 ("checkpoint", "checkpoint"), ("best", "best"))},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    cfg.dump(out / "config.yaml")
    dev_log = out / "dev.jsonl"
    best = {"bleu": -1.0}
    if resume and (out / "checkpoint" / "trainer.json").is_file():
        trainer.load(out / "checkpoint")
        _truncate_jsonl(out / "train.jsonl", trainer.step)
        _truncate_jsonl(out / "timing.jsonl", trainer.step)
        _truncate_jsonl(dev_log, trainer.epoch, key="epoch")
        best_file = out / "checkpoint" / "best.json"
        if best_file.is_file():
            best = json.loads(best_file.read_text())
        log(f"resumed at step {trainer.step}, epoch {trainer.epoch}")
    else:
        for name in ("train.jsonl", "timing.jsonl", "dev.jsonl"):
            (out / name).unlink(missing_ok=True)

    def on_epoch(tr):
        if tr.epoch % cfg.eval.every and tr.epoch != cfg.train.epochs_pretrain + cfg.train.epochs:
            return
        metrics = dev_metrics(model, tr.params, data.dev, data.dev_sets, cfg.eval.beam)
        record = {"epoch": tr.epoch, "step": tr.step, **metrics}
        with open(dev_log, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        log(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in record.items()))
        if metrics["bleu"] > best["bleu"]:
            best.update(bleu=metrics["bleu"], epoch=tr.epoch)
            save_model(out / "best", model, tr.params)
        tr.save(out / "checkpoint")
        (out / "checkpoint" / "best.json").write_text(json.dumps(best, sort_keys=True) + "\n")

    trainer.pretrain(data.train, evaluate=on_epoch)
    trainer.train(data.train_sets, evaluate=on_epoch)
    save_model(out / "final", model, params)
    if not (out / "best" / "model.json").is_file():
        save_model(out / "best", model, params)
    trainer.save(out / "checkpoint")
    manifest["finished"] = _now()
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return trainer, data


def run_eval(checkpoint, cfg, out_dir, analyses=None, run_id=None):
    model, params = load_model(checkpoint)
    data = load_dataset(cfg.data.dir, "oracle")
    check_vocab(model, data)
    report = evaluate(model, params, data, analyses or cfg.eval.analyses, cfg.eval,
                      run_id or Path(checkpoint).resolve().parent.name, cfg.train.seed)
    write_report(report, out_dir)
    return report


# ablation


def arm_config(cfg, arm, seed):
    from .config import ARMS

    return cfg.with_overrides({**ARMS[arm], "train.seed": seed})


def _arm_metrics(model, params, data, settings):
    test_hyps = translate(model, params, [x for x, _ in data.test])
    refs = [y for _, y in data.test]
    para = [s.x_s[1] for s in data.test_sets]
    curve = degradation_curve(model, params, data.test, para, (0.0, 1.0), seed=0)
    counts = bleu_histogram(model, params, data.test, settings.bin_edges)
    dev = dev_metrics(model, params, data.dev, data.dev_sets)
    return {
        "dev_bleu": dev["bleu"],
        "dev_exact_match": dev.get("exact_match_rate", float("nan")),
        "test_bleu": corpus_bleu(test_hyps, refs),
        "test_exact_match": consistency_report(model, params, data.test_sets).exact_match_rate,
        "drop": curve.drop(),
        "low_quality": low_quality_count(counts, settings.bin_edges),
    }


def _digest(*parts):
    return hashlib.sha256(":".join(parts).encode()).hexdigest()[:16]


def pretrain_state(cfg, data, seed, cache_dir=None):
    """Shared warm start for every arm of one seed (bit-identical across arms).

    With ``cache_dir`` the state is stored under a key covering the
    configuration, corpus and code version, and reused when present.
    """
    model = Seq2Seq(cfg.model, data.src_vocab, data.tgt_vocab)
    params = model.init_params(derive_seed(seed, "init"))
    tcfg = replace(cfg.train, mode="baseline", seed=seed)
    trainer = Trainer(model, params, tcfg)
    path = None
    if cache_dir:
        key = _digest(json.dumps({"model": asdict(cfg.model), "train": asdict(tcfg)}, sort_keys=True),
                      data.corpus_hash, code_version())
        path = Path(cache_dir) / f"pretrain-seed{seed}-{key}"
    if path is not None and (path / "trainer.json").is_file():
        trainer.load(path)
    else:
        trainer.pretrain(data.train)
        if path is not None:
            trainer.save(path)
    return model, trainer


def run_arm(cfg, arm, seed, data, warm, log_dir=None):
    model, base = warm
    acfg = arm_config(cfg, arm, seed)
    params = ModelParams.from_snapshot(base.params.snapshot())
    log_path = Path(log_dir) / f"{arm}-seed{seed}.jsonl" if log_dir else None
    if log_path is not None:
        log_path.unlink(missing_ok=True)
    trainer = Trainer(model, params, acfg.train, log_path)
    trainer.adam = copy.deepcopy(base.adam)
    trainer.step, trainer.epoch = base.step, base.epoch
    started = time.perf_counter()
    trainer.train(data.train_sets)
    metrics = _arm_metrics(model, params, data, acfg.eval)
    columns = sorted({k for rec in trainer.history for k in rec if k.startswith("L_")})
    return {"arm": arm, "seed": seed, "status": "ok", "loss_columns": columns, **metrics,
            "seconds": time.perf_counter() - started}


def summarize(results, arms):
    table = []
    for arm in arms:
        rows = [r for r in results if r["arm"] == arm and r["status"] == "ok"]
        entry = {"arm": arm, "n_seeds": len(rows), "failed": sum(1 for r in results if r["arm"] == arm) - len(rows)}
        for key in ("dev_bleu", "dev_exact_match", "test_bleu", "test_exact_match", "drop", "low_quality"):
            vals = np.array([r[key] for r in rows], dtype=float)
            entry[key + "_mean"] = float(vals.mean()) if len(vals) else float("nan")
            entry[key + "_sd"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        table.append(entry)
    return table


def _arm_key(cfg, arm, seed, data):
    flat = {k: v for k, v in arm_config(cfg, arm, seed).flat().items()
            if not k.startswith("ablate.") and k != "data.dir"}
    return _digest(json.dumps(flat, sort_keys=True), data.corpus_hash, code_version())


def _cached_arm(path, key):
    if not path.is_file():
        return None
    stored = json.loads(path.read_text())
    return stored["result"] if stored.get("key") == key and stored["result"]["status"] == "ok" else None


def _safe_run_arm(cfg, arm, seed, data, warm, log_dir):
    try:
        return run_arm(cfg, arm, seed, data, warm, log_dir)
    except Exception as exc:  # noqa: BLE001  a failed arm must not sink the grid
        return {"arm": arm, "seed": seed, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}


def run_ablation(cfg, out_dir, log=print):
    """Every arm for every seed; failed arms are recorded and the grid continues.

    Finished arms are stored under ``arms/`` keyed by their configuration,
    corpus and code version, so an interrupted or repeated grid only runs
    what is missing.  ``ablate.workers > 1`` trains the arms of a seed in
    parallel processes; results do not depend on the worker count.
    """
    out = Path(out_dir)
    (out / "arms").mkdir(parents=True, exist_ok=True)
    data = load_dataset(cfg.data.dir, cfg.data.equiv_source)
    check_sets(data.train_sets, cfg.train.n_equiv, "caml")
    arms = list(cfg.ablate.arms)
    results = []
    for seed in cfg.ablate.seeds:
        keys = {arm: _arm_key(cfg, arm, seed, data) for arm in arms}
        done = {arm: _cached_arm(out / "arms" / f"{arm}-seed{seed}.json", keys[arm]) for arm in arms}
        todo = [arm for arm in arms if done[arm] is None]
        if todo:
            warm = pretrain_state(cfg, data, seed, out)

            def store(arm, res):
                (out / "arms" / f"{arm}-seed{seed}.json").write_text(
                    json.dumps({"key": keys[arm], "result": res}, sort_keys=True, indent=1) + "\n")
                done[arm] = res

            if cfg.ablate.workers > 1 and len(todo) > 1:
                with ProcessPoolExecutor(min(cfg.ablate.workers, len(todo))) as pool:
                    futures = {pool.submit(_safe_run_arm, cfg, arm, seed, data, warm, out): arm for arm in todo}
                    for future in as_completed(futures):
                        store(futures[future], future.result())
            else:
                for arm in todo:
                    store(arm, _safe_run_arm(cfg, arm, seed, data, warm, out))
        for arm in arms:
            res = done[arm]
            results.append(res)
            log(json.dumps({k: v for k, v in res.items() if k != "seconds"}, sort_keys=True))
        _write_ablation(out, results, arms)
    return _write_ablation(out, results, arms)


def _write_ablation(out, results, arms):
    table = summarize(results, arms)
    stable = [{k: v for k, v in r.items() if k != "seconds"} for r in results]
    (out / "ablation.json").write_text(json.dumps({"runs": stable, "table": table}, sort_keys=True, indent=1) + "\n")
    (out / "timing.json").write_text(json.dumps([{"arm": r["arm"], "seed": r["seed"], "seconds": r.get("seconds")}
                                                 for r in results], indent=1) + "\n")
    if table:
        header = list(table[0])
        _write_csv(out / "ablation.csv", header, ([row[h] for h in header] for row in table))
    return table
