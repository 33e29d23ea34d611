"""Training loops and experiment orchestration.

Everything here is deterministic given (inputs, seed): batches, dropout,
masking, and initialization all draw from named sub-streams of one root, and
report files are written with sorted keys and no timestamps, so re-running
an experiment reproduces its outputs byte for byte.
"""
from __future__ import annotations

import itertools
import json
import os
from dataclasses import replace
from typing import Optional

import numpy as np

from .augment import AugmentKind, round_half_up
from .checkpoint import load_checkpoint
from .data import (FewShotSplit, LabeledExample, UnlabeledExample,
                   batch_iterator, load_tsv, load_unlabeled_tsv,
                   sample_few_shot_splits)
from .losses import HyperParams, mlm_loss, total_loss
from .model import Model, ModelConfig, forward, init_model
from .optim import AdamState, adam_step
from .prompting import PromptTask, TaskBinding
from .reporting import aggregate, emit
from .rng import RngStream
from .tensor import Tape, backward
from .tokenizer import CLS_ID, MASK_ID, NUM_SPECIALS, SEP_ID, TokenSequence, Vocab


def _collect_grads(model: Model, grads_by_tid: dict) -> dict:
    return {name: grads_by_tid[p.tid]
            for name, p in model.params.items() if p.tid in grads_by_tid}


class JsonlLogger:
    def __init__(self, path: Optional[str]):
        self.f = open(path, "w", encoding="utf-8") if path else None

    def write(self, record: dict) -> None:
        if self.f:
            self.f.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        if self.f:
            self.f.close()
            self.f = None


def pretrain_mlm(model: Model, corpus: list, vocab: Vocab, steps: int,
                 lr: float, rng: RngStream, batch_size: int = 8,
                 mask_ratio: float = 0.15, log_path: Optional[str] = None) -> None:
    """Masked-token pretraining over raw lines, updating `model` in place.

    Standard corruption: of the selected positions, 80% become [MASK], 10%
    a random non-special token, 10% stay unchanged; all selected positions
    are predicted.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if not corpus:
        raise ValueError("pretraining corpus is empty")
    max_content = model.config.max_seq_len - 2
    state = AdamState.init(model.params)
    log = JsonlLogger(log_path)
    try:
        for t in range(1, steps + 1):
            step_rng = rng.child(f"step{t}")
            picks = step_rng.child("lines").integers(0, len(corpus),
                                                     size=batch_size)
            items = []
            for i, li in enumerate(picks):
                line_rng = step_rng.child(f"line{i}")
                raw = vocab.encode(corpus[int(li)])
                ids = [CLS_ID] + raw.ids[:max_content] + [SEP_ID]
                special = [True] + raw.is_special[:max_content] + [True]
                seq = TokenSequence(ids, special)
                content = seq.content_positions()
                if not content:
                    continue
                k = max(1, round_half_up(mask_ratio * len(content)))
                chosen = sorted(int(c) for c in
                                line_rng.child("pos").choice(len(content), size=k))
                corrupt = line_rng.child("how").uniform(k)
                randoms = line_rng.child("rand").integers(
                    NUM_SPECIALS, len(vocab), size=k)
                positions, originals = [], []
                for j, ci in enumerate(chosen):
                    pos = content[ci]
                    positions.append(pos)
                    originals.append(seq.ids[pos])
                    if corrupt[j] < 0.8:
                        seq.ids[pos] = MASK_ID
                        seq.is_special[pos] = True
                    elif corrupt[j] < 0.9:
                        seq.ids[pos] = int(randoms[j])
                items.append((seq, positions, originals))
            if not items:
                log.write({"step": t, "loss": None})
                continue
            with Tape() as tape:
                loss = mlm_loss(model, items, True, step_rng.child("fwd"))
                assert loss is not None
            loss_f = float(loss.data)
            if not np.isfinite(loss_f):
                raise FloatingPointError(
                    f"pretraining loss became non-finite at step {t}")
            grads = _collect_grads(model, backward(tape, loss))
            tape.free_saved()
            adam_step(model.params, grads, state, lr)
            log.write({"step": t, "loss": loss_f})
    finally:
        log.close()


def evaluate(model: Model, examples: list, binding: TaskBinding,
             metric: str = "accuracy") -> float:
    """Accuracy or binary F1 of prompted predictions, dropout off."""
    if not examples:
        raise ValueError("nothing to evaluate")
    preds, golds = [], []
    for ex in examples:
        prompted = binding.prompt(ex.text)
        logits = forward(model, prompted.seq.ids, training=False)
        preds.append(binding.predict(logits.data, prompted))
        golds.append(ex.label)
    if metric == "accuracy":
        return float(np.mean([p == g for p, g in zip(preds, golds)]))
    if metric == "f1":
        if binding.task.num_labels != 2:
            raise ValueError("F1 is defined here for binary tasks only")
        pos = binding.positive_index
        tp = sum(1 for p, g in zip(preds, golds) if p == pos and g == pos)
        fp = sum(1 for p, g in zip(preds, golds) if p == pos and g != pos)
        fn = sum(1 for p, g in zip(preds, golds) if p != pos and g == pos)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        if precision + recall == 0.0:
            return 0.0
        return 2.0 * precision * recall / (precision + recall)
    raise ValueError(f"unknown metric {metric!r}")


def finetune(model: Model, split: FewShotSplit, binding: TaskBinding,
             hp: HyperParams, kind: AugmentKind, rng: RngStream,
             target_binding: Optional[TaskBinding] = None,
             log_path: Optional[str] = None) -> tuple[Model, dict]:
    """Run the combined objective for hp.steps steps.

    Dev accuracy is measured every hp.eval_interval steps and the best
    snapshot is returned (earliest wins ties). Without dev examples the
    final model is returned. Updates `model` in place; the returned model
    may be a snapshot copy.
    """
    state = AdamState.init(model.params)
    batches = batch_iterator(split, hp.batch_size, hp.mu, rng.child("batches"))
    log = JsonlLogger(log_path)
    best_acc = -1.0
    best_model: Optional[Model] = None
    evals = []
    try:
        for t in range(1, hp.steps + 1):
            batch = next(batches)
            with Tape() as tape:
                loss, bd = total_loss(model, batch, hp, kind, binding,
                                      rng.child(f"step{t}"), target_binding)
            if not np.isfinite(bd.total):
                log.write({"step": t, "event": "diverged", **bd.to_dict()})
                raise FloatingPointError(
                    f"training diverged at step {t}: total={bd.total}")
            grads = _collect_grads(model, backward(tape, loss))
            tape.free_saved()
            adam_step(model.params, grads, state, hp.lr)
            log.write({"step": t, **bd.to_dict()})
            if split.dev and t % hp.eval_interval == 0:
                acc = evaluate(model, split.dev, binding)
                evals.append({"step": t, "dev_accuracy": acc})
                if acc > best_acc:
                    best_acc = acc
                    best_model = model.clone()
    finally:
        log.close()
    if best_model is None:
        best_model = model
    info = {"best_dev": best_acc if best_acc >= 0 else None, "evals": evals}
    return best_model, info


def grid_search(base_model: Model, split: FewShotSplit, binding: TaskBinding,
                base_hp: HyperParams, grid: dict, kind: AugmentKind,
                rng: RngStream) -> tuple[dict, float]:
    """Exhaustive search over `grid` (name -> candidate list) by dev accuracy.

    Every point trains from the same weights with the same stream, so points
    differ only in the hyperparameter under test. Exact ties keep the first
    point in product order. Returns (best overrides, best dev accuracy).
    """
    if not grid:
        raise ValueError("empty hyperparameter grid")
    if not split.dev:
        raise ValueError("grid search needs dev examples")
    names = list(grid.keys())
    best: Optional[tuple] = None
    for combo in itertools.product(*(grid[n] for n in names)):
        overrides = dict(zip(names, combo))
        hp = replace(base_hp, **overrides)
        _, info = finetune(base_model.clone(), split, binding, hp, kind,
                           rng.child("point"))
        score = info["best_dev"]
        if best is None or score > best[1]:
            best = (overrides, score)
    return best


# ---------------------------------------------------------------------------
# experiment harness


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def _load_start_model(exp: dict) -> tuple[Model, Vocab]:
    if exp.get("checkpoint"):
        model, vocab, _, _ = load_checkpoint(exp["checkpoint"])
        return model, vocab
    if not exp.get("model") or not exp.get("vocab"):
        raise ValueError(
            "experiment needs either a checkpoint or a model config plus vocab")
    vocab = Vocab.load(exp["vocab"])
    cfg_d = dict(exp["model"])
    cfg_d.setdefault("vocab_size", len(vocab))
    cfg = ModelConfig.from_dict(cfg_d)
    if cfg.vocab_size != len(vocab):
        raise ValueError(
            f"model config says vocab_size={cfg.vocab_size} but the "
            f"vocabulary has {len(vocab)} entries")
    seed = int(exp.get("seed", 0))
    return init_model(cfg, RngStream(seed, "init")), vocab


def run_experiment(exp: dict, out_dir: str) -> dict:
    """Few-shot grid over (n, mu, augmentation kind) cells.

    Same splits and same starting weights for every cell; one fresh
    fine-tuning run per (cell, split). An optional hyperparameter grid is
    searched on split 0 only and its winner is applied to all splits of the
    cell. Writes report.json, results.csv, table.md, and per-run logs.
    """
    os.makedirs(out_dir, exist_ok=True)
    logs_dir = os.path.join(out_dir, "logs")
    os.makedirs(logs_dir, exist_ok=True)

    task = PromptTask.load(exp["task"])
    base_model, vocab = _load_start_model(exp)
    binding = TaskBinding(task, vocab, base_model.config.max_seq_len)
    pool = load_tsv(exp["train"], task.arity, task.labels)
    test = load_tsv(exp["test"], task.arity, task.labels)
    metric = exp.get("metric", "accuracy")
    seed = int(exp.get("seed", 0))
    num_splits = int(exp.get("num_splits", 5))
    hp_base = HyperParams(**exp.get("hp", {}))
    grid = exp.get("grid")
    n_values = [int(n) for n in exp.get("n_values", [16])]
    mu_values = [int(m) for m in exp.get("mu_values", [4])]
    kinds = list(exp.get("kinds", ["mask"]))

    splits_cache: dict[tuple, list] = {}
    records = []
    cells = {}
    split_manifests = {}
    for n, mu, kind_name in itertools.product(n_values, mu_values, kinds):
        kind = AugmentKind.from_name(
            kind_name, mask_ratio=hp_base.mask_ratio)
        key = (n, mu)
        if key not in splits_cache:
            splits_cache[key] = sample_few_shot_splits(
                pool, n, mu, num_splits, seed, task.num_labels)
            split_manifests[f"n={n}|mu={mu}"] = [
                s.manifest() for s in splits_cache[key]]
        splits = splits_cache[key]
        cell_key = f"n={n}|mu={mu}|kind={kind_name}"
        cell_rng = RngStream(seed, "exp").child(
            f"n={n}/mu={mu}/kind={kind_name}")
        hp_cell = replace(hp_base, n=n, mu=mu)
        chosen_overrides = {}
        if grid:
            chosen_overrides, _ = grid_search(
                base_model, splits[0], binding, hp_cell, grid, kind,
                cell_rng.child("grid"))
            hp_cell = replace(hp_cell, **chosen_overrides)
        values = []
        for j, split in enumerate(splits):
            log_path = os.path.join(
                logs_dir, f"n{n}_mu{mu}_{kind_name}_split{j}.jsonl")
            trained, _ = finetune(
                base_model.clone(), split, binding, hp_cell, kind,
                cell_rng.child(f"split={j}"), log_path=log_path)
            values.append(evaluate(trained, test, binding, metric))
        mean = float(np.mean(values))
        std = float(np.std(values))
        cells[cell_key] = {
            "values": values, "mean": mean, "std": std,
            "hp_overrides": chosen_overrides,
        }
        records.append({"row": kind_name, "col": f"N={n}|mu={mu}",
                        "metric": metric, "values": values})

    margins = {}
    for n in n_values:
        for kind_name in kinds:
            base_key = f"n={n}|mu=0|kind={kind_name}"
            if base_key not in cells:
                continue
            for mu in mu_values:
                if mu == 0:
                    continue
                k = f"n={n}|mu={mu}|kind={kind_name}"
                if k in cells:
                    margins[f"n={n}|kind={kind_name}|mu={mu}_vs_0"] = (
                        cells[k]["mean"] - cells[base_key]["mean"])

    table = aggregate(records)
    report = {
        "metric": metric,
        "seed": seed,
        "num_splits": num_splits,
        "cells": cells,
        "margins": margins,
        "table": emit(table, "json"),
    }
    _write_json(os.path.join(out_dir, "report.json"), report)
    _write_json(os.path.join(out_dir, "splits.json"), split_manifests)
    emit(table, "csv", path=os.path.join(out_dir, "results.csv"))
    emit(table, "markdown", path=os.path.join(out_dir, "table.md"))
    return report


def run_transfer(cfg: dict, out_dir: str) -> dict:
    """Task transfer: labeled text from a source task, unlabeled text from
    the target task, evaluation on the target test set with the target's
    own prompt. The target contributes no labels at any point.

    Each seed also trains a source-only baseline (no unlabeled terms, no
    unlabeled text) with the same stream derivation, so a run whose loss
    weights are zero must match its baseline exactly; the per-seed report
    records whether the two arms ended bit-identical.
    """
    os.makedirs(out_dir, exist_ok=True)
    if cfg.get("target_train"):
        raise ValueError(
            "transfer is zero-shot on the target task: a target training "
            "file is not accepted")
    source_task = PromptTask.load(cfg["source_task"])
    target_task = PromptTask.load(cfg["target_task"])
    base_model, vocab, _, _ = load_checkpoint(cfg["checkpoint"])
    max_len = base_model.config.max_seq_len
    source_binding = TaskBinding(source_task, vocab, max_len)
    target_binding = TaskBinding(target_task, vocab, max_len)
    source_pool = load_tsv(cfg["source_train"], source_task.arity,
                           source_task.labels)
    unlabeled_texts = load_unlabeled_tsv(cfg["target_unlabeled"],
                                         target_task.arity)
    test = load_tsv(cfg["target_test"], target_task.arity, target_task.labels)

    per_class = int(cfg.get("per_class", 64))
    num_seeds = int(cfg.get("num_seeds", 5))
    seed = int(cfg.get("seed", 0))
    metric = cfg.get("metric", "accuracy")
    hp = HyperParams(**cfg.get("hp", {}))
    kind = AugmentKind.from_name(cfg.get("kind", "mask"),
                                 mask_ratio=hp.mask_ratio)

    by_class: dict[int, list] = {}
    for idx, ex in enumerate(source_pool):
        by_class.setdefault(ex.label, []).append(idx)
    for c in range(source_task.num_labels):
        if len(by_class.get(c, [])) < per_class:
            raise ValueError(
                f"source class {c} has {len(by_class.get(c, []))} examples, "
                f"needs {per_class}")
    unlabeled_budget = per_class * target_task.num_labels
    if len(unlabeled_texts) < unlabeled_budget:
        raise ValueError(
            f"target unlabeled file has {len(unlabeled_texts)} lines, "
            f"needs {unlabeled_budget}")

    runs = []
    for s in range(num_seeds):
        root = RngStream(seed + s, "transfer")
        train = []
        for c in range(source_task.num_labels):
            members = by_class[c]
            perm = root.child(f"source/class{c}").permutation(len(members))
            train += [source_pool[members[int(i)]] for i in perm[:per_class]]
        uperm = root.child("target/unlabeled").permutation(len(unlabeled_texts))
        unl = [UnlabeledExample(unlabeled_texts[int(i)])
               for i in uperm[:unlabeled_budget]]
        split = FewShotSplit(train, [], unl, seed=seed + s)

        main_model, _ = finetune(
            base_model.clone(), split, source_binding, hp, kind,
            root.child("arm"), target_binding=target_binding,
            log_path=os.path.join(out_dir, f"seed{s}_main.jsonl"))
        acc_main = evaluate(main_model, test, target_binding, metric)

        hp0 = replace(hp, lambda1=0.0, lambda2=0.0, mu=0)
        base_arm, _ = finetune(
            base_model.clone(), split, source_binding, hp0, kind,
            root.child("arm"),
            log_path=os.path.join(out_dir, f"seed{s}_baseline.jsonl"))
        acc_base = evaluate(base_arm, test, target_binding, metric)

        identical = all(
            np.array_equal(main_model.params[k].data, base_arm.params[k].data)
            for k in main_model.params)
        runs.append({"seed": seed + s, "main": acc_main,
                     "baseline": acc_base, "arms_identical": identical})

    report = {
        "metric": metric,
        "kind": kind.kind,
        "per_class": per_class,
        "runs": runs,
        "main_mean": float(np.mean([r["main"] for r in runs])),
        "baseline_mean": float(np.mean([r["baseline"] for r in runs])),
    }
    _write_json(os.path.join(out_dir, "report.json"), report)
    return report
