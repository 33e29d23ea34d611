"""Acceptance suite: one test per shipped guarantee.

Each test ends with a single `check(...)` call that records a PASS/FAIL line
(printed in the terminal summary) and asserts. The first five criteria are
property checks on the training objective, augmentations, and the split
protocol; the later ones drive the real pipeline end to end on a synthetic
task, including the full pretrain -> few-shot fine-tune -> report path.

The synthetic task for the end-to-end runs uses background verbalizer words
(see SynthSpec.label_words): the answer words carry no co-occurrence signal,
so the verbalizer mapping must be learned from the 16 labeled examples per
class, and broad class vocabularies with short sentences leave that mapping
under-determined. That is the regime where unlabeled text has something to
add, and the margin criterion measures exactly that.
"""
import json
import os
import time

import numpy as np
import pytest

from conftest import record_acceptance

from promptst import tensor as T
from promptst.augment import KINDS, AugmentKind, round_half_up, strong_view, weak_view
from promptst.checkpoint import load_checkpoint, save_checkpoint
from promptst.cli import main as cli_main
from promptst.data import (LabeledExample, SynthSpec, TrainBatch,
                           generate_synthetic_task, sample_few_shot_splits,
                           save_tsv, write_synth_files)
from promptst.gradcheck import finite_difference_check
from promptst.losses import HyperParams, self_training_loss, supervised_loss, total_loss
from promptst.model import ModelConfig, forward, init_model
from promptst.prompting import PromptTask, TaskBinding
from promptst.rng import RngStream
from promptst.tokenizer import MASK_ID, NUM_SPECIALS, UNK_ID, TokenSequence, build_vocab
from promptst.trainer import evaluate, pretrain_mlm, run_experiment, run_transfer

SEED = 7


def check(num, title, ok, detail=""):
    record_acceptance(num, title, ok, detail)
    assert ok, f"criterion {num} failed: {title} ({detail})"


# ---------------------------------------------------------------------------
# shared worlds


class World:
    def __init__(self, spec, seed, max_seq_len=32):
        self.data = generate_synthetic_task(spec, seed)
        self.vocab = build_vocab(self.data.corpus, extra_tokens=self.data.words)
        self.task = PromptTask.from_dict(self.data.task)
        self.max_seq_len = max_seq_len
        self.binding = TaskBinding(self.task, self.vocab, max_seq_len)
        self.texts = [ex.text for ex in self.data.pool]


@pytest.fixture(scope="module")
def world():
    # default generator: class-token verbalizer, 10 tokens per class
    return World(SynthSpec(test_per_class=50, corpus_lines=100), SEED)


def _make_batch(world, rng, b, mu_b):
    pool = world.data.pool
    labeled = [pool[int(i)] for i in rng.child("lab").integers(0, len(pool), size=b)]
    unlabeled = [world.texts[int(i)]
                 for i in rng.child("unl").integers(0, len(world.texts), size=mu_b)]
    return TrainBatch(labeled, unlabeled)


# ---------------------------------------------------------------------------
# 1. gradient correctness of the full objective


def test_c01_gradients_match_finite_differences(world):
    cfg = ModelConfig(num_layers=2, d_model=32, num_heads=4, d_ff=128,
                      max_seq_len=32, vocab_size=len(world.vocab),
                      dropout_rate=0.1)
    model = init_model(cfg, RngStream(SEED, "c1/init"))
    batch = _make_batch(world, RngStream(SEED, "c1/batch"), b=2, mu_b=4)
    hp = HyperParams(batch_size=2, mu=2, lambda1=1.0, lambda2=0.5, tau=0.0)

    def loss_fn():
        total, _ = total_loss(model, batch, hp, AugmentKind("mask"),
                              world.binding, RngStream(SEED, "c1/step"))
        return total

    t0 = time.monotonic()
    rel = finite_difference_check(loss_fn, model.params, sample=20,
                                  rng=RngStream(SEED, "c1/pick"))
    elapsed = time.monotonic() - t0
    check(1, "finite differences confirm objective gradients",
          rel < 1e-4 and elapsed < 60.0,
          f"max rel err {rel:.2e} over 20 sampled params, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. objective reduction identities


def test_c02_zero_weights_reduce_to_supervised_loss(world):
    cfg = ModelConfig(num_layers=1, d_model=16, num_heads=2, d_ff=32,
                      max_seq_len=32, vocab_size=len(world.vocab),
                      dropout_rate=0.1)
    model = init_model(cfg, RngStream(SEED, "c2/init"))
    hp_off = HyperParams(batch_size=2, mu=2, lambda1=0.0, lambda2=0.0, tau=0.7)
    hp_gate = HyperParams(batch_size=2, mu=2, lambda1=1.0, lambda2=0.0, tau=1.0)

    exact = 0
    gated = 0
    for b in range(100):
        batch = _make_batch(world, RngStream(1000 + b, "c2/batch"), b=2, mu_b=4)
        total, bd = total_loss(model, batch, hp_off, AugmentKind("mask"),
                               world.binding, RngStream(b, "c2/step"))
        sup = supervised_loss(model, batch.labeled, world.binding, True,
                              RngStream(b, "c2/step"))
        if (float(total.data) == bd.l_s == float(sup.data)
                and bd.total == bd.l_s):
            exact += 1
        total_g, bd_g = total_loss(model, batch, hp_gate, AugmentKind("mask"),
                                   world.binding, RngStream(b, "c2/step"))
        if (bd_g.retained == 0 and bd_g.l_st == 0.0
                and float(total_g.data) == bd_g.l_s):
            gated += 1
    check(2, "zero weights and tau=1 collapse the objective to l_s",
          exact == 100 and gated == 100,
          f"bit-exact {exact}/100 batches, tau=1 retained nothing in {gated}/100")


# ---------------------------------------------------------------------------
# 3. self-training loss equals a hand-rolled evaluation


def test_c03_self_training_loss_matches_hand_computation(world):
    # dropout 0 plus the surface-identity strong view makes every forward
    # deterministic, so the oracle needs no knowledge of rng stream layout:
    # it recomputes the gate, the pseudo-label, the cross-entropy, and the
    # division by the full unlabeled count from plain forward passes.
    cfg = ModelConfig(num_layers=1, d_model=16, num_heads=2, d_ff=32,
                      max_seq_len=32, vocab_size=len(world.vocab),
                      dropout_rate=0.0)
    model = init_model(cfg, RngStream(SEED, "c3/init"))
    texts = world.texts[:2] + world.texts[200:202]  # two from each class

    confs, pseudos, probs = [], [], []
    for text in texts:
        prompted = world.binding.prompt(text)
        logits = forward(model, prompted.seq.ids, False, None)
        row = logits.data[prompted.mask_position][world.binding.label_word_ids]
        z = row - row.max()
        q = np.exp(z) / np.exp(z).sum()
        confs.append(float(q.max()))
        pseudos.append(int(np.argmax(q)))
        probs.append(q)

    spread = sorted(confs)
    tau = 0.5 * (spread[1] + spread[2])  # gate splits the batch two and two
    assert spread[2] - spread[1] > 1e-9
    expected = sum(-np.log(probs[i][pseudos[i]])
                   for i in range(4) if confs[i] >= tau) / 4.0

    loss, retained = self_training_loss(model, texts, world.binding,
                                        AugmentKind("dropout"), tau,
                                        RngStream(SEED, "c3/step"))
    diff = abs(float(loss.data) - expected)
    check(3, "self-training loss matches the explicit formula",
          retained == 2 and diff < 1e-10,
          f"|module - hand| = {diff:.2e}, retained {retained}/4")


# ---------------------------------------------------------------------------
# 4. augmentation contracts


def _subsequence(sub, full):
    it = iter(full)
    return all(any(x == y for y in it) for x in sub)


def _contiguous_in(view_ids, orig_ids):
    n = len(view_ids)
    return any(list(orig_ids[a:a + n]) == list(view_ids)
               for a in range(len(orig_ids) - n + 1))


def test_c04_augmentation_contracts_hold_over_many_sentences():
    rng = RngStream(SEED, "c4")
    bad = []
    for i in range(1000):
        srng = rng.child(f"s{i}")
        length = int(srng.child("len").integers(1, 25))
        ids, special = [], []
        for p in range(length):
            if srng.child(f"u{p}").random() < 0.15:
                ids.append(UNK_ID)
                special.append(True)
            else:
                ids.append(int(srng.child(f"w{p}").integers(NUM_SPECIALS, 105)))
                special.append(False)
        if i % 97 == 0:  # a few sentences with no content at all
            special = [True] * length
            ids = [UNK_ID] * length
        seq = TokenSequence(ids, special)
        n = len(seq.content_positions())

        w = weak_view(seq)
        if list(w.ids) != ids or list(w.is_special) != special:
            bad.append((i, "weak"))

        mk, pos, orig = strong_view(seq, AugmentKind("mask"), srng.child("mask"))
        if n == 0:
            if list(mk.ids) != ids:
                bad.append((i, "mask-noop"))
        else:
            want = max(1, round_half_up(0.15 * n))
            diffs = [p for p in range(length) if mk.ids[p] != ids[p]]
            ok = (len(mk.ids) == length and diffs == list(pos)
                  and len(diffs) == want
                  and all(mk.ids[p] == MASK_ID and not special[p] for p in diffs)
                  and list(orig) == [ids[p] for p in diffs])
            if not ok:
                bad.append((i, "mask"))

        cr, _, _ = strong_view(seq, AugmentKind("crop"), srng.child("crop"))
        if n > 0:
            want = max(1, round_half_up(0.85 * n))
            kept = len(cr.content_positions())
            if kept != want or not _contiguous_in(list(cr.ids), ids):
                bad.append((i, "crop"))

        sw, _, _ = strong_view(seq, AugmentKind("swap"), srng.child("swap"))
        ok = (sorted(sw.ids) == sorted(ids) and len(sw.ids) == length
              and all(sw.ids[p] == ids[p]
                      for p in range(length) if special[p]))
        if not ok:
            bad.append((i, "swap"))

        dl, _, _ = strong_view(seq, AugmentKind("deletion"), srng.child("del"))
        ok = (_subsequence(list(dl.ids), ids) and len(dl.ids) >= 1
              and sum(dl.is_special) == sum(special)
              and (n == 0 or len(dl.content_positions()) >= 1))
        if not ok:
            bad.append((i, "deletion"))

    check(4, "augmentation contracts hold over 1000 sentences",
          not bad, f"violations: {bad[:5]}" if bad else "5 kinds x 1000 sentences")


# ---------------------------------------------------------------------------
# 5. few-shot split protocol


def test_c05_few_shot_split_protocol(world):
    pool = world.data.pool
    splits = sample_few_shot_splits(pool, 16, 4, 5, SEED, 2)
    again = sample_few_shot_splits(pool, 16, 4, 5, SEED, 2)
    problems = []
    if len(splits) != 5:
        problems.append(f"got {len(splits)} splits")
    for j, s in enumerate(splits):
        if not (len(s.train) == 32 and len(s.dev) == 32
                and len(s.unlabeled) == 128):
            problems.append(f"split {j} sizes {len(s.train)}/{len(s.dev)}"
                            f"/{len(s.unlabeled)}")
        for c in (0, 1):
            if sum(1 for e in s.train if e.label == c) != 16:
                problems.append(f"split {j} train class {c}")
            if sum(1 for e in s.dev if e.label == c) != 16:
                problems.append(f"split {j} dev class {c}")
            if sum(1 for u in s.unlabeled if u.hidden_gold == c) != 64:
                problems.append(f"split {j} unlabeled class {c}")
        tr = set(s.train_indices)
        dv = set(s.dev_indices)
        un = set(s.unlabeled_indices)
        if tr & dv or tr & un or dv & un:
            problems.append(f"split {j} overlaps")
        if s.manifest() != again[j].manifest():
            problems.append(f"split {j} not deterministic")
    check(5, "few-shot splits are 32/32/128, balanced, disjoint, reproducible",
          not problems, "; ".join(problems) if problems else "5 splits checked")


# ---------------------------------------------------------------------------
# end-to-end synthetic world: pretrain once, fine-tune across mu values
#
# The task is shaped so unlabeled text genuinely matters: answer words occur
# in no sentence (the label mapping exists only in labeled examples), class
# vocabularies are wider than 32 labeled sentences can cover, and half of
# each class vocabulary is hidden from the pretraining corpus, so the
# unlabeled pool is the only dense source for those words.


E2E_SPEC = SynthSpec(noise=0.3, vocab_words=100, tokens_per_class=48,
                     min_len=3, max_len=6, pool_per_class=200,
                     test_per_class=500, corpus_lines=2000,
                     label_words="background", corpus_token_frac=0.5)
E2E_MODEL = dict(num_layers=2, d_model=64, num_heads=4, d_ff=128,
                 max_seq_len=32, dropout_rate=0.1)
E2E_PRETRAIN = dict(steps=2000, lr=1e-3, batch_size=8)
E2E_HP = dict(lr=3e-4, batch_size=4, lambda1=1.0, lambda2=1.0, tau=0.97,
              steps=1200, eval_interval=50)


@pytest.fixture(scope="module")
def endtoend(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    t0 = time.monotonic()
    data = generate_synthetic_task(E2E_SPEC, SEED)
    paths = write_synth_files(data, str(root / "task"))
    vocab = build_vocab(data.corpus, extra_tokens=data.words)
    cfg = ModelConfig(vocab_size=len(vocab), **E2E_MODEL)
    model = init_model(cfg, RngStream(SEED, "init"))
    pretrain_mlm(model, data.corpus, vocab, rng=RngStream(SEED, "pretrain"),
                 **E2E_PRETRAIN)
    ckpt = str(root / "pretrained.ckpt")
    save_checkpoint(ckpt, model, vocab, step=E2E_PRETRAIN["steps"])

    exp = {"task": paths["task"], "train": paths["train"],
           "test": paths["test"], "checkpoint": ckpt, "seed": SEED,
           "num_splits": 5, "metric": "accuracy", "n_values": [16],
           "kinds": ["mask"], "hp": dict(E2E_HP)}
    report_a = run_experiment({**exp, "mu_values": [0, 4]}, str(root / "outA"))
    seconds_c6 = time.monotonic() - t0
    report_b = run_experiment({**exp, "mu_values": [1]}, str(root / "outB"))

    small_test = str(root / "test_small.tsv")
    per = E2E_SPEC.test_per_class
    save_tsv(small_test, data.test[:100] + data.test[per:per + 100],
             data.task["labels"])
    return {"root": root, "data": data, "paths": paths, "vocab": vocab,
            "model": model, "ckpt": ckpt, "report_a": report_a,
            "report_b": report_b, "seconds_c6": seconds_c6,
            "small_test": small_test}


def _cell(report, n, mu, kind="mask"):
    return report["cells"][f"n={n}|mu={mu}|kind={kind}"]


# ---------------------------------------------------------------------------
# 6. unlabeled text improves few-shot accuracy


def test_c06_unlabeled_data_improves_synthetic_accuracy(endtoend):
    rep = endtoend["report_a"]
    mean0 = _cell(rep, 16, 0)["mean"]
    mean4 = _cell(rep, 16, 4)["mean"]
    margin = rep["margins"]["n=16|kind=mask|mu=4_vs_0"]
    seconds = endtoend["seconds_c6"]
    check(6, "mu=4 beats the mu=0 baseline by >= 2 points inside 15 min",
          mean4 >= mean0 and margin >= 0.02 and seconds < 900.0,
          f"acc {mean0:.4f} -> {mean4:.4f}, margin {margin * 100:+.2f} points, "
          f"{seconds:.0f}s")


# ---------------------------------------------------------------------------
# 7. more unlabeled text does not hurt


def test_c07_more_unlabeled_does_not_hurt(endtoend):
    mean1 = _cell(endtoend["report_b"], 16, 1)["mean"]
    mean4 = _cell(endtoend["report_a"], 16, 4)["mean"]
    err1, err4 = 1.0 - mean1, 1.0 - mean4
    check(7, "error at mu=4 is within 0.5 points of error at mu=1",
          err4 <= err1 + 0.005,
          f"err {err1 * 100:.2f}% (mu=1) vs {err4 * 100:.2f}% (mu=4)")


# ---------------------------------------------------------------------------
# 8. the sweep emits the full ablation table


def test_c08_sweep_emits_full_ablation_table(endtoend, tmp_path):
    out = str(tmp_path / "sweep")
    rc = cli_main(["sweep", "--task", endtoend["paths"]["task"],
                   "--train", endtoend["paths"]["train"],
                   "--test", endtoend["small_test"],
                   "--checkpoint", endtoend["ckpt"], "--out", out,
                   "--n", "16", "--mu-values", "4",
                   "--kinds", ",".join(KINDS), "--steps", "40",
                   "--eval-interval", "20", "--seed", str(SEED),
                   "--num-splits", "5"])
    report = json.load(open(os.path.join(out, "report.json")))
    rows = report["table"]["rows"]
    cells = report["cells"]
    ok = (rc == 0 and rows == list(KINDS) and "mask" in rows
          and len(rows) == 5
          and all(len(cells[f"n=16|mu=4|kind={k}"]["values"]) == 5
                  for k in KINDS)
          and all("std" in cells[f"n=16|mu=4|kind={k}"] for k in KINDS))
    with open(os.path.join(out, "table.md")) as f:
        md_rows = [ln for ln in f.read().splitlines()
                   if ln.startswith("|")][2:]
    check(8, "sweep over 5 augmentation kinds yields a 5-row table",
          ok and len(md_rows) == 5,
          f"rows {rows}, 5 split values per cell")


# ---------------------------------------------------------------------------
# 9. transfer with zero weights reproduces the source-only baseline


def test_c09_transfer_with_zero_weights_matches_source_only(endtoend, tmp_path):
    tspec = SynthSpec(tokens_per_class=8, min_len=3, max_len=6,
                      pool_per_class=120, test_per_class=100,
                      corpus_lines=60)
    tdata = generate_synthetic_task(tspec, SEED + 1)
    tdir = tmp_path / "target"
    tdir.mkdir()
    ttask = str(tdir / "task.json")
    with open(ttask, "w") as f:
        json.dump(tdata.task, f)
    tunl = str(tdir / "unlabeled.tsv")
    with open(tunl, "w") as f:
        f.write("".join(ex.text + "\n" for ex in tdata.pool))
    ttest = str(tdir / "test.tsv")
    save_tsv(ttest, tdata.test, tdata.task["labels"])

    cfg = ModelConfig(num_layers=1, d_model=16, num_heads=2, d_ff=32,
                      max_seq_len=32, vocab_size=len(endtoend["vocab"]))
    small = init_model(cfg, RngStream(SEED, "c9/init"))
    ckpt = str(tmp_path / "small.ckpt")
    save_checkpoint(ckpt, small, endtoend["vocab"])

    report = run_transfer(
        {"source_task": endtoend["paths"]["task"],
         "source_train": endtoend["paths"]["train"],
         "target_task": ttask, "target_unlabeled": tunl,
         "target_test": ttest, "checkpoint": ckpt,
         "per_class": 16, "num_seeds": 2, "seed": SEED, "kind": "mask",
         "hp": {"steps": 30, "eval_interval": 10, "mu": 4,
                "lambda1": 0.0, "lambda2": 0.0}},
        str(tmp_path / "transfer"))
    runs = report["runs"]
    ok = (len(runs) == 2
          and all(r["arms_identical"] for r in runs)
          and all(r["main"] == r["baseline"] for r in runs)
          and report["main_mean"] == report["baseline_mean"])
    check(9, "zero-weight transfer equals the source-only baseline bit for bit",
          ok, f"2 seeds, metrics {[r['main'] for r in runs]}")


# ---------------------------------------------------------------------------
# 10. CLI runs are deterministic


def test_c10_cli_reports_are_byte_identical(endtoend, tmp_path):
    cfg = ModelConfig(num_layers=1, d_model=16, num_heads=2, d_ff=32,
                      max_seq_len=32, vocab_size=len(endtoend["vocab"]))
    small = init_model(cfg, RngStream(SEED, "c10/init"))
    ckpt = str(tmp_path / "small.ckpt")
    save_checkpoint(ckpt, small, endtoend["vocab"])

    def run(out):
        rc = cli_main(["train", "--task", endtoend["paths"]["task"],
                       "--train", endtoend["paths"]["train"],
                       "--test", endtoend["small_test"],
                       "--checkpoint", ckpt, "--out", out,
                       "--n", "4", "--mu", "1", "--steps", "10",
                       "--eval-interval", "5", "--num-splits", "2",
                       "--seed", "77"])
        assert rc == 0
        with open(os.path.join(out, "report.json"), "rb") as f:
            return f.read()

    a = run(str(tmp_path / "runA"))
    b = run(str(tmp_path / "runB"))
    check(10, "repeated CLI runs produce byte-identical report.json",
          a == b, f"{len(a)} bytes compared")


# ---------------------------------------------------------------------------
# 11. checkpoint round trip


def test_c11_checkpoint_round_trip_preserves_accuracy(endtoend, tmp_path):
    data = endtoend["data"]
    binding = TaskBinding(PromptTask.from_dict(data.task), endtoend["vocab"],
                          E2E_MODEL["max_seq_len"])
    test = data.test
    assert len(test) == 1000
    before = evaluate(endtoend["model"], test, binding)
    path = str(tmp_path / "roundtrip.ckpt")
    save_checkpoint(path, endtoend["model"], endtoend["vocab"])
    loaded, _, _, _ = load_checkpoint(path)
    after = evaluate(loaded, test, binding)
    check(11, "save/load/re-evaluate keeps test accuracy identical",
          before == after, f"accuracy {before:.4f} on 1000 examples")
