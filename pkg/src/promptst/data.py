"""Datasets, few-shot splits, batch iteration, and a synthetic task generator.

The split protocol draws, per class, N training and N development examples
plus mu*N unlabeled ones from a labeled pool. Unlabeled examples keep their
pool label only as `hidden_gold` for post-hoc analysis; the batch stream
hands training code bare text, so gold labels of unlabeled data are
unreachable from the objective by construction.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

from .losses import TrainBatch
from .rng import RngStream


@dataclass(frozen=True)
class LabeledExample:
    text: object  # str, or (str, str) for pair tasks
    label: int


@dataclass(frozen=True)
class UnlabeledExample:
    text: object
    hidden_gold: Optional[int] = None


@dataclass
class FewShotSplit:
    train: list
    dev: list
    unlabeled: list
    seed: int
    train_indices: list = field(default_factory=list)
    dev_indices: list = field(default_factory=list)
    unlabeled_indices: list = field(default_factory=list)

    def validate(self, n: int, mu: int, num_classes: int) -> None:
        if len(self.train) != n * num_classes:
            raise ValueError(
                f"expected {n * num_classes} training examples, got {len(self.train)}")
        if len(self.dev) != n * num_classes:
            raise ValueError(
                f"expected {n * num_classes} dev examples, got {len(self.dev)}")
        if len(self.unlabeled) != mu * n * num_classes:
            raise ValueError(
                f"expected {mu * n * num_classes} unlabeled examples, "
                f"got {len(self.unlabeled)}")
        all_idx = self.train_indices + self.dev_indices + self.unlabeled_indices
        if len(set(all_idx)) != len(all_idx):
            raise ValueError("split partitions overlap")

    def unlabeled_texts(self) -> list:
        return [u.text for u in self.unlabeled]

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "train_indices": list(self.train_indices),
            "dev_indices": list(self.dev_indices),
            "unlabeled_indices": list(self.unlabeled_indices),
        }


def sample_few_shot_splits(pool: Sequence[LabeledExample], n: int, mu: int,
                           num_splits: int, seed: int,
                           num_classes: int) -> list:
    """Draw `num_splits` class-balanced few-shot splits from a labeled pool.

    Split j is driven entirely by seed + j. Within a split, each class takes
    one permutation of its pool: the first N go to train, the next N to dev,
    the next mu*N to unlabeled. Because unlabeled examples come after train
    and dev in the same permutation, changing mu never changes train or dev.
    """
    by_class: dict[int, list[int]] = {}
    for idx, ex in enumerate(pool):
        by_class.setdefault(ex.label, []).append(idx)
    for c in range(num_classes):
        need = 2 * n + mu * n
        have = len(by_class.get(c, []))
        if have < need:
            raise ValueError(
                f"class {c} has {have} pool examples but the protocol needs "
                f"{need} (n={n}, mu={mu})")

    splits = []
    for j in range(num_splits):
        stream = RngStream(seed + j, "split")
        split = FewShotSplit([], [], [], seed=seed + j)
        for c in range(num_classes):
            members = by_class[c]
            perm = stream.child(f"class{c}").permutation(len(members))
            take = [members[int(i)] for i in perm]
            tr, dv = take[:n], take[n:2 * n]
            un = take[2 * n:2 * n + mu * n]
            split.train += [pool[i] for i in tr]
            split.dev += [pool[i] for i in dv]
            split.unlabeled += [UnlabeledExample(pool[i].text, pool[i].label)
                                for i in un]
            split.train_indices += tr
            split.dev_indices += dv
            split.unlabeled_indices += un
        split.validate(n, mu, num_classes)
        splits.append(split)
    return splits


def _cycle(n: int, rng: RngStream, prefix: str) -> Iterator[int]:
    epoch = 0
    while True:
        for i in rng.child(f"{prefix}/epoch{epoch}").permutation(n):
            yield int(i)
        epoch += 1


def batch_iterator(split: FewShotSplit, batch_size: int, mu: int,
                   rng: RngStream) -> Iterator[TrainBatch]:
    """Endless stream of batches: B labeled examples and mu*B unlabeled texts.

    Labeled and unlabeled sides cycle through independent per-epoch shuffles,
    so every example is visited exactly once per epoch and the labeled order
    does not depend on mu at all.
    """
    if batch_size > len(split.train):
        raise ValueError(
            f"batch_size {batch_size} exceeds the {len(split.train)} "
            "training examples")
    if mu > 0 and not split.unlabeled:
        raise ValueError(f"mu={mu} but the split has no unlabeled examples")
    labeled_idx = _cycle(len(split.train), rng, "labeled")
    texts = split.unlabeled_texts()
    unlabeled_idx = _cycle(len(texts), rng, "unlabeled") if mu > 0 else None
    while True:
        labeled = [split.train[next(labeled_idx)] for _ in range(batch_size)]
        unlabeled = ([texts[next(unlabeled_idx)] for _ in range(mu * batch_size)]
                     if mu > 0 else [])
        yield TrainBatch(labeled, unlabeled)


# ---------------------------------------------------------------------------
# file formats


def load_tsv(path: str, arity: int, labels: Sequence[str]) -> list:
    """Labeled TSV: label <TAB> text [<TAB> text_b].

    The label field may be a label name or an integer class index. A first
    row whose label resolves to neither is treated as a header and skipped.
    """
    name_to_index = {name: i for i, name in enumerate(labels)}
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 1 + arity:
                raise ValueError(
                    f"{path}:{lineno}: expected {1 + arity} tab-separated "
                    f"fields, got {len(fields)}")
            raw = fields[0]
            if raw in name_to_index:
                label = name_to_index[raw]
            else:
                try:
                    label = int(raw)
                except ValueError:
                    label = -1
                if not 0 <= label < len(labels):
                    if lineno == 1:
                        continue  # header row
                    raise ValueError(
                        f"{path}:{lineno}: unknown label {raw!r}")
            text = fields[1] if arity == 1 else (fields[1], fields[2])
            out.append(LabeledExample(text, label))
    return out


def load_unlabeled_tsv(path: str, arity: int) -> list:
    """Text-only TSV (one field per template slot); returns bare texts."""
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != arity:
                raise ValueError(
                    f"{path}:{lineno}: expected {arity} tab-separated "
                    f"fields, got {len(fields)}")
            out.append(fields[0] if arity == 1 else (fields[0], fields[1]))
    return out


def save_tsv(path: str, examples: Sequence[LabeledExample],
             labels: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            if isinstance(ex.text, str):
                f.write(f"{labels[ex.label]}\t{ex.text}\n")
            else:
                f.write(f"{labels[ex.label]}\t{ex.text[0]}\t{ex.text[1]}\n")


# ---------------------------------------------------------------------------
# synthetic task


@dataclass
class SynthSpec:
    """Word-soup classification task with a controllable signal level.

    Each class owns a disjoint token set. A sentence from class c draws each
    position from the full word list with probability `noise`, otherwise from
    class c's own tokens.

    `label_words` picks the verbalizer. "class" uses the first token of each
    class set, so the prompt is answerable from co-occurrence alone and
    pretraining can solve it with no labels. "background" reserves the last
    `num_classes` words of the vocabulary as answer words: they belong to no
    class set and are excluded from the noise distribution, so they occur in
    no sentence and co-occur with nothing. The mapping from evidence to
    answer word then has to be learned from labeled examples, which is the
    regime a few-shot method is actually for.

    `corpus_token_frac` < 1.0 hides the tail of every class's token set (and
    of the noise pool) from the pretraining corpus while task sentences keep
    drawing from the full sets. The task then contains vocabulary the
    encoder has never read, which a handful of labeled examples covers
    poorly but a larger unlabeled pool covers well.
    """

    num_classes: int = 2
    vocab_words: int = 100
    tokens_per_class: int = 10
    noise: float = 0.3
    min_len: int = 5
    max_len: int = 12
    pool_per_class: int = 200
    test_per_class: int = 200
    corpus_lines: int = 2000
    label_words: str = "class"
    corpus_token_frac: float = 1.0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.num_classes * self.tokens_per_class > self.vocab_words:
            raise ValueError(
                f"{self.num_classes} classes x {self.tokens_per_class} tokens "
                f"exceed {self.vocab_words} words")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError(f"noise must be in [0, 1], got {self.noise}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.label_words not in ("class", "background"):
            raise ValueError(
                f"label_words must be 'class' or 'background', "
                f"got {self.label_words!r}")
        if (self.label_words == "background"
                and self.num_classes * self.tokens_per_class
                > self.vocab_words - self.num_classes):
            raise ValueError(
                "background label words need words owned by no class; "
                "shrink tokens_per_class or grow vocab_words")
        if not 0.0 < self.corpus_token_frac <= 1.0:
            raise ValueError(
                f"corpus_token_frac must be in (0, 1], "
                f"got {self.corpus_token_frac}")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**d)


@dataclass
class SynthData:
    task: dict
    words: list
    class_tokens: list
    pool: list
    test: list
    corpus: list


def _synth_sentence(cls_tokens: list, noise_words: list, spec: SynthSpec,
                    rng: RngStream) -> str:
    length = int(rng.child("len").integers(spec.min_len, spec.max_len + 1))
    toks = []
    noise_draws = rng.child("noise").uniform(length)
    word_draws = rng.child("word").integers(0, len(noise_words), size=length)
    cls_draws = rng.child("cls").integers(0, len(cls_tokens), size=length)
    for t in range(length):
        if noise_draws[t] < spec.noise:
            toks.append(noise_words[int(word_draws[t])])
        else:
            toks.append(cls_tokens[int(cls_draws[t])])
    return " ".join(toks)


def generate_synthetic_task(spec: SynthSpec, seed: int) -> SynthData:
    width = max(3, len(str(spec.vocab_words - 1)))
    words = [f"w{i:0{width}d}" for i in range(spec.vocab_words)]
    class_tokens = [
        words[c * spec.tokens_per_class:(c + 1) * spec.tokens_per_class]
        for c in range(spec.num_classes)
    ]
    labels = [f"class{c}" for c in range(spec.num_classes)]
    if spec.label_words == "background":
        chosen = words[spec.vocab_words - spec.num_classes:]
        noise_words = words[:spec.vocab_words - spec.num_classes]
    else:
        chosen = [toks[0] for toks in class_tokens]
        noise_words = words
    keep = max(1, int(spec.corpus_token_frac * spec.tokens_per_class + 0.5))
    corpus_class_tokens = [toks[:keep] for toks in class_tokens]
    hidden = {t for toks in class_tokens for t in toks[keep:]}
    corpus_noise_words = [w for w in noise_words if w not in hidden]
    task = {
        "labels": labels,
        "label_words": chosen,
        "template": "{x} [MASK]",
        "arity": 1,
    }
    root = RngStream(seed, "synth")

    def make(kind: str, count_per_class: int) -> list:
        out = []
        for c in range(spec.num_classes):
            for i in range(count_per_class):
                rng = root.child(f"{kind}/class{c}/ex{i}")
                out.append(LabeledExample(
                    _synth_sentence(class_tokens[c], noise_words, spec, rng), c))
        return out

    pool = make("pool", spec.pool_per_class)
    test = make("test", spec.test_per_class)
    corpus = []
    for i in range(spec.corpus_lines):
        rng = root.child(f"corpus/ex{i}")
        c = int(rng.child("pick").integers(0, spec.num_classes))
        corpus.append(_synth_sentence(
            corpus_class_tokens[c], corpus_noise_words, spec, rng))
    return SynthData(task, words, class_tokens, pool, test, corpus)


def write_synth_files(data: SynthData, out_dir: str) -> dict:
    """Write task.json, train/test TSVs, corpus, and vocab; return the paths."""
    import os

    from .tokenizer import build_vocab

    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "task": os.path.join(out_dir, "task.json"),
        "train": os.path.join(out_dir, "train.tsv"),
        "test": os.path.join(out_dir, "test.tsv"),
        "corpus": os.path.join(out_dir, "corpus.txt"),
        "vocab": os.path.join(out_dir, "vocab.txt"),
    }
    with open(paths["task"], "w", encoding="utf-8") as f:
        json.dump(data.task, f, indent=2, sort_keys=True)
        f.write("\n")
    labels = data.task["labels"]
    save_tsv(paths["train"], data.pool, labels)
    save_tsv(paths["test"], data.test, labels)
    with open(paths["corpus"], "w", encoding="utf-8") as f:
        for line in data.corpus:
            f.write(line + "\n")
    vocab = build_vocab(data.corpus, extra_tokens=data.words)
    vocab.save(paths["vocab"])
    return paths
