"""Vocabulary, TSV ingestion, synthetic tasks, and batching.

Everything here is a pure function of its inputs and seeds: rebuilding a
vocabulary, regenerating a dataset, or reshuffling an epoch with the same
seed gives byte-identical results. Tokenization is whitespace splitting —
the tasks are synthetic and tokenizer sophistication is beside the point.

Synthetic tasks (desk-scale stand-ins for sentence classification):

* ``majority``  — label = the token-bucket with the highest count.
* ``parity``    — label = (count of a marked token) mod n_classes.
* ``keyphrase`` — label = bit pattern of which marker bigrams occur.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Iterator, List, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError

PAD_ID = 0
UNK_ID = 1
CLS_ID = 2
RESERVED_TOKENS = ("<pad>", "<unk>", "<cls>")
FIRST_CONTENT_ID = len(RESERVED_TOKENS)


@dataclass
class Vocab:
    token_to_id: dict
    id_to_token: list

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def encode(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode_text(self, text: str) -> List[int]:
        return [self.encode(t) for t in text.split()]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.id_to_token[i] for i in ids)


@dataclass(frozen=True)
class LabeledExample:
    token_ids: Tuple[int, ...]
    label: int


def build_vocab(lines: Iterable[str]) -> Vocab:
    """Whitespace tokens ordered by descending frequency, ties lexicographic."""
    counts = Counter()
    for line in lines:
        counts.update(line.split())
    if not counts:
        raise DataError("empty corpus: no tokens to build a vocabulary from")
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    id_to_token = list(RESERVED_TOKENS) + [tok for tok, _ in ordered]
    return Vocab(token_to_id={t: i for i, t in enumerate(id_to_token)},
                 id_to_token=id_to_token)


def synthetic_vocab(vocab_size: int) -> Vocab:
    """Fixed vocabulary w003, w004, ... matching synthetic task token ids."""
    if vocab_size <= FIRST_CONTENT_ID:
        raise ConfigError(f"vocab_size must exceed {FIRST_CONTENT_ID}, got {vocab_size}")
    id_to_token = list(RESERVED_TOKENS) + [f"w{i:03d}" for i in range(FIRST_CONTENT_ID, vocab_size)]
    return Vocab(token_to_id={t: i for i, t in enumerate(id_to_token)},
                 id_to_token=id_to_token)


def encode_example(text: str, label: int, vocab: Vocab, max_len: int) -> LabeledExample:
    ids = [CLS_ID] + vocab.encode_text(text)
    ids = ids[:max_len]
    ids += [PAD_ID] * (max_len - len(ids))
    return LabeledExample(token_ids=tuple(ids), label=label)


def load_tsv(path: str, vocab: Vocab, max_len: int) -> List[LabeledExample]:
    """Read "text<TAB>label" rows; errors name the offending line number."""
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise DataError(f"{path}:{lineno}: expected 'text<TAB>label'")
            text, _, label_str = line.rpartition("\t")
            try:
                label = int(label_str)
            except ValueError:
                raise DataError(f"{path}:{lineno}: label {label_str!r} is not an integer")
            if label < 0:
                raise DataError(f"{path}:{lineno}: label {label} is negative")
            examples.append(encode_example(text, label, vocab, max_len))
    return examples


def save_tsv(path: str, examples: Sequence[LabeledExample], vocab: Vocab) -> None:
    """Inverse of load_tsv for exporting generated datasets."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            body = [i for i in ex.token_ids if i not in (PAD_ID, CLS_ID)]
            fh.write(f"{vocab.decode(body)}\t{ex.label}\n")


# -- synthetic task generation ----------------------------------------------


def _bucket_of(token_id: int, n_classes: int) -> int:
    return (token_id - FIRST_CONTENT_ID) % n_classes


def marker_bigrams(n_classes: int) -> List[Tuple[int, int]]:
    """The keyphrase task's planted bigrams, one per label bit."""
    n_bits = max(1, math.ceil(math.log2(n_classes)))
    return [(FIRST_CONTENT_ID + 2 * b, FIRST_CONTENT_ID + 2 * b + 1)
            for b in range(n_bits)]


def _gen_majority(rng, body_len, content, n_classes, target):
    """Rejection-sample bodies until the majority bucket equals the target."""
    while True:
        body = rng.choice(content, size=body_len)
        counts = np.zeros(n_classes, dtype=int)
        for t in body:
            counts[_bucket_of(int(t), n_classes)] += 1
        if int(np.argmax(counts)) == target:
            return [int(t) for t in body]


def _gen_parity(rng, body_len, content, n_classes, target):
    """Plant exactly c marked tokens with c = target (mod n_classes)."""
    marked = content[0]
    others = content[1:]
    choices = [c for c in (target, target + n_classes) if c <= body_len]
    count = int(choices[rng.integers(len(choices))]) if len(choices) > 1 else choices[0]
    body = [int(t) for t in rng.choice(others, size=body_len)]
    for pos in rng.choice(body_len, size=count, replace=False):
        body[int(pos)] = int(marked)
    return body


def _gen_keyphrase(rng, body_len, content, n_classes, target):
    """Plant the marker bigrams named by the target's bits, nothing else."""
    bigrams = marker_bigrams(n_classes)
    marker_tokens = {t for bg in bigrams for t in bg}
    fillers = [c for c in content if c not in marker_tokens]
    planted = [bg for b, bg in enumerate(bigrams) if target >> b & 1]
    while True:
        body = [int(t) for t in rng.choice(fillers, size=body_len)]
        used = set()
        ok = True
        for bg in planted:
            free = [s for s in range(body_len - 1) if not used & {s, s + 1}]
            if not free:
                ok = False
                break
            start = int(free[rng.integers(len(free))])
            body[start], body[start + 1] = bg[0], bg[1]
            used.update({start, start + 1})
        if ok:
            return body


def synthetic_task(kind: str, n_examples: int, vocab_size: int, seq_len: int,
                   n_classes: int, seed: int) -> Tuple[List[LabeledExample], List[LabeledExample]]:
    """Generate a balanced labeled dataset and split it 80/20.

    Sequences are seq_len ids with a leading cls token. Targets cycle through
    the classes so the full set is balanced; the split shuffle is seeded.
    """
    if min(n_examples, vocab_size, seq_len, n_classes) <= 0:
        raise ConfigError("synthetic_task arguments must be positive")
    if n_classes < 2:
        raise ConfigError("synthetic_task needs at least 2 classes")
    if seq_len < 3:
        raise ConfigError("synthetic_task needs seq_len >= 3")
    content = list(range(FIRST_CONTENT_ID, vocab_size))
    body_len = seq_len - 1

    if kind == "majority":
        if len(content) < n_classes:
            raise ConfigError("majority task needs at least n_classes content tokens")
        gen = _gen_majority
    elif kind == "parity":
        if len(content) < 2:
            raise ConfigError("parity task needs at least 2 content tokens")
        gen = _gen_parity
    elif kind == "keyphrase":
        n_marker = 2 * len(marker_bigrams(n_classes))
        if len(content) < n_marker + 1:
            raise ConfigError(
                f"keyphrase task needs at least {n_marker + 1} content tokens"
            )
        if body_len < n_marker:
            raise ConfigError("keyphrase sequences too short to plant all bigrams")
        gen = _gen_keyphrase
    else:
        raise ConfigError(f"unknown synthetic task kind {kind!r}")

    rng = np.random.default_rng(seed)
    examples = []
    for i in range(n_examples):
        target = i % n_classes
        body = gen(rng, body_len, content, n_classes, target)
        examples.append(LabeledExample(token_ids=(CLS_ID, *body), label=target))

    order = rng.permutation(n_examples)
    n_train = round(0.8 * n_examples)
    train = [examples[i] for i in order[:n_train]]
    test = [examples[i] for i in order[n_train:]]
    return train, test


def batch_iter(examples: Sequence[LabeledExample], batch_size: int,
               rng: np.random.Generator) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Seeded shuffle, then (ids, labels) arrays; the final short batch is kept."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(len(examples))
    for start in range(0, len(examples), batch_size):
        chunk = [examples[i] for i in order[start:start + batch_size]]
        ids = np.array([ex.token_ids for ex in chunk], dtype=np.int64)
        labels = np.array([ex.label for ex in chunk], dtype=np.int64)
        yield ids, labels


def dataset_checksum(examples: Sequence[LabeledExample]) -> str:
    """Order-sensitive digest for reproducibility assertions."""
    import hashlib
    h = hashlib.sha256()
    for ex in examples:
        h.update(np.array(ex.token_ids, dtype=np.int64).tobytes())
        h.update(np.int64(ex.label).tobytes())
    return h.hexdigest()
