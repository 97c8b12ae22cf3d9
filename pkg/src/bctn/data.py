"""Vocabulary, synthetic reading-comprehension corpus, JSONL I/O and batching."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, CLS, SEP, BOS, EOS = range(6)
SPECIAL_TOKENS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[BOS]", "[EOS]"]
N_SPECIAL = len(SPECIAL_TOKENS)

DEFAULT_MAX_LEN = 64

# 30 words each; every generated word comes from these lists or TEMPLATE_WORDS.
ENTITIES = [
    "cat", "dog", "fox", "owl", "bear", "wolf", "frog", "duck", "goat", "lion",
    "mouse", "horse", "tiger", "sheep", "crow", "eagle", "otter", "panda", "camel", "zebra",
    "rabbit", "turtle", "monkey", "spider", "parrot", "badger", "beaver", "donkey", "falcon", "lizard",
]
PLACES = [
    "park", "barn", "lake", "cave", "forest", "garden", "kitchen", "garage", "school", "market",
    "river", "desert", "island", "castle", "tower", "bridge", "harbor", "meadow", "valley", "village",
    "library", "museum", "stable", "temple", "cellar", "attic", "canyon", "swamp", "orchard", "station",
]
OBJECTS = [
    "apple", "ball", "bread", "cheese", "honey", "kite", "lamp", "milk", "nut", "pear",
    "rope", "shell", "stone", "sugar", "drum", "flute", "hat", "book", "candle", "coin",
    "feather", "grape", "mango", "pepper", "ribbon", "basket", "bucket", "carrot", "cookie", "pillow",
]
TEMPLATE_WORDS = ["the", "is", "in", "likes", ".", "where", "what", "does", "like", "?"]


class EmptyText(ValueError):
    pass


class MalformedLine(ValueError):
    def __init__(self, line_no: int, reason: str = ""):
        super().__init__(f"line {line_no}: malformed JSON object {reason}".strip())
        self.line_no = line_no


class MissingField(KeyError):
    def __init__(self, name: str, line_no: int | None = None):
        where = f" at line {line_no}" if line_no is not None else ""
        super().__init__(f"missing field {name!r}{where}")
        self.name = name
        self.line_no = line_no


class ExampleTooLong(ValueError):
    pass


class Vocab:
    """Bidirectional token/id map with the six reserved ids fixed at 0..5."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIAL_TOKENS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        """Vocabulary over the whitespace tokens of ``texts``, in first-seen order."""
        vocab = cls()
        for text in texts:
            for w in text.lower().split():
                vocab.add(w)
        return vocab

    @classmethod
    def for_examples(cls, examples: Iterable["QAExample"]) -> "Vocab":
        return cls.build(t for ex in examples for t in (ex.passage, ex.question, ex.answer))

    def tokenize(self, text: str) -> list[int]:
        words = text.lower().split()
        if not words:
            raise EmptyText("cannot tokenize empty text")
        return [self.stoi.get(w, UNK) for w in words]

    def detokenize(self, ids: Sequence[int], strip_special: bool = True) -> str:
        out = []
        for i in ids:
            i = int(i)
            if strip_special and i < N_SPECIAL:
                if i == EOS:
                    break
                continue
            out.append(self.itos[i] if 0 <= i < len(self.itos) else SPECIAL_TOKENS[UNK])
        return " ".join(out)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[:N_SPECIAL] != SPECIAL_TOKENS:
            raise ValueError(f"{path}: reserved tokens missing or out of order")
        return cls(lines[N_SPECIAL:])


@dataclass(frozen=True)
class QAExample:
    """Surface-form (passage, question, answer) triple."""

    passage: str
    question: str
    answer: str

    def to_dict(self) -> dict:
        return {"passage": self.passage, "question": self.question, "answer": self.answer}


@dataclass(frozen=True)
class EncodedExample:
    passage: tuple[int, ...]
    question: tuple[int, ...]
    answer: tuple[int, ...]


def encode_example(ex: QAExample, vocab: Vocab, max_len: int = DEFAULT_MAX_LEN) -> EncodedExample:
    enc = EncodedExample(
        tuple(vocab.tokenize(ex.passage)),
        tuple(vocab.tokenize(ex.question)),
        tuple(vocab.tokenize(ex.answer)),
    )
    longest = max(len(enc.answer), len(enc.question))
    if len(enc.passage) + longest + 3 > max_len:
        raise ExampleTooLong(
            f"passage of {len(enc.passage)} + {longest} tokens + 3 specials exceeds {max_len}")
    return enc


# ---------------------------------------------------------------------------
# synthetic corpus


def generate_toy_corpus(seed: int, n: int) -> list[QAExample]:
    """Templated location/preference facts with copy-heavy sentence answers.

    Each passage holds 2-4 facts about distinct entities; the question targets
    one of them and the answer is that fact's sentence without the full stop.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        n_facts = rng.randint(2, 4)
        entities = rng.sample(ENTITIES, n_facts)
        facts = []
        for ent in entities:
            if rng.random() < 0.5:
                place = rng.choice(PLACES)
                facts.append((f"the {ent} is in the {place}", f"where is the {ent} ?"))
            else:
                obj = rng.choice(OBJECTS)
                facts.append((f"the {ent} likes the {obj}", f"what does the {ent} like ?"))
        sentence, question = facts[rng.randrange(n_facts)]
        passage = " ".join(f"{s} ." for s, _ in facts)
        out.append(QAExample(passage, question, sentence))
    return out


def train_test_split(examples: Sequence[QAExample], n_train: int) -> tuple[list, list]:
    return list(examples[:n_train]), list(examples[n_train:])


# ---------------------------------------------------------------------------
# JSONL


def load_jsonl(path) -> list[QAExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLine(line_no, f"({exc.msg})") from None
            if not isinstance(obj, dict):
                raise MalformedLine(line_no, "(not an object)")
            for key in ("passage", "question", "answer"):
                if key not in obj:
                    raise MissingField(key, line_no)
                if not isinstance(obj[key], str):
                    raise MalformedLine(line_no, f"(field {key!r} is not a string)")
            out.append(QAExample(obj["passage"], obj["question"], obj["answer"]))
    return out


def save_jsonl(examples: Iterable[QAExample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_dict(), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    """Padded id matrices with lengths and masks for each field."""

    passage: np.ndarray
    question: np.ndarray
    answer: np.ndarray
    passage_len: np.ndarray
    question_len: np.ndarray
    answer_len: np.ndarray

    @property
    def size(self) -> int:
        return self.passage.shape[0]

    @staticmethod
    def _mask(lengths: np.ndarray, width: int) -> np.ndarray:
        return (np.arange(width)[None, :] < lengths[:, None]).astype(np.int64)

    @property
    def passage_mask(self) -> np.ndarray:
        return self._mask(self.passage_len, self.passage.shape[1])

    @property
    def question_mask(self) -> np.ndarray:
        return self._mask(self.question_len, self.question.shape[1])

    @property
    def answer_mask(self) -> np.ndarray:
        return self._mask(self.answer_len, self.answer.shape[1])

    def examples(self) -> list[EncodedExample]:
        """Unpadded rows, for per-example processing."""
        return [
            EncodedExample(
                tuple(int(x) for x in self.passage[i, : self.passage_len[i]]),
                tuple(int(x) for x in self.question[i, : self.question_len[i]]),
                tuple(int(x) for x in self.answer[i, : self.answer_len[i]]),
            )
            for i in range(self.size)
        ]


def _pad(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    mat = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        mat[i, : len(s)] = s
    return mat, np.array([len(s) for s in seqs], dtype=np.int64)


def batchify(examples: Sequence[EncodedExample], batch_size: int,
             pad_to: int = DEFAULT_MAX_LEN) -> list[Batch]:
    """Group encoded examples into padded batches; the last one may be short.

    Each field is padded to its longest member in the batch; ``pad_to`` bounds
    the assembled encoder input length N + K + 3.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    for ex in examples:
        if len(ex.passage) + max(len(ex.answer), len(ex.question)) + 3 > pad_to:
            raise ExampleTooLong(f"example exceeds pad_to={pad_to}")
    batches = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        p, pl = _pad([e.passage for e in chunk])
        q, ql = _pad([e.question for e in chunk])
        a, al = _pad([e.answer for e in chunk])
        batches.append(Batch(p, q, a, pl, ql, al))
    return batches
