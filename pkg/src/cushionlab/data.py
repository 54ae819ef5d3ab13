"""Byte-level tokenizer, corpus splits and seeded window sampling."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

BOS = 256
NEWLINE = 10
VOCAB_SIZE = 257

SPECIAL_TOKENS = {"bos": BOS, "newline": NEWLINE, "space": 32}


class CorpusError(ValueError):
    pass


def tokenize(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)


def detokenize(ids) -> str:
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= VOCAB_SIZE):
        raise ValueError(f"token id out of range [0, {VOCAB_SIZE})")
    # specials have no byte form and are dropped
    return bytes(int(i) for i in ids if i < 256).decode("utf-8", errors="replace")


def bundled_corpus_path() -> Path:
    return Path(str(resources.files("cushionlab") / "data" / "corpus.txt"))


@dataclass(frozen=True)
class Corpus:
    train: np.ndarray
    heldout: np.ndarray
    source: str
    split: float

    @classmethod
    def from_text(cls, text: str, split: float = 0.9, source: str = "<text>") -> Corpus:
        if not 0.0 < split < 1.0:
            raise CorpusError(f"split fraction must be in (0, 1), got {split}")
        ids = tokenize(text)
        cut = int(len(ids) * split)
        if cut == 0 or cut == len(ids):
            raise CorpusError(f"corpus {source!r} is too small to split ({len(ids)} bytes)")
        return cls(train=ids[:cut], heldout=ids[cut:], source=source, split=split)

    @classmethod
    def load(cls, path: str | Path | None = None, split: float = 0.9) -> Corpus:
        path = Path(path) if path is not None else bundled_corpus_path()
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise CorpusError(f"cannot read corpus {path}: {exc}") from exc
        if not text:
            raise CorpusError(f"corpus {path} is empty")
        return cls.from_text(text, split=split, source=str(path))

    def get(self, name: str) -> np.ndarray:
        if name == "train":
            return self.train
        if name in ("heldout", "held-out", "valid"):
            return self.heldout
        raise CorpusError(f"unknown split {name!r}")


def sample_sequence(tokens: np.ndarray, n: int, seed: int, index: int = 0) -> np.ndarray:
    """Window of ``n`` tokens at a uniform offset, fixed by ``(seed, index)``."""
    if n < 1:
        raise CorpusError(f"sequence length must be positive, got {n}")
    if len(tokens) < n:
        raise CorpusError(f"split has {len(tokens)} tokens, cannot draw {n}")
    rng = np.random.default_rng([seed, index])
    start = int(rng.integers(0, len(tokens) - n + 1))
    return tokens[start : start + n].copy()


def sample_batch(tokens: np.ndarray, n: int, count: int, seed: int, start_index: int = 0) -> np.ndarray:
    return np.stack([sample_sequence(tokens, n, seed, start_index + i) for i in range(count)])
