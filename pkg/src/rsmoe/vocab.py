from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

from .errors import DataError, VocabularyError
from .scenes import SEP, grammar_words

PAD, BOS, EOS, SEP_ID = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", SEP)
_SILENT = frozenset((PAD, BOS))


@dataclass(frozen=True)
class Vocab:
    """
    Closed word-level vocabulary. Ids 0..3 are PAD, BOS, EOS and SEP; SEP is
    written as the sentence period so rendered captions read naturally.
    """

    tokens: tuple
    index: Dict[str, int] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if tuple(self.tokens[:4]) != SPECIAL_TOKENS:
            raise VocabularyError(f"vocabulary must start with {SPECIAL_TOKENS}, got {self.tokens[:4]}")
        if len(set(self.tokens)) != len(self.tokens):
            raise VocabularyError("vocabulary tokens must be unique")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> List[int]:
        ids = []
        for word in text.split():
            tid = self.index.get(word)
            if tid is None:
                raise VocabularyError(f"unknown word: {word!r}")
            ids.append(tid)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        """Words up to the first EOS; PAD and BOS are dropped."""
        words = []
        for tid in ids:
            tid = int(tid)
            if not 0 <= tid < len(self.tokens):
                raise DataError(f"token id {tid} outside vocabulary of size {len(self.tokens)}")
            if tid == EOS:
                break
            if tid in _SILENT:
                continue
            words.append(self.tokens[tid])
        return " ".join(words)


_DEFAULT: Optional[Vocab] = None


def build_vocab(extra: Sequence[str] = ()) -> Vocab:
    words = sorted(set(grammar_words()) | set(extra))
    return Vocab(tokens=SPECIAL_TOKENS + tuple(w for w in words if w not in SPECIAL_TOKENS))


def default_vocab() -> Vocab:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = build_vocab()
    return _DEFAULT


def normalize(text: str) -> str:
    return " ".join(text.lower().split())
