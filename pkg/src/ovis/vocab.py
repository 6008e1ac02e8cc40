"""Token dictionary and greedy longest-match subword tokenization.

A vocabulary is a plain text file, one token per line; the zero-based line
number is the token id. Continuation pieces carry a ``##`` prefix. Queries
and captions are lowercased, split on whitespace/punctuation, and each word
is decomposed greedily into the longest matching dictionary pieces; words
with no valid decomposition map to a single ``[UNK]``.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DataError, UsageError

PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
MASK_TOKEN = "[MASK]"
SPECIAL_TOKENS = (PAD_TOKEN, UNK_TOKEN, MASK_TOKEN)

CONTINUATION_PREFIX = "##"
MAX_WORD_CHARS = 64  # longer words map straight to [UNK]

# words = runs of letters/digits; punctuation and underscores split and drop
_WORD_RE = re.compile(r"[^\W_]+", re.UNICODE)


class VocabularyError(DataError):
    pass


class DuplicateTokenError(VocabularyError):
    pass


class MissingSpecialTokenError(VocabularyError):
    pass


class EmptyVocabularyError(VocabularyError):
    pass


class UnknownTokenIdError(VocabularyError):
    pass


class EmptyQueryError(UsageError):
    pass


class LeadingContinuationWarning(UserWarning):
    """Detokenization saw a ``##`` piece with nothing to fuse onto."""


@dataclass(frozen=True)
class Vocabulary:
    """Immutable token dictionary; id = position in ``tokens``."""

    tokens: tuple[str, ...]
    pad_id: int
    unk_id: int
    mask_id: int
    _lookup: dict[str, int] = field(repr=False, compare=False, default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset((self.pad_id, self.unk_id, self.mask_id))

    def id_of(self, token: str) -> int | None:
        return self._lookup.get(token)

    def token_at(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise UnknownTokenIdError(f"token id {token_id} out of range (D={self.size})")
        return self.tokens[token_id]

    def __contains__(self, token: str) -> bool:
        return token in self._lookup


@dataclass(frozen=True)
class TokenSequence:
    """Token ids for one piece of text, with the original surface kept."""

    ids: tuple[int, ...]
    surface: str

    def __len__(self) -> int:
        return len(self.ids)


def build_vocabulary(tokens: Sequence[str]) -> Vocabulary:
    """Construct and validate a vocabulary from an ordered token list."""
    if not tokens:
        raise EmptyVocabularyError("vocabulary has no tokens")
    lookup: dict[str, int] = {}
    for i, tok in enumerate(tokens):
        if tok in lookup:
            raise DuplicateTokenError(f"duplicate token {tok!r} at ids {lookup[tok]} and {i}")
        lookup[tok] = i
    for special in SPECIAL_TOKENS:
        if special not in lookup:
            raise MissingSpecialTokenError(f"missing special token {special}")
    if len(tokens) < len(SPECIAL_TOKENS) + 1:
        raise VocabularyError("vocabulary needs at least one token beyond the specials")
    return Vocabulary(
        tokens=tuple(tokens),
        pad_id=lookup[PAD_TOKEN],
        unk_id=lookup[UNK_TOKEN],
        mask_id=lookup[MASK_TOKEN],
        _lookup=lookup,
    )


def load_vocabulary(path: str | Path) -> Vocabulary:
    """Load a one-token-per-line UTF-8 vocabulary file."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()  # trailing newline is not an empty token
    if not lines:
        raise EmptyVocabularyError(f"{path}: empty vocabulary file")
    return build_vocabulary(lines)


def save_vocabulary(vocab: Vocabulary, path: str | Path) -> None:
    Path(path).write_text("\n".join(vocab.tokens) + "\n", encoding="utf-8")


def split_words(text: str) -> list[str]:
    """Lowercase and split into words; punctuation separates and is dropped."""
    return _WORD_RE.findall(text.lower())


def _decompose(vocab: Vocabulary, word: str) -> list[int] | None:
    """Greedy longest-prefix decomposition; None when the word cannot be
    covered by dictionary pieces."""
    pieces: list[int] = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while start < end:
            piece = word[start:end]
            if start > 0:
                piece = CONTINUATION_PREFIX + piece
            token_id = vocab.id_of(piece)
            if token_id is not None:
                match = token_id
                break
            end -= 1
        if match is None:
            return None
        pieces.append(match)
        start = end
    return pieces


def tokenize(vocab: Vocabulary, text: str) -> TokenSequence:
    """Tokenize a query or caption into dictionary token ids."""
    if not text or not text.strip():
        raise EmptyQueryError("query is empty or whitespace-only")
    ids: list[int] = []
    for word in split_words(text):
        if len(word) > MAX_WORD_CHARS:
            ids.append(vocab.unk_id)
            continue
        pieces = _decompose(vocab, word)
        ids.extend(pieces if pieces is not None else [vocab.unk_id])
    if not ids:
        # punctuation-only input carries no searchable words
        raise EmptyQueryError(f"no words found in {text!r}")
    return TokenSequence(ids=tuple(ids), surface=text)


def detokenize(vocab: Vocabulary, ids: Iterable[int]) -> str:
    """Render token ids back to text, fusing ``##`` continuations.

    A continuation with no preceding token is rendered bare and reported
    via ``LeadingContinuationWarning``.
    """
    words: list[str] = []
    for token_id in ids:
        token = vocab.token_at(token_id)
        if token.startswith(CONTINUATION_PREFIX):
            if words:
                words[-1] += token[len(CONTINUATION_PREFIX) :]
            else:
                warnings.warn(
                    f"leading continuation piece {token!r}", LeadingContinuationWarning
                )
                words.append(token[len(CONTINUATION_PREFIX) :])
        else:
            words.append(token)
    return " ".join(words)


def tokens_of(vocab: Vocabulary, ids: Iterable[int]) -> list[str]:
    """Token strings for a sequence of ids (debugging / API responses)."""
    return [vocab.token_at(i) for i in ids]
