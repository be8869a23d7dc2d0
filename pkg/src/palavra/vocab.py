"""Personalized tokens and query assembly.

A query such as ``"a photo of a [MY-SKIRT] on a bench"`` is expanded by
replacing the symbol with its learned word embedding followed by the tokens
of its type string, e.g. ``a photo of a <w> skirt on a bench``.
"""
from __future__ import annotations

import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterator

import numpy as np

from .archive import load_archive, save_archive
from .encoder import TokenEmbeddingSequence
from .errors import ContextLengthError, InputError, VocabularyError

if TYPE_CHECKING:
    from .encoder import FrozenEncoderPair

SYMBOL_RE = re.compile(r"\[[A-Z0-9\-]+\]")


@dataclass
class PersonalizedToken:
    symbol: str
    type_string: str
    embedding: np.ndarray = field(repr=False)
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not SYMBOL_RE.fullmatch(self.symbol):
            raise InputError(f"bad concept symbol {self.symbol!r}; expected e.g. [MY-SKIRT]")
        self.embedding = np.asarray(self.embedding, dtype=np.float32).reshape(-1)


class TokenRegistry:
    """Add-only mapping from symbol to :class:`PersonalizedToken`."""

    def __init__(self, word_dim: int | None = None):
        self.word_dim = word_dim
        self.tokens: dict[str, PersonalizedToken] = {}
        self._lock = threading.Lock()

    def __contains__(self, symbol: str) -> bool:
        return symbol in self.tokens

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self) -> Iterator[PersonalizedToken]:
        return iter(self.tokens.values())

    def register(self, token: PersonalizedToken) -> None:
        with self._lock:
            if token.symbol in self.tokens:
                raise VocabularyError(f"symbol {token.symbol} is already registered")
            if self.word_dim is not None and token.embedding.shape != (self.word_dim,):
                raise InputError(f"{token.symbol}: embedding dim {token.embedding.size} != {self.word_dim}")
            self.tokens[token.symbol] = token

    def get(self, symbol: str) -> PersonalizedToken:
        try:
            return self.tokens[symbol]
        except KeyError:
            raise VocabularyError(f"unregistered concept symbol {symbol}") from None

    def save(self, path: str | Path) -> None:
        tensors = {t.symbol: t.embedding for t in self.tokens.values()}
        meta = {
            "kind": "tokens",
            "word_dim": self.word_dim,
            "tokens": {t.symbol: {"type": t.type_string, "provenance": t.provenance} for t in self.tokens.values()},
        }
        save_archive(path, tensors, meta)

    @classmethod
    def load(cls, path: str | Path) -> "TokenRegistry":
        tensors, meta = load_archive(path)
        reg = cls(meta.get("word_dim"))
        for symbol in sorted(meta["tokens"]):
            rec = meta["tokens"][symbol]
            reg.register(PersonalizedToken(symbol, rec["type"], tensors[symbol], rec.get("provenance", {})))
        return reg


def find_symbols(sentence: str) -> list[str]:
    return SYMBOL_RE.findall(sentence)


def expand_query(sentence: str, reg: TokenRegistry, enc: "FrozenEncoderPair") -> TokenEmbeddingSequence:
    """Tokenize ``sentence``, splicing in ``[embedding] + tokens(type)`` for each symbol."""
    elements: list[Any] = []
    pos = 0
    for m in SYMBOL_RE.finditer(sentence):
        tok = reg.get(m.group(0))
        if tok.embedding.shape != (enc.word_dim,):
            raise InputError(f"{tok.symbol}: embedding dim {tok.embedding.size}, encoder word dim {enc.word_dim}")
        elements += enc.tokenize(sentence[pos : m.start()])
        elements.append(tok.embedding)
        elements += enc.tokenize(tok.type_string)
        pos = m.end()
    elements += enc.tokenize(sentence[pos:])
    seq = TokenEmbeddingSequence(elements)
    if len(seq) > enc.max_context:
        raise ContextLengthError(f"expanded query has {len(seq)} positions, context length is {enc.max_context}")
    return seq


def encode_query(sentence: str, reg: TokenRegistry, enc: "FrozenEncoderPair") -> np.ndarray:
    return enc.encode_text(expand_query(sentence, reg, enc))


def substitute_types(sentence: str, types: dict[str, str]) -> str:
    """Replace each symbol by its concept type string (the text-only query)."""

    def repl(m: re.Match[str]) -> str:
        try:
            return types[m.group(0)]
        except KeyError:
            raise VocabularyError(f"no concept type for symbol {m.group(0)}") from None

    return SYMBOL_RE.sub(repl, sentence)
