"""Prompt templates and caption augmentation with an expanded type vocabulary."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .errors import AugmentationMiss, DataError, PreconditionError

if TYPE_CHECKING:
    from .encoder import FrozenEncoderPair

logger = logging.getLogger(__name__)

PLACEHOLDER = "[CONCEPT]"

DEFAULT_TEMPLATES: tuple[str, ...] = (
    "This is a photo of a [CONCEPT]",
    "This photo contains a [CONCEPT]",
    "A photo of a [CONCEPT]",
    "This is an illustrations of a [CONCEPT]",
    "This illustrations contains a [CONCEPT]",
    "An illustrations of a [CONCEPT]",
    "This is a sketch of a [CONCEPT]",
    "This sketch contains a [CONCEPT]",
    "A sketch of a [CONCEPT]",
    "This is a diagram of a [CONCEPT]",
    "This diagram contains a [CONCEPT]",
    "A diagram of a [CONCEPT]",
    "A [CONCEPT]",
    "We see a [CONCEPT]",
    "[CONCEPT]",
    "We see a [CONCEPT] in this photo",
    "We see a [CONCEPT] in this image",
    "We see a [CONCEPT] in this illustration",
    "We see a [CONCEPT] photo",
    "We see a [CONCEPT] image",
    "We see a [CONCEPT] illustration",
    "[CONCEPT] photo",
    "[CONCEPT] image",
    "[CONCEPT] illustration",
)


@dataclass(frozen=True)
class PromptBank:
    templates: tuple[str, ...] = DEFAULT_TEMPLATES

    def __post_init__(self) -> None:
        object.__setattr__(self, "templates", tuple(self.templates))
        for t in self.templates:
            if t.count(PLACEHOLDER) != 1:
                raise PreconditionError(f"template must contain {PLACEHOLDER} exactly once: {t!r}")

    def __len__(self) -> int:
        return len(self.templates)

    def sample(self, rng: np.random.Generator) -> str:
        return sample_template(rng, self)


def sample_template(rng: np.random.Generator, bank: PromptBank | None = None) -> str:
    """Uniform draw from the bank; reproducible given the generator state."""
    bank = PromptBank() if bank is None else bank
    if not bank.templates:
        raise PreconditionError("prompt bank is empty")
    return bank.templates[int(rng.integers(len(bank.templates)))]


def split_template(template: str) -> tuple[str, str]:
    prefix, _, suffix = template.partition(PLACEHOLDER)
    return prefix, suffix


# -- type vocabulary ---------------------------------------------------------


def read_type_file(path: str | Path) -> list[str]:
    """Read a one-type-per-line UTF-8 file, rejecting duplicate lines."""
    types: list[str] = []
    seen: dict[str, int] = {}
    dupes: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            t = line.strip()
            if not t:
                continue
            if t in seen:
                dupes.append(f"{t!r} on lines {seen[t]} and {lineno}")
                continue
            seen[t] = lineno
            types.append(t)
    if dupes:
        raise DataError(f"duplicate types in {path}: " + "; ".join(dupes))
    return types


def sample_types() -> list[str]:
    """The bundled 200-type sample vocabulary."""
    ref = resources.files("palavra") / "data" / "types_sample.txt"
    with resources.as_file(ref) as p:
        return read_type_file(p)


@dataclass
class TypeVocabulary:
    types: list[str]
    type_embeddings: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if len(self.types) != len(self.type_embeddings):
            raise DataError("types and embeddings are not aligned")

    @classmethod
    def build(cls, types: Iterable[str], encoder: "FrozenEncoderPair") -> "TypeVocabulary":
        types = list(types)
        if len(set(types)) != len(types):
            raise DataError("type vocabulary contains duplicates")
        if types:
            emb = np.stack([encoder.encode_text(encoder.tokenize(t)) for t in types])
        else:
            emb = np.zeros((0, encoder.output_dim), dtype=np.float32)
        return cls(types, emb)

    def __len__(self) -> int:
        return len(self.types)


def nearest_types(
    src_type: str,
    vocab: TypeVocabulary,
    encoder: "FrozenEncoderPair",
    k: int = 1,
    exclude: Sequence[str] = (),
) -> list[str]:
    """The ``k`` vocabulary types closest to ``src_type`` in text space.

    Ordered by descending cosine; ties go to the lower vocabulary index.
    """
    if len(vocab) == 0:
        raise PreconditionError("type vocabulary is empty")
    q = encoder.encode_text(encoder.tokenize(src_type)).astype(np.float64)
    sims = vocab.type_embeddings.astype(np.float64) @ q
    banned = set(exclude)
    # stable sort on -sims keeps index order among equal scores
    order = np.argsort(-sims, kind="stable")
    out = [vocab.types[i] for i in order if vocab.types[i] not in banned]
    return out[:k]


def nearest_type(src_type: str, vocab: TypeVocabulary, encoder: "FrozenEncoderPair") -> str:
    return nearest_types(src_type, vocab, encoder, k=1)[0]


def _word_pattern(src_type: str) -> re.Pattern[str]:
    return re.compile(r"(?<!\w)" + re.escape(src_type) + r"(?!\w)", re.IGNORECASE)


def augment_caption(caption: str, src_type: str, replacement: str) -> str:
    """Replace the first whole-word, case-insensitive occurrence of ``src_type``."""
    m = _word_pattern(src_type).search(caption)
    if m is None:
        raise AugmentationMiss(f"{src_type!r} does not occur in caption {caption!r}")
    return caption[: m.start()] + replacement + caption[m.end() :]


def build_replacements(
    src_types: Iterable[str],
    vocab: TypeVocabulary,
    encoder: "FrozenEncoderPair",
    top_k: int = 1,
) -> dict[str, list[str]]:
    """Map each source type to its replacement candidates.

    The source type itself is excluded, otherwise the nearest type would
    always be the identity.
    """
    return {
        t: nearest_types(t, vocab, encoder, k=top_k, exclude=(t,))
        for t in dict.fromkeys(src_types)
    }
