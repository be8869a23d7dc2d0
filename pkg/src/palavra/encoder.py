"""Frozen dual-encoder contract and its implementations.

``FrozenEncoderPair`` is the interface the rest of the package programs
against. Text goes in as a :class:`TokenEmbeddingSequence`, whose elements
are token ids or raw word-space vectors; a raw vector is treated exactly
like a word-table row, which is how learned concept embeddings reach the
text encoder without touching its weights.

Three implementations:

* :class:`ToyEncoder` - deterministic, differentiable, desk-scale. Word
  embeddings are known, so recovery of planted concepts can be measured.
* :class:`ExternalEncoderClient` - HTTP client for a local inference
  service. Encoding only; no gradients.
* :class:`ClipEncoder` - in-process adapter over a pretrained CLIP model
  (optional ``transformers`` dependency).
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
import urllib.error
import urllib.request
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Sequence, Union

import numpy as np
import torch

from .errors import (
    ConfigError,
    ContextLengthError,
    InputError,
    NotDifferentiableError,
    PreconditionError,
    TransportError,
    VocabularyError,
)
from .textaug import DEFAULT_TEMPLATES, PLACEHOLDER, sample_types, split_template

logger = logging.getLogger(__name__)

MAX_CONTEXT = 77
NORM_TOL = 1e-6
# set by the test suite; every encoder output is then checked for unit norm
CHECK_NORMS = bool(os.environ.get("PALAVRA_CHECK_NORMS"))

Element = Union[int, np.ndarray]


@dataclass
class TokenEmbeddingSequence:
    """Token ids interleaved with raw word-space vectors."""

    elements: list[Element] = field(default_factory=list)

    @classmethod
    def from_ids(cls, ids: Iterable[int]) -> "TokenEmbeddingSequence":
        return cls([int(i) for i in ids])

    def __len__(self) -> int:
        return len(self.elements)

    def __add__(self, other: "TokenEmbeddingSequence | Sequence[Element]") -> "TokenEmbeddingSequence":
        rhs = other.elements if isinstance(other, TokenEmbeddingSequence) else list(other)
        return TokenEmbeddingSequence(self.elements + rhs)

    def raw_positions(self) -> list[int]:
        return [i for i, e in enumerate(self.elements) if not _is_id(e)]

    def to_json(self) -> list[Any]:
        return [int(e) if _is_id(e) else np.asarray(e, dtype=np.float32).tolist() for e in self.elements]

    @classmethod
    def from_json(cls, items: Sequence[Any]) -> "TokenEmbeddingSequence":
        return cls([int(e) if isinstance(e, int) else np.asarray(e, dtype=np.float32) for e in items])


def _is_id(e: Any) -> bool:
    return isinstance(e, (int, np.integer))


def _as_sequence(seq: "TokenEmbeddingSequence | Sequence[Element]") -> TokenEmbeddingSequence:
    if isinstance(seq, TokenEmbeddingSequence):
        return seq
    return TokenEmbeddingSequence(list(seq))


def l2_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return x / x.norm(dim=dim, keepdim=True)


def _check_unit(v: np.ndarray) -> np.ndarray:
    if CHECK_NORMS:
        n = float(np.linalg.norm(v.astype(np.float64)))
        assert abs(n - 1.0) <= NORM_TOL, f"encoder output norm {n} is not 1"
    return v


class FrozenEncoderPair(ABC):
    """Frozen image and text encoders sharing one output space."""

    output_dim: int
    word_dim: int
    max_context: int = MAX_CONTEXT

    @abstractmethod
    def tokenize(self, text: str) -> list[int]:
        ...

    @property
    @abstractmethod
    def vocab_size(self) -> int:
        ...

    @abstractmethod
    def word_vectors(self, ids: Sequence[int]) -> torch.Tensor:
        """Rows of the word table, shape ``(len(ids), word_dim)``."""

    @abstractmethod
    def text_forward(self, embeds: torch.Tensor) -> torch.Tensor:
        """Differentiable text encoder body: ``(B, L, word_dim) -> (B, output_dim)``, unit rows."""

    @abstractmethod
    def encode_image(self, record: Any) -> np.ndarray:
        ...

    @abstractmethod
    def digest(self) -> str:
        """Hash of every encoder parameter."""

    # -- shared text path ------------------------------------------------

    def validate(self, seq: TokenEmbeddingSequence) -> None:
        if len(seq) == 0:
            raise PreconditionError("empty token sequence")
        if len(seq) > self.max_context:
            raise ContextLengthError(f"sequence of {len(seq)} positions exceeds context length {self.max_context}")
        for e in seq.elements:
            if _is_id(e):
                if not 0 <= int(e) < self.vocab_size:
                    raise VocabularyError(f"unknown token id {int(e)}")
            elif np.shape(e) != (self.word_dim,):
                raise InputError(f"raw vector has shape {np.shape(e)}, expected ({self.word_dim},)")

    def embed_sequence(self, seq: "TokenEmbeddingSequence | Sequence[Element]", dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """Stack word-table rows and raw vectors into ``(L, word_dim)``."""
        seq = _as_sequence(seq)
        self.validate(seq)
        rows = []
        ids = [int(e) for e in seq.elements if _is_id(e)]
        table = self.word_vectors(ids).to(dtype) if ids else None
        k = 0
        for e in seq.elements:
            if _is_id(e):
                rows.append(table[k])
                k += 1
            else:
                rows.append(torch.as_tensor(np.asarray(e), dtype=torch.float32).to(dtype))
        return torch.stack(rows)

    def encode_text(self, seq: "TokenEmbeddingSequence | Sequence[Element]") -> np.ndarray:
        seq = _as_sequence(seq)
        with torch.no_grad():
            out = self.text_forward(self.embed_sequence(seq)[None])[0]
        return _check_unit(out.numpy().astype(np.float32))

    def encode_sentence(self, text: str) -> np.ndarray:
        return self.encode_text(self.tokenize(text))

    def encode_with_vectors(self, template: str, vectors: torch.Tensor, suffix: str = "") -> torch.Tensor:
        """Encode ``template`` once per row of ``vectors``, each row filling the placeholder.

        ``suffix`` is tokenized and inserted right after the placeholder.
        Differentiable w.r.t. ``vectors``; returns ``(B, output_dim)``.
        """
        before, after = split_template(template)
        pre = self.tokenize(before) if before.strip() else []
        post = (self.tokenize(suffix) if suffix.strip() else []) + (self.tokenize(after) if after.strip() else [])
        n = len(pre) + 1 + len(post)
        if n > self.max_context:
            raise ContextLengthError(f"template needs {n} positions, context length is {self.max_context}")
        b = vectors.shape[0]
        parts = []
        if pre:
            parts.append(self.word_vectors(pre).to(vectors.dtype)[None].expand(b, -1, -1))
        parts.append(vectors[:, None, :])
        if post:
            parts.append(self.word_vectors(post).to(vectors.dtype)[None].expand(b, -1, -1))
        return self.text_forward(torch.cat(parts, dim=1))


# -- toy encoder -------------------------------------------------------------

_EXTRA_WORDS = (
    "the", "in", "on", "at", "near", "with", "and", "of", "a", "an", "is", "are",
    "this", "that", "my", "next", "to", "by", "behind", "front", "under", "over",
)
_TOKEN_RE = re.compile(r"<[^<>\s]+>|[a-z0-9']+")


def toy_base_words() -> list[str]:
    """Fixed words every toy vocabulary starts with: template words, function
    words, then the words of the bundled type sample."""
    words: dict[str, None] = {}
    for t in DEFAULT_TEMPLATES:
        for w in _TOKEN_RE.findall(t.replace(PLACEHOLDER, " ").lower()):
            words.setdefault(w)
    for w in _EXTRA_WORDS:
        words.setdefault(w)
    for t in sample_types():
        for w in _TOKEN_RE.findall(t.lower()):
            words.setdefault(w)
    return list(words)


@dataclass(frozen=True)
class ToyEncoderSpec:
    seed: int = 0
    vocab_size: int = 1000
    word_dim: int = 32
    output_dim: int = 32
    noise_scale: float = 0.0
    # number of ``<ctx-i>`` tokens; the rest of the vocabulary after the base words is ``<type-i>``
    n_contexts: int = 32
    # length of the fixed offset that shifts image embeddings away from text ones; 0 = no gap
    modality_gap: float = 0.0
    # extra factor on the rows of the base (template and function) words
    function_word_scale: float = 1.0
    # Gaussian image noise confined to output directions no text embedding reaches
    detail_scale: float = 0.0
    # the pooled vector is squashed coordinate-wise, s * tanh(x / s); 0 = off
    pooled_saturation: float = 0.0

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "ToyEncoderSpec":
        return cls(**d)


@dataclass
class ToyImage:
    """A planted-concept feature record: the image's canonical caption and a noise key."""

    caption: TokenEmbeddingSequence
    noise_key: int

    def to_json(self) -> dict[str, Any]:
        return {"caption": self.caption.to_json(), "noise_key": int(self.noise_key)}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "ToyImage":
        return cls(TokenEmbeddingSequence.from_json(d["caption"]), int(d["noise_key"]))


class ToyEncoder(FrozenEncoderPair):
    """Mean-of-word-vectors text encoder with a fixed orthogonal projection.

    Text: ``normalize(P @ mean(word vectors))``. Image: the text embedding of
    the record's canonical caption, shifted by the fixed modality-gap offset,
    plus Gaussian noise of scale ``noise_scale``, then normalized.
    """

    def __init__(self, spec: ToyEncoderSpec, max_context: int = MAX_CONTEXT):
        self.spec = spec
        self.word_dim = spec.word_dim
        self.output_dim = spec.output_dim
        self.max_context = max_context
        base = toy_base_words()
        n_types = spec.vocab_size - len(base) - spec.n_contexts
        if n_types < 0:
            raise ConfigError(
                f"vocab_size={spec.vocab_size} is smaller than the {len(base) + spec.n_contexts} fixed toy tokens"
            )
        self.words = base + [f"<ctx-{i}>" for i in range(spec.n_contexts)] + [f"<type-{i}>" for i in range(n_types)]
        self.word_to_id = {w: i for i, w in enumerate(self.words)}
        self.n_base = len(base)

        rng = np.random.default_rng(spec.seed)
        table = rng.standard_normal((spec.vocab_size, spec.word_dim)) / np.sqrt(spec.word_dim)
        table[: self.n_base] *= spec.function_word_scale
        g = rng.standard_normal((max(spec.word_dim, spec.output_dim),) * 2)
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))
        # orthonormal columns when output_dim >= word_dim, orthonormal rows otherwise
        proj = q[: spec.output_dim, : spec.word_dim]
        offset = rng.standard_normal(spec.output_dim)
        if spec.output_dim > spec.word_dim:
            # a direction no text embedding can reach
            offset = q[: spec.output_dim, spec.word_dim]
        gap = spec.modality_gap * offset / np.linalg.norm(offset)
        # orthonormal basis of the image-only directions left after the gap
        detail = q[: spec.output_dim, spec.word_dim + 1 : spec.output_dim]
        if spec.detail_scale > 0 and detail.shape[1] == 0:
            raise PreconditionError("detail_scale needs output_dim >= word_dim + 2")

        self._table = torch.from_numpy(table.astype(np.float32))
        self._proj = torch.from_numpy(proj.astype(np.float32))
        self._gap = torch.from_numpy(gap.astype(np.float32))
        self._detail = torch.from_numpy(np.ascontiguousarray(detail, dtype=np.float32))
        for t in (self._table, self._proj, self._gap, self._detail):
            t.requires_grad_(False)

    @property
    def vocab_size(self) -> int:
        return self.spec.vocab_size

    @property
    def word_table(self) -> torch.Tensor:
        return self._table

    @property
    def gap_vector(self) -> torch.Tensor:
        return self._gap

    def token(self, word: str) -> int:
        try:
            return self.word_to_id[word]
        except KeyError:
            raise VocabularyError(f"unknown word {word!r}") from None

    def tokenize(self, text: str) -> list[int]:
        return [self.token(w) for w in _TOKEN_RE.findall(text.lower())]

    def word_vectors(self, ids: Sequence[int]) -> torch.Tensor:
        return self._table[torch.as_tensor(list(ids), dtype=torch.long)]

    def text_forward(self, embeds: torch.Tensor) -> torch.Tensor:
        pooled = embeds.mean(dim=-2)
        if self.spec.pooled_saturation > 0:
            s = self.spec.pooled_saturation
            pooled = s * torch.tanh(pooled / s)
        return l2_normalize(pooled @ self._proj.to(embeds.dtype).T)

    def image_noise(self, noise_key: int) -> np.ndarray:
        rng = np.random.default_rng([self.spec.seed, 7919, int(noise_key)])
        return rng.standard_normal(self.output_dim) / np.sqrt(self.output_dim)

    def detail_noise(self, noise_key: int) -> np.ndarray:
        n = self._detail.shape[1]
        if n == 0:
            return np.zeros(self.output_dim)
        rng = np.random.default_rng([self.spec.seed, 7927, int(noise_key)])
        return self._detail.numpy().astype(np.float64) @ (rng.standard_normal(n) / np.sqrt(n))

    def encode_image(self, record: ToyImage | dict) -> np.ndarray:
        if isinstance(record, dict):
            record = ToyImage.from_json(record)
        if not isinstance(record, ToyImage):
            raise InputError(f"toy encoder expects a ToyImage record, got {type(record).__name__}")
        with torch.no_grad():
            t = self.text_forward(self.embed_sequence(record.caption)[None])[0]
            v = t + self._gap
            if self.spec.noise_scale > 0:
                v = v + self.spec.noise_scale * torch.from_numpy(self.image_noise(record.noise_key).astype(np.float32))
            if self.spec.detail_scale > 0:
                v = v + self.spec.detail_scale * torch.from_numpy(self.detail_noise(record.noise_key).astype(np.float32))
            v = l2_normalize(v)
        return _check_unit(v.numpy().astype(np.float32))

    def digest(self) -> str:
        h = hashlib.sha256(json.dumps(self.spec.to_json(), sort_keys=True).encode())
        for t in (self._table, self._proj, self._gap, self._detail):
            h.update(t.numpy().tobytes())
        return h.hexdigest()


# -- external service client --------------------------------------------------


class ExternalEncoderClient(FrozenEncoderPair):
    """Client for a local encoder inference service.

    Wire protocol (all vectors little-endian float32, response body is raw bytes):

    * ``GET  /info`` -> JSON ``{output_dim, word_dim, max_context, vocab_size, digest}``
    * ``POST /tokenize`` JSON ``{"text": str}`` -> JSON ``{"ids": [int]}``
    * ``POST /encode_text`` JSON ``{"elements": [int | [float]]}`` -> ``output_dim`` floats
    * ``POST /encode_image`` image file bytes -> ``output_dim`` floats
    * ``POST /word_vectors`` JSON ``{"ids": [int]}`` -> ``len(ids) * word_dim`` floats

    Outputs are renormalized after the float32 cast.
    """

    def __init__(self, base_url: str, timeout: float = 30.0, retries: int = 3, backoff: float = 0.5):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        info = json.loads(self._request("GET", "/info"))
        self.output_dim = int(info["output_dim"])
        self.word_dim = int(info["word_dim"])
        self.max_context = int(info.get("max_context", MAX_CONTEXT))
        self._vocab_size = int(info["vocab_size"])
        self._digest = str(info.get("digest", ""))

    def _request(self, method: str, path: str, body: bytes | None = None, content_type: str = "application/json") -> bytes:
        url = self.base_url + path
        last: Exception | None = None
        for attempt in range(1, self.retries + 1):
            req = urllib.request.Request(url, data=body, method=method)
            if body is not None:
                req.add_header("Content-Type", content_type)
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    return resp.read()
            except urllib.error.HTTPError as e:
                if 400 <= e.code < 500:
                    raise InputError(f"{url}: {e.code} {e.read().decode('utf-8', 'replace')}") from None
                last = e
            except (urllib.error.URLError, OSError) as e:
                last = e
            if attempt < self.retries:
                time.sleep(self.backoff * 2 ** (attempt - 1))
        raise TransportError(
            f"encoder service unreachable at {url}: {last}",
            attempts=self.retries,
            retry_after=self.backoff * 2**self.retries,
            url=url,
        )

    def _post_json(self, path: str, payload: Any) -> bytes:
        return self._request("POST", path, json.dumps(payload).encode("utf-8"))

    def _vector(self, raw: bytes, n: int) -> np.ndarray:
        v = np.frombuffer(raw, dtype="<f4")
        if v.size != n:
            raise InputError(f"service returned {v.size} floats, expected {n}")
        return v.astype(np.float32)

    @property
    def vocab_size(self) -> int:
        return self._vocab_size

    def tokenize(self, text: str) -> list[int]:
        return [int(i) for i in json.loads(self._post_json("/tokenize", {"text": text}))["ids"]]

    def word_vectors(self, ids: Sequence[int]) -> torch.Tensor:
        ids = [int(i) for i in ids]
        v = self._vector(self._post_json("/word_vectors", {"ids": ids}), len(ids) * self.word_dim)
        return torch.from_numpy(v.reshape(len(ids), self.word_dim).copy())

    def text_forward(self, embeds: torch.Tensor) -> torch.Tensor:
        raise NotDifferentiableError("the external encoder client does not expose gradients; use an in-process encoder")

    def encode_text(self, seq: "TokenEmbeddingSequence | Sequence[Element]") -> np.ndarray:
        seq = _as_sequence(seq)
        self.validate(seq)
        v = self._vector(self._post_json("/encode_text", {"elements": seq.to_json()}), self.output_dim)
        return _check_unit((v / np.linalg.norm(v)).astype(np.float32))

    def encode_image(self, record: Any) -> np.ndarray:
        if isinstance(record, (str, os.PathLike)):
            try:
                with open(record, "rb") as fh:
                    data = fh.read()
            except OSError as e:
                raise InputError(f"cannot read image {record}: {e}") from None
        elif isinstance(record, (bytes, bytearray)):
            data = bytes(record)
        else:
            raise InputError(f"expected an image path or bytes, got {type(record).__name__}")
        v = self._vector(self._request("POST", "/encode_image", data, "application/octet-stream"), self.output_dim)
        return _check_unit((v / np.linalg.norm(v)).astype(np.float32))

    def digest(self) -> str:
        return self._digest


# -- pretrained CLIP adapter ---------------------------------------------------


class ClipEncoder(FrozenEncoderPair):
    """In-process adapter over a pretrained CLIP checkpoint (``transformers``).

    ``tokenize`` returns ids without the start/end markers; they are added by
    :meth:`embed_sequence`, and pooling reads the end-marker position.
    """

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32", device: str = "cpu"):
        try:
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as e:  # pragma: no cover - optional dependency
            raise ConfigError("ClipEncoder needs the 'transformers' package") from e
        self.model = CLIPModel.from_pretrained(model_name).to(device).eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.processor = CLIPProcessor.from_pretrained(model_name)
        self.device = device
        text_cfg = self.model.config.text_config
        self.word_dim = int(text_cfg.hidden_size)
        self.output_dim = int(self.model.config.projection_dim)
        # two positions are taken by the start/end markers
        self.max_context = int(text_cfg.max_position_embeddings) - 2
        tok = self.processor.tokenizer
        self._bos, self._eos = tok.bos_token_id, tok.eos_token_id

    @property
    def vocab_size(self) -> int:
        return int(self.model.config.text_config.vocab_size)

    def tokenize(self, text: str) -> list[int]:
        return list(self.processor.tokenizer(text, add_special_tokens=False)["input_ids"])

    def word_vectors(self, ids: Sequence[int]) -> torch.Tensor:
        emb = self.model.text_model.embeddings.token_embedding.weight
        return emb[torch.as_tensor(list(ids), dtype=torch.long, device=emb.device)].detach().cpu()

    def _wrap(self, embeds: torch.Tensor) -> torch.Tensor:
        b = embeds.shape[0]
        ends = self.word_vectors([self._bos, self._eos]).to(embeds.dtype)
        return torch.cat([ends[0].expand(b, 1, -1), embeds, ends[1].expand(b, 1, -1)], dim=1)

    def text_forward(self, embeds: torch.Tensor) -> torch.Tensor:  # pragma: no cover - needs weights
        from transformers.masking_utils import create_causal_mask

        tm = self.model.text_model
        x = self._wrap(embeds).to(self.device)
        pos = torch.arange(x.shape[1], device=x.device)[None]
        hidden = x + tm.embeddings.position_embedding(pos)
        mask = create_causal_mask(config=tm.config, inputs_embeds=hidden, attention_mask=None, past_key_values=None)
        out = tm.encoder(inputs_embeds=hidden, attention_mask=mask, is_causal=True).last_hidden_state
        pooled = tm.final_layer_norm(out)[:, -1]
        return l2_normalize(self.model.text_projection(pooled)).cpu()

    def encode_image(self, record: Any) -> np.ndarray:  # pragma: no cover - needs weights
        from PIL import Image

        try:
            img = Image.open(record).convert("RGB")
        except OSError as e:
            raise InputError(f"cannot read image {record}: {e}") from None
        pixels = self.processor(images=img, return_tensors="pt")["pixel_values"].to(self.device)
        with torch.no_grad():
            v = self.model.get_image_features(pixel_values=pixels)
            v = v.pooler_output if hasattr(v, "pooler_output") else v
            v = l2_normalize(v.float())[0]
        return _check_unit(v.cpu().numpy().astype(np.float32))

    def digest(self) -> str:  # pragma: no cover - needs weights
        h = hashlib.sha256()
        for name, p in sorted(self.model.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()
