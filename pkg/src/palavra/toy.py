"""Synthetic world for desk-scale runs.

Everything is expressed through the toy encoder's vocabulary:

* ``<type-i>`` tokens are concept types. The first ``n_train_types`` are the
  image-trained concepts; every type is in the expanded vocabulary used for
  caption augmentation; benchmark concepts use types from outside the
  image-trained set.
* ``<ctx-j>`` tokens describe the scene around an object.
* A personalized concept ``c`` of type ``t`` has a planted word embedding
  ``g_c = word(t) + instance_scale * u_c``, where ``u_c`` is a private random direction.
  Gallery images are noisy encodings of ``"a photo of a <g_c> in the <ctx> near the <ctx'>"``;
  the few-shot training images are object-centric (``"a photo of a <g_c>"``).
* Image embeddings also carry a fixed modality gap and detail noise, both in
  output directions the text side cannot reach, so averaging shots is not
  the same as reading off a text embedding.

Rich queries mention the first context only, detailed queries both.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .cache import EmbeddingCache
from .encoder import TokenEmbeddingSequence, ToyEncoder, ToyEncoderSpec, ToyImage, toy_base_words
from .evalkit.benchmark import ConceptInfo, Query, RetrievalBenchmark
from .training import InverterTrainConfig, TrainingDataset


@dataclass(frozen=True)
class ToyWorldConfig:
    seed: int = 0
    word_dim: int = 32
    output_dim: int = 48
    noise_scale: float = 0.3
    modality_gap: float = 1.0
    function_word_scale: float = 0.3
    detail_scale: float = 2.0
    pooled_saturation: float = 0.05
    n_contexts: int = 24
    n_vocab_types: int = 400
    n_train_types: int = 60
    images_per_type: int = 16
    n_bench_types: int = 5
    n_concepts: int = 50
    gallery_per_concept: int = 2
    train_shots: int = 10
    instance_scale: float = 1.0
    gallery_contexts: int = 8
    # training shots of personalized concepts show the object alone, without scene words
    object_centric_shots: bool = True

    @property
    def vocab_size(self) -> int:
        return len(toy_base_words()) + self.n_contexts + self.n_vocab_types

    def encoder_spec(self) -> ToyEncoderSpec:
        return ToyEncoderSpec(
            seed=self.seed,
            vocab_size=self.vocab_size,
            word_dim=self.word_dim,
            output_dim=self.output_dim,
            noise_scale=self.noise_scale,
            n_contexts=self.n_contexts,
            modality_gap=self.modality_gap,
            function_word_scale=self.function_word_scale,
            detail_scale=self.detail_scale,
            pooled_saturation=self.pooled_saturation,
        )


def toy_train_config(**overrides: Any) -> InverterTrainConfig:
    """Inverter settings sized for the toy world on one CPU core."""
    base = dict(epochs=60, batch_size=64, concepts_per_batch=16, lr=3e-3, hidden_dim=128, lambda_gt=8.0)
    return InverterTrainConfig(**{**base, **overrides})


@dataclass
class ToyWorld:
    config: ToyWorldConfig
    encoder: ToyEncoder
    data: TrainingDataset
    bench: RetrievalBenchmark
    planted: dict[str, np.ndarray] = field(repr=False)
    records: dict[str, ToyImage] = field(repr=False)


def _caption(enc: ToyEncoder, head: list[Any], ctx: tuple[int, int]) -> TokenEmbeddingSequence:
    pre = enc.tokenize("a photo of a")
    post = enc.tokenize(f"in the <ctx-{ctx[0]}> near the <ctx-{ctx[1]}>")
    return TokenEmbeddingSequence(pre + head + post)


def build_toy_world(cfg: ToyWorldConfig = ToyWorldConfig(), out_dir: str | Path | None = None) -> ToyWorld:
    enc = ToyEncoder(cfg.encoder_spec())
    rng = np.random.default_rng([cfg.seed, 1])
    root = Path(out_dir) if out_dir is not None else Path(".")
    types = [f"<type-{i}>" for i in range(cfg.n_vocab_types)]
    records: dict[str, ToyImage] = {}
    noise_key = 0

    def record(item_id: str, caption: TokenEmbeddingSequence) -> str:
        nonlocal noise_key
        records[item_id] = ToyImage(caption, noise_key)
        noise_key += 1
        return item_id

    def contexts(pool: int) -> tuple[int, int]:
        a, b = rng.choice(pool, size=2, replace=False)
        return int(a), int(b)

    # image-trained concepts with paired captions
    train_cache = EmbeddingCache(root / "train.pvlc", cfg.output_dim)
    image_split: dict[str, list[str]] = {}
    caption_split: dict[str, list[tuple[str, str]]] = {}
    type_strings: dict[str, str] = {}
    pairs: list[tuple[str, str]] = []
    for i in range(cfg.n_train_types):
        t = types[i]
        cid = f"concept-{i:04d}"
        type_strings[cid] = t
        image_split[cid], caption_split[cid] = [], []
        for j in range(cfg.images_per_type):
            ctx = contexts(cfg.n_contexts)
            text = f"a photo of a {t} in the <ctx-{ctx[0]}> near the <ctx-{ctx[1]}>"
            iid = record(f"{cid}/img{j:03d}", TokenEmbeddingSequence(enc.tokenize(text)))
            train_cache.put(iid, enc.encode_image(records[iid]))
            image_split[cid].append(iid)
            caption_split[cid].append((text, t))
            pairs.append((iid, text))
    data = TrainingDataset(image_split, caption_split, type_strings, train_cache, list(types), pairs)

    # personalized concepts
    bench_types = rng.choice(np.arange(cfg.n_train_types, cfg.n_vocab_types), size=cfg.n_bench_types, replace=False)
    bench_cache = EmbeddingCache(root / "bench.pvlc", cfg.output_dim)
    planted: dict[str, np.ndarray] = {}
    concepts: dict[str, ConceptInfo] = {}
    gallery: list[str] = []
    queries: list[Query] = []
    table = enc.word_table.numpy().astype(np.float64)
    for c in range(cfg.n_concepts):
        sym = f"[C{c:02d}]"
        t = types[int(bench_types[c % cfg.n_bench_types])]
        u = rng.standard_normal(cfg.word_dim) / np.sqrt(cfg.word_dim)
        g = (table[enc.token(t)] + cfg.instance_scale * u).astype(np.float32)
        planted[sym] = g
        train_ids = []
        for j in range(cfg.train_shots):
            ctx = contexts(cfg.n_contexts)
            if cfg.object_centric_shots:
                cap = TokenEmbeddingSequence(enc.tokenize("a photo of a") + [g])
            else:
                cap = _caption(enc, [g], ctx)
            iid = record(f"c{c:02d}/train{j:02d}", cap)
            bench_cache.put(iid, enc.encode_image(records[iid]))
            train_ids.append(iid)
        concepts[sym] = ConceptInfo(t, train_ids)
        used = rng.choice(cfg.gallery_contexts, size=cfg.gallery_per_concept, replace=False)
        for j in range(cfg.gallery_per_concept):
            other = int(rng.choice([x for x in range(cfg.gallery_contexts) if x != used[j]]))
            ctx = (int(used[j]), other)
            iid = record(f"c{c:02d}/gallery{j}", _caption(enc, [g], ctx))
            bench_cache.put(iid, enc.encode_image(records[iid]))
            gallery.append(iid)
            queries.append(
                Query(
                    id=f"q{c:02d}-{j}",
                    symbol=sym,
                    caption=f"a photo of a {sym} in the <ctx-{ctx[0]}>",
                    target=iid,
                    detailed_caption=f"a photo of a {sym} in the <ctx-{ctx[0]}> near the <ctx-{ctx[1]}>",
                )
            )
    bench = RetrievalBenchmark(sorted(gallery), queries, concepts, bench_cache, "test")

    if out_dir is not None:
        write_toy_world(root, cfg, enc, data, bench, planted, records)
    return ToyWorld(cfg, enc, data, bench, planted, records)


def write_toy_world(
    root: Path,
    cfg: ToyWorldConfig,
    enc: ToyEncoder,
    data: TrainingDataset,
    bench: RetrievalBenchmark,
    planted: dict[str, np.ndarray],
    records: dict[str, ToyImage],
) -> None:
    root.mkdir(parents=True, exist_ok=True)

    def dump(name: str, doc: Any) -> None:
        (root / name).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")

    data.cache.save()
    bench.cache.save()
    (root / "types.txt").write_text("".join(t + "\n" for t in data.vocab_types), encoding="utf-8")
    dump("world.json", asdict(cfg))
    dump("encoder.json", enc.spec.to_json())
    dump(
        "train_manifest.json",
        {
            "cache": "train.pvlc",
            "vocab": "types.txt",
            "concepts": [
                {
                    "id": c,
                    "type": data.type_strings[c],
                    "image_ids": data.image_split[c],
                    "captions": [s for s, _ in data.caption_split[c]],
                }
                for c in sorted(data.image_split)
            ],
        },
    )
    dump("bench_manifest.json", bench.to_json("bench.pvlc"))
    dump("records.json", [{"id": i, "record": r.to_json()} for i, r in records.items()])
    dump("planted.json", {s: g.tolist() for s, g in planted.items()})


def load_toy_encoder(path: str | Path) -> ToyEncoder:
    return ToyEncoder(ToyEncoderSpec.from_json(json.loads(Path(path).read_text(encoding="utf-8"))))
