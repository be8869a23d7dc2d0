"""Training the set inverter and personalizing concept embeddings.

Inverter training alternates image batches and augmented-caption batches.
Image batch: draw C concepts and K cached image embeddings for each, invert
every set, re-encode a template carrying the predicted word embedding and
apply the total inverter loss. Caption batch: the same, with caption
embeddings mapped through ``A`` first; ``A`` additionally gets the
caption-to-image alignment loss.

Personalization keeps the inverter and encoders fixed and tunes one word
embedding per concept, starting from the inverter's prediction.
"""
from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import TYPE_CHECKING, Any, Callable, Iterable, Sequence

import numpy as np
import torch

from .cache import EmbeddingCache
from .encoder import FrozenEncoderPair, l2_normalize
from .errors import AugmentationMiss, ConfigError, DataError, PreconditionError
from .inverter import InverterModel, config_digest, save_checkpoint
from .objectives import alignment_loss, personalization_loss, total_inverter_loss
from .textaug import (
    PromptBank,
    TypeVocabulary,
    augment_caption,
    build_replacements,
    read_type_file,
)
from .vocab import PersonalizedToken

if TYPE_CHECKING:
    from .evalkit.benchmark import RetrievalBenchmark

logger = logging.getLogger(__name__)

IMAGE, TEXT = "IMAGE", "TEXT"


@dataclass(frozen=True)
class InverterTrainConfig:
    epochs: int = 300
    batch_size: int = 256
    concepts_per_batch: int = 32
    # 0 means batch_size // concepts_per_batch
    examples_per_concept: int = 0
    lr: float = 1e-4
    lambda_gt: float = 512.0
    temp: float = 0.25
    seed: int = 0
    hidden_dim: int = 4096
    dropout_rate: float = 0.25
    text_augment: bool = True
    augment_top_k: int = 1
    use_cycle: bool = True
    train_alignment: bool = True
    # 0 disables periodic checkpoints
    checkpoint_every: int = 0
    match_word_scale: bool = True

    def __post_init__(self) -> None:
        for name in ("batch_size", "concepts_per_batch", "hidden_dim", "augment_top_k"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0 or self.examples_per_concept < 0 or self.checkpoint_every < 0:
            raise ConfigError("epochs, examples_per_concept and checkpoint_every must be non-negative")
        if self.lr <= 0 or self.temp <= 0 or self.lambda_gt < 0:
            raise ConfigError("lr and temp must be positive, lambda_gt non-negative")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")

    @property
    def k(self) -> int:
        return self.examples_per_concept or max(1, self.batch_size // self.concepts_per_batch)


@dataclass(frozen=True)
class PersonalizeConfig:
    tune_epochs: int = 30
    tune_lr: float = 0.01
    shots: int = 5
    temp: float = 0.25
    seed: int = 0
    # "inverter" starts from the set inverter's prediction, "random" from a word-table-like draw
    init: str = "inverter"

    def __post_init__(self) -> None:
        if self.tune_epochs < 0 or self.shots <= 0 or self.tune_lr <= 0 or self.temp <= 0:
            raise ConfigError("tune_epochs must be >= 0; shots, tune_lr and temp positive")
        if self.init not in ("inverter", "random"):
            raise ConfigError(f"init must be 'inverter' or 'random', not {self.init!r}")


# -- config file ---------------------------------------------------------------


def config_keys() -> dict[str, Any]:
    """Every config-file key with its default."""
    out: dict[str, Any] = {}
    for cls in (InverterTrainConfig, PersonalizeConfig):
        for f in fields(cls):
            out[f.name] = f.default
    out["templates"] = list(PromptBank().templates)
    return out


def load_config(path: str | Path | None = None, **overrides: Any) -> tuple[InverterTrainConfig, PersonalizeConfig, PromptBank]:
    """Read a flat JSON key/value config; ``temp`` and ``seed`` apply to both stages."""
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    known = config_keys()
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    tnames = {f.name for f in fields(InverterTrainConfig)}
    pnames = {f.name for f in fields(PersonalizeConfig)}
    try:
        tcfg = InverterTrainConfig(**{k: v for k, v in raw.items() if k in tnames})
        pcfg = PersonalizeConfig(**{k: v for k, v in raw.items() if k in pnames})
        bank = PromptBank(tuple(raw.get("templates", known["templates"])))
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    return tcfg, pcfg, bank


def dump_config(tcfg: InverterTrainConfig, pcfg: PersonalizeConfig, bank: PromptBank) -> str:
    doc = {**asdict(tcfg), **asdict(pcfg), "templates": list(bank.templates)}
    return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"


# -- data --------------------------------------------------------------------


@dataclass
class TrainingDataset:
    """Non-personalized training data.

    ``caption_split[c]`` holds ``(caption, src_type)`` pairs; when a concept
    has as many captions as images, ``captions[i]`` is taken to describe
    ``image_ids[i]`` and the pair feeds the alignment loss.
    """

    image_split: dict[str, list[str]]
    caption_split: dict[str, list[tuple[str, str]]]
    type_strings: dict[str, str]
    cache: EmbeddingCache
    vocab_types: list[str] = field(default_factory=list)
    pairs: list[tuple[str, str]] = field(default_factory=list)

    def validate(self) -> None:
        for c, ids in self.image_split.items():
            for i in ids:
                if i not in self.cache:
                    raise DataError(f"concept {c}: image {i!r} missing from cache {self.cache.path}")
            if c not in self.type_strings:
                raise DataError(f"concept {c} has no type string")

    @classmethod
    def from_manifest(cls, path: str | Path) -> "TrainingDataset":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
            base = path.parent
            cache = EmbeddingCache.load(base / doc["cache"])
            vocab = read_type_file(base / doc["vocab"]) if doc.get("vocab") else []
            image_split, caption_split, types, pairs = {}, {}, {}, []
            for c in doc["concepts"]:
                cid = str(c["id"])
                types[cid] = c["type"]
                image_split[cid] = list(c.get("image_ids", []))
                caps = list(c.get("captions", []))
                caption_split[cid] = [(s, c["type"]) for s in caps]
                if caps and len(caps) == len(image_split[cid]):
                    pairs += list(zip(image_split[cid], caps))
        except (OSError, KeyError, TypeError, json.JSONDecodeError) as e:
            raise DataError(f"bad training manifest {path}: {e}") from None
        data = cls(image_split, caption_split, types, cache, vocab, pairs)
        data.validate()
        return data


def first_word_vector(enc: FrozenEncoderPair, type_string: str) -> torch.Tensor:
    """Word-table embedding of the first word of a concept type."""
    ids = enc.tokenize(type_string)
    if not ids:
        raise DataError(f"type string {type_string!r} has no tokens")
    return enc.word_vectors(ids[:1])[0]


@dataclass
class TrainingHistory:
    batch_kinds: list[str] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)


@dataclass
class _SetPool:
    """Per-concept stacks of embeddings to draw K-sets from."""

    names: list[str]
    vectors: list[torch.Tensor]
    targets: torch.Tensor

    def __len__(self) -> int:
        return len(self.names)

    def draw(self, rng: np.random.Generator, c: int, k: int) -> tuple[torch.Tensor, torch.Tensor]:
        chosen = rng.choice(len(self.names), size=min(c, len(self.names)), replace=False)
        sets = []
        for j in chosen:
            pool = self.vectors[j]
            idx = rng.choice(pool.shape[0], size=k, replace=False)
            sets.append(pool[torch.as_tensor(np.sort(idx))])
        return torch.stack(sets), self.targets[torch.as_tensor(chosen)]


def _image_pool(data: TrainingDataset, enc: FrozenEncoderPair, k: int) -> _SetPool:
    names, vecs, targets = [], [], []
    for c in sorted(data.image_split):
        ids = data.image_split[c]
        if len(ids) < k:
            logger.warning("skipping concept %s: %d images < K=%d", c, len(ids), k)
            continue
        names.append(c)
        vecs.append(torch.from_numpy(data.cache.matrix(ids)))
        targets.append(first_word_vector(enc, data.type_strings[c]))
    if not names:
        raise DataError(f"every image concept has fewer than K={k} examples")
    return _SetPool(names, vecs, torch.stack(targets).float())


def augmented_captions(
    data: TrainingDataset, enc: FrozenEncoderPair, augment: bool, top_k: int = 1
) -> dict[str, list[str]]:
    """Captions grouped by the concept type they now describe."""
    groups: dict[str, list[str]] = {}
    if not augment:
        for c in sorted(data.caption_split):
            for caption, _ in data.caption_split[c]:
                groups.setdefault(data.type_strings[c], []).append(caption)
        return groups
    if not data.vocab_types:
        raise DataError("text augmentation needs a type vocabulary")
    vocab = TypeVocabulary.build(data.vocab_types, enc)
    srcs = [src for c in sorted(data.caption_split) for _, src in data.caption_split[c]]
    replacements = build_replacements(srcs, vocab, enc, top_k)
    misses = 0
    for c in sorted(data.caption_split):
        for caption, src in data.caption_split[c]:
            for rep in replacements[src]:
                try:
                    groups.setdefault(rep, []).append(augment_caption(caption, src, rep))
                except AugmentationMiss:
                    misses += 1
    if misses:
        logger.info("skipped %d captions without a whole-word type match", misses)
    return groups


def _text_pool(data: TrainingDataset, enc: FrozenEncoderPair, cfg: InverterTrainConfig) -> _SetPool | None:
    groups = augmented_captions(data, enc, cfg.text_augment, cfg.augment_top_k)
    names, vecs, targets = [], [], []
    for t in sorted(groups):
        caps = groups[t]
        if len(caps) < cfg.k:
            continue
        names.append(t)
        vecs.append(torch.from_numpy(np.stack([enc.encode_sentence(s) for s in caps])))
        targets.append(first_word_vector(enc, t))
    if not names:
        logger.warning("no caption concept has K=%d captions; training on images only", cfg.k)
        return None
    return _SetPool(names, vecs, torch.stack(targets).float())


def _alignment_pairs(data: TrainingDataset, enc: FrozenEncoderPair) -> tuple[torch.Tensor, torch.Tensor] | None:
    if not data.pairs:
        return None
    v = torch.from_numpy(data.cache.matrix([i for i, _ in data.pairs]))
    u = torch.from_numpy(np.stack([enc.encode_sentence(s) for _, s in data.pairs]))
    return v, u


def init_model(enc: FrozenEncoderPair, cfg: InverterTrainConfig) -> InverterModel:
    torch.manual_seed(cfg.seed)
    model = InverterModel(enc.output_dim, enc.word_dim, cfg.hidden_dim, cfg.dropout_rate)
    if cfg.match_word_scale:
        _match_word_scale(model, enc, cfg.seed)
    return model


def _match_word_scale(model: InverterModel, enc: FrozenEncoderPair, seed: int, n_probe: int = 64) -> None:
    """Rescale the last layer so initial outputs have the median word-vector norm."""
    rng = np.random.default_rng([seed, 11])
    ids = rng.choice(enc.vocab_size, size=min(enc.vocab_size, 512), replace=False)
    target = float(enc.word_vectors(sorted(ids.tolist())).double().norm(dim=1).median())
    probe = torch.from_numpy(rng.standard_normal((n_probe, 5, enc.output_dim)).astype(np.float32))
    probe = probe / probe.norm(dim=-1, keepdim=True)
    model.eval()
    with torch.no_grad():
        current = float(model(probe).double().norm(dim=1).median())
        last = model.rho[-1]
        last.weight.mul_(target / current)
        last.bias.mul_(target / current)
    model.train()


def checkpoint_meta(cfg: InverterTrainConfig, enc: FrozenEncoderPair, **extra: Any) -> dict[str, Any]:
    return {
        "seed": cfg.seed,
        "config_digest": config_digest(asdict(cfg)),
        "config": asdict(cfg),
        "encoder_digest": enc.digest(),
        **extra,
    }


def train_inverter(
    data: TrainingDataset,
    enc: FrozenEncoderPair,
    cfg: InverterTrainConfig,
    bank: PromptBank | None = None,
    history: TrainingHistory | None = None,
    callback: Callable[[int, InverterModel], None] | None = None,
    checkpoint_dir: str | Path | None = None,
) -> InverterModel:
    bank = PromptBank() if bank is None else bank
    history = history if history is not None else TrainingHistory()
    model = init_model(enc, cfg)
    if cfg.epochs == 0:
        return model.eval()

    rng = np.random.default_rng(cfg.seed)
    k = cfg.k
    images = _image_pool(data, enc, k)
    texts = _text_pool(data, enc, cfg)
    pairs = _alignment_pairs(data, enc) if cfg.train_alignment else None

    if not cfg.train_alignment:
        model.A.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    # the alignment loss has its own optimizer so its steps are not swamped by the gradients of the main loss
    align_opt = torch.optim.Adam([model.A], lr=cfg.lr) if pairs is not None else None
    steps = max(1, len(images) // cfg.concepts_per_batch)

    def step(sets: torch.Tensor, targets: torch.Tensor, template: str, text: bool) -> float:
        x = sets @ model.A.T if text else sets
        w0 = model(x)
        zbar = l2_normalize(x.mean(dim=1))
        zhat = enc.encode_with_vectors(template, w0) if cfg.use_cycle else zbar
        loss = total_inverter_loss(zbar, zhat, w0, targets, cfg.lambda_gt, cfg.temp, cfg.use_cycle)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if text and align_opt is not None:
            idx = torch.as_tensor(np.sort(rng.choice(len(pairs[0]), size=min(cfg.batch_size, len(pairs[0])), replace=False)))
            align = alignment_loss(pairs[0][idx], pairs[1][idx], model.A)
            align_opt.zero_grad()
            align.backward()
            align_opt.step()
            loss = loss + align.detach()
        return float(loss.detach())

    model.train()
    for epoch in range(cfg.epochs):
        template = bank.sample(rng)
        epoch_losses = []
        for _ in range(steps):
            sets, targets = images.draw(rng, cfg.concepts_per_batch, k)
            epoch_losses.append(step(sets, targets, template, text=False))
            history.batch_kinds.append(IMAGE)
            if texts is not None:
                sets, targets = texts.draw(rng, cfg.concepts_per_batch, k)
                epoch_losses.append(step(sets, targets, template, text=True))
                history.batch_kinds.append(TEXT)
        history.losses += epoch_losses
        history.epoch_losses.append(float(np.mean(epoch_losses)))
        if callback is not None:
            model.eval()
            callback(epoch, model)
            model.train()
        if checkpoint_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, Path(checkpoint_dir) / f"inverter-epoch{epoch + 1:04d}.ckpt", checkpoint_meta(cfg, enc))
    model.A.requires_grad_(True)
    model.zero_grad(set_to_none=True)
    return model.eval()


# -- personalization ---------------------------------------------------------


def concept_rng(seed: int, symbol: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(symbol.encode("utf-8"))])


def random_word_embedding(enc: FrozenEncoderPair, rng: np.random.Generator) -> torch.Tensor:
    """A draw matching the per-dimension mean and spread of the word table."""
    table = enc.word_vectors(range(enc.vocab_size)).double()
    mu, sd = table.mean(dim=0).numpy(), table.std(dim=0).numpy()
    return torch.from_numpy((mu + sd * rng.standard_normal(enc.word_dim)).astype(np.float32))


@dataclass
class ConceptExamples:
    symbol: str
    type_string: str
    embeddings: np.ndarray


def personalize_many(
    concepts: Sequence[ConceptExamples],
    model: InverterModel,
    enc: FrozenEncoderPair,
    cfg: PersonalizeConfig,
    bank: PromptBank | None = None,
    loss_log: dict[str, list[float]] | None = None,
) -> list[PersonalizedToken]:
    """Personalize several concepts at once.

    The concepts share nothing: losses are summed and Adam acts elementwise,
    so each row follows its own trajectory; template draws come from a
    per-concept generator.
    """
    bank = PromptBank() if bank is None else bank
    if not concepts:
        return []
    if model.training:
        raise PreconditionError("personalize needs the inverter in eval mode")
    for c in concepts:
        if len(c.embeddings) == 0:
            raise PreconditionError(f"{c.symbol}: empty example set")
    rngs = [concept_rng(cfg.seed, c.symbol) for c in concepts]
    with torch.no_grad():
        zbar = torch.stack([l2_normalize(torch.from_numpy(np.asarray(c.embeddings, np.float32)).mean(0)) for c in concepts])
        eta = torch.stack([model.A @ torch.from_numpy(enc.encode_sentence(c.type_string)) for c in concepts])
        if cfg.init == "inverter":
            w0 = torch.stack([model(torch.from_numpy(np.asarray(c.embeddings, np.float32))[None])[0] for c in concepts])
        else:
            w0 = torch.stack([random_word_embedding(enc, r) for r in rngs])
    w = torch.nn.Parameter(w0.clone())
    opt = torch.optim.Adam([w], lr=cfg.tune_lr)
    logs: list[list[float]] = [[] for _ in concepts]
    for _ in range(cfg.tune_epochs):
        templates = [bank.sample(r) for r in rngs]
        opt.zero_grad()
        total = w.new_zeros(())
        for t in dict.fromkeys(templates):
            rows = [i for i, tt in enumerate(templates) if tt == t]
            idx = torch.as_tensor(rows)
            zhat = enc.encode_with_vectors(t, w[idx])
            losses = personalization_loss(zhat, zbar[idx], eta[idx], cfg.temp)
            for i, v in zip(rows, losses.detach().tolist()):
                logs[i].append(v)
            total = total + losses.sum()
        total.backward()
        opt.step()
    if loss_log is not None:
        for c, log in zip(concepts, logs):
            loss_log[c.symbol] = log
    provenance = {"model_digest": model.digest(), "config_digest": config_digest(asdict(cfg)), "seed": cfg.seed}
    return [
        PersonalizedToken(c.symbol, c.type_string, w[i].detach().numpy().copy(), {**provenance, "shots": len(c.embeddings)})
        for i, c in enumerate(concepts)
    ]


def personalize(
    examples: Any,
    type_string: str,
    model: InverterModel,
    enc: FrozenEncoderPair,
    cfg: PersonalizeConfig,
    symbol: str = "[CONCEPT]",
    bank: PromptBank | None = None,
    loss_log: list[float] | None = None,
) -> PersonalizedToken:
    """Learn the word embedding of one concept from its example image embeddings."""
    emb = np.asarray(examples, dtype=np.float32)
    if emb.ndim != 2 or emb.shape[0] == 0:
        raise PreconditionError("personalize needs a non-empty (N, d) example set")
    log: dict[str, list[float]] = {}
    (tok,) = personalize_many([ConceptExamples(symbol, type_string, emb)], model, enc, cfg, bank, log)
    if loss_log is not None:
        loss_log[:] = log[symbol]
    return tok


# -- ablations -------------------------------------------------------------------

ABLATIONS = ("no_text_augment", "only_gt", "only_cycle", "only_tuning", "no_alignment")
# the inverter ablations are compared before tuning, the tuning ablations after it
ABLATION_STAGE = {
    "no_text_augment": "no_tuning",
    "only_gt": "no_tuning",
    "only_cycle": "no_tuning",
    "only_tuning": "with_tuning",
    "no_alignment": "with_tuning",
}


def ablated_configs(
    flag: str, tcfg: InverterTrainConfig, pcfg: PersonalizeConfig
) -> tuple[InverterTrainConfig, PersonalizeConfig]:
    if flag not in ABLATIONS:
        raise ConfigError(f"unknown ablation {flag!r}; choose from {', '.join(ABLATIONS)}")
    if flag == "no_text_augment":
        return replace(tcfg, text_augment=False), pcfg
    if flag == "only_gt":
        return replace(tcfg, use_cycle=False), pcfg
    if flag == "only_cycle":
        return replace(tcfg, lambda_gt=0.0), pcfg
    if flag == "only_tuning":
        return tcfg, replace(pcfg, init="random")
    return replace(tcfg, train_alignment=False), pcfg


def run_ablation(
    flag: str,
    bench: "RetrievalBenchmark",
    data: TrainingDataset,
    enc: FrozenEncoderPair,
    tcfg: InverterTrainConfig,
    pcfg: PersonalizeConfig,
    seeds: Iterable[int],
    regime: str = "rich",
    bank: PromptBank | None = None,
    out_dir: str | Path | None = None,
    full_pipeline: Any = None,
) -> dict[str, Any]:
    """Evaluate the full method and one ablated variant on the same seeds.

    ``full_pipeline`` (a :class:`~palavra.evalkit.pipeline.Pipeline` built
    from ``tcfg``/``pcfg``) lets several ablations share the full method's
    trained inverters. Returns ``{"flag", "stage", "full", "ablated"}``
    with two metrics reports.
    """
    from .evalkit.pipeline import Pipeline

    t_abl, p_abl = ablated_configs(flag, tcfg, pcfg)
    stage = ABLATION_STAGE[flag]
    method = "palavra" if stage == "with_tuning" else "palavra_no_tuning"
    seeds = list(seeds)
    full_pipe = full_pipeline or Pipeline(bench, data, enc, tcfg, pcfg, bank)
    full = full_pipe.evaluate(method, seeds, regime)
    abl_pipe = Pipeline(bench, data, enc, t_abl, p_abl, bank, variant=flag)
    if t_abl == full_pipe.tcfg:
        # only the personalization side differs: reuse the full method's inverters
        for s in seeds:
            abl_pipe._models[s] = full_pipe.model(s)
    ablated = abl_pipe.evaluate(method, seeds, regime)
    ablated.method = f"{method}:{flag}"
    if out_dir is not None:
        full.write(Path(out_dir) / f"ablation-{flag}-full")
        ablated.write(Path(out_dir) / f"ablation-{flag}")
    return {"flag": flag, "stage": stage, "full": full, "ablated": ablated}
