import logging

import numpy as np
import pytest
import torch

from conftest import small_train_config
from palavra.cache import EmbeddingCache
from palavra.encoder import l2_normalize
from palavra.errors import ConfigError, DataError, PreconditionError
from palavra.inverter import save_checkpoint
from palavra.objectives import total_inverter_loss
from palavra.textaug import PromptBank
from palavra.toy import ToyWorldConfig, build_toy_world, toy_train_config
from palavra.training import (
    IMAGE,
    TEXT,
    ConceptExamples,
    PersonalizeConfig,
    TrainingDataset,
    TrainingHistory,
    ablated_configs,
    first_word_vector,
    personalize,
    personalize_many,
    train_inverter,
)


def test_strict_alternation(trained_small):
    _, history = trained_small
    kinds = history.batch_kinds
    assert len(kinds) > 2 and len(kinds) % 2 == 0
    assert kinds == [IMAGE, TEXT] * (len(kinds) // 2)


def test_zero_epochs_returns_fresh_model(small_world):
    cfg = small_train_config(epochs=0)
    history = TrainingHistory()
    model = train_inverter(small_world.data, small_world.encoder, cfg, history=history)
    assert torch.equal(model.A, torch.eye(model.output_dim))
    assert history.batch_kinds == [] and not model.training
    again = train_inverter(small_world.data, small_world.encoder, cfg)
    assert model.digest() == again.digest()


def test_training_loss_halves(trained_small):
    _, history = trained_small
    assert history.epoch_losses[-1] <= 0.5 * history.epoch_losses[0]


def test_checkpoints_byte_identical(tmp_path, small_world):
    for name in ("a", "b"):
        model = train_inverter(small_world.data, small_world.encoder, small_train_config(epochs=3))
        save_checkpoint(model, tmp_path / f"{name}.ckpt", {"seed": 0})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    other = train_inverter(small_world.data, small_world.encoder, small_train_config(epochs=3, seed=1))
    save_checkpoint(other, tmp_path / "c.ckpt", {"seed": 0})
    assert (tmp_path / "c.ckpt").read_bytes() != (tmp_path / "a.ckpt").read_bytes()


def test_frozen_encoder_and_model_isolation(small_world, trained_small):
    enc = small_world.encoder
    before = enc.digest()
    model = train_inverter(small_world.data, enc, small_train_config(epochs=2))
    assert enc.digest() == before
    info = next(iter(small_world.bench.concepts.values()))
    model_digest = model.digest()
    personalize(small_world.bench.cache.matrix(info.train_ids[:5]), info.type_string, model, enc, PersonalizeConfig(tune_epochs=5))
    assert enc.digest() == before and model.digest() == model_digest
    assert all(p.grad is None for p in model.parameters())


def test_validation_loss_decreases_by_window():
    world = build_toy_world(ToyWorldConfig())
    enc, data = world.encoder, world.data
    rng = np.random.default_rng(123)
    concepts = sorted(data.image_split)[:32]
    sets = torch.stack(
        [torch.from_numpy(data.cache.matrix(sorted(rng.choice(data.image_split[c], 8, replace=False).tolist()))) for c in concepts]
    )
    g = torch.stack([first_word_vector(enc, data.type_strings[c]) for c in concepts]).float()
    cfg = toy_train_config(epochs=30)
    val = []

    def callback(epoch, model):
        with torch.no_grad():
            w0 = model(sets)
            zhat = enc.encode_with_vectors("This is a photo of a [CONCEPT]", w0)
            val.append(float(total_inverter_loss(l2_normalize(sets.mean(1)), zhat, w0, g, cfg.lambda_gt, cfg.temp)))

    train_inverter(data, enc, cfg, callback=callback)
    windows = [np.mean(val[i : i + 5]) for i in range(0, 30, 5)]
    assert all(b < a for a, b in zip(windows, windows[1:])), windows


def test_short_concepts_skipped_with_warning(small_world, caplog):
    data = small_world.data
    short = dict(data.image_split)
    first = sorted(short)[0]
    short[first] = short[first][:3]
    thin = TrainingDataset(short, data.caption_split, data.type_strings, data.cache, data.vocab_types, data.pairs)
    with caplog.at_level(logging.WARNING, logger="palavra"):
        train_inverter(thin, small_world.encoder, small_train_config(epochs=1))
    assert any(first in r.getMessage() for r in caplog.records)
    none = TrainingDataset({c: ids[:3] for c, ids in data.image_split.items()}, data.caption_split, data.type_strings, data.cache)
    with pytest.raises(DataError):
        train_inverter(none, small_world.encoder, small_train_config(epochs=1))


def test_manifest_errors(tmp_path, small_world):
    with pytest.raises(DataError):
        TrainingDataset.from_manifest(tmp_path / "missing.json")
    EmbeddingCache(tmp_path / "c.pvlc", 4).save()
    (tmp_path / "m.json").write_text('{"cache": "c.pvlc", "concepts": [{"id": "x", "type": "<type-1>", "image_ids": ["nope"]}]}')
    with pytest.raises(DataError, match="nope"):
        TrainingDataset.from_manifest(tmp_path / "m.json")


# -- personalization -------------------------------------------------------------------


@pytest.fixture(scope="module")
def concept(small_world):
    sym, info = sorted(small_world.bench.concepts.items())[0]
    return sym, info.type_string, small_world.bench.cache.matrix(info.train_ids[:5])


def test_no_tuning_returns_inverter_output(small_world, trained_small, concept):
    model, _ = trained_small
    sym, type_string, emb = concept
    tok = personalize(emb, type_string, model, small_world.encoder, PersonalizeConfig(tune_epochs=0), symbol=sym)
    assert tok.embedding.tobytes() == model.invert_set(emb).detach().numpy().tobytes()
    assert tok.symbol == sym and tok.type_string == type_string
    assert tok.provenance["model_digest"] == model.digest() and tok.provenance["shots"] == 5


def test_personalization_loss_decreases(small_world, trained_small, concept):
    model, _ = trained_small
    _, type_string, emb = concept
    log = []
    personalize(emb, type_string, model, small_world.encoder, PersonalizeConfig(), loss_log=log)
    assert len(log) == 30 and log[-1] < log[0]


def test_batched_personalization_matches_single(small_world, trained_small):
    model, _ = trained_small
    concepts = [
        ConceptExamples(sym, info.type_string, small_world.bench.cache.matrix(info.train_ids[:5]))
        for sym, info in sorted(small_world.bench.concepts.items())[:3]
    ]
    cfg = PersonalizeConfig(tune_epochs=4)
    many = personalize_many(concepts, model, small_world.encoder, cfg)
    for c, tok in zip(concepts, many):
        one = personalize(c.embeddings, c.type_string, model, small_world.encoder, cfg, symbol=c.symbol)
        np.testing.assert_allclose(tok.embedding, one.embedding, atol=1e-5)


def test_personalize_preconditions(small_world, trained_small, concept):
    model, _ = trained_small
    _, type_string, emb = concept
    with pytest.raises(PreconditionError):
        personalize(np.zeros((0, emb.shape[1])), type_string, model, small_world.encoder, PersonalizeConfig())
    model.train()
    try:
        with pytest.raises(PreconditionError):
            personalize(emb, type_string, model, small_world.encoder, PersonalizeConfig())
    finally:
        model.eval()


def test_random_init_is_seeded(small_world, trained_small, concept):
    model, _ = trained_small
    _, type_string, emb = concept
    cfg = PersonalizeConfig(tune_epochs=0, init="random")
    a = personalize(emb, type_string, model, small_world.encoder, cfg)
    b = personalize(emb, type_string, model, small_world.encoder, cfg)
    assert a.embedding.tobytes() == b.embedding.tobytes()
    assert a.embedding.tobytes() != model.invert_set(emb).detach().numpy().tobytes()


# -- ablations ---------------------------------------------------------------------------


def test_ablation_configs():
    t, p = toy_train_config(), PersonalizeConfig()
    assert ablated_configs("only_cycle", t, p)[0].lambda_gt == 0.0
    assert ablated_configs("only_gt", t, p)[0].use_cycle is False
    assert ablated_configs("no_text_augment", t, p)[0].text_augment is False
    assert ablated_configs("no_alignment", t, p)[0].train_alignment is False
    assert ablated_configs("only_tuning", t, p) == (t, PersonalizeConfig(init="random"))
    with pytest.raises(ConfigError, match="no_such"):
        ablated_configs("no_such", t, p)


def test_no_alignment_keeps_identity(small_world):
    cfg = ablated_configs("no_alignment", small_train_config(epochs=3), PersonalizeConfig())[0]
    model = train_inverter(small_world.data, small_world.encoder, cfg)
    assert model.A.detach().numpy().tobytes() == np.eye(model.output_dim, dtype=np.float32).tobytes()
    assert model.A.requires_grad  # restored for later use


def test_alignment_moves_a(trained_small):
    model, _ = trained_small
    assert not torch.equal(model.A, torch.eye(model.output_dim))


def test_empty_prompt_bank_rejected(small_world):
    with pytest.raises(PreconditionError):
        train_inverter(small_world.data, small_world.encoder, small_train_config(epochs=1), bank=PromptBank(()))
