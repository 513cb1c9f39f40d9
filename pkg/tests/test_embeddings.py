import numpy as np
import pytest

from relabel_rl.corpus import GeneratorConfig, generate_corpus
from relabel_rl.embeddings import (
    KGEmbeddings,
    TransEConfig,
    _init_embeddings,
    featurize_mention,
    featurize_sentence,
    feature_matrices,
    load_kg_embeddings,
    save_kg_embeddings,
    transe_pretrain,
    triple_score,
)

CORPUS = generate_corpus(GeneratorConfig(num_entity_types=4, num_relation_types=3,
                                         num_instances=60, vocab_size=120), seed=2)


def test_featurize_deterministic():
    inst = CORPUS.instances[0]
    a = featurize_sentence(inst, d_s=64, salt=5)
    b = featurize_sentence(inst, d_s=64, salt=5)
    assert np.array_equal(a.values, b.values)


def test_featurize_unit_norm():
    for inst in CORPUS.instances[:20]:
        vec = featurize_sentence(inst, d_s=64, salt=5).values
        assert abs(np.linalg.norm(vec) - 1.0) <= 1e-12


def test_featurize_salt_changes_vector():
    inst = CORPUS.instances[0]
    a = featurize_sentence(inst, d_s=64, salt=5).values
    b = featurize_sentence(inst, d_s=64, salt=6).values
    assert not np.array_equal(a, b)


def test_one_token_difference_changes_vector():
    # Oracle: mutate a single token in many instances; the hashed vectors must
    # differ every time at d_s=64 (collisions would show up here).
    rng = np.random.default_rng(0)
    for inst in CORPUS.instances[:50]:
        base = featurize_sentence(inst, d_s=64, salt=5).values
        pos = int(rng.integers(len(inst.tokens)))
        new_tok = (inst.tokens[pos] + 1 + int(rng.integers(CORPUS.vocab_size - 1))) % CORPUS.vocab_size
        tokens = list(inst.tokens)
        tokens[pos] = new_tok
        mutated = type(inst)(id=inst.id, tokens=tuple(tokens), head=inst.head,
                             tail=inst.tail, ds_relation=inst.ds_relation,
                             current_relation=inst.current_relation,
                             gold_relation=inst.gold_relation)
        other = featurize_sentence(mutated, d_s=64, salt=5).values
        assert not np.array_equal(base, other)


def test_features_ignore_labels():
    from dataclasses import replace
    inst = CORPUS.instances[3]
    relabeled = replace(inst, ds_relation=0, current_relation=0,
                        head=replace(inst.head, ds_type=0, current_type=0),
                        tail=replace(inst.tail, ds_type=1, current_type=1))
    a = featurize_sentence(inst, d_s=64, salt=5).values
    b = featurize_sentence(relabeled, d_s=64, salt=5).values
    assert np.array_equal(a, b)
    ma = featurize_mention(inst, "head", 32, salt=5)
    mb = featurize_mention(relabeled, "head", 32, salt=5)
    assert np.array_equal(ma, mb)


def test_feature_matrices_match_single_calls():
    views = [inst.train_view() for inst in CORPUS.instances[:10]]
    S, M = feature_matrices(views, d_s=64, d_m=32, salt=5)
    for i, inst in enumerate(CORPUS.instances[:10]):
        assert np.array_equal(S[i], featurize_sentence(inst, 64, 5).values)
        assert np.array_equal(M[i, 0], featurize_mention(inst, "head", 32, 5))
        assert np.array_equal(M[i, 1], featurize_mention(inst, "tail", 32, 5))


def test_featurize_rejects_small_dim():
    with pytest.raises(ValueError):
        featurize_sentence(CORPUS.instances[0], d_s=4, salt=0)


def test_triple_score_identity():
    v = np.array([0.3, -0.2, 0.5])
    assert triple_score(v, np.zeros(3), v) == 0.0


def test_triple_score_exact_translation():
    assert triple_score(np.array([1.0, 0.0]), np.array([0.0, 1.0]),
                        np.array([1.0, 1.0])) == 0.0


def test_triple_score_direct_arithmetic():
    got = triple_score(np.array([1.0, 0.0]), np.array([0.0, 0.0]),
                       np.array([0.0, 1.0]))
    assert abs(got - np.sqrt(2.0)) <= 1e-15


def test_triple_score_rotation_invariant():
    rng = np.random.default_rng(4)
    t1, tr, t2 = rng.normal(size=(3, 8))
    q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
    base = triple_score(t1, tr, t2)
    rotated = triple_score(q @ t1, q @ tr, q @ t2)
    assert abs(base - rotated) <= 1e-12


def test_triple_score_zero_iff_exact():
    rng = np.random.default_rng(5)
    t1, tr = rng.normal(size=(2, 6))
    assert triple_score(t1, tr, t1 + tr) <= 1e-15
    assert triple_score(t1, tr, t1 + tr + 1e-3) > 0.0


def test_triple_score_dimension_mismatch():
    with pytest.raises(ValueError):
        triple_score(np.zeros(3), np.zeros(3), np.zeros(4))


def _toy_triples(num_entities=5, num_relations=2):
    # A consistent toy KG: relation r links entity e to entity (e + r + 1) mod n.
    triples = []
    for r in range(num_relations):
        for e in range(num_entities):
            triples.append((e, r, (e + r + 1) % num_entities))
    return triples


def test_transe_zero_epochs_is_seeded_init():
    triples = _toy_triples()
    cfg = TransEConfig(epochs=0, d_k=16, seed=9)
    res = transe_pretrain(triples, 5, 2, cfg)
    E, R = _init_embeddings(5, 2, 16, np.random.default_rng(9))
    assert np.array_equal(res.embeddings.entity_vectors, E)
    assert np.array_equal(res.embeddings.relation_vectors, R)
    assert res.epoch_losses == []


def test_transe_separates_true_from_corrupted():
    triples = _toy_triples()
    cfg = TransEConfig(epochs=50, d_k=16, seed=1, lr=0.05)
    kg = transe_pretrain(triples, 5, 2, cfg).embeddings
    rng = np.random.default_rng(3)
    true_scores, fake_scores = [], []
    for h, r, t in triples:
        true_scores.append(triple_score(kg.entity_vectors[h], kg.relation_vectors[r],
                                        kg.entity_vectors[t]))
        t_bad = (t + 1 + int(rng.integers(4))) % 5
        fake_scores.append(triple_score(kg.entity_vectors[h], kg.relation_vectors[r],
                                        kg.entity_vectors[t_bad]))
    assert np.mean(true_scores) < np.mean(fake_scores)


def test_transe_loss_trend_decreases():
    triples = _toy_triples()
    cfg = TransEConfig(epochs=50, d_k=16, seed=1, lr=0.05)
    losses = transe_pretrain(triples, 5, 2, cfg).epoch_losses
    assert len(losses) == 50
    # Epoch-averaged hinge loss should trend downward on a separable KG.
    assert np.mean(losses[-5:]) <= np.mean(losses[:5])
    assert losses[-1] <= losses[0]


def test_transe_entity_rows_normalized_after_each_epoch():
    triples = _toy_triples()
    for epochs in (1, 2, 5):
        cfg = TransEConfig(epochs=epochs, d_k=16, seed=1, lr=0.05)
        kg = transe_pretrain(triples, 5, 2, cfg).embeddings
        norms = np.linalg.norm(kg.entity_vectors, axis=1)
        assert np.all(np.abs(norms - 1.0) <= 1e-9)


def test_transe_deterministic():
    triples = _toy_triples()
    cfg = TransEConfig(epochs=10, d_k=16, seed=4)
    a = transe_pretrain(triples, 5, 2, cfg)
    b = transe_pretrain(triples, 5, 2, cfg)
    assert np.array_equal(a.embeddings.entity_vectors, b.embeddings.entity_vectors)
    assert a.epoch_losses == b.epoch_losses


def test_transe_rejects_empty():
    with pytest.raises(ValueError):
        transe_pretrain([], 5, 2, TransEConfig())


def test_kg_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    kg = KGEmbeddings(entity_vectors=rng.normal(size=(6, 10)),
                      relation_vectors=rng.normal(size=(3, 10)), d_k=10)
    path = tmp_path / "kg.bin"
    save_kg_embeddings(kg, path)
    loaded = load_kg_embeddings(path)
    assert np.array_equal(loaded.entity_vectors, kg.entity_vectors)
    assert np.array_equal(loaded.relation_vectors, kg.relation_vectors)
    assert loaded.d_k == 10
