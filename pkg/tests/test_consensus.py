import itertools

import numpy as np
import pytest

from relabel_rl.consensus import ConsensusOutcome, consensus, relabel, relabel_stats
from relabel_rl.corpus import GeneratorConfig, NoiseSpec, generate_corpus, inject_noise


def test_case_study_positive_row():
    # Relation agent 0.896, entity agents 0.772 / 0.729 -> Positive (0.799).
    out = consensus(0.896, 0.772, 0.729)
    assert out.positive
    assert abs(out.confidence - 0.799) <= 0.0005
    assert not out.divergent


def test_case_study_negative_row():
    # Relation agent 0.236, entity agents 0.373 / 0.791 -> Negative (0.533).
    out = consensus(0.236, 0.373, 0.791)
    assert not out.positive
    assert abs(out.confidence - 0.533) <= 0.0005
    assert out.divergent


def test_boundary_tie_is_negative():
    out = consensus(0.5, 0.5, 0.5)
    assert not out.positive
    assert out.confidence == 0.5
    assert not out.divergent


def test_symmetry():
    votes = (0.2, 0.7, 0.9)
    outs = [consensus(*perm) for perm in itertools.permutations(votes)]
    assert all(o == outs[0] for o in outs)


def test_confidence_always_at_least_half():
    rng = np.random.default_rng(0)
    for _ in range(200):
        out = consensus(*rng.random(3))
        assert 0.5 <= out.confidence <= 1.0


def test_divergence_damps_confidence():
    # When votes straddle 0.5 the average is pulled toward 0.5, so C stays
    # below the most extreme vote mapped through the decided polarity.
    rng = np.random.default_rng(1)
    straddles = 0
    for _ in range(500):
        votes = rng.random(3)
        if not (votes.min() < 0.5 < votes.max()):
            continue
        straddles += 1
        out = consensus(*votes)
        assert out.divergent
        extreme = votes.max() if out.positive else 1.0 - votes.min()
        assert out.confidence <= extreme
    assert straddles > 100


def test_out_of_range_vote_rejected():
    with pytest.raises(ValueError):
        consensus(1.2, 0.5, 0.5)


CORPUS = inject_noise(
    generate_corpus(GeneratorConfig(num_entity_types=4, num_relation_types=3,
                                    num_instances=40, vocab_size=150), seed=0),
    NoiseSpec(fp_rate=0.3, fn_rate=0.3, seed=1),
)
NONE_REL = CORPUS.ontology.none_relation_id


def test_relabel_positive_applies_predictions():
    inst = CORPUS.instances[0]
    out = consensus(0.9, 0.8, 0.7)
    new = relabel(inst, out, predicted_relation=1, predicted_head_type=2,
                  predicted_tail_type=3, none_relation_id=NONE_REL)
    assert new.current_relation == 1
    assert new.head.current_type == 2 and new.tail.current_type == 3
    assert new.confidence == out.confidence


def test_relabel_negative_sets_none_and_restores_ds_types():
    inst = CORPUS.instances[1]
    out = consensus(0.1, 0.3, 0.6)
    new = relabel(inst, out, predicted_relation=1, predicted_head_type=2,
                  predicted_tail_type=3, none_relation_id=NONE_REL)
    assert new.current_relation == NONE_REL
    assert new.head.current_type == inst.head.ds_type
    assert new.tail.current_type == inst.tail.ds_type
    assert new.confidence == pytest.approx(1.0 - out.mean_confidence)


def test_relabel_case_study_false_negative():
    # DS says None, the extractor recognizes relation 1, consensus is the
    # positive 0.799 row: the instance is re-labeled to the extracted type.
    from dataclasses import replace
    inst = replace(CORPUS.instances[2], ds_relation=NONE_REL,
                   current_relation=NONE_REL)
    out = consensus(0.896, 0.772, 0.729)
    new = relabel(inst, out, predicted_relation=1,
                  predicted_head_type=inst.head.ds_type,
                  predicted_tail_type=inst.tail.ds_type,
                  none_relation_id=NONE_REL)
    assert new.current_relation == 1
    assert abs(new.confidence - 0.799) <= 0.0005


def test_relabel_never_touches_ds_or_gold():
    inst = CORPUS.instances[3]
    for votes in ((0.9, 0.9, 0.9), (0.1, 0.1, 0.1)):
        new = relabel(inst, consensus(*votes), 1, 0, 0, NONE_REL)
        assert new.ds_relation == inst.ds_relation
        assert new.gold_relation == inst.gold_relation
        assert new.head.ds_type == inst.head.ds_type
        assert new.head.gold_type == inst.head.gold_type
        assert new.tail.ds_type == inst.tail.ds_type


def test_relabel_stats_identity():
    stats = relabel_stats(CORPUS, CORPUS)
    assert stats.unchanged == stats.total == len(CORPUS)
    assert stats.n_to_p == stats.p_to_n == stats.same_polarity == 0


def test_relabel_stats_single_n_to_p():
    from dataclasses import replace
    none_idx = next(i for i, inst in enumerate(CORPUS.instances)
                    if inst.ds_relation == NONE_REL)
    instances = list(CORPUS.instances)
    instances[none_idx] = replace(instances[none_idx], current_relation=0)
    changed = CORPUS.with_instances(instances)
    stats = relabel_stats(CORPUS, changed)
    assert stats.n_to_p == 1
    assert stats.p_to_n == 0
    assert stats.unchanged == stats.total - 1


def test_relabel_stats_partition_identity():
    rng = np.random.default_rng(5)
    from dataclasses import replace
    instances = []
    for inst in CORPUS.instances:
        new_rel = int(rng.integers(CORPUS.ontology.num_relation_types))
        instances.append(replace(inst, current_relation=new_rel))
    relabeled = CORPUS.with_instances(instances)
    stats = relabel_stats(CORPUS, relabeled)
    assert stats.n_to_p + stats.p_to_n + stats.same_polarity + stats.unchanged == stats.total


def test_relabel_stats_id_mismatch():
    from dataclasses import replace
    instances = list(CORPUS.instances)
    instances[0] = replace(instances[0], id=999)
    with pytest.raises(ValueError):
        relabel_stats(CORPUS, CORPUS.with_instances(instances))
