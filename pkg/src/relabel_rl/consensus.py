"""Confidence consensus: gather the three per-sentence votes and re-label.

The three confidences (one relation agent, two entity agents) are averaged;
a mean at or below 0.5 labels the sentence negative (None relation) with
confidence ``1 - mean``, otherwise positive with confidence ``mean``, so the
assigned confidence always lands in [0.5, 1].  A positive verdict replaces
the current labels with the extractors' predictions; a negative verdict sets
the relation to None and leaves entity labels at their DS values.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

__all__ = [
    "ConsensusOutcome",
    "RelabelStats",
    "consensus",
    "relabel",
    "relabel_stats",
    "audit_entry",
]


@dataclass(frozen=True)
class ConsensusOutcome:
    positive: bool
    confidence: float      # C, the damping confidence
    mean_confidence: float
    divergent: bool        # votes straddle 0.5

    @property
    def polarity(self):
        return "positive" if self.positive else "negative"


def consensus(c_rel, c_head, c_tail) -> ConsensusOutcome:
    """Average the three votes; ties at 0.5 resolve to negative."""
    votes = (c_rel, c_head, c_tail)
    for c in votes:
        if not 0.0 <= c <= 1.0:
            raise ValueError(f"confidence {c} outside [0, 1]")
    mean = sum(votes) / 3.0
    positive = mean > 0.5
    return ConsensusOutcome(
        positive=positive,
        confidence=mean if positive else 1.0 - mean,
        mean_confidence=mean,
        divergent=min(votes) < 0.5 < max(votes),
    )


def relabel(instance, outcome: ConsensusOutcome, predicted_relation,
            predicted_head_type, predicted_tail_type, none_relation_id):
    """Rewrite the instance's current labels according to the verdict.

    DS and gold fields are never touched; only current labels and the
    instance confidence change.
    """
    if outcome.positive:
        head = replace(instance.head, current_type=int(predicted_head_type))
        tail = replace(instance.tail, current_type=int(predicted_tail_type))
        relation = int(predicted_relation)
    else:
        head = replace(instance.head, current_type=instance.head.ds_type)
        tail = replace(instance.tail, current_type=instance.tail.ds_type)
        relation = none_relation_id
    return replace(instance, head=head, tail=tail, current_relation=relation,
                   confidence=outcome.confidence)


@dataclass(frozen=True)
class RelabelStats:
    n_to_p: int
    p_to_n: int
    same_polarity: int
    unchanged: int
    divergent: int
    total: int

    def to_dict(self):
        return {"n_to_p": self.n_to_p, "p_to_n": self.p_to_n,
                "same_polarity": self.same_polarity, "unchanged": self.unchanged,
                "divergent": self.divergent, "total": self.total}


def relabel_stats(original, relabeled, divergent_ids=frozenset()) -> RelabelStats:
    """Count re-label transitions between a noised corpus and its relabeling.

    ``n_to_p`` counts DS None to a current non-None relation, ``p_to_n`` the
    reverse; ``same_polarity`` counts relation changes that keep polarity.
    The four relation-transition counts partition the corpus.
    """
    if len(original) != len(relabeled):
        raise ValueError("corpora differ in length")
    none_id = original.ontology.none_relation_id
    n_to_p = p_to_n = same_polarity = unchanged = 0
    for before, after in zip(original.instances, relabeled.instances):
        if before.id != after.id:
            raise ValueError(f"instance id mismatch: {before.id} vs {after.id}")
        was_none = before.ds_relation == none_id
        is_none = after.current_relation == none_id
        if after.current_relation == before.ds_relation:
            unchanged += 1
        elif was_none and not is_none:
            n_to_p += 1
        elif not was_none and is_none:
            p_to_n += 1
        else:
            same_polarity += 1
    return RelabelStats(n_to_p=n_to_p, p_to_n=p_to_n, same_polarity=same_polarity,
                        unchanged=unchanged, divergent=len(divergent_ids),
                        total=len(original))


def audit_entry(before, after, outcome: ConsensusOutcome):
    """One audit-log record for a changed instance (line-delimited JSON)."""
    return {
        "id": before.id,
        "old": {"relation": before.ds_relation,
                "head_type": before.head.ds_type,
                "tail_type": before.tail.ds_type},
        "new": {"relation": after.current_relation,
                "head_type": after.head.current_type,
                "tail_type": after.tail.current_type},
        "confidence": outcome.confidence,
        "polarity": outcome.polarity,
        "divergent": outcome.divergent,
    }
