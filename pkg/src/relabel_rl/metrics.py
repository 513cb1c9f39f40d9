"""Evaluation metrics and validation-set construction.

Entity typing is scored with strict, macro, and micro F1 over single-tag
mention predictions; relation extraction with precision/recall/F1 where a
prediction counts as positive iff it is not the None relation.  Degenerate
zero-denominator cases score 0.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .embeddings import feature_matrices
from .extractors import assemble_inputs

__all__ = [
    "EvalReport",
    "ValidationSetError",
    "entity_scores",
    "relation_prf",
    "build_validation_set",
    "evaluate_extractors",
]


class ValidationSetError(ValueError):
    pass


@dataclass(frozen=True)
class EvalReport:
    strict_f1: float
    macro_f1: float
    micro_f1: float
    precision: float
    recall: float
    f1: float

    def to_dict(self):
        return {
            "strict_f1": self.strict_f1,
            "macro_f1": self.macro_f1,
            "micro_f1": self.micro_f1,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


def _f1(precision, recall):
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def entity_scores(predictions, golds):
    """Strict, macro, and micro F1 over aligned single-tag predictions.

    Strict counts a mention correct iff its predicted tag set equals the gold
    set (singletons here, so exact match).  Macro averages per-type F1 over
    the types occurring in either list; micro pools the counts.
    """
    predictions = list(predictions)
    golds = list(golds)
    if len(predictions) != len(golds):
        raise ValueError(f"length mismatch: {len(predictions)} vs {len(golds)}")
    if not golds:
        return 0.0, 0.0, 0.0

    strict = sum(p == g for p, g in zip(predictions, golds)) / len(golds)

    tp, fp, fn = Counter(), Counter(), Counter()
    for p, g in zip(predictions, golds):
        if p == g:
            tp[g] += 1
        else:
            fp[p] += 1
            fn[g] += 1
    types = sorted(set(predictions) | set(golds))
    per_type = []
    for t in types:
        denom_p = tp[t] + fp[t]
        denom_r = tp[t] + fn[t]
        prec = tp[t] / denom_p if denom_p else 0.0
        rec = tp[t] / denom_r if denom_r else 0.0
        per_type.append(_f1(prec, rec))
    macro = float(np.mean(per_type))

    total_tp = sum(tp.values())
    total_fp = sum(fp.values())
    total_fn = sum(fn.values())
    micro_p = total_tp / (total_tp + total_fp) if total_tp + total_fp else 0.0
    micro_r = total_tp / (total_tp + total_fn) if total_tp + total_fn else 0.0
    return float(strict), macro, _f1(micro_p, micro_r)


def relation_prf(predictions, golds, none_id):
    """Precision/recall/F1 with the None relation excluded from positives."""
    predictions = list(predictions)
    golds = list(golds)
    if len(predictions) != len(golds):
        raise ValueError(f"length mismatch: {len(predictions)} vs {len(golds)}")
    tp = sum(p == g != none_id for p, g in zip(predictions, golds))
    pred_pos = sum(p != none_id for p in predictions)
    gold_pos = sum(g != none_id for g in golds)
    precision = tp / pred_pos if pred_pos else 0.0
    recall = tp / gold_pos if gold_pos else 0.0
    return float(precision), float(recall), _f1(precision, recall)


def build_validation_set(corpus, entity_model, relation_model, fraction=0.2, seed=0):
    """Carve out a relatively clean validation subset.

    Randomly samples ``fraction`` of the corpus, runs the pre-trained
    extractors, and keeps only instances whose DS relation label matches the
    extracted relation, at most one instance per sentence id.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    n = len(corpus)
    n_pick = max(1, int(round(fraction * n)))
    picked = np.sort(rng.choice(n, size=n_pick, replace=False))

    views = [corpus.instances[i].train_view() for i in picked]
    h = relation_model.hyper
    S, M = feature_matrices(views, h.d_s, h.d_m, h.salt)
    _, probs = relation_model.forward(assemble_inputs("relation", S, M))
    predicted = probs.argmax(axis=1)

    kept, seen = [], set()
    for view_idx, corpus_idx in enumerate(picked):
        inst = corpus.instances[corpus_idx]
        if predicted[view_idx] != inst.ds_relation or inst.id in seen:
            continue
        seen.add(inst.id)
        kept.append(inst)
    if not kept:
        raise ValidationSetError(
            "validation set came out empty; increase the fraction or pre-train longer")
    return corpus.with_instances(kept)


def evaluate_extractors(entity_model, relation_model, S, M, entity_labels,
                        relation_labels, none_relation_id) -> EvalReport:
    """Score both extractors against the given labels on cached features.

    ``entity_labels`` is [n, 2] (head, tail); ``relation_labels`` is [n].
    """
    _, ent_probs = entity_model.forward(assemble_inputs("entity", S, M))
    ent_pred = ent_probs.argmax(axis=1)
    golds = np.asarray(entity_labels).reshape(-1)
    strict, macro, micro = entity_scores(ent_pred.tolist(), golds.tolist())

    _, rel_probs = relation_model.forward(assemble_inputs("relation", S, M))
    rel_pred = rel_probs.argmax(axis=1)
    p, r, f = relation_prf(rel_pred.tolist(), list(relation_labels), none_relation_id)
    return EvalReport(strict_f1=strict, macro_f1=macro, micro_f1=micro,
                      precision=p, recall=r, f1=f)
