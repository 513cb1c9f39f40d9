"""Deterministic sentence featurization and knowledge-graph type embeddings.

Sentence vectors are hashed bag-of-feature vectors (the hashing trick with a
keyed blake2b, so they are stable across processes).  KG embeddings are
trained with translation-based margin ranking and score a typed triple by
the L2 norm of ``head + relation - tail``; lower means more consistent.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "SentenceEmbedding",
    "TypeEmbeddingTable",
    "KGEmbeddings",
    "TransEConfig",
    "TransEResult",
    "featurize_sentence",
    "featurize_mention",
    "feature_matrices",
    "transe_pretrain",
    "triple_score",
    "save_kg_embeddings",
    "load_kg_embeddings",
]

_GAP_BUCKET_CAP = 7


def _hash_slot(key: bytes, salt: int, dim: int):
    """Map a feature key to (bucket index, sign) deterministically."""
    salt_bytes = (salt & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")
    digest = hashlib.blake2b(key, digest_size=8, key=salt_bytes).digest()
    val = int.from_bytes(digest, "little")
    return (val >> 1) % dim, 1.0 if val & 1 else -1.0


def _accumulate(keys, salt, dim):
    vec = np.zeros(dim)
    for key in keys:
        idx, sign = _hash_slot(key, salt, dim)
        vec[idx] += sign
    norm = np.linalg.norm(vec)
    if norm > 0.0:
        vec /= norm
    return vec


def _sentence_keys(tokens, head_span, tail_span):
    keys = [b"u:%d" % t for t in tokens]
    keys += [b"b:%d:%d" % (a, b) for a, b in zip(tokens, tokens[1:])]
    keys += [b"hm:%d" % tokens[i] for i in range(*head_span)]
    keys += [b"tm:%d" % tokens[i] for i in range(*tail_span)]
    if head_span[1] <= tail_span[0]:
        gap = tail_span[0] - head_span[1]
    else:
        gap = head_span[0] - tail_span[1]
    keys.append(b"gap:%d" % min(gap, _GAP_BUCKET_CAP))
    return keys


def _span_keys(tokens, span):
    keys = [b"s:%d" % tokens[i] for i in range(*span)]
    keys.append(b"slen:%d" % (span[1] - span[0]))
    return keys


@dataclass(frozen=True)
class SentenceEmbedding:
    """Fixed-length sentence feature vector, unit L2 norm for nonempty input."""

    values: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("sentence embedding contains non-finite entries")


def featurize_sentence(instance, d_s: int, salt: int) -> SentenceEmbedding:
    """Hash unigrams, bigrams, mention-span tokens, and the bucketed mention
    distance into ``d_s`` signed buckets, then L2-normalize.

    Depends only on tokens and spans, never on labels.
    """
    if d_s < 8:
        raise ValueError("d_s must be at least 8")
    head_span = getattr(instance, "head_span", None) or instance.head.span
    tail_span = getattr(instance, "tail_span", None) or instance.tail.span
    keys = _sentence_keys(instance.tokens, head_span, tail_span)
    return SentenceEmbedding(values=_accumulate(keys, salt, d_s))


def featurize_mention(instance, which: str, d_m: int, salt: int) -> np.ndarray:
    """Hashed features of one mention's span tokens (plus span length)."""
    if which not in ("head", "tail"):
        raise ValueError("which must be 'head' or 'tail'")
    span = getattr(instance, f"{which}_span", None)
    if span is None:
        span = getattr(instance, which).span
    return _accumulate(_span_keys(instance.tokens, span), salt, d_m)


def feature_matrices(views, d_s: int, d_m: int, salt: int):
    """Featurize a sequence of instances/views once.

    Returns (S, M) where S is [n, d_s] sentence features and M is [n, 2, d_m]
    mention features ordered (head, tail).
    """
    n = len(views)
    S = np.zeros((n, d_s))
    M = np.zeros((n, 2, d_m))
    for i, v in enumerate(views):
        head_span = getattr(v, "head_span", None) or v.head.span
        tail_span = getattr(v, "tail_span", None) or v.tail.span
        S[i] = _accumulate(_sentence_keys(v.tokens, head_span, tail_span), salt, d_s)
        M[i, 0] = _accumulate(_span_keys(v.tokens, head_span), salt, d_m)
        M[i, 1] = _accumulate(_span_keys(v.tokens, tail_span), salt, d_m)
    return S, M


@dataclass
class TypeEmbeddingTable:
    """Learned type vectors, one row per type id, for each extraction task."""

    entity_vectors: np.ndarray
    relation_vectors: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.entity_vectors))
                and np.all(np.isfinite(self.relation_vectors))):
            raise ValueError("type embedding table contains non-finite entries")


@dataclass
class KGEmbeddings:
    """Type-level KG embeddings for the triple consistency score."""

    entity_vectors: np.ndarray
    relation_vectors: np.ndarray
    d_k: int

    def __post_init__(self):
        if self.entity_vectors.shape[1] != self.d_k or self.relation_vectors.shape[1] != self.d_k:
            raise ValueError("embedding dimension mismatch")


@dataclass(frozen=True)
class TransEConfig:
    margin: float = 1.0
    epochs: int = 20
    lr: float = 0.05
    d_k: int = 50
    seed: int = 0
    batch_size: int = 256


@dataclass
class TransEResult:
    embeddings: KGEmbeddings
    epoch_losses: list


def _init_embeddings(num_entities, num_relations, d_k, rng):
    bound = 6.0 / np.sqrt(d_k)
    E = rng.uniform(-bound, bound, size=(num_entities, d_k))
    R = rng.uniform(-bound, bound, size=(num_relations, d_k))
    E /= np.linalg.norm(E, axis=1, keepdims=True)
    R /= np.linalg.norm(R, axis=1, keepdims=True)
    return E, R


def transe_pretrain(corpus_triples, num_entity_types, num_relation_types,
                    cfg: TransEConfig) -> TransEResult:
    """Margin-ranking training with uniform negative sampling.

    Negatives corrupt the head or the tail entity type (probability 1/2
    each), never the relation.  Entity rows are re-normalized to unit L2
    norm after every epoch.  Deterministic under ``cfg.seed``.
    """
    triples = np.asarray(list(corpus_triples), dtype=int)
    if triples.size == 0:
        raise ValueError("transe_pretrain needs at least one triple")
    if triples.ndim != 2 or triples.shape[1] != 3:
        raise ValueError("triples must be (head, relation, tail) id tuples")

    rng = np.random.default_rng(cfg.seed)
    E, R = _init_embeddings(num_entity_types, num_relation_types, cfg.d_k, rng)
    n = len(triples)
    losses = []

    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = triples[order[start:start + cfg.batch_size]]
            h, r, t = batch[:, 0], batch[:, 1], batch[:, 2]
            corrupt_head = rng.random(len(batch)) < 0.5
            # Shifted uniform draw guarantees the corrupted id differs.
            repl = rng.integers(1, num_entity_types, size=len(batch))
            h_neg = np.where(corrupt_head, (h + repl) % num_entity_types, h)
            t_neg = np.where(corrupt_head, t, (t + repl) % num_entity_types)

            pos = E[h] + R[r] - E[t]
            neg = E[h_neg] + R[r] - E[t_neg]
            d_pos = np.linalg.norm(pos, axis=1)
            d_neg = np.linalg.norm(neg, axis=1)
            viol = cfg.margin + d_pos - d_neg
            active = viol > 0.0
            total += float(np.sum(np.maximum(viol, 0.0)))
            if not np.any(active):
                continue

            g_pos = np.where(d_pos[:, None] > 0, pos / np.maximum(d_pos, 1e-12)[:, None], 0.0)
            g_neg = np.where(d_neg[:, None] > 0, neg / np.maximum(d_neg, 1e-12)[:, None], 0.0)
            g_pos = g_pos * active[:, None] * cfg.lr
            g_neg = g_neg * active[:, None] * cfg.lr

            np.subtract.at(E, h, g_pos)
            np.add.at(E, t, g_pos)
            np.subtract.at(R, r, g_pos - g_neg)
            np.add.at(E, h_neg, g_neg)
            np.subtract.at(E, t_neg, g_neg)

        E /= np.linalg.norm(E, axis=1, keepdims=True)
        losses.append(total / n)

    return TransEResult(
        embeddings=KGEmbeddings(entity_vectors=E, relation_vectors=R, d_k=cfg.d_k),
        epoch_losses=losses,
    )


def triple_score(t1: np.ndarray, tr: np.ndarray, t2: np.ndarray) -> float:
    """Translation score ``||t1 + tr - t2||``; zero iff the triple is exact."""
    t1, tr, t2 = np.asarray(t1, dtype=float), np.asarray(tr, dtype=float), np.asarray(t2, dtype=float)
    if not (t1.shape == tr.shape == t2.shape):
        raise ValueError(f"dimension mismatch: {t1.shape}, {tr.shape}, {t2.shape}")
    return float(np.linalg.norm(t1 + tr - t2))


# --- binary persistence -----------------------------------------------------
#
# Layout (little-endian):
#   magic   4 bytes  b"RRKG"
#   version u32      1
#   n_ent   u32
#   n_rel   u32
#   d_k     u32
#   entity rows   n_ent * d_k float64, row-major
#   relation rows n_rel * d_k float64, row-major

_KG_MAGIC = b"RRKG"
_KG_HEADER = struct.Struct("<4sIIII")


def save_kg_embeddings(kg: KGEmbeddings, path) -> None:
    path = Path(path)
    n_ent, n_rel = len(kg.entity_vectors), len(kg.relation_vectors)
    with path.open("wb") as fh:
        fh.write(_KG_HEADER.pack(_KG_MAGIC, 1, n_ent, n_rel, kg.d_k))
        fh.write(np.ascontiguousarray(kg.entity_vectors, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(kg.relation_vectors, dtype="<f8").tobytes())


def load_kg_embeddings(path) -> KGEmbeddings:
    path = Path(path)
    raw = path.read_bytes()
    magic, version, n_ent, n_rel, d_k = _KG_HEADER.unpack_from(raw, 0)
    if magic != _KG_MAGIC or version != 1:
        raise ValueError(f"{path}: not a version-1 KG embedding file")
    offset = _KG_HEADER.size
    ent = np.frombuffer(raw, dtype="<f8", count=n_ent * d_k, offset=offset)
    offset += ent.nbytes
    rel = np.frombuffer(raw, dtype="<f8", count=n_rel * d_k, offset=offset)
    return KGEmbeddings(entity_vectors=ent.reshape(n_ent, d_k).copy(),
                        relation_vectors=rel.reshape(n_rel, d_k).copy(),
                        d_k=d_k)
