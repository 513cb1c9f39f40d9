"""Entity and relation extractors: one-hidden-layer softmax classifiers.

Both extractors consume the hashed sentence vector concatenated with mention
features.  The output weight matrix doubles as the learned type-vector table:
row ``t`` is the type vector read out for predictions and DS labels when agent
states are built, and it moves under the extractor's own gradient.

Training uses mini-batch SGD with a cosine-annealed learning rate and a
confidence-damped cross entropy: an instance with consensus confidence ``C``
contributes ``C**lambda_exp`` times its plain loss (and gradient).  The
update uses the batch-summed gradient; reported losses are batch means.
Unit-norm feature blocks are rescaled to unit component variance on input so
the stated learning-rate range is effective at this model scale.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embeddings import TypeEmbeddingTable, featurize_mention, featurize_sentence

__all__ = [
    "LossConfig",
    "ExtractorHyper",
    "ExtractorModel",
    "ExtractorDiverged",
    "assemble_inputs",
    "cosine_lr",
    "predict",
    "train_step",
    "sgd_step",
    "loss_and_grads",
    "clone_model",
    "type_table",
    "save_model",
    "load_model",
]


class ExtractorDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lambda_exp: float = 2.0
    lr_min: float = 1e-4
    lr_max: float = 1e-2
    batch_size: int = 64
    schedule: int = 1000  # cosine annealing period, in steps

    def __post_init__(self):
        if self.lambda_exp < 0:
            raise ValueError("lambda_exp must be non-negative")
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        if self.schedule < 1:
            raise ValueError("schedule must be at least one step")


def cosine_lr(step: int, schedule: int, lr_min: float, lr_max: float) -> float:
    """Cosine-annealed rate: lr_max at step 0 down to lr_min at ``schedule``."""
    t = min(step, schedule) / schedule
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + np.cos(np.pi * t))


@dataclass(frozen=True)
class ExtractorHyper:
    hidden: int = 64
    d_s: int = 128
    d_m: int = 32
    salt: int = 17
    seed: int = 0


def assemble_inputs(kind, S, M):
    """Build extractor input rows from cached feature matrices.

    Each unit-norm block is scaled by the square root of its dimension so
    components have roughly unit variance.  Entity inputs are one row per
    mention in (head, tail) order: rows ``2i`` and ``2i + 1`` belong to
    instance ``i``.
    """
    d_s, d_m = S.shape[1], M.shape[2]
    Ss = S * np.sqrt(d_s)
    Ms = M * np.sqrt(d_m)
    if kind == "relation":
        return np.hstack([Ss, Ms[:, 0], Ms[:, 1]])
    rows = np.empty((2 * len(S), d_s + d_m))
    rows[0::2] = np.hstack([Ss, Ms[:, 0]])
    rows[1::2] = np.hstack([Ss, Ms[:, 1]])
    return rows


class ExtractorModel:
    """Feed-forward classifier ``x -> tanh(W1 x + b1) -> type_vectors . h + b2``."""

    def __init__(self, kind, hyper, W1, b1, type_vectors, b2):
        if kind not in ("entity", "relation"):
            raise ValueError("kind must be 'entity' or 'relation'")
        self.kind = kind
        self.hyper = hyper
        self.W1 = W1
        self.b1 = b1
        self.type_vectors = type_vectors  # [num_classes, hidden]
        self.b2 = b2

    @classmethod
    def create(cls, kind, num_classes, hyper: ExtractorHyper):
        d_in = hyper.d_s + (hyper.d_m if kind == "entity" else 2 * hyper.d_m)
        rng = np.random.default_rng(hyper.seed)
        W1 = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(hyper.hidden, d_in))
        b1 = np.zeros(hyper.hidden)
        type_vectors = rng.normal(0.0, 1.0 / np.sqrt(hyper.hidden),
                                  size=(num_classes, hyper.hidden))
        b2 = np.zeros(num_classes)
        return cls(kind, hyper, W1, b1, type_vectors, b2)

    @property
    def num_classes(self):
        return self.type_vectors.shape[0]

    @property
    def input_dim(self):
        return self.W1.shape[1]

    def parameters(self):
        return [self.W1, self.b1, self.type_vectors, self.b2]

    def forward(self, X):
        """Return (hidden activations, class probabilities) for rows of X."""
        hidden = np.tanh(X @ self.W1.T + self.b1)
        logits = hidden @ self.type_vectors.T + self.b2
        logits -= logits.max(axis=1, keepdims=True)
        exp = np.exp(logits)
        probs = exp / exp.sum(axis=1, keepdims=True)
        return hidden, probs

    def log_probs(self, X):
        hidden = np.tanh(X @ self.W1.T + self.b1)
        logits = hidden @ self.type_vectors.T + self.b2
        shifted = logits - logits.max(axis=1, keepdims=True)
        return hidden, shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def inputs_for(self, instance, sentence_vec=None, mention_vecs=None):
        """Assemble input rows for one instance (two rows for the entity task)."""
        h = self.hyper
        if sentence_vec is None:
            sentence_vec = featurize_sentence(instance, h.d_s, h.salt).values
        if mention_vecs is None:
            mention_vecs = (featurize_mention(instance, "head", h.d_m, h.salt),
                            featurize_mention(instance, "tail", h.d_m, h.salt))
        S = np.asarray(sentence_vec)[None, :]
        M = np.stack(mention_vecs)[None, :, :]
        return assemble_inputs(self.kind, S, M)


def predict(model: ExtractorModel, instance):
    """Run the extractor on one instance.

    Entity models return per-mention arrays ordered (head, tail); relation
    models return scalars.  The extracted type vector is the type-table row
    of the argmax class.
    """
    X = model.inputs_for(instance)
    _, probs = model.forward(X)
    if model.kind == "entity":
        ids = probs.argmax(axis=1)
        return ids, probs, model.type_vectors[ids]
    idx = int(probs[0].argmax())
    return idx, probs[0], model.type_vectors[idx]


def loss_and_grads(model, X, y, conf, lambda_exp):
    """Batch-summed damped cross entropy and its parameter gradients.

    The per-instance loss is ``conf**lambda_exp * nll`` so the gradient of
    every instance is scaled by the same factor as its loss.
    """
    n = len(y)
    hidden, logp = model.log_probs(X)
    nll = -logp[np.arange(n), y]
    weights = np.asarray(conf, dtype=float) ** lambda_exp
    loss = float(np.sum(weights * nll))

    probs = np.exp(logp)
    dlogits = probs
    dlogits[np.arange(n), y] -= 1.0
    dlogits *= weights[:, None]

    dT = dlogits.T @ hidden
    db2 = dlogits.sum(axis=0)
    dhidden = dlogits @ model.type_vectors
    dpre = dhidden * (1.0 - hidden ** 2)
    dW1 = dpre.T @ X
    db1 = dpre.sum(axis=0)
    return loss, (dW1, db1, dT, db2)


def sgd_step(model, X, y, conf, cfg: LossConfig, step: int) -> float:
    """One damped-loss SGD update; returns the mean adjusted loss."""
    loss, grads = loss_and_grads(model, X, y, conf, cfg.lambda_exp)
    if not np.isfinite(loss):
        raise ExtractorDiverged(
            f"{model.kind} extractor loss became {loss} at step {step}")
    lr = cosine_lr(step, cfg.schedule, cfg.lr_min, cfg.lr_max)
    for param, grad in zip(model.parameters(), grads):
        param -= lr * grad
    return loss / len(y)


def train_step(model, batch, cfg: LossConfig, step: int) -> float:
    """Train on a list of (instance, confidence) pairs using current labels."""
    rows, labels, confs = [], [], []
    for instance, c in batch:
        X = model.inputs_for(instance)
        rows.append(X)
        if model.kind == "entity":
            labels.extend([instance.head.current_type, instance.tail.current_type])
            confs.extend([c, c])
        else:
            labels.append(instance.current_relation)
            confs.append(c)
    X = np.vstack(rows)
    return sgd_step(model, X, np.asarray(labels), np.asarray(confs), cfg, step)


def clone_model(model: ExtractorModel) -> ExtractorModel:
    """Deep copy; training the copy never touches the original."""
    return ExtractorModel(model.kind, model.hyper, model.W1.copy(), model.b1.copy(),
                          model.type_vectors.copy(), model.b2.copy())


def type_table(entity_model, relation_model) -> TypeEmbeddingTable:
    """Assemble the live type-vector table from the two current extractors."""
    return TypeEmbeddingTable(entity_vectors=entity_model.type_vectors,
                              relation_vectors=relation_model.type_vectors)


# --- checkpointing ----------------------------------------------------------
#
# Layout (little-endian): magic b"RRLM", version u32, kind u8 (0 entity /
# 1 relation), hyper (hidden, d_s, d_m, salt, seed as i64), num_classes u32,
# input_dim u32, then W1, b1, type_vectors, b2 as float64 in that order.

_MODEL_MAGIC = b"RRLM"
_MODEL_HEADER = struct.Struct("<4sIBqqqqqII")


def save_model(model: ExtractorModel, path) -> None:
    h = model.hyper
    with Path(path).open("wb") as fh:
        fh.write(_MODEL_HEADER.pack(_MODEL_MAGIC, 1,
                                    0 if model.kind == "entity" else 1,
                                    h.hidden, h.d_s, h.d_m, h.salt, h.seed,
                                    model.num_classes, model.input_dim))
        for arr in model.parameters():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path) -> ExtractorModel:
    raw = Path(path).read_bytes()
    magic, version, kind_code, hidden, d_s, d_m, salt, seed, n_cls, d_in = \
        _MODEL_HEADER.unpack_from(raw, 0)
    if magic != _MODEL_MAGIC or version != 1:
        raise ValueError(f"{path}: not a version-1 extractor checkpoint")
    hyper = ExtractorHyper(hidden=hidden, d_s=d_s, d_m=d_m, salt=salt, seed=seed)
    offset = _MODEL_HEADER.size

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        offset += arr.nbytes
        return arr.reshape(shape).copy()

    W1 = take((hidden, d_in))
    b1 = take((hidden,))
    T = take((n_cls, hidden))
    b2 = take((n_cls,))
    return ExtractorModel("entity" if kind_code == 0 else "relation",
                          hyper, W1, b1, T, b2)
