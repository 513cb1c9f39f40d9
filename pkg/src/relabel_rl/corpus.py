"""Data model and synthetic generator for distantly supervised extraction corpora.

A corpus is a list of single-sentence instances.  Each instance carries exactly
two entity mentions, the relation label assigned by distant supervision, an
optional hidden gold label, and the current working labels that re-labeling is
allowed to rewrite.  The generator builds corpora from a template grammar in
which every relation type owns characteristic trigger tokens and entity-type
signatures, so that a small classifier can genuinely learn the label structure
and noise recovery can be measured against known gold labels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "TypeOntology",
    "Mention",
    "Instance",
    "TrainView",
    "CorpusStats",
    "Corpus",
    "NoiseSpec",
    "GeneratorConfig",
    "CorpusFormatError",
    "generate_corpus",
    "inject_noise",
    "split_corpus",
    "save_corpus",
    "load_corpus",
]


class CorpusFormatError(ValueError):
    """Raised when a corpus file cannot be parsed; names the line and field."""

    def __init__(self, line_no, field_name, detail):
        self.line_no = line_no
        self.field_name = field_name
        super().__init__(f"line {line_no}: field '{field_name}': {detail}")


@dataclass(frozen=True)
class TypeOntology:
    """Entity and relation type inventories.  Type ids are list positions."""

    entity_types: tuple[str, ...]
    relation_types: tuple[str, ...]
    none_entity_id: int
    none_relation_id: int

    def __post_init__(self):
        if len(set(self.entity_types)) != len(self.entity_types):
            raise ValueError("duplicate entity type names")
        if len(set(self.relation_types)) != len(self.relation_types):
            raise ValueError("duplicate relation type names")
        if not 0 <= self.none_entity_id < len(self.entity_types):
            raise ValueError("none_entity_id outside the entity type list")
        if not 0 <= self.none_relation_id < len(self.relation_types):
            raise ValueError("none_relation_id outside the relation type list")

    @property
    def num_entity_types(self):
        return len(self.entity_types)

    @property
    def num_relation_types(self):
        return len(self.relation_types)

    def non_none_entity_ids(self):
        return [i for i in range(self.num_entity_types) if i != self.none_entity_id]

    def non_none_relation_ids(self):
        return [i for i in range(self.num_relation_types) if i != self.none_relation_id]


@dataclass(frozen=True)
class Mention:
    """One entity mention: token span [start, end) plus type labels."""

    start: int
    end: int
    ds_type: int
    current_type: int
    gold_type: int | None = None

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValueError(f"bad mention span [{self.start}, {self.end})")

    @classmethod
    def new(cls, start, end, ds_type, gold_type=None):
        return cls(start=start, end=end, ds_type=ds_type,
                   current_type=ds_type, gold_type=gold_type)

    @property
    def span(self):
        return (self.start, self.end)


@dataclass(frozen=True)
class Instance:
    """One sentence with two mentions and its relation labels."""

    id: int
    tokens: tuple[int, ...]
    head: Mention
    tail: Mention
    ds_relation: int
    current_relation: int
    confidence: float = 1.0
    gold_relation: int | None = None

    def __post_init__(self):
        n = len(self.tokens)
        for name, m in (("head", self.head), ("tail", self.tail)):
            if m.end > n:
                raise ValueError(f"{name} span [{m.start}, {m.end}) exceeds sentence length {n}")
        if self.head.start < self.tail.end and self.tail.start < self.head.end:
            raise ValueError("head and tail spans overlap")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def train_view(self):
        """Gold-free projection used by all training code paths."""
        return TrainView(
            id=self.id,
            tokens=self.tokens,
            head_span=self.head.span,
            tail_span=self.tail.span,
            head_ds_type=self.head.ds_type,
            tail_ds_type=self.tail.ds_type,
            ds_relation=self.ds_relation,
            head_current_type=self.head.current_type,
            tail_current_type=self.tail.current_type,
            current_relation=self.current_relation,
            confidence=self.confidence,
        )


@dataclass(frozen=True)
class TrainView:
    """What training is allowed to see: tokens, spans, DS and current labels."""

    id: int
    tokens: tuple[int, ...]
    head_span: tuple[int, int]
    tail_span: tuple[int, int]
    head_ds_type: int
    tail_ds_type: int
    ds_relation: int
    head_current_type: int
    tail_current_type: int
    current_relation: int
    confidence: float


@dataclass(frozen=True)
class CorpusStats:
    relation_mentions: int
    entity_mentions: int


@dataclass(frozen=True)
class Corpus:
    """Immutable corpus value: ontology, instances, vocab size, mention counts."""

    ontology: TypeOntology
    instances: tuple[Instance, ...]
    vocab_size: int
    stats: CorpusStats
    noise_applied: bool = False

    def __post_init__(self):
        if self.vocab_size <= 0:
            raise ValueError("vocab_size must be positive")
        recomputed = CorpusStats(relation_mentions=len(self.instances),
                                 entity_mentions=2 * len(self.instances))
        if self.stats != recomputed:
            raise ValueError("corpus stats do not match recomputed mention counts")
        for inst in self.instances:
            self._check_instance(inst)

    def _check_instance(self, inst):
        ont = self.ontology
        for rel in (inst.ds_relation, inst.current_relation, inst.gold_relation):
            if rel is not None and not 0 <= rel < ont.num_relation_types:
                raise ValueError(f"instance {inst.id}: relation id {rel} outside ontology")
        for m in (inst.head, inst.tail):
            for t in (m.ds_type, m.current_type, m.gold_type):
                if t is not None and not 0 <= t < ont.num_entity_types:
                    raise ValueError(f"instance {inst.id}: entity type id {t} outside ontology")
        if any(t < 0 or t >= self.vocab_size for t in inst.tokens):
            raise ValueError(f"instance {inst.id}: token id outside vocab")

    @classmethod
    def build(cls, ontology, instances, vocab_size, noise_applied=False):
        instances = tuple(instances)
        stats = CorpusStats(relation_mentions=len(instances),
                            entity_mentions=2 * len(instances))
        return cls(ontology=ontology, instances=instances, vocab_size=vocab_size,
                   stats=stats, noise_applied=noise_applied)

    def __len__(self):
        return len(self.instances)

    def with_instances(self, instances, noise_applied=None):
        if noise_applied is None:
            noise_applied = self.noise_applied
        return Corpus.build(self.ontology, instances, self.vocab_size,
                            noise_applied=noise_applied)


@dataclass(frozen=True)
class NoiseSpec:
    """Label corruption rates applied independently per instance."""

    fp_rate: float = 0.0
    fn_rate: float = 0.0
    entity_noise_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("fp_rate", "fn_rate", "entity_noise_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass(frozen=True)
class GeneratorConfig:
    """Template-grammar generator parameters.

    ``num_entity_types`` and ``num_relation_types`` count the non-None types;
    a distinguished None type is appended to each list.  Every relation type
    owns ``triggers_per_relation`` dedicated trigger tokens and a set of
    (head type, tail type) signatures; every entity type (including the None
    entity) owns a pool of name tokens, so both extraction tasks are learnable
    from token evidence alone.
    """

    num_entity_types: int = 12
    num_relation_types: int = 8
    num_instances: int = 5000
    vocab_size: int = 600
    none_fraction: float = 0.5
    none_entity_fraction: float = 0.05
    min_sentence_len: int = 9
    max_sentence_len: int = 14
    triggers_per_relation: int = 4
    tokens_per_entity_type: int = 6
    signatures_per_relation: int = 1
    min_triggers: int = 2
    max_triggers: int = 3

    MIN_DISTRACTORS = 16

    def __post_init__(self):
        if self.num_entity_types < 1 or self.num_relation_types < 1:
            raise ValueError("need at least one non-None entity and relation type")
        if self.num_instances < 1:
            raise ValueError("need at least one instance")
        if not 0.0 <= self.none_fraction <= 1.0:
            raise ValueError("none_fraction outside [0, 1]")
        if not 0.0 <= self.none_entity_fraction <= 1.0:
            raise ValueError("none_entity_fraction outside [0, 1]")
        if self.min_sentence_len < 8 or self.max_sentence_len < self.min_sentence_len:
            raise ValueError("sentence length range must satisfy 8 <= min <= max")
        if not 1 <= self.min_triggers <= self.max_triggers:
            raise ValueError("trigger count range must satisfy 1 <= min <= max")
        if self.reserved_tokens() + self.MIN_DISTRACTORS > self.vocab_size:
            raise ValueError(
                f"vocab_size {self.vocab_size} smaller than pattern requirements "
                f"({self.reserved_tokens()} reserved + {self.MIN_DISTRACTORS} distractors)")

    def reserved_tokens(self):
        n_entity_total = self.num_entity_types + 1  # plus the None entity type
        return (n_entity_total * self.tokens_per_entity_type
                + self.num_relation_types * self.triggers_per_relation)


def _build_ontology(cfg):
    entity_names = tuple(f"E{i:02d}" for i in range(cfg.num_entity_types)) + ("None",)
    relation_names = tuple(f"R{i:02d}" for i in range(cfg.num_relation_types)) + ("None",)
    return TypeOntology(entity_types=entity_names, relation_types=relation_names,
                        none_entity_id=cfg.num_entity_types,
                        none_relation_id=cfg.num_relation_types)


def _token_pools(cfg):
    """Vocab layout: distractors first, then entity pools, then relation triggers."""
    n_entity_total = cfg.num_entity_types + 1
    n_distractor = cfg.vocab_size - cfg.reserved_tokens()
    entity_pools = []
    base = n_distractor
    for _ in range(n_entity_total):
        entity_pools.append(np.arange(base, base + cfg.tokens_per_entity_type))
        base += cfg.tokens_per_entity_type
    trigger_pools = []
    for _ in range(cfg.num_relation_types):
        trigger_pools.append(np.arange(base, base + cfg.triggers_per_relation))
        base += cfg.triggers_per_relation
    return np.arange(n_distractor), entity_pools, trigger_pools


def generate_corpus(cfg: GeneratorConfig, seed: int) -> Corpus:
    """Generate a noise-free corpus where gold labels equal DS labels.

    Identical (cfg, seed) pairs produce byte-identical corpora: every random
    draw comes from a single seeded generator consumed in a fixed order.
    """
    rng = np.random.default_rng(seed)
    ontology = _build_ontology(cfg)
    distractors, entity_pools, trigger_pools = _token_pools(cfg)
    non_none_entities = np.array(ontology.non_none_entity_ids())
    non_none_relations = np.array(ontology.non_none_relation_ids())

    # Each relation's entity-type signatures are drawn once per corpus.
    signatures = []
    for _ in range(cfg.num_relation_types):
        pairs = [(int(rng.choice(non_none_entities)), int(rng.choice(non_none_entities)))
                 for _ in range(cfg.signatures_per_relation)]
        signatures.append(pairs)

    instances = []
    for idx in range(cfg.num_instances):
        if rng.random() < cfg.none_fraction:
            relation = ontology.none_relation_id
            head_type = _draw_entity_type(rng, cfg, ontology, non_none_entities)
            tail_type = _draw_entity_type(rng, cfg, ontology, non_none_entities)
            trigger = np.empty(0, dtype=int)
        else:
            relation = int(rng.choice(non_none_relations))
            head_type, tail_type = signatures[relation][int(rng.integers(len(signatures[relation])))]
            n_trig = int(rng.integers(cfg.min_triggers, cfg.max_triggers + 1))
            trigger = rng.choice(trigger_pools[relation], size=n_trig)

        length = int(rng.integers(cfg.min_sentence_len, cfg.max_sentence_len + 1))
        head_len = int(rng.integers(1, 3))
        tail_len = int(rng.integers(1, 3))
        head_tokens = rng.choice(entity_pools[head_type], size=head_len)
        tail_tokens = rng.choice(entity_pools[tail_type], size=tail_len)
        swap = rng.random() < 0.2

        tokens, head_span, tail_span = _assemble_sentence(
            rng, distractors, head_tokens, trigger, tail_tokens, length, swap)

        head = Mention.new(head_span[0], head_span[1], ds_type=head_type, gold_type=head_type)
        tail = Mention.new(tail_span[0], tail_span[1], ds_type=tail_type, gold_type=tail_type)
        instances.append(Instance(id=idx, tokens=tokens, head=head, tail=tail,
                                  ds_relation=relation, current_relation=relation,
                                  gold_relation=relation))
    return Corpus.build(ontology, instances, cfg.vocab_size)


def _draw_entity_type(rng, cfg, ontology, non_none_entities):
    if rng.random() < cfg.none_entity_fraction:
        return ontology.none_entity_id
    return int(rng.choice(non_none_entities))


def _assemble_sentence(rng, distractors, head_tokens, trigger, tail_tokens, length, swap):
    """Lay out [gap, first mention, gap, trigger, gap, second mention, gap]."""
    first, second = (tail_tokens, head_tokens) if swap else (head_tokens, tail_tokens)
    core = len(first) + len(trigger) + len(second)
    slack = max(length - core, 4)
    # Four gap segments; the two inner ones must be nonempty to keep spans apart.
    cuts = np.sort(rng.integers(0, slack - 1, size=3))
    gaps = [int(cuts[0]), int(cuts[1] - cuts[0]) + 1, int(cuts[2] - cuts[1]) + 1,
            int(slack - 2 - cuts[2])]
    parts, spans = [], []
    pos = 0
    for gap, chunk in zip(gaps, (first, trigger, second, np.empty(0, dtype=int))):
        filler = rng.choice(distractors, size=gap)
        parts.append(filler)
        pos += gap
        if chunk is first or chunk is second:
            spans.append((pos, pos + len(chunk)))
        parts.append(chunk)
        pos += len(chunk)
    tokens = tuple(int(t) for t in np.concatenate(parts))
    first_span, second_span = spans
    if swap:
        return tokens, second_span, first_span
    return tokens, first_span, second_span


def inject_noise(corpus: Corpus, spec: NoiseSpec) -> Corpus:
    """Return a copy of the corpus with DS labels corrupted per the spec rates.

    Per instance: a non-None DS relation becomes None with probability
    ``fn_rate``; a None DS relation becomes a uniformly random non-None
    relation with probability ``fp_rate``; each mention's DS entity type is
    replaced by a uniformly random different type with probability
    ``entity_noise_rate``.  Gold labels are untouched, current labels are
    reset to the new DS labels, and confidences reset to 1.
    """
    if corpus.noise_applied:
        raise ValueError("noise was already injected into this corpus")
    rng = np.random.default_rng(spec.seed)
    ont = corpus.ontology
    non_none_relations = ont.non_none_relation_ids()
    all_entities = list(range(ont.num_entity_types))

    out = []
    for inst in corpus.instances:
        ds_rel = inst.ds_relation
        u = rng.random()
        if ds_rel != ont.none_relation_id:
            if u < spec.fn_rate:
                ds_rel = ont.none_relation_id
        elif u < spec.fp_rate:
            ds_rel = int(rng.choice(non_none_relations))

        mentions = []
        for m in (inst.head, inst.tail):
            ds_type = m.ds_type
            if rng.random() < spec.entity_noise_rate:
                choices = [t for t in all_entities if t != ds_type]
                ds_type = int(rng.choice(choices))
            mentions.append(replace(m, ds_type=ds_type, current_type=ds_type))

        out.append(replace(inst, head=mentions[0], tail=mentions[1],
                           ds_relation=ds_rel, current_relation=ds_rel,
                           confidence=1.0))
    return corpus.with_instances(out, noise_applied=True)


def split_corpus(corpus: Corpus, test_fraction: float, seed: int):
    """Split into disjoint (train, test) partitions, preserving instance ids."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie strictly inside (0, 1)")
    rng = np.random.default_rng(seed)
    n = len(corpus)
    n_test = max(1, int(round(test_fraction * n)))
    test_idx = set(rng.choice(n, size=n_test, replace=False).tolist())
    train = [inst for i, inst in enumerate(corpus.instances) if i not in test_idx]
    test = [inst for i, inst in enumerate(corpus.instances) if i in test_idx]
    return (corpus.with_instances(train), corpus.with_instances(test))


# --- serialization ---------------------------------------------------------
#
# Line-delimited JSON, UTF-8.  Line 1 is a header object; each further line is
# one instance.  Key order is fixed so identical corpora serialize to
# identical bytes.

FORMAT_VERSION = 1


def _mention_to_dict(m):
    return {"start": m.start, "end": m.end, "ds_type": m.ds_type,
            "current_type": m.current_type}


def save_corpus(corpus: Corpus, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        header = {
            "version": FORMAT_VERSION,
            "ontology": {
                "entity_types": list(corpus.ontology.entity_types),
                "relation_types": list(corpus.ontology.relation_types),
                "none_entity_id": corpus.ontology.none_entity_id,
                "none_relation_id": corpus.ontology.none_relation_id,
            },
            "vocab_size": corpus.vocab_size,
            "noise_applied": corpus.noise_applied,
        }
        fh.write(json.dumps(header) + "\n")
        for inst in corpus.instances:
            rec = {
                "id": inst.id,
                "tokens": list(inst.tokens),
                "head": _mention_to_dict(inst.head),
                "tail": _mention_to_dict(inst.tail),
                "ds_relation": inst.ds_relation,
                "current_relation": inst.current_relation,
                "confidence": inst.confidence,
                "gold": {
                    "relation": inst.gold_relation,
                    "head_type": inst.head.gold_type,
                    "tail_type": inst.tail.gold_type,
                },
            }
            fh.write(json.dumps(rec) + "\n")


def _require(obj, key, line_no, kind=None):
    if key not in obj:
        raise CorpusFormatError(line_no, key, "missing")
    val = obj[key]
    if kind is not None and not isinstance(val, kind):
        raise CorpusFormatError(line_no, key, f"expected {kind.__name__}, got {type(val).__name__}")
    return val


def _parse_mention(obj, key, line_no, gold_type):
    sub = _require(obj, key, line_no, dict)
    try:
        return Mention(start=_require(sub, "start", line_no, int),
                       end=_require(sub, "end", line_no, int),
                       ds_type=_require(sub, "ds_type", line_no, int),
                       current_type=_require(sub, "current_type", line_no, int),
                       gold_type=gold_type)
    except ValueError as exc:
        raise CorpusFormatError(line_no, key, str(exc)) from exc


def load_corpus(path) -> Corpus:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise CorpusFormatError(1, "header", "empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(1, "header", f"invalid JSON: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise CorpusFormatError(1, "version", f"unsupported version {header.get('version')!r}")
    ont_obj = _require(header, "ontology", 1, dict)
    ontology = TypeOntology(
        entity_types=tuple(_require(ont_obj, "entity_types", 1, list)),
        relation_types=tuple(_require(ont_obj, "relation_types", 1, list)),
        none_entity_id=_require(ont_obj, "none_entity_id", 1, int),
        none_relation_id=_require(ont_obj, "none_relation_id", 1, int),
    )
    vocab_size = _require(header, "vocab_size", 1, int)
    noise_applied = bool(header.get("noise_applied", False))

    instances = []
    for line_no, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(line_no, "record", f"invalid JSON: {exc}") from exc
        gold = obj.get("gold") or {}
        try:
            inst = Instance(
                id=_require(obj, "id", line_no, int),
                tokens=tuple(_require(obj, "tokens", line_no, list)),
                head=_parse_mention(obj, "head", line_no, gold.get("head_type")),
                tail=_parse_mention(obj, "tail", line_no, gold.get("tail_type")),
                ds_relation=_require(obj, "ds_relation", line_no, int),
                current_relation=_require(obj, "current_relation", line_no, int),
                confidence=float(_require(obj, "confidence", line_no, (int, float))),
                gold_relation=gold.get("relation"),
            )
        except CorpusFormatError:
            raise
        except (TypeError, ValueError) as exc:
            raise CorpusFormatError(line_no, "record", str(exc)) from exc
        instances.append(inst)

    try:
        return Corpus.build(ontology, instances, vocab_size, noise_applied=noise_applied)
    except ValueError as exc:
        # Re-locate invariant violations to the offending line for diagnosis.
        msg = str(exc)
        for line_no, inst in enumerate(instances, start=2):
            if f"instance {inst.id}:" in msg:
                field_name = "type id" if "type id" in msg or "relation id" in msg else "record"
                raise CorpusFormatError(line_no, field_name, msg) from exc
        raise
