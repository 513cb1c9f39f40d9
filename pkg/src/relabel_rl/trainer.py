"""Orchestration: pre-training and the iterative re-training loop.

One run proceeds through fixed stages.  KG embeddings are trained on the
noised DS triples, both extractors are pre-trained on DS labels, a frozen
validation subset is carved out, and the confidence agents are pre-trained on
it with binary targets.  The main loop then repeats per epoch: reset the
extractors to their pre-trained weights, and for every batch let the
extractors predict, build the agent states, let the selected agents act,
apply confidence consensus to re-label the batch, train the extractors on the
damped losses, measure validation F1, convert it into rewards, and update the
agents (through the curriculum queue, plain PPO, or per-view thresholding
depending on the mode).  Best extractors are tracked by held-out test F1.

Training code reads instances only through their gold-free train views.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import consensus as consensus_mod
from .agents import AgentGroup, act_batch, apply_gradients, policy_backward, policy_forward
from .consensus import ConsensusOutcome, audit_entry, consensus, relabel, relabel_stats
from .corpus import Corpus
from .embeddings import TransEConfig, feature_matrices, transe_pretrain
from .extractors import (
    ExtractorHyper,
    ExtractorModel,
    LossConfig,
    assemble_inputs,
    clone_model,
    cosine_lr,
    save_model,
    sgd_step,
)
from .metrics import EvalReport, build_validation_set, evaluate_extractors
from .rl import (
    CurriculumQueue,
    Evaluation,
    PPOConfig,
    RewardConfig,
    Trajectory,
    compute_rewards,
    ppo_update,
)

__all__ = [
    "FeatureConfig",
    "AgentConfig",
    "QueueConfig",
    "PretrainConfig",
    "TrainConfig",
    "RunState",
    "TrainResult",
    "derive_seed",
    "pretrain_extractors",
    "pretrain_policies",
    "run_training",
    "run_pipeline",
    "run_baseline",
    "emit_report",
    "label_accuracy",
    "config_hash",
    "BATCH_PHASES",
]

MODES = ("curriculum", "joint", "separate")
BATCH_PHASES = ("predict", "states", "act", "consensus", "relabel",
                "train_extractors", "validation_f1", "rewards", "agent_update")


def derive_seed(seed, tag):
    """Stable 63-bit sub-seed for a named random stream."""
    digest = hashlib.blake2b(f"{seed}:{tag}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


@dataclass(frozen=True)
class FeatureConfig:
    d_s: int = 128
    d_m: int = 32
    salt: int = 17


@dataclass(frozen=True)
class AgentConfig:
    n_entity_agents: int = 2
    n_relation_agents: int = 2
    gru_hidden: int = 32
    concentration: float = 10.0


@dataclass(frozen=True)
class QueueConfig:
    capacity: int = 256
    threshold: float = 0.0


@dataclass(frozen=True)
class PretrainConfig:
    extractor_epochs: int = 8
    policy_epochs: int = 48
    validation_fraction: float = 0.2
    negatives_per_positive: int = 1
    # Confidence targets are smoothed toward 0.5 so pre-trained policies stay
    # calibrated instead of saturating; consensus then keeps divergent votes
    # at low combined confidence.
    target_smoothing: float = 0.25


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    mode: str = "curriculum"
    seed: int = 0
    hidden: int = 64
    # Per Algorithm-1 structure the trained extractors restart from the
    # pre-trained weights every epoch; label improvements still compound
    # because each epoch's re-labeling reads the previous epoch's converged
    # extractor.  Disabling the reset lets the trained weights carry over.
    reset_extractors_each_epoch: bool = True
    # Scale on the warm-restart peak of the per-epoch cosine schedule.
    retrain_lr_scale: float = 1.0
    # Total training passes over each epoch's re-labeled data: the batch loop
    # itself plus consolidation passes on the frozen labels, so the extractor
    # re-converges within the epoch the way a corpus-scale pass would.
    retrain_passes: int = 6
    # Policy updates step far more gently than extractor updates (the usual
    # PPO step size is orders below supervised rates); larger steps let the
    # near-zero-signal updates random-walk the calibrated policies apart.
    agent_lr_scale: float = 0.05
    features: FeatureConfig = field(default_factory=FeatureConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    agents: AgentConfig = field(default_factory=AgentConfig)
    queue: QueueConfig = field(default_factory=QueueConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    transe: TransEConfig = field(default_factory=TransEConfig)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.hidden > self.features.d_s:
            raise ValueError("type vectors must be no wider than the sentence part")


@dataclass
class RunState:
    best_entity_model: ExtractorModel
    best_relation_model: ExtractorModel
    best_entity_f1: float
    best_relation_f1: float
    epoch: int = 0
    history: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    entity_model: ExtractorModel       # best checkpoints
    relation_model: ExtractorModel
    run_state: RunState
    relabeled_corpus: Corpus
    agents: AgentGroup
    stats: consensus_mod.RelabelStats
    audit: list
    telemetry: list


class _Features:
    """Cached gold-free features and label arrays for one corpus."""

    def __init__(self, corpus, fc: FeatureConfig):
        views = [inst.train_view() for inst in corpus.instances]
        self.S, self.M = feature_matrices(views, fc.d_s, fc.d_m, fc.salt)
        self.Xr = assemble_inputs("relation", self.S, self.M)
        self.Xe = assemble_inputs("entity", self.S, self.M)
        self.ds_relation = np.array([v.ds_relation for v in views])
        self.ds_entity = np.array([[v.head_ds_type, v.tail_ds_type] for v in views])
        self.n = len(views)


def _hyper(cfg: TrainConfig, tag):
    fc = cfg.features
    return ExtractorHyper(hidden=cfg.hidden, d_s=fc.d_s, d_m=fc.d_m, salt=fc.salt,
                          seed=derive_seed(cfg.seed, tag))


def _entity_row_idx(batch_idx):
    return np.stack([2 * batch_idx, 2 * batch_idx + 1], axis=1).reshape(-1)


def pretrain_extractors(corpus, cfg: TrainConfig, feats: _Features | None = None):
    """Train both extractors on DS labels (confidence 1) as the environment."""
    feats = feats or _Features(corpus, cfg.features)
    ont = corpus.ontology
    ent = ExtractorModel.create("entity", ont.num_entity_types, _hyper(cfg, "entity-init"))
    rel = ExtractorModel.create("relation", ont.num_relation_types, _hyper(cfg, "relation-init"))

    epochs = cfg.pretrain.extractor_epochs
    if epochs == 0:
        return ent, rel
    nb = -(-feats.n // cfg.loss.batch_size)
    loss_cfg = replace(cfg.loss, schedule=max(1, epochs * nb))
    rng = np.random.default_rng(derive_seed(cfg.seed, "extractor-pretrain"))
    ye = feats.ds_entity.reshape(-1)
    step = 0
    for _ in range(epochs):
        order = rng.permutation(feats.n)
        for start in range(0, feats.n, cfg.loss.batch_size):
            idx = order[start:start + cfg.loss.batch_size]
            sgd_step(rel, feats.Xr[idx], feats.ds_relation[idx],
                     np.ones(len(idx)), loss_cfg, step)
            rows = _entity_row_idx(idx)
            sgd_step(ent, feats.Xe[rows], ye[rows], np.ones(len(rows)), loss_cfg, step)
            step += 1
    return ent, rel


def _predict_batch(ent_model, rel_model, feats: _Features, idx):
    """Argmax predictions for a batch: relation id plus head/tail entity ids."""
    _, rel_probs = rel_model.forward(feats.Xr[idx])
    rows = _entity_row_idx(idx)
    _, ent_probs = ent_model.forward(feats.Xe[rows])
    ent_pred = ent_probs.argmax(axis=1).reshape(-1, 2)
    return rel_probs.argmax(axis=1), ent_pred[:, 0], ent_pred[:, 1]


def _states(S_block, table, pred_ids, ds_ids):
    return np.hstack([S_block, (table[pred_ids] + table[ds_ids]) / 2.0])


def pretrain_policies(group: AgentGroup, validation_corpus, ent_model, rel_model,
                      cfg: TrainConfig):
    """Supervised warm start for every policy.

    Validation instances (DS label agreed with extraction by construction)
    give states with binary target 1; corrupting the DS type to a random
    wrong type gives target-0 negatives.  Binary cross entropy on the
    deterministic confidence output, batched SGD with the cosine schedule.
    """
    epochs = cfg.pretrain.policy_epochs
    if epochs == 0 or len(validation_corpus) == 0:
        return group
    rng = np.random.default_rng(derive_seed(cfg.seed, "policy-pretrain"))
    feats = _Features(validation_corpus, cfg.features)
    ont = validation_corpus.ontology
    all_idx = np.arange(feats.n)
    pred_rel, pred_head, pred_tail = _predict_batch(ent_model, rel_model, feats, all_idx)
    T_rel, T_ent = rel_model.type_vectors, ent_model.type_vectors
    assignment = group.assignment

    per_agent = {}

    def add(view, agent_idx, states, target):
        bucket = per_agent.setdefault((view, agent_idx), ([], []))
        bucket[0].append(states)
        bucket[1].append(target)

    pos_target = 1.0 - cfg.pretrain.target_smoothing
    neg_target = cfg.pretrain.target_smoothing
    n_neg = cfg.pretrain.negatives_per_positive
    # Relation corruptions draw from the wrong non-None relations only: a
    # corrupted-to-None state is indistinguishable from a genuine false
    # negative, which the agents should learn to rescue, not reject.
    rel_choices = [r for r in range(ont.num_relation_types)
                   if r != ont.none_relation_id]
    for i in range(feats.n):
        ds_r = feats.ds_relation[i]
        rel_state = _states(feats.S[i:i + 1], T_rel, pred_rel[i:i + 1],
                            np.array([ds_r]))[0]
        add("relation", assignment.relation[ds_r], rel_state, pos_target)
        for _ in range(n_neg):
            options = [r for r in rel_choices if r != ds_r]
            wrong = options[int(rng.integers(len(options)))]
            neg_state = _states(feats.S[i:i + 1], T_rel, pred_rel[i:i + 1],
                                np.array([wrong]))[0]
            add("relation", assignment.relation[int(wrong)], neg_state, neg_target)
        for slot, pred_t in ((0, pred_head[i]), (1, pred_tail[i])):
            ds_t = feats.ds_entity[i, slot]
            ent_state = _states(feats.S[i:i + 1], T_ent, np.array([pred_t]),
                                np.array([ds_t]))[0]
            add("entity", assignment.entity[ds_t], ent_state, pos_target)
            for _ in range(n_neg):
                wrong = (ds_t + 1 + rng.integers(ont.num_entity_types - 1)) % ont.num_entity_types
                neg_state = _states(feats.S[i:i + 1], T_ent, np.array([pred_t]),
                                    np.array([wrong]))[0]
                add("entity", assignment.entity[int(wrong)], neg_state, neg_target)

    batch = cfg.loss.batch_size
    for (view, agent_idx), (states, targets) in sorted(per_agent.items()):
        X = np.stack(states)
        y = np.asarray(targets)
        params = group.agent(view, agent_idx)
        nb = -(-len(y) // batch)
        schedule = max(1, epochs * nb)
        step = 0
        for _ in range(epochs):
            order = rng.permutation(len(y))
            for start in range(0, len(y), batch):
                sl = order[start:start + batch]
                fwd = policy_forward(params, X[sl])
                # BCE gradient w.r.t. the readout logit is (mean - target).
                grads = policy_backward(params, fwd, d_logit=fwd.mean - y[sl])
                lr = cosine_lr(step, schedule, cfg.loss.lr_min, cfg.loss.lr_max)
                apply_gradients(params, grads, lr, sign=-1.0)
                step += 1
    return group


def _separate_outcome(c_rel, c_head, c_tail):
    """Per-view thresholding used by the ablation without consensus."""
    votes = (c_rel, c_head, c_tail)
    positive = c_rel > 0.5
    return ConsensusOutcome(
        positive=positive,
        confidence=c_rel if positive else 1.0 - c_rel,
        mean_confidence=sum(votes) / 3.0,
        divergent=min(votes) < 0.5 < max(votes),
    )


def relabel_pass(corpus, feats: _Features, ent_model, rel_model, agents: AgentGroup,
                 cfg: TrainConfig):
    """Deterministically re-label the whole corpus with the given models.

    Evaluation-mode pass: actions are the policy means (no exploration), so
    the produced labels are a pure function of the DS labels, the extractor
    predictions, and the policies.  Returns (instances, outcomes by id).
    """
    ont = corpus.ontology
    none_rel = ont.none_relation_id
    ent_assign = np.array([agents.assignment.entity[t] for t in range(ont.num_entity_types)])
    rel_assign = np.array([agents.assignment.relation[t] for t in range(ont.num_relation_types)])
    all_idx = np.arange(feats.n)
    pred_rel, pred_head, pred_tail = _predict_batch(ent_model, rel_model, feats, all_idx)
    T_rel, T_ent = rel_model.type_vectors, ent_model.type_vectors
    confs = np.empty((feats.n, 3))
    slots = (("relation", rel_assign[feats.ds_relation],
              _states(feats.S, T_rel, pred_rel, feats.ds_relation), 0),
             ("entity", ent_assign[feats.ds_entity[:, 0]],
              _states(feats.S, T_ent, pred_head, feats.ds_entity[:, 0]), 1),
             ("entity", ent_assign[feats.ds_entity[:, 1]],
              _states(feats.S, T_ent, pred_tail, feats.ds_entity[:, 1]), 2))
    for view, owner, states, slot in slots:
        pool = agents.relation_agents if view == "relation" else agents.entity_agents
        for agent_idx in range(len(pool)):
            rows = np.flatnonzero(owner == agent_idx)
            if rows.size == 0:
                continue
            acts = act_batch(pool[agent_idx], states[rows], deterministic=True)
            confs[rows, slot] = acts.confidence

    instances, outcomes = [], {}
    for i, inst in enumerate(corpus.instances):
        if cfg.mode == "separate":
            out = _separate_outcome(*confs[i])
            c_head, c_tail = confs[i, 1], confs[i, 2]
            rel_label = int(pred_rel[i]) if out.positive else none_rel
            head_t = int(pred_head[i]) if c_head > 0.5 else int(inst.head.ds_type)
            tail_t = int(pred_tail[i]) if c_tail > 0.5 else int(inst.tail.ds_type)
            new = replace(inst,
                          head=replace(inst.head, current_type=head_t),
                          tail=replace(inst.tail, current_type=tail_t),
                          current_relation=rel_label,
                          confidence=out.confidence)
        else:
            out = consensus(*confs[i])
            new = relabel(inst, out, pred_rel[i], pred_head[i], pred_tail[i], none_rel)
        instances.append(new)
        outcomes[new.id] = out
    return instances, outcomes


def run_training(train_corpus, cfg: TrainConfig, *, test_corpus, entity_model,
                 relation_model, agents: AgentGroup, kg, validation_corpus,
                 trace=None) -> TrainResult:
    """The iterative re-training loop over pre-trained extractors and agents."""
    trace = trace or (lambda phase, batch: None)
    ont = train_corpus.ontology
    none_rel = ont.none_relation_id
    feats = _Features(train_corpus, cfg.features)
    val_feats = _Features(validation_corpus, cfg.features)
    test_feats = _Features(test_corpus, cfg.features)
    test_entity_gold = np.array([[inst.head.gold_type, inst.tail.gold_type]
                                 for inst in test_corpus.instances])
    test_relation_gold = [inst.gold_relation for inst in test_corpus.instances]

    rng_actions = np.random.default_rng(derive_seed(cfg.seed, "actions"))
    rng_order = np.random.default_rng(derive_seed(cfg.seed, "order"))

    working = list(train_corpus.instances)
    outcomes = {}

    def evaluate_test(ent, rel):
        return evaluate_extractors(ent, rel, test_feats.S, test_feats.M,
                                   test_entity_gold, test_relation_gold, none_rel)

    def evaluate_val(ent, rel):
        return evaluate_extractors(ent, rel, val_feats.S, val_feats.M,
                                   val_feats.ds_entity, val_feats.ds_relation, none_rel)

    init_report = evaluate_test(entity_model, relation_model)
    state = RunState(best_entity_model=clone_model(entity_model),
                     best_relation_model=clone_model(relation_model),
                     best_entity_f1=init_report.micro_f1,
                     best_relation_f1=init_report.f1,
                     history={"test_entity_micro": [], "test_relation_f1": [],
                              "val_entity_micro": [], "val_relation_f1": [],
                              "best_entity_f1": [], "best_relation_f1": [],
                              "relabel": [], "mean_consensus_confidence": []})

    queues = {}
    kl_coefs = {}
    agent_keys = [(view, idx) for view, idx, _ in agents.all_agents()]
    for key in agent_keys:
        queues[key] = CurriculumQueue(cfg.queue.capacity, cfg.queue.threshold)
        kl_coefs[key] = cfg.ppo.kl_init_coef
    telemetry = []

    nb = -(-feats.n // cfg.batch_size)
    total_batches = max(1, nb * cfg.epochs)
    retrain_lr_max = max(cfg.loss.lr_min, cfg.loss.lr_max * cfg.retrain_lr_scale)
    epoch_loss_cfg = replace(cfg.loss, lr_max=retrain_lr_max,
                             schedule=max(1, nb * cfg.retrain_passes))
    rng_consolidate = np.random.default_rng(derive_seed(cfg.seed, "consolidate"))
    ent_curr, rel_curr = entity_model, relation_model
    global_batch = 0
    ent_assign = np.array([agents.assignment.entity[t] for t in range(ont.num_entity_types)])
    rel_assign = np.array([agents.assignment.relation[t] for t in range(ont.num_relation_types)])

    # Re-labeling reads stationary predictions: within an epoch they come
    # from a frozen predictor, and across epochs the predictor advances to
    # the previous epoch's converged extractor.  At corpus scale a single
    # pass barely moves the extractor, so predictor and trainee coincide;
    # here the trainee moves far enough per epoch that letting re-labeling
    # chase it collapses the labels.
    ent_pred_model = clone_model(entity_model)
    rel_pred_model = clone_model(relation_model)

    for epoch in range(cfg.epochs):
        if cfg.reset_extractors_each_epoch or epoch == 0:
            ent_curr = clone_model(entity_model)
            rel_curr = clone_model(relation_model)
        if cfg.mode == "curriculum":
            order = np.arange(feats.n)
        else:
            order = rng_order.permutation(feats.n)
        extractor_step = 0
        epoch_rewards = {key: [] for key in agent_keys}
        epoch_kl = {key: [] for key in agent_keys}
        epoch_conf_ent = np.ones((feats.n, 2))
        consensus_confs = []

        for start in range(0, feats.n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            b = len(idx)

            trace("predict", global_batch)
            pred_rel, pred_head, pred_tail = _predict_batch(ent_pred_model, rel_pred_model,
                                                            feats, idx)

            trace("states", global_batch)
            T_rel, T_ent = rel_pred_model.type_vectors, ent_pred_model.type_vectors
            S_b = feats.S[idx]
            ds_rel = feats.ds_relation[idx]
            ds_head, ds_tail = feats.ds_entity[idx, 0], feats.ds_entity[idx, 1]
            rel_states = _states(S_b, T_rel, pred_rel, ds_rel)
            head_states = _states(S_b, T_ent, pred_head, ds_head)
            tail_states = _states(S_b, T_ent, pred_tail, ds_tail)

            trace("act", global_batch)
            rel_agent = rel_assign[ds_rel]
            head_agent = ent_assign[ds_head]
            tail_agent = ent_assign[ds_tail]
            evaluations = [None] * (3 * b)
            slots = (("relation", rel_agent, rel_states, 0),
                     ("entity", head_agent, head_states, 1),
                     ("entity", tail_agent, tail_states, 2))
            for view, owner, states, slot in slots:
                pool = (agents.relation_agents if view == "relation"
                        else agents.entity_agents)
                for agent_idx in range(len(pool)):
                    rows = np.flatnonzero(owner == agent_idx)
                    if rows.size == 0:
                        continue
                    acts = act_batch(pool[agent_idx], states[rows], rng=rng_actions)
                    for k, row in enumerate(rows):
                        evaluations[3 * row + slot] = Evaluation(
                            instance_id=int(working[idx[row]].id), view=view,
                            agent_index=agent_idx, state=states[row],
                            confidence=float(acts.confidence[k]),
                            log_prob=float(acts.log_prob[k]),
                            value_estimate=float(acts.value[k]),
                            alpha_old=float(acts.alpha[k]),
                            beta_old=float(acts.beta[k]))

            trace("consensus", global_batch)
            batch_outcomes = []
            for row in range(b):
                c_rel = evaluations[3 * row].confidence
                c_head = evaluations[3 * row + 1].confidence
                c_tail = evaluations[3 * row + 2].confidence
                if cfg.mode == "separate":
                    batch_outcomes.append(_separate_outcome(c_rel, c_head, c_tail))
                else:
                    batch_outcomes.append(consensus(c_rel, c_head, c_tail))

            trace("relabel", global_batch)
            conf_rel = np.empty(b)
            conf_ent = np.empty((b, 2))
            for row in range(b):
                inst = working[idx[row]]
                out = batch_outcomes[row]
                if cfg.mode == "separate":
                    c_head = evaluations[3 * row + 1].confidence
                    c_tail = evaluations[3 * row + 2].confidence
                    rel_label = int(pred_rel[row]) if out.positive else none_rel
                    head_t = int(pred_head[row]) if c_head > 0.5 else int(inst.head.ds_type)
                    tail_t = int(pred_tail[row]) if c_tail > 0.5 else int(inst.tail.ds_type)
                    new = replace(inst,
                                  head=replace(inst.head, current_type=head_t),
                                  tail=replace(inst.tail, current_type=tail_t),
                                  current_relation=rel_label,
                                  confidence=out.confidence)
                    conf_ent[row, 0] = c_head if c_head > 0.5 else 1.0 - c_head
                    conf_ent[row, 1] = c_tail if c_tail > 0.5 else 1.0 - c_tail
                else:
                    new = relabel(inst, out, pred_rel[row], pred_head[row],
                                  pred_tail[row], none_rel)
                    conf_ent[row, 0] = conf_ent[row, 1] = out.confidence
                conf_rel[row] = out.confidence
                working[idx[row]] = new
                outcomes[new.id] = out
                consensus_confs.append(out.confidence)
                for slot in range(3):
                    ev = evaluations[3 * row + slot]
                    ev.relation = int(pred_rel[row])
                    ev.head_type = int(pred_head[row])
                    ev.tail_type = int(pred_tail[row])
            epoch_conf_ent[idx] = conf_ent

            trace("train_extractors", global_batch)
            cur_rel_labels = np.array([working[i].current_relation for i in idx])
            cur_ent_labels = np.array([[working[i].head.current_type,
                                        working[i].tail.current_type] for i in idx])
            sgd_step(rel_curr, feats.Xr[idx], cur_rel_labels, conf_rel,
                     epoch_loss_cfg, extractor_step)
            rows = _entity_row_idx(idx)
            sgd_step(ent_curr, feats.Xe[rows], cur_ent_labels.reshape(-1),
                     conf_ent.reshape(-1), epoch_loss_cfg, extractor_step)
            extractor_step += 1

            trace("validation_f1", global_batch)
            val_report = evaluate_val(ent_curr, rel_curr)

            trace("rewards", global_batch)
            compute_rewards(evaluations, val_report, kg, cfg.reward, none_rel)

            trace("agent_update", global_batch)
            buffers = {key: [] for key in agent_keys}
            if cfg.mode == "curriculum":
                from .rl import curriculum_step
                for ev in evaluations:
                    key = (ev.view, ev.agent_index)
                    curriculum_step(queues[key], ev, ev.reward, buffers[key].append)
            else:
                for ev in evaluations:
                    buffers[(ev.view, ev.agent_index)].append(ev)
            agent_lr = cfg.agent_lr_scale * cosine_lr(global_batch, total_batches,
                                                      cfg.loss.lr_min, cfg.loss.lr_max)
            for key in agent_keys:
                buf = buffers[key]
                if not buf:
                    continue
                traj = Trajectory.from_evaluations(buf, cfg.reward)
                res = ppo_update(agents.agent(*key), traj, cfg.ppo, agent_lr,
                                 kl_coef=kl_coefs[key])
                kl_coefs[key] = res.kl_coef
                epoch_rewards[key].append(float(traj.rewards.mean()))
                epoch_kl[key].append(res.kl)
            global_batch += 1

        # Consolidation: re-converge the extractors on this epoch's frozen
        # re-labeled corpus before the epoch is evaluated.
        all_rel_labels = np.array([inst.current_relation for inst in working])
        all_ent_labels = np.array([[inst.head.current_type, inst.tail.current_type]
                                   for inst in working]).reshape(-1)
        all_conf = np.array([inst.confidence for inst in working])
        all_conf_ent = epoch_conf_ent.reshape(-1)
        for _ in range(max(0, cfg.retrain_passes - 1)):
            pass_order = rng_consolidate.permutation(feats.n)
            for start in range(0, feats.n, cfg.batch_size):
                idx = pass_order[start:start + cfg.batch_size]
                sgd_step(rel_curr, feats.Xr[idx], all_rel_labels[idx], all_conf[idx],
                         epoch_loss_cfg, extractor_step)
                rows = _entity_row_idx(idx)
                sgd_step(ent_curr, feats.Xe[rows], all_ent_labels[rows],
                         all_conf_ent[rows], epoch_loss_cfg, extractor_step)
                extractor_step += 1

        ent_pred_model = clone_model(ent_curr)
        rel_pred_model = clone_model(rel_curr)

        test_report = evaluate_test(ent_curr, rel_curr)
        if test_report.micro_f1 > state.best_entity_f1:
            state.best_entity_f1 = test_report.micro_f1
            state.best_entity_model = clone_model(ent_curr)
        if test_report.f1 > state.best_relation_f1:
            state.best_relation_f1 = test_report.f1
            state.best_relation_model = clone_model(rel_curr)
        state.epoch = epoch + 1

        snapshot = train_corpus.with_instances(working)
        divergent_ids = {i for i, out in outcomes.items() if out.divergent}
        stats = relabel_stats(train_corpus, snapshot, divergent_ids)
        state.history["test_entity_micro"].append(test_report.micro_f1)
        state.history["test_relation_f1"].append(test_report.f1)
        val_report = evaluate_val(ent_curr, rel_curr)
        state.history["val_entity_micro"].append(val_report.micro_f1)
        state.history["val_relation_f1"].append(val_report.f1)
        state.history["best_entity_f1"].append(state.best_entity_f1)
        state.history["best_relation_f1"].append(state.best_relation_f1)
        state.history["relabel"].append(stats.to_dict())
        state.history["mean_consensus_confidence"].append(
            float(np.mean(consensus_confs)) if consensus_confs else None)
        for key in agent_keys:
            telemetry.append({
                "epoch": epoch,
                "view": key[0],
                "agent": key[1],
                "mean_reward": (float(np.mean(epoch_rewards[key]))
                                if epoch_rewards[key] else None),
                "mean_kl": (float(np.mean(epoch_kl[key]))
                            if epoch_kl[key] else None),
                "kl_coef": kl_coefs[key],
                "queue_size": len(queues[key]),
            })

    # The shipped re-labeled corpus is the system's deterministic posterior:
    # best extractors plus final policies, evaluation-mode actions.
    if cfg.epochs > 0:
        final_instances, final_outcomes = relabel_pass(
            train_corpus, feats, state.best_entity_model,
            state.best_relation_model, agents, cfg)
    else:
        final_instances, final_outcomes = list(train_corpus.instances), {}
    relabeled = train_corpus.with_instances(final_instances)
    divergent_ids = {i for i, out in final_outcomes.items() if out.divergent}
    stats = relabel_stats(train_corpus, relabeled, divergent_ids)
    audit = [audit_entry(before, after, final_outcomes[after.id])
             for before, after in zip(train_corpus.instances, relabeled.instances)
             if after.id in final_outcomes
             and (after.current_relation != before.ds_relation
                  or after.head.current_type != before.head.ds_type
                  or after.tail.current_type != before.tail.ds_type)]
    return TrainResult(entity_model=state.best_entity_model,
                       relation_model=state.best_relation_model,
                       run_state=state, relabeled_corpus=relabeled, agents=agents,
                       stats=stats, audit=audit, telemetry=telemetry)


def run_pipeline(train_corpus, test_corpus, cfg: TrainConfig, run_dir=None,
                 config_echo=None, trace=None) -> TrainResult:
    """All stages end to end; optionally writes the run directory artifacts."""
    ont = train_corpus.ontology
    triples = [(inst.head.ds_type, inst.ds_relation, inst.tail.ds_type)
               for inst in train_corpus.instances
               if inst.ds_relation != ont.none_relation_id]
    transe_cfg = replace(cfg.transe, seed=derive_seed(cfg.seed, "transe"))
    kg = transe_pretrain(triples, ont.num_entity_types, ont.num_relation_types,
                         transe_cfg).embeddings

    feats = _Features(train_corpus, cfg.features)
    ent0, rel0 = pretrain_extractors(train_corpus, cfg, feats)
    validation = build_validation_set(train_corpus, ent0, rel0,
                                      fraction=cfg.pretrain.validation_fraction,
                                      seed=derive_seed(cfg.seed, "validation"))
    agents = AgentGroup.create(ont, cfg.agents.n_entity_agents,
                               cfg.agents.n_relation_agents,
                               d_in=cfg.features.d_s, hidden=cfg.agents.gru_hidden,
                               rng=np.random.default_rng(derive_seed(cfg.seed, "agent-init")),
                               concentration=cfg.agents.concentration)
    pretrain_policies(agents, validation, ent0, rel0, cfg)

    result = run_training(train_corpus, cfg, test_corpus=test_corpus,
                          entity_model=ent0, relation_model=rel0, agents=agents,
                          kg=kg, validation_corpus=validation, trace=trace)
    if run_dir is not None:
        emit_report(result, train_corpus, test_corpus, cfg, run_dir,
                    config_echo=config_echo)
    return result


def run_baseline(train_corpus, test_corpus, cfg: TrainConfig):
    """No-agent reference: the identical extractors trained on the noised DS
    labels for the same total epoch budget, best test F1 tracked per epoch."""
    feats = _Features(train_corpus, cfg.features)
    test_feats = _Features(test_corpus, cfg.features)
    test_entity_gold = np.array([[inst.head.gold_type, inst.tail.gold_type]
                                 for inst in test_corpus.instances])
    test_relation_gold = [inst.gold_relation for inst in test_corpus.instances]
    ont = train_corpus.ontology

    ent = ExtractorModel.create("entity", ont.num_entity_types, _hyper(cfg, "entity-init"))
    rel = ExtractorModel.create("relation", ont.num_relation_types, _hyper(cfg, "relation-init"))
    epochs = cfg.pretrain.extractor_epochs + cfg.epochs
    nb = -(-feats.n // cfg.loss.batch_size)
    loss_cfg = replace(cfg.loss, schedule=max(1, epochs * nb))
    rng = np.random.default_rng(derive_seed(cfg.seed, "extractor-pretrain"))
    ye = feats.ds_entity.reshape(-1)

    best = {"entity_micro_f1": 0.0, "relation_f1": 0.0}
    step = 0
    for _ in range(epochs):
        order = rng.permutation(feats.n)
        for start in range(0, feats.n, cfg.loss.batch_size):
            idx = order[start:start + cfg.loss.batch_size]
            sgd_step(rel, feats.Xr[idx], feats.ds_relation[idx],
                     np.ones(len(idx)), loss_cfg, step)
            rows = _entity_row_idx(idx)
            sgd_step(ent, feats.Xe[rows], ye[rows], np.ones(len(rows)), loss_cfg, step)
            step += 1
        report = evaluate_extractors(ent, rel, test_feats.S, test_feats.M,
                                     test_entity_gold, test_relation_gold,
                                     ont.none_relation_id)
        best["entity_micro_f1"] = max(best["entity_micro_f1"], report.micro_f1)
        best["relation_f1"] = max(best["relation_f1"], report.f1)
    return best


def _config_dict(cfg: TrainConfig):
    return dataclasses.asdict(cfg)


def config_hash(config_echo) -> str:
    return hashlib.sha256(
        json.dumps(config_echo, sort_keys=True).encode()).hexdigest()


def label_accuracy(corpus, current=True):
    """Fraction of relation labels matching the hidden gold labels."""
    agree = 0
    for inst in corpus.instances:
        label = inst.current_relation if current else inst.ds_relation
        agree += label == inst.gold_relation
    return agree / len(corpus)


def emit_report(result: TrainResult, train_corpus, test_corpus, cfg: TrainConfig,
                run_dir, config_echo=None):
    """Write report.json, the audit log, telemetry, and best checkpoints."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    echo = config_echo if config_echo is not None else _config_dict(cfg)

    state = result.run_state
    report = {
        "config": echo,
        "config_hash": config_hash(echo),
        "seed": cfg.seed,
        "mode": cfg.mode,
        "epochs_run": state.epoch,
        "final": {
            "best_entity_micro_f1": state.best_entity_f1,
            "best_relation_f1": state.best_relation_f1,
        },
        "labels": {
            "noised_relation_accuracy": label_accuracy(train_corpus, current=False),
            "relabeled_relation_accuracy": label_accuracy(result.relabeled_corpus),
        },
        "relabel": result.stats.to_dict(),
        "history": state.history,
    }
    (run_dir / "config.json").write_text(
        json.dumps(echo, sort_keys=True, indent=2) + "\n")
    (run_dir / "report.json").write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n")
    with (run_dir / "relabel_audit.jsonl").open("w") as fh:
        for entry in result.audit:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    with (run_dir / "rl_telemetry.jsonl").open("w") as fh:
        for entry in result.telemetry:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    ckpt = run_dir / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    save_model(result.entity_model, ckpt / "entity_best.bin")
    save_model(result.relation_model, ckpt / "relation_best.bin")
    from .agents import save_agents
    save_agents(result.agents, ckpt / "agents.bin",
                config_hash=bytes.fromhex(config_hash(echo)))
    return report
