"""Frame-wise cross-entropy training from fixed alignments, and staged plans.

Dependent heads are teacher-forced: the left and center-state context
inputs come from the alignment, not from the model's own predictions.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as fm
from .decode import DecisionRuleConfig, estimate_priors_by_averaging, forced_align
from .errors import DataError
from .optim import Nadam, add_grads, add_gradient_noise, l2_penalty, newbob_update

log = logging.getLogger(__name__)


@dataclass
class CEHyper:
    chunk_len: int = 128
    chunk_overlap: float = 0.5
    lr_init: float = 1e-3
    newbob_decay: float = 0.9
    lr_min: float = 2e-5
    l2: float = 0.01
    grad_noise_var: float = 0.1
    focal_gamma: float = 2.0
    batch_size: int = 8
    epochs: int = 5
    heldout_fraction: float = 0.05

    def __post_init__(self):
        if self.chunk_len < 1 or self.batch_size < 1:
            raise DataError("chunk_len and batch_size must be positive")
        if not 0.0 <= self.chunk_overlap < 1.0:
            raise DataError("chunk_overlap must be in [0, 1)")
        if self.lr_init <= 0 or self.lr_min <= 0 or not 0 < self.newbob_decay <= 1:
            raise DataError("invalid learning-rate settings")


def chunk_sequence(T: int, length=128, overlap=0.5) -> list[tuple[int, int]]:
    """Overlapping ``(start, length)`` windows covering ``[0, T)``."""
    if T < 1:
        raise DataError("sequence must have at least one frame")
    stride = max(1, int(round(length * (1.0 - overlap))))
    chunks = []
    start = 0
    while True:
        chunks.append((start, min(length, T - start)))
        if start + length >= T:
            break
        start += stride
    return chunks


def focal_loss(logp, targets, gamma):
    """Focal cross-entropy summed over frames, and its gradient w.r.t. the logits."""
    T = logp.shape[0]
    rows = np.arange(T)
    lp_t = logp[rows, targets]
    p_t = np.exp(lp_t)
    one_minus = np.maximum(1.0 - p_t, 0.0)
    loss = -float(np.sum(one_minus ** gamma * lp_t))
    if gamma == 0:
        coeff = -np.ones(T)
    else:
        safe = np.where(one_minus > 0, one_minus, 1.0)
        coeff = np.where(one_minus > 0, gamma * safe ** (gamma - 1) * p_t * lp_t, 0.0) - one_minus ** gamma
    grad = -np.exp(logp) * coeff[:, None]
    grad[rows, targets] += coeff
    return loss, grad


def ce_utterance(model, features, labels, gamma, train=False, rng=None):
    """Focal CE of all three heads for one chunk; ``labels`` is (T, 3) factored."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 2 or labels.shape != (len(features), 3):
        raise DataError("labels must be a (T, 3) array matching the features")
    if (labels[:, 0].max() >= model.num_left or labels[:, 2].max() >= model.num_left
            or labels[:, 1].max() >= model.num_center or labels.min() < 0):
        raise DataError("label/inventory mismatch")
    post, cache = fm.forward(model, features, (labels[:, 0], labels[:, 1]), train=train, rng=rng)
    total = 0.0
    head_grads = {}
    for k, name in enumerate(fm.HEADS):
        loss, g = focal_loss(post.head(name), labels[:, k], gamma)
        total += loss
        head_grads[name] = g
    return total, fm.backward(model, cache, head_grads), post


def ce_step(model, batch, hyper: CEHyper, train=False, rng=None):
    """Focal CE over a batch of ``(features, factored_labels)`` chunks plus L2.

    Returns ``(loss, grads)``.
    """
    total = 0.0
    grads = None
    for features, labels in batch:
        loss, g, _ = ce_utterance(model, features, labels, hyper.focal_gamma, train, rng)
        total += loss
        grads = g if grads is None else add_grads(grads, g)
    if grads is None:
        grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    l2_loss, l2_grads = l2_penalty(model.params, hyper.l2)
    return total + l2_loss, add_grads(grads, l2_grads)


def split_heldout(ids, fraction=0.05, seed=0) -> set:
    """Fixed seeded subset of utterance ids (at least one when ``fraction > 0``)."""
    ids = sorted(ids)
    if fraction <= 0 or len(ids) < 2:
        return set()
    n = max(1, int(round(fraction * len(ids))))
    rng = np.random.default_rng(seed)
    return {ids[i] for i in rng.choice(len(ids), size=n, replace=False)}


def frame_accuracy_center(model, utterances, labels_by_id) -> float:
    """Center-state argmax accuracy with teacher-forced contexts."""
    hits = total = 0
    for u in utterances:
        lab = labels_by_id[u.id]
        post, _ = fm.forward(model, u.features, (lab[:, 0], lab[:, 1]))
        hits += int(np.count_nonzero(post.logp_center.argmax(axis=1) == lab[:, 1]))
        total += len(lab)
    return hits / total if total else 0.0


def make_chunks(utterances, labels_by_id, hyper: CEHyper):
    out = []
    for u in utterances:
        lab = labels_by_id[u.id]
        if len(lab) != len(u.features):
            raise DataError(f"alignment length mismatch for {u.id}")
        for start, n in chunk_sequence(len(u.features), hyper.chunk_len, hyper.chunk_overlap):
            out.append((u.features[start:start + n], lab[start:start + n]))
    return out


def train_ce(model, utterances, alignments, hyper: CEHyper, seed=0, heldout_ids=None, on_epoch=None):
    """CE training from fixed alignments with Newbob on held-out frame error.

    ``alignments`` maps utterance id to an AlignmentEntry. Returns the
    per-epoch history.
    """
    inv = model.inventory
    labels_by_id = {uid: e.factored(inv) for uid, e in alignments.items()}
    if heldout_ids is None:
        heldout_ids = split_heldout([u.id for u in utterances], hyper.heldout_fraction, seed)
    train = [u for u in utterances if u.id not in heldout_ids]
    heldout = [u for u in utterances if u.id in heldout_ids]
    chunks = make_chunks(train, labels_by_id, hyper)
    rng = np.random.default_rng(seed)
    opt = Nadam(model.params, lr=hyper.lr_init)
    history, criteria = [], []
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(chunks))
        epoch_loss = 0.0
        frames = 0
        for i in range(0, len(order), hyper.batch_size):
            batch = [chunks[j] for j in order[i:i + hyper.batch_size]]
            loss, grads = ce_step(model, batch, hyper, train=True, rng=rng)
            grads = add_gradient_noise(grads, hyper.grad_noise_var, rng=rng)
            opt.step(model.params, grads)
            epoch_loss += loss
            frames += sum(len(f) for f, _ in batch)
        acc = frame_accuracy_center(model, heldout, labels_by_id) if heldout else float("nan")
        criteria.append(1.0 - acc if heldout else epoch_loss / max(frames, 1))
        record = {"epoch": epoch, "loss": epoch_loss, "frames": frames,
                  "heldout_frame_accuracy": acc, "lr": opt.lr}
        history.append(record)
        log.info("ce %s epoch %d loss %.3f heldout acc %.4f lr %.2e", model.context_order, epoch,
                 epoch_loss, acc, opt.lr)
        if on_epoch is not None:
            on_epoch(record)
        opt.lr = newbob_update(criteria, opt.lr, hyper.newbob_decay, hyper.lr_min)
    return history


# -- staged training ----------------------------------------------------------

@dataclass
class Stage:
    context_order: str
    epochs: int
    alignment: str = "latest"  # "initial" | "latest"
    realign_after: bool = False

    def __post_init__(self):
        if self.context_order not in fm.ORDERS:
            raise DataError(f"unknown context order {self.context_order!r}")
        if self.alignment not in ("initial", "latest"):
            raise DataError("stage alignment must be 'initial' or 'latest'")
        if self.epochs < 0:
            raise DataError("epochs must be >= 0")


@dataclass
class StagePlan:
    stages: list = field(default_factory=list)

    def __post_init__(self):
        self.stages = [s if isinstance(s, Stage) else Stage(**s) for s in self.stages]
        if not self.stages:
            raise DataError("stage plan is empty")
        orders = [fm.ORDERS.index(s.context_order) for s in self.stages]
        for a, b in zip(orders[:-1], orders[1:]):
            if b < a or b > a + 1:
                raise DataError("stage plan context orders must be non-decreasing in adjacent steps")

    @classmethod
    def from_dict(cls, d):
        return cls(d["stages"] if isinstance(d, dict) else d)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self):
        return {"stages": [vars(s).copy() for s in self.stages]}


@dataclass
class StageResult:
    model: fm.FactoredModel
    priors: object
    alignments: dict
    lineage: list
    histories: list


def realign(model, utterances, priors, cfg: DecisionRuleConfig, provenance):
    out = {}
    for u in utterances:
        entry, _ = forced_align(model, u.features, u.graph, priors, cfg, utt_id=u.id, provenance=provenance)
        out[u.id] = entry
    return out


def prior_subset(utterances, alignments, inv, fraction, seed):
    """Seeded subset of ``(features, factored labels)`` for prior averaging."""
    n = max(1, int(round(fraction * len(utterances))))
    rng = np.random.default_rng(seed)
    idx = sorted(rng.choice(len(utterances), size=min(n, len(utterances)), replace=False))
    return [(utterances[i].features, alignments[utterances[i].id].factored(inv)) for i in idx]


def run_stage_plan(plan: StagePlan, utterances, initial_alignments: dict, inventory,
                   encoder: fm.EncoderConfig | None, hyper: CEHyper, decision: DecisionRuleConfig | None = None, seed=0,
                   model=None, prior_fraction=0.1, on_epoch=None) -> StageResult:
    """Run every stage: grow the model if needed, reset LR, train, optionally realign.

    ``decision`` supplies the prior scales used for realignment (its
    context order is replaced by the stage's order).
    """
    if not initial_alignments:
        raise DataError("first stage needs an alignment")
    missing = [u.id for u in utterances if u.id not in initial_alignments]
    if missing:
        raise DataError(f"missing alignment for {len(missing)} utterances, e.g. {missing[0]}")
    decision = decision or DecisionRuleConfig()
    initial_prov = next(iter(initial_alignments.values())).provenance
    latest = dict(initial_alignments)
    latest_prov = initial_prov
    lineage, histories = [], []
    priors = None
    # one held-out set for the whole plan so no stage evaluates on data an earlier stage saw
    heldout_ids = split_heldout([u.id for u in utterances], hyper.heldout_fraction, seed)
    for k, stage in enumerate(plan.stages):
        stage_seed = seed + 1000 * (k + 1)
        if model is None:
            if encoder is None:
                raise DataError("need an encoder config or an initial model")
            model = fm.init_model(inventory, encoder, stage.context_order, seed=stage_seed)
            fm.set_feature_normalization(model, [u.features for u in utterances])
        elif model.context_order != stage.context_order:
            model = fm.init_from_previous_stage(model, stage.context_order, seed=stage_seed)
        elif model.simplified_heads:
            model.simplified_heads = False
        align = initial_alignments if stage.alignment == "initial" else latest
        used = initial_prov if stage.alignment == "initial" else latest_prov
        stage_hyper = replace(hyper, epochs=stage.epochs)
        hist = train_ce(model, utterances, align, stage_hyper, seed=stage_seed, heldout_ids=heldout_ids,
                        on_epoch=on_epoch)
        histories.append(hist)
        record = {"stage": k, "context_order": stage.context_order, "epochs": stage.epochs,
                  "alignment": used}
        # priors for realignment/decoding: averaged over a seeded training subset
        priors = estimate_priors_by_averaging(
            model, prior_subset(utterances, align, model.inventory, prior_fraction, stage_seed))
        if stage.realign_after:
            cfg = DecisionRuleConfig(stage.context_order, decision.prior_left, decision.prior_center,
                                     decision.prior_right, decision.lm_scale)
            latest_prov = f"{stage.context_order}-falign"
            latest = realign(model, utterances, priors, cfg, latest_prov)
            record["realigned_to"] = latest_prov
        lineage.append(record)
    return StageResult(model, priors, latest, lineage, histories)

