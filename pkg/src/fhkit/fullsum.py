"""Flat-start full-sum (Baum-Welch) training of the simplified factored model.

Per utterance the three head posteriors are turned into prior-normalized,
scaled pseudo-emissions for every node of the transcript's training graph;
forward-backward gives node occupancies, which are marginalized into left,
center-state and right occupancies. Those act as soft targets for the
heads with the occupancies held fixed (generalized EM).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import model as fm
from .errors import DataError, NumericalError
from .graph import HMMGraph, min_path_length
from .optim import Nadam, add_grads, add_gradient_noise, l2_penalty, newbob_update

log = logging.getLogger(__name__)

POSTERIOR_FLOOR = 1e-20
PRIOR_FLOOR = 1e-12


@dataclass
class Scales:
    am: float
    left: float
    center: float
    right: float

    def as_tuple(self):
        return (self.am, self.left, self.center, self.right)


@dataclass
class ScaleSchedule:
    """Linear ramp of the AM and prior scales, clamped at the maxima."""

    am_start: float = 0.01
    prior_start: float = 0.1
    am_max: float = 0.3
    left_max: float = 0.3
    center_max: float = 0.7
    right_max: float = 0.4
    ramp_epochs: int = 10

    def scale_at_epoch(self, epoch: int) -> Scales:
        if epoch < 0:
            raise ValueError("epoch must be >= 0")
        frac = 1.0 if self.ramp_epochs <= 0 else min(epoch, self.ramp_epochs) / self.ramp_epochs

        def ramp(start, stop):
            return start + (stop - start) * frac

        return Scales(
            ramp(self.am_start, self.am_max),
            ramp(self.prior_start, self.left_max),
            ramp(self.prior_start, self.center_max),
            ramp(self.prior_start, self.right_max),
        )


def scale_at_epoch(schedule: ScaleSchedule, epoch: int) -> tuple:
    return schedule.scale_at_epoch(epoch).as_tuple()


def _normalize(v):
    v = np.maximum(np.asarray(v, dtype=np.float64), PRIOR_FLOOR)
    return v / v.sum()


@dataclass
class PriorState:
    prior_left: np.ndarray
    prior_center: np.ndarray
    prior_right: np.ndarray
    decay: float = 0.001

    def __post_init__(self):
        self.prior_left = _normalize(self.prior_left)
        self.prior_center = _normalize(self.prior_center)
        self.prior_right = _normalize(self.prior_right)

    @classmethod
    def uniform(cls, inv, decay=0.001):
        L, C = inv.num_contexts, inv.num_center_states
        return cls(np.full(L, 1.0 / L), np.full(C, 1.0 / C), np.full(L, 1.0 / L), decay)

    def head(self, name):
        return getattr(self, "prior_" + name)

    def to_dict(self):
        return {"left": self.prior_left.tolist(), "center": self.prior_center.tolist(),
                "right": self.prior_right.tolist(), "decay": self.decay}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["left"]), np.asarray(d["center"]), np.asarray(d["right"]),
                   d.get("decay", 0.001))


def update_prior_online(priors: PriorState, posts) -> PriorState:
    """Exponentially decaying average of the mean posterior of a batch.

    ``posts`` is a PosteriorBatch or a list of them (frames are pooled).
    """
    if isinstance(posts, fm.PosteriorBatch):
        posts = [posts]
    posts = list(posts)
    if not posts or sum(p.num_frames for p in posts) == 0:
        raise DataError("prior update needs a non-empty batch")
    lam = priors.decay
    new = {}
    for name in fm.HEADS:
        mean = np.concatenate([p.head(name) for p in posts])
        mean = np.exp(mean).mean(axis=0)
        new[name] = (1.0 - lam) * priors.head(name) + lam * mean
    return PriorState(new["left"], new["center"], new["right"], lam)


@dataclass
class Occupancies:
    gamma_left: np.ndarray
    gamma_center: np.ndarray
    gamma_right: np.ndarray
    log_likelihood: float = 0.0

    def head(self, name):
        return getattr(self, "gamma_" + name)


def pseudo_emissions(post: fm.PosteriorBatch, priors: PriorState, scales: Scales,
                     graph: HMMGraph) -> np.ndarray:
    """(T, nodes) log scores: ``am * sum log p_head - sum beta_head * log prior_head``."""
    l, c, r = graph.left_idx, graph.center_idx, graph.right_idx
    if (post.logp_left.shape[1] != priors.prior_left.size
            or post.logp_center.shape[1] != priors.prior_center.size):
        raise DataError("posterior and prior dimensions do not match")
    floor = np.log(POSTERIOR_FLOOR)
    lp = (np.maximum(post.logp_left[:, l], floor)
          + np.maximum(post.logp_center[:, c], floor)
          + np.maximum(post.logp_right[:, r], floor))
    prior_term = (scales.left * np.log(priors.prior_left[l])
                  + scales.center * np.log(priors.prior_center[c])
                  + scales.right * np.log(priors.prior_right[r]))
    return scales.am * lp - prior_term[None, :]


def logsumexp(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def forward_backward(graph: HMMGraph, emissions):
    """Node occupancies ``(T, N)`` and the total log-likelihood over all paths."""
    em = np.asarray(emissions, dtype=np.float64)
    T, N = em.shape
    if N != graph.num_nodes:
        raise DataError(f"emission matrix has {N} columns for a {graph.num_nodes}-node graph")
    if T < min_path_length(graph):
        raise DataError(f"infeasible: {T} frames < minimum path length {min_path_length(graph)}")
    trans = graph.transition_matrix()
    alpha = np.empty((T, N))
    beta = np.empty((T, N))
    alpha[0] = graph.initial_logprob + em[0]
    for t in range(1, T):
        alpha[t] = em[t] + logsumexp(alpha[t - 1][:, None] + trans, axis=0)
    beta[T - 1] = graph.final_logprob
    for t in range(T - 2, -1, -1):
        beta[t] = logsumexp(trans + (em[t + 1] + beta[t + 1])[None, :], axis=1)
    ll = float(logsumexp(alpha[T - 1] + graph.final_logprob, axis=0))
    if not np.isfinite(ll):
        raise NumericalError("all-paths probability underflowed to zero")
    occ = np.exp(alpha + beta - ll)
    return occ, ll


def marginalize_occupancies(graph: HMMGraph, node_occ, inventory=None, log_likelihood=0.0) -> Occupancies:
    """Sum node occupancies into per-head label occupancies."""
    node_occ = np.asarray(node_occ, dtype=np.float64)
    T = node_occ.shape[0]
    if inventory is not None:
        L, C = inventory.num_contexts, inventory.num_center_states
    else:
        L = int(max(graph.left_idx.max(), graph.right_idx.max())) + 1
        C = int(graph.center_idx.max()) + 1
    out = {}
    for name, idx, size in (("left", graph.left_idx, L), ("center", graph.center_idx, C),
                            ("right", graph.right_idx, L)):
        g = np.zeros((T, size))
        np.add.at(g.T, idx, node_occ.T)
        out[name] = g
    return Occupancies(out["left"], out["center"], out["right"], log_likelihood)


@dataclass
class UtteranceStats:
    loss: float = 0.0
    log_likelihood: float = 0.0
    frames: int = 0
    posterior_score: float = 0.0  # -sum gamma log p, unscaled
    skipped: int = 0


def fullsum_utterance(model, features, graph, priors, scales, train=False, rng=None):
    """Loss, gradients, posteriors and occupancies for one utterance."""
    post, cache = fm.forward(model, features, train=train, rng=rng)
    em = pseudo_emissions(post, priors, scales, graph)
    node_occ, ll = forward_backward(graph, em)
    occ = marginalize_occupancies(graph, node_occ, model.inventory, ll)
    head_grads = {}
    loss = 0.0
    score = 0.0
    for name in fm.HEADS:
        gamma = occ.head(name)
        logp = post.head(name)
        ce = -float(np.sum(gamma * logp))
        loss += scales.am * ce
        score += ce
        head_grads[name] = scales.am * (np.exp(logp) - gamma)
    grads = fm.backward(model, cache, head_grads)
    return loss, grads, post, occ, score


def fullsum_step(model, batch, priors: PriorState, scales: Scales, train=False, rng=None):
    """One mini-batch of full-sum training.

    ``batch`` is a sequence of ``(features, graph)`` pairs. Returns
    ``(loss, grads, updated_priors, stats)``; infeasible utterances are
    skipped and counted.
    """
    if not model.simplified_heads and model.context_order != "mono":
        raise DataError("full-sum training requires simplified heads")
    total = None
    stats = UtteranceStats()
    posts = []
    for features, graph in batch:
        if len(features) < min_path_length(graph):
            log.warning("skipping infeasible utterance (%d frames)", len(features))
            stats.skipped += 1
            continue
        loss, grads, post, occ, score = fullsum_utterance(
            model, features, graph, priors, scales, train=train, rng=rng)
        total = grads if total is None else add_grads(total, grads)
        stats.loss += loss
        stats.log_likelihood += occ.log_likelihood
        stats.frames += len(features)
        stats.posterior_score += score
        posts.append(post)
    if total is None:
        total = {k: np.zeros_like(v) for k, v in model.params.items()}
        return 0.0, total, priors, stats
    return stats.loss, total, update_prior_online(priors, posts), stats


@dataclass
class FullSumConfig:
    epochs: int = 30
    lr: float = 5e-4
    newbob_decay: float = float(np.sqrt(0.8))
    lr_min: float = 1e-6
    l2: float = 0.01
    grad_noise: float = 0.3
    batch_size: int = 8
    prior_decay: float = 0.001
    schedule: ScaleSchedule = field(default_factory=ScaleSchedule)
    seed: int = 0


def make_batches(lengths, batch_size, rng):
    """Group utterances of similar length, then shuffle the batch order."""
    order = np.argsort(np.asarray(lengths), kind="stable")
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


def train_fullsum(model, utterances, cfg: FullSumConfig, priors: PriorState | None = None,
                  on_epoch=None):
    """Flat-start training loop. ``utterances`` need ``features`` and ``graph``.

    Returns ``(model, priors, history)`` where history holds one dict per
    epoch (the training-log records).
    """
    rng = np.random.default_rng(cfg.seed)
    if priors is None:
        priors = PriorState.uniform(model.inventory, cfg.prior_decay)
    opt = Nadam(model.params, lr=cfg.lr)
    history = []
    criteria = []
    for epoch in range(cfg.epochs):
        scales = cfg.schedule.scale_at_epoch(epoch)
        epoch_stats = UtteranceStats()
        for idx in make_batches([len(u.features) for u in utterances], cfg.batch_size, rng):
            batch = [(utterances[i].features, utterances[i].graph) for i in idx]
            loss, grads, priors, stats = fullsum_step(model, batch, priors, scales, train=True, rng=rng)
            if stats.frames == 0:
                epoch_stats.skipped += stats.skipped
                continue
            l2_loss, l2_grads = l2_penalty(model.params, cfg.l2)
            grads = add_grads(grads, l2_grads)
            grads = add_gradient_noise(grads, cfg.grad_noise, rng=rng)
            opt.step(model.params, grads)
            epoch_stats.loss += loss + l2_loss
            epoch_stats.log_likelihood += stats.log_likelihood
            epoch_stats.frames += stats.frames
            epoch_stats.posterior_score += stats.posterior_score
            epoch_stats.skipped += stats.skipped
        frames = max(epoch_stats.frames, 1)
        criteria.append(epoch_stats.posterior_score / frames)
        record = {
            "epoch": epoch,
            "loss": epoch_stats.loss,
            "log_likelihood_per_frame": epoch_stats.log_likelihood / frames,
            "scales": list(scales.as_tuple()),
            "lr": opt.lr,
            "skipped": epoch_stats.skipped,
        }
        history.append(record)
        log.info("fs epoch %d loss %.3f ll/frame %.4f lr %.2e", epoch, record["loss"],
                 record["log_likelihood_per_frame"], opt.lr)
        if on_epoch is not None:
            on_epoch(record)
        opt.lr = newbob_update(criteria, opt.lr, cfg.newbob_decay, cfg.lr_min)
    return model, priors, history
