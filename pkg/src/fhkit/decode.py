"""Viterbi forced alignment, factored decision rules and recognition."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import model as fm
from .alignment import AlignmentEntry, path_to_entry
from .errors import DataError, NumericalError
from .fullsum import PRIOR_FLOOR, POSTERIOR_FLOOR, PriorState
from .graph import DecodingGraph, HMMGraph, min_path_length


@dataclass
class DecisionRuleConfig:
    context_order: str = "mono"
    prior_left: float = 0.3
    prior_center: float = 0.7
    prior_right: float = 0.4
    lm_scale: float = 1.0
    am_scale: float = field(default=1.0, init=False)

    def __post_init__(self):
        if self.context_order not in fm.ORDERS:
            raise DataError(f"unknown context order {self.context_order!r}")
        if min(self.prior_left, self.prior_center, self.prior_right) < 0:
            raise DataError("prior scales must be >= 0")
        if self.lm_scale < 0:
            raise DataError("lm_scale must be >= 0")


def viterbi(graph: HMMGraph, scores, beam: float | None = None):
    """Best node path and its score. Ties go to the lower node id."""
    scores = np.asarray(scores, dtype=np.float64)
    T, N = scores.shape
    if N != graph.num_nodes:
        raise DataError(f"score matrix has {N} columns for a {graph.num_nodes}-node graph")
    if T < min_path_length(graph):
        raise DataError(f"infeasible: {T} frames < minimum path length {min_path_length(graph)}")
    trans = graph.transition_matrix()
    cols = np.arange(N)
    bp = np.zeros((T, N), dtype=np.int64)
    delta = graph.initial_logprob + scores[0]
    for t in range(1, T):
        if beam is not None:
            delta = np.where(delta >= delta.max() - beam, delta, -np.inf)
        cand = delta[:, None] + trans
        best = np.argmax(cand, axis=0)
        bp[t] = best
        delta = cand[best, cols] + scores[t]
    total = delta + graph.final_logprob
    end = int(np.argmax(total))
    best_score = float(total[end])
    if not np.isfinite(best_score):
        raise NumericalError("no finite-scoring path")
    path = np.empty(T, dtype=np.int64)
    path[-1] = end
    for t in range(T - 1, 0, -1):
        path[t - 1] = bp[t, path[t]]
    return path, best_score


def viterbi_align(graph: HMMGraph, frame_scores, inv=None, utt_id="", provenance="external"):
    """Forced alignment: ``(AlignmentEntry, best log score)``."""
    path, score = viterbi(graph, frame_scores)
    if inv is None:
        return AlignmentEntry(utt_id, path, provenance, nodes=path), score
    return path_to_entry(graph, inv, path, utt_id, provenance), score


def decision_rule_score(heads: fm.PosteriorBatch, priors: PriorState, cfg: DecisionRuleConfig, indices):
    """Log score of one state class from heads evaluated with its contexts.

    ``indices`` is a ``(left, center_state, right)`` triple; the return
    value has one entry per frame of ``heads``.
    """
    left, center, right = (int(v) for v in indices)
    floor = np.log(POSTERIOR_FLOOR)
    score = (np.maximum(heads.logp_center[:, center], floor)
             - cfg.prior_center * np.log(max(priors.prior_center[center], PRIOR_FLOOR)))
    if cfg.context_order in ("di", "tri"):
        score = score + (np.maximum(heads.logp_left[:, left], floor)
                         - cfg.prior_left * np.log(max(priors.prior_left[left], PRIOR_FLOOR)))
    if cfg.context_order == "tri":
        score = score + (np.maximum(heads.logp_right[:, right], floor)
                         - cfg.prior_right * np.log(max(priors.prior_right[right], PRIOR_FLOOR)))
    return score


def _check_order(model, cfg):
    if fm.ORDERS.index(cfg.context_order) > fm.ORDERS.index(model.context_order):
        raise DataError(
            f"context-order mismatch: {model.context_order} model cannot serve a {cfg.context_order} decision rule")


def node_scores(model, features, graph: HMMGraph, priors: PriorState, cfg: DecisionRuleConfig):
    """(T, N) decision-rule scores for every node of ``graph``.

    Dependent heads are evaluated once per distinct context present in the
    graph, sharing one encoder pass.
    """
    _check_order(model, cfg)
    if graph.indices.size and graph.center_idx.max() >= model.num_center:
        raise DataError("graph/model inventory mismatch")
    h, _ = fm.encode(model, features)
    T = h.shape[0]
    out = np.empty((T, graph.num_nodes))
    idx = graph.indices
    # group nodes by the contexts the model's heads are wired to consume
    if model.right_uses_context:
        pairs = np.unique(idx[:, :2], axis=0)
        groups = {(int(l), int(c)): np.flatnonzero((idx[:, 0] == l) & (idx[:, 1] == c))
                  for l, c in pairs}
    elif model.center_uses_left:
        groups = {(int(l),): np.flatnonzero(idx[:, 0] == l) for l in np.unique(idx[:, 0])}
    else:
        groups = {(): np.arange(graph.num_nodes)}
    for key, nodes in groups.items():
        left = key[0] if len(key) > 0 else None
        center = key[1] if len(key) > 1 else None
        heads = fm.heads_logprobs(model, h, left, center)
        for n in nodes:
            out[:, n] = decision_rule_score(heads, priors, cfg, idx[n])
    return out


def forced_align(model, features, graph, priors, cfg, inv=None, utt_id="", provenance="external"):
    scores = node_scores(model, features, graph, priors, cfg)
    return viterbi_align(graph, scores, inv if inv is not None else model.inventory, utt_id, provenance)


def estimate_priors_by_averaging(model, subset, decay=0.001) -> PriorState:
    """Frame-average of head posteriors over ``subset``.

    ``subset`` yields ``(features, factored_labels_or_None)``; dependent heads
    are fed the aligned contexts.
    """
    sums = None
    frames = 0
    for features, labels in subset:
        ctx = None
        if model.needs_context:
            if labels is None:
                raise DataError("context-dependent prior estimation needs aligned contexts")
            labels = np.asarray(labels)
            ctx = (labels[:, 0], labels[:, 1])
        post, _ = fm.forward(model, features, ctx)
        part = [np.exp(post.head(n)).sum(axis=0) for n in fm.HEADS]
        sums = part if sums is None else [a + b for a, b in zip(sums, part)]
        frames += post.num_frames
    if not frames:
        raise DataError("prior estimation needs a non-empty subset")
    return PriorState(*(s / frames for s in sums), decay=decay)


class DecodeResult(NamedTuple):
    words: list
    score: float
    path: np.ndarray | None = None


def path_words(graph: DecodingGraph, path) -> list[str]:
    words = []
    prev = -1
    for node in path:
        node = int(node)
        if node != prev and graph.word_entry[node] >= 0:
            words.append(graph.vocab[graph.word_entry[node]])
        prev = node
    return words


def decode(model, features, dgraph: DecodingGraph, priors: PriorState, cfg: DecisionRuleConfig,
           beam: float | None = None) -> DecodeResult:
    """Exact (or beam-pruned) Viterbi decoding over the composed graph."""
    scores = node_scores(model, features, dgraph, priors, cfg)
    path, score = viterbi(dgraph, scores, beam=beam)
    return DecodeResult(path_words(dgraph, path), score, path)


class WerResult(NamedTuple):
    wer: float
    substitutions: int
    deletions: int
    insertions: int
    ref_words: int = 0
    degenerate: bool = False

    @property
    def errors(self):
        return self.substitutions + self.deletions + self.insertions


def score_wer(hyp, ref) -> WerResult:
    """Levenshtein word alignment with unit costs."""
    hyp, ref = list(hyp), list(ref)
    n, m = len(ref), len(hyp)
    # cost, subs, dels, ins
    d = np.zeros((n + 1, m + 1, 4), dtype=np.int64)
    d[:, 0, 0] = d[:, 0, 2] = np.arange(n + 1)
    d[0, :, 0] = d[0, :, 3] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1, j - 1].copy()
            if ref[i - 1] != hyp[j - 1]:
                sub[0] += 1
                sub[1] += 1
            dele = d[i - 1, j].copy()
            dele[0] += 1
            dele[2] += 1
            ins = d[i, j - 1].copy()
            ins[0] += 1
            ins[3] += 1
            d[i, j] = min((sub, dele, ins), key=lambda c: c[0])
    _, s, dl, ins = (int(v) for v in d[n, m])
    return WerResult(100.0 * (s + dl + ins) / max(1, n), s, dl, ins, n, n == 0 and m > 0)


def corpus_wer(pairs) -> WerResult:
    """Pooled WER over ``(hyp, ref)`` pairs."""
    s = dl = ins = n = 0
    for hyp, ref in pairs:
        r = score_wer(hyp, ref)
        s, dl, ins, n = s + r.substitutions, dl + r.deletions, ins + r.insertions, n + r.ref_words
    return WerResult(100.0 * (s + dl + ins) / max(1, n), s, dl, ins, n, n == 0 and (s + dl + ins) > 0)


def grid_search_prior_scales(evaluate, grid=(0.0, 0.3, 0.5, 0.7, 1.0), base: DecisionRuleConfig | None = None):
    """Try every prior-scale triple from ``grid``; ``evaluate(cfg)`` returns a WER.

    Returns ``(best_cfg, best_wer)``; ties keep the first triple tried.
    """
    base = base or DecisionRuleConfig()
    best = None
    for bl in grid:
        for bc in grid:
            for br in grid:
                cfg = DecisionRuleConfig(base.context_order, bl, bc, br, base.lm_scale)
                w = evaluate(cfg)
                if best is None or w < best[1]:
                    best = (cfg, w)
    return best
