"""Lexicon, bigram LM, and HMM graph compilation.

Graphs are small explicit lattices of emitting states. Node ids are in
topological order: apart from self-loops, every edge goes from a lower to a
higher id. Each node carries its triphone :class:`StateClass` and the
factored label triple the network heads are indexed by.

Transition bookkeeping: a node keeps ``loop`` on its self-loop, and its
``forward`` mass is split evenly over its branches. An exit from a final
node counts as one branch but is not scored.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .inventory import (
    STATES_PER_PHONE,
    FactoredIndices,
    PhonemeInventory,
    StateClass,
    factored_indices,
)

SENT_BEGIN = "<s>"
SENT_END = "</s>"


class Lexicon:
    """Word -> pronunciations. Only the first pronunciation is ever used."""

    def __init__(self, prons: dict, inv: PhonemeInventory):
        if not prons:
            raise DataError("lexicon is empty")
        self.inventory = inv
        self.prons = {}
        for word, variants in prons.items():
            if not variants:
                raise DataError(f"word {word!r} has no pronunciation")
            checked = []
            for pron in variants:
                if not pron:
                    raise DataError(f"word {word!r} has an empty pronunciation")
                for p in pron:
                    if p not in inv:
                        raise DataError(f"unknown phoneme {p!r} in word {word!r}")
                checked.append(tuple(pron))
            self.prons[word] = checked

    def __contains__(self, word):
        return word in self.prons

    def __len__(self):
        return len(self.prons)

    @property
    def words(self) -> list[str]:
        return list(self.prons)

    def pronunciation(self, word: str) -> tuple[str, ...]:
        try:
            return self.prons[word][0]
        except KeyError:
            raise DataError(f"out-of-vocabulary word {word!r}") from None

    def to_dict(self) -> dict:
        return {w: [list(p) for p in v] for w, v in self.prons.items()}


def compile_lexicon(source, inv: PhonemeInventory) -> Lexicon:
    """Load a lexicon from a JSON file path, file object or already-parsed dict."""
    if isinstance(source, dict):
        data = source
    elif hasattr(source, "read"):
        data = json.load(source)
    else:
        with open(source) as f:
            data = json.load(f)
    if not isinstance(data, dict):
        raise DataError("lexicon must be a JSON object")
    return Lexicon(data, inv)


@dataclass(frozen=True)
class Topology:
    loop_logprob: float = math.log(0.5)
    forward_logprob: float = math.log(0.5)
    silence_loop_logprob: float = math.log(0.5)
    silence_forward_logprob: float = math.log(0.5)
    allow_optional_silence: bool = True

    def __post_init__(self):
        for loop, fwd in ((self.loop_logprob, self.forward_logprob),
                          (self.silence_loop_logprob, self.silence_forward_logprob)):
            if loop > 0 or fwd > 0:
                raise DataError("transition log-probabilities must be <= 0")
            if abs(math.exp(loop) + math.exp(fwd) - 1.0) > 1e-12:
                raise DataError("loop and forward probabilities must sum to 1")

    @classmethod
    def from_loop_probs(cls, loop=0.5, silence_loop=0.5, allow_optional_silence=True):
        def lg(p):
            return math.log(p) if p > 0 else -math.inf
        return cls(lg(loop), lg(1.0 - loop), lg(silence_loop), lg(1.0 - silence_loop),
                   allow_optional_silence)

    @classmethod
    def from_dict(cls, d):
        try:
            return cls.from_loop_probs(d["loop_prob"], d["silence_loop_prob"],
                                       d.get("allow_optional_silence", True))
        except (KeyError, TypeError) as e:
            raise DataError(f"malformed topology: {e}") from None

    def to_dict(self):
        return {
            "loop_prob": math.exp(self.loop_logprob),
            "silence_loop_prob": math.exp(self.silence_loop_logprob),
            "allow_optional_silence": self.allow_optional_silence,
        }


@dataclass
class HMMGraph:
    """Lattice of emitting states with log-domain transitions.

    ``initial_logprob``/``final_logprob`` are ``-inf`` outside the start and
    final sets. ``exit_logprob`` only records the (unscored) exit share of a
    final node for bookkeeping.
    """

    classes: list
    indices: np.ndarray  # (N, 3) int: left, center-state, right
    edges: list  # (src, dst, logprob, word-or-None); includes self-loops
    initial_logprob: np.ndarray
    final_logprob: np.ndarray
    exit_logprob: np.ndarray
    words: list = field(default_factory=list)  # word of each node, None for silence
    _trans: np.ndarray = field(default=None, init=False, repr=False)

    @property
    def num_nodes(self) -> int:
        return len(self.classes)

    @property
    def start_set(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(np.isfinite(self.initial_logprob))]

    @property
    def final_set(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(np.isfinite(self.final_logprob))]

    @property
    def left_idx(self):
        return self.indices[:, 0]

    @property
    def center_idx(self):
        return self.indices[:, 1]

    @property
    def right_idx(self):
        return self.indices[:, 2]

    def transition_matrix(self) -> np.ndarray:
        """Dense (N, N) log transition matrix, ``-inf`` where no edge exists."""
        if self._trans is None:
            n = self.num_nodes
            trans = np.full((n, n), -np.inf)
            for src, dst, lp, _ in self.edges:
                trans[src, dst] = np.logaddexp(trans[src, dst], lp)
            self._trans = trans
        return self._trans

    def successors(self, node: int) -> list[int]:
        return [d for s, d, _, _ in self.edges if s == node and d != node]

    def to_dict(self) -> dict:
        def num(x):
            return None if not np.isfinite(x) else float(x)
        return {
            "nodes": [
                {"id": i, "class": list(c), "indices": [int(v) for v in self.indices[i]],
                 "word": self.words[i] if self.words else None,
                 "initial": num(self.initial_logprob[i]), "final": num(self.final_logprob[i])}
                for i, c in enumerate(self.classes)
            ],
            "edges": [[s, d, num(lp), w] for s, d, lp, w in self.edges],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


class TrainingGraph(HMMGraph):
    pass


class DecodingGraph(HMMGraph):
    def __init__(self, *args, vocab=(), lm_scale=1.0, word_entry=None, **kw):
        super().__init__(*args, **kw)
        self.vocab = list(vocab)
        self.lm_scale = lm_scale
        # word_entry[j] = vocab id when entering node j from another node emits a word
        self.word_entry = word_entry


class _Builder:
    def __init__(self, inv: PhonemeInventory):
        self.inv = inv
        self.classes = []
        self.indices = []
        self.words = []
        self.kind = []  # "phone" | "sil"
        self.edges = []

    def add_node(self, sc: StateClass, word, kind):
        self.classes.append(sc)
        self.indices.append(factored_indices(self.inv, sc))
        self.words.append(word)
        self.kind.append(kind)
        return len(self.classes) - 1

    def add_word_chain(self, word, pron):
        b = self.inv.boundary_symbol
        ids = []
        for j, phone in enumerate(pron):
            left = pron[j - 1] if j > 0 else b
            right = pron[j + 1] if j + 1 < len(pron) else b
            for i in range(STATES_PER_PHONE):
                ids.append(self.add_node(StateClass(left, phone, i, right), word, "phone"))
        return ids

    def add_silence(self):
        return self.add_node(self.inv.silence_class(), None, "sil")


def _split(logprob: float, branches: int) -> float:
    return logprob - math.log(branches)


def build_training_graph(lex: Lexicon, inv: PhonemeInventory, transcript, topo: Topology) -> TrainingGraph:
    transcript = list(transcript)
    if not transcript:
        raise DataError("empty transcript")
    chains = [lex.pronunciation(w) for w in transcript]  # raises on OOV
    opt_sil = topo.allow_optional_silence
    b = _Builder(inv)

    # layout: [sil] w1 [sil] w2 ... wN [sil]
    sil_slots = []
    word_slots = []
    for k, word in enumerate(transcript):
        sil_slots.append(b.add_silence() if opt_sil else None)
        word_slots.append(b.add_word_chain(word, chains[k]))
    sil_slots.append(b.add_silence() if opt_sil else None)

    n = len(b.classes)
    initial = np.full(n, -np.inf)
    final = np.full(n, -np.inf)
    exit_ = np.full(n, -np.inf)
    edges = []

    def loop_fwd(node):
        if b.kind[node] == "sil":
            return topo.silence_loop_logprob, topo.silence_forward_logprob
        return topo.loop_logprob, topo.forward_logprob

    def connect(node, succs, is_final):
        loop, fwd = loop_fwd(node)
        edges.append((node, node, loop, None))
        branches = len(succs) + (1 if is_final else 0)
        for s in succs:
            edges.append((node, s, _split(fwd, branches), None))
        if is_final:
            exit_[node] = _split(fwd, branches)

    if opt_sil:
        initial[sil_slots[0]] = 0.0
    initial[word_slots[0][0]] = 0.0

    for k, chain in enumerate(word_slots):
        for a, c in zip(chain[:-1], chain[1:]):
            connect(a, [c], False)
        last = chain[-1]
        if k + 1 < len(word_slots):
            nxt = word_slots[k + 1][0]
            if opt_sil:
                sil = sil_slots[k + 1]
                connect(last, [sil, nxt], False)
                connect(sil, [nxt], False)
            else:
                connect(last, [nxt], False)
        else:
            final[last] = 0.0
            if opt_sil:
                sil = sil_slots[k + 1]
                connect(last, [sil], True)
                final[sil] = 0.0
                connect(sil, [], True)
            else:
                connect(last, [], True)
    if opt_sil:
        connect(sil_slots[0], [word_slots[0][0]], False)

    edges.sort(key=lambda e: (e[0], e[1]))
    return TrainingGraph(
        classes=b.classes,
        indices=np.asarray(b.indices, dtype=np.int64).reshape(-1, 3),
        edges=edges,
        initial_logprob=initial,
        final_logprob=final,
        exit_logprob=exit_,
        words=b.words,
    )


def min_path_length(g: HMMGraph) -> int:
    """Number of emitting nodes on the shortest start-to-final path."""
    dist = {s: 1 for s in g.start_set}
    queue = deque(sorted(dist))
    succ = {}
    for s, d, lp, _ in g.edges:
        if s != d and lp > -np.inf:
            succ.setdefault(s, []).append(d)
    finals = set(g.final_set)
    while queue:
        u = queue.popleft()
        if u in finals:
            return dist[u]
        for v in succ.get(u, ()):
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    raise DataError("graph has no start-to-final path")


class BigramLM:
    """Add-k smoothed bigram model over ``vocab`` plus sentence boundary tokens."""

    def __init__(self, vocab, bigram_counts: dict | None = None, smoothing_k: float = 0.0):
        vocab = list(vocab)
        if not vocab:
            raise DataError("LM vocabulary is empty")
        if len(set(vocab)) != len(vocab):
            raise DataError("LM vocabulary has duplicates")
        if SENT_BEGIN in vocab or SENT_END in vocab:
            raise DataError("sentence boundary tokens must not be in the LM vocabulary")
        if smoothing_k < 0:
            raise DataError("smoothing_k must be >= 0")
        self.vocab = vocab
        self.counts = dict(bigram_counts or {})
        self.smoothing_k = float(smoothing_k)
        histories = [SENT_BEGIN] + vocab
        self._ids = {w: i for i, w in enumerate(vocab)}
        v = len(vocab)
        # rows: <s>, vocab...; cols: vocab..., </s>
        counts = np.zeros((v + 1, v + 1))
        for key, c in self.counts.items():
            parts = key.split()
            if len(parts) != 2:
                raise DataError(f"malformed bigram key {key!r}")
            w1, w2 = parts
            if w1 not in histories or (w2 not in self._ids and w2 != SENT_END):
                raise DataError(f"bigram {key!r} uses a word outside the LM vocabulary")
            if w1 == SENT_BEGIN and w2 == SENT_END:
                raise DataError("empty sentences are not modeled")
            counts[histories.index(w1), self._ids.get(w2, v)] += float(c)
        smoothed = counts + self.smoothing_k
        smoothed[0, v] = 0.0
        totals = smoothed.sum(axis=1, keepdims=True)
        probs = np.where(totals > 0, smoothed / np.where(totals > 0, totals, 1.0), 0.0)
        # unseen history with k=0: uniform fallback
        for r in np.flatnonzero(totals[:, 0] == 0):
            probs[r, :] = 1.0 / (v if r == 0 else v + 1)
            probs[0, v] = 0.0
        with np.errstate(divide="ignore"):
            self._logp = np.log(probs)

    def logprob(self, word: str, history: str) -> float:
        row = 0 if history == SENT_BEGIN else 1 + self._ids[history]
        col = len(self.vocab) if word == SENT_END else self._ids[word]
        return float(self._logp[row, col])

    def sentence_logprob(self, words) -> float:
        hist = SENT_BEGIN
        total = 0.0
        for w in list(words) + [SENT_END]:
            total += self.logprob(w, hist)
            hist = w
        return total

    @classmethod
    def from_transcripts(cls, vocab, transcripts, smoothing_k=0.0):
        counts: dict[str, int] = {}
        for words in transcripts:
            seq = [SENT_BEGIN] + list(words) + [SENT_END]
            for a, b in zip(seq[:-1], seq[1:]):
                key = f"{a} {b}"
                counts[key] = counts.get(key, 0) + 1
        return cls(vocab, dict(sorted(counts.items())), smoothing_k)

    def to_dict(self):
        return {"vocab": self.vocab, "bigram_counts": self.counts, "smoothing_k": self.smoothing_k}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(d["vocab"], d.get("bigram_counts", {}), d.get("smoothing_k", 0.0))
        except (KeyError, TypeError) as e:
            raise DataError(f"malformed LM: {e}") from None


def load_lm(path) -> BigramLM:
    with open(path) as f:
        return BigramLM.from_dict(json.load(f))


def build_decoding_graph(lex: Lexicon, inv: PhonemeInventory, lm: BigramLM,
                         topo: Topology, lm_scale: float = 1.0) -> DecodingGraph:
    """Compose the lexicon with a bigram LM into one word-loop lattice.

    Each word has its own chain and its own optional trailing silence so the
    bigram history survives the silence. LM scores sit on the edges entering
    a word's first state (and on the final weights for the sentence end).
    """
    if lm_scale < 0:
        raise DataError("lm_scale must be >= 0")
    for w in lm.vocab:
        if w not in lex:
            raise DataError(f"LM word {w!r} missing from lexicon")
    opt_sil = topo.allow_optional_silence
    b = _Builder(inv)
    sil_start = b.add_silence() if opt_sil else None
    chains, sils = [], []
    for w in lm.vocab:
        chains.append(b.add_word_chain(w, lex.pronunciation(w)))
        sils.append(b.add_silence() if opt_sil else None)

    n = len(b.classes)
    initial = np.full(n, -np.inf)
    final = np.full(n, -np.inf)
    exit_ = np.full(n, -np.inf)
    word_entry = np.full(n, -1, dtype=np.int64)
    edges = []
    s = lm_scale

    def lmlp(w, h):
        return s * lm.logprob(w, h)

    def add_entries(src, fwd, hist):
        for v, chain in enumerate(chains):
            lp = lm.logprob(lm.vocab[v], hist)
            if lp == -np.inf:
                continue  # zero-probability word transitions are pruned
            edges.append((src, chain[0], fwd + s * lp, lm.vocab[v]))

    for v, chain in enumerate(chains):
        w = lm.vocab[v]
        word_entry[chain[0]] = v
        lp0 = lm.logprob(w, SENT_BEGIN)
        if lp0 > -np.inf:
            initial[chain[0]] = s * lp0
        for a, c in zip(chain[:-1], chain[1:]):
            edges.append((a, a, topo.loop_logprob, None))
            edges.append((a, c, topo.forward_logprob, None))
        last = chain[-1]
        edges.append((last, last, topo.loop_logprob, None))
        lp_end = lm.logprob(SENT_END, w)
        if opt_sil:
            fwd = _split(topo.forward_logprob, 2)
            edges.append((last, sils[v], fwd, None))
            add_entries(last, fwd, w)
            sil = sils[v]
            edges.append((sil, sil, topo.silence_loop_logprob, None))
            add_entries(sil, topo.silence_forward_logprob, w)
            if lp_end > -np.inf:
                final[sil] = lmlp(SENT_END, w)
        else:
            fwd = topo.forward_logprob
            add_entries(last, fwd, w)
        if lp_end > -np.inf:
            final[last] = lmlp(SENT_END, w)
    if opt_sil:
        initial[sil_start] = 0.0
        edges.append((sil_start, sil_start, topo.silence_loop_logprob, None))
        add_entries(sil_start, topo.silence_forward_logprob, SENT_BEGIN)

    edges.sort(key=lambda e: (e[0], e[1]))
    return DecodingGraph(
        classes=b.classes,
        indices=np.asarray(b.indices, dtype=np.int64).reshape(-1, 3),
        edges=edges,
        initial_logprob=initial,
        final_logprob=final,
        exit_logprob=exit_,
        words=b.words,
        vocab=lm.vocab,
        lm_scale=lm_scale,
        word_entry=word_entry,
    )


def outgoing_mass(g: HMMGraph) -> np.ndarray:
    """Per-node loop + forward probability including the unscored exit share."""
    mass = np.zeros(g.num_nodes)
    for s, _, lp, _ in g.edges:
        mass[s] += math.exp(lp)
    fin = np.isfinite(g.exit_logprob)
    mass[fin] += np.exp(g.exit_logprob[fin])
    return mass


def phone_sequence(g: HMMGraph, path) -> list[str]:
    """Collapse a node path into its phoneme runs (silence kept as its symbol)."""
    out = []
    prev = None
    for node in path:
        sc = g.classes[node]
        if node != prev and (sc.hmm_state == 0):
            out.append(sc.center)
        prev = node
    return out


def indices_of(g: HMMGraph, node: int) -> FactoredIndices:
    return FactoredIndices(*(int(v) for v in g.indices[node]))
