"""Synthetic corpora with known ground truth, and corpus loading.

An utterance is generated by sampling a word sequence, walking its training
graph with geometric state durations, and emitting one Gaussian feature
vector per frame from the visited node's center-state class.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .alignment import path_to_entry
from .errors import DataError
from .graph import Lexicon, Topology, TrainingGraph, build_training_graph, BigramLM
from .inventory import PhonemeInventory, build_inventory, save_inventory
from . import io


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    transcript: list
    graph: TrainingGraph | None = None

    def __len__(self):
        return len(self.features)


@dataclass
class CorpusSpec:
    phonemes: list = field(default_factory=lambda: ["a", "e", "i", "o", "u"])
    lexicon: dict | None = None
    num_words: int = 30
    phones_per_word: tuple = (2, 4)
    num_utterances: int = 300
    num_test_utterances: int = 0
    words_per_utterance: tuple = (2, 4)
    feature_dim: int = 8
    mean_scale: float = 1.0
    variance: float = 0.25
    means: list | None = None
    context_shift: float = 0.0
    loop_prob: float = 0.5
    silence_loop_prob: float = 0.5
    silence_prob: float = 0.0
    allow_optional_silence: bool = True
    successors_per_word: int | None = None
    lm_smoothing_k: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.phones_per_word = tuple(self.phones_per_word)
        self.words_per_utterance = tuple(self.words_per_utterance)
        if self.feature_dim < 1:
            raise DataError("feature_dim must be >= 1")
        if self.num_utterances < 0 or self.num_test_utterances < 0:
            raise DataError("utterance counts must be >= 0")
        lo, hi = self.words_per_utterance
        if not 1 <= lo <= hi:
            raise DataError("invalid words_per_utterance range")
        if self.context_shift < 0:
            raise DataError("context_shift must be >= 0")
        if self.variance <= 0:
            raise DataError("variance must be positive")
        if not 0.0 <= self.loop_prob < 1.0 or not 0.0 <= self.silence_loop_prob < 1.0:
            raise DataError("loop probabilities must be in [0, 1)")
        if not 0.0 <= self.silence_prob <= 1.0:
            raise DataError("silence_prob must be in [0, 1]")
        if self.silence_prob > 0 and not self.allow_optional_silence:
            raise DataError("silence_prob > 0 requires allow_optional_silence")

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown corpus spec keys: {sorted(unknown)}")
        return cls(**d)

    def topology(self) -> Topology:
        return Topology.from_loop_probs(self.loop_prob, self.silence_loop_prob,
                                        self.allow_optional_silence)


def _make_lexicon(spec: CorpusSpec, inv: PhonemeInventory, rng) -> dict:
    if spec.lexicon is not None:
        return spec.lexicon
    lo, hi = spec.phones_per_word
    n_phones = inv.num_phonemes
    capacity = sum(n_phones ** k for k in range(lo, hi + 1))
    if spec.num_words > capacity:
        raise DataError("too many words for the requested pronunciation lengths")
    prons = set()
    lex = {}
    while len(lex) < spec.num_words:
        length = int(rng.integers(lo, hi + 1))
        pron = tuple(inv.phonemes[int(i)] for i in rng.integers(0, n_phones, size=length))
        if pron in prons:
            continue
        prons.add(pron)
        lex[f"w{len(lex):02d}"] = [list(pron)]
    return lex


def _sample_path(graph: TrainingGraph, spec: CorpusSpec, rng) -> list[int]:
    """Node sequence of one utterance: optional edge silences, then per-node durations."""
    skeleton = []
    for node, word in enumerate(graph.words):
        if word is None:
            continue
        skeleton.append(node)
    sil_nodes = [n for n, w in enumerate(graph.words) if w is None]
    path_nodes = list(skeleton)
    if sil_nodes:
        # silence only at the utterance edges
        if rng.random() < spec.silence_prob:
            path_nodes.insert(0, sil_nodes[0])
        if rng.random() < spec.silence_prob:
            path_nodes.append(sil_nodes[-1])
    frames = []
    for node in path_nodes:
        p = spec.silence_loop_prob if graph.words[node] is None else spec.loop_prob
        dur = int(rng.geometric(1.0 - p)) if p > 0 else 1
        frames.extend([node] * dur)
    return frames


def _word_sampler(spec: CorpusSpec, words, rng):
    lo, hi = spec.words_per_utterance
    if spec.successors_per_word is None:
        def sample():
            n = int(rng.integers(lo, hi + 1))
            return [words[int(i)] for i in rng.integers(0, len(words), size=n)]
        return sample
    k = min(spec.successors_per_word, len(words))
    succ = {h: [words[int(i)] for i in rng.choice(len(words), size=k, replace=False)]
            for h in ["<s>"] + list(words)}

    def sample():
        n = int(rng.integers(lo, hi + 1))
        out = []
        hist = "<s>"
        for _ in range(n):
            w = succ[hist][int(rng.integers(0, k))]
            out.append(w)
            hist = w
        return out
    return sample


def class_means(spec: CorpusSpec, inv: PhonemeInventory, rng) -> np.ndarray:
    C = inv.num_center_states
    if spec.means is not None:
        means = np.asarray(spec.means, dtype=np.float64)
        if means.shape != (C, spec.feature_dim):
            raise DataError(f"means must have shape {(C, spec.feature_dim)}")
        return means
    return rng.normal(0.0, spec.mean_scale, size=(C, spec.feature_dim))


@dataclass
class GeneratedCorpus:
    inventory: PhonemeInventory
    lexicon: Lexicon
    topology: Topology
    means: np.ndarray
    splits: dict  # name -> list[Utterance]
    alignments: dict  # name -> list[AlignmentEntry]
    lm: BigramLM | None = None


def generate_corpus(spec: CorpusSpec) -> GeneratedCorpus:
    """In-memory generation; deterministic for a given spec (incl. seed)."""
    rng = np.random.default_rng(spec.seed)
    inv = build_inventory(spec.phonemes)
    lex = Lexicon(_make_lexicon(spec, inv, rng), inv)
    means = class_means(spec, inv, rng)
    topo = spec.topology()
    # coarticulation: left and right contexts shift the emission mean
    ctx_shift = spec.context_shift * rng.normal(0.0, spec.mean_scale, size=(2, inv.num_contexts, spec.feature_dim))
    sample_words = _word_sampler(spec, lex.words, rng)
    std = np.sqrt(spec.variance)
    splits, aligns = {}, {}
    for split, count in (("train", spec.num_utterances), ("test", spec.num_test_utterances)):
        utts, ents = [], []
        for k in range(count):
            uid = f"{split}-{k:05d}"
            words = sample_words()
            graph = build_training_graph(lex, inv, words, topo)
            path = _sample_path(graph, spec, rng)
            idx = graph.indices[np.asarray(path)]
            feats = (means[idx[:, 1]] + ctx_shift[0, idx[:, 0]] + ctx_shift[1, idx[:, 2]]
                     + std * rng.standard_normal((len(path), spec.feature_dim)))
            # stored as f32 on disk; keep the in-memory copy identical
            feats = feats.astype(np.float32)
            utts.append(Utterance(uid, feats, words, graph))
            ents.append(path_to_entry(graph, inv, path, uid, "ground-truth"))
        splits[split] = utts
        aligns[split] = ents
    lm = BigramLM.from_transcripts(lex.words, [u.transcript for u in splits["train"]],
                                 spec.lm_smoothing_k) \
        if splits["train"] else None
    return GeneratedCorpus(inv, lex, topo, means, splits, aligns, lm)


def write_corpus(corpus: GeneratedCorpus, out_dir, header=None) -> None:
    """Write inventory, lexicon, LM, and per-split manifest, features and ground truth."""
    os.makedirs(out_dir, exist_ok=True)
    save_inventory(corpus.inventory, os.path.join(out_dir, "inventory.json"))
    with open(os.path.join(out_dir, "lexicon.json"), "w") as f:
        json.dump(corpus.lexicon.to_dict(), f, indent=1, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out_dir, "topology.json"), "w") as f:
        json.dump(corpus.topology.to_dict(), f, indent=1, sort_keys=True)
        f.write("\n")
    if corpus.lm is not None:
        with open(os.path.join(out_dir, "lm.json"), "w") as f:
            json.dump(corpus.lm.to_dict(), f, indent=1, sort_keys=True)
            f.write("\n")
    for split, utts in corpus.splits.items():
        split_dir = os.path.join(out_dir, split)
        os.makedirs(split_dir, exist_ok=True)
        records = []
        if utts:
            os.makedirs(os.path.join(split_dir, "feats"), exist_ok=True)
        for u in utts:
            rel = os.path.join("feats", f"{u.id}.fhf")
            io.write_features(os.path.join(split_dir, rel), u.features)
            records.append({"id": u.id, "feature_file": rel, "transcript": " ".join(u.transcript)})
        io.write_manifest(os.path.join(split_dir, "manifest.jsonl"), records)
        if utts:
            io.write_alignment(os.path.join(split_dir, "ground_truth.align"),
                               corpus.alignments[split], corpus.inventory, header)


def load_split(manifest_path, lex: Lexicon, inv: PhonemeInventory, topo: Topology) -> list[Utterance]:
    utts = []
    for r in io.read_manifest(manifest_path):
        feats = io.read_features(r["feature_file"])
        graph = build_training_graph(lex, inv, r["transcript"], topo)
        utts.append(Utterance(r["id"], feats, r["transcript"], graph))
    return utts


def feature_means_by_class(utts, entries, inv) -> tuple[np.ndarray, np.ndarray]:
    """Empirical per-center-state means and frame counts."""
    by_id = {e.id: e for e in entries}
    D = utts[0].features.shape[1] if utts else 0
    sums = np.zeros((inv.num_center_states, D))
    counts = np.zeros(inv.num_center_states, dtype=np.int64)
    for u in utts:
        centers = by_id[u.id].factored(inv)[:, 1]
        np.add.at(sums, centers, u.features.astype(np.float64))
        np.add.at(counts, centers, 1)
    with np.errstate(invalid="ignore"):
        return sums / np.maximum(counts, 1)[:, None], counts
