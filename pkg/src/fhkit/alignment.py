"""Hard frame-to-state alignments and their statistics."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .graph import HMMGraph, min_path_length
from .inventory import PhonemeInventory, pack_label, FactoredIndices

PROVENANCES = ("linear", "fs-falign", "mono-falign", "di-falign", "tri-falign", "external", "ground-truth")


@dataclass
class AlignmentEntry:
    id: str
    labels: np.ndarray  # packed state-class labels, one per frame
    provenance: str = "external"
    nodes: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.provenance not in PROVENANCES:
            raise DataError(f"unknown provenance {self.provenance!r}")

    def __len__(self):
        return len(self.labels)

    def factored(self, inv: PhonemeInventory) -> np.ndarray:
        """(T, 3) array of left, center-state and right indices."""
        return unpack_labels(inv, self.labels)


def unpack_labels(inv: PhonemeInventory, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= inv.num_state_classes):
        raise DataError("alignment label out of range for this inventory")
    rest, right = np.divmod(labels, inv.num_contexts)
    left, center = np.divmod(rest, inv.num_center_states)
    out = np.stack([left, center, right], axis=1)
    # silence must carry boundary contexts
    sil = out[:, 1] == inv.silence_idx
    if np.any(out[sil, 0] != inv.boundary_idx) or np.any(out[sil, 2] != inv.boundary_idx):
        raise DataError("silence label with non-boundary context")
    return out


def node_labels(graph: HMMGraph, inv: PhonemeInventory) -> np.ndarray:
    return np.array([pack_label(inv, FactoredIndices(*map(int, row))) for row in graph.indices],
                    dtype=np.int64)


def path_to_entry(graph: HMMGraph, inv: PhonemeInventory, path, utt_id="", provenance="external"):
    labels = node_labels(graph, inv)[np.asarray(path, dtype=np.int64)]
    return AlignmentEntry(utt_id, labels, provenance, nodes=np.asarray(path, dtype=np.int64))


def validate_alignment(entry: AlignmentEntry, graph: HMMGraph, inv: PhonemeInventory) -> bool:
    """True if some topology-valid start-to-final path spells the labels."""
    T = len(entry.labels)
    if T == 0:
        return False
    nl = node_labels(graph, inv)
    trans = np.isfinite(graph.transition_matrix())
    active = np.isfinite(graph.initial_logprob) & (nl == entry.labels[0])
    for t in range(1, T):
        active = (active @ trans > 0) & (nl == entry.labels[t])
        if not active.any():
            return False
    return bool(np.any(active & np.isfinite(graph.final_logprob)))


def shortest_path(graph: HMMGraph) -> list[int]:
    """Canonical shortest start-to-final node path (lowest ids on ties)."""
    parent = {}
    queue = deque()
    for s in graph.start_set:
        parent[s] = None
        queue.append(s)
    succ = {}
    for s, d, lp, _ in graph.edges:
        if s != d and lp > -np.inf:
            succ.setdefault(s, []).append(d)
    finals = set(graph.final_set)
    while queue:
        u = queue.popleft()
        if u in finals:
            path = [u]
            while parent[path[-1]] is not None:
                path.append(parent[path[-1]])
            return path[::-1]
        for v in sorted(succ.get(u, ())):
            if v not in parent:
                parent[v] = u
                queue.append(v)
    raise DataError("graph has no start-to-final path")


def linear_durations(num_states: int, T: int) -> list[int]:
    """Even split of T frames; the first ``T % num_states`` states get one extra."""
    if T < num_states:
        raise DataError(f"infeasible: {T} frames for {num_states} states")
    base, rem = divmod(T, num_states)
    return [base + (1 if k < rem else 0) for k in range(num_states)]


def linear_align(graph: HMMGraph, T: int, inv: PhonemeInventory, utt_id="") -> AlignmentEntry:
    if T < min_path_length(graph):
        raise DataError(f"infeasible: {T} frames < minimum path length {min_path_length(graph)}")
    path = shortest_path(graph)
    nodes = np.repeat(path, linear_durations(len(path), T))
    return path_to_entry(graph, inv, nodes, utt_id, "linear")


def silence_fraction(entry: AlignmentEntry, inv: PhonemeInventory) -> float:
    if len(entry) == 0:
        return 0.0
    return float(np.mean(entry.factored(inv)[:, 1] == inv.silence_idx))


def mean_state_duration(entry: AlignmentEntry) -> float:
    if len(entry) == 0:
        return 0.0
    labels = entry.labels
    if entry.nodes is not None:
        labels = entry.nodes
    segments = 1 + int(np.count_nonzero(labels[1:] != labels[:-1]))
    return len(labels) / segments


def alignment_stats(entries, inv: PhonemeInventory) -> dict:
    entries = list(entries)
    frames = sum(len(e) for e in entries)
    sil = sum(silence_fraction(e, inv) * len(e) for e in entries)
    segs = sum(len(e) / mean_state_duration(e) for e in entries if len(e))
    hist = np.zeros(inv.num_center_states, dtype=np.int64)
    for e in entries:
        np.add.at(hist, e.factored(inv)[:, 1], 1)
    return {
        "silence_fraction": sil / frames if frames else 0.0,
        "mean_state_duration": frames / segs if segs else 0.0,
        "label_histogram": {str(i): int(c) for i, c in enumerate(hist)},
        "utterances": len(entries),
        "frames": frames,
    }


def frame_accuracy(hyp_entries, ref_entries) -> float:
    """Fraction of frames whose full state-class label matches the reference."""
    refs = {e.id: e for e in ref_entries}
    hits = total = 0
    for h in hyp_entries:
        r = refs[h.id]
        if len(r) != len(h):
            raise DataError(f"length mismatch for {h.id}")
        hits += int(np.count_nonzero(h.labels == r.labels))
        total += len(h)
    return hits / total if total else 0.0
