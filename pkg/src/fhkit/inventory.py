"""Phoneme inventory and unclustered triphone state classes.

Every triphone HMM state is identified by ``(left, center, hmm_state, right)``
without any tying. The network never sees this joint label directly; it
predicts three factored labels instead:

* left context:   ``|P| + 1`` classes (phonemes plus the boundary ``#``)
* center state:   ``3 |P| + 1`` classes (three states per phoneme plus silence)
* right context:  ``|P| + 1`` classes
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import NamedTuple

from .errors import DataError

SILENCE = "[SIL]"
BOUNDARY = "#"
STATES_PER_PHONE = 3


class StateClass(NamedTuple):
    left: str
    center: str
    hmm_state: int
    right: str


class FactoredIndices(NamedTuple):
    left_idx: int
    center_state_idx: int
    right_idx: int


@dataclass(frozen=True)
class PhonemeInventory:
    phonemes: tuple[str, ...]
    silence_symbol: str = SILENCE
    boundary_symbol: str = BOUNDARY
    _ordinal: dict = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        phonemes = tuple(self.phonemes)
        object.__setattr__(self, "phonemes", phonemes)
        if not phonemes:
            raise DataError("phoneme inventory must not be empty")
        if self.silence_symbol == self.boundary_symbol:
            raise DataError("silence and boundary symbols must differ")
        seen = {}
        for i, p in enumerate(phonemes):
            if not isinstance(p, str) or not p:
                raise DataError(f"invalid phoneme symbol {p!r}")
            if p in (self.silence_symbol, self.boundary_symbol):
                raise DataError(f"phoneme {p!r} collides with a reserved symbol")
            if p in seen:
                raise DataError(f"duplicate phoneme {p!r}")
            seen[p] = i
        object.__setattr__(self, "_ordinal", seen)

    @property
    def num_phonemes(self) -> int:
        return len(self.phonemes)

    @property
    def num_contexts(self) -> int:
        """Size of the left/right context heads (phonemes + boundary)."""
        return len(self.phonemes) + 1

    @property
    def num_center_states(self) -> int:
        return center_state_count(self)

    @property
    def boundary_idx(self) -> int:
        return len(self.phonemes)

    @property
    def silence_idx(self) -> int:
        return STATES_PER_PHONE * len(self.phonemes)

    @property
    def num_state_classes(self) -> int:
        """Size of the dense joint label space used in alignment files."""
        return self.num_contexts * self.num_center_states * self.num_contexts

    def phoneme_index(self, symbol: str) -> int:
        try:
            return self._ordinal[symbol]
        except KeyError:
            raise DataError(f"unknown phoneme {symbol!r}") from None

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._ordinal

    def context_index(self, symbol: str) -> int:
        if symbol == self.boundary_symbol:
            return self.boundary_idx
        return self.phoneme_index(symbol)

    def context_symbol(self, idx: int) -> str:
        if idx == self.boundary_idx:
            return self.boundary_symbol
        if not 0 <= idx < self.boundary_idx:
            raise DataError(f"context index {idx} out of range")
        return self.phonemes[idx]

    def silence_class(self) -> StateClass:
        b = self.boundary_symbol
        return StateClass(b, self.silence_symbol, 0, b)

    def to_dict(self) -> dict:
        return {
            "phonemes": list(self.phonemes),
            "silence": self.silence_symbol,
            "boundary": self.boundary_symbol,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "PhonemeInventory":
        try:
            return cls(
                tuple(d["phonemes"]),
                d.get("silence", SILENCE),
                d.get("boundary", BOUNDARY),
            )
        except (KeyError, TypeError) as e:
            raise DataError(f"malformed inventory: {e}") from None

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def build_inventory(phoneme_symbols, silence_symbol=SILENCE, boundary_symbol=BOUNDARY):
    """Build an inventory, preserving input order of the phoneme symbols."""
    return PhonemeInventory(tuple(phoneme_symbols), silence_symbol, boundary_symbol)


def load_inventory(path) -> PhonemeInventory:
    with open(path) as f:
        return PhonemeInventory.from_dict(json.load(f))


def save_inventory(inv: PhonemeInventory, path) -> None:
    with open(path, "w") as f:
        json.dump(inv.to_dict(), f, indent=1)
        f.write("\n")


def center_state_count(inv: PhonemeInventory) -> int:
    return STATES_PER_PHONE * inv.num_phonemes + 1


def triphone_class_count(inv: PhonemeInventory) -> int:
    return STATES_PER_PHONE * inv.num_phonemes ** 3


def validate_state_class(inv: PhonemeInventory, sc: StateClass) -> None:
    if sc.center == inv.silence_symbol:
        b = inv.boundary_symbol
        if sc.hmm_state != 0 or sc.left != b or sc.right != b:
            raise DataError(f"silence must be single-state with boundary contexts: {sc}")
        return
    inv.phoneme_index(sc.center)
    if not 0 <= sc.hmm_state < STATES_PER_PHONE:
        raise DataError(f"hmm state {sc.hmm_state} out of range")
    inv.context_index(sc.left)
    inv.context_index(sc.right)


def factored_indices(inv: PhonemeInventory, sc: StateClass) -> FactoredIndices:
    validate_state_class(inv, sc)
    if sc.center == inv.silence_symbol:
        center = inv.silence_idx
    else:
        center = STATES_PER_PHONE * inv.phoneme_index(sc.center) + sc.hmm_state
    return FactoredIndices(inv.context_index(sc.left), center, inv.context_index(sc.right))


def state_class_from_indices(inv: PhonemeInventory, idx: FactoredIndices) -> StateClass:
    left, center, right = idx
    if center == inv.silence_idx:
        sc = StateClass(inv.context_symbol(left), inv.silence_symbol, 0, inv.context_symbol(right))
    elif 0 <= center < inv.silence_idx:
        phone, state = divmod(center, STATES_PER_PHONE)
        sc = StateClass(inv.context_symbol(left), inv.phonemes[phone], state, inv.context_symbol(right))
    else:
        raise DataError(f"center-state index {center} out of range")
    validate_state_class(inv, sc)
    return sc


def pack_label(inv: PhonemeInventory, idx: FactoredIndices) -> int:
    """Dense integer id of a factored triple (used in alignment caches)."""
    left, center, right = idx
    return (left * inv.num_center_states + center) * inv.num_contexts + right


def unpack_label(inv: PhonemeInventory, label: int) -> FactoredIndices:
    if not 0 <= label < inv.num_state_classes:
        raise DataError(f"label {label} out of range")
    rest, right = divmod(int(label), inv.num_contexts)
    left, center = divmod(rest, inv.num_center_states)
    return FactoredIndices(left, center, right)


def all_state_classes(inv: PhonemeInventory):
    """Every valid state class; silence first, then phoneme triphones."""
    yield inv.silence_class()
    contexts = list(inv.phonemes) + [inv.boundary_symbol]
    for center in inv.phonemes:
        for i in range(STATES_PER_PHONE):
            for left in contexts:
                for right in contexts:
                    yield StateClass(left, center, i, right)
