"""Modality-tagged token streams."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError


class Modality(str, enum.Enum):
    VISION = "vision"
    TEXT = "text"


class Phase(str, enum.Enum):
    PREFILL = "prefill"
    GENERATED = "generated"


@dataclass(frozen=True)
class Token:
    """One input token.

    Vision tokens carry a projected embedding as payload, text tokens a
    vocabulary id. ``position_id`` is absolute and survives pruning.
    """

    modality: Modality
    payload: np.ndarray | int
    position_id: int
    phase: Phase = Phase.PREFILL
    turn_id: int = 0

    @property
    def is_vision(self) -> bool:
        return self.modality is Modality.VISION


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[Token, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        positions = [t.position_id for t in self.tokens]
        if any(b <= a for a, b in zip(positions, positions[1:])):
            raise InputError("position ids must be strictly increasing")
        # vision precedes text within each turn
        seen_text: set[int] = set()
        for t in self.tokens:
            if t.modality is Modality.TEXT:
                seen_text.add(t.turn_id)
            elif t.turn_id in seen_text:
                raise InputError(f"vision token after text in turn {t.turn_id}")

    @classmethod
    def from_parts(
        cls,
        vision: np.ndarray | None,
        text_ids: Sequence[int],
        start_position: int = 0,
        turn_id: int = 0,
    ) -> "TokenSequence":
        """Build ``[V; T]`` with consecutive positions starting at ``start_position``."""
        tokens: list[Token] = []
        pos = start_position
        if vision is not None:
            for row in np.asarray(vision):
                tokens.append(Token(Modality.VISION, np.array(row, dtype=np.float32), pos, turn_id=turn_id))
                pos += 1
        for tid in text_ids:
            tokens.append(Token(Modality.TEXT, int(tid), pos, turn_id=turn_id))
            pos += 1
        return cls(tuple(tokens))

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    def __getitem__(self, idx):
        return self.tokens[idx]

    def __add__(self, other: "TokenSequence") -> "TokenSequence":
        return TokenSequence(self.tokens + other.tokens)

    @property
    def vision_indices(self) -> list[int]:
        return [i for i, t in enumerate(self.tokens) if t.modality is Modality.VISION]

    @property
    def text_indices(self) -> list[int]:
        return [i for i, t in enumerate(self.tokens) if t.modality is Modality.TEXT]

    @property
    def num_vision(self) -> int:
        return len(self.vision_indices)

    @property
    def num_text(self) -> int:
        return len(self.text_indices)

    @property
    def position_ids(self) -> np.ndarray:
        return np.array([t.position_id for t in self.tokens], dtype=np.int64)

    @property
    def next_position(self) -> int:
        return self.tokens[-1].position_id + 1 if self.tokens else 0

    def vision_matrix(self) -> np.ndarray:
        rows = [np.asarray(self.tokens[i].payload) for i in self.vision_indices]
        if not rows:
            return np.zeros((0, 0), dtype=np.float32)
        return np.stack(rows)

    def text_ids(self) -> list[int]:
        return [int(self.tokens[i].payload) for i in self.text_indices]

    def subset(self, indices: Iterable[int]) -> "TokenSequence":
        """Keep the tokens at ``indices`` (original positions retained)."""
        return TokenSequence(tuple(self.tokens[i] for i in sorted(set(indices))))

    def with_phase(self, phase: Phase) -> "TokenSequence":
        return TokenSequence(tuple(replace(t, phase=phase) for t in self.tokens))
