"""Layer-aligned KV cache with per-slot metadata."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import torch

from .errors import InputError
from .tokens import Modality, Phase


@dataclass(frozen=True)
class SlotMeta:
    slot_id: int
    modality: Modality
    phase: Phase
    turn_id: int
    position_id: int
    token_id: int | None = None


class KVCache:
    """Keys/values for every layer, indexed by a shared slot list.

    Eviction removes a slot from all layers at once, so ``keys[l]`` and
    ``values[l]`` always have ``len(self)`` rows. ``accumulated`` holds the
    running attention mass each slot has received (heads and layers summed).
    """

    def __init__(self, num_layers: int, hidden_dim: int, dtype: torch.dtype = torch.float32):
        self.num_layers = num_layers
        self.hidden_dim = hidden_dim
        self.dtype = dtype
        self.keys = [torch.zeros(0, hidden_dim, dtype=dtype) for _ in range(num_layers)]
        self.values = [torch.zeros(0, hidden_dim, dtype=dtype) for _ in range(num_layers)]
        self.meta: list[SlotMeta] = []
        self.accumulated = np.zeros(0, dtype=np.float64)
        self._next_slot_id = 0

    def __len__(self) -> int:
        return len(self.meta)

    @property
    def slot_ids(self) -> list[int]:
        return [m.slot_id for m in self.meta]

    @property
    def position_ids(self) -> list[int]:
        return [m.position_id for m in self.meta]

    def index_of(self, slot_id: int) -> int:
        for i, m in enumerate(self.meta):
            if m.slot_id == slot_id:
                return i
        raise KeyError(slot_id)

    def append(
        self,
        modality: Modality,
        phase: Phase,
        position_id: int,
        turn_id: int = 0,
        token_id: int | None = None,
        keys: torch.Tensor | None = None,
        values: torch.Tensor | None = None,
    ) -> int:
        """Append one slot. ``keys``/``values`` are ``(num_layers, hidden_dim)``; zeros if omitted."""
        if self.meta and position_id <= self.meta[-1].position_id:
            raise InputError("position ids must increase along the cache")
        shape = (self.num_layers, self.hidden_dim)
        keys = torch.zeros(shape, dtype=self.dtype) if keys is None else keys
        values = torch.zeros(shape, dtype=self.dtype) if values is None else values
        if tuple(keys.shape) != shape or tuple(values.shape) != shape:
            raise InputError(f"expected kv of shape {shape}")
        for layer in range(self.num_layers):
            self.keys[layer] = torch.cat([self.keys[layer], keys[layer : layer + 1].to(self.dtype)])
            self.values[layer] = torch.cat([self.values[layer], values[layer : layer + 1].to(self.dtype)])
        slot_id = self._next_slot_id
        self._next_slot_id += 1
        self.meta.append(SlotMeta(slot_id, modality, phase, turn_id, position_id, token_id))
        self.accumulated = np.append(self.accumulated, 0.0)
        return slot_id

    def accumulate(self, attention: np.ndarray) -> None:
        attention = np.asarray(attention, dtype=np.float64)
        if attention.shape != (len(self),):
            raise InputError(f"attention row of length {attention.shape} for {len(self)} slots")
        self.accumulated = self.accumulated + attention

    def evict(self, slot_ids: Iterable[int]) -> list[int]:
        """Drop ``slot_ids`` from every layer; returns them in the order given."""
        slot_ids = list(slot_ids)
        if not slot_ids:
            return []
        drop = {self.index_of(s) for s in slot_ids}
        keep = [i for i in range(len(self)) if i not in drop]
        idx = torch.tensor(keep, dtype=torch.long)
        for layer in range(self.num_layers):
            self.keys[layer] = self.keys[layer].index_select(0, idx)
            self.values[layer] = self.values[layer].index_select(0, idx)
        self.meta = [self.meta[i] for i in keep]
        self.accumulated = self.accumulated[keep]
        return slot_ids

    def copy(self) -> "KVCache":
        out = KVCache(self.num_layers, self.hidden_dim, self.dtype)
        out.keys = [k.clone() for k in self.keys]
        out.values = [v.clone() for v in self.values]
        out.meta = list(self.meta)
        out.accumulated = self.accumulated.copy()
        out._next_slot_id = self._next_slot_id
        return out

    def count(self, modality: Modality | None = None, phase: Phase | None = None) -> int:
        return sum(
            1
            for m in self.meta
            if (modality is None or m.modality is modality) and (phase is None or m.phase is phase)
        )

    def census(self) -> dict[tuple[str, str, int], int]:
        """Slot counts keyed by ``(modality, phase, turn_id)``."""
        counts = Counter((m.modality.value, m.phase.value, m.turn_id) for m in self.meta)
        return dict(sorted(counts.items()))


def cache_census(cache: KVCache) -> dict[tuple[str, str, int], int]:
    return cache.census()
