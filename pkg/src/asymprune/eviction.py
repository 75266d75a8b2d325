"""Decode-time KV eviction policies.

All policies evict whole slots from every layer at once. ``asym_evict`` and
``turn_evict`` only ever touch generated text; ``h2o_evict`` and
``streaming_evict`` treat every slot as a candidate.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np
import torch

from .cache import KVCache, SlotMeta, cache_census  # noqa: F401  (re-exported)
from .errors import ConfigError, InputError
from .scorer import similarity
from .tokens import Modality, Phase

logger = logging.getLogger(__name__)

DEFAULT_SINK_COUNT = 4


class Policy(str, enum.Enum):
    ASYM_THRESHOLD = "asym_threshold"
    H2O = "h2o"
    STREAMING = "streaming"
    TURN_LEVEL = "turn_level"


@dataclass(frozen=True)
class EvictionConfig:
    """``text_budget`` caps retained generated tokens.

    Modality-blind policies (H2O, Streaming) cap the whole cache at
    ``cache_budget``; when that is unset they use ``text_budget`` as the cap.
    """

    policy: Policy
    text_budget: int
    sink_count: int = DEFAULT_SINK_COUNT
    retention: float = 1.0
    cache_budget: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "policy", Policy(self.policy))
        if self.text_budget < 1:
            raise ConfigError("text_budget must be >= 1")
        if self.sink_count < 0:
            raise ConfigError("sink_count must be >= 0")
        if not 0 < self.retention <= 1:
            raise ConfigError("retention must be in (0, 1]")

    @property
    def total_budget(self) -> int:
        return self.text_budget if self.cache_budget is None else self.cache_budget

    def to_dict(self) -> dict:
        d = asdict(self)
        d["policy"] = self.policy.value
        return d


@dataclass(frozen=True)
class EvictionEvent:
    step: int
    policy: str
    slot_id: int
    modality: str
    phase: str
    turn_id: int
    position_id: int
    score: float

    def to_dict(self) -> dict:
        return asdict(self)


def _record(log, step, policy, meta: SlotMeta, score) -> None:
    if log is not None:
        log.append(
            EvictionEvent(step, policy.value, meta.slot_id, meta.modality.value, meta.phase.value,
                          meta.turn_id, meta.position_id, float(score))
        )


def _lowest(candidates: list[tuple[float, int]], count: int) -> list[tuple[float, int]]:
    # (score, slot_id) pairs; equal scores go to the lower slot id first
    return sorted(candidates)[:count]


def asym_evict(cache: KVCache, config: EvictionConfig, final_layer_attention, step: int = 0, log=None) -> list[int]:
    """Evict the least-attended generated slots once they outnumber ``text_budget``.

    ``final_layer_attention`` is this step's last-layer attention row over the
    cache (head-averaged, or ``(heads, slots)`` which is averaged here).
    """
    row = np.asarray(final_layer_attention.detach().double() if isinstance(final_layer_attention, torch.Tensor)
                     else final_layer_attention, dtype=np.float64)
    if row.ndim == 2:
        row = row.mean(axis=0)
    if row.shape != (len(cache),):
        raise InputError(f"attention row has {row.shape[0]} entries for {len(cache)} slots")
    generated = [(row[i], m.slot_id) for i, m in enumerate(cache.meta) if m.phase is Phase.GENERATED]
    excess = len(generated) - config.text_budget
    if excess <= 0:
        return []
    victims = _lowest(generated, excess)
    for score, sid in victims:
        _record(log, step, Policy.ASYM_THRESHOLD, cache.meta[cache.index_of(sid)], score)
    return cache.evict(sid for _, sid in victims)


def h2o_evict(cache: KVCache, config: EvictionConfig, step_attention=None, step: int = 0, log=None) -> list[int]:
    """Evict the slots with the least accumulated attention until the cache fits.

    If ``step_attention`` is given it is added to the counters first; decode
    steps run through the model already accumulate, so pass ``None`` there.
    """
    if step_attention is not None:
        cache.accumulate(step_attention)
    excess = len(cache) - config.total_budget
    if excess <= 0:
        return []
    candidates = [(cache.accumulated[i], m.slot_id) for i, m in enumerate(cache.meta)]
    victims = _lowest(candidates, excess)
    for score, sid in victims:
        _record(log, step, Policy.H2O, cache.meta[cache.index_of(sid)], score)
    return cache.evict(sid for _, sid in victims)


def streaming_evict(cache: KVCache, config: EvictionConfig, step: int = 0, log=None) -> list[int]:
    """Keep the first ``sink_count`` slots and the most recent ones up to the budget."""
    budget = config.total_budget
    if config.sink_count >= budget:
        raise ConfigError(f"sink_count {config.sink_count} must be below the budget {budget}")
    if len(cache) <= budget:
        return []
    recent = budget - config.sink_count
    keep = set(range(config.sink_count)) | set(range(len(cache) - recent, len(cache)))
    victims = [m for i, m in enumerate(cache.meta) if i not in keep]
    for m in victims:
        _record(log, step, Policy.STREAMING, m, 0.0)
    return cache.evict(m.slot_id for m in victims)


@dataclass(frozen=True)
class TurnEviction:
    turns: list[int]
    within_budget: bool


def turn_scores(
    cache: KVCache, token_embedding: torch.Tensor, current_image_embs, w, current_turn: int
) -> dict[int, float]:
    """Score each completed answer still in the cache.

    A turn's score is the mean over its answer tokens of the best weighted
    cosine match against any current image token.
    """
    answers: dict[int, list[int]] = {}
    for m in cache.meta:
        if m.phase is Phase.GENERATED and m.modality is Modality.TEXT and m.turn_id < current_turn:
            answers.setdefault(m.turn_id, []).append(m.token_id)
    if not answers:
        return {}
    images = torch.as_tensor(np.asarray(current_image_embs), dtype=torch.float64)
    wt = torch.as_tensor(np.asarray(w), dtype=torch.float64)
    table = token_embedding.double()
    out = {}
    for turn, ids in sorted(answers.items()):
        sim = similarity(wt, images, table[ids])  # (images, answer tokens)
        out[turn] = float(sim.max(dim=0).values.mean())
    return out


def turn_evict(
    cache: KVCache,
    config: EvictionConfig,
    token_embedding: torch.Tensor,
    current_image_embs,
    w,
    current_turn: int,
    step: int = 0,
    log=None,
) -> TurnEviction:
    """Evict whole past answers, lowest score first, until cached text fits ``text_budget``.

    Questions, images and the turn in progress are never touched. If removing
    every past answer is not enough, the result reports ``within_budget=False``.
    """
    text_count = cache.count(modality=Modality.TEXT)
    if text_count <= config.text_budget:
        return TurnEviction([], True)
    scores = turn_scores(cache, token_embedding, current_image_embs, w, current_turn)
    evicted = []
    for score, turn in sorted((s, t) for t, s in scores.items()):
        if text_count <= config.text_budget:
            break
        victims = [m for m in cache.meta
                   if m.turn_id == turn and m.phase is Phase.GENERATED and m.modality is Modality.TEXT]
        for m in victims:
            _record(log, step, Policy.TURN_LEVEL, m, score)
        cache.evict(m.slot_id for m in victims)
        text_count -= len(victims)
        evicted.append(turn)
    ok = text_count <= config.text_budget
    if not ok:
        logger.warning("turn eviction partial: %d text slots remain over budget %d", text_count, config.text_budget)
    return TurnEviction(evicted, ok)
