"""Greedy decoding loops with a KV eviction policy in the loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError
from .eviction import (
    EvictionConfig,
    EvictionEvent,
    Policy,
    asym_evict,
    h2o_evict,
    streaming_evict,
    turn_evict,
)
from .model import DecodeOutput, ToyVLM, forward_decode_step, forward_prefill
from .tokens import Modality, Phase, Token, TokenSequence


@dataclass
class StepRecord:
    token: Token
    visible_positions: list[int]  # cached positions the token attended to (besides itself)
    logits: np.ndarray
    hidden: np.ndarray
    occupancy: int  # cache size after this step's eviction


@dataclass
class GenerationResult:
    prompt: TokenSequence
    tokens: list[int]
    steps: list[StepRecord] = field(default_factory=list)
    events: list[EvictionEvent] = field(default_factory=list)
    prefill_census: list[int] = field(default_factory=list)  # prefill slots after each step
    answers: dict[int, list[int]] = field(default_factory=dict)  # per turn, multi-turn runs only

    @property
    def peak_occupancy(self) -> int:
        return max([len(self.prompt)] + [s.occupancy for s in self.steps])

    def generated_hidden(self) -> np.ndarray:
        return np.stack([s.hidden for s in self.steps if s.token.phase is Phase.GENERATED])


class _Runner:
    def __init__(self, model: ToyVLM, config: EvictionConfig | None, w=None):
        if config is not None and config.policy is Policy.TURN_LEVEL and w is None:
            raise ConfigError("turn-level eviction needs scorer weights")
        self.model = model
        self.config = config
        self.w = w
        self.current_images = None
        self.current_turn = 0

    def start(self, prompt: TokenSequence) -> tuple[GenerationResult, int]:
        trace, self.cache = forward_prefill(self.model, prompt)
        self.result = GenerationResult(prompt, [])
        self.step_index = 0
        return self.result, int(torch.argmax(trace.logits[-1]))

    def feed(self, token: Token) -> int:
        visible = self.cache.position_ids
        out = forward_decode_step(self.model, token, self.cache)
        self._evict(out)
        self.result.steps.append(
            StepRecord(token, visible, out.logits.detach().numpy().copy(), out.hidden.detach().numpy().copy(), len(self.cache))
        )
        self.result.prefill_census.append(self.cache.count(phase=Phase.PREFILL))
        self.step_index += 1
        return int(torch.argmax(out.logits))

    def _evict(self, out: DecodeOutput) -> None:
        cfg, log, step = self.config, self.result.events, self.step_index
        if cfg is None:
            return
        if cfg.policy is Policy.ASYM_THRESHOLD:
            asym_evict(self.cache, cfg, out.final_attention, step=step, log=log)
        elif cfg.policy is Policy.H2O:
            h2o_evict(self.cache, cfg, step=step, log=log)
        elif cfg.policy is Policy.STREAMING:
            streaming_evict(self.cache, cfg, step=step, log=log)
        else:
            turn_evict(self.cache, cfg, self.model.token_embedding, self.current_images, self.w,
                       self.current_turn, step=step, log=log)


def generate(
    model: ToyVLM, prompt: TokenSequence, max_new_tokens: int, config: EvictionConfig | None = None, w=None
) -> GenerationResult:
    """Greedy decoding of ``max_new_tokens`` tokens after prefilling ``prompt``.

    Every generated token is fed back through a decode step, after which the
    eviction policy (if any) runs on the updated cache.
    """
    runner = _Runner(model, config, w)
    runner.current_images = prompt.vision_matrix()
    turn = prompt[-1].turn_id
    runner.current_turn = turn
    result, next_id = runner.start(prompt)
    pos = prompt.next_position
    for _ in range(max_new_tokens):
        token = Token(Modality.TEXT, next_id, pos, Phase.GENERATED, turn)
        result.tokens.append(next_id)
        next_id = runner.feed(token)
        pos += 1
    return result


@dataclass(frozen=True)
class TurnInput:
    vision: np.ndarray
    question_ids: Sequence[int]


def run_conversation(
    model: ToyVLM,
    turns: Sequence[TurnInput],
    answer_len: int,
    config: EvictionConfig | None = None,
    w=None,
) -> GenerationResult:
    """Multi-turn greedy dialogue: each turn adds an image and a question, then answers.

    The first turn is prefilled; later turns' prompt tokens go through decode
    steps so the cache keeps growing. ``answers`` maps turn id to its tokens.
    """
    runner = _Runner(model, config, w)
    first = TokenSequence.from_parts(turns[0].vision, turns[0].question_ids, 0, 0)
    runner.current_images = np.asarray(turns[0].vision)
    result, next_id = runner.start(first)
    pos = first.next_position
    for t, turn in enumerate(turns):
        if t > 0:
            runner.current_turn = t
            runner.current_images = np.asarray(turn.vision)
            prompt = TokenSequence.from_parts(turn.vision, turn.question_ids, pos, t)
            for tok in prompt:
                next_id = runner.feed(tok)
            pos = prompt.next_position
        answer = []
        for _ in range(answer_len):
            answer.append(next_id)
            next_id = runner.feed(Token(Modality.TEXT, next_id, pos, Phase.GENERATED, t))
            pos += 1
        result.answers[t] = answer
        result.tokens.extend(answer)
    return result
