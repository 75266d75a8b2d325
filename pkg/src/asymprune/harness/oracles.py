"""Brute-force references used by the experiments and the test-suite."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
import torch
from scipy.stats import spearmanr

from ..engine import GenerationResult
from ..model import HARD_MASK, MaskAddends, ToyVLM, embed, forward_prefill, run_layers, text_hidden_states
from ..tokens import Token, TokenSequence


def hidden_mse(a: torch.Tensor, b: torch.Tensor) -> float:
    """Mean over rows of the squared L2 distance."""
    return float(((a.double() - b.double()) ** 2).sum(dim=-1).mean())


def loo_oracle(model: ToyVLM, seq: TokenSequence, base_masked: Iterable[int] = ()) -> np.ndarray:
    """Leave-one-out importance of each vision token.

    Importance of vision token ``i`` is the text hidden-state MSE caused by
    hard-masking it alone (on top of ``base_masked`` sequence positions).
    """
    base_masked = set(base_masked)
    with torch.no_grad():
        base = text_hidden_states(forward_prefill(model, seq, MaskAddends.hard(seq, base_masked))[0], seq)
        out = []
        for i in seq.vision_indices:
            mask = MaskAddends.hard(seq, base_masked | {i})
            h = text_hidden_states(forward_prefill(model, seq, mask)[0], seq)
            out.append(hidden_mse(h, base))
    return np.array(out)


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    """Spearman rank correlation; 0.0 when either side is constant."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0
    return float(spearmanr(a, b).statistic)


def edit_distance(a: Sequence[int], b: Sequence[int]) -> int:
    """Levenshtein distance over token ids."""
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def replay_logits(model: ToyVLM, result: GenerationResult) -> np.ndarray:
    """Recompute every decode step's logits in a single masked forward pass.

    All tokens ever fed (prompt, then decode inputs) are laid out in order;
    each decode row may only attend to the positions that were in the cache
    when it ran, plus itself. This equals cached decoding exactly when the
    cache never exposes evicted state.
    """
    tokens: list[Token] = list(result.prompt) + [s.token for s in result.steps]
    seq = TokenSequence(tuple(tokens))
    row_of = {t.position_id: i for i, t in enumerate(tokens)}
    n, p = len(tokens), len(result.prompt)
    bias = torch.full((n, n), HARD_MASK, dtype=model.dtype)
    bias[:p, :p] = 0.0  # causal part is added by run_layers
    for k, step in enumerate(result.steps):
        row = p + k
        cols = [row_of[pos] for pos in step.visible_positions] + [row]
        bias[row, cols] = 0.0
    with torch.no_grad():
        trace = run_layers(model, embed(model, seq), bias)
    return trace.logits[p:].numpy()
