"""Scripted ten-step decode traces with pencil-and-paper expected evictions.

Each runner builds a cache by hand (no model), appends one slot per step,
applies the policy, and returns ``[(step, slot_id), ...]`` from the event log.
"""

import numpy as np
import torch

from asymprune.cache import KVCache
from asymprune.eviction import EvictionConfig, Policy, asym_evict, h2o_evict, streaming_evict, turn_evict
from asymprune.tokens import Modality, Phase

STEPS = 10


def _prefill(n_vision=2, n_text=2):
    cache = KVCache(num_layers=2, hidden_dim=4)
    for i in range(n_vision + n_text):
        cache.append(Modality.VISION if i < n_vision else Modality.TEXT, Phase.PREFILL, i)
    return cache


def _pairs(log):
    return [(e.step, e.slot_id) for e in log]


# Final-layer attention weight per generated slot, constant over steps.
# Hand trace with text budget 3 (generated slots 4..13):
#   step 3: {4:.5, 5:.1, 6:.4, 7:.3}        -> evict 5
#   step 4: {4, 6, 7, 8:.05}                -> evict 8
#   step 5: {4, 6, 7:.3, 9:.6}              -> evict 7
#   step 6: {4, 6, 9, 10:.2}                -> evict 10
#   step 7: {4, 6, 9, 11:.35}               -> evict 11
#   step 8: {4, 6, 9, 12:.15}               -> evict 12
#   step 9: {4:.5, 6:.4, 9:.6, 13:.45}      -> evict 6
ASYM_SALIENCE = {4: 0.5, 5: 0.1, 6: 0.4, 7: 0.3, 8: 0.05, 9: 0.6, 10: 0.2, 11: 0.35, 12: 0.15, 13: 0.45}
ASYM_EXPECTED = [(3, 5), (4, 8), (5, 7), (6, 10), (7, 11), (8, 12), (9, 6)]


def run_asym_trace():
    cache, log = _prefill(), []
    cfg = EvictionConfig(Policy.ASYM_THRESHOLD, text_budget=3)
    for step in range(STEPS):
        cache.append(Modality.TEXT, Phase.GENERATED, 4 + step, token_id=step)
        row = np.array([ASYM_SALIENCE.get(s, 1.0) for s in cache.slot_ids])
        asym_evict(cache, cfg, row / row.sum(), step=step, log=log)
    return _pairs(log), cache


# Accumulated attention. Prefill slots start at (3.0, 0.2, 1.0, 2.0); every
# step a new slot receives 1.5 and older slots receive their fixed weight.
# Cache budget 6:
#   step 2: 1 has 0.2                                   -> evict 1 (prefill)
#   step 3: 2 has 1.2, others >= 1.5                     -> evict 2 (prefill)
#   step 4: 5 and 8 both at 1.5                          -> evict 5 (lower slot id)
#   steps 5..9: the new slot (1.5) is the minimum        -> evict 9, 10, 11, 12, 13
H2O_PREFILL = (3.0, 0.2, 1.0, 2.0)
H2O_SALIENCE = {0: 0.1, 1: 0.0, 2: 0.05, 3: 0.1, 4: 0.3, 5: 0.0, 6: 0.2, 7: 0.1,
                8: 0.4, 9: 0.0, 10: 0.3, 11: 0.05, 12: 0.5, 13: 0.1}
H2O_EXPECTED = [(2, 1), (3, 2), (4, 5), (5, 9), (6, 10), (7, 11), (8, 12), (9, 13)]


def run_h2o_trace():
    cache, log = _prefill(), []
    cache.accumulate(np.array(H2O_PREFILL))
    cfg = EvictionConfig(Policy.H2O, text_budget=2, cache_budget=6)
    for step in range(STEPS):
        new = cache.append(Modality.TEXT, Phase.GENERATED, 4 + step, token_id=step)
        row = np.array([1.5 if s == new else H2O_SALIENCE[s] for s in cache.slot_ids])
        h2o_evict(cache, cfg, step_attention=row, step=step, log=log)
    return _pairs(log), cache


# Budget 6 with 2 sinks: from step 2 on, the slot just after the sinks leaves.
STREAMING_EXPECTED = [(2, 2), (3, 3), (4, 4), (5, 5), (6, 6), (7, 7), (8, 8), (9, 9)]


def run_streaming_trace():
    cache, log = _prefill(), []
    cfg = EvictionConfig(Policy.STREAMING, text_budget=2, sink_count=2, cache_budget=6)
    for step in range(STEPS):
        cache.append(Modality.TEXT, Phase.GENERATED, 4 + step, token_id=step)
        streaming_evict(cache, cfg, step=step, log=log)
    return _pairs(log), cache


# Three turns over a 4-dim space with one-hot token embeddings (id i -> e_i).
# Images: turn 0 -> e1, turn 1 -> e2, turn 2 -> e0. Text budget 6.
#   slots 0, 1: turn-0 image and question (prefill)
#   steps 0, 1: turn-0 answer ids (0, 1)            slots 2, 3
#   steps 2, 3: turn-1 image and question             slots 4, 5
#   steps 4, 5: turn-1 answer ids (2, 2)              slots 6, 7
#   steps 6, 7: turn-2 image and question             slots 8, 9
#   steps 8, 9: turn-2 answer ids (0, 1)              slots 10, 11
# Step 7: 7 text slots; against e0 turn 0 scores 0.5, turn 1 scores 0 -> evict 6, 7.
# Step 9: 7 text slots again; only turn 0 is a past answer      -> evict 2, 3.
TURN_EXPECTED = [(7, 6), (7, 7), (9, 2), (9, 3)]
TURN_TABLE = torch.eye(4)
TURN_IMAGES = {0: np.eye(4)[1:2], 1: np.eye(4)[2:3], 2: np.eye(4)[0:1]}
TURN_SCRIPT = [  # (turn, modality, phase, token id)
    (0, Modality.TEXT, Phase.GENERATED, 0), (0, Modality.TEXT, Phase.GENERATED, 1),
    (1, Modality.VISION, Phase.PREFILL, None), (1, Modality.TEXT, Phase.PREFILL, 3),
    (1, Modality.TEXT, Phase.GENERATED, 2), (1, Modality.TEXT, Phase.GENERATED, 2),
    (2, Modality.VISION, Phase.PREFILL, None), (2, Modality.TEXT, Phase.PREFILL, 3),
    (2, Modality.TEXT, Phase.GENERATED, 0), (2, Modality.TEXT, Phase.GENERATED, 1),
]


def run_turn_trace():
    cache, log = KVCache(1, 4), []
    cache.append(Modality.VISION, Phase.PREFILL, 0, 0)
    cache.append(Modality.TEXT, Phase.PREFILL, 1, 0, token_id=3)
    cfg = EvictionConfig(Policy.TURN_LEVEL, text_budget=6)
    for step, (turn, modality, phase, tid) in enumerate(TURN_SCRIPT):
        cache.append(modality, phase, 2 + step, turn, token_id=tid)
        turn_evict(cache, cfg, TURN_TABLE, TURN_IMAGES[turn], np.ones(4), turn, step=step, log=log)
    return _pairs(log), cache, log
