"""Experiment configuration and the pruning / eviction / calibration runs."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from ..budget import (
    CalibrationSample,
    LinearMapPolicy,
    ThresholdSweepPolicy,
    calibrate_linear,
    calibrate_threshold,
    mean_mse,
    policy_from_dict,
    prune_vision,
    realized_average,
    UniformPolicy,
)
from ..engine import TurnInput, generate, run_conversation
from ..errors import ConfigError
from ..eviction import EvictionConfig, Policy
from ..metrics import CostModel, flops_saved, kv_bytes
from ..model import ModelConfig, ToyVLM, forward_prefill, init_model, text_hidden_states
from ..scorer import (
    ImportanceScores,
    ScorerState,
    cosine_scores,
    grid_shape,
    importance_gap,
    keep_count,
    score_tokens,
    scoring_inputs,
    spiral_scores,
    train_scorer,
)
from ..tokens import Phase, TokenSequence
from .corpus import CorpusSpec, make_corpus
from .oracles import edit_distance, hidden_mse, loo_oracle, spearman
from .report import ReportRecord

logger = logging.getLogger(__name__)

CONFIG_SCHEMA_VERSION = 1

# Surrogate used by the experiments: tied query/key projections with a larger
# init std give content-based attention, and half the embedding dims are
# invisible to attention so that cosine similarity and output importance can
# disagree.
EXPERIMENT_MODEL = ModelConfig(qk_std=0.2, tie_qk=True, attn_blind_dims=32)
METHODS = ("learned", "cosine", "spiral")

# Calibration corpus with heterogeneous gaps: per-sample clutter sets how much
# attention-visible, weakly text-aligned background surrounds the relevant tokens.
CALIBRATION_CORPUS = CorpusSpec(
    size=200,
    relevance_fraction=(0.25, 0.3),
    alignment_strength=(0.8, 0.8),
    distractor_fraction=0.0,
    clutter=(0.0, 1.0),
    clutter_alignment=0.5,
    payload_scale=3.0,
    seed=5,
)
EVICTION_POLICIES = (Policy.ASYM_THRESHOLD, Policy.H2O, Policy.STREAMING)


@dataclass(frozen=True)
class TrainingSettings:
    C: float = 5.0
    tau: float = 1.0
    lam: float = 0.001
    learning_rate: float = 1e-3
    epochs: int = 3


@dataclass(frozen=True)
class CalibrationSettings:
    target_avg: float = 0.65
    r_min: float = 0.4
    r_max: float = 0.9


@dataclass(frozen=True)
class EvictionSettings:
    retentions: tuple[float, ...] = (0.9, 0.75, 0.5)
    max_new_tokens: int = 40
    sink_count: int = 4
    samples: int = 8
    conversations: int = 2
    turns: int = 3
    answer_len: int = 12


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    model: ModelConfig = EXPERIMENT_MODEL
    train_corpus: CorpusSpec = CorpusSpec(size=256, seed=1)
    eval_corpus: CorpusSpec = CorpusSpec(size=24, seed=2)
    calibration_corpus: CorpusSpec = CALIBRATION_CORPUS
    scorer_source: str = "train"  # train | file | cosine
    scorer_path: str | None = None
    methods: tuple[str, ...] = METHODS
    keep_ratios: tuple[float, ...] = (1.0, 0.75, 0.65, 0.5)
    budget_policy: dict | None = None  # adaptive policy applied on top of the uniform sweep
    policy_path: str | None = None
    training: TrainingSettings = TrainingSettings()
    calibration: CalibrationSettings = CalibrationSettings()
    eviction: EvictionSettings = EvictionSettings()
    cost_model: dict | None = None
    loo_max_vision: int = 64
    jobs: int = 1

    def __post_init__(self):
        if self.scorer_source not in ("train", "file", "cosine"):
            raise ConfigError(f"unknown scorer source {self.scorer_source!r}")
        if any(not 0 < r <= 1 for r in self.keep_ratios) or any(not 0 < r <= 1 for r in self.eviction.retentions):
            raise ConfigError("keep ratios and retentions must lie in (0, 1]")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown scoring methods {sorted(unknown)}")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train_corpus"] = self.train_corpus.to_dict()
        d["eval_corpus"] = self.eval_corpus.to_dict()
        d["calibration_corpus"] = self.calibration_corpus.to_dict()
        return {"schema_version": CONFIG_SCHEMA_VERSION, **json.loads(json.dumps(d))}

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        version = data.pop("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema {version}")
        nested = {
            "model": ModelConfig.from_dict,
            "train_corpus": CorpusSpec.from_dict,
            "eval_corpus": CorpusSpec.from_dict,
            "calibration_corpus": CorpusSpec.from_dict,
            "training": lambda d: TrainingSettings(**d),
            "calibration": lambda d: CalibrationSettings(**d),
            "eviction": lambda d: EvictionSettings(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}),
        }
        for key, build in nested.items():
            if key in data:
                data[key] = build(data[key])
        for key in ("methods", "keep_ratios"):
            if key in data:
                data[key] = tuple(data[key])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed)

    def corpus(self, model: ToyVLM, which: str) -> list[TokenSequence]:
        specs = {"train": self.train_corpus, "eval": self.eval_corpus, "calibration": self.calibration_corpus}
        if which not in specs:
            raise ConfigError(f"unknown corpus {which!r}")
        spec = specs[which]
        return make_corpus(model, replace(spec, seed=spec.seed + 10007 * self.seed))

    def costs(self) -> CostModel:
        if self.cost_model:
            return CostModel(**self.cost_model)
        return CostModel.from_model_config(self.model)


def parallel_map(fn: Callable, items: Sequence, jobs: int) -> list:
    """Ordered map; results are reduced in input order whatever ``jobs`` is."""
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# scorer plumbing


def fit_scorer(cfg: ExperimentConfig, model: ToyVLM) -> ScorerState:
    t = cfg.training
    state = ScorerState.initial(
        model.config.hidden_dim, C=t.C, tau=t.tau, lam=t.lam, learning_rate=t.learning_rate, epochs=t.epochs, seed=cfg.seed
    )
    return train_scorer(model, cfg.corpus(model, "train"), state, log=logger.info)


def scorer_weights(cfg: ExperimentConfig, model: ToyVLM) -> np.ndarray:
    if cfg.scorer_source == "cosine":
        return np.ones(model.config.hidden_dim)
    if cfg.scorer_source == "file":
        if not cfg.scorer_path or not Path(cfg.scorer_path).exists():
            raise ConfigError(f"scorer file not found: {cfg.scorer_path}")
        try:
            w = ScorerState.load(cfg.scorer_path).w
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"unreadable scorer file {cfg.scorer_path}: {exc}") from exc
        if w.shape != (model.config.hidden_dim,):
            raise ConfigError("scorer dimension does not match the model")
        return w
    return fit_scorer(cfg, model).w


def score_sample(method: str, model: ToyVLM, seq: TokenSequence, w: np.ndarray) -> ImportanceScores:
    vision, text = scoring_inputs(model, seq)
    if method == "learned":
        return score_tokens(w, vision.numpy(), text.numpy())
    if method == "cosine":
        return cosine_scores(vision.numpy(), text.numpy())
    h, wd = grid_shape(seq.num_vision)
    return spiral_scores(h, wd, seq.num_vision)


def baseline_text_hidden(model: ToyVLM, seq: TokenSequence) -> torch.Tensor:
    with torch.no_grad():
        return text_hidden_states(forward_prefill(model, seq)[0], seq)


def pruned_mse(model: ToyVLM, seq: TokenSequence, scores, r: float, baseline: torch.Tensor | None = None) -> float:
    """Text hidden-state MSE of the physically pruned sequence against the full one."""
    if baseline is None:
        baseline = baseline_text_hidden(model, seq)
    pruned = prune_vision(seq, scores, r)
    return hidden_mse(baseline_text_hidden(model, pruned), baseline)


def calibration_samples(model: ToyVLM, corpus: Sequence[TokenSequence], w: np.ndarray) -> list[CalibrationSample]:
    out = []
    for seq in corpus:
        scores = score_sample("learned", model, seq, w)
        base = baseline_text_hidden(model, seq)

        def evaluate(k, seq=seq, scores=scores, base=base):
            return pruned_mse(model, seq, scores, k / seq.num_vision, base)

        out.append(CalibrationSample(importance_gap(scores), seq.num_vision, evaluate))
    return out


@dataclass
class CalibrationOutcome:
    threshold: ThresholdSweepPolicy
    linear: LinearMapPolicy
    target_avg: float
    uniform_mse: float
    threshold_mse: float
    linear_mse: float
    threshold_avg: float
    linear_avg: float
    threshold_log: list = field(default_factory=list)
    linear_log: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["threshold"] = self.threshold.to_dict()
        d["linear"] = self.linear.to_dict()
        return d


def run_calibration(cfg: ExperimentConfig, model: ToyVLM, w: np.ndarray, corpus: Sequence[TokenSequence]) -> CalibrationOutcome:
    """Calibrate both adaptive policies and compare with uniform pruning at the target ratio."""
    c = cfg.calibration
    samples = calibration_samples(model, corpus, w)
    tlog, llog = [], []
    threshold = calibrate_threshold(samples, c.target_avg, log=tlog)
    linear = calibrate_linear(samples, c.target_avg, c.r_min, c.r_max, log=llog)
    uniform = UniformPolicy(c.target_avg)
    return CalibrationOutcome(
        threshold=threshold,
        linear=linear,
        target_avg=c.target_avg,
        uniform_mse=mean_mse(uniform, samples),
        threshold_mse=mean_mse(threshold, samples),
        linear_mse=mean_mse(linear, samples),
        threshold_avg=realized_average(threshold, samples),
        linear_avg=realized_average(linear, samples),
        threshold_log=tlog,
        linear_log=llog,
    )


def gap_stats(model: ToyVLM, corpus: Sequence[TokenSequence], w: np.ndarray, bins: int = 20) -> dict:
    """Mean, std and a fixed-bin histogram of importance gaps under scorer ``w``."""
    if not corpus:
        raise ConfigError("corpus is empty")
    gaps = np.array([importance_gap(score_sample("learned", model, s, w)) for s in corpus])
    upper = max(1.0, float(np.ceil(gaps.max())))
    counts, edges = np.histogram(gaps, bins=bins, range=(0.0, upper))
    return {
        "count": int(len(gaps)),
        "mean": float(gaps.mean()),
        "std": float(gaps.std()),
        "histogram": {"edges": [float(e) for e in edges], "counts": [int(c) for c in counts]},
    }


# ---------------------------------------------------------------------------
# pruning evaluation


def _adaptive_policy(cfg: ExperimentConfig):
    if cfg.policy_path:
        path = Path(cfg.policy_path)
        if not path.exists():
            raise ConfigError(f"policy file not found: {path}")
        doc = json.loads(path.read_text())
        return policy_from_dict(doc.get("policy", doc))
    if cfg.budget_policy:
        return policy_from_dict(cfg.budget_policy)
    return None


def run_pruning_eval(cfg: ExperimentConfig, model: ToyVLM | None = None, w: np.ndarray | None = None) -> list[ReportRecord]:
    """Score, prune and compare every eval sample under each method and keep ratio."""
    model = model or init_model(cfg.model)
    methods = [m for m in cfg.methods if not (m == "learned" and cfg.scorer_source == "cosine")]
    if w is None:
        w = scorer_weights(cfg, model) if "learned" in methods else np.ones(model.config.hidden_dim)
    policy = _adaptive_policy(cfg)
    costs = cfg.costs()
    corpus = cfg.corpus(model, "eval")

    def one(item):
        idx, seq = item
        base = baseline_text_hidden(model, seq)
        n, l = seq.num_vision, seq.num_text
        loo = loo_oracle(model, seq) if n <= cfg.loo_max_vision else None
        rows = []
        for method in methods:
            scores = score_sample(method, model, seq, w)
            gap = importance_gap(scores)
            rho = spearman(scores.values, loo) if loo is not None else None
            plans = [("uniform", r, r) for r in cfg.keep_ratios]
            if policy is not None:
                plans.append((policy.kind, cfg.calibration.target_avg, policy.ratio(gap)))
            for budget, nominal, r in plans:
                k = keep_count(n, r)
                rows.append(
                    ReportRecord(
                        experiment="prune",
                        sample=idx,
                        method=method,
                        budget=budget,
                        ratio=float(nominal),
                        n_vision=n,
                        n_text=l,
                        n_full=n + l,
                        n_kept=k + l,
                        applied_ratio=float(r),
                        gap=gap,
                        mse=pruned_mse(model, seq, scores, r, base),
                        spearman=rho,
                        flops_saved=flops_saved(n + l, k + l, costs),
                        flops_saved_vision=flops_saved(n, k, costs),
                        kv_bytes_full=kv_bytes(n + l, costs),
                        kv_bytes_kept=kv_bytes(k + l, costs),
                    )
                )
        return rows

    return [r for rows in parallel_map(one, list(enumerate(corpus)), cfg.jobs) for r in rows]


# ---------------------------------------------------------------------------
# eviction evaluation


def _step_hidden_mse(ref, run) -> float:
    a = np.stack([s.hidden for s in ref.steps])
    b = np.stack([s.hidden for s in run.steps])
    return float(((a.astype(np.float64) - b) ** 2).sum(axis=1).mean())


def _event_dicts(events, **extra) -> list[dict]:
    return [{**extra, **e.to_dict()} for e in events]


def single_turn_config(policy: Policy, retention: float, prompt_len: int, settings: EvictionSettings) -> EvictionConfig:
    text_budget = max(1, int(round(retention * settings.max_new_tokens)))
    cache_budget = None if policy is Policy.ASYM_THRESHOLD else prompt_len + text_budget
    return EvictionConfig(policy, text_budget, settings.sink_count, retention, cache_budget)


def multi_turn_config(policy: Policy, retention: float, turns: Sequence[TurnInput], settings: EvictionSettings) -> EvictionConfig:
    answer_budget = max(1, int(round(retention * settings.answer_len * len(turns))))
    questions = sum(len(t.question_ids) for t in turns)
    prompt = sum(len(t.vision) + len(t.question_ids) for t in turns)
    if policy is Policy.TURN_LEVEL:
        return EvictionConfig(policy, questions + answer_budget, settings.sink_count, retention)
    if policy is Policy.ASYM_THRESHOLD:
        return EvictionConfig(policy, answer_budget, settings.sink_count, retention)
    return EvictionConfig(policy, answer_budget, settings.sink_count, retention, prompt + answer_budget)


def run_eviction_eval(
    cfg: ExperimentConfig, model: ToyVLM | None = None, w: np.ndarray | None = None
) -> tuple[list[ReportRecord], list[dict]]:
    """Greedy decoding under each policy and retention, compared with the unevicted run.

    Returns report records and the flat eviction-event log.
    """
    model = model or init_model(cfg.model)
    s = cfg.eviction
    costs = cfg.costs()
    corpus = cfg.corpus(model, "eval")
    prompts = corpus[: s.samples]

    def single(item):
        idx, prompt = item
        ref = generate(model, prompt, s.max_new_tokens)
        p = len(prompt)
        rows, events = [], []
        for retention in s.retentions:
            for policy in EVICTION_POLICIES:
                ecfg = single_turn_config(policy, retention, p, s)
                run = generate(model, prompt, s.max_new_tokens, ecfg)
                rows.append(_eviction_record("evict", idx, policy, retention, ecfg, prompt.num_vision,
                                             prompt.num_text, p + s.max_new_tokens, ref, run, costs))
                events += _event_dicts(run.events, experiment="evict", sample=idx, retention=retention)
        return rows, events

    results = parallel_map(single, list(enumerate(prompts)), cfg.jobs)

    needs_w = s.conversations > 0
    if needs_w and w is None:
        w = scorer_weights(cfg, model)
    conversations = []
    for c in range(s.conversations):
        chunk = corpus[(c * s.turns) % len(corpus):][: s.turns]
        if len(chunk) < s.turns:
            break
        conversations.append([TurnInput(seq.vision_matrix(), seq.text_ids()) for seq in chunk])

    def multi(item):
        idx, turns = item
        ref = run_conversation(model, turns, s.answer_len)
        total = sum(len(t.vision) + len(t.question_ids) for t in turns) + s.answer_len * len(turns)
        n_vision = sum(len(t.vision) for t in turns)
        n_text = sum(len(t.question_ids) for t in turns)
        rows, events = [], []
        for retention in s.retentions:
            for policy in (Policy.TURN_LEVEL, *EVICTION_POLICIES):
                ecfg = multi_turn_config(policy, retention, turns, s)
                run = run_conversation(model, turns, s.answer_len, ecfg, w)
                rows.append(_eviction_record("evict_multiturn", idx, policy, retention, ecfg, n_vision, n_text,
                                             total, ref, run, costs))
                events += _event_dicts(run.events, experiment="evict_multiturn", sample=idx, retention=retention)
        return rows, events

    results += parallel_map(multi, list(enumerate(conversations)), cfg.jobs)
    records = [r for rows, _ in results for r in rows]
    events = [e for _, evs in results for e in evs]
    return records, events


def _eviction_record(experiment, idx, policy, retention, ecfg, n_vision, n_text, n_full, ref, run, costs) -> ReportRecord:
    peak = run.peak_occupancy
    return ReportRecord(
        experiment=experiment,
        sample=idx,
        method=policy.value,
        budget="retention",
        ratio=float(retention),
        n_vision=n_vision,
        n_text=n_text,
        n_full=n_full,
        n_kept=peak,
        text_budget=ecfg.text_budget,
        edit_distance=edit_distance(ref.tokens, run.tokens),
        hidden_mse=_step_hidden_mse(ref, run),
        evictions=len(run.events),
        prefill_evicted=sum(e.phase == Phase.PREFILL.value for e in run.events),
        peak_tokens=peak,
        kv_bytes_full=kv_bytes(n_full, costs),
        kv_bytes_kept=kv_bytes(peak, costs),
    )
