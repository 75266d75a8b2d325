"""Synthetic vision+text samples with controllable relevance structure.

Text ids are drawn from the model vocabulary, so text embeddings are the
model's (isotropic, fixed) token embedding rows. Each sample has three kinds
of vision tokens:

* relevant: a text direction restricted to the attention-visible dims, plus noise
* distractors: a text direction restricted to the attention-blind dims, plus
  noise. They look similar to the query under cosine similarity but attention
  cannot route on that content. Only present when the model has blind dims.
* background: isotropic noise. ``background_visibility`` scales its energy in
  the attention-visible dims (1 keeps it isotropic, 0 hides it from attention)
  and ``diffuse_alignment`` adds a weak pull towards a text token
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigError
from ..model import ToyVLM
from ..tokens import TokenSequence


@dataclass(frozen=True)
class SyntheticTaskSpec:
    n_vision: int
    n_text: int
    hidden_dim: int
    relevance_fraction: float
    alignment_strength: float
    noise_seed: int = 0
    distractor_fraction: float = 0.0
    noise_scale: float = 1.0
    background_visibility: float = 1.0
    diffuse_alignment: float = 0.0
    payload_scale: float = 1.0  # vision norm relative to the mean text-embedding norm

    def __post_init__(self):
        if not 0 <= self.background_visibility <= 1 or self.diffuse_alignment < 0 or self.payload_scale <= 0:
            raise ConfigError("invalid background_visibility, diffuse_alignment or payload_scale")
        if self.n_vision < 1 or self.n_text < 1:
            raise ConfigError("need at least one vision and one text token")
        if not 0 < self.relevance_fraction <= 1:
            raise ConfigError("relevance_fraction must be in (0, 1]")
        if not 0 <= self.distractor_fraction <= 1 or self.alignment_strength < 0 or self.noise_scale < 0:
            raise ConfigError("invalid distractor_fraction, alignment_strength or noise_scale")


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x)
    return x / n if n > 0 else x


def generate_sample(spec: SyntheticTaskSpec, seed: int, model: ToyVLM) -> TokenSequence:
    """Deterministic in ``(spec, seed)`` for a given model."""
    cfg = model.config
    if spec.hidden_dim != cfg.hidden_dim:
        raise ConfigError(f"spec hidden_dim {spec.hidden_dim} != model hidden_dim {cfg.hidden_dim}")
    d = cfg.hidden_dim
    rng = np.random.default_rng([spec.noise_seed, seed])
    ids = rng.integers(0, cfg.vocab_size, spec.n_text)
    text = model.token_embedding[ids].double().numpy()
    scale = float(np.linalg.norm(text, axis=1).mean())

    blind = np.zeros(d)
    if cfg.attn_blind_dims:
        blind[d - cfg.attn_blind_dims :] = 1.0
    visible = 1.0 - blind

    vision = rng.normal(size=(spec.n_vision, d)) / np.sqrt(d) * spec.noise_scale
    order = rng.permutation(spec.n_vision)
    reshape_background = spec.background_visibility != 1 or spec.diffuse_alignment > 0
    if reshape_background:
        hints = rng.integers(0, spec.n_text, spec.n_vision)
    n_rel = max(1, int(round(spec.relevance_fraction * spec.n_vision)))
    n_dis = int(round(spec.distractor_fraction * spec.n_vision)) if cfg.attn_blind_dims else 0
    n_dis = min(n_dis, spec.n_vision - n_rel)
    targets = rng.integers(0, spec.n_text, n_rel + n_dis)
    for slot, i in enumerate(order[:n_rel]):
        vision[i] += spec.alignment_strength * _unit(text[targets[slot]] * visible)
    for slot, i in enumerate(order[n_rel : n_rel + n_dis], start=n_rel):
        vision[i] += spec.alignment_strength * _unit(text[targets[slot]] * blind)
    if reshape_background:
        for i in order[n_rel + n_dis :]:
            norm = np.linalg.norm(vision[i])
            vision[i] = norm * _unit(vision[i] * (blind + spec.background_visibility * visible))
            vision[i] += spec.diffuse_alignment * _unit(text[hints[i]] * visible)
    return TokenSequence.from_parts((vision * scale * spec.payload_scale).astype(np.float32), ids)


@dataclass(frozen=True)
class CorpusSpec:
    """Ranges that per-sample task specs are drawn from."""

    size: int = 64
    n_vision: tuple[int, int] = (16, 32)
    n_text: tuple[int, int] = (2, 8)
    relevance_fraction: tuple[float, float] = (0.1, 0.5)
    alignment_strength: tuple[float, float] = (0.6, 0.6)
    distractor_fraction: float = 0.3
    noise_scale: float = 1.0
    # Per-sample clutter level c drawn from this range sets background
    # visibility to c and diffuse alignment to c * clutter_alignment. None
    # leaves the background isotropic.
    clutter: tuple[float, float] | None = None
    clutter_alignment: float = 0.5
    payload_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_vision", "n_text", "relevance_fraction", "alignment_strength", "clutter"):
            if getattr(self, name) is None:
                continue
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}: lower bound above upper bound")
            object.__setattr__(self, name, (lo, hi))
        if self.size < 1:
            raise ConfigError("corpus size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, data: dict) -> "CorpusSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


def _clutter_draw(rng, spec: CorpusSpec) -> dict:
    # no draw without clutter, so uncluttered corpora keep their random stream
    if spec.clutter is None:
        return {}
    c = float(rng.uniform(*spec.clutter))
    return {"background_visibility": c, "diffuse_alignment": c * spec.clutter_alignment}


def task_specs(spec: CorpusSpec, hidden_dim: int) -> list[SyntheticTaskSpec]:
    rng = np.random.default_rng([spec.seed, 7919])
    out = []
    for i in range(spec.size):
        out.append(
            SyntheticTaskSpec(
                n_vision=int(rng.integers(spec.n_vision[0], spec.n_vision[1] + 1)),
                n_text=int(rng.integers(spec.n_text[0], spec.n_text[1] + 1)),
                hidden_dim=hidden_dim,
                relevance_fraction=float(rng.uniform(*spec.relevance_fraction)),
                alignment_strength=float(rng.uniform(*spec.alignment_strength)),
                noise_seed=spec.seed,
                distractor_fraction=spec.distractor_fraction,
                noise_scale=spec.noise_scale,
                payload_scale=spec.payload_scale,
                **_clutter_draw(rng, spec),
            )
        )
    return out


def make_corpus(model: ToyVLM, spec: CorpusSpec) -> list[TokenSequence]:
    return [generate_sample(t, i, model) for i, t in enumerate(task_specs(spec, model.config.hidden_dim))]
