"""Vision-token importance scoring, soft score masking and scorer training."""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError, InputError
from .model import MaskAddends, ToyVLM, forward_prefill, text_hidden_states
from .tokens import TokenSequence

SCORER_FORMAT_VERSION = 1
CLAMP_RANGE = (0.0, 3.0)
TRAINING_RATIOS = (0.5, 0.65, 0.75)


class Provenance(str, enum.Enum):
    LEARNED = "learned"
    COSINE = "cosine"
    SPIRAL = "spiral"


@dataclass(frozen=True)
class ImportanceScores:
    values: np.ndarray
    provenance: Provenance = Provenance.LEARNED

    def __len__(self) -> int:
        return len(self.values)


def _as_values(scores) -> np.ndarray:
    if isinstance(scores, ImportanceScores):
        return np.asarray(scores.values, dtype=np.float64)
    if isinstance(scores, torch.Tensor):
        return scores.detach().double().numpy()
    return np.asarray(scores, dtype=np.float64)


def _unit_rows(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise InputError("cannot normalize a zero-norm embedding row")
    return x / norms


def similarity(w: torch.Tensor, vision: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
    """(N, L) matrix ``(unit(V) * w) @ unit(T).T``; differentiable in ``w``."""
    if vision.dim() != 2 or text.dim() != 2 or vision.shape[0] < 1 or text.shape[0] < 1:
        raise InputError("need at least one vision and one text embedding")
    if vision.shape[1] != text.shape[1] or w.shape != (vision.shape[1],):
        raise InputError("embedding dimensions disagree")
    return (_unit_rows(vision) * w) @ _unit_rows(text).T


def score_tensor(w: torch.Tensor, vision: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
    return similarity(w, vision, text).max(dim=1).values


def score_tokens(w, vision_embs, text_embs) -> ImportanceScores:
    """Per-vision-token score: best weighted cosine match against any text token."""
    w = torch.as_tensor(np.asarray(w), dtype=torch.float64)
    vision = torch.as_tensor(np.asarray(vision_embs), dtype=torch.float64)
    text = torch.as_tensor(np.asarray(text_embs), dtype=torch.float64)
    return ImportanceScores(score_tensor(w, vision, text).numpy(), Provenance.LEARNED)


def cosine_scores(vision_embs, text_embs) -> ImportanceScores:
    dim = np.asarray(vision_embs).shape[-1]
    s = score_tokens(np.ones(dim), vision_embs, text_embs)
    return ImportanceScores(s.values, Provenance.COSINE)


def _spiral_order(height: int, width: int) -> list[tuple[int, int]]:
    """Clockwise inward spiral from the top-left cell."""
    order = []
    top, bottom, left, right = 0, height - 1, 0, width - 1
    while top <= bottom and left <= right:
        order.extend((top, c) for c in range(left, right + 1))
        order.extend((r, right) for r in range(top + 1, bottom + 1))
        if top < bottom:
            order.extend((bottom, c) for c in range(right - 1, left - 1, -1))
        if left < right:
            order.extend((r, left) for r in range(bottom - 1, top, -1))
        top, bottom, left, right = top + 1, bottom - 1, left + 1, right - 1
    return order


def spiral_scores(grid_height: int, grid_width: int, n_tokens: int | None = None) -> ImportanceScores:
    """Position-only scores: border cells lowest, the center highest.

    Cells are ordered by spiral ring (outermost first), then by distance from
    the grid center (farthest first), then by spiral visiting order. Scores
    are the resulting ranks scaled to [0, 1], so all values are distinct.
    """
    if grid_height < 1 or grid_width < 1:
        raise InputError("grid dimensions must be positive")
    n = grid_height * grid_width
    if n_tokens is not None and n_tokens != n:
        raise InputError(f"grid {grid_height}x{grid_width} does not hold {n_tokens} tokens")
    visit = {cell: i for i, cell in enumerate(_spiral_order(grid_height, grid_width))}
    cy, cx = (grid_height - 1) / 2, (grid_width - 1) / 2

    def key(cell):
        r, c = cell
        ring = min(r, grid_height - 1 - r, c, grid_width - 1 - c)
        return (ring, -math.hypot(r - cy, c - cx), visit[cell])

    ranked = sorted(visit, key=key)
    values = np.zeros(n)
    for rank, (r, c) in enumerate(ranked):
        values[r * grid_width + c] = rank / max(n - 1, 1)
    return ImportanceScores(values, Provenance.SPIRAL)


def grid_shape(n: int) -> tuple[int, int]:
    """Most square factorization ``h * w == n`` with ``h <= w``."""
    h = int(math.isqrt(n))
    while n % h:
        h -= 1
    return h, n // h


def keep_count(n: int, r: float) -> int:
    """``max(1, floor(n * r))``; the epsilon absorbs float error such as 0.29 * 100."""
    if not 0 < r <= 1:
        raise InputError(f"keep ratio {r} outside (0, 1]")
    return max(1, int(math.floor(n * r + 1e-9)))


def _rank_desc(values: np.ndarray) -> np.ndarray:
    # stable sort on the negated scores: equal scores keep the lower index first
    return np.argsort(-values, kind="stable")


def compute_threshold(scores, r: float) -> float:
    """Score of the ``keep_count(N, r)``-th highest token (a constant for gradients)."""
    values = _as_values(scores)
    if len(values) < 1:
        raise InputError("need at least one score")
    k = keep_count(len(values), r)
    return float(values[_rank_desc(values)[k - 1]])


def select_top_k(scores, r: float) -> list[int]:
    """Indices of the ``keep_count(N, r)`` best tokens, ascending; ties go to the lower index."""
    values = _as_values(scores)
    k = keep_count(len(values), r)
    return sorted(int(i) for i in _rank_desc(values)[:k])


def soft_mask(scores, theta: float, C: float, tau: float):
    """Penalties ``-C * sigmoid((theta - s) / tau)`` for each vision token.

    Returns a tensor if ``scores`` is a tensor (keeps the autograd graph),
    otherwise a numpy array.
    """
    if tau <= 0:
        raise InputError(f"tau must be positive, got {tau}")
    if C < 0:
        raise InputError(f"C must be non-negative, got {C}")
    if isinstance(scores, torch.Tensor):
        return -C * torch.sigmoid((theta - scores) / tau)
    values = torch.as_tensor(_as_values(scores))
    return (-C * torch.sigmoid((theta - values) / tau)).numpy()


def training_loss(h_masked, h_baseline, w, lam: float):
    """Mean over text positions of squared L2 error, plus ``lam * ||w - 1||^2``."""
    tensors = all(isinstance(t, torch.Tensor) for t in (h_masked, h_baseline, w))
    hm, hb, wt = (torch.as_tensor(np.asarray(t) if not isinstance(t, torch.Tensor) else t) for t in (h_masked, h_baseline, w))
    if hm.shape != hb.shape or hm.dim() != 2:
        raise InputError(f"hidden-state shapes differ: {tuple(hm.shape)} vs {tuple(hb.shape)}")
    loss = ((hm - hb) ** 2).sum(dim=1).mean() + lam * ((wt - 1) ** 2).sum()
    return loss if tensors else float(loss)


def importance_gap(scores) -> float:
    """k-th largest minus k-th smallest score, ``k = max(1, N // 4)``."""
    values = np.sort(_as_values(scores))
    n = len(values)
    if n < 1:
        raise InputError("need at least one score")
    k = max(1, n // 4)
    return float(values[n - k] - values[k - 1])


# ---------------------------------------------------------------------------
# learned scorer


@dataclass
class ScorerState:
    w: np.ndarray
    C: float = 5.0
    tau: float = 1.0
    lam: float = 0.001
    learning_rate: float = 1e-3
    epochs: int = 3
    seed: int = 0
    loss_log: list[float] = field(default_factory=list)
    corpus_fingerprint: str = ""
    # Adam moments, kept so training can resume
    exp_avg: np.ndarray | None = None
    exp_avg_sq: np.ndarray | None = None
    step: int = 0

    @classmethod
    def initial(cls, dim: int, **hyper) -> "ScorerState":
        return cls(w=np.ones(dim), **hyper)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.tau <= 0 or self.C < 0 or self.lam < 0:
            raise ConfigError("need tau > 0, C >= 0, lam >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["w"] = self.w.tolist()
        for k in ("exp_avg", "exp_avg_sq"):
            d[k] = None if d[k] is None else np.asarray(d[k]).tolist()
        return {"format_version": SCORER_FORMAT_VERSION, **d}

    @classmethod
    def from_dict(cls, data: dict) -> "ScorerState":
        data = dict(data)
        version = data.pop("format_version", None)
        if version != SCORER_FORMAT_VERSION:
            raise InputError(f"unsupported scorer format {version}")
        for k in ("exp_avg", "exp_avg_sq"):
            if data.get(k) is not None:
                data[k] = np.asarray(data[k], dtype=np.float64)
        return cls(**data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ScorerState":
        return cls.from_dict(json.loads(Path(path).read_text()))


def scoring_inputs(model: ToyVLM, seq: TokenSequence) -> tuple[torch.Tensor, torch.Tensor]:
    """Vision payloads and text token embeddings (no position term), in the model's dtype."""
    vision = torch.as_tensor(seq.vision_matrix(), dtype=model.dtype)
    text = model.token_embedding[seq.text_ids()]
    return vision, text


def masked_loss(
    model: ToyVLM,
    seq: TokenSequence,
    w: torch.Tensor,
    r: float,
    C: float,
    tau: float,
    lam: float,
    theta: float | None = None,
    baseline: torch.Tensor | None = None,
) -> tuple[torch.Tensor, float]:
    """Loss of the soft-masked pass against the unmasked one.

    ``theta`` defaults to the threshold of the current scores and is never
    differentiated through. Returns ``(loss, theta)``.
    """
    if seq.num_vision < 1 or seq.num_text < 1:
        raise InputError("need at least one vision and one text token")
    vision, text = scoring_inputs(model, seq)
    scores = score_tensor(w.to(model.dtype), vision, text)
    if theta is None:
        theta = compute_threshold(scores.detach(), r)
    penalties = soft_mask(scores, theta, C, tau)
    mask = MaskAddends.for_vision(seq, penalties)
    if baseline is None:
        with torch.no_grad():
            baseline = text_hidden_states(forward_prefill(model, seq)[0], seq)
    trace, _ = forward_prefill(model, seq, mask)
    return training_loss(text_hidden_states(trace, seq), baseline, w.to(model.dtype), lam), theta


def loss_gradient(model: ToyVLM, seq: TokenSequence, state: ScorerState, r: float, dtype=torch.float64) -> np.ndarray:
    """d(loss)/dw by backpropagation, threshold held fixed; computed in ``dtype``."""
    m = model if model.dtype == dtype else model.to(dtype)
    w = torch.tensor(state.w, dtype=dtype, requires_grad=True)
    loss, _ = masked_loss(m, seq, w, r, state.C, state.tau, state.lam)
    (grad,) = torch.autograd.grad(loss, w)
    return grad.double().numpy()


def corpus_fingerprint(corpus: Sequence[TokenSequence]) -> str:
    h = hashlib.sha256()
    for seq in corpus:
        h.update(seq.vision_matrix().astype(np.float32).tobytes())
        h.update(np.asarray(seq.text_ids(), dtype=np.int64).tobytes())
        h.update(seq.position_ids.tobytes())
    return h.hexdigest()[:16]


def train_scorer(
    model: ToyVLM,
    corpus: Sequence[TokenSequence],
    state: ScorerState,
    ratios: Sequence[float] = TRAINING_RATIOS,
    log=None,
) -> ScorerState:
    """Fit ``w`` so soft-masked outputs track unmasked ones.

    Per sample and epoch: one masked pass at a keep ratio drawn from
    ``ratios``, one optimizer step, then clamp ``w``. The unmasked pass does
    not depend on ``w`` and is computed once per sample.
    """
    if not corpus:
        raise InputError("training corpus is empty")
    rng = np.random.default_rng(state.seed)
    w = torch.tensor(state.w, dtype=torch.float32, requires_grad=True)
    opt = torch.optim.AdamW([w], lr=state.learning_rate, weight_decay=0.0)
    if state.exp_avg is not None:
        opt.state[w] = {
            "step": torch.tensor(float(state.step)),
            "exp_avg": torch.tensor(state.exp_avg, dtype=torch.float32),
            "exp_avg_sq": torch.tensor(state.exp_avg_sq, dtype=torch.float32),
        }
    with torch.no_grad():
        baselines = [text_hidden_states(forward_prefill(model, seq)[0], seq) for seq in corpus]
    loss_log = list(state.loss_log)
    for epoch in range(state.epochs):
        total = 0.0
        for seq, base in zip(corpus, baselines):
            r = float(ratios[rng.integers(len(ratios))])
            opt.zero_grad()
            loss, _ = masked_loss(model, seq, w, r, state.C, state.tau, state.lam, baseline=base)
            loss.backward()
            opt.step()
            with torch.no_grad():
                w.clamp_(*CLAMP_RANGE)
            total += loss.item()
        loss_log.append(total / len(corpus))
        if log is not None:
            log(f"epoch {epoch + 1}/{state.epochs} loss {loss_log[-1]:.6g}")
    opt_state = opt.state[w]
    return ScorerState(
        w=w.detach().double().numpy(),
        C=state.C,
        tau=state.tau,
        lam=state.lam,
        learning_rate=state.learning_rate,
        epochs=state.epochs,
        seed=state.seed,
        loss_log=loss_log,
        corpus_fingerprint=corpus_fingerprint(corpus),
        exp_avg=opt_state["exp_avg"].double().numpy(),
        exp_avg_sq=opt_state["exp_avg_sq"].double().numpy(),
        step=int(opt_state["step"]),
    )
