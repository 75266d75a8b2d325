"""A small frozen decoder-only transformer used as the VLM surrogate.

Weights are drawn once from a seeded normal distribution and never updated.
Attention accepts additive logit penalties on top of the causal mask, which is
how both the soft score mask and hard pruning masks are applied.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .cache import KVCache
from .errors import ConfigError, InputError, StateError
from .tokens import Modality, Phase, Token, TokenSequence

# Stand-in for -inf in attention logits; large enough that exp() underflows to 0.
HARD_MASK = -1e9

WEIGHTS_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    num_heads: int = 4
    hidden_dim: int = 64
    ffn_dim: int = 256
    vocab_size: int = 256
    max_positions: int = 512
    init_seed: int = 0
    init_std: float = 0.02
    # std of the query/key projections; None means init_std
    qk_std: float | None = None
    # share one draw between query and key projections
    tie_qk: bool = False
    # trailing embedding dims with zero query/key rows: content there is
    # invisible to attention scores but still flows through values
    attn_blind_dims: int = 0

    def __post_init__(self):
        counts = dict(
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            hidden_dim=self.hidden_dim,
            ffn_dim=self.ffn_dim,
            vocab_size=self.vocab_size,
            max_positions=self.max_positions,
        )
        for name, value in counts.items():
            if int(value) < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if not 0 <= self.attn_blind_dims < self.hidden_dim:
            raise ConfigError("attn_blind_dims must leave at least one visible dim")
        if self.init_std <= 0 or (self.qk_std is not None and self.qk_std <= 0):
            raise ConfigError("init std must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


@dataclass(frozen=True)
class LayerWeights:
    wq: torch.Tensor
    wk: torch.Tensor
    wv: torch.Tensor
    wo: torch.Tensor
    w_up: torch.Tensor
    w_down: torch.Tensor
    attn_gain: torch.Tensor
    ffn_gain: torch.Tensor

    def to(self, dtype: torch.dtype) -> "LayerWeights":
        return LayerWeights(**{k: v.to(dtype) for k, v in self.__dict__.items()})


@dataclass(frozen=True)
class ToyVLM:
    config: ModelConfig
    token_embedding: torch.Tensor
    position_embedding: torch.Tensor
    layers: tuple[LayerWeights, ...]
    final_gain: torch.Tensor

    @property
    def dtype(self) -> torch.dtype:
        return self.token_embedding.dtype

    def to(self, dtype: torch.dtype) -> "ToyVLM":
        """Copy with every weight cast to ``dtype`` (float64 for gradient checks)."""
        return ToyVLM(
            self.config,
            self.token_embedding.to(dtype),
            self.position_embedding.to(dtype),
            tuple(layer.to(dtype) for layer in self.layers),
            self.final_gain.to(dtype),
        )

    def named_weights(self) -> list[tuple[str, torch.Tensor]]:
        out = [("token_embedding", self.token_embedding), ("position_embedding", self.position_embedding)]
        for i, layer in enumerate(self.layers):
            out.extend((f"layers.{i}.{k}", v) for k, v in layer.__dict__.items())
        out.append(("final_gain", self.final_gain))
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, tensor in self.named_weights():
            h.update(name.encode())
            h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def init_model(config: ModelConfig) -> ToyVLM:
    """Draw all weights from N(0, init_std^2) with a generator seeded by ``init_seed``."""
    gen = torch.Generator().manual_seed(int(config.init_seed))
    d, m = config.hidden_dim, config.ffn_dim
    qk_std = config.qk_std if config.qk_std is not None else config.init_std

    def normal(*shape, std=config.init_std):
        return torch.randn(*shape, generator=gen, dtype=torch.float32) * std

    token_embedding = normal(config.vocab_size, d)
    position_embedding = normal(config.max_positions, d)
    visible = torch.ones(d, 1)
    if config.attn_blind_dims:
        visible[d - config.attn_blind_dims :] = 0.0
    layers = []
    for _ in range(config.num_layers):
        wq = normal(d, d, std=qk_std) * visible
        wk = wq.clone() if config.tie_qk else normal(d, d, std=qk_std) * visible
        layers.append(
            LayerWeights(
                wq=wq,
                wk=wk,
                wv=normal(d, d),
                wo=normal(d, d),
                w_up=normal(d, m),
                w_down=normal(m, d),
                attn_gain=torch.ones(d),
                ffn_gain=torch.ones(d),
            )
        )
    model = ToyVLM(config, token_embedding, position_embedding, tuple(layers), torch.ones(d))
    for _, tensor in model.named_weights():
        tensor.requires_grad_(False)
    return model


def save_model(model: ToyVLM, path: str | Path) -> None:
    """Write weights and config to an ``.npz`` archive (bit-exact round trip)."""
    arrays = {name: t.detach().cpu().numpy() for name, t in model.named_weights()}
    meta = {"format_version": WEIGHTS_FORMAT_VERSION, "config": model.config.to_dict()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)


def load_model(path: str | Path) -> ToyVLM:
    with np.load(path) as data:
        meta = json.loads(data["__meta__"].tobytes().decode())
        if meta.get("format_version") != WEIGHTS_FORMAT_VERSION:
            raise InputError(f"unsupported weights format {meta.get('format_version')}")
        config = ModelConfig.from_dict(meta["config"])
        t = {k: torch.from_numpy(data[k].copy()) for k in data.files if k != "__meta__"}
    layers = tuple(
        LayerWeights(**{f: t[f"layers.{i}.{f}"] for f in LayerWeights.__dataclass_fields__})
        for i in range(config.num_layers)
    )
    return ToyVLM(config, t["token_embedding"], t["position_embedding"], layers, t["final_gain"])


# ---------------------------------------------------------------------------
# forward passes


@dataclass
class ForwardTrace:
    attentions: list[torch.Tensor]  # per layer, (heads, n, n), post-softmax
    hidden: torch.Tensor  # (n, d) final-norm hidden states
    keys: list[torch.Tensor]  # per layer, (n, d)
    values: list[torch.Tensor]
    logits: torch.Tensor | None = None  # (n, vocab)


@dataclass
class DecodeOutput:
    logits: torch.Tensor  # (vocab,)
    final_attention: torch.Tensor  # (heads, slots) at the last layer
    attention_sum: np.ndarray  # (slots,) summed over heads and layers
    hidden: torch.Tensor  # (d,)
    slot_id: int

    @property
    def final_attention_mean(self) -> np.ndarray:
        return self.final_attention.mean(dim=0).double().numpy()


def _norm(x: torch.Tensor, gain: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:], eps=eps) * gain


def embed(model: ToyVLM, seq: TokenSequence) -> torch.Tensor:
    """Input embeddings: payload (vision) or token embedding (text) plus position embedding."""
    cfg = model.config
    rows = []
    for tok in seq:
        rows.append(_embed_token(model, tok))
    if not rows:
        return torch.zeros(0, cfg.hidden_dim, dtype=model.dtype)
    return torch.stack(rows)


def _embed_token(model: ToyVLM, tok: Token) -> torch.Tensor:
    cfg = model.config
    if not 0 <= tok.position_id < cfg.max_positions:
        raise InputError(f"position {tok.position_id} outside [0, {cfg.max_positions})")
    pos = model.position_embedding[tok.position_id]
    if tok.modality is Modality.VISION:
        payload = torch.as_tensor(np.asarray(tok.payload), dtype=model.dtype)
        if payload.shape != (cfg.hidden_dim,):
            raise InputError(f"vision payload must have shape ({cfg.hidden_dim},)")
        return payload + pos
    tid = int(tok.payload)
    if not 0 <= tid < cfg.vocab_size:
        raise InputError(f"text id {tid} outside vocabulary")
    return model.token_embedding[tid] + pos


def run_layers(model: ToyVLM, x: torch.Tensor, bias: torch.Tensor | None = None) -> ForwardTrace:
    """Run all layers over embeddings ``x`` (n, d).

    ``bias`` is an additive logit term, either per key column (n,) or a full
    (n, n) matrix; the causal mask is always applied on top.
    """
    cfg = model.config
    n, d = x.shape
    heads, hd = cfg.num_heads, cfg.head_dim
    causal = torch.full((n, n), HARD_MASK, dtype=x.dtype).triu(1)
    if bias is None:
        total_bias = causal
    else:
        bias = bias.to(x.dtype)
        total_bias = causal + (bias.unsqueeze(0) if bias.dim() == 1 else bias)
    scale = 1.0 / math.sqrt(hd)
    attentions, keys, values = [], [], []
    h = x
    for layer in model.layers:
        a = _norm(h, layer.attn_gain)
        q, k, v = a @ layer.wq, a @ layer.wk, a @ layer.wv
        keys.append(k)
        values.append(v)
        qh = q.view(n, heads, hd).transpose(0, 1)
        kh = k.view(n, heads, hd).transpose(0, 1)
        vh = v.view(n, heads, hd).transpose(0, 1)
        logits = qh @ kh.transpose(1, 2) * scale + total_bias
        attn = torch.softmax(logits, dim=-1)
        attentions.append(attn)
        h = h + (attn @ vh).transpose(0, 1).reshape(n, d) @ layer.wo
        f = _norm(h, layer.ffn_gain)
        h = h + F.gelu(f @ layer.w_up) @ layer.w_down
    hidden = _norm(h, model.final_gain)
    return ForwardTrace(attentions, hidden, keys, values, hidden @ model.token_embedding.T)


def _mask_tensor(mask, n: int, dtype: torch.dtype) -> torch.Tensor | None:
    if mask is None:
        return None
    vec = mask.values if isinstance(mask, MaskAddends) else mask
    vec = torch.as_tensor(vec, dtype=dtype) if not isinstance(vec, torch.Tensor) else vec
    if vec.shape != (n,):
        raise InputError(f"mask length {tuple(vec.shape)} does not match sequence length {n}")
    return vec


@dataclass
class MaskAddends:
    """Per-position additive logit penalties, shared by every layer and head."""

    values: torch.Tensor

    @classmethod
    def zeros(cls, n: int, dtype: torch.dtype = torch.float32) -> "MaskAddends":
        return cls(torch.zeros(n, dtype=dtype))

    @classmethod
    def hard(cls, seq: TokenSequence, masked: list[int] | set[int], dtype: torch.dtype = torch.float32) -> "MaskAddends":
        """Hard-mask the sequence positions in ``masked`` (text positions are not allowed)."""
        vals = torch.zeros(len(seq), dtype=dtype)
        for i in masked:
            if not seq[i].is_vision:
                raise InputError("only vision positions may be masked")
            vals[i] = HARD_MASK
        return cls(vals)

    @classmethod
    def for_vision(cls, seq: TokenSequence, penalties) -> "MaskAddends":
        """Scatter ``penalties`` (one per vision token) into a full-length vector."""
        penalties = torch.as_tensor(penalties)
        idx = seq.vision_indices
        if penalties.shape != (len(idx),):
            raise InputError("one penalty per vision token required")
        vals = torch.zeros(len(seq), dtype=penalties.dtype)
        vals = vals.index_put((torch.tensor(idx, dtype=torch.long),), penalties) if idx else vals
        return cls(vals)


def forward_prefill(
    model: ToyVLM, seq: TokenSequence, mask: MaskAddends | torch.Tensor | None = None
) -> tuple[ForwardTrace, KVCache]:
    """Causal forward over ``seq`` with optional additive mask; returns trace and a filled cache."""
    x = embed(model, seq)
    trace = run_layers(model, x, _mask_tensor(mask, len(seq), x.dtype))
    cache = KVCache(model.config.num_layers, model.config.hidden_dim, model.dtype)
    attn_received = _received(trace.attentions)
    for i, tok in enumerate(seq):
        cache.append(
            tok.modality,
            tok.phase,
            tok.position_id,
            tok.turn_id,
            None if tok.is_vision else int(tok.payload),
            torch.stack([k[i] for k in trace.keys]).detach(),
            torch.stack([v[i] for v in trace.values]).detach(),
        )
    cache.accumulate(attn_received)
    return trace, cache


def _received(attentions: list[torch.Tensor]) -> np.ndarray:
    """Attention mass each key column received, summed over layers, heads and queries."""
    total = sum(a.detach().double().sum(dim=(0, 1)) for a in attentions)
    return total.numpy()


def text_hidden_states(trace: ForwardTrace, seq: TokenSequence) -> torch.Tensor:
    """Final hidden states at text positions, in sequence order."""
    return trace.hidden[seq.text_indices]


def forward_decode_step(model: ToyVLM, token: Token, cache: KVCache) -> DecodeOutput:
    """Process one token against ``cache``; the cache is extended in place."""
    if len(cache) == 0:
        raise StateError("decode requires a cache populated by prefill")
    if cache.meta and token.position_id <= cache.meta[-1].position_id:
        raise InputError("decode token must come after every cached position")
    cfg = model.config
    heads, hd, d = cfg.num_heads, cfg.head_dim, cfg.hidden_dim
    scale = 1.0 / math.sqrt(hd)
    h = _embed_token(model, token).to(cache.dtype).unsqueeze(0)
    new_k, new_v, attn_rows = [], [], []
    for li, layer in enumerate(model.layers):
        a = _norm(h, layer.attn_gain)
        q, k, v = a @ layer.wq, a @ layer.wk, a @ layer.wv
        new_k.append(k[0])
        new_v.append(v[0])
        keys = torch.cat([cache.keys[li], k])
        vals = torch.cat([cache.values[li], v])
        s = keys.shape[0]
        qh = q.view(heads, 1, hd)
        kh = keys.view(s, heads, hd).transpose(0, 1)
        vh = vals.view(s, heads, hd).transpose(0, 1)
        attn = torch.softmax(qh @ kh.transpose(1, 2) * scale, dim=-1)  # (heads, 1, s)
        attn_rows.append(attn[:, 0, :])
        h = h + (attn @ vh).transpose(0, 1).reshape(1, d) @ layer.wo
        f = _norm(h, layer.ffn_gain)
        h = h + F.gelu(f @ layer.w_up) @ layer.w_down
    hidden = _norm(h, model.final_gain)[0]
    slot_id = cache.append(
        token.modality,
        token.phase,
        token.position_id,
        token.turn_id,
        None if token.is_vision else int(token.payload),
        torch.stack(new_k),
        torch.stack(new_v),
    )
    attention_sum = sum(r.double().sum(dim=0) for r in attn_rows).numpy()
    cache.accumulate(attention_sum)
    return DecodeOutput(hidden @ model.token_embedding.T, attn_rows[-1], attention_sum, hidden, slot_id)
