"""FLOPs and KV-cache accounting.

Per-layer prefill cost for ``n`` tokens is ``4 n d^2 + 2 n^2 d + 3 n d m``
(QKV + output projections, attention scores and mixing, gated FFN).
Everything is integer arithmetic, so values are exact.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .errors import ConfigError, InputError


@dataclass(frozen=True)
class CostModel:
    hidden_dim: int
    ffn_dim: int
    num_layers: int = 1
    num_heads: int = 1
    bytes_per_element: int = 2

    def __post_init__(self):
        for name in ("hidden_dim", "ffn_dim", "num_layers", "num_heads", "bytes_per_element"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.hidden_dim % self.num_heads:
            raise ConfigError("hidden_dim must be a multiple of num_heads")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @classmethod
    def from_model_config(cls, config, bytes_per_element: int = 4) -> "CostModel":
        return cls(config.hidden_dim, config.ffn_dim, config.num_layers, config.num_heads, bytes_per_element)


def flops_per_layer(n: int, model: CostModel) -> int:
    if n < 1:
        raise InputError("sequence length must be >= 1")
    d, m = model.hidden_dim, model.ffn_dim
    return 4 * n * d * d + 2 * n * n * d + 3 * n * d * m


def flops(n: int, model: CostModel) -> int:
    """Prefill FLOPs over all layers."""
    return flops_per_layer(n, model) * model.num_layers


def flops_saved(n_full: int, n_kept: int, model: CostModel) -> float:
    if not 1 <= n_kept <= n_full:
        raise InputError(f"need 1 <= n_kept ({n_kept}) <= n_full ({n_full})")
    return 1.0 - flops_per_layer(n_kept, model) / flops_per_layer(n_full, model)


def kv_bytes(n: int, model: CostModel) -> int:
    if n < 0:
        raise InputError("token count must be non-negative")
    return n * model.num_layers * 2 * model.hidden_dim * model.bytes_per_element


@dataclass
class UsageReport:
    flops_full: int
    flops_pruned: int
    flops_saved: float
    kv_bytes_full: int
    kv_bytes_pruned: int
    peak_token_count: int
    census: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def usage_report(n_full: int, n_kept: int, model: CostModel, peak_token_count: int | None = None, census=None) -> UsageReport:
    return UsageReport(
        flops_full=flops(n_full, model),
        flops_pruned=flops(n_kept, model),
        flops_saved=flops_saved(n_full, n_kept, model),
        kv_bytes_full=kv_bytes(n_full, model),
        kv_bytes_pruned=kv_bytes(n_kept, model),
        peak_token_count=n_kept if peak_token_count is None else peak_token_count,
        census=dict(census or {}),
    )
