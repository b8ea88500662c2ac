"""Network architectures: the CityTFT surrogate plus RNN and transformer baselines.

All three models map (static 13-vector, 24x13 weather matrix) to per-step
trigger probabilities (seq_len x 2, sigmoid) and quantile projections
(seq_len x 2 x n_quantiles, linear). CityTFT is an encoder-only network:
per-variable embeddings, instance-wise variable selection, static enrichment,
causal interpretable self-attention, and a position-wise gated residual block.
There is no future/decoder branch; every step sees only observed inputs at or
before its own position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

MODEL_KINDS = ("tft", "rnn", "transformer")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    dropout: float = 0.1
    quantiles: tuple[float, ...] = (0.1, 0.5, 0.9)
    n_static_vars: int = 13
    n_temporal_vars: int = 13
    seq_len: int = 24
    n_channels: int = 2
    seed: int = 2024

    def __post_init__(self):
        if self.d_model <= 0 or self.n_heads <= 0:
            raise ValueError("d_model and n_heads must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout={self.dropout} outside [0, 1)")
        q = tuple(self.quantiles)
        if sorted(set(q)) != list(q) or any(not 0.0 < v < 1.0 for v in q):
            raise ValueError(f"quantiles must be sorted, unique, and in (0, 1): {q}")
        if 0.5 not in q:
            raise ValueError("quantiles must include the median 0.5 (used for prediction assembly)")
        object.__setattr__(self, "quantiles", q)
        if min(self.n_static_vars, self.n_temporal_vars, self.seq_len, self.n_channels) <= 0:
            raise ValueError("variable counts, seq_len, and n_channels must be positive")

    @property
    def n_quantiles(self) -> int:
        return len(self.quantiles)

    @property
    def median_index(self) -> int:
        return self.quantiles.index(0.5)

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model, "n_heads": self.n_heads, "dropout": self.dropout,
            "quantiles": list(self.quantiles), "n_static_vars": self.n_static_vars,
            "n_temporal_vars": self.n_temporal_vars, "seq_len": self.seq_len,
            "n_channels": self.n_channels, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["quantiles"] = tuple(d["quantiles"])
        return cls(**d)


@dataclass
class ModelOutput:
    """Per-step trigger probabilities and quantile projections (normalized space)."""

    trigger_probs: Tensor                 # (batch, seq_len, n_channels), in (0, 1)
    quantile_proj: Tensor                 # (batch, seq_len, n_channels, n_quantiles)
    static_weights: Optional[Tensor] = None    # (batch, n_static_vars)
    temporal_weights: Optional[Tensor] = None  # (batch, seq_len, n_temporal_vars)
    attention: Optional[Tensor] = None         # (batch, seq_len, seq_len), head-averaged


def _check_finite(name: str, *tensors: Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise RuntimeError(f"non-finite activations in {name}")


class VariableEmbedding(nn.Module):
    """Independent linear transforms lifting each scalar variable to d_model."""

    def __init__(self, n_vars: int, d_model: int):
        super().__init__()
        bound = 1.0 / math.sqrt(d_model)
        self.weight = nn.Parameter(torch.empty(n_vars, d_model).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(n_vars, d_model).uniform_(-bound, bound))

    def forward(self, x: Tensor) -> Tensor:
        # (..., n_vars) -> (..., n_vars, d_model)
        return x.unsqueeze(-1) * self.weight + self.bias


class GatedLinearUnit(nn.Module):
    """GLU(x) = value(x) * sigmoid(gate(x)); a fully closed gate passes nothing."""

    def __init__(self, d_model: int):
        super().__init__()
        self.value = nn.Linear(d_model, d_model)
        self.gate = nn.Linear(d_model, d_model)

    def forward(self, x: Tensor) -> Tensor:
        return self.value(x) * torch.sigmoid(self.gate(x))


class GatedResidualNetwork(nn.Module):
    """Same-shape gated residual block with an optional additive context input.

    output = LayerNorm(a + GLU(dropout(fc2(ELU(fc1(a) + fc_context(c))))))
    The context term is dropped when no context is supplied.
    """

    def __init__(self, d_model: int, dropout: float = 0.0, context: bool = False):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_model)
        self.fc_context = nn.Linear(d_model, d_model, bias=False) if context else None
        self.fc2 = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)
        self.glu = GatedLinearUnit(d_model)
        self.norm = nn.LayerNorm(d_model)

    def forward(self, a: Tensor, context: Optional[Tensor] = None) -> Tensor:
        if a.shape[-1] != self.fc1.in_features:
            raise ValueError(
                f"expected trailing dimension {self.fc1.in_features}, got {a.shape[-1]}"
            )
        hidden = self.fc1(a)
        if context is not None:
            if self.fc_context is None:
                raise ValueError("this block was built without a context input")
            hidden = hidden + self.fc_context(context)
        hidden = self.fc2(F.elu(hidden))
        return self.norm(a + self.glu(self.dropout(hidden)))


class MultiGRN(nn.Module):
    """A bank of per-variable gated residual blocks applied in parallel.

    Equivalent to n_vars independent GatedResidualNetwork instances over the
    (..., n_vars, d_model) axis, batched into single einsum weights.
    """

    def __init__(self, n_vars: int, d_model: int, dropout: float = 0.0):
        super().__init__()
        bound = 1.0 / math.sqrt(d_model)

        def w():
            return nn.Parameter(torch.empty(n_vars, d_model, d_model).uniform_(-bound, bound))

        def b():
            return nn.Parameter(torch.empty(n_vars, d_model).uniform_(-bound, bound))

        self.w1, self.b1 = w(), b()
        self.w2, self.b2 = w(), b()
        self.w_value, self.b_value = w(), b()
        self.w_gate, self.b_gate = w(), b()
        self.ln_weight = nn.Parameter(torch.ones(n_vars, d_model))
        self.ln_bias = nn.Parameter(torch.zeros(n_vars, d_model))
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        hidden = F.elu(torch.einsum("...vi,vio->...vo", x, self.w1) + self.b1)
        hidden = self.dropout(torch.einsum("...vi,vio->...vo", hidden, self.w2) + self.b2)
        value = torch.einsum("...vi,vio->...vo", hidden, self.w_value) + self.b_value
        gate = torch.einsum("...vi,vio->...vo", hidden, self.w_gate) + self.b_gate
        y = x + value * torch.sigmoid(gate)
        mean = y.mean(dim=-1, keepdim=True)
        var = y.var(dim=-1, keepdim=True, unbiased=False)
        return (y - mean) / torch.sqrt(var + 1e-5) * self.ln_weight + self.ln_bias


class VariableSelection(nn.Module):
    """Instance-wise softmax weighting over per-variable embeddings.

    Selection weights come from a GRN over the flattened embeddings (optionally
    conditioned on a static context); the output is the weight-averaged bank of
    per-variable GRN transforms.
    """

    def __init__(self, n_vars: int, d_model: int, dropout: float = 0.0, context: bool = False):
        super().__init__()
        self.n_vars = n_vars
        self.var_grns = MultiGRN(n_vars, d_model, dropout)
        self.flatten_proj = nn.Linear(n_vars * d_model, d_model)
        self.weight_grn = GatedResidualNetwork(d_model, dropout, context=context)
        self.weight_head = nn.Linear(d_model, n_vars)

    def forward(self, embedded: Tensor, context: Optional[Tensor] = None):
        if embedded.shape[-2] != self.n_vars:
            raise ValueError(f"expected {self.n_vars} variables, got {embedded.shape[-2]}")
        flat = embedded.reshape(*embedded.shape[:-2], embedded.shape[-2] * embedded.shape[-1])
        logits = self.weight_head(self.weight_grn(self.flatten_proj(flat), context))
        weights = torch.softmax(logits, dim=-1)
        combined = (weights.unsqueeze(-1) * self.var_grns(embedded)).sum(dim=-2)
        return combined, weights


class CausalSelfAttention(nn.Module):
    """Interpretable multi-head self-attention restricted to positions <= t.

    Queries and keys are per-head; the value projection is shared across heads
    and weighted by the head-averaged attention matrix. A gated residual wraps
    the attention output. Returns (output, head-averaged attention weights).
    """

    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)  # shared across heads
        self.out_proj = nn.Linear(d_model, d_model)
        self.attn_dropout = nn.Dropout(dropout)
        self.dropout = nn.Dropout(dropout)
        self.gate = GatedLinearUnit(d_model)
        self.norm = nn.LayerNorm(d_model)

    def forward(self, x: Tensor):
        batch, steps, d_model = x.shape
        q = self.q_proj(x).view(batch, steps, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(x).view(batch, steps, self.n_heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        mask = torch.triu(torch.ones(steps, steps, dtype=torch.bool, device=x.device), diagonal=1)
        scores = scores.masked_fill(mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)          # (batch, heads, steps, steps)
        avg_attn = attn.mean(dim=1)                   # (batch, steps, steps)
        context = self.attn_dropout(avg_attn) @ self.v_proj(x)
        out = self.out_proj(context)
        return self.norm(x + self.gate(self.dropout(out))), avg_attn


class OutputHeads(nn.Module):
    """Shared output heads: sigmoid trigger probabilities + linear quantile projections."""

    def __init__(self, d_model: int, n_channels: int, n_quantiles: int):
        super().__init__()
        self.n_channels = n_channels
        self.n_quantiles = n_quantiles
        self.trigger = nn.Linear(d_model, n_channels)
        self.quantile = nn.Linear(d_model, n_channels * n_quantiles)

    def forward(self, latent: Tensor):
        probs = torch.sigmoid(self.trigger(latent))
        proj = self.quantile(latent).view(*latent.shape[:-1], self.n_channels, self.n_quantiles)
        return probs, proj


def _validate_inputs(cfg: ModelConfig, static: Tensor, weather: Tensor):
    if static.dim() != 2 or static.shape[-1] != cfg.n_static_vars:
        raise ValueError(f"static must be (batch, {cfg.n_static_vars}), got {tuple(static.shape)}")
    if weather.dim() != 3 or weather.shape[-1] != cfg.n_temporal_vars:
        raise ValueError(
            f"weather must be (batch, seq_len, {cfg.n_temporal_vars}), got {tuple(weather.shape)}"
        )
    if static.shape[0] != weather.shape[0]:
        raise ValueError("static and weather batch sizes differ")
    if not torch.isfinite(static).all() or not torch.isfinite(weather).all():
        raise ValueError("model inputs must be finite")


class CityTFT(nn.Module):
    """Encoder-only temporal fusion network with trigger and quantile heads."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d, p = cfg.d_model, cfg.dropout
        self.static_embed = VariableEmbedding(cfg.n_static_vars, d)
        self.temporal_embed = VariableEmbedding(cfg.n_temporal_vars, d)
        self.static_vsn = VariableSelection(cfg.n_static_vars, d, p)
        self.ctx_selection = GatedResidualNetwork(d, p)
        self.ctx_enrichment = GatedResidualNetwork(d, p)
        self.temporal_vsn = VariableSelection(cfg.n_temporal_vars, d, p, context=True)
        self.enrichment = GatedResidualNetwork(d, p, context=True)
        self.attention = CausalSelfAttention(d, cfg.n_heads, p)
        self.position_grn = GatedResidualNetwork(d, p)
        self.heads = OutputHeads(d, cfg.n_channels, cfg.n_quantiles)

    def encode_static(self, static: Tensor):
        """Static latent plus the two context vectors derived from it."""
        embedded = self.static_embed(static)
        latent, weights = self.static_vsn(embedded)
        return latent, self.ctx_selection(latent), self.ctx_enrichment(latent), weights

    def forward(self, static: Tensor, weather: Tensor) -> ModelOutput:
        _validate_inputs(self.cfg, static, weather)
        latent, c_sel, c_enr, s_weights = self.encode_static(static)
        _check_finite("static encoder", latent, c_sel, c_enr)
        embedded = self.temporal_embed(weather)
        selected, t_weights = self.temporal_vsn(embedded, context=c_sel.unsqueeze(1))
        _check_finite("temporal variable selection", selected)
        enriched = self.enrichment(selected, context=c_enr.unsqueeze(1))
        _check_finite("static enrichment", enriched)
        attended, attn = self.attention(enriched)
        _check_finite("causal self-attention", attended)
        processed = self.position_grn(attended)
        _check_finite("position-wise feed-forward", processed)
        probs, proj = self.heads(processed)
        _check_finite("output heads", probs, proj)
        return ModelOutput(
            trigger_probs=probs,
            quantile_proj=proj,
            static_weights=s_weights,
            temporal_weights=t_weights,
            attention=attn,
        )


class BaselineRNN(nn.Module):
    """Gated recurrent stack over weather with the static vector joined at each step."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.gru = nn.GRU(
            input_size=cfg.n_temporal_vars + cfg.n_static_vars,
            hidden_size=cfg.d_model,
            num_layers=2,
            dropout=cfg.dropout,
            batch_first=True,
        )
        self.heads = OutputHeads(cfg.d_model, cfg.n_channels, cfg.n_quantiles)

    def forward(self, static: Tensor, weather: Tensor) -> ModelOutput:
        _validate_inputs(self.cfg, static, weather)
        steps = weather.shape[1]
        joined = torch.cat([weather, static.unsqueeze(1).expand(-1, steps, -1)], dim=-1)
        latent, _ = self.gru(joined)
        _check_finite("recurrent stack", latent)
        probs, proj = self.heads(latent)
        _check_finite("output heads", probs, proj)
        return ModelOutput(trigger_probs=probs, quantile_proj=proj)


def sinusoidal_positions(seq_len: int, d_model: int) -> Tensor:
    position = torch.arange(seq_len, dtype=torch.float32).unsqueeze(1)
    div = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float32) * (-math.log(10000.0) / d_model))
    pe = torch.zeros(seq_len, d_model)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div[: (d_model + 1) // 2])
    return pe


class BaselineTransformer(nn.Module):
    """Standard transformer encoder with the same causal mask and output heads."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.input_proj = nn.Linear(cfg.n_temporal_vars + cfg.n_static_vars, cfg.d_model)
        self.register_buffer("positions", sinusoidal_positions(cfg.seq_len, cfg.d_model))
        layer = nn.TransformerEncoderLayer(
            d_model=cfg.d_model,
            nhead=cfg.n_heads,
            dim_feedforward=4 * cfg.d_model,
            dropout=cfg.dropout,
            batch_first=True,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=2, enable_nested_tensor=False)
        self.heads = OutputHeads(cfg.d_model, cfg.n_channels, cfg.n_quantiles)

    def forward(self, static: Tensor, weather: Tensor) -> ModelOutput:
        _validate_inputs(self.cfg, static, weather)
        steps = weather.shape[1]
        joined = torch.cat([weather, static.unsqueeze(1).expand(-1, steps, -1)], dim=-1)
        x = self.input_proj(joined) + self.positions[:steps].to(joined.dtype)
        mask = torch.triu(torch.ones(steps, steps, dtype=torch.bool, device=x.device), diagonal=1)
        latent = self.encoder(x, mask=mask)
        _check_finite("transformer encoder", latent)
        probs, proj = self.heads(latent)
        _check_finite("output heads", probs, proj)
        return ModelOutput(trigger_probs=probs, quantile_proj=proj)


def build_model(cfg: ModelConfig, kind: str = "tft") -> nn.Module:
    """Construct a model with deterministic, seed-controlled initialization."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    torch.manual_seed(cfg.seed)
    if kind == "tft":
        return CityTFT(cfg)
    if kind == "rnn":
        return BaselineRNN(cfg)
    return BaselineTransformer(cfg)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
