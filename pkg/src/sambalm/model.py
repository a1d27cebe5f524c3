"""Layer-stack assembly: interleaving patterns, init, whole-model forward/loss.

Every intermediate layer is wrapped pre-norm residual style,
x <- x + Layer(RMSNorm(x)), with a final RMSNorm before the untied LM head.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .layers import (
    KVCache,
    MambaParams,
    MambaState,
    MLPParams,
    SWAParams,
    _uniform,
    init_mamba_params,
    init_mlp_params,
    init_swa_params,
    mamba_forward,
    mlp_forward,
    swa_forward,
)
from .numerics import Tensor, cross_entropy, embedding_lookup, matmul, rmsnorm

PATTERNS: dict[str, list[str]] = {
    "samba": ["mamba", "mlp", "swa", "mlp"],
    "mamba-swa-mlp": ["mamba", "swa", "mlp"],
    "mamba-mlp": ["mamba", "mlp"],
    "mamba": ["mamba"],
    "llama-swa": ["swa", "mlp"],
}


def layer_pattern(arch: str, n_layers: int) -> list[str]:
    """Expand an architecture name into its per-layer kind list."""
    if arch not in PATTERNS:
        raise ConfigError(f"unknown architecture {arch!r}; choose from {sorted(PATTERNS)}")
    period = PATTERNS[arch]
    if n_layers % len(period) != 0:
        raise ConfigError(
            f"arch {arch!r} has period {len(period)}; n_layers={n_layers} is not divisible"
        )
    return period * (n_layers // len(period))


@dataclass
class ModelConfig:
    d_m: int = 64
    d_e: int = 128
    d_r: int = 4
    d_s: int = 16
    k: int = 4
    d_p: int = 171
    w: int = 64
    n_layers: int = 8
    n_q_heads: int = 4
    n_kv_heads: int = 2
    head_dim: int = 16
    vocab_size: int = 256
    rope_base: float = 10000.0
    rope_enabled: bool = True
    arch: str = "samba"
    rms_eps: float = 1e-5
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if self.arch not in PATTERNS:
            problems.append(f"arch {self.arch!r} not in {sorted(PATTERNS)}")
        elif self.n_layers % len(PATTERNS[self.arch]) != 0:
            problems.append(
                f"n_layers={self.n_layers} not divisible by period {len(PATTERNS[self.arch])}"
            )
        if self.d_e < self.d_m or self.d_e % self.d_m != 0:
            problems.append(f"d_e={self.d_e} must be a multiple (>=1x) of d_m={self.d_m}")
        for name in ("d_m", "d_r", "d_s", "d_p", "w", "n_layers", "vocab_size"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.k < 1:
            problems.append("k must be >= 1")
        if self.n_q_heads < 1 or self.n_kv_heads < 1 or self.n_q_heads % self.n_kv_heads != 0:
            problems.append(
                f"n_q_heads={self.n_q_heads} must be a positive multiple of "
                f"n_kv_heads={self.n_kv_heads}"
            )
        if self.head_dim < 2 or self.head_dim % 2 != 0:
            problems.append(f"head_dim={self.head_dim} must be even and >= 2")
        if self.rms_eps <= 0:
            problems.append(f"rms_eps={self.rms_eps} must be > 0")
        if self.rope_base <= 0:
            problems.append(f"rope_base={self.rope_base} must be > 0")
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{f.name: d[f.name] for f in dataclasses.fields(cls) if f.name in d})


@dataclass
class LayerSlot:
    kind: str
    params: MambaParams | SWAParams | MLPParams
    gamma: Tensor


@dataclass
class ParamSpec:
    name: str
    tensor: Tensor
    decay: bool


# parameters excluded from weight decay: norm gains, the gate bias, and the
# scan's state-transition/skip parameters
_NO_DECAY_FIELDS = {"b", "a", "d"}


@dataclass
class Model:
    config: ModelConfig
    embed: Tensor
    layers: list[LayerSlot]
    final_gamma: Tensor
    head: Tensor
    _registry: list[ParamSpec] = field(default_factory=list, repr=False)

    def parameters(self) -> list[ParamSpec]:
        return self._registry

    def param_count(self) -> int:
        return sum(p.tensor.size for p in self._registry)

    def zero_grad(self) -> None:
        for p in self._registry:
            p.tensor.zero_grad()

    def fresh_states(self) -> list[MambaState | KVCache | None]:
        cfg = self.config
        states: list[MambaState | KVCache | None] = []
        for slot in self.layers:
            if slot.kind == "mamba":
                states.append(MambaState(cfg.d_e, cfg.d_s, cfg.k))
            elif slot.kind == "swa":
                states.append(KVCache(cfg.w, cfg.n_kv_heads, cfg.head_dim))
            else:
                states.append(None)
        return states

    def forward(self, tokens, states=None, pos_offset: int = 0, recorder=None) -> Tensor:
        """Token ids -> logits (n, V). ``states`` turns it into a stream chunk."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 1 or tokens.size < 1:
            raise ContractError(f"forward: tokens must be a non-empty 1-D sequence")
        cfg = self.config
        x = embedding_lookup(self.embed, tokens)
        for idx, slot in enumerate(self.layers):
            h = rmsnorm(x, slot.gamma, cfg.rms_eps)
            state = states[idx] if states is not None else None
            if slot.kind == "mamba":
                on_delta = recorder.delta_hook(idx) if recorder is not None else None
                y = mamba_forward(h, slot.params, state=state, on_delta=on_delta)
            elif slot.kind == "swa":
                on_probs = recorder.probs_hook(idx) if recorder is not None else None
                y = swa_forward(h, slot.params, pos_offset=pos_offset, cache=state,
                                on_probs=on_probs)
            else:
                y = mlp_forward(h, slot.params)
            x = x + y
        x = rmsnorm(x, self.final_gamma, cfg.rms_eps)
        return matmul(x, self.head)

    def loss(self, tokens, mask=None) -> Tensor:
        """Mean next-token cross entropy of logits[0..n-2] vs tokens[1..n-1].

        ``mask`` (length n-1) restricts which target positions are scored.
        """
        tokens = np.asarray(tokens)
        if tokens.ndim != 1 or tokens.size < 2:
            raise ContractError("loss needs at least 2 tokens")
        logits = self.forward(tokens[:-1])
        return cross_entropy(logits, tokens[1:], mask=mask)


def build(cfg: ModelConfig) -> Model:
    """Deterministically initialize a model from its config (seeded)."""
    cfg.validate()
    kinds = layer_pattern(cfg.arch, cfg.n_layers)
    n_blocks = sum(1 for kind in kinds if kind in ("mamba", "swa"))
    out_scale = 1.0 / np.sqrt(2.0 * n_blocks)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5A3B]))

    embed = Tensor(_uniform(rng, (cfg.vocab_size, cfg.d_m), cfg.d_m), requires_grad=True)
    slots: list[LayerSlot] = []
    for kind in kinds:
        if kind == "mamba":
            params = init_mamba_params(rng, cfg.d_m, cfg.d_e, cfg.d_r, cfg.d_s, cfg.k,
                                       out_scale)
        elif kind == "swa":
            params = init_swa_params(rng, cfg.d_m, cfg.n_q_heads, cfg.n_kv_heads,
                                     cfg.head_dim, cfg.w, cfg.rope_base,
                                     cfg.rope_enabled, out_scale)
        else:
            params = init_mlp_params(rng, cfg.d_m, cfg.d_p, out_scale)
        gamma = Tensor(np.ones(cfg.d_m), requires_grad=True)
        slots.append(LayerSlot(kind, params, gamma))
    final_gamma = Tensor(np.ones(cfg.d_m), requires_grad=True)
    head = Tensor(_uniform(rng, (cfg.d_m, cfg.vocab_size), cfg.d_m, scale=out_scale),
                  requires_grad=True)

    model = Model(cfg, embed, slots, final_gamma, head)
    registry = [ParamSpec("embed", embed, True)]
    for idx, slot in enumerate(slots):
        for f in dataclasses.fields(slot.params):
            t = getattr(slot.params, f.name)
            if isinstance(t, Tensor):
                decay = f.name not in _NO_DECAY_FIELDS
                registry.append(ParamSpec(f"layers.{idx}.{slot.kind}.{f.name}", t, decay))
        registry.append(ParamSpec(f"layers.{idx}.gamma", slot.gamma, False))
    registry.append(ParamSpec("final_gamma", final_gamma, False))
    registry.append(ParamSpec("head", head, True))
    model._registry = registry
    return model
