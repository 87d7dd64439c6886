"""Tiny decoder-only transformer with mixture-of-experts feed-forward layers.

Every block is: pre-norm causal self-attention, then a pre-norm MoE layer
whose router picks the top-k experts per token (dropless: each token is
processed by exactly k experts). Gate weights are the raw softmax routing
probabilities by default; ``renormalize_gates`` switches to the
normalized-over-top-k convention. Two auxiliary losses regularize the
router: a load-balancing term and a z-loss on router logits.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import rng
from . import tensor as T
from .errors import ConfigurationError, InputError
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    vocab_size: int = 512
    seq_len: int = 128
    n_experts: int = 16
    top_k: int = 2
    expert_hidden: int = 64
    aux_loss_weight: float = 0.01
    z_loss_weight: float = 0.001
    renormalize_gates: bool = False

    def __post_init__(self):
        dims = (self.n_layers, self.d_model, self.n_heads, self.vocab_size,
                self.seq_len, self.n_experts, self.expert_hidden)
        if any(d <= 0 for d in dims):
            raise ConfigurationError(f"all dimensions must be positive: {self}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigurationError(
                f"top_k must satisfy 1 <= k <= n_experts, got k={self.top_k}, E={self.n_experts}"
            )
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Canonical parameter name -> shape map, in storage order."""
    d, e, h = config.d_model, config.n_experts, config.expert_hidden
    shapes: dict[str, tuple] = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.seq_len, d),
    }
    for i in range(config.n_layers):
        shapes[f"layers.{i}.attn_norm.g"] = (d,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"layers.{i}.attn.{w}"] = (d, d)
        shapes[f"layers.{i}.moe_norm.g"] = (d,)
        shapes[f"layers.{i}.router.w"] = (d, e)
        for ex in range(e):
            shapes[f"layers.{i}.experts.{ex}.w_gate"] = (d, h)
            shapes[f"layers.{i}.experts.{ex}.w_up"] = (d, h)
            shapes[f"layers.{i}.experts.{ex}.w_down"] = (h, d)
    shapes["out_norm.g"] = (d,)
    shapes["lm_head.w"] = (d, config.vocab_size)
    return shapes


def init_params(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Fresh parameters; each tensor gets its own named stream."""
    d = config.d_model
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        gen = rng.stream(seed, "init", name)
        if name.endswith("norm.g"):
            data = np.ones(shape)
        elif "router" in name or name in ("tok_emb", "pos_emb", "lm_head.w"):
            # small init keeps starting routing diffuse and starting CE near ln V
            data = gen.normal(0.0, 0.02, size=shape)
        else:
            data = gen.normal(0.0, shape[0] ** -0.5, size=shape)
        params[name] = T.parameter(data)
    return params


@dataclass
class RouterOutput:
    """Per-token routing decisions at one layer.

    ``probs`` is the full post-softmax distribution over experts (one row
    per token), ``topk_indices`` the k selected expert ids per token in
    descending-probability order (ties to the lowest index), and
    ``gate_weights`` the combination weights for the selected experts.
    """

    probs: Tensor            # [N, E]
    topk_indices: np.ndarray  # [N, k]
    gate_weights: Tensor      # [N, k]
    logits: Tensor            # [N, E], kept for the z-loss


@dataclass
class MoELayerTrace:
    layer: int
    probs: np.ndarray         # [N, E]
    topk: np.ndarray          # [N, k]
    n_tokens: int


def top_k_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """The k largest-probability experts per row, ties to the lowest index."""
    return np.argsort(-probs, axis=-1, kind="stable")[:, :k]


def route(hidden: Tensor, router_w: Tensor, k: int, renormalize: bool = False) -> RouterOutput:
    n, _ = hidden.shape
    e = router_w.shape[-1]
    if k > e:
        raise ConfigurationError(f"top_k={k} exceeds n_experts={e}")
    logits = T.matmul(hidden, router_w)
    probs = T.softmax(logits)
    idx = top_k_indices(probs.data, k)
    flat = (np.arange(n)[:, None] * e + idx).ravel()
    gates = T.reshape(T.take(T.reshape(probs, (n * e,)), flat), (n, k))
    if renormalize:
        gates = T.div(gates, T.tsum(gates, axis=1, keepdims=True))
    return RouterOutput(probs=probs, topk_indices=idx, gate_weights=gates, logits=logits)


def expert_mlp(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    """SwiGLU feed-forward: (silu(x Wg) * (x Wu)) Wd."""
    return T.matmul(T.mul(T.silu(T.matmul(x, w_gate)), T.matmul(x, w_up)), w_down)


def moe_forward(hidden: Tensor, expert_weights: list[tuple[Tensor, Tensor, Tensor]],
                router_out: RouterOutput, layer: int,
                collect_trace: bool = False) -> tuple[Tensor, MoELayerTrace | None]:
    """Dropless top-k dispatch: every token is processed by exactly k experts.

    out[t] = sum over selected experts e of gate(t,e) * Expert_e(hidden[t]).
    Each token owns exactly k (token, slot) pairs, so dispatch and combine
    are pure row permutations plus a sum over the slot axis.
    """
    n, d = hidden.shape
    k = router_out.topk_indices.shape[1]
    n_experts = len(expert_weights)
    flat_expert = router_out.topk_indices.ravel()
    order = np.argsort(flat_expert, kind="stable")
    counts = np.bincount(flat_expert, minlength=n_experts)
    bounds = np.concatenate([[0], np.cumsum(counts)])

    sorted_inputs = T.permute_rows(T.repeat_rows(hidden, k), order)
    parts = []
    for e in range(n_experts):
        lo, hi = int(bounds[e]), int(bounds[e + 1])
        if lo == hi:
            continue
        parts.append(expert_mlp(T.slice_rows(sorted_inputs, lo, hi), *expert_weights[e]))
    ys = T.permute_rows(T.concat_rows(parts), np.argsort(order))
    weighted = T.mul(T.reshape(ys, (n, k, d)),
                     T.reshape(router_out.gate_weights, (n, k, 1)))
    out = T.tsum(weighted, axis=1)

    trace = None
    if collect_trace:
        trace = MoELayerTrace(layer=layer, probs=router_out.probs.data.copy(),
                              topk=router_out.topk_indices.copy(), n_tokens=n)
    return out, trace


def load_balance_loss(probs, topk_indices) -> Tensor:
    """Switch-style balance term E * sum_e f_e * pbar_e for one layer's batch.

    f_e counts (token, slot) assignments to expert e normalized by T*k;
    pbar_e is the mean routing probability. Equals 1 at perfectly uniform
    routing. Differentiable through ``probs`` only (f is a constant).
    """
    probs_t = probs if isinstance(probs, Tensor) else Tensor(np.asarray(probs))
    n, n_experts = probs_t.shape
    if n == 0:
        raise InputError("load_balance_loss on empty batch")
    k = np.asarray(topk_indices).shape[1]
    f = np.bincount(np.asarray(topk_indices).ravel(), minlength=n_experts) / float(n * k)
    pbar = T.tmean(probs_t, axis=0)
    return T.mul(T.tsum(T.mul(pbar, f)), float(n_experts))


def router_z_loss(logits) -> Tensor:
    """Mean squared log-partition: mean_t (logsumexp(logits_t))^2."""
    logits_t = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits))
    lse = T.logsumexp(logits_t)
    return T.tmean(T.mul(lse, lse))


_CAUSAL_BIAS_CACHE: dict[int, np.ndarray] = {}


def _causal_bias(length: int) -> np.ndarray:
    bias = _CAUSAL_BIAS_CACHE.get(length)
    if bias is None:
        bias = np.triu(np.full((length, length), -1e30), k=1)
        _CAUSAL_BIAS_CACHE[length] = bias
    return bias


def causal_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Fused causal softmax attention on [B, H, T, dh] tensors.

    One op instead of a chain keeps only the attention probabilities alive
    for backward; the [B, H, T, T] temporaries would otherwise dominate
    memory traffic. Callers fold the 1/sqrt(dh) scale into q.
    """
    length = q.shape[2]
    scores = np.matmul(q.data, k.data.swapaxes(-1, -2))
    scores += _causal_bias(length)
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    attn = scores  # [B, H, T, T], masked entries exactly zero
    out_data = np.matmul(attn, v.data)
    if not T.grad_enabled() or not any(t.requires_grad for t in (q, k, v)):
        return Tensor(out_data)

    def backward(g):
        if v.requires_grad:
            v._accumulate(np.matmul(attn.swapaxes(-1, -2), g))
        ga = np.matmul(g, v.data.swapaxes(-1, -2))
        inner = np.einsum("...ij,...ij->...i", ga, attn)[..., None]
        ga -= inner
        ga *= attn  # d(loss)/d(scores)
        if q.requires_grad:
            q._accumulate(np.matmul(ga, k.data))
        if k.requires_grad:
            k._accumulate(np.matmul(ga.swapaxes(-1, -2), q.data))

    return Tensor(out_data, True, (q, k, v), backward)


class MoeLM:
    """The model: parameter store plus forward/loss entry points."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None,
                 seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        expected = param_shapes(config)
        if set(self.params) != set(expected):
            missing = set(expected) - set(self.params)
            extra = set(self.params) - set(expected)
            raise ConfigurationError(f"parameter set mismatch: missing={missing}, extra={extra}")

    @classmethod
    def from_checkpoint(cls, ckpt) -> "MoeLM":
        """Build a model on copies of the checkpoint's parameters."""
        params = {name: T.parameter(arr.copy()) for name, arr in ckpt.params.items()}
        return cls(ckpt.config, params=params)

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def _attention(self, x: Tensor, layer: int, batch: int, length: int) -> Tensor:
        cfg = self.config
        heads, dh = cfg.n_heads, cfg.d_model // cfg.n_heads

        def split(t):
            return T.transpose(T.reshape(t, (batch, length, heads, dh)), (0, 2, 1, 3))

        q = split(T.mul(T.matmul(x, self.p(f"layers.{layer}.attn.wq")), dh**-0.5))
        k = split(T.matmul(x, self.p(f"layers.{layer}.attn.wk")))
        v = split(T.matmul(x, self.p(f"layers.{layer}.attn.wv")))
        ctx = T.transpose(causal_attention(q, k, v), (0, 2, 1, 3))
        ctx = T.reshape(ctx, (batch * length, cfg.d_model))
        return T.matmul(ctx, self.p(f"layers.{layer}.attn.wo"))

    def _expert_weights(self, layer: int) -> list[tuple[Tensor, Tensor, Tensor]]:
        return [
            (
                self.p(f"layers.{layer}.experts.{e}.w_gate"),
                self.p(f"layers.{layer}.experts.{e}.w_up"),
                self.p(f"layers.{layer}.experts.{e}.w_down"),
            )
            for e in range(self.config.n_experts)
        ]

    def forward(self, tokens: np.ndarray, collect_traces: bool = False):
        """Token ids [B, L] -> (logits [B*L, V], aux list, z list, traces).

        aux/z are per-MoE-layer Tensors (load balance and z-loss); traces
        are per-layer MoELayerTrace when requested, else None entries.
        """
        cfg = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise InputError(f"expected [B, L] token ids, got shape {tokens.shape}")
        batch, length = tokens.shape
        if length > cfg.seq_len:
            raise InputError(f"sequence length {length} exceeds configured {cfg.seq_len}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise InputError("token id out of range")

        n = batch * length
        pos_ids = np.tile(np.arange(length), batch)
        x = T.add(T.take(self.p("tok_emb"), tokens.ravel()),
                  T.take(self.p("pos_emb"), pos_ids))

        aux_losses, z_losses, traces = [], [], []
        for layer in range(cfg.n_layers):
            normed = T.rmsnorm(x, self.p(f"layers.{layer}.attn_norm.g"))
            x = T.add(x, self._attention(normed, layer, batch, length))
            normed = T.rmsnorm(x, self.p(f"layers.{layer}.moe_norm.g"))
            router_out = route(normed, self.p(f"layers.{layer}.router.w"),
                               cfg.top_k, cfg.renormalize_gates)
            moe_out, trace = moe_forward(normed, self._expert_weights(layer),
                                         router_out, layer, collect_trace=collect_traces)
            x = T.add(x, moe_out)
            aux_losses.append(load_balance_loss(router_out.probs, router_out.topk_indices))
            z_losses.append(router_z_loss(router_out.logits))
            traces.append(trace)

        x = T.rmsnorm(x, self.p("out_norm.g"))
        logits = T.matmul(x, self.p("lm_head.w"))
        assert logits.shape == (n, cfg.vocab_size)
        return logits, aux_losses, z_losses, traces

    def lm_loss(self, batch: np.ndarray, collect_traces: bool = False):
        """Next-token loss on sequences [B, L+1].

        Returns (total, parts, traces) where total = ce + w_aux*mean(aux)
        + w_z*mean(z) and parts reports the three components as floats.
        """
        batch = np.asarray(batch)
        if batch.ndim != 2 or batch.shape[1] < 2:
            raise InputError(f"lm_loss needs [B, L+1] sequences with L >= 1, got {batch.shape}")
        inputs, targets = batch[:, :-1], batch[:, 1:].ravel()
        logits, aux_losses, z_losses, traces = self.forward(inputs, collect_traces)
        ce = T.cross_entropy(logits, targets)
        n_layers = len(aux_losses)
        aux = T.mul(sum_tensors(aux_losses), 1.0 / n_layers)
        z = T.mul(sum_tensors(z_losses), 1.0 / n_layers)
        total = T.add(T.add(ce, T.mul(aux, self.config.aux_loss_weight)),
                      T.mul(z, self.config.z_loss_weight))
        parts = {"ce": float(ce.data), "aux": float(aux.data), "z": float(z.data)}
        return total, parts, traces

    def sequence_nlls(self, batch: np.ndarray) -> np.ndarray:
        """Per-sequence summed token NLL for [B, L+1] batches (no grad, no aux)."""
        batch = np.asarray(batch)
        inputs, targets = batch[:, :-1], batch[:, 1:]
        b, length = inputs.shape
        with T.no_grad():
            logits, _, _, _ = self.forward(inputs)
        ld = logits.data
        m = ld.max(axis=-1, keepdims=True)
        lse = (m + np.log(np.exp(ld - m).sum(axis=-1, keepdims=True))).ravel()
        nll = lse - ld[np.arange(b * length), targets.ravel()]
        return nll.reshape(b, length).sum(axis=1)

    def trace_batch(self, tokens: np.ndarray) -> list[MoELayerTrace]:
        """Routing traces for [B, L] inputs without building a tape."""
        with T.no_grad():
            _, _, _, traces = self.forward(tokens, collect_traces=True)
        return traces


def sum_tensors(items: list[Tensor]) -> Tensor:
    total = items[0]
    for it in items[1:]:
        total = T.add(total, it)
    return total
