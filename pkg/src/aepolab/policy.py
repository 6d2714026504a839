"""Tiny autoregressive token policy with exact reverse-mode gradients.

The parameters live in one flat float64 vector (:class:`PolicyParams`).  To
differentiate, wrap them with :func:`track`, build a scalar loss out of
:func:`forward_logits` calls on the tracked handle, then call
:func:`loss_gradient`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from aepolab import autodiff as ad
from aepolab import kernels
from aepolab.errors import (
    ConfigError,
    ContextOverflowError,
    DisconnectedLossError,
    TokenRangeError,
)

CHECKPOINT_MAGIC = b"AEPO"
CHECKPOINT_VERSION = 1
ARCHS = ("tiny_attention", "gru_like")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    context_len: int = 256
    hidden_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    arch: str = "tiny_attention"

    def validate(self) -> "ModelConfig":
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        for name in ("vocab_size", "context_len", "hidden_dim", "n_layers", "n_heads"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.vocab_size < 10:
            raise ConfigError(f"vocab_size must be >= 10, got {self.vocab_size}")
        if self.arch == "tiny_attention" and self.hidden_dim % self.n_heads:
            raise ConfigError("hidden_dim must be divisible by n_heads")
        return self


def layout(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list describing the flat parameter vector."""
    v, d, n = config.vocab_size, config.hidden_dim, config.context_len
    if config.arch == "gru_like":
        entries = [("tok_emb", (v, d))]
        for i in range(config.n_layers):
            entries += [(f"l{i}.w_x", (d, 3 * d)), (f"l{i}.w_h", (d, 3 * d)), (f"l{i}.b", (3 * d,))]
    else:
        entries = [("tok_emb", (v, d)), ("pos_emb", (n, d))]
        for i in range(config.n_layers):
            entries += [
                (f"l{i}.w_q", (d, d)),
                (f"l{i}.w_k", (d, d)),
                (f"l{i}.w_v", (d, d)),
                (f"l{i}.w_o", (d, d)),
                (f"l{i}.w_fc", (d, 4 * d)),
                (f"l{i}.b_fc", (4 * d,)),
                (f"l{i}.w_proj", (4 * d, d)),
                (f"l{i}.b_proj", (d,)),
            ]
    entries += [("w_head", (d, v)), ("b_head", (v,))]
    return entries


def n_params(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in layout(config))


@dataclass
class PolicyParams:
    values: np.ndarray
    config: ModelConfig
    version: int = CHECKPOINT_VERSION

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.shape != (n_params(self.config),):
            raise ConfigError(
                f"expected {n_params(self.config)} parameter values, got {self.values.shape}")

    def slices(self) -> dict[str, tuple[slice, tuple[int, ...]]]:
        out, start = {}, 0
        for name, shape in layout(self.config):
            size = int(np.prod(shape))
            out[name] = (slice(start, start + size), shape)
            start += size
        return out

    def view(self, name: str) -> np.ndarray:
        """Writable array view of one named weight."""
        sl, shape = self.slices()[name]
        return self.values[sl].reshape(shape)

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.values.copy(), self.config, self.version)


@dataclass
class Distribution:
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 1 or np.any(self.probs < 0.0) or np.any(self.probs > 1.0):
            raise ValueError("probabilities must be a vector with entries in [0, 1]")
        if abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {self.probs.sum()!r}, not 1")


def init_params(config: ModelConfig, seed: int) -> PolicyParams:
    """Zero-mean normal weights with std ``1/sqrt(fan_in)``; biases start at zero.

    Embedding rows get unit variance per coordinate, matching the scale of the
    normalized activations the residual branches write, and the two residual
    output projections are further shrunk by ``1/sqrt(2 * n_layers)``.
    Without this the attention outputs swamp token identity in the residual
    stream and lookup circuits are very slow to form.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    branch_scale = 1.0 / np.sqrt(2 * config.n_layers)
    chunks = []
    for name, shape in layout(config):
        if len(shape) == 1:
            chunks.append(np.zeros(shape))
            continue
        if name.endswith("_emb"):
            std = 1.0
        else:
            std = 1.0 / np.sqrt(shape[0])
            if name.endswith((".w_o", ".w_proj")):
                std *= branch_scale
        chunks.append(rng.standard_normal(shape) * std)
    return PolicyParams(np.concatenate([c.ravel() for c in chunks]), config)


@dataclass
class Tracked:
    """Parameters wrapped for gradient recording."""

    params: PolicyParams
    flat: ad.Tensor
    weights: dict[str, ad.Tensor] = field(default_factory=dict)


def track(params: PolicyParams) -> Tracked:
    flat = ad.leaf(params.values)
    weights = {name: ad.reshape(ad.getitem(flat, sl), shape)
               for name, (sl, shape) in params.slices().items()}
    return Tracked(params, flat, weights)


def _constant_weights(params: PolicyParams) -> dict[str, ad.Tensor]:
    return {name: ad.Tensor(params.values[sl].reshape(shape))
            for name, (sl, shape) in params.slices().items()}


def _check_tokens(tokens: np.ndarray, config: ModelConfig) -> None:
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise TokenRangeError(f"token id outside [0, {config.vocab_size})")
    if tokens.shape[-1] > config.context_len:
        raise ContextOverflowError(
            f"sequence length {tokens.shape[-1]} exceeds context_len {config.context_len}")


def _attention_block(w, i: int, x: ad.Tensor, n_heads: int) -> ad.Tensor:
    b, t, d = x.shape
    dh = d // n_heads
    h = ad.layer_norm(x)

    def heads(m):
        return (h @ w[f"l{i}.{m}"]).reshape((b, t, n_heads, dh)).transpose(0, 2, 1, 3)

    att = ad.causal_attention(heads("w_q"), heads("w_k"), heads("w_v"))
    att = att.transpose(0, 2, 1, 3).reshape((b, t, d))
    x = x + att @ w[f"l{i}.w_o"]
    h2 = ad.layer_norm(x)
    m = ad.gelu(h2 @ w[f"l{i}.w_fc"] + w[f"l{i}.b_fc"])
    return x + m @ w[f"l{i}.w_proj"] + w[f"l{i}.b_proj"]


def _gru_layer(w, i: int, x: ad.Tensor) -> ad.Tensor:
    b, t, d = x.shape
    gx = x @ w[f"l{i}.w_x"] + w[f"l{i}.b"]
    w_h = w[f"l{i}.w_h"]
    h = ad.Tensor(np.zeros((b, d)))
    outs = []
    for s in range(t):
        gs = gx[:, s, :]
        hh = h @ w_h
        z = ad.sigmoid(gs[:, :d] + hh[:, :d])
        r = ad.sigmoid(gs[:, d:2 * d] + hh[:, d:2 * d])
        cand = ad.tanh(gs[:, 2 * d:] + r * hh[:, 2 * d:])
        h = h + z * (cand - h)
        outs.append(h.reshape((b, 1, d)))
    return ad.concat(outs, axis=1)


def forward_logits(model: PolicyParams | Tracked, tokens) -> ad.Tensor:
    """Next-token logits for every position of a (B, T) or (T,) token batch."""
    if isinstance(model, Tracked):
        params, w = model.params, model.weights
    else:
        params, w = model, _constant_weights(model)
    cfg = params.config
    tokens = np.asarray(tokens, dtype=np.int64)
    squeeze = tokens.ndim == 1
    if squeeze:
        tokens = tokens[None, :]
    _check_tokens(tokens, cfg)
    t = tokens.shape[1]
    x = ad.embedding(w["tok_emb"], tokens)
    if cfg.arch == "gru_like":
        for i in range(cfg.n_layers):
            x = _gru_layer(w, i, x)
    else:
        x = x + w["pos_emb"][:t]
        for i in range(cfg.n_layers):
            x = _attention_block(w, i, x, cfg.n_heads)
    x = ad.layer_norm(x)
    logits = x @ w["w_head"] + w["b_head"]
    return logits[0] if squeeze else logits


def forward_logprobs(params: PolicyParams, tokens) -> np.ndarray:
    """Log next-token distributions for every position, no graph recorded."""
    with ad.no_grad():
        return kernels.log_softmax(forward_logits(params, tokens).value)


def forward_distribution(params: PolicyParams, prefix) -> Distribution:
    prefix = np.asarray(prefix, dtype=np.int64)
    if prefix.ndim != 1 or prefix.size == 0:
        raise ValueError("prefix must be a non-empty 1-D token sequence")
    if prefix.size >= params.config.context_len:
        raise ContextOverflowError(
            f"prefix length {prefix.size} must be < context_len {params.config.context_len}")
    logp = forward_logprobs(params, prefix)[-1]
    probs = np.exp(logp)
    return Distribution(probs / probs.sum())


class Decoder:
    """Incremental next-token log-probabilities for a batch of equal-length prompts.

    Keeps per-layer key/value caches (attention) or hidden states (GRU) so
    each new token costs one position of compute.
    """

    def __init__(self, params: PolicyParams, prompts, max_new: int):
        self.params = params
        self.cfg = cfg = params.config
        self.w = {name: params.values[sl].reshape(shape)
                  for name, (sl, shape) in params.slices().items()}
        prompts = np.asarray(prompts, dtype=np.int64)
        _check_tokens(prompts, cfg)
        if prompts.shape[1] + max_new > cfg.context_len + 1:
            raise ContextOverflowError("prompt plus generation budget exceeds context_len")
        self.n, self.pos = prompts.shape
        self._prefill(prompts, max_new)

    def _prefill(self, prompts, max_new):
        cfg, w = self.cfg, self.w
        if cfg.arch == "gru_like":
            self.h = []
            x = w["tok_emb"][prompts]
            for i in range(cfg.n_layers):
                x, h = self._gru_seq(i, x)
                self.h.append(h)
            self.last_logp = self._head(x[:, -1, :])
            return
        n, t = prompts.shape
        d, nh = cfg.hidden_dim, cfg.n_heads
        dh = d // nh
        cap = t + max_new
        self.k_cache = np.zeros((cfg.n_layers, n, nh, cap, dh))
        self.v_cache = np.zeros((cfg.n_layers, n, nh, cap, dh))
        x = w["tok_emb"][prompts] + w["pos_emb"][:t]
        for i in range(cfg.n_layers):
            h, _ = kernels.layer_norm_forward(x, 1e-5)
            q, k, v = (
                (h @ w[f"l{i}.{m}"]).reshape(n, t, nh, dh).transpose(0, 2, 1, 3)
                for m in ("w_q", "w_k", "w_v"))
            self.k_cache[i, :, :, :t] = k
            self.v_cache[i, :, :, :t] = v
            att, _ = kernels.attention_forward(q, k, v)
            x = x + att.transpose(0, 2, 1, 3).reshape(n, t, d) @ w[f"l{i}.w_o"]
            x = x + self._mlp(i, x)
        self.last_logp = self._head(x[:, -1, :])

    def _mlp(self, i, x):
        w = self.w
        h, _ = kernels.layer_norm_forward(x, 1e-5)
        m, _ = kernels.gelu_forward(h @ w[f"l{i}.w_fc"] + w[f"l{i}.b_fc"])
        return m @ w[f"l{i}.w_proj"] + w[f"l{i}.b_proj"]

    def _head(self, x):
        h, _ = kernels.layer_norm_forward(x, 1e-5)
        return kernels.log_softmax(h @ self.w["w_head"] + self.w["b_head"])

    def _gru_cell(self, i, x, h):
        w, d = self.w, self.cfg.hidden_dim
        gs = x @ w[f"l{i}.w_x"] + w[f"l{i}.b"]
        hh = h @ w[f"l{i}.w_h"]
        z = 1.0 / (1.0 + np.exp(-(gs[:, :d] + hh[:, :d])))
        r = 1.0 / (1.0 + np.exp(-(gs[:, d:2 * d] + hh[:, d:2 * d])))
        cand = np.tanh(gs[:, 2 * d:] + r * hh[:, 2 * d:])
        return h + z * (cand - h)

    def _gru_seq(self, i, x):
        n, t, d = x.shape
        h = np.zeros((n, d))
        outs = np.empty_like(x)
        for s in range(t):
            h = self._gru_cell(i, x[:, s, :], h)
            outs[:, s, :] = h
        return outs, h

    def step(self, tokens) -> np.ndarray:
        """Append one token per row; returns the next log-distribution (N, V)."""
        cfg, w = self.cfg, self.w
        tokens = np.asarray(tokens, dtype=np.int64)
        if self.pos >= cfg.context_len:
            raise ContextOverflowError("decoder ran past context_len")
        x = w["tok_emb"][tokens]
        if cfg.arch == "gru_like":
            for i in range(cfg.n_layers):
                self.h[i] = x = self._gru_cell(i, x, self.h[i])
        else:
            n, d, nh = self.n, cfg.hidden_dim, cfg.n_heads
            dh = d // nh
            t = self.pos
            x = x + w["pos_emb"][t]
            for i in range(cfg.n_layers):
                h, _ = kernels.layer_norm_forward(x, 1e-5)
                q, k, v = ((h @ w[f"l{i}.{m}"]).reshape(n, nh, dh) for m in ("w_q", "w_k", "w_v"))
                self.k_cache[i, :, :, t] = k
                self.v_cache[i, :, :, t] = v
                att = kernels.attention_decode(q, self.k_cache[i], self.v_cache[i], t + 1)
                x = x + att.reshape(n, d) @ w[f"l{i}.w_o"]
                x = x + self._mlp(i, x)
        self.pos += 1
        self.last_logp = self._head(x)
        return self.last_logp


def sample_token(dist: Distribution, temperature: float, top_p: float,
                 rng: np.random.Generator) -> int:
    """Draw one token; temperature 0 is greedy and still consumes one uniform."""
    if not 0.0 < top_p <= 1.0:
        raise ValueError(f"top_p must be in (0, 1], got {top_p}")
    if temperature < 0.0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    u = np.array([rng.random()])
    return int(kernels.nucleus_sample(dist.probs[None, :], u, float(temperature), float(top_p))[0])


def loss_gradient(tracked: Tracked, loss: ad.Tensor) -> np.ndarray:
    """Exact gradient of a scalar loss with respect to the flat parameter vector."""
    if not isinstance(loss, ad.Tensor) or not ad.depends_on(loss, tracked.flat):
        raise DisconnectedLossError("loss was not computed from these tracked parameters")
    tracked.flat.grad = None
    ad.backward(loss)
    grad = tracked.flat.grad
    return np.zeros_like(tracked.params.values) if grad is None else grad.copy()


def save_checkpoint(params: PolicyParams, path) -> None:
    cfg = json.dumps(asdict(params.config), sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", params.version))
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(params.values.astype("<f8").tobytes())


def load_checkpoint(path) -> PolicyParams:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an AEPO checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<I", data, 8)
    config = ModelConfig(**json.loads(data[12:12 + n].decode()))
    values = np.frombuffer(data[12 + n:], dtype="<f8").astype(np.float64)
    return PolicyParams(values, config.validate(), version)
