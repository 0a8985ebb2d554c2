"""Noise-prediction networks and the deterministic pseudo text embedder.

Two denoisers share the sampler interface: a toy attention denoiser with
self-attention KV capture/injection hooks, and an analytic Gaussian
denoiser used as an oracle. Both are pure functions of their inputs;
repeated calls are bit-identical, and batched evaluation is defined as a
loop over samples so batch results equal single-sample results exactly.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .schedule import NoiseSchedule

DEFAULT_LATENT_SHAPE = (4, 16, 16)
DEFAULT_N_TOKENS = 8
DEFAULT_TOKEN_DIM = 64

_PAD_WORD = "\x00pad"


class NonFiniteError(RuntimeError):
    """A latent or prediction stopped being finite."""


def _word_rng(seed: int, word: str) -> np.random.Generator:
    digest = hashlib.sha256(word.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng([seed, key])


@dataclass(frozen=True)
class PromptEmbedding:
    """Deterministic pseudo text embedding: one seeded vector per word."""

    tokens: np.ndarray  # (n_tokens, dim)
    source_text: str
    seed: int

    @property
    def words(self) -> list[str]:
        return self.source_text.split()

    def word_index(self, word: str) -> int:
        """Token slot of ``word``; raises if absent or truncated away."""
        words = self.words
        if word not in words:
            raise ValueError(f"word {word!r} not in prompt {self.source_text!r}")
        idx = words.index(word)
        if idx >= self.tokens.shape[0]:
            raise ValueError(f"word {word!r} falls beyond the {self.tokens.shape[0]} token slots")
        return idx


def embed_prompt(
    text: str,
    seed: int,
    n_tokens: int = DEFAULT_N_TOKENS,
    dim: int = DEFAULT_TOKEN_DIM,
) -> PromptEmbedding:
    """Hash whitespace-split words to seeded pseudo-random token vectors.

    Unused slots (and the whole embedding of the empty string) carry a
    fixed pad vector, so the empty prompt is a reserved null embedding.
    """
    words = text.split()[:n_tokens]
    pad = _word_rng(seed, _PAD_WORD).standard_normal(dim)
    tokens = np.tile(pad, (n_tokens, 1))
    for i, w in enumerate(words):
        tokens[i] = _word_rng(seed, w).standard_normal(dim)
    tokens.setflags(write=False)
    return PromptEmbedding(tokens=tokens, source_text=text, seed=seed)


@dataclass(frozen=True)
class LayerRange:
    """Half-open self-attention layer range [start, end)."""

    start: int
    end: int

    def __post_init__(self):
        if not 0 <= self.start <= self.end:
            raise ValueError(f"invalid layer range [{self.start}, {self.end})")

    def __contains__(self, layer: int) -> bool:
        return self.start <= layer < self.end

    def __len__(self) -> int:
        return self.end - self.start


@dataclass
class KVCache:
    """Self-attention Keys/Values recorded per (timestep, layer)."""

    entries: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    latent_shape: tuple[int, ...] | None = None
    layer_count: int | None = None

    def store(self, t: int, layer: int, k: np.ndarray, v: np.ndarray, overwrite: bool = False):
        if (t, layer) in self.entries and not overwrite:
            raise ValueError(f"duplicate KV capture at (t={t}, layer={layer}) without overwrite")
        self.entries[(t, layer)] = (k, v)

    def fetch(self, t: int, layer: int) -> tuple[np.ndarray, np.ndarray]:
        try:
            return self.entries[(t, layer)]
        except KeyError:
            raise KeyError(f"no KV cached at (t={t}, layer={layer})") from None

    def has_timestep(self, t: int) -> bool:
        return any(key[0] == t for key in self.entries)

    def timesteps(self) -> list[int]:
        return sorted({key[0] for key in self.entries}, reverse=True)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class AttentionTrace:
    """Head-averaged cross-attention maps per (timestep, layer).

    Each stored map has shape (n_positions, n_tokens); rows are softmax
    weights and sum to 1.
    """

    maps: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    grid_shape: tuple[int, int] | None = None
    n_tokens: int | None = None

    def store(self, t: int, layer: int, weights: np.ndarray):
        self.maps[(t, layer)] = weights

    def layers_at(self, t: int) -> list[int]:
        return sorted(layer for (tt, layer) in self.maps if tt == t)

    def token_map(self, t: int, token_index: int) -> np.ndarray:
        """Map for one token at step t, averaged over layers; shape = grid."""
        layers = self.layers_at(t)
        if not layers:
            raise KeyError(f"no attention maps recorded at t={t}")
        cols = [self.maps[(t, layer)][:, token_index] for layer in layers]
        flat = np.mean(cols, axis=0)
        return flat.reshape(self.grid_shape)


@dataclass(frozen=True)
class DenoiserConfig:
    layer_count: int = 4
    head_count: int = 4
    model_dim: int = 64
    latent_shape: tuple[int, int, int] = DEFAULT_LATENT_SHAPE
    patch_size: int = 2
    n_tokens: int = DEFAULT_N_TOKENS
    token_dim: int = DEFAULT_TOKEN_DIM
    init_seed: int = 0
    # Softmax logit scale: "sqrt-dim" is standard scaled dot-product
    # attention; "dim" divides by the full head dimension instead.
    attn_scale: str = "sqrt-dim"


def _sinusoidal(x: float | np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    arg = np.multiply.outer(np.asarray(x, dtype=np.float64), freqs)
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def _layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * gain + bias


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def _softmax(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


class ToyDenoiser:
    """Small transformer denoiser with fixed random weights.

    Input projection -> L pre-norm blocks (self-attention, cross-attention
    over prompt tokens, 2-layer MLP, residuals) -> output projection, with
    a sinusoidal time embedding added at the input. Weights derive
    deterministically from ``config.init_seed`` and are never trained.
    """

    def __init__(self, config: DenoiserConfig = DenoiserConfig()):
        self.config = config
        c, h, w = config.latent_shape
        p = config.patch_size
        d = config.model_dim
        if d % config.head_count != 0:
            raise ValueError("model_dim must be divisible by head_count")
        if h % p or w % p:
            raise ValueError(f"latent spatial dims {(h, w)} not divisible by patch size {p}")
        rng = np.random.default_rng(config.init_seed)

        def lin(n_in, n_out):
            return rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)

        self.grid_shape = (h // p, w // p)
        self.w_in = lin(c * p * p, d)
        self.b_in = np.zeros(d)
        self.w_time = lin(d, d)
        self.pos = _sinusoidal(np.arange(self.grid_shape[0] * self.grid_shape[1]), d)
        self.blocks = []
        for _ in range(config.layer_count):
            self.blocks.append(
                {
                    "ln1": (np.ones(d), np.zeros(d)),
                    # Double-scale value projection: self-attention values
                    # dominate each block's output, so the latent
                    # sensitivity of the network flows mainly through the
                    # K/V path rather than the residual MLP.
                    "wq": lin(d, d), "wk": lin(d, d), "wv": 2.0 * lin(d, d), "wo": lin(d, d),
                    "ln2": (np.ones(d), np.zeros(d)),
                    "cq": lin(d, d), "ck": lin(config.token_dim, d),
                    "cv": lin(config.token_dim, d), "co": lin(d, d),
                    "ln3": (np.ones(d), np.zeros(d)),
                    "w1": lin(d, 2 * d), "b1": np.zeros(2 * d),
                    "w2": lin(2 * d, d), "b2": np.zeros(d),
                }
            )
        self.ln_out = (np.ones(d), np.zeros(d))
        # Half-scale output head: keeps noise predictions moderate so the
        # guided sampling dynamics stay out of the saturating regime at
        # large guidance scales.
        self.w_out = 0.5 * lin(d, c * p * p)
        self.b_out = np.zeros(c * p * p)
        self.call_counts: Counter[str] = Counter()

    @property
    def layer_count(self) -> int:
        return self.config.layer_count

    def _heads(self, x: np.ndarray) -> np.ndarray:
        n, d = x.shape
        nh = self.config.head_count
        return x.reshape(n, nh, d // nh).transpose(1, 0, 2)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        nh, n, dh = x.shape
        return x.transpose(1, 0, 2).reshape(n, nh * dh)

    def _logit_scale(self) -> float:
        dh = self.config.model_dim // self.config.head_count
        return float(dh) if self.config.attn_scale == "dim" else float(np.sqrt(dh))

    def _attend(self, q, k, v):
        logits = q @ k.transpose(0, 2, 1) / self._logit_scale()
        weights = _softmax(logits)
        return weights @ v, weights

    def predict(
        self,
        z: np.ndarray,
        t: int,
        cond: PromptEmbedding,
        *,
        capture_to: KVCache | None = None,
        capture_overwrite: bool = False,
        inject_from: KVCache | None = None,
        inject_layers: LayerRange | None = None,
        inject_v_only: bool = False,
        trace_to: AttentionTrace | None = None,
        route: str = "other",
    ) -> np.ndarray:
        """Predicted noise eps(z, t, cond), same shape as z.

        ``capture_to`` records self-attention K/V (and cross-attention
        maps into ``trace_to``) without altering the output. Injection
        replaces K and V (or V only) of self-attention layers inside
        ``inject_layers`` with cached entries at timestep t.
        """
        cfg = self.config
        z = np.asarray(z, dtype=np.float64)
        if z.shape != cfg.latent_shape:
            raise ValueError(f"latent shape {z.shape} does not match config {cfg.latent_shape}")
        if not np.all(np.isfinite(z)):
            raise NonFiniteError(f"non-finite latent passed to denoiser at t={t}")
        if cond.tokens.shape != (cfg.n_tokens, cfg.token_dim):
            raise ValueError("prompt embedding shape does not match denoiser config")
        if inject_from is not None and inject_layers is None:
            raise ValueError("inject_layers required when injecting")
        if inject_layers is not None and inject_layers.end > cfg.layer_count:
            raise ValueError(f"layer range end {inject_layers.end} exceeds L={cfg.layer_count}")
        self.call_counts[route] += 1

        c, h, w = cfg.latent_shape
        p = cfg.patch_size
        gh, gw = self.grid_shape
        x = z.reshape(c, gh, p, gw, p).transpose(1, 3, 0, 2, 4).reshape(gh * gw, c * p * p)
        hdd = x @ self.w_in + self.b_in
        hdd = hdd + _sinusoidal(float(t), cfg.model_dim) @ self.w_time
        hdd = hdd + self.pos

        for layer, blk in enumerate(self.blocks):
            a = _layer_norm(hdd, *blk["ln1"])
            q = a @ blk["wq"]
            k = a @ blk["wk"]
            v = a @ blk["wv"]
            if capture_to is not None:
                capture_to.store(t, layer, k.copy(), v.copy(), overwrite=capture_overwrite)
            if inject_from is not None and inject_layers is not None and layer in inject_layers:
                k_cached, v_cached = inject_from.fetch(t, layer)
                v = v_cached
                if not inject_v_only:
                    k = k_cached
            out, _ = self._attend(self._heads(q), self._heads(k), self._heads(v))
            hdd = hdd + self._merge(out) @ blk["wo"]

            a = _layer_norm(hdd, *blk["ln2"])
            q = a @ blk["cq"]
            ck = cond.tokens @ blk["ck"]
            cv = cond.tokens @ blk["cv"]
            out, weights = self._attend(
                self._heads(q),
                self._heads(ck),
                self._heads(cv),
            )
            if trace_to is not None:
                trace_to.grid_shape = self.grid_shape
                trace_to.n_tokens = cfg.n_tokens
                trace_to.store(t, layer, weights.mean(axis=0))
            hdd = hdd + self._merge(out) @ blk["co"]

            a = _layer_norm(hdd, *blk["ln3"])
            hdd = hdd + _gelu(a @ blk["w1"] + blk["b1"]) @ blk["w2"] + blk["b2"]

        out = _layer_norm(hdd, *self.ln_out) @ self.w_out + self.b_out
        out = out.reshape(gh, gw, c, p, p).transpose(2, 0, 3, 1, 4)
        return np.ascontiguousarray(out.reshape(c, h, w))

    def predict_batch(self, zs, t, cond, *, route: str = "other", **kwargs) -> list[np.ndarray]:
        """Batched evaluation, defined as a per-sample loop.

        The fixed reduction order makes every batch row bit-identical to
        the corresponding single-sample call.
        """
        return [self.predict(z, t, cond, route=route, **kwargs) for z in zs]


class GaussianDenoiser:
    """Closed-form posterior-mean noise for Gaussian data N(mean, std^2 I).

    eps(z, t) = (z - sqrt(ab_t) * mean) * sqrt(1 - ab_t) / (ab_t * std^2 + 1 - ab_t)

    With ``std = 0`` (point-mass data) the DDIM chain integrates the
    probability-flow dynamics exactly at any step count, which makes this
    the oracle for chain-level checks. Prompt conditioning is ignored.
    """

    def __init__(self, sched: NoiseSchedule, mean: np.ndarray | float = 0.0, std: float = 1.0):
        self.sched = sched
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = float(std)
        self.call_counts: Counter[str] = Counter()

    def predict(self, z, t, cond=None, *, route: str = "other", **kwargs) -> np.ndarray:
        for key, val in kwargs.items():
            if val is not None and val is not False:
                raise ValueError(f"GaussianDenoiser does not support {key}")
        z = np.asarray(z, dtype=np.float64)
        if not np.all(np.isfinite(z)):
            raise NonFiniteError(f"non-finite latent passed to denoiser at t={t}")
        self.call_counts[route] += 1
        ab = self.sched.ab(t)
        denom = ab * self.std**2 + 1.0 - ab
        return (z - np.sqrt(ab) * self.mean) * np.sqrt(1.0 - ab) / denom

    def predict_batch(self, zs, t, cond=None, *, route: str = "other", **kwargs):
        return [self.predict(z, t, cond, route=route, **kwargs) for z in zs]


def predict_noise(net, z, t, cond, *, route: str = "other") -> np.ndarray:
    """Plain noise prediction eps(z, t, cond)."""
    return net.predict(z, t, cond, route=route)


def predict_noise_capture(
    net, z, t, cond, cache: KVCache, trace: AttentionTrace | None = None,
    *, overwrite: bool = False, route: str = "other",
) -> np.ndarray:
    """Noise prediction that records self-attention K/V (and optionally
    cross-attention maps); the output is identical to predict_noise."""
    if cache.latent_shape is None:
        cache.latent_shape = net.config.latent_shape
        cache.layer_count = net.config.layer_count
    return net.predict(
        z, t, cond, capture_to=cache, capture_overwrite=overwrite, trace_to=trace, route=route
    )


def predict_noise_inject(
    net, z, t, cond, cache: KVCache, layers: LayerRange, *, route: str = "other"
) -> np.ndarray:
    """Noise prediction with cached K and V injected over ``layers``."""
    return net.predict(z, t, cond, inject_from=cache, inject_layers=layers, route=route)


def predict_noise_inject_v_only(
    net, z, t, cond, cache: KVCache, layers: LayerRange, *, route: str = "other"
) -> np.ndarray:
    """Like predict_noise_inject, but only V is replaced; K stays live."""
    return net.predict(
        z, t, cond, inject_from=cache, inject_layers=layers, inject_v_only=True, route=route
    )
