"""Tiny pre-LN decoder-only transformer with a split forward pass.

The residual stream after block ``l`` (1-indexed, embeddings are layer 0) is
the intervention site. ``forward_to_layer`` runs blocks ``1..l`` and returns
the last-token hidden state together with a resume context; ``continue_from_layer``
runs blocks ``l+1..L`` from a (possibly edited) state. Both share one block
implementation, so the split pass reproduces the monolithic pass bit for bit.
"""
from __future__ import annotations

import dataclasses
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import vocab
from .autodiff import Tensor


class ContextError(ValueError):
    """Sequence too long, bad layer index, or stale resume context."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 8
    model_dim: int = 128
    num_heads: int = 4
    vocab_size: int = vocab.VOCAB_SIZE
    max_context: int = 128
    intervention_layer: int = 5
    mlp_ratio: int = 4
    residual_scale: float = 0.25

    def __post_init__(self):
        for name in ("num_layers", "model_dim", "num_heads", "vocab_size", "max_context", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.residual_scale <= 0:
            raise ValueError("residual_scale must be positive")
        if not 1 <= self.intervention_layer <= self.num_layers - 1:
            raise ValueError(
                f"intervention_layer must lie in [1, {self.num_layers - 1}], got {self.intervention_layer}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, V, C, m = cfg.model_dim, cfg.vocab_size, cfg.max_context, cfg.mlp_ratio * cfg.model_dim
    shapes = {"tok_emb": (V, d), "pos_emb": (C, d)}
    for i in range(1, cfg.num_layers + 1):
        shapes.update({
            f"b{i}.ln1.g": (d,), f"b{i}.ln1.b": (d,),
            f"b{i}.attn.w": (d, 3 * d), f"b{i}.attn.b": (3 * d,),
            f"b{i}.proj.w": (d, d), f"b{i}.proj.b": (d,),
            f"b{i}.ln2.g": (d,), f"b{i}.ln2.b": (d,),
            f"b{i}.mlp.w1": (d, m), f"b{i}.mlp.b1": (m,),
            f"b{i}.mlp.w2": (m, d), f"b{i}.mlp.b2": (d,),
        })
    shapes.update({"lnf.g": (d,), "lnf.b": (d,), "head.w": (d, V)})
    return shapes


def init_weights(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    out = {}
    resid_scale = 0.02 / np.sqrt(2 * cfg.num_layers)
    for name, shape in param_shapes(cfg).items():
        if name.endswith((".g",)):
            out[name] = np.ones(shape)
        elif len(shape) == 1:
            out[name] = np.zeros(shape)
        elif name.endswith(("proj.w", "mlp.w2")):
            out[name] = rng.normal(0.0, resid_scale, shape)
        else:
            out[name] = rng.normal(0.0, 0.02, shape)
    return out


def snap_float32(arr: np.ndarray) -> np.ndarray:
    """Round to the nearest float32 value, kept in float64 storage."""
    return np.asarray(arr, dtype=np.float32).astype(np.float64)


def fingerprint_weights(weights: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(weights):
        h.update(name.encode())
        h.update(np.ascontiguousarray(weights[name], dtype="<f4").tobytes())
    return h.hexdigest()


class FrozenModel:
    """Immutable weights plus the config; arrays are marked read-only."""

    def __init__(self, config: ModelConfig, weights: dict[str, np.ndarray]):
        expected = param_shapes(config)
        if set(weights) != set(expected):
            raise CheckpointError("weight names do not match the config")
        frozen = {}
        for name, shape in expected.items():
            arr = snap_float32(weights[name])
            if arr.shape != shape:
                raise CheckpointError(f"{name}: shape {arr.shape}, expected {shape}")
            arr.flags.writeable = False
            frozen[name] = arr
        self.config = config
        self.weights = frozen
        self.fingerprint = fingerprint_weights(frozen)
        self._tensors = {k: Tensor(v) for k, v in frozen.items()}

    @property
    def num_params(self) -> int:
        return int(sum(w.size for w in self.weights.values()))

    def current_fingerprint(self) -> str:
        """Recompute the hash from the live arrays (detects any mutation)."""
        return fingerprint_weights(self.weights)

    def tensors(self) -> dict[str, Tensor]:
        return self._tensors


# -- the shared block -------------------------------------------------------
def _causal_mask(t_new: int, start: int) -> np.ndarray:
    q = np.arange(start, start + t_new)[:, None]
    k = np.arange(start + t_new)[None, :]
    return np.where(k <= q, 0.0, -1e30)


def block(W: dict[str, Tensor], i: int, x: Tensor, cfg: ModelConfig, past=None, start: int = 0):
    """One transformer block over new positions ``start..start+T-1``.

    ``past`` holds the (K, V) arrays of earlier positions for this block.
    Returns the new residual and the extended (K, V).
    """
    B, T, d = x.shape
    H, dh = cfg.num_heads, cfg.head_dim
    h = ad.layer_norm(x, W[f"b{i}.ln1.g"], W[f"b{i}.ln1.b"])
    qkv = h @ W[f"b{i}.attn.w"] + W[f"b{i}.attn.b"]
    qkv = qkv.reshape(B, T, 3, H, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    if past is not None:
        k = ad.concat([Tensor(past[0]), k], axis=2)
        v = ad.concat([Tensor(past[1]), v], axis=2)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)) + _causal_mask(T, start)
    attn = ad.softmax(scores, axis=-1)
    o = (attn @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
    x = x + (o @ W[f"b{i}.proj.w"] + W[f"b{i}.proj.b"])
    h = ad.layer_norm(x, W[f"b{i}.ln2.g"], W[f"b{i}.ln2.b"])
    h = ad.relu(h @ W[f"b{i}.mlp.w1"] + W[f"b{i}.mlp.b1"])
    x = x + (h @ W[f"b{i}.mlp.w2"] + W[f"b{i}.mlp.b2"])
    # fixed-scale renormalisation keeps every block output at RMS residual_scale
    x = ad.layer_norm(x, cfg.residual_scale, 0.0)
    return x, (k.data, v.data)


def embed(W: dict[str, Tensor], tokens: np.ndarray, start: int = 0) -> Tensor:
    tokens = np.asarray(tokens, dtype=np.int64)
    T = tokens.shape[-1]
    return ad.take_rows(W["tok_emb"], tokens) + ad.take_rows(W["pos_emb"], np.arange(start, start + T))


def unembed(W: dict[str, Tensor], x: Tensor) -> Tensor:
    return ad.layer_norm(x, W["lnf.g"], W["lnf.b"]) @ W["head.w"]


def run_blocks(W, cfg: ModelConfig, x: Tensor, first: int, last: int) -> Tensor:
    """Blocks ``first..last`` inclusive over a full (uncached) sequence."""
    for i in range(first, last + 1):
        x, _ = block(W, i, x, cfg)
    return x


# -- split forward with a KV cache ---------------------------------------------
class DecodeCache:
    """Per-block K/V for the current token prefix.

    Blocks ``1..l`` are advanced by :func:`forward_to_layer`, blocks ``l+1..L``
    by :func:`continue_from_layer`. Whatever hidden state was resumed (steered
    or not) is what later positions attend to.
    """

    def __init__(self, config: ModelConfig, layer: int):
        self.config = config
        self.layer = layer
        self.kv: list = [None] * config.num_layers
        self.tokens: tuple[int, ...] = ()
        self.upper_len = 0

    def snapshot(self) -> list:
        return [None if kv is None else (kv[0].copy(), kv[1].copy()) for kv in self.kv]


@dataclass(frozen=True)
class ResumeContext:
    cache: DecodeCache = field(repr=False)
    tokens: tuple[int, ...]
    start: int
    rows: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class ActivationState:
    hidden: np.ndarray
    layer: int
    resume_context: ResumeContext = field(repr=False)

    def with_hidden(self, hidden) -> "ActivationState":
        hidden = np.asarray(hidden, dtype=np.float64)
        if hidden.shape != self.hidden.shape:
            raise ContextError(f"hidden must have shape {self.hidden.shape}, got {hidden.shape}")
        return dataclasses.replace(self, hidden=hidden)


def _check_tokens(cfg: ModelConfig, tokens) -> tuple[int, ...]:
    toks = tuple(int(t) for t in tokens)
    if not toks:
        raise ContextError("token sequence is empty")
    if len(toks) > cfg.max_context:
        raise ContextError(f"sequence of length {len(toks)} exceeds max_context {cfg.max_context}")
    if min(toks) < 0 or max(toks) >= cfg.vocab_size:
        raise ContextError("token id outside the vocabulary")
    return toks


def forward_to_layer(model: FrozenModel, tokens, layer: int | None = None,
                     cache: DecodeCache | None = None) -> ActivationState:
    cfg = model.config
    layer = cfg.intervention_layer if layer is None else layer
    if not 1 <= layer <= cfg.num_layers - 1:
        raise ContextError(f"layer {layer} outside [1, {cfg.num_layers - 1}]")
    toks = _check_tokens(cfg, tokens)
    if cache is None:
        cache = DecodeCache(cfg, layer)
    if cache.layer != layer:
        raise ContextError(f"cache was built for layer {cache.layer}, not {layer}")
    n = len(cache.tokens)
    if toks[:n] != cache.tokens or len(toks) <= n:
        raise ContextError("tokens do not extend the cached prefix")
    if cache.upper_len != n:
        raise ContextError("previous state was never resumed; upper layers are behind")
    W = model.tensors()
    x = embed(W, np.array(toks[n:])[None, :], start=n)
    for i in range(1, layer + 1):
        x, cache.kv[i - 1] = block(W, i, x, cfg, past=cache.kv[i - 1], start=n)
    cache.tokens = toks
    rows = x.data[0]
    return ActivationState(hidden=rows[-1].copy(), layer=layer,
                           resume_context=ResumeContext(cache, toks, n, rows))


def continue_from_layer(model: FrozenModel, state: ActivationState) -> np.ndarray:
    """Run the remaining blocks from ``state`` and return next-token logits."""
    cfg = model.config
    ctx = state.resume_context
    cache = ctx.cache
    if cache.tokens != ctx.tokens or cache.upper_len != ctx.start:
        raise ContextError("stale resume context: the cache has moved past this state")
    if state.hidden.shape != (cfg.model_dim,):
        raise ContextError(f"hidden must have length {cfg.model_dim}")
    rows = ctx.rows.copy()
    rows[-1] = state.hidden
    W = model.tensors()
    x = Tensor(rows[None])
    for i in range(state.layer + 1, cfg.num_layers + 1):
        x, cache.kv[i - 1] = block(W, i, x, cfg, past=cache.kv[i - 1], start=ctx.start)
    cache.upper_len = len(ctx.tokens)
    return unembed(W, Tensor(x.data[:, -1:])).data[0, -1].copy()


def forward(model: FrozenModel, tokens) -> np.ndarray:
    """Monolithic pass; next-token logits for the last position."""
    cfg = model.config
    toks = _check_tokens(cfg, tokens)
    W = model.tensors()
    x = embed(W, np.array(toks)[None, :])
    x = run_blocks(W, cfg, x, 1, cfg.num_layers)
    return unembed(W, Tensor(x.data[:, -1:])).data[0, -1].copy()


# -- decoding ---------------------------------------------------------------
@dataclass(frozen=True)
class Sampling:
    """Greedy when ``temperature`` is None, otherwise softmax(logits / t)."""
    temperature: float | None = None
    seed: int = 0

    @property
    def greedy(self) -> bool:
        return self.temperature is None


GREEDY = Sampling()


def decode_token(logits, temperature: float | None = None, rng: np.random.Generator | None = None) -> int:
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ad.NumericalError("non-finite logits")
    if temperature is None:
        return int(np.argmax(logits))  # first maximum on ties
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if rng is None:
        raise ValueError("temperature sampling needs an rng")
    z = logits / temperature
    p = np.exp(z - z.max())
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))


@dataclass
class Generation:
    tokens: list[int]
    count: int


def generate(model: FrozenModel, prompt, steer=None, max_steps: int = 8, sampling: Sampling = GREEDY,
             layer: int | None = None, eos: int = vocab.END, single_shot: bool = False,
             steer_fn: Callable[[ActivationState], np.ndarray | None] | None = None) -> Generation:
    """Steered decoding: ``steer`` is added to the layer-``l`` last-token hidden
    at every step (or only the first, with ``single_shot``).

    ``steer_fn`` computes the vector once from the prefill state instead.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    cfg = model.config
    layer = cfg.intervention_layer if layer is None else layer
    rng = None if sampling.greedy else np.random.default_rng(sampling.seed)
    cache = DecodeCache(cfg, layer)
    seq = list(prompt)
    state = forward_to_layer(model, seq, layer, cache)
    if steer_fn is not None:
        steer = steer_fn(state)
    if steer is not None:
        steer = np.asarray(steer, dtype=np.float64)
        if steer.shape != (cfg.model_dim,):
            raise ContextError(f"steering vector must have length {cfg.model_dim}")
    out: list[int] = []
    for t in range(max_steps):
        if steer is not None and (t == 0 or not single_shot):
            state = state.with_hidden(state.hidden + steer)
        logits = continue_from_layer(model, state)
        tok = decode_token(logits, sampling.temperature, rng)
        out.append(tok)
        if tok == eos or t == max_steps - 1 or len(seq) + 1 >= cfg.max_context:
            break
        seq.append(tok)
        state = forward_to_layer(model, seq, layer, cache)
    return Generation(out, len(out))


def sample_batch(model: FrozenModel, prompt, steers: np.ndarray, temperature: float | None,
                 rngs: list[np.random.Generator] | None, max_steps: int = 8, layer: int | None = None,
                 eos: int = vocab.END) -> tuple[list[list[int]], list[np.ndarray]]:
    """Decode ``N`` rows in lockstep, row ``r`` steered by ``steers[r]``.

    ``prompt`` is one sequence (shared by all rows) or an ``(N, P)`` array of
    equal-length prompts. Same semantics as :func:`generate` (injection on
    every step, cached), but the rows share each matmul. Returns the completions and, per row, the
    log-probability of every emitted token under ``softmax(logits / t)``.
    """
    cfg = model.config
    layer = cfg.intervention_layer if layer is None else layer
    steers = np.asarray(steers, dtype=np.float64)
    N = steers.shape[0]
    prompt = np.asarray(prompt, dtype=np.int64)
    if prompt.ndim == 1:
        prompt = np.tile(np.array(_check_tokens(cfg, prompt)), (N, 1))
    elif prompt.shape[0] != N:
        raise ContextError(f"{prompt.shape[0]} prompts for {N} steering rows")
    else:
        for row in prompt:
            _check_tokens(cfg, row)
    W = model.tensors()
    kv: list = [None] * cfg.num_layers
    x = embed(W, prompt)
    start = 0
    out = [[] for _ in range(N)]
    logps = [[] for _ in range(N)]
    alive = np.ones(N, dtype=bool)
    for t in range(max_steps):
        for i in range(1, layer + 1):
            x, kv[i - 1] = block(W, i, x, cfg, past=kv[i - 1], start=start)
        resid = x.data.copy()
        resid[:, -1] += steers
        x = Tensor(resid)
        for i in range(layer + 1, cfg.num_layers + 1):
            x, kv[i - 1] = block(W, i, x, cfg, past=kv[i - 1], start=start)
        logits = unembed(W, Tensor(x.data[:, -1:])).data[:, -1]
        z = logits if temperature is None else logits / temperature
        logp = z - z.max(axis=1, keepdims=True)
        logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
        nxt = np.zeros(N, dtype=np.int64)
        for r in range(N):
            if not alive[r]:
                continue
            tok = decode_token(logits[r], temperature, None if rngs is None else rngs[r])
            nxt[r] = tok
            out[r].append(tok)
            logps[r].append(logp[r, tok])
            if tok == eos:
                alive[r] = False
        start += x.shape[1]
        if not alive.any() or start + 1 > cfg.max_context:
            break
        x = embed(W, nxt[:, None], start=start)
    return out, [np.array(v) for v in logps]


def greedy_many(model: FrozenModel, prompts, steers=None, max_steps: int = 8, layer: int | None = None,
                chunk: int = 256) -> list[list[int]]:
    """Greedy completions for many prompts, batched by prompt length; input order is kept."""
    d = model.config.model_dim
    steers = np.zeros((len(prompts), d)) if steers is None else np.asarray(steers, dtype=np.float64)
    out: list[list[int]] = [[] for _ in prompts]
    by_len: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        by_len.setdefault(len(p), []).append(i)
    for n in sorted(by_len):
        idx = by_len[n]
        for s in range(0, len(idx), chunk):
            part = idx[s:s + chunk]
            toks = np.array([prompts[i] for i in part], dtype=np.int64)
            comps, _ = sample_batch(model, toks, steers[part], None, None, max_steps, layer)
            for i, c in zip(part, comps):
                out[i] = c
    return out


def last_hidden(model: FrozenModel, prompts, layer: int) -> np.ndarray:
    """Layer-``layer`` hidden state at the last token of each prompt (batched by length)."""
    out = np.zeros((len(prompts), model.config.model_dim))
    by_len: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        by_len.setdefault(len(p), []).append(i)
    for n, idx in sorted(by_len.items()):
        toks = np.array([prompts[i] for i in idx], dtype=np.int64)
        out[idx] = lower_pass(model, toks, layer)[:, -1]
    return out


# -- batched teacher-forced passes -------------------------------------------
def lower_pass(model: FrozenModel, tokens: np.ndarray, layer: int) -> np.ndarray:
    """Residual stream after block ``layer`` for a batch ``(B, T)`` of sequences."""
    W = model.tensors()
    x = embed(W, np.asarray(tokens))
    return run_blocks(W, model.config, x, 1, layer).data


def upper_pass(model: FrozenModel, resid: Tensor, layer: int) -> Tensor:
    """Blocks ``layer+1..L`` plus the head; differentiable in ``resid``."""
    W = model.tensors()
    x = run_blocks(W, model.config, resid, layer + 1, model.config.num_layers)
    return unembed(W, x)


def injection_mask(lengths, starts, T: int) -> np.ndarray:
    """``(B, T, 1)`` mask that is 1 on positions ``start..length-1`` of each row."""
    pos = np.arange(T)[None, :]
    lengths = np.asarray(lengths)[:, None]
    starts = np.asarray(starts)[:, None]
    return ((pos >= starts) & (pos < lengths)).astype(np.float64)[..., None]


def steered_logits(model: FrozenModel, tokens: np.ndarray, inject, starts, layer: int,
                   lower: np.ndarray | None = None, lengths=None, single_shot: bool = False) -> Tensor:
    """Teacher-forced logits ``(B, T, V)`` with ``inject`` (``(B, d)`` or ``(B, T, d)``) added at
    layer ``layer`` on every position from ``starts`` onward.

    This replays cached steered decoding in one pass: the prompt's last token
    and every generated token except the final one receive the injection.
    """
    tokens = np.asarray(tokens)
    B, T = tokens.shape
    if lower is None:
        lower = lower_pass(model, tokens, layer)
    if inject is None:
        return upper_pass(model, Tensor(lower), layer)
    lengths = np.full(B, T) if lengths is None else lengths
    if single_shot:
        lengths = np.asarray(starts) + 1
    mask = injection_mask(lengths, starts, T)
    inject = ad.as_tensor(inject)
    if inject.ndim == 2:
        inject = inject.reshape(B, 1, -1)
    return upper_pass(model, Tensor(lower) + mask * inject, layer)


# -- checkpoint format --------------------------------------------------------
MODEL_MAGIC = b"RSTM"
MODEL_VERSION = 1
_CFG_FIELDS = ("num_layers", "model_dim", "num_heads", "vocab_size", "max_context", "intervention_layer",
               "mlp_ratio")


def save_model(model: FrozenModel, path) -> None:
    """Little-endian: magic, version, 7 x int32 + 1 x float64 config, float32 blob, sha256."""
    header = MODEL_MAGIC + struct.pack("<I", MODEL_VERSION)
    header += struct.pack("<7i", *(getattr(model.config, f) for f in _CFG_FIELDS))
    header += struct.pack("<d", model.config.residual_scale)
    names = list(param_shapes(model.config))
    blob = b"".join(np.ascontiguousarray(model.weights[n], dtype="<f4").tobytes() for n in names)
    digest = hashlib.sha256(header + blob).digest()
    Path(path).write_bytes(header + blob + digest)


def load_model(path) -> FrozenModel:
    raw = Path(path).read_bytes()
    hlen = 4 + 4 + 7 * 4 + 8
    if len(raw) < hlen + 32 or raw[:4] != MODEL_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != MODEL_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: content hash mismatch")
    cfg = ModelConfig(**dict(zip(_CFG_FIELDS, struct.unpack("<7i", raw[8:hlen - 8]))),
                      residual_scale=struct.unpack("<d", raw[hlen - 8:hlen])[0])
    weights, off = {}, hlen
    for name, shape in param_shapes(cfg).items():
        n = int(np.prod(shape))
        chunk = body[off:off + 4 * n]
        if len(chunk) != 4 * n:
            raise CheckpointError(f"{path}: truncated weight blob")
        weights[name] = np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(shape)
        off += 4 * n
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes in weight blob")
    return FrozenModel(cfg, weights)
