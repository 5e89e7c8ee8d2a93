"""Bottleneck MLP router, primitive composition and injection.

The router reads the layer-``l`` last-token hidden state and produces gate
probabilities ``p`` (sigmoid head) and per-primitive strengths ``alpha``
(clipped linear head). At inference the gates are hard-thresholded; during
training they are replaced by Gumbel-Sigmoid samples so that gradients reach
the gate head.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import snap_float32


class RouterError(ValueError):
    pass


class ProvenanceError(RouterError):
    pass


@dataclass(frozen=True)
class RouterConfig:
    bottleneck: int = 64
    tau: float = 0.7
    alpha_max: float = 2.0
    gumbel_temperature: float = 1.0
    gumbel_temperature_final: float = 0.5
    strength_head: str = "clip"
    straight_through: bool = False
    sparsity_penalty: float = 0.0

    def __post_init__(self):
        if self.strength_head not in ("clip", "sigmoid"):
            raise ValueError("strength_head must be 'clip' or 'sigmoid'")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.alpha_max <= 0:
            raise ValueError("alpha_max must be positive")


_NAMES = ("w1", "b1", "wg", "bg", "ws", "bs")


class RouterParams:
    """Weights of ``d -> b -> (K gate logits, K raw strengths)``."""

    def __init__(self, weights: dict[str, np.ndarray], library_hash: str = ""):
        if set(weights) != set(_NAMES):
            raise RouterError(f"router weights must be exactly {_NAMES}")
        self.tensors = {k: ad.parameter(np.asarray(weights[k], dtype=np.float64)) for k in _NAMES}
        self.library_hash = library_hash
        d, b = self.tensors["w1"].shape
        K = self.tensors["wg"].shape[1]
        expected = {"w1": (d, b), "b1": (b,), "wg": (b, K), "bg": (K,), "ws": (b, K), "bs": (K,)}
        for k, shape in expected.items():
            if self.tensors[k].shape != shape:
                raise RouterError(f"{k}: shape {self.tensors[k].shape}, expected {shape}")

    @classmethod
    def init(cls, d: int, K: int, config: RouterConfig = RouterConfig(), seed: int = 0,
             library_hash: str = "") -> "RouterParams":
        rng = np.random.default_rng(seed)
        b = config.bottleneck
        mid = 0.0 if config.strength_head == "sigmoid" else config.alpha_max / 2
        w = {
            "w1": rng.normal(0, 1 / np.sqrt(d), (d, b)),
            "b1": np.zeros(b),
            "wg": rng.normal(0, 0.1 / np.sqrt(b), (b, K)),
            "bg": np.zeros(K),
            "ws": rng.normal(0, 0.1 / np.sqrt(b), (b, K)),
            "bs": np.full(K, mid),
        }
        return cls({k: snap_float32(v) for k, v in w.items()}, library_hash)

    @property
    def input_dim(self) -> int:
        return self.tensors["w1"].shape[0]

    @property
    def bottleneck(self) -> int:
        return self.tensors["w1"].shape[1]

    @property
    def K(self) -> int:
        return self.tensors["wg"].shape[1]

    @property
    def num_params(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def parameters(self) -> list[Tensor]:
        return [self.tensors[k] for k in _NAMES]

    def weights(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def copy(self) -> "RouterParams":
        return RouterParams(self.weights(), self.library_hash)

    def snapped(self) -> "RouterParams":
        """Copy rounded to the float32 grid (what a checkpoint can hold)."""
        return RouterParams({k: snap_float32(v) for k, v in self.weights().items()}, self.library_hash)


@dataclass(frozen=True)
class RoutingDecision:
    p: np.ndarray
    w: np.ndarray
    alpha: np.ndarray
    mode: str = "infer"

    @property
    def applied(self) -> np.ndarray:
        """Effective per-primitive strength ``w * alpha``."""
        return self.w * self.alpha


# -- heads ------------------------------------------------------------------------
def heads(params: RouterParams, h, config: RouterConfig = RouterConfig()):
    """Gate logits and bounded strengths as tensors, for ``h`` of shape ``(d,)`` or ``(B, d)``."""
    P = params.tensors
    h = ad.as_tensor(h)
    if h.shape[-1] != params.input_dim:
        raise RouterError(f"hidden has length {h.shape[-1]}, router expects {params.input_dim}")
    z = ad.gelu(h @ P["w1"] + P["b1"])
    gate_logits = z @ P["wg"] + P["bg"]
    raw = z @ P["ws"] + P["bs"]
    if config.strength_head == "sigmoid":
        alpha = ad.sigmoid(raw) * config.alpha_max
    else:
        alpha = ad.clip(raw, 0.0, config.alpha_max)
    return gate_logits, alpha, raw


def logistic_noise(rng: np.random.Generator, shape) -> np.ndarray:
    """Difference of two independent standard Gumbel draws."""
    g1 = -np.log(-np.log(rng.uniform(1e-12, 1.0, shape)))
    g2 = -np.log(-np.log(rng.uniform(1e-12, 1.0, shape)))
    return g1 - g2


def gumbel_sigmoid(logit, temperature: float, rng: np.random.Generator | None = None, noise=None,
                   straight_through: bool = False) -> Tensor:
    """``sigmoid((logit + g) / temperature)`` with logistic noise ``g``.

    Pass ``noise`` explicitly to fix the draw; otherwise it comes from ``rng``.
    With ``straight_through`` the forward value is the hard gate and the
    gradient is that of the relaxed one.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logit = ad.as_tensor(logit)
    if noise is None:
        if rng is None:
            raise ValueError("gumbel_sigmoid needs either noise or an rng")
        noise = logistic_noise(rng, logit.shape)
    soft = ad.sigmoid((logit + np.asarray(noise, dtype=np.float64)) * (1.0 / temperature))
    if not straight_through:
        return soft
    hard = (soft.data > 0.5).astype(np.float64)
    return soft + Tensor(hard - soft.data)


def route(params: RouterParams, h, config: RouterConfig = RouterConfig(), mode: str = "infer",
          seed: int | None = None, temperature: float | None = None) -> RoutingDecision:
    """One routing decision for a single hidden vector."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (params.input_dim,):
        raise RouterError(f"hidden must have shape ({params.input_dim},), got {h.shape}")
    gate_logits, alpha, raw = heads(params, h, config)
    if not (np.all(np.isfinite(gate_logits.data)) and np.all(np.isfinite(raw.data))):
        raise ad.NumericalError(
            f"non-finite router outputs (max |w1| = {np.abs(params.tensors['w1'].data).max():.3g})")
    p = ad.sigmoid(gate_logits).data
    if mode == "infer":
        w = (p > config.tau).astype(np.float64)
    elif mode == "train":
        temp = config.gumbel_temperature if temperature is None else temperature
        w = gumbel_sigmoid(gate_logits, temp, np.random.default_rng(seed),
                           straight_through=config.straight_through).data
    else:
        raise ValueError(f"mode must be 'infer' or 'train', not {mode!r}")
    return RoutingDecision(p=p, w=w, alpha=alpha.data.copy(), mode=mode)


# -- composition and injection -------------------------------------------------------
def compose(decision: RoutingDecision, library) -> np.ndarray:
    """``sum_i w_i * alpha_i * v_i`` over the library's primitives."""
    V = np.asarray(getattr(library, "vectors", library), dtype=np.float64)
    if V.shape[0] != decision.w.shape[0]:
        raise RouterError(f"decision has K={decision.w.shape[0]} but the library has K={V.shape[0]}")
    # accumulate in primitive order so the result is reproducible bit for bit
    out = np.zeros(V.shape[1])
    for i in range(V.shape[0]):
        out = out + (decision.w[i] * decision.alpha[i]) * V[i]
    return out


def compose_tensor(gates, alpha, vectors) -> Tensor:
    """Differentiable batch composition: ``(B, K) * (B, K) @ (K, d)``."""
    return (ad.as_tensor(gates) * ad.as_tensor(alpha)) @ ad.as_tensor(vectors)


def inject(h, v_inject) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    v = np.asarray(v_inject, dtype=np.float64)
    if h.shape != v.shape:
        raise RouterError(f"cannot inject a {v.shape} vector into a {h.shape} hidden state")
    return h + v


def top1_only(decision: RoutingDecision) -> RoutingDecision:
    """Keep only the primitive with the largest applied strength."""
    applied = decision.applied
    w = np.zeros_like(decision.w)
    if applied.max() > 0:
        w[int(np.argmax(applied))] = 1.0
    return RoutingDecision(decision.p, w, decision.alpha, decision.mode)


# -- checkpoint format --------------------------------------------------------------
ROUTER_MAGIC = b"RSTR"
ROUTER_VERSION = 1
_HEAD = struct.Struct("<4sI3iddB32s")


def save_router(params: RouterParams, path, config: RouterConfig = RouterConfig()) -> None:
    """Header (magic, version, d, b, K, tau, alpha_max, strength form, library
    hash) + float32 weights + sha256 trailer."""
    lib = bytes.fromhex(params.library_hash) if params.library_hash else bytes(32)
    head = _HEAD.pack(ROUTER_MAGIC, ROUTER_VERSION, params.input_dim, params.bottleneck, params.K,
                      config.tau, config.alpha_max, config.strength_head == "sigmoid", lib)
    blob = b"".join(np.ascontiguousarray(params.tensors[k].data, dtype="<f4").tobytes() for k in _NAMES)
    Path(path).write_bytes(head + blob + hashlib.sha256(head + blob).digest())


def read_router_header(path) -> dict:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size + 32:
        raise RouterError(f"{path}: truncated router checkpoint")
    magic, version, d, b, K, tau, amax, sig, lib = _HEAD.unpack(raw[:_HEAD.size])
    if magic != ROUTER_MAGIC:
        raise RouterError(f"{path}: not a router checkpoint")
    if version != ROUTER_VERSION:
        raise RouterError(f"{path}: unsupported version {version}")
    return {"d": d, "b": b, "K": K, "tau": tau, "alpha_max": amax,
            "strength_head": "sigmoid" if sig else "clip",
            "library_hash": "" if lib == bytes(32) else lib.hex(), "raw": raw}


def load_router(path, library_hash: str | None = None, allow_mismatch: bool = False) -> RouterParams:
    """Load and, when ``library_hash`` is given, check the library binding."""
    hdr = read_router_header(path)
    raw = hdr["raw"]
    body, digest = raw[:-32], raw[-32:]
    d, b, K = hdr["d"], hdr["b"], hdr["K"]
    shapes = {"w1": (d, b), "b1": (b,), "wg": (b, K), "bg": (K,), "ws": (b, K), "bs": (K,)}
    need = _HEAD.size + 4 * sum(int(np.prod(s)) for s in shapes.values())
    if len(body) != need or hashlib.sha256(body).digest() != digest:
        raise RouterError(f"{path}: corrupted or truncated router checkpoint")
    if library_hash is not None and hdr["library_hash"] != library_hash and not allow_mismatch:
        raise ProvenanceError(
            f"{path}: router was trained against library {hdr['library_hash'][:12]}, "
            f"not {library_hash[:12]}")
    weights, off = {}, _HEAD.size
    for k in _NAMES:
        n = int(np.prod(shapes[k]))
        weights[k] = np.frombuffer(body[off:off + 4 * n], dtype="<f4").astype(np.float64).reshape(shapes[k])
        off += 4 * n
    return RouterParams(weights, hdr["library_hash"])


def router_config_from_header(path, base: RouterConfig = RouterConfig()) -> RouterConfig:
    hdr = read_router_header(path)
    from dataclasses import replace
    return replace(base, tau=hdr["tau"], alpha_max=hdr["alpha_max"], strength_head=hdr["strength_head"])
