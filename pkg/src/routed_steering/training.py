"""Router optimisation: oracle labels, supervised warm-up and GRPO refinement.

Everything here talks to the frozen model through a *backend* object, so the
same trainer runs on the toy transformer and on the small planted
environments used to check convergence. A backend provides:

``d``, ``fingerprint``
``prompt_hidden(instances) -> (B, d)``
    last-prompt-token hidden state at the intervention layer.
``rollouts(instance, steers, temperature, rngs) -> (completions, logprobs)``
    sampled completions, one per steering row, with per-token log-probs.
``policy_logprobs(instances, completions, inject, temperature)``
    teacher-forced ``(logp, base_logp, mask)`` arrays of shape ``(R, T)``;
    ``logp`` is a Tensor differentiable in ``inject``.
``greedy(instance, steer) -> tokens`` and ``verify(tokens, instance) -> 0/1``.
``candidate_scores(instance, steers) -> (gold_logprob, correct)``
    teacher-forced check of many static injections at once.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import model as M
from . import router as R
from . import tasks as T
from .autodiff import Tensor

log = logging.getLogger(__name__)


class TrainingDivergence(ad.NumericalError):
    def __init__(self, message: str, last_good: R.RouterParams | None):
        super().__init__(message)
        self.last_good = last_good


# -- backends ------------------------------------------------------------------------
class TransformerBackend:
    """Steering the frozen toy transformer at ``layer``."""

    def __init__(self, model: M.FrozenModel, layer: int | None = None, max_steps: int = 6):
        self.model = model
        self.layer = model.config.intervention_layer if layer is None else layer
        self.max_steps = max_steps
        self.d = model.config.model_dim
        self.fingerprint = model.fingerprint

    def _pad(self, rows: list[list[int]]) -> np.ndarray:
        T_ = max(len(r) for r in rows)
        out = np.full((len(rows), T_), T.PAD, dtype=np.int64)
        for i, r in enumerate(rows):
            out[i, :len(r)] = r
        return out

    def prompt_hidden(self, instances) -> np.ndarray:
        # right padding is invisible to earlier positions under causal attention
        toks = self._pad([list(x.prompt) for x in instances])
        lower = M.lower_pass(self.model, toks, self.layer)
        ends = np.array([len(x.prompt) - 1 for x in instances])
        return lower[np.arange(len(instances)), ends]

    def rollouts(self, instance, steers, temperature, rngs):
        return M.sample_batch(self.model, instance.prompt, steers, temperature, rngs,
                              self.max_steps, self.layer)

    def _teacher_forced(self, instances, completions):
        rows = [list(x.prompt) + list(c) for x, c in zip(instances, completions)]
        toks = self._pad(rows)
        starts = np.array([len(x.prompt) - 1 for x in instances])
        lengths = np.array([len(r) - 1 for r in rows])
        return toks, starts, lengths

    def policy_logprobs(self, instances, completions, inject, temperature):
        toks, starts, lengths = self._teacher_forced(instances, completions)
        inp, tgt = toks[:, :-1], toks[:, 1:]
        lower = M.lower_pass(self.model, inp, self.layer)
        scale = 1.0 / (temperature or 1.0)
        logits = M.steered_logits(self.model, inp, inject, starts, self.layer, lower, lengths)
        onehot = np.zeros(tgt.shape + (self.model.config.vocab_size,))
        np.put_along_axis(onehot, tgt[..., None], 1.0, axis=-1)
        logp = (ad.log_softmax(logits * scale) * onehot).sum(axis=-1)
        base = M.steered_logits(self.model, inp, None, starts, self.layer, lower).data * scale
        base = base - base.max(axis=-1, keepdims=True)
        base = base - np.log(np.exp(base).sum(axis=-1, keepdims=True))
        base_logp = (base * onehot).sum(axis=-1)
        mask = M.injection_mask(lengths, starts, inp.shape[1])[..., 0]
        return logp, base_logp, mask

    def greedy(self, instance, steer):
        return M.generate(self.model, instance.prompt, steer=steer, max_steps=self.max_steps,
                          layer=self.layer).tokens

    def verify(self, tokens, instance) -> int:
        return T.verify(tokens, instance)

    def candidate_scores(self, instance, steers):
        steers = np.asarray(steers, dtype=np.float64)
        C = steers.shape[0]
        target = list(instance.gold) + [T.END]
        insts = [instance] * C
        toks, starts, lengths = self._teacher_forced(insts, [target] * C)
        inp, tgt = toks[:, :-1], toks[:, 1:]
        lower = np.repeat(M.lower_pass(self.model, inp[:1], self.layer), C, axis=0)
        logits = M.steered_logits(self.model, inp, steers, starts, self.layer, lower, lengths).data
        pos = np.arange(starts[0], lengths[0])
        sel = logits[:, pos]
        correct = np.all(sel.argmax(axis=-1) == tgt[0, pos][None], axis=1)
        lsm = sel - sel.max(axis=-1, keepdims=True)
        lsm = lsm - np.log(np.exp(lsm).sum(axis=-1, keepdims=True))
        gold_pos = np.arange(len(instance.gold))
        gold_lp = lsm[:, gold_pos, tgt[0, pos][gold_pos]].sum(axis=1)
        return gold_lp, correct


class PlantedBackend:
    """Single-token answers with logits linear in the injection.

    ``logits = base + readout @ v`` with ``base`` and ``readout`` fixed; the
    answer is correct iff the emitted token equals the instance's gold token.
    """

    def __init__(self, base_logits, readout, d: int, label: str = "planted"):
        self.base = np.asarray(base_logits, dtype=np.float64)
        self.readout = np.asarray(readout, dtype=np.float64)
        self.d = d
        self.fingerprint = label
        self.max_steps = 1

    def logits(self, instance, v) -> np.ndarray:
        base = self.base[instance.kind] if self.base.ndim == 2 else self.base
        readout = self.readout[instance.kind] if self.readout.ndim == 3 else self.readout
        return base + readout @ np.asarray(v, dtype=np.float64)

    def prompt_hidden(self, instances) -> np.ndarray:
        return np.stack([x.hidden for x in instances])

    def rollouts(self, instance, steers, temperature, rngs):
        comps, lps = [], []
        for r, v in enumerate(steers):
            z = self.logits(instance, v)
            tok = M.decode_token(z, temperature, None if rngs is None else rngs[r])
            zz = z / (temperature or 1.0)
            lp = zz[tok] - zz.max() - np.log(np.exp(zz - zz.max()).sum())
            comps.append([tok])
            lps.append(np.array([lp]))
        return comps, lps

    def policy_logprobs(self, instances, completions, inject, temperature):
        inject = ad.as_tensor(inject)
        scale = 1.0 / (temperature or 1.0)
        base = np.stack([self.base[x.kind] if self.base.ndim == 2 else self.base for x in instances])
        ro = np.stack([self.readout[x.kind] if self.readout.ndim == 3 else self.readout for x in instances])
        # (R, V, d) @ (R, d, 1) -> (R, V)
        shift = ad.matmul(Tensor(ro), inject.reshape(len(instances), self.d, 1)).reshape(len(instances), -1)
        logits = (shift + Tensor(base)) * scale
        tok = np.array([c[0] for c in completions])
        onehot = np.zeros(base.shape)
        onehot[np.arange(len(tok)), tok] = 1.0
        logp = (ad.log_softmax(logits, axis=-1) * onehot).sum(axis=-1).reshape(len(tok), 1)
        b = base * scale
        b = b - b.max(axis=1, keepdims=True)
        b = b - np.log(np.exp(b).sum(axis=1, keepdims=True))
        base_logp = (b * onehot).sum(axis=1)[:, None]
        return logp, base_logp, np.ones((len(tok), 1))

    def greedy(self, instance, steer):
        v = np.zeros(self.d) if steer is None else steer
        return [M.decode_token(self.logits(instance, v))]

    def verify(self, tokens, instance) -> int:
        return int(len(tokens) > 0 and tokens[0] == instance.gold)

    def candidate_scores(self, instance, steers):
        z = np.stack([self.logits(instance, v) for v in steers])
        lsm = z - z.max(axis=1, keepdims=True)
        lsm = lsm - np.log(np.exp(lsm).sum(axis=1, keepdims=True))
        return lsm[:, instance.gold], z.argmax(axis=1) == instance.gold


@dataclass(frozen=True)
class KindInstance:
    seed: int
    kind: int
    hidden: np.ndarray = field(repr=False, compare=False)
    gold: int = 1
    skill_id: str = "planted"


def planted_bandit(d: int = 16, K: int = 6, target: int = 0, seed: int = 0, gain: float = 3.0,
                   n_prompts: int = 64):
    """One primitive (``target``) raises the gold logit; every other one lowers it.

    With gates off the gold token has logit ``-gain``; greedy decoding is
    correct iff ``v . u_target - sum_{j != target} v . u_j > 1``.
    """
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    U = Q[:, :K].T.copy()
    signs = -np.ones(K)
    signs[target] = 1.0
    readout = np.zeros((1, 2, d))
    readout[0, 1] = gain * (signs @ U)
    base = np.array([[0.0, -gain]])
    backend = PlantedBackend(base, readout, d, label=f"bandit-{seed}")
    insts = [KindInstance(i, 0, rng.normal(0, 1 / np.sqrt(d), d)) for i in range(n_prompts)]
    return backend, U, insts


def planted_pairs(d: int = 16, K: int = 6, seed: int = 0, gain: float = 2.0, bias: float = 5.0,
                  n_prompts: int = 64, pairs=((0, 1), (2, 3))):
    """Two prompt kinds; kind ``k`` is solved only with both primitives of ``pairs[k]`` active.

    The gold logit is ``-bias + gain * (v . u_a + v . u_b)``; at ``alpha_max = 2``
    one primitive alone reaches at most ``-1`` while both reach ``+3``.
    Prompt kinds are separable from the hidden state.
    """
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    U = Q[:, :K].T.copy()
    centers = Q[:, K:K + len(pairs)].T * 1.5
    readout = np.zeros((len(pairs), 2, d))
    base = np.zeros((len(pairs), 2))
    for k, (a, b) in enumerate(pairs):
        readout[k, 1] = gain * (U[a] + U[b])
        base[k, 1] = -bias
    backend = PlantedBackend(base, readout, d, label=f"pairs-{seed}")
    insts = [KindInstance(i, i % len(pairs), centers[i % len(pairs)] + rng.normal(0, 0.1, d))
             for i in range(n_prompts)]
    return backend, U, insts


# -- oracle labels -----------------------------------------------------------------------
@dataclass(frozen=True)
class OracleLabel:
    instance_id: int
    w_star: np.ndarray
    alpha_star: np.ndarray
    confidence: float
    skill_id: str = ""


def alpha_grid(alpha_max: float, step: float) -> np.ndarray:
    n = round(alpha_max / step)
    if n < 1 or abs(n * step - alpha_max) > 1e-9:
        raise ValueError(f"alpha step {step} does not divide alpha_max {alpha_max}")
    return np.round(np.arange(n + 1) * step, 12)


def synthesize_oracle(instance, backend, library, alpha_step: float = 0.1, subset_size: int = 2,
                      alpha_max: float = 2.0, stats: dict | None = None) -> OracleLabel | None:
    """Constrained grid search for a static injection that makes greedy decoding correct.

    Returns the zero configuration when the base model already answers
    correctly. ``stats['candidates']`` counts distinct configurations scored.
    """
    V = np.asarray(getattr(library, "vectors", library), dtype=np.float64)
    K = V.shape[0]
    grid = alpha_grid(alpha_max, alpha_step)
    zero = np.zeros(K)
    if backend.verify(backend.greedy(instance, None), instance):
        if stats is not None:
            stats["candidates"] = stats.get("candidates", 0) + 1
        lp, _ = backend.candidate_scores(instance, np.zeros((1, V.shape[1])))
        return OracleLabel(instance.seed, zero.copy(), zero.copy(), float(lp[0]), instance.skill_id)
    seen: dict[tuple, tuple[float, bool]] = {}

    def score(configs: list[np.ndarray]) -> None:
        new = [c for c in configs if tuple(c) not in seen]
        if not new:
            return
        steers = np.stack([R.compose(R.RoutingDecision(c, (c > 0).astype(float), c), V) for c in new])
        lp, ok = backend.candidate_scores(instance, steers)
        for c, l_, o in zip(new, lp, ok):
            seen[tuple(c)] = (float(l_), bool(o))

    singles = []
    for i in range(K):
        for a in grid[1:]:
            c = zero.copy()
            c[i] = a
            singles.append(c)
    score(singles)
    rank = []
    for i in range(K):
        vals = [seen[tuple(c)] for c in singles if c[i] > 0]
        rank.append((-max(o for _, o in vals), -max(l_ for l_, _ in vals), i))
    top = [i for _, _, i in sorted(rank)[:subset_size]]
    joint = []
    for combo in np.array(np.meshgrid(*[grid] * len(top), indexing="ij")).reshape(len(top), -1).T:
        c = zero.copy()
        c[top] = combo
        if c.any():
            joint.append(c)
    score(joint)
    if stats is not None:
        stats["candidates"] = stats.get("candidates", 0) + len(seen)
    admissible = [(lp, -float(np.abs(np.array(c)).sum()), c) for c, (lp, ok) in seen.items() if ok]
    admissible.sort(key=lambda t: (t[0], t[1]), reverse=True)
    for lp, _, c in admissible:
        c = np.array(c)
        w = (c > 0).astype(np.float64)
        steer = R.compose(R.RoutingDecision(w, w, c), V)
        if backend.verify(backend.greedy(instance, steer), instance):
            return OracleLabel(instance.seed, w, c, lp, instance.skill_id)
    return None


def build_oracle_dataset(instances, backend, library, alpha_step: float = 0.1, subset_size: int = 2,
                         alpha_max: float = 2.0) -> tuple[list[OracleLabel], dict]:
    labels, stats = [], {"instances": 0, "labelled": 0, "null": 0, "candidates": 0}
    for inst in instances:
        stats["instances"] += 1
        lab = synthesize_oracle(inst, backend, library, alpha_step, subset_size, alpha_max, stats)
        if lab is None:
            continue
        labels.append(lab)
        stats["labelled"] += 1
        stats["null"] += int(not lab.w_star.any())
    return labels, stats


# -- supervised warm-up ----------------------------------------------------------------------
@dataclass(frozen=True)
class SFTConfig:
    # a router trained from scratch needs far more passes than the 3 used to warm-start a large model
    epochs: int = 30
    lr: float = 1e-2
    batch_size: int = 16
    seed: int = 0
    samples: int = 200


def sft_loss(params: R.RouterParams, H, W_star, A_star, config: R.RouterConfig = R.RouterConfig()) -> Tensor:
    """Mean over samples of BCE(p, w*) + squared error on alpha where w* = 1."""
    gate_logits, alpha, _ = R.heads(params, H, config)
    W_star = np.asarray(W_star, dtype=np.float64)
    # BCE from logits: softplus(z) - y z, written with log_softmax over (0, z) for stability
    pair = ad.stack([Tensor(np.zeros(W_star.shape)), gate_logits], axis=-1)
    lsm = ad.log_softmax(pair, axis=-1)
    bce = -(lsm[..., 1] * W_star + lsm[..., 0] * (1.0 - W_star))
    se = ad.square(alpha - np.asarray(A_star, dtype=np.float64)) * W_star
    n = W_star.shape[0]
    return (bce.sum() + se.sum()) * (1.0 / n)


def sft_train(params: R.RouterParams, H, labels: list[OracleLabel], config: SFTConfig = SFTConfig(),
              router_config: R.RouterConfig = R.RouterConfig()) -> tuple[R.RouterParams, list[float]]:
    """Train a copy of ``params``; returns it with the per-epoch mean loss."""
    if not labels:
        raise ValueError("SFT dataset is empty")
    H = np.asarray(H, dtype=np.float64)
    W_star = np.stack([l_.w_star for l_ in labels])
    A_star = np.stack([l_.alpha_star for l_ in labels])
    params = params.copy()
    opt = ad.Optimizer(params.parameters(), ad.OptimizerConfig(kind="adam", lr=config.lr))
    rng = np.random.default_rng(config.seed)
    curve = []
    last_good = params.copy()
    for epoch in range(config.epochs):
        order = rng.permutation(len(labels))
        losses = []
        for s in range(0, len(order), config.batch_size):
            idx = order[s:s + config.batch_size]
            loss = sft_loss(params, H[idx], W_star[idx], A_star[idx], router_config)
            if not np.isfinite(loss.data):
                raise TrainingDivergence(f"SFT loss became {loss.data} in epoch {epoch}", last_good)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.data) * len(idx))
        curve.append(sum(losses) / len(order))
        last_good = params.copy()
    return params, curve


# -- GRPO -------------------------------------------------------------------------------
@dataclass(frozen=True)
class GRPOConfig:
    group_size: int = 8
    rollout_temperature: float = 1.5
    kl_coef: float = 0.001
    clip_range: float = 0.2
    lr: float = 3e-3
    epochs: int = 2
    batch_size: int = 32
    adv_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.rollout_temperature <= 0:
            raise ValueError("rollout_temperature must be positive")


@dataclass
class RolloutGroup:
    prompt_id: int
    completions: list[list[int]]
    rewards: np.ndarray
    advantages: np.ndarray
    logprobs: list[np.ndarray]
    noise: np.ndarray = field(repr=False)


def compute_advantages(rewards, eps: float = 1e-8) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("need at least two rewards per group")
    std = r.std()
    if std == 0.0:
        return np.zeros_like(r)
    return (r - r.mean()) / (std + eps)


KL_FLOOR = 1e-12


def kl_terms(routed_logp, base_logp) -> tuple[np.ndarray, int]:
    """Per-token ``r - log r - 1`` with ``r = pi_base / pi_routed`` and the number of floored tokens."""
    routed_logp = np.asarray(routed_logp, dtype=np.float64)
    floored = routed_logp < np.log(KL_FLOOR)
    lr_ = np.asarray(base_logp, dtype=np.float64) - np.maximum(routed_logp, np.log(KL_FLOOR))
    return np.exp(lr_) - lr_ - 1.0, int(floored.sum())


def kl_regularizer(routed, base, tokens) -> float:
    """Mean low-variance KL estimate over decoding steps.

    ``routed`` and ``base`` are ``(T, V)`` next-token distributions and
    ``tokens`` the ``T`` tokens sampled from ``routed``.
    """
    routed = np.asarray(routed, dtype=np.float64)
    base = np.asarray(base, dtype=np.float64)
    tokens = np.asarray(tokens, dtype=np.int64)
    if routed.shape != base.shape:
        raise ValueError("routed and base distributions must share a vocabulary")
    idx = np.arange(len(tokens))
    pr = routed[idx, tokens]
    floored = int((pr < KL_FLOOR).sum())
    if floored:
        log.warning("kl_regularizer: %d sampled tokens had routed probability below %g", floored, KL_FLOOR)
    terms, _ = kl_terms(np.log(np.maximum(pr, KL_FLOOR)), np.log(np.maximum(base[idx, tokens], 1e-300)))
    return float(terms.mean())


def exact_kl(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    nz = p > 0
    return float((p[nz] * (np.log(p[nz]) - np.log(q[nz]))).sum())


def _expand(x: Tensor, n: int) -> Tensor:
    return ad.take_rows(x, np.repeat(np.arange(x.shape[0]), n))


def grpo_loss(params: R.RouterParams, backend, vectors, instances, groups: list[RolloutGroup],
              config: GRPOConfig, router_config: R.RouterConfig, gumbel_temperature: float,
              hidden: np.ndarray | None = None) -> tuple[Tensor, dict]:
    """Clipped group-relative surrogate minus ``kl_coef`` times the token KL estimate."""
    N = config.group_size
    H = backend.prompt_hidden(instances) if hidden is None else hidden
    gate_logits, alpha, _ = R.heads(params, H, router_config)
    noise = np.concatenate([g.noise for g in groups])
    gates = R.gumbel_sigmoid(_expand(gate_logits, N), gumbel_temperature, noise=noise,
                             straight_through=router_config.straight_through)
    inject = R.compose_tensor(gates, _expand(alpha, N), vectors)
    rows = [x for x in instances for _ in range(N)]
    comps = [c for g in groups for c in g.completions]
    logp, base_logp, mask = backend.policy_logprobs(rows, comps, inject, config.rollout_temperature)
    old = np.zeros(mask.shape)
    for r, lp in enumerate(lp for g in groups for lp in g.logprobs):
        pos = np.flatnonzero(mask[r])
        old[r, pos] = lp[:len(pos)]
    adv = np.concatenate([g.advantages for g in groups])[:, None]
    ratio = ad.exp(logp - old)
    clipped = ad.clip(ratio, 1.0 - config.clip_range, 1.0 + config.clip_range)
    use_raw = ((ratio.data * adv) <= (np.clip(ratio.data, 1 - config.clip_range, 1 + config.clip_range) * adv))
    surrogate = ratio * (adv * use_raw) + clipped * (adv * ~use_raw)
    log_r = Tensor(base_logp) - logp
    k3 = ad.exp(log_r) - log_r - 1.0
    counts = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
    weight = mask / counts / mask.shape[0]
    policy = (surrogate * weight).sum()
    kl = (k3 * weight).sum()
    loss = kl * config.kl_coef - policy
    if router_config.sparsity_penalty:
        loss = loss + ad.sigmoid(gate_logits).mean() * router_config.sparsity_penalty
    info = {"kl": float(kl.data), "surrogate": float(policy.data),
            "gate_rate": float(gates.data.mean()), "inject_norm": float(np.linalg.norm(inject.data, axis=1).mean())}
    return loss, info


def collect_groups(params: R.RouterParams, backend, vectors, instances, config: GRPOConfig,
                   router_config: R.RouterConfig, gumbel_temperature: float, step: int,
                   hidden: np.ndarray | None = None) -> list[RolloutGroup]:
    N = config.group_size
    H = backend.prompt_hidden(instances) if hidden is None else hidden
    gate_logits, alpha, _ = R.heads(params, H, router_config)
    out = []
    for b, inst in enumerate(instances):
        # private streams per (run seed, prompt, rollout)
        noise = R.logistic_noise(np.random.default_rng([config.seed, step, inst.seed, 1 << 20]),
                                 (N, params.K))
        gates = R.gumbel_sigmoid(np.tile(gate_logits.data[b], (N, 1)), gumbel_temperature, noise=noise,
                                 straight_through=router_config.straight_through).data
        steers = (gates * alpha.data[b]) @ vectors
        rngs = [np.random.default_rng([config.seed, step, inst.seed, n]) for n in range(N)]
        comps, lps = backend.rollouts(inst, steers, config.rollout_temperature, rngs)
        rewards = np.array([backend.verify(c, inst) for c in comps], dtype=np.float64)
        out.append(RolloutGroup(inst.seed, comps, rewards, compute_advantages(rewards, config.adv_eps), lps, noise))
    return out


@dataclass
class GRPOTrainer:
    """Owns the router's mutable parameters and the optimizer state."""
    params: R.RouterParams
    backend: object
    vectors: np.ndarray
    config: GRPOConfig = GRPOConfig()
    router_config: R.RouterConfig = R.RouterConfig()
    total_steps: int = 1
    log_path: Path | None = None
    step_index: int = 0
    skipped: int = 0

    def __post_init__(self):
        self.params = self.params.copy()
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.optimizer = ad.Optimizer(self.params.parameters(), ad.OptimizerConfig(kind="adam", lr=self.config.lr))

    def temperature(self) -> float:
        rc = self.router_config
        frac = min(self.step_index / max(self.total_steps - 1, 1), 1.0)
        return rc.gumbel_temperature + (rc.gumbel_temperature_final - rc.gumbel_temperature) * frac

    def step(self, instances) -> dict:
        temp = self.temperature()
        H = self.backend.prompt_hidden(instances)
        groups = collect_groups(self.params, self.backend, self.vectors, instances, self.config,
                                self.router_config, temp, self.step_index, H)
        rewards = np.concatenate([g.rewards for g in groups])
        p = ad.sigmoid(R.heads(self.params, H, self.router_config)[0]).data
        metrics = {"step": self.step_index, "mean_reward": float(rewards.mean()),
                   "gate_sparsity": float((p > self.router_config.tau).mean()),
                   "mean_alpha": float(R.heads(self.params, H, self.router_config)[1].data.mean())}
        self.step_index += 1
        if not rewards.any():
            self.skipped += 1
            metrics.update({"skipped": True, "kl": 0.0, "loss": 0.0})
            self._log(metrics)
            return metrics
        last_good = self.params.copy()
        loss, info = grpo_loss(self.params, self.backend, self.vectors, instances, groups, self.config,
                               self.router_config, temp, H)
        if not np.isfinite(loss.data):
            raise TrainingDivergence(f"GRPO loss became {loss.data} at step {self.step_index}", last_good)
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        metrics.update({"skipped": False, "kl": info["kl"], "loss": float(loss.data),
                        "inject_norm": info["inject_norm"]})
        self._log(metrics)
        return metrics

    def _log(self, metrics: dict) -> None:
        if self.log_path is not None:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(metrics, sort_keys=True) + "\n")


def grpo_train(params: R.RouterParams, backend, vectors, instances, config: GRPOConfig = GRPOConfig(),
               router_config: R.RouterConfig = R.RouterConfig(), log_path=None,
               steps: int | None = None) -> tuple[R.RouterParams, list[dict]]:
    """``config.epochs`` passes over ``instances`` in shuffled batches (or exactly ``steps`` steps)."""
    per_epoch = max(1, -(-len(instances) // config.batch_size))
    total = steps if steps is not None else per_epoch * config.epochs
    trainer = GRPOTrainer(params, backend, vectors, config, router_config, total,
                          None if log_path is None else Path(log_path))
    rng = np.random.default_rng([config.seed, 7])
    history, order = [], []
    while trainer.step_index < total:
        if not order:
            order = list(rng.permutation(len(instances)))
        batch, order = order[:config.batch_size], order[config.batch_size:]
        history.append(trainer.step([instances[i] for i in batch]))
    return trainer.params, history


def route_batch(params: R.RouterParams, H, router_config: R.RouterConfig = R.RouterConfig()):
    """Inference-mode (p, w, alpha) for a batch of hidden states."""
    gate_logits, alpha, _ = R.heads(params, np.asarray(H, dtype=np.float64), router_config)
    p = ad.sigmoid(gate_logits).data
    return p, (p > router_config.tau).astype(np.float64), alpha.data


def config_dict(cfg) -> dict:
    return asdict(cfg)
