"""Create the frozen base model the rest of the pipeline steers."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as M
from . import tasks as T

log = logging.getLogger(__name__)


class HeadroomError(RuntimeError):
    def __init__(self, report: dict[str, float], message: str):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    warmup: int = 100
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed_range: tuple[int, int] = (0, 6000)
    mix: T.PretrainMix = field(default_factory=T.PretrainMix)


def pretrain(config: M.ModelConfig, specs: list[T.SkillSpec], budget: PretrainConfig, seed: int,
             log_every: int = 0) -> tuple[M.FrozenModel, list[float]]:
    """Train on the mixed answer stream for ``budget.steps`` steps and freeze.

    ``steps == 0`` returns the random initialisation (frozen as-is).
    """
    weights = M.init_weights(config, seed)
    W = {k: ad.parameter(v) for k, v in weights.items()}
    opt = ad.Optimizer(list(W.values()), ad.OptimizerConfig(
        kind="adam", lr=budget.lr, betas=(0.9, 0.98), weight_decay=budget.weight_decay,
        grad_clip=budget.grad_clip))
    rng = np.random.default_rng(seed + 1)
    losses = []
    for step in range(budget.steps):
        tokens, targets, mask = T.pretrain_batch(specs, budget.seed_range, budget.batch_size, rng, budget.mix)
        warm = min(1.0, (step + 1) / max(budget.warmup, 1))
        decay = 0.5 * (1 + np.cos(np.pi * step / budget.steps))
        opt.config.lr = budget.lr * warm * max(decay, 0.05)
        x = M.embed(W, tokens)
        x = M.run_blocks(W, config, x, 1, config.num_layers)
        logits = M.unembed(W, x)
        loss = ad.softmax_crossentropy(logits, targets, mask)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.data))
        if log_every and (step % log_every == 0 or step == budget.steps - 1):
            log.info("pretrain step %d loss %.4f", step, losses[-1])
    model = M.FrozenModel(config, {k: v.data for k, v in W.items()})
    return model, losses


def headroom_report(accuracy: dict[str, float], specs: list[T.SkillSpec], margin: float = 0.10,
                    ceiling: float = 0.95) -> dict[str, tuple[float, float, bool]]:
    """Per family: (accuracy, chance, inside the (chance + margin, ceiling) band)."""
    out = {}
    for spec in specs:
        acc = accuracy[spec.skill_id]
        out[spec.skill_id] = (acc, spec.chance, spec.chance + margin < acc < ceiling)
    return out


def check_headroom(accuracy: dict[str, float], specs: list[T.SkillSpec], margin: float = 0.10,
                   ceiling: float = 0.95) -> None:
    report = headroom_report(accuracy, specs, margin, ceiling)
    bad = {k: v for k, v in report.items() if not v[2]}
    if bad:
        lines = ", ".join(f"{k}: acc={a:.3f} (chance {c:.3f})" for k, (a, c, _) in bad.items())
        raise HeadroomError({k: v[0] for k, v in report.items()},
                            f"no steering headroom on {len(bad)} famil(ies): {lines}")
