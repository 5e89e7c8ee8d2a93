"""Greedy evaluation under the different steering conditions, plus ablation rows."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import model as M
from . import router as R
from . import tasks as T
from . import vocab


class LeakageError(AssertionError):
    pass


class BindingError(ValueError):
    pass


@dataclass
class EvalResult:
    condition: str
    accuracy: dict[str, float]
    mean_tokens: dict[str, float]
    strengths: np.ndarray = field(repr=False)
    families: list[str] = field(default_factory=list)
    seed: int = 0
    config_hash: str = ""
    n: int = 0

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([self.accuracy[f] for f in self.families]))

    @property
    def overall_tokens(self) -> float:
        return float(np.mean([self.mean_tokens[f] for f in self.families]))


def assert_disjoint(eval_sets: dict[str, list[T.TaskInstance]], train_ranges: dict[str, tuple[int, int]]) -> None:
    """Every evaluation seed must lie outside every training-phase seed range."""
    for fam, insts in eval_sets.items():
        seeds = [x.seed for x in insts]
        for phase, (lo, hi) in train_ranges.items():
            bad = [s for s in seeds if lo <= s < hi]
            if bad:
                raise LeakageError(f"{fam}: evaluation seeds {bad[:5]} overlap the {phase} range [{lo}, {hi})")


def check_binding(model: M.FrozenModel, library=None, router: R.RouterParams | None = None) -> None:
    if library is not None:
        fp = library.provenance.get("model_fingerprint")
        if fp is not None and fp != model.fingerprint:
            raise BindingError(f"library was elicited from model {fp[:12]}, evaluating {model.fingerprint[:12]}")
    if router is not None and library is not None and router.library_hash and router.library_hash != library.hash:
        raise BindingError(f"router is bound to library {router.library_hash[:12]}, not {library.hash[:12]}")


def evaluate(model: M.FrozenModel, task_sets: dict[str, list[T.TaskInstance]], condition: str = "base",
             router: R.RouterParams | None = None, library=None,
             router_config: R.RouterConfig = R.RouterConfig(), static: np.ndarray | None = None,
             prefix: int | None = None, top1: bool = False, seed: int = 0, config_hash: str = "",
             max_steps: int = 6) -> EvalResult:
    """Greedy decoding on every instance; results reduced in instance order.

    ``router`` + ``library`` route once on the prefill hidden state and reuse
    the composed vector on every step (``top1`` keeps only the strongest
    primitive). ``static`` injects a fixed vector. ``prefix`` prepends a
    framing token instead of steering. All conditions share one batched
    decoder, so a router that never fires reproduces the base row exactly.
    """
    if top1 and router is None:
        raise ValueError("top-1 evaluation needs a router and a library")
    if (router is None) != (library is None):
        raise ValueError("router and library must be given together")
    check_binding(model, library, router)
    layer = library.layer if library is not None else model.config.intervention_layer
    families = list(task_sets)
    K = library.K if library is not None else 0
    insts = [x for f in families for x in task_sets[f]]
    prompts = [x.prompt if prefix is None else T.apply_prefix(x.prompt, prefix) for x in insts]
    d = model.config.model_dim
    steers = np.zeros((len(insts), d))
    applied = np.zeros((len(insts), K))
    if static is not None:
        steers[:] = np.asarray(static, dtype=np.float64)
    if router is not None:
        H = M.last_hidden(model, prompts, layer)
        for i, h in enumerate(H):
            dec = R.route(router, h, router_config, "infer")
            if top1:
                dec = R.top1_only(dec)
            applied[i] = dec.applied
            steers[i] = R.compose(dec, library)
    gens = M.greedy_many(model, prompts, steers, max_steps=max_steps, layer=layer)
    acc, toks = {}, {}
    strengths = np.zeros((len(families), K))
    off = 0
    for fi, fam in enumerate(families):
        n = len(task_sets[fam])
        part = range(off, off + n)
        acc[fam] = float(np.mean([T.verify(gens[i], insts[i]) for i in part]))
        toks[fam] = float(np.mean([len(gens[i]) for i in part]))
        if K:
            strengths[fi] = applied[off:off + n].mean(axis=0)
        off += n
    return EvalResult(condition, acc, toks, strengths, families, seed, config_hash, len(insts))


def prompted(model, task_sets, seed: int = 0, config_hash: str = "", max_steps: int = 6) -> EvalResult:
    """Analogue of a verbose reasoning template: the first positive framing token."""
    return evaluate(model, task_sets, "prompted", prefix=vocab.POSITIVE_PREFIXES[0], seed=seed,
                    config_hash=config_hash, max_steps=max_steps)


def routing_heatmap(model: M.FrozenModel, router: R.RouterParams, library, task_sets,
                    router_config: R.RouterConfig = R.RouterConfig()) -> np.ndarray:
    """``(family, primitive)`` mean of ``w_i * alpha_i`` at inference."""
    out = np.zeros((len(task_sets), library.K))
    for fi, insts in enumerate(task_sets.values()):
        H = M.last_hidden(model, [x.prompt for x in insts], library.layer)
        for h in H:
            out[fi] += R.route(router, h, router_config, "infer").applied
        out[fi] /= len(insts)
    return out


def delta_table(base: EvalResult, other: EvalResult) -> dict[str, float]:
    """Per-family accuracy difference ``other - base``."""
    return {f: other.accuracy[f] - base.accuracy[f] for f in base.families}


def token_ratio(base: EvalResult, other: EvalResult) -> float:
    return base.overall_tokens / other.overall_tokens


def ablation_grid(entries: list[tuple[str, Callable[[], EvalResult] | None]]) -> list[dict]:
    """Run each variant; a missing checkpoint marks the row absent and the grid continues."""
    rows = []
    for label, thunk in entries:
        if thunk is None:
            rows.append({"condition": label, "status": "absent", "result": None})
            continue
        try:
            res = thunk()
        except FileNotFoundError as exc:
            rows.append({"condition": label, "status": f"absent: {exc}", "result": None})
            continue
        rows.append({"condition": label, "status": "ok", "result": res})
    return rows
