"""End-to-end experiment phases with on-disk artifacts and resumable stamps.

Each phase reads its inputs from ``outdir``, writes its outputs there and
finally writes ``stamps/<phase>.json`` holding a hash of the config
sections it depends on. A phase whose stamp matches is skipped; a phase
whose inputs are missing or stale raises ``MissingArtifact`` naming the
command that produces them.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import elicitation as E
from . import evaluation as V
from . import model as M
from . import pretraining as P
from . import reports as RP
from . import router as R
from . import tasks as T
from . import training as TR
from .config import RunConfig

log = logging.getLogger(__name__)

PHASES = ("pretrain", "elicit", "sweep", "train-sft", "train-rl", "evaluate", "ablate", "report")
_SECTIONS = {
    "pretrain": ("seed", "model", "tasks", "pretrain"),
    "elicit": ("seed", "model", "tasks", "pretrain", "elicit"),
    "sweep": ("seed", "model", "tasks", "pretrain", "elicit"),
    "train-sft": ("seed", "model", "tasks", "pretrain", "elicit", "router", "oracle", "sft", "eval"),
    "train-rl": ("seed", "model", "tasks", "pretrain", "elicit", "router", "oracle", "sft", "rl", "eval"),
    "evaluate": ("seed", "model", "tasks", "pretrain", "elicit", "router", "oracle", "sft", "rl", "eval"),
    "ablate": ("seed", "model", "tasks", "pretrain", "elicit", "router", "oracle", "sft", "rl", "eval"),
}
_REQUIRES = {
    "pretrain": (),
    "elicit": ("pretrain",),
    "sweep": ("elicit",),
    "train-sft": ("elicit",),
    "train-rl": ("train-sft",),
    "evaluate": ("train-rl", "sweep"),
    "ablate": ("train-rl",),
    "report": ("evaluate",),
}


class MissingArtifact(RuntimeError):
    def __init__(self, command: str, detail: str):
        self.command = command
        super().__init__(f"{detail}; run `{command}` first")


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _interleave(groups: list[list]) -> list:
    out = []
    for i in range(max(len(g) for g in groups)):
        out += [g[i] for g in groups if i < len(g)]
    return out


class Pipeline:
    def __init__(self, config: RunConfig, outdir):
        self.cfg = config
        self.out = Path(outdir)
        self.specs = T.default_specs(config.tasks.hurry_rate)
        self._check_ranges()

    # -- bookkeeping ----------------------------------------------------------------------
    def key(self, phase: str) -> str:
        return self.cfg.section_hash(*_SECTIONS[phase])

    def _stamp_path(self, phase: str) -> Path:
        return self.out / "stamps" / f"{phase}.json"

    def is_current(self, phase: str) -> bool:
        p = self._stamp_path(phase)
        if not p.exists():
            return False
        return json.loads(p.read_text()).get("key") == self.key(phase)

    def stamp(self, phase: str, outputs: list[str]) -> None:
        self._stamp_path(phase).parent.mkdir(parents=True, exist_ok=True)
        digests = {name: sha256_file(self.out / name) for name in outputs}
        self._stamp_path(phase).write_text(RP.canonical_json({"key": self.key(phase), "outputs": digests}))

    def require(self, phase: str) -> None:
        """Raise naming the earliest upstream phase whose outputs are missing or stale."""
        for dep in _REQUIRES[phase]:
            self.require(dep)
            if not self._stamp_path(dep).exists():
                raise MissingArtifact(dep, f"`{phase}` needs the outputs of `{dep}` in {self.out}")
            if not self.is_current(dep):
                raise MissingArtifact(dep, f"the `{dep}` outputs in {self.out} were made with a different config")

    def _path(self, name: str) -> Path:
        return self.out / name

    # -- data ---------------------------------------------------------------------------------
    def _check_ranges(self) -> None:
        t = self.cfg.tasks
        ranges = {"pretrain": self.cfg.pretrain.seed_range, "elicit": t.elicit_range, "sft": t.sft_range,
                  "rl": t.rl_range, "eval": t.eval_range}
        for name, (lo, hi) in ranges.items():
            if not 0 <= lo < hi:
                raise ValueError(f"{name} seed range [{lo}, {hi}) is empty or negative")
        names = sorted(ranges, key=lambda n: ranges[n][0])
        for a, b in zip(names, names[1:]):
            if ranges[a][1] > ranges[b][0]:
                raise ValueError(f"seed ranges {a} {ranges[a]} and {b} {ranges[b]} overlap")

    def _sets(self, lo: int, n: int) -> dict[str, list[T.TaskInstance]]:
        return {s.skill_id: T.generate_tasks(s, n, lo) for s in self.specs}

    def eval_sets(self) -> dict[str, list[T.TaskInstance]]:
        lo, hi = self.cfg.tasks.eval_range
        sets = self._sets(lo, hi - lo)
        t = self.cfg.tasks
        V.assert_disjoint(sets, {"pretrain": self.cfg.pretrain.seed_range, "elicit": t.elicit_range,
                                 "sft": t.sft_range, "rl": t.rl_range})
        return sets

    def dev_sets(self, n: int) -> dict[str, list[T.TaskInstance]]:
        """Held-out tail of the RL range, used for headroom and the static sweep."""
        lo, hi = self.cfg.tasks.rl_range
        return self._sets(hi - n, n)

    def rl_instances(self) -> list[T.TaskInstance]:
        lo, hi = self.cfg.tasks.rl_range
        n = self.cfg.rl.prompts_per_family
        if lo + n > hi - 100:
            raise ValueError(f"rl.prompts_per_family={n} runs into the held-out tail of the RL range")
        return _interleave(list(self._sets(lo, n).values()))

    def sft_instances(self) -> list[T.TaskInstance]:
        lo, hi = self.cfg.tasks.sft_range
        per = math.ceil(self.cfg.oracle.samples / len(self.specs))
        if per > hi - lo:
            raise ValueError(f"oracle.samples={self.cfg.oracle.samples} needs {per} per family, "
                             f"the SFT range holds {hi - lo}")
        return _interleave(list(self._sets(lo, per).values()))[:self.cfg.oracle.samples]

    def model(self) -> M.FrozenModel:
        p = self._path("model.bin")
        if not p.exists():
            raise MissingArtifact("pretrain", f"no model checkpoint at {p}")
        return M.load_model(p)

    def library(self, name: str = "library.bin", model: M.FrozenModel | None = None) -> E.PrimitiveLibrary:
        p = self._path(name)
        if not p.exists():
            raise MissingArtifact("elicit", f"no primitive library at {p}")
        return E.load_library(p, None if model is None else model.fingerprint)

    # -- phases -------------------------------------------------------------------------------
    def run_pretrain(self, force: bool = False) -> dict:
        if self.is_current("pretrain") and not force:
            log.info("pretrain: up to date")
            return json.loads(self._path("pretrain.json").read_text())
        self.out.mkdir(parents=True, exist_ok=True)
        cfg = self.cfg
        model, losses = P.pretrain(cfg.model, self.specs, cfg.pretrain, cfg.seed, log_every=250)
        M.save_model(model, self._path("model.bin"))
        dev = self.dev_sets(100)
        base = V.evaluate(model, dev, "base", max_steps=cfg.eval.max_steps)
        report = P.headroom_report(base.accuracy, self.specs)
        summary = {"fingerprint": model.fingerprint, "final_loss": losses[-1],
                   "loss_curve": losses[::50] + [losses[-1]],
                   "headroom": {k: {"accuracy": a, "chance": c, "ok": ok} for k, (a, c, ok) in report.items()}}
        self._path("pretrain.json").write_text(RP.canonical_json(summary))
        # the checkpoint stays on disk for inspection, but without a stamp nothing downstream accepts it
        P.check_headroom(base.accuracy, self.specs)
        self.stamp("pretrain", ["model.bin", "pretrain.json"])
        return summary

    def _elicit_library(self, model, kept, layer: int, K: int, tag: str) -> tuple[E.PrimitiveLibrary, list, object]:
        ec = self.cfg.elicit
        diffs = E.collect_pairs(model, kept, layer)
        km = E.kmeans(diffs, K, seed=ec.kmeans_seed, max_iters=ec.kmeans_max_iters, tol=ec.kmeans_tol,
                      restarts=ec.kmeans_restarts)
        prov = {"model_fingerprint": model.fingerprint, "elicit_config": self.key("elicit"), "variant": tag}
        lib = E.build_library(diffs, km.assignments, layer, prov)
        return lib, diffs, km

    def run_elicit(self, force: bool = False) -> dict:
        self.require("elicit")
        if self.is_current("elicit") and not force:
            log.info("elicit: up to date")
            return json.loads(self._path("elicitation.json").read_text())
        ec = self.cfg.elicit
        model = self.model()
        lo, hi = self.cfg.tasks.elicit_range
        if ec.problems_per_family > hi - lo:
            raise ValueError(f"elicit.problems_per_family={ec.problems_per_family} exceeds the elicitation range")
        pairs = []
        for insts in self._sets(lo, ec.problems_per_family).values():
            for x in insts:
                pairs += T.make_contrast_pairs(x, ec.pairs_per_question, self.cfg.model.max_context)
        kept, fstats = E.filter_pairs(model, pairs, ec.max_steps, ec.length_band)
        log.info("elicit: %d/%d pairs accepted", fstats.accepted, fstats.total)
        layer = self.cfg.model.intervention_layer
        lib, diffs, km = self._elicit_library(model, kept, layer, ec.K, "main")
        pca = E.pca_report(diffs)
        E.save_library(lib, self._path("library.bin"), pca)
        outputs = ["library.bin"]
        for k in ec.k_grid:
            if k == ec.K:
                continue
            klib, _, _ = self._elicit_library(model, kept, layer, k, f"K={k}")
            E.save_library(klib, self._path(f"library_K{k}.bin"))
            outputs.append(f"library_K{k}.bin")
        for L in (self.cfg.eval.early_layer, self.cfg.eval.late_layer):
            llib, _, _ = self._elicit_library(model, kept, L, ec.K, f"layer={L}")
            E.save_library(llib, self._path(f"library_L{L}.bin"))
            outputs.append(f"library_L{L}.bin")
        fams = [d.skill_id for d in diffs]
        purity = E.cluster_purity(km.assignments, fams)
        contingency = {}
        for a, f in zip(km.assignments.tolist(), fams):
            contingency.setdefault(f, [0] * lib.K)[a] += 1
        saved = self.library(model=model)
        C = E.cosine_matrix(saved)
        summary = {
            "pairs": fstats.total, "accepted": fstats.accepted, "acceptance_rate": fstats.acceptance_rate,
            "filter_reasons": dict(sorted(fstats.reasons.items())),
            "filter_per_family": {f: {"accepted": a, "total": t} for f, (a, t) in sorted(fstats.per_family.items())},
            "pca_fractions": pca.fractions[:16].tolist(), "pca_top_k": pca.top(ec.K),
            "projection": np.round(pca.projection, 6).tolist(), "projection_labels": fams,
            "purity_vs_family": purity, "cluster_family_counts": contingency,
            "cosine_matrix": C.tolist(), "mean_abs_offdiag": E.mean_abs_offdiag(C),
            "kmeans_inertia": km.inertia, "library_hash": saved.hash, "rejected": lib.rejected,
        }
        self._path("elicitation.json").write_text(RP.canonical_json(summary))
        self.stamp("elicit", outputs + ["elicitation.json"])
        return summary

    def run_sweep(self, force: bool = False) -> dict:
        self.require("sweep")
        if self.is_current("sweep") and not force:
            log.info("sweep: up to date")
            return json.loads(self._path("sweep.json").read_text())
        ec = self.cfg.elicit
        model = self.model()
        lib = self.library(model=model)
        dev = self.dev_sets(ec.sweep_per_family)
        rows = E.static_sweep(model, lib, dev, ec.sweep_alphas, ec.max_steps)
        base = V.evaluate(model, dev, "base", max_steps=ec.max_steps)
        zero_rows = [r for r in rows if r["alpha"] == 0.0]
        reproduces = all(r["accuracy"] == base.accuracy[r["family"]] for r in zero_rows) if zero_rows else None
        means: dict[tuple, list] = {}
        for r in rows:
            means.setdefault((r["vector"], r["alpha"]), []).append(r["accuracy"])
        best_v, best_a = max(means, key=lambda k: (np.mean(means[k]), -abs(k[1]), -k[0]))
        summary = {"rows": rows, "base": base.accuracy, "zero_alpha_reproduces_base": reproduces,
                   "best_static": {"vector": int(best_v), "alpha": float(best_a),
                                   "mean_accuracy": float(np.mean(means[(best_v, best_a)]))},
                   "best_alpha_by_family": [{"vector": v, "family": f, "alpha": a, "accuracy": acc}
                                            for (v, f), (a, acc) in sorted(E.best_alpha_by_family(rows).items())]}
        self._path("sweep.json").write_text(RP.canonical_json(summary))
        self.stamp("sweep", ["sweep.json"])
        return summary

    def _train_sft(self, model, lib: E.PrimitiveLibrary, seed: int, oracle: tuple | None = None):
        cfg = self.cfg
        backend = TR.TransformerBackend(model, lib.layer, cfg.eval.max_steps)
        insts = self.sft_instances()
        if oracle is None:
            labels, stats = TR.build_oracle_dataset(insts, backend, lib, cfg.oracle.alpha_step,
                                                    cfg.oracle.subset_size, cfg.router.alpha_max)
        else:
            labels, stats = oracle
        by_id = {(x.skill_id, x.seed): x for x in insts}
        H = backend.prompt_hidden([by_id[(l_.skill_id, l_.instance_id)] for l_ in labels])
        params = R.RouterParams.init(model.config.model_dim, lib.K, cfg.router, seed, lib.hash)
        params, curve = TR.sft_train(params, H, labels, replace(cfg.sft, seed=seed), cfg.router)
        return params, curve, labels, stats

    def run_train_sft(self, force: bool = False) -> dict:
        self.require("train-sft")
        if self.is_current("train-sft") and not force:
            log.info("train-sft: up to date")
            return json.loads(self._path("sft.json").read_text())
        model = self.model()
        lib = self.library(model=model)
        summary = {"seeds": {}}
        outputs = []
        oracle = None
        for seed in self.cfg.eval.seeds:
            params, curve, labels, stats = self._train_sft(model, lib, seed, oracle)
            oracle = (labels, stats)
            name = f"router_sft_s{seed}.bin"
            R.save_router(params, self._path(name), self.cfg.router)
            outputs.append(name)
            summary["seeds"][str(seed)] = {"loss_curve": curve}
        labels, stats = oracle
        per_family: dict[str, dict] = {}
        for l_ in labels:
            d = per_family.setdefault(l_.skill_id, {"labelled": 0, "null": 0, "gates": [0] * lib.K})
            d["labelled"] += 1
            d["null"] += int(not l_.w_star.any())
            for i in np.flatnonzero(l_.w_star):
                d["gates"][int(i)] += 1
        summary["oracle"] = {**stats, "per_family": per_family}
        self._path("sft.json").write_text(RP.canonical_json(summary))
        self._path("oracle_labels.json").write_text(RP.canonical_json(
            [{"family": l_.skill_id, "instance": l_.instance_id, "w": l_.w_star.tolist(),
              "alpha": l_.alpha_star.tolist(), "confidence": l_.confidence} for l_ in labels]))
        self.stamp("train-sft", outputs + ["sft.json", "oracle_labels.json"])
        return summary

    def _train_rl(self, model, lib, params: R.RouterParams, seed: int, log_name: str):
        cfg = self.cfg
        backend = TR.TransformerBackend(model, lib.layer, cfg.eval.max_steps)
        log_path = self._path(log_name)
        log_path.unlink(missing_ok=True)
        grpo = replace(cfg.rl.grpo, seed=seed)
        return TR.grpo_train(params, backend, lib.vectors, self.rl_instances(), grpo, cfg.router, log_path)

    def run_train_rl(self, force: bool = False) -> dict:
        self.require("train-rl")
        if self.is_current("train-rl") and not force:
            log.info("train-rl: up to date")
            return json.loads(self._path("rl.json").read_text())
        model = self.model()
        lib = self.library(model=model)
        summary = {"grpo": TR.config_dict(self.cfg.rl.grpo), "seeds": {}}
        outputs = []
        for seed in self.cfg.eval.seeds:
            start = R.load_router(self._path(f"router_sft_s{seed}.bin"), lib.hash)
            params, history = self._train_rl(model, lib, start, seed, f"rl_s{seed}.jsonl")
            name = f"router_rl_s{seed}.bin"
            R.save_router(params, self._path(name), self.cfg.router)
            outputs += [name, f"rl_s{seed}.jsonl"]
            summary["seeds"][str(seed)] = {"reward_curve": [h["mean_reward"] for h in history],
                                           "skipped": sum(bool(h["skipped"]) for h in history)}
        self._path("rl.json").write_text(RP.canonical_json(summary))
        self.stamp("train-rl", outputs + ["rl.json"])
        return summary

    def run_evaluate(self, force: bool = False) -> list[V.EvalResult]:
        self.require("evaluate")
        if self.is_current("evaluate") and not force:
            log.info("evaluate: up to date")
            return load_results(self._path("eval.json"))
        cfg = self.cfg
        model = self.model()
        lib = self.library(model=model)
        sets = self.eval_sets()
        ms = cfg.eval.max_steps
        h = self.key("evaluate")[:16]
        best = json.loads(self._path("sweep.json").read_text())["best_static"]
        static = best["alpha"] * lib.vectors[best["vector"]]
        base = V.evaluate(model, sets, "base", max_steps=ms, config_hash=h)
        prompted = V.prompted(model, sets, config_hash=h, max_steps=ms)
        fixed = V.evaluate(model, sets, "static", static=static, max_steps=ms, config_hash=h)
        results = []
        for seed in cfg.eval.seeds:
            for r in (base, prompted, fixed):
                results.append(replace(r, seed=seed))
            sft = R.load_router(self._path(f"router_sft_s{seed}.bin"), lib.hash)
            rl = R.load_router(self._path(f"router_rl_s{seed}.bin"), lib.hash)
            common = dict(library=lib, router_config=cfg.router, seed=seed, config_hash=h, max_steps=ms)
            results.append(V.evaluate(model, sets, "sft-only", router=sft, **common))
            results.append(V.evaluate(model, sets, "routed", router=rl, **common))
            results.append(V.evaluate(model, sets, "top1-only", router=rl, top1=True, **common))
        save_results(results, self._path("eval.json"))
        self.stamp("evaluate", ["eval.json"])
        return results

    def run_ablate(self, force: bool = False) -> list[dict]:
        self.require("ablate")
        if self.is_current("ablate") and not force:
            log.info("ablate: up to date")
            return json.loads(self._path("ablation.json").read_text())
        cfg = self.cfg
        model = self.model()
        sets = self.eval_sets()
        seed = cfg.eval.seeds[0]
        h = self.key("ablate")[:16]

        def variant(lib_name: str, label: str):
            p = self._path(lib_name)
            if not p.exists():
                return None

            def run():
                lib = self.library(lib_name, model)
                params, _, _, _ = self._train_sft(model, lib, seed)
                params, _ = self._train_rl(model, lib, params, seed, f"rl_ablate_{label}.jsonl")
                return V.evaluate(model, sets, label, router=params, library=lib, router_config=cfg.router,
                                  seed=seed, config_hash=h, max_steps=cfg.eval.max_steps)
            return run

        entries = [(f"K={k}", variant(f"library_K{k}.bin", f"K={k}")) for k in cfg.elicit.k_grid if k != cfg.elicit.K]
        entries += [(f"layer={L}", variant(f"library_L{L}.bin", f"layer={L}"))
                    for L in (cfg.eval.early_layer, cfg.eval.late_layer)]
        grid = V.ablation_grid(entries)
        rows = [{"condition": g["condition"], "status": g["status"],
                 "result": None if g["result"] is None else result_dict(g["result"])} for g in grid]
        self._path("ablation.json").write_text(RP.canonical_json(rows))
        self.stamp("ablate", ["ablation.json"] + [f"rl_ablate_{g['condition']}.jsonl" for g in grid
                                                  if g["status"] == "ok"])
        return rows

    def run_report(self) -> list[Path]:
        self.require("report")
        results = load_results(self._path("eval.json"))
        return write_report(self, results)

    def run_all(self, ablate: bool = False) -> list[Path]:
        self.run_pretrain()
        self.run_elicit()
        self.run_sweep()
        self.run_train_sft()
        self.run_train_rl()
        self.run_evaluate()
        if ablate:
            self.run_ablate()
        return self.run_report()


# -- serialisation ---------------------------------------------------------------------------------
def result_dict(r: V.EvalResult) -> dict:
    return {"condition": r.condition, "seed": r.seed, "accuracy": r.accuracy, "mean_tokens": r.mean_tokens,
            "strengths": np.asarray(r.strengths).tolist(), "families": r.families,
            "config_hash": r.config_hash, "n": r.n}


def result_from_dict(d: dict) -> V.EvalResult:
    return V.EvalResult(d["condition"], d["accuracy"], d["mean_tokens"], np.array(d["strengths"]),
                        d["families"], d["seed"], d["config_hash"], d["n"])


def save_results(results: list[V.EvalResult], path) -> None:
    Path(path).write_text(RP.canonical_json([result_dict(r) for r in results]))


def load_results(path) -> list[V.EvalResult]:
    return [result_from_dict(d) for d in json.loads(Path(path).read_text())]


# -- report ---------------------------------------------------------------------------------------
def headline(results: list[V.EvalResult]) -> dict:
    summary = {r["condition"]: r for r in RP.summary_rows(results)}
    out = {c: summary[c]["mean_accuracy"] for c in summary}
    if "routed" in summary and "base" in summary:
        out["routed_minus_base"] = summary["routed"]["mean_accuracy"] - summary["base"]["mean_accuracy"]
    if {"routed", "sft-only", "base"} <= set(summary):
        out["ordering_routed_ge_sft_ge_base"] = bool(
            summary["routed"]["mean_accuracy"] >= summary["sft-only"]["mean_accuracy"] >= summary["base"]["mean_accuracy"])
    if "routed" in summary and "top1-only" in summary:
        out["routed_minus_top1"] = summary["routed"]["mean_accuracy"] - summary["top1-only"]["mean_accuracy"]
    return out


def write_report(pipe: Pipeline, results: list[V.EvalResult]) -> list[Path]:
    out = pipe.out
    rdir = out / "report"
    plots: dict[str, str] = {}
    tables: dict[str, list[dict]] = {}
    artifacts = {}
    for name in sorted(p.name for p in out.glob("*.bin")):
        artifacts[name] = sha256_file(out / name)
    manifest = {"package_version": __version__, "numpy_version": np.__version__,
                "config": pipe.cfg.to_dict(), "config_hash": pipe.cfg.hash(),
                "phase_keys": {p: pipe.key(p) for p in _SECTIONS}, "artifacts": artifacts,
                "seeds": list(pipe.cfg.eval.seeds), "headline": headline(results) if results else {}}
    pre = out / "pretrain.json"
    if pre.exists():
        pj = json.loads(pre.read_text())
        manifest["model_fingerprint"] = pj["fingerprint"]
        tables["headroom"] = [{"family": f, **v} for f, v in pj["headroom"].items()]
        plots["pretrain_loss"] = RP.line_plot(
            {"loss": (list(range(len(pj["loss_curve"]))), pj["loss_curve"])}, "Pretraining loss (every 50 steps)",
            "checkpoint", "loss", ylim=(0.0, max(pj["loss_curve"])))
    el = out / "elicitation.json"
    if el.exists():
        ej = json.loads(el.read_text())
        manifest["library_hash"] = ej["library_hash"]
        tables["elicitation_filter"] = [{"family": f, "accepted": v["accepted"], "total": v["total"],
                                         "rate": v["accepted"] / v["total"] if v["total"] else 0.0}
                                        for f, v in ej["filter_per_family"].items()]
        tables["pca_fractions"] = [{"component": i + 1, "fraction": f} for i, f in enumerate(ej["pca_fractions"])]
        tables["cluster_family_counts"] = [{"family": f, **{f"c{k}": n for k, n in enumerate(v)}}
                                           for f, v in sorted(ej["cluster_family_counts"].items())]
        plots["pca_projection"] = RP.scatter_plot(np.array(ej["projection"]), ej["projection_labels"],
                                                  "Difference vectors, first two principal components")
        K = len(ej["cosine_matrix"])
        plots["primitive_cosine"] = RP.heatmap(ej["cosine_matrix"], [f"v{i}" for i in range(K)],
                                               [f"v{i}" for i in range(K)], "Primitive cosine similarity", -1.0, 1.0)
    sw = out / "sweep.json"
    if sw.exists():
        sj = json.loads(sw.read_text())
        tables["static_sweep"] = sj["rows"]
        series: dict[str, tuple[list, list]] = {}
        means: dict[tuple, list] = {}
        for r in sj["rows"]:
            means.setdefault((r["vector"], r["alpha"]), []).append(r["accuracy"])
        for (v, a), accs in sorted(means.items()):
            xs, ys = series.setdefault(f"v{v}", ([], []))
            xs.append(a)
            ys.append(float(np.mean(accs)))
        plots["static_sweep"] = RP.line_plot(series, "Static injection: mean accuracy vs strength",
                                             "alpha", "accuracy")
        manifest["best_static"] = sj["best_static"]
        manifest["zero_alpha_reproduces_base"] = sj["zero_alpha_reproduces_base"]
    sf = out / "sft.json"
    if sf.exists():
        fj = json.loads(sf.read_text())
        o = fj["oracle"]
        tables["oracle_labels"] = [{"family": f, "labelled": v["labelled"], "null": v["null"],
                                    **{f"gate{k}": n for k, n in enumerate(v["gates"])}}
                                   for f, v in sorted(o["per_family"].items())]
        manifest["oracle"] = {k: o[k] for k in ("instances", "labelled", "null", "candidates")}
    rl = out / "rl.json"
    if rl.exists():
        lj = json.loads(rl.read_text())
        series = {f"seed {s}": (list(range(len(v["reward_curve"]))), v["reward_curve"])
                  for s, v in lj["seeds"].items()}
        plots["rl_reward"] = RP.line_plot(series, "Router RL: mean rollout reward", "step", "reward")
    for r in results:
        if r.condition == "routed" and r.seed == pipe.cfg.eval.seeds[0] and np.asarray(r.strengths).size:
            S = np.asarray(r.strengths)
            plots["routing_heatmap"] = RP.heatmap(S, r.families, [f"v{k}" for k in range(S.shape[1])],
                                                  f"Mean applied strength per family (seed {r.seed})")
    ab = out / "ablation.json"
    if ab.exists() and pipe.is_current("ablate"):
        base = {f: np.mean([r.accuracy[f] for r in results if r.condition == "base"]) for f in results[0].families}
        rows = []
        for g in json.loads(ab.read_text()):
            row = {"condition": g["condition"], "status": g["status"]}
            if g["result"] is not None:
                res = result_from_dict(g["result"])
                row["mean_accuracy"] = res.mean_accuracy
                row["delta_vs_base"] = float(np.mean([res.accuracy[f] - base[f] for f in res.families]))
            rows.append(row)
        for cond in ("routed", "top1-only", "sft-only", "static"):
            sel = [r for r in results if r.condition == cond and r.seed == pipe.cfg.eval.seeds[0]]
            if sel:
                rows.append({"condition": f"{cond} (K={pipe.cfg.elicit.K}, layer={pipe.cfg.model.intervention_layer})",
                             "status": "ok", "mean_accuracy": sel[0].mean_accuracy,
                             "delta_vs_base": float(np.mean([sel[0].accuracy[f] - base[f] for f in sel[0].families]))})
        tables["ablation"] = rows
    return RP.emit_reports(results, rdir, manifest, plots, tables)
