import xml.etree.ElementTree as ET

import numpy as np
import pytest

from routed_steering import evaluation as V
from routed_steering import elicitation as E
from routed_steering import reports as RP
from routed_steering import router as R
from routed_steering import tasks as T

RC = R.RouterConfig()


@pytest.fixture(scope="module")
def sets():
    return {f: T.generate_tasks(T.SkillSpec(f), 6, 9000) for f in ("max", "lookup")}


@pytest.fixture(scope="module")
def lib(tiny_model):
    V_ = np.random.default_rng(0).normal(size=(3, tiny_model.config.model_dim))
    return E.build_library(V_, np.arange(3), layer=1, provenance={"model_fingerprint": tiny_model.fingerprint})


def silent_router(lib, **bias):
    d = lib.d
    w = {"w1": np.zeros((d, 2)), "b1": np.zeros(2), "wg": np.zeros((2, lib.K)), "bg": np.full(lib.K, -5.0),
         "ws": np.zeros((2, lib.K)), "bs": np.ones(lib.K)}
    w.update({k: np.asarray(v, float) for k, v in bias.items()})
    return R.RouterParams(w, lib.hash)


def test_inactive_router_reproduces_base(tiny_model, sets, lib):
    base = V.evaluate(tiny_model, sets, "base", max_steps=4)
    routed = V.evaluate(tiny_model, sets, "routed", router=silent_router(lib), library=lib, max_steps=4)
    assert base.accuracy == routed.accuracy and base.mean_tokens == routed.mean_tokens
    assert np.all(routed.strengths == 0)


def test_reruns_are_identical(tiny_model, sets, lib):
    r = silent_router(lib, bg=[5.0, -5.0, 5.0])
    a = V.evaluate(tiny_model, sets, "routed", router=r, library=lib, max_steps=4)
    b = V.evaluate(tiny_model, sets, "routed", router=r, library=lib, max_steps=4)
    assert a.accuracy == b.accuracy and np.array_equal(a.strengths, b.strengths)


def test_top1_strengths_use_a_single_primitive(tiny_model, sets, lib):
    r = silent_router(lib, bg=[5.0, 5.0, 5.0], bs=[0.5, 1.5, 1.0])
    res = V.evaluate(tiny_model, sets, "top1-only", router=r, library=lib, top1=True, max_steps=4)
    assert np.all(res.strengths[:, [0, 2]] == 0) and np.all(res.strengths[:, 1] == 1.5)


def test_condition_arguments_checked(tiny_model, sets, lib):
    with pytest.raises(ValueError):
        V.evaluate(tiny_model, sets, "top1-only", top1=True)
    with pytest.raises(ValueError):
        V.evaluate(tiny_model, sets, "routed", library=lib)


def test_binding_mismatches_rejected(tiny_model, sets, lib):
    foreign = E.build_library(lib.vectors, np.arange(3), 1, {"model_fingerprint": "00" * 32})
    with pytest.raises(V.BindingError):
        V.evaluate(tiny_model, sets, "routed", router=silent_router(foreign), library=foreign)
    r = silent_router(lib)
    r.library_hash = "11" * 32
    with pytest.raises(V.BindingError):
        V.evaluate(tiny_model, sets, "routed", router=r, library=lib)


def test_leakage_detected():
    sets = {"max": T.generate_tasks(T.SkillSpec("max"), 3, 100)}
    V.assert_disjoint(sets, {"rl": (0, 100)})
    with pytest.raises(V.LeakageError):
        V.assert_disjoint(sets, {"rl": (101, 200)})


def test_routing_heatmap_bounds(tiny_model, sets, lib):
    assert np.all(V.routing_heatmap(tiny_model, silent_router(lib), lib, sets) == 0)
    h = V.routing_heatmap(tiny_model, silent_router(lib, bg=[5.0, 5.0, -5.0], bs=[3.0, 0.5, 1.0]), lib, sets)
    assert np.all((h >= 0) & (h <= RC.alpha_max))
    np.testing.assert_array_equal(h[0], [2.0, 0.5, 0.0])


def test_delta_and_token_ratio():
    a = V.EvalResult("base", {"x": 0.5, "y": 0.25}, {"x": 4.0, "y": 2.0}, np.zeros((2, 0)), ["x", "y"])
    b = V.EvalResult("routed", {"x": 0.75, "y": 0.25}, {"x": 2.0, "y": 1.0}, np.zeros((2, 0)), ["x", "y"])
    assert V.delta_table(a, b) == {"x": 0.25, "y": 0.0}
    assert V.token_ratio(a, b) == 2.0


def test_ablation_grid_marks_missing_rows():
    ok = V.EvalResult("K=6", {"x": 1.0}, {"x": 1.0}, np.zeros((1, 0)), ["x"])

    def missing():
        raise FileNotFoundError("router_K8.bin")
    rows = V.ablation_grid([("K=6", lambda: ok), ("K=4", None), ("K=8", missing)])
    assert [r["status"].split(":")[0] for r in rows] == ["ok", "absent", "absent"]
    assert rows[0]["result"] is ok


def results():
    fams = ["max", "lookup"]
    return [V.EvalResult(c, {"max": 1 / 3 + s, "lookup": 0.1}, {"max": 2.0, "lookup": 7 / 3}, np.zeros((2, 1)),
                         fams, s, "abc") for c in ("base", "routed") for s in (0, 1)]


def test_results_csv_roundtrip(tmp_path):
    rs = results()
    p = tmp_path / "results.csv"
    p.write_text(RP.results_csv(rs))
    back = RP.read_results_csv(p)
    flat = [(r.condition, r.seed, f, r.accuracy[f], r.mean_tokens[f], r.config_hash) for r in rs for f in r.families]
    assert [(b["condition"], b["seed"], b["family"], b["accuracy"], b["mean_tokens"], b["config_hash"])
            for b in back] == flat


def test_summary_deltas_are_paired_by_seed():
    rows = {r["condition"]: r for r in RP.summary_rows(results())}
    assert rows["routed"]["delta_max"] == 0.0 and rows["base"]["seeds"] == 2


def test_empty_results_write_manifest_only(tmp_path):
    written = RP.emit_reports([], tmp_path / "rep", {"seed": 0})
    assert [p.name for p in written] == ["manifest.json"]


def test_svg_plots_parse():
    svgs = [
        RP.line_plot({"a": ([0, 1, 2], [0.1, 0.5, 0.2])}, "t <&>", "x", "y"),
        RP.scatter_plot(np.random.default_rng(0).normal(size=(20, 2)), list(range(20)), "pca"),
        RP.heatmap(np.eye(3), ["a", "b", "c"], ["1", "2", "3"], "cos"),
    ]
    for s in svgs:
        assert ET.fromstring(s).tag.endswith("svg")


def test_emit_is_byte_deterministic(tmp_path):
    for d in ("a", "b"):
        RP.emit_reports(results(), tmp_path / d, {"seed": 0, "x": np.float64(0.5)},
                        {"p": RP.heatmap(np.eye(2), ["a", "b"], ["c", "d"], "h")}, {"t": [{"k": 1.5}]})
    for p in sorted((tmp_path / "a").iterdir()):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_unwritable_directory_surfaces_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(RP.ReportError, match="file"):
        RP.emit_reports(results(), blocker / "sub", {})
