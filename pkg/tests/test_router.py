import numpy as np
import pytest
from hypothesis import given, strategies as st

from routed_steering import autodiff as ad
from routed_steering import router as R
from routed_steering.router import RoutingDecision

RC = R.RouterConfig()


def router_with(gate_bias, strength_bias, d=4, K=3):
    """A router whose outputs are fixed by its output biases (zero weights)."""
    w = {"w1": np.zeros((d, 2)), "b1": np.zeros(2), "wg": np.zeros((2, K)), "bg": np.asarray(gate_bias, float),
         "ws": np.zeros((2, K)), "bs": np.asarray(strength_bias, float)}
    return R.RouterParams(w)


def logit(p):
    return np.log(p / (1 - p))


def test_threshold_is_strict():
    r = router_with(logit(np.array([0.69, 0.71, 0.7 + 1e-9])), [1.0, 1.0, 1.0])
    dec = R.route(r, np.zeros(4), RC)
    np.testing.assert_allclose(dec.p[:2], [0.69, 0.71])
    assert dec.w.tolist() == [0.0, 1.0, 1.0]


def test_strength_clips_to_alpha_max():
    r = router_with([5.0, 5.0, 5.0], [2.5, -0.3, 1.2])
    dec = R.route(r, np.zeros(4), RC)
    assert dec.alpha.tolist() == [2.0, 0.0, 1.2]


def test_sigmoid_strength_head_is_bounded():
    cfg = R.RouterConfig(strength_head="sigmoid")
    r = router_with([0.0, 0.0, 0.0], [-50.0, 0.0, 50.0])
    a = R.route(r, np.zeros(4), cfg).alpha
    assert np.all((a >= 0) & (a <= cfg.alpha_max)) and a[1] == 1.0


def test_compose_worked_example():
    V = np.eye(3)
    dec = RoutingDecision(np.ones(3), np.array([1.0, 0.0, 1.0]), np.array([1.0, 2.0, 2.0]))
    v = R.compose(dec, V)
    assert v.tolist() == [1.0, 0.0, 2.0]
    assert np.linalg.norm(v) == np.sqrt(5.0)


def test_all_gates_off_gives_zero_injection():
    dec = RoutingDecision(np.zeros(4), np.zeros(4), np.full(4, 2.0))
    assert np.all(R.compose(dec, np.random.default_rng(0).normal(size=(4, 6))) == 0)


def test_compose_rejects_wrong_k():
    dec = RoutingDecision(np.zeros(3), np.ones(3), np.ones(3))
    with pytest.raises(R.RouterError):
        R.compose(dec, np.ones((4, 5)))


def test_inject_shape_checked():
    np.testing.assert_array_equal(R.inject(np.ones(3), np.arange(3.0)), [1.0, 2.0, 3.0])
    with pytest.raises(R.RouterError):
        R.inject(np.ones(3), np.ones(4))


def test_top1_keeps_largest_applied_strength():
    dec = RoutingDecision(np.ones(4), np.array([1.0, 1.0, 0.0, 1.0]), np.array([0.5, 1.5, 2.0, 1.0]))
    assert R.top1_only(dec).w.tolist() == [0.0, 1.0, 0.0, 0.0]
    off = RoutingDecision(np.zeros(2), np.zeros(2), np.ones(2))
    assert R.top1_only(off).w.tolist() == [0.0, 0.0]


@given(st.integers(0, 10_000))
def test_routing_outputs_in_range(seed):
    rng = np.random.default_rng(seed)
    r = R.RouterParams.init(8, 5, R.RouterConfig(bottleneck=4), seed)
    for k in r.tensors:
        r.tensors[k].data = rng.normal(size=r.tensors[k].shape) * 3
    dec = R.route(r, rng.normal(size=8), RC)
    assert np.all((dec.p >= 0) & (dec.p <= 1))
    assert set(dec.w.tolist()) <= {0.0, 1.0}
    assert np.all((dec.alpha >= 0) & (dec.alpha <= RC.alpha_max))


def test_train_mode_is_seeded_and_relaxed():
    r = R.RouterParams.init(6, 4, RC, 0)
    h = np.random.default_rng(1).normal(size=6)
    a = R.route(r, h, RC, "train", seed=3)
    b = R.route(r, h, RC, "train", seed=3)
    assert np.array_equal(a.w, b.w)
    assert np.all((a.w > 0) & (a.w < 1))


def test_gumbel_straight_through_forward_is_hard():
    g = R.gumbel_sigmoid(np.array([0.3, -0.2]), 1.0, noise=np.zeros(2), straight_through=True)
    assert g.data.tolist() == [1.0, 0.0]
    with pytest.raises(ValueError):
        R.gumbel_sigmoid(np.zeros(2), 0.0, noise=np.zeros(2))
    with pytest.raises(ValueError):
        R.gumbel_sigmoid(np.zeros(2), 1.0)


def test_logistic_noise_matches_logistic_distribution():
    x = R.logistic_noise(np.random.default_rng(0), 200_000)
    # standard logistic: mean 0, variance pi^2 / 3
    assert abs(x.mean()) < 0.02
    assert abs(x.var() - np.pi ** 2 / 3) < 0.05


def test_gumbel_gradient_matches_finite_difference():
    rng = np.random.default_rng(2)
    z, noise = rng.normal(size=5), rng.logistic(size=5)
    w = rng.normal(size=5)
    leaf = ad.parameter(z.copy())
    (R.gumbel_sigmoid(leaf, 0.7, noise=noise) * w).sum().backward()
    fd = ad.finite_difference_grad(lambda x: float((R.gumbel_sigmoid(x, 0.7, noise=noise).data * w).sum()), z)
    np.testing.assert_allclose(leaf.grad, fd, rtol=1e-6)


def test_mismatched_hidden_is_rejected():
    r = R.RouterParams.init(6, 3, RC, 0)
    with pytest.raises(R.RouterError):
        R.route(r, np.zeros(5), RC)


def test_nonfinite_router_output_raises():
    r = router_with([np.nan, 0.0, 0.0], [1.0, 1.0, 1.0])
    with pytest.raises(ad.NumericalError):
        R.route(r, np.zeros(4), RC)


def test_config_validation():
    with pytest.raises(ValueError):
        R.RouterConfig(strength_head="relu")
    with pytest.raises(ValueError):
        R.RouterConfig(tau=1.5)


def test_checkpoint_roundtrip_and_binding(tmp_path):
    lib_hash = "ef" * 32
    r = R.RouterParams.init(8, 4, R.RouterConfig(bottleneck=5), 3, lib_hash)
    p = tmp_path / "r.bin"
    cfg = R.RouterConfig(bottleneck=5, tau=0.6, strength_head="sigmoid")
    R.save_router(r, p, cfg)
    back = R.load_router(p, library_hash=lib_hash)
    for k, t in r.tensors.items():
        assert np.array_equal(back.tensors[k].data, t.data)
    restored = R.router_config_from_header(p)
    assert restored.tau == 0.6 and restored.strength_head == "sigmoid"
    with pytest.raises(R.ProvenanceError):
        R.load_router(p, library_hash="00" * 31 + "01")
    assert R.load_router(p, library_hash="00" * 31 + "01", allow_mismatch=True).K == 4
    raw = bytearray(p.read_bytes())
    raw[-40] ^= 1
    p.write_bytes(bytes(raw))
    with pytest.raises(R.RouterError):
        R.load_router(p)


def test_router_is_small_next_to_the_model(tiny_model):
    r = R.RouterParams.init(tiny_model.config.model_dim, 6, RC, 0)
    n_model = sum(w.size for w in tiny_model.weights.values())
    assert r.num_params < n_model
