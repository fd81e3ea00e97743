import math

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.special import expit
from scipy.stats import spearmanr

from ntl.bundle import ModelBundle, dumps_bundle, load_bundle, loads_bundle, save_bundle, train_all
from ntl.data import FormatError, SynthConfig, synth_generate
from ntl.em import (
    NO_CLAMPS,
    Clamps,
    DegenerateStats,
    SufficientStats,
    TrainConfig,
    TrainingError,
    batch_em_reference,
    e_step,
    expected_complete_nll,
    fit_tag,
    m_step,
    sgd_step,
    train_tag,
    update_stats,
)
from ntl.model import InputError, TagModel, lr_loss_grad

from test_model import central_diff, rel_err

QUICK = TrainConfig(num_minibatches=300, minibatch_size=50, log_every=100)


def noisy_data(rng, n=400, d=4, pi=0.5, gamma=1.0, bias=-0.5, scale=1.0):
    X = rng.standard_normal((n, d))
    z = rng.random(n) < expit(scale * X @ rng.standard_normal(d) + bias)
    u = rng.random(n)
    y = np.where(z, u < pi, u < 1 - gamma).astype(float)
    return X, y, z


# e_step -------------------------------------------------------------------


def test_e_step_examples():
    X = np.zeros((3, 2))
    m = TagModel.zeros("t", 2, pi=0.5, gamma=1.0)
    alpha = e_step(m, X, [1.0, 0.0, 1.0])
    assert alpha[0] == 1.0 and alpha[2] == 1.0
    assert alpha[1] == pytest.approx(1 / 3)
    m2 = TagModel.zeros("t", 2, pi=0.9, gamma=0.9)
    assert e_step(m2, X[:1], [1.0])[0] == pytest.approx(0.9)


def test_e_step_positives_exact_under_fixed_gamma(rng):
    X = rng.standard_normal((200, 3)) * 30
    m = TagModel("t", rng.standard_normal(3), pi=0.2, gamma=1.0)
    alpha = e_step(m, X, np.ones(200))
    assert np.all(alpha == 1.0)
    alpha0 = e_step(m, X, np.zeros(200))
    assert np.all((alpha0 >= 0) & (alpha0 <= 1))


# update_stats -------------------------------------------------------------


def test_update_stats_full_replacement():
    alpha = np.array([0.2, 1.0, 0.6, 0.0])
    y = np.array([0.0, 1.0, 1.0, 0.0])
    st = update_stats(SufficientStats.initial(1.0), alpha, y)
    assert st.s_alpha == pytest.approx(0.45)
    assert st.s_y_alpha == pytest.approx(0.4)
    assert st.s_y == pytest.approx(0.5)


def test_update_stats_ema_arithmetic():
    st = update_stats(SufficientStats.initial(0.01), np.zeros(5), np.zeros(5))
    assert st.s_alpha == pytest.approx(0.99)


def test_update_stats_geometric_convergence():
    st = SufficientStats.initial(0.01)
    m = 0.3
    gap = abs(st.s_alpha - m)
    for _ in range(50):
        st = update_stats(st, np.full(10, m), np.zeros(10))
        new_gap = abs(st.s_alpha - m)
        assert new_gap == pytest.approx(0.99 * gap, rel=1e-9)
        gap = new_gap


def test_update_stats_invariants(rng):
    st = SufficientStats.initial(0.05)
    for _ in range(200):
        y = (rng.random(20) < 0.3).astype(float)
        alpha = np.where(y == 1, 1.0, rng.random(20) * 0.5)
        st = update_stats(st, alpha, y)
        assert 0 <= st.s_y_alpha <= st.s_alpha <= 1
        assert 0 <= st.s_y <= 1
        assert st.s_y_alpha <= st.s_y + 1e-12


def test_update_stats_rejects_empty():
    with pytest.raises(InputError):
        update_stats(SufficientStats.initial(0.1), np.zeros(0), np.zeros(0))


# m_step -------------------------------------------------------------------


def test_m_step_ratio():
    pi, gamma = m_step(SufficientStats(0.6, 0.3, 0.4, 0.01))
    assert pi == pytest.approx(0.5) and gamma == 1.0


def test_m_step_gamma_identity():
    for s_alpha in (0.1, 0.5, 0.9):
        _, gamma = m_step(SufficientStats(s_alpha, 0.05, 0.05, 0.01), "learned")
        assert gamma == pytest.approx(1.0)


def test_m_step_initial_stats():
    assert m_step(SufficientStats.initial(0.01), clamps=NO_CLAMPS) == (1.0, 1.0)
    # the default ceiling keeps pi off the boundary
    assert m_step(SufficientStats.initial(0.01))[0] == 0.999


def test_m_step_learned_gamma():
    pi, gamma = m_step(SufficientStats(0.2, 0.16, 0.3, 0.01), "learned")
    assert pi == pytest.approx(0.8)
    assert gamma == pytest.approx((1 - 0.3 - 0.2 + 0.16) / 0.8)


def test_m_step_degenerate():
    with pytest.raises(DegenerateStats):
        m_step(SufficientStats(0.0, 0.0, 0.1, 0.01))
    assert m_step(SufficientStats(1.0, 0.5, 0.5, 0.01), "learned", prev_gamma=0.77)[1] == 0.77


def test_m_step_respects_clamps(rng):
    c = Clamps()
    for _ in range(200):
        sa = rng.uniform(0.001, 0.999)
        sya = rng.uniform(0, sa)
        sy = rng.uniform(sya, 1)
        pi, gamma = m_step(SufficientStats(sa, sya, sy, 0.01), "learned", c)
        assert c.pi_floor <= pi <= c.pi_ceiling
        assert c.gamma_floor <= gamma <= 1.0


# sgd_step -----------------------------------------------------------------


def test_sgd_step_zero_gradient(rng):
    X = rng.standard_normal((20, 3))
    m = TagModel("t", rng.standard_normal(3), b=0.4, pi=0.5, gamma=0.9, beta=0.0)
    alpha = expit(X @ m.w + m.b)
    new = sgd_step(m, X, alpha, lr=0.1)
    assert np.allclose(new.w, m.w) and new.b == pytest.approx(m.b)
    decayed = sgd_step(m, X, alpha, lr=0.1, weight_decay=0.5)
    assert np.allclose(decayed.w, m.w * 0.95) and decayed.b == pytest.approx(m.b)
    assert (new.pi, new.gamma, new.beta) == (m.pi, m.gamma, m.beta)


def test_sgd_step_all_positive_equals_lr_step(rng):
    X = rng.standard_normal((15, 4))
    m = TagModel("t", rng.standard_normal(4), b=-0.2, pi=0.4, gamma=1.0)
    y = np.ones(15)
    new = sgd_step(m, X, e_step(m, X, y), lr=0.05)
    _, gw, gb = lr_loss_grad(m.w, m.b, X, y)
    assert np.allclose(new.w, m.w - 0.05 * gw)
    assert new.b == pytest.approx(m.b - 0.05 * gb)


def test_sgd_gradient_matches_expected_complete_nll(rng):
    for _ in range(20):
        X, y, _ = noisy_data(rng, n=int(rng.integers(5, 50)), d=int(rng.integers(1, 10)))
        m = TagModel("t", rng.standard_normal(X.shape[1]), b=0.3, pi=0.6, gamma=0.85)
        alpha = e_step(m, X, y)
        lr = 1.0
        step = sgd_step(m, X, alpha, lr)
        grad = np.append(m.w - step.w, m.b - step.b) / lr

        def f(v):
            return expected_complete_nll(m.replace(w=v[:-1], b=v[-1]), X, y, alpha)

        assert rel_err(grad, central_diff(f, np.append(m.w, m.b))) < 1e-5


def test_expected_complete_nll_handles_fixed_gamma(rng):
    X, y, _ = noisy_data(rng, n=30)
    m = TagModel("t", np.zeros(4), pi=0.5, gamma=1.0)
    assert math.isfinite(expected_complete_nll(m, X, y, e_step(m, X, y)))


def test_sgd_step_non_finite_gradient():
    # each term is finite, their sum overflows; the larger term is blamed
    X = np.array([[1e308, 0.0], [1.5e308, 0.0]])
    m = TagModel("t", [1.0, 0.0], pi=0.5)
    with np.errstate(over="ignore"), pytest.raises(TrainingError, match="example 1"):
        sgd_step(m, X, np.array([0.0, 0.0]), lr=0.01)
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(TrainingError, match="example 0"):
        sgd_step(m, np.array([[np.inf, 0.0], [1.0, 0.0]]), np.array([0.0, 0.0]), lr=0.01)


# training loop ------------------------------------------------------------


def test_train_tag_deterministic(rng):
    X, y, _ = noisy_data(rng)
    a = fit_tag(X, y, QUICK)
    b = fit_tag(X, y, QUICK)
    assert a.model.same_params(b.model)
    assert a.trace == b.trace
    c = fit_tag(X, y, TrainConfig(**{**QUICK.to_dict(), "seed": 1}))
    assert not a.model.same_params(c.model)


def test_train_tag_rejects_degenerate_labels(rng):
    X = rng.standard_normal((10, 2))
    with pytest.raises(TrainingError, match="no positive"):
        train_tag(X, np.zeros(10), QUICK)
    with pytest.raises(TrainingError, match="no negative"):
        train_tag(X, np.ones(10), QUICK)


def test_fixed_gamma_never_moves(rng):
    X, y, _ = noisy_data(rng, gamma=0.8)
    res = fit_tag(X, y, QUICK)
    assert res.model.gamma == 1.0
    assert all(r["gamma"] == 1.0 for r in res.trace)
    assert [r["minibatch"] for r in res.trace] == [100, 200, 300]


def test_plain_mode_freezes_noise(rng):
    X, y, _ = noisy_data(rng)
    m = train_tag(X, y, TrainConfig(**{**QUICK.to_dict(), "robust": False}))
    assert (m.pi, m.gamma, m.beta) == (1.0, 1.0, 0.0)


def test_plain_mode_is_sgd_on_lr_loss(rng):
    X, y, _ = noisy_data(rng, n=100)
    cfg = TrainConfig(num_minibatches=3, minibatch_size=20, robust=False, seed=4)
    m = train_tag(X, y, cfg)
    r = np.random.default_rng(4)
    w, b = np.zeros(4), 0.0
    for _ in range(3):
        idx = r.integers(0, 100, size=20)
        _, gw, gb = lr_loss_grad(w, b, X[idx], y[idx])
        w, b = w - 0.01 * gw, b - 0.01 * gb
    assert np.allclose(m.w, w) and m.b == pytest.approx(b)


def test_learning_rate_schedule():
    cfg = TrainConfig(lr_decay="inverse_time", lr_decay_steps=10.0, learning_rate=0.1)
    assert cfg.lr_at(0) == 0.1 and cfg.lr_at(10) == pytest.approx(0.05)
    assert TrainConfig().lr_at(12345) == 0.01


@pytest.mark.parametrize(
    "kw",
    [dict(minibatch_size=0), dict(learning_rate=0.0), dict(eta=1.5), dict(gamma_mode="x"),
     dict(weight_decay=-1.0), dict(lr_decay="cosine"), dict(pi_floor=0.9, pi_ceiling=0.5)],
)
def test_train_config_validation(kw):
    with pytest.raises(InputError):
        TrainConfig(**kw)


def test_noise_free_rlr_ranks_like_lr():
    c = synth_generate(SynthConfig(num_tags=1, dim=10, num_images=50000, pi_star=1.0, seed=3))
    X = c.features.vectors.astype(np.float64)
    y = c.observed[:, 0].astype(np.float64)
    tr, te = slice(0, 40000), slice(40000, None)
    cfg = TrainConfig(num_minibatches=5000)
    robust = train_tag(X[tr], y[tr], cfg)
    plain = train_tag(X[tr], y[tr], TrainConfig(num_minibatches=5000, robust=False))
    rho = spearmanr(X[te] @ robust.w + robust.b, X[te] @ plain.w + plain.b)[0]
    assert rho > 0.99


# train_all / bundle -------------------------------------------------------


def test_train_all_singleton_and_duplicates(rng):
    X, y, _ = noisy_data(rng)
    single = train_all(X, y[:, None], ["a"], QUICK)
    assert single["a"].same_params(train_tag(X, y, QUICK, tag="a"))
    double = train_all(X, np.column_stack([y, y]), ["a", "b"], QUICK)
    assert np.array_equal(double["a"].w, double["b"].w)
    assert double["a"].pi == double["b"].pi


def test_train_all_records_failures(rng):
    X, y, _ = noisy_data(rng)
    b = train_all(X, np.column_stack([y, np.zeros_like(y)]), ["good", "empty"], QUICK)
    assert b.vocab == ["good"]
    assert "empty" in b.failures and "no positive" in b.failures["empty"]


def test_train_all_threads_match_serial(rng):
    X, y, _ = noisy_data(rng)
    Y = np.column_stack([y, 1 - y, y])
    one = train_all(X, Y, ["a", "b", "c"], QUICK)
    many = train_all(X, Y, ["a", "b", "c"], QUICK, threads=3)
    assert dumps_bundle(one) == dumps_bundle(many)


def test_bundle_round_trip(tmp_path, rng):
    models = {
        t: TagModel(t, rng.standard_normal(3), b=0.1 * j, pi=0.3 + 0.1 * j, gamma=0.9, beta=-0.5 * j)
        for j, t in enumerate(["dog", "café", "a b"])
    }
    bundle = ModelBundle(3, models, {"lr": 0.01, "nested": {"x": [1, 2]}})
    save_bundle(tmp_path / "m.bin", bundle)
    back = load_bundle(tmp_path / "m.bin")
    assert back.vocab == bundle.vocab and back.config == bundle.config
    assert all(back[t].same_params(models[t]) for t in models)
    assert dumps_bundle(back) == (tmp_path / "m.bin").read_bytes()


def test_bundle_layout():
    raw = dumps_bundle(ModelBundle(1, {"x": TagModel("x", [2.0], b=3.0, pi=0.5, gamma=1.0, beta=-1.0)}))
    assert raw[:8] == b"NTLMODEL"
    assert raw[8:20] == (1).to_bytes(4, "little") * 3
    assert raw.endswith(np.array([2.0, 3.0, 0.5, 1.0, -1.0], dtype="<f8").tobytes())


def test_bundle_format_errors():
    raw = dumps_bundle(ModelBundle(2, {"x": TagModel.zeros("x", 2)}))
    with pytest.raises(FormatError):
        loads_bundle(b"XXXXXXXX" + raw[8:])
    with pytest.raises(FormatError) as e:
        loads_bundle(raw[:-3])
    assert e.value.offset is not None
    with pytest.raises(FormatError):
        loads_bundle(raw + b"\0")


# batch EM reference -------------------------------------------------------


def test_batch_em_monotone(rng):
    for gamma_mode in ("fixed_one", "learned"):
        X, y, _ = noisy_data(rng, n=200, d=5, pi=0.4, gamma=0.95)
        res = batch_em_reference(X, y, gamma_mode=gamma_mode, weight_decay=0.01)
        assert len(res.losses) == res.iterations + 1
        assert np.all(np.diff(res.losses) <= 1e-8)


def test_batch_em_noise_free_pi():
    # pi is only identified through confidently scored examples, hence the strong weights
    for seed in range(5):
        X, y, z = noisy_data(np.random.default_rng(seed), n=1000, d=3, pi=1.0, scale=2.0)
        assert np.array_equal(y, z.astype(float))
        res = batch_em_reference(X, y, max_iter=2000)
        assert res.model.pi > 0.95


def test_batch_em_reduces_to_lr(rng):
    X, y, _ = noisy_data(rng, n=200, d=4, pi=0.7, bias=0.0)
    res = batch_em_reference(X, y, clamps=NO_CLAMPS, pi_init=1.0, gamma_init=1.0)
    assert (res.model.pi, res.model.gamma) == (1.0, 1.0)

    def f(v):
        loss, gw, gb = lr_loss_grad(v[:-1], v[-1], X, y)
        return loss, np.append(gw, gb)

    direct = minimize(f, np.zeros(5), jac=True, method="BFGS", options={"gtol": 1e-10}).x
    s_em = X @ res.model.w + res.model.b
    s_lr = X @ direct[:-1] + direct[-1]
    assert np.max(np.abs(s_em - s_lr)) < 1e-3


def test_batch_em_iteration_cap(rng):
    X, y, _ = noisy_data(rng, n=200, d=5)
    res = batch_em_reference(X, y, max_iter=2)
    assert not res.converged and res.iterations == 2
