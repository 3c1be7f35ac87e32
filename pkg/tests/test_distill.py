import math

import numpy as np
import pytest

from dnkd import distill as dl
from dnkd import teacher as tc
from dnkd.errors import InvalidArgument, VocabRangeError
from oracles import central_difference, loss_parts, loss_total, softmax


def normwise_error(a, n):
    return np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-300)


def random_teacher(rng, V, target, kind=None):
    kind = kind or rng.choice(["with_target", "without_target", "mixed"])
    k = int(rng.integers(1, min(8, V) + 1))
    support = rng.choice(V, size=k, replace=False)
    if kind == "with_target" and target not in support:
        support[0] = target
    if kind == "without_target":
        support = support[support != target]
        if len(support) == 0:
            support = np.array([(target + 1) % V])
    probs = rng.dirichlet(np.ones(len(support)))
    order = np.argsort(support)
    return tc.SparseDistribution(support[order], probs[order], V)


def point_mass(token, V):
    return tc.SparseDistribution(np.array([token]), np.array([1.0]), V)


# -- oracle recomputations ----------------------------------------------------


def oracle_parts(teacher, z, t, eps):
    return loss_parts(teacher.dense(), z, t, eps)


def oracle_total(teacher, z, t, w):
    return loss_total(teacher.dense(), z, t, w)


# -- log_softmax --------------------------------------------------------------


def test_log_softmax_examples():
    assert np.allclose(dl.log_softmax([0.0, 0.0]), [math.log(0.5)] * 2, atol=1e-15)
    z = np.array([0.3, -1.2, 4.0])
    assert np.max(np.abs(dl.log_softmax(z) - dl.log_softmax(z + 100))) <= 1e-12
    p = np.exp(dl.log_softmax([2.0, 1.0, 0.0]))
    assert np.allclose(p, softmax([2.0, 1.0, 0.0]), atol=1e-15)
    assert np.round(p, 4).tolist() == [0.6652, 0.2447, 0.0900]
    with pytest.raises(InvalidArgument):
        dl.log_softmax([0.0, np.inf])


# -- cross entropy ------------------------------------------------------------


def test_ce_point_mass_limit():
    z = np.array([50.0, 0.0, 0.0, 0.0])
    loss, _ = dl.cross_entropy_smoothed(z, 0, eps=0.0)
    assert loss < 1e-20


def test_ce_zero_sum_and_fd(rng):
    z = rng.standard_normal(8)
    loss, grad = dl.cross_entropy_smoothed(z, 3, 0.1)
    assert abs(grad.sum()) <= 1e-12
    fd = central_difference(lambda x: dl.cross_entropy_smoothed(x, 3, 0.1)[0], z)
    assert normwise_error(grad, fd) <= 1e-6
    assert loss == pytest.approx(oracle_parts(point_mass(3, 8), z, 3, 0.1)["ce"], abs=1e-12)


def test_ce_errors():
    with pytest.raises(VocabRangeError):
        dl.cross_entropy_smoothed([0.0, 1.0], 2)
    with pytest.raises(InvalidArgument):
        dl.cross_entropy_smoothed([0.0, 1.0], 0, eps=1.0)


# -- decompositions ---------------------------------------------------------------


def test_binary_decompose_example():
    b = dl.binary_decompose([2.0, 1.0, 0.0], 0)
    p = softmax([2.0, 1.0, 0.0])
    assert b.p_t == pytest.approx(p[0], abs=1e-15)
    assert b.p_not_t == pytest.approx(p[1] + p[2], abs=1e-15)
    assert b.hat_p == pytest.approx(np.array([p[1], p[2]]) / (p[1] + p[2]), abs=1e-15)
    assert (round(b.p_t, 4), round(b.p_not_t, 4)) == (0.6652, 0.3348)
    assert np.round(b.hat_p, 4).tolist() == [0.7311, 0.2689]


def test_binary_decompose_uniform_and_invariance(rng):
    b = dl.binary_decompose(np.zeros(4), 2)
    assert b.p_t == pytest.approx(0.25)
    assert np.allclose(b.hat_p, 1 / 3)
    z = rng.standard_normal(6)
    z2 = z.copy()
    z2[1] += 3.7
    assert np.allclose(dl.binary_decompose(z, 1).hat_p, dl.binary_decompose(z2, 1).hat_p, atol=1e-15)
    with pytest.raises(InvalidArgument):
        dl.binary_decompose([1.0], 0)


def test_teacher_decompose_examples():
    tb = dl.teacher_decompose(point_mass(2, 5), 2)
    assert tb.p_t == 1.0 and not tb.hat_defined
    t = tc.SparseDistribution(np.array([0, 1]), np.array([0.75, 0.25]), 5)
    tb = dl.teacher_decompose(t, 0)
    assert tb.p_t == 0.75 and tb.hat_tokens.tolist() == [1] and tb.hat_p.tolist() == [1.0]
    ex = tc.teacher_distribution([(0.0, 0), (1.0, 1), (2.0, 0)], 1.0, 5)
    tb = dl.teacher_decompose(ex, 1)
    assert round(tb.p_t, 4) == 0.2447
    assert tb.hat_tokens.tolist() == [0] and tb.hat_p == pytest.approx([1.0])
    assert tb.p_t + tb.p_not_t == pytest.approx(1.0, abs=1e-12)


# -- NKD ----------------------------------------------------------------------


def test_nkd_identity_and_point_mass(rng):
    z = rng.standard_normal(7)
    p = softmax(z)
    same = tc.SparseDistribution(np.arange(7), p, 7)
    loss, grad = dl.nkd_loss(same, z)
    assert abs(loss) <= 1e-12
    assert np.max(np.abs(grad)) <= 1e-12
    loss, _ = dl.nkd_loss(point_mass(4, 7), z)
    assert loss == pytest.approx(-math.log(p[4]), abs=1e-12)


def test_nkd_fd(rng):
    z = rng.standard_normal(16)
    teacher = random_teacher(rng, 16, 0)
    loss, grad = dl.nkd_loss(teacher, z)
    fd = central_difference(lambda x: dl.nkd_loss(teacher, x)[0], z)
    assert normwise_error(grad, fd) <= 1e-6
    assert loss == pytest.approx(oracle_parts(teacher, z, 0, 0.1)["nkd"], abs=1e-12)


def test_nkd_vocab_mismatch():
    with pytest.raises(VocabRangeError):
        dl.nkd_loss(point_mass(1, 5), np.zeros(4))


# -- DNKD ---------------------------------------------------------------------


def test_dnkd_lambda_one_is_ce(rng):
    z = rng.standard_normal(10)
    teacher = random_teacher(rng, 10, 3)
    w = dl.LossWeights(lam=1.0)
    out = dl.dnkd_loss(teacher, z, 3, w)
    ce, g = dl.cross_entropy_smoothed(z, 3, 0.1)
    assert out.total == ce
    assert np.array_equal(out.grad, g)


def test_dnkd_point_mass_teacher(rng):
    z = rng.standard_normal(9)
    out = dl.dnkd_loss(point_mass(5, 9), z, 5, dl.LossWeights(beta=2.0))
    assert out.nontarget_kl == 0.0
    assert out.binary_kl == pytest.approx(-dl.log_softmax(z)[5], abs=1e-12)
    assert np.all(out.parts["nontarget"] == 0)


def test_dnkd_target_absent_from_teacher(rng):
    z = rng.standard_normal(9)
    teacher = random_teacher(rng, 9, 2, kind="without_target")
    out = dl.dnkd_loss(teacher, z, 2)
    p = softmax(z)
    assert out.binary_kl == pytest.approx(-math.log(1 - p[2]), abs=1e-12)
    assert math.isfinite(out.total)


def test_dnkd_defaults_fd_and_recompute(rng):
    V = 12
    z = rng.standard_normal(V) * 2
    teacher = random_teacher(rng, V, 4, kind="with_target")
    w = dl.LossWeights()
    out = dl.dnkd_loss(teacher, z, 4, w)
    fd = central_difference(lambda x: dl.dnkd_loss(teacher, x, 4, w).total, z)
    assert normwise_error(out.grad, fd) <= 1e-6
    assert out.total == pytest.approx(oracle_total(teacher, z, 4, w), abs=1e-12)


def test_loss_weights_validation():
    for bad in [dict(lam=1.5), dict(alpha=-1), dict(beta=-0.1), dict(label_smoothing=1.0), dict(tau=0.0)]:
        with pytest.raises(InvalidArgument):
            dl.LossWeights(**bad)
    w = dl.LossWeights()
    assert (w.lam, w.alpha, w.beta, w.label_smoothing, w.tau) == (0.5, 1.0, 0.3, 0.1, 100.0)


# -- properties ---------------------------------------------------------------


def random_instances(rng, n, vmin=2, vmax=64, scale=3.0):
    for _ in range(n):
        V = int(rng.integers(vmin, vmax + 1))
        t = int(rng.integers(V))
        z = rng.standard_normal(V) * scale
        yield random_teacher(rng, V, t), z, t


def test_decomposition_identity_sweep(rng):
    worst = 0.0
    for teacher, z, t in random_instances(rng, 1000):
        if dl.teacher_decompose(teacher, t).p_t >= 1.0:
            continue
        worst = max(worst, dl.decomposition_check(teacher, z, t))
    assert worst <= 1e-9


def test_decomposition_teacher_equals_student(rng):
    z = rng.standard_normal(6)
    same = tc.SparseDistribution(np.arange(6), softmax(z), 6)
    assert dl.decomposition_check(same, z, 2) <= 1e-12
    out = dl.dnkd_loss(same, z, 2)
    assert abs(out.binary_kl) <= 1e-12 and abs(out.nontarget_kl) <= 1e-12


def test_kl_terms_nonnegative_and_zero_sum(rng):
    for teacher, z, t in random_instances(rng, 300):
        out = dl.dnkd_loss(teacher, z, t)
        assert out.binary_kl >= -1e-12 and out.nontarget_kl >= -1e-12 and out.nkd >= -1e-12
        for g in (out.grad, out.parts["ce"], out.parts["nkd"], out.parts["binary"], out.parts["nontarget"]):
            assert abs(g.sum()) <= 1e-9
        # non-target term never touches the target logit
        assert out.parts["nontarget"][t] == 0.0


def test_nontarget_term_fd_on_target_logit(rng):
    z = rng.standard_normal(8)
    teacher = random_teacher(rng, 8, 1, kind="with_target")
    tb = dl.teacher_decompose(teacher, 1)
    fd = central_difference(lambda x: dl.nontarget_kl(tb, x, 1)[0], z)
    assert abs(fd[1]) <= 1e-9


# -- gradient norm report --------------------------------------------------------


def teacher_with_target_mass(rng, V, t, p_t):
    others = [j for j in range(V) if j != t][:5]
    rest = rng.dirichlet(np.ones(len(others))) * (1 - p_t)
    toks = np.array([t] + others)
    probs = np.concatenate([[p_t], rest])
    order = np.argsort(toks)
    return tc.SparseDistribution(toks[order], probs[order], V)


def test_grad_norm_weight_coincidence(rng):
    z = rng.standard_normal(10)
    teacher = random_teacher(rng, 10, 0, kind="with_target")
    tb = dl.teacher_decompose(teacher, 0)
    r = dl.grad_norm_report(teacher, z, 0, dl.LossWeights(alpha=1.0, beta=tb.p_not_t))
    assert np.max(np.abs(r.nkd - r.dnkd)) <= 1e-12


@pytest.mark.parametrize("p_not_t,ratio,regime", [(0.1, 3.0, "le_beta"), (0.6, 0.5, "gt_beta")])
def test_grad_norm_regimes(rng, p_not_t, ratio, regime):
    V, t = 10, 2
    z = rng.standard_normal(V)
    teacher = teacher_with_target_mass(rng, V, t, 1 - p_not_t)
    r = dl.grad_norm_report(teacher, z, t, dl.LossWeights())
    assert r.regime == regime
    nt = np.arange(V) != t
    assert np.allclose(r.dnkd_nontarget[nt] / r.nkd_nontarget[nt], ratio, rtol=0, atol=1e-9)
    assert r.nkd[t] == pytest.approx(r.dnkd[t], abs=1e-15)
    # cross-check the non-target term against finite differences
    tb = dl.teacher_decompose(teacher, t)
    fd = central_difference(lambda x: dl.nontarget_kl(tb, x, t)[0], z)
    assert np.allclose(r.dnkd_nontarget, 0.3 * np.abs(fd), atol=1e-9)


def test_grad_norm_rows_and_top(rng):
    r = dl.grad_norm_report(random_teacher(rng, 12, 3), rng.standard_normal(12), 3)
    rows = list(r.rows())
    assert len(rows) == 12 and sum(row["is_target"] for row in rows) == 1
    top = r.top(8)
    assert len(top) == 8
    assert np.all(np.diff(r.nkd[top]) <= 0)


# -- batched path ----------------------------------------------------------------


@pytest.mark.parametrize("mode", dl.MODES)
def test_batch_matches_scalar(rng, mode):
    P, V, k = 120, 11, 8
    z = rng.standard_normal((P, V)) * 3
    targets = rng.integers(0, V, P)
    d = np.sort(rng.uniform(0, 300, (P, k)), axis=1)
    toks = rng.integers(0, V, (P, k)).astype(np.uint32)
    toks[::5, 0] = targets[::5]
    toks[::9, :] = targets[::9, None]  # point-mass rows
    toks[::13, 6:] = tc.PAD_TOKEN
    d[::13, 6:] = np.inf
    w = dl.LossWeights(tau=40.0)
    tt, tp = tc.teacher_slots(d, toks, w.tau)
    total, grad, parts = dl.batch_losses(z, targets, tt, tp, w, mode)
    for i in range(P):
        valid = toks[i] != tc.PAD_TOKEN
        teacher = tc.teacher_distribution(list(zip(d[i][valid], toks[i][valid])), w.tau, V)
        ref = dl.dnkd_loss(teacher, z[i], targets[i], w)
        if mode == "ce":
            exp_total, exp_grad = ref.ce, ref.parts["ce"]
        elif mode == "nkd":
            exp_total = w.lam * ref.ce + (1 - w.lam) * ref.nkd
            exp_grad = w.lam * ref.parts["ce"] + (1 - w.lam) * ref.parts["nkd"]
        else:
            exp_total, exp_grad = ref.total, ref.grad
        assert total[i] == pytest.approx(exp_total, abs=1e-12)
        assert np.max(np.abs(grad[i] - exp_grad)) <= 1e-12


def test_batch_lambda_one_bitwise(rng):
    z = rng.standard_normal((50, 9))
    targets = rng.integers(0, 9, 50)
    toks = rng.integers(0, 9, (50, 4))
    tt, tp = tc.teacher_slots(rng.uniform(0, 10, (50, 4)), toks, 100.0)
    w = dl.LossWeights(lam=1.0)
    a = dl.batch_losses(z, targets, None, None, w, "ce")
    b = dl.batch_losses(z, targets, tt, tp, w, "dnkd")
    assert a[0].tobytes() == b[0].tobytes()
    assert a[1].tobytes() == b[1].tobytes()


def test_batch_requires_teacher():
    with pytest.raises(InvalidArgument):
        dl.batch_losses(np.zeros((1, 3)), [0], None, None, dl.LossWeights(), "dnkd")
    with pytest.raises(InvalidArgument):
        dl.batch_losses(np.zeros((1, 3)), [0], None, None, dl.LossWeights(), "kd")
