"""Distillation losses over logits with analytic gradients.

All math is float64. KL terms are teacher || student. The teacher is a
``SparseDistribution``; student probabilities are ``softmax(z)``.

For a target token ``t`` the student splits into the binary pair
``b = [p_t, 1 - p_t]`` and the renormalized non-target distribution
``hat_p``. The coupled loss satisfies

    KL(p_T || p_S) = KL(b_T || b_S) + (1 - p_t_T) * KL(hat_T || hat_S)

and the decoupled objective replaces the factor ``(1 - p_t_T)`` by
``beta`` and the unit weight on the binary term by ``alpha``:

    total = lam * CE_smoothed + (1 - lam) * (alpha * KL_b + beta * KL_hat)
"""

from dataclasses import dataclass, field
import math

import numpy as np

from .errors import InvalidArgument, VocabRangeError

# 1 - p_t below this leaves the teacher's non-target part undefined.
HAT_UNDEFINED = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.5
    alpha: float = 1.0
    beta: float = 0.3
    label_smoothing: float = 0.1
    tau: float = 100.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidArgument(f"lambda must lie in [0, 1], got {self.lam}")
        if not all(x >= 0 and math.isfinite(x) for x in (self.alpha, self.beta)):
            raise InvalidArgument(f"alpha and beta must be finite and non-negative, got {self.alpha}, {self.beta}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise InvalidArgument(f"label smoothing must lie in [0, 1), got {self.label_smoothing}")
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise InvalidArgument(f"tau must be positive, got {self.tau}")


@dataclass
class BinaryDecomposition:
    p_t: float
    p_not_t: float
    # non-target tokens and their renormalized probabilities
    hat_tokens: np.ndarray
    hat_p: np.ndarray
    hat_defined: bool = True


@dataclass
class LossBreakdown:
    ce: float
    binary_kl: float
    nontarget_kl: float
    nkd: float
    total: float
    grad: np.ndarray
    parts: dict = field(default_factory=dict, repr=False)


def _logits(z):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or not np.all(np.isfinite(z)):
        raise InvalidArgument("logits must be a finite vector")
    return z


def _lse(z):
    m = z.max()
    return m + math.log(np.exp(z - m).sum())


def _check_target(target, V):
    if not 0 <= int(target) < V:
        raise VocabRangeError(f"target {target} outside vocabulary of size {V}")
    return int(target)


def log_softmax(z):
    z = _logits(z)
    return z - _lse(z)


def cross_entropy_smoothed(z, target, eps=0.1):
    """CE against (1 - eps) on the target and eps / (V - 1) elsewhere."""
    z = _logits(z)
    V = len(z)
    t = _check_target(target, V)
    if not 0.0 <= eps < 1.0:
        raise InvalidArgument(f"smoothing must lie in [0, 1), got {eps}")
    logp = log_softmax(z)
    q = np.full(V, eps / (V - 1)) if V > 1 else np.zeros(V)
    q[t] = 1.0 - eps
    loss = -float(q @ logp)
    return loss, np.exp(logp) - q


def binary_decompose(z, target):
    z = _logits(z)
    V = len(z)
    if V < 2:
        raise InvalidArgument("binary decomposition needs at least 2 tokens")
    t = _check_target(target, V)
    lse = _lse(z)
    rest = np.delete(z, t)
    lse_rest = _lse(rest)
    return BinaryDecomposition(
        p_t=math.exp(z[t] - lse),
        p_not_t=math.exp(lse_rest - lse),
        hat_tokens=np.delete(np.arange(V), t),
        hat_p=np.exp(rest - lse_rest),
    )


def teacher_decompose(teacher, target):
    t = int(target)
    on_t = teacher.tokens == t
    p_t = float(teacher.probs[on_t].sum())
    p_not = float(teacher.probs[~on_t].sum())
    toks = teacher.tokens[~on_t]
    if p_not < HAT_UNDEFINED:
        return BinaryDecomposition(p_t, p_not, toks, np.zeros(len(toks)), hat_defined=False)
    return BinaryDecomposition(p_t, p_not, toks, teacher.probs[~on_t] / p_not)


def _xlogy_ratio(p, log_p, log_q):
    """p * (log p - log q) with 0 * log 0 = 0."""
    return 0.0 if p == 0 else p * (log_p - log_q)


def _check_teacher(teacher, V):
    if teacher.vocab_size != V:
        raise VocabRangeError(f"teacher vocabulary {teacher.vocab_size} != logits length {V}")


def nkd_loss(teacher, z):
    """KL(p_kNN || softmax(z)) and its gradient ``softmax(z) - p_kNN``."""
    z = _logits(z)
    _check_teacher(teacher, len(z))
    logp = log_softmax(z)
    pt = teacher.probs
    mask = pt > 0
    loss = float(np.sum(pt[mask] * (np.log(pt[mask]) - logp[teacher.tokens[mask]])))
    return loss, np.exp(logp) - teacher.dense()


def binary_kl(teacher_b, z, target):
    """KL(b_T || b_S) and its gradient over ``z``."""
    z = _logits(z)
    t = int(target)
    lse = _lse(z)
    lse_rest = _lse(np.delete(z, t))
    log_pt, log_pnt = z[t] - lse, lse_rest - lse
    a, na = teacher_b.p_t, teacher_b.p_not_t
    loss = _xlogy_ratio(a, math.log(a) if a > 0 else 0.0, log_pt) + _xlogy_ratio(
        na, math.log(na) if na > 0 else 0.0, log_pnt
    )
    p = np.exp(z - lse)
    p_t = math.exp(log_pt)
    z_rest = z.copy()
    z_rest[t] = -np.inf
    hat = np.exp(z_rest - lse_rest)
    # d/dz_j for j != t:  p_j * a - hat_j * p_t * (1 - a);  d/dz_t: p_t - a
    grad = p * a - hat * p_t * na
    grad[t] = p_t - a
    return float(loss), grad


def nontarget_kl(teacher_b, z, target):
    """KL(hat_T || hat_S); zero with zero gradient when hat_T is undefined."""
    z = _logits(z)
    t = int(target)
    grad = np.zeros(len(z))
    if not teacher_b.hat_defined:
        return 0.0, grad
    rest_idx = np.delete(np.arange(len(z)), t)
    lse_rest = _lse(z[rest_idx])
    hat_s = np.exp(z[rest_idx] - lse_rest)
    h = teacher_b.hat_p
    mask = h > 0
    loss = float(np.sum(h[mask] * (np.log(h[mask]) - (z[teacher_b.hat_tokens[mask]] - lse_rest))))
    grad[rest_idx] = hat_s
    np.subtract.at(grad, teacher_b.hat_tokens, h)
    grad[t] = 0.0
    return loss, grad


def dnkd_loss(teacher, z, target, w=LossWeights()):
    z = _logits(z)
    V = len(z)
    _check_teacher(teacher, V)
    t = _check_target(target, V)
    ce, g_ce = cross_entropy_smoothed(z, t, w.label_smoothing)
    tb = teacher_decompose(teacher, t)
    bkl, g_b = binary_kl(tb, z, t)
    nkl, g_n = nontarget_kl(tb, z, t)
    nkd, g_nkd = nkd_loss(teacher, z)
    total = w.lam * ce + (1 - w.lam) * (w.alpha * bkl + w.beta * nkl)
    grad = w.lam * g_ce + (1 - w.lam) * (w.alpha * g_b + w.beta * g_n)
    return LossBreakdown(
        ce=ce,
        binary_kl=bkl,
        nontarget_kl=nkl,
        nkd=nkd,
        total=total,
        grad=grad,
        parts={"ce": g_ce, "binary": g_b, "nontarget": g_n, "nkd": g_nkd, "p_t_teacher": tb.p_t},
    )


def decomposition_check(teacher, z, target):
    """|KL(p_T||p_S) - [KL_b + (1 - p_t_T) KL_hat]|."""
    t = int(target)
    lhs, _ = nkd_loss(teacher, z)
    tb = teacher_decompose(teacher, t)
    bkl, _ = binary_kl(tb, z, t)
    nkl, _ = nontarget_kl(tb, z, t)
    return abs(lhs - (bkl + tb.p_not_t * nkl))


@dataclass
class GradNormReport:
    """Per-token |dL/dz_j| of the distillation part for both objectives."""

    target: int
    p_t_teacher: float
    beta: float
    regime: str
    nkd: np.ndarray
    dnkd: np.ndarray
    nkd_nontarget: np.ndarray
    dnkd_nontarget: np.ndarray

    def rows(self):
        for j in range(len(self.nkd)):
            yield {
                "token": j,
                "is_target": int(j == self.target),
                "nkd_norm": float(self.nkd[j]),
                "dnkd_norm": float(self.dnkd[j]),
                "nkd_nontarget_norm": float(self.nkd_nontarget[j]),
                "dnkd_nontarget_norm": float(self.dnkd_nontarget[j]),
                "regime": self.regime,
            }

    def top(self, n=8):
        """Indices of the ``n`` largest NKD norms, target first if present."""
        order = np.lexsort((np.arange(len(self.nkd)), -self.nkd))
        return order[:n]


def grad_norm_report(teacher, z, target, w=LossWeights()):
    """Compare distillation gradients of the coupled and decoupled losses.

    The coupled gradient is ``g_b + (1 - p_t_T) g_hat``; the decoupled one
    is ``alpha g_b + beta g_hat``. CE and the ``(1 - lam)`` factor are
    shared by both and left out.
    """
    z = _logits(z)
    t = _check_target(target, len(z))
    tb = teacher_decompose(teacher, t)
    _, g_b = binary_kl(tb, z, t)
    _, g_n = nontarget_kl(tb, z, t)
    coupled_nt = tb.p_not_t * g_n
    decoupled_nt = w.beta * g_n
    regime = "le_beta" if tb.p_not_t <= w.beta else "gt_beta"
    return GradNormReport(
        target=t,
        p_t_teacher=tb.p_t,
        beta=w.beta,
        regime=regime,
        nkd=np.abs(g_b + coupled_nt),
        dnkd=np.abs(w.alpha * g_b + decoupled_nt),
        nkd_nontarget=np.abs(coupled_nt),
        dnkd_nontarget=np.abs(decoupled_nt),
    )


# -- batched path used by training ---------------------------------------------

MODES = ("ce", "nkd", "dnkd")


def batch_losses(z, targets, t_tokens, t_probs, w, mode):
    """Per-position losses and logit gradients for ``(P, V)`` logits.

    ``t_tokens``/``t_probs`` come from ``teacher.teacher_slots`` (each
    distinct token's mass in one slot, zeros elsewhere). They may be None
    in ``ce`` mode. Returns ``(total, grad, parts)`` with ``total`` of shape
    ``(P,)`` and ``grad`` of shape ``(P, V)``.
    """
    if mode not in MODES:
        raise InvalidArgument(f"unknown loss mode {mode!r}")
    z = np.asarray(z, dtype=np.float64)
    P, V = z.shape
    rows = np.arange(P)
    t = np.asarray(targets, dtype=np.int64)
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1)
    lse = m[:, 0] + np.log(s)
    logp = z - lse[:, None]
    p = e / s[:, None]

    eps = w.label_smoothing
    q = np.full((P, V), eps / (V - 1))
    q[rows, t] = 1.0 - eps
    ce = -(q * logp).sum(axis=1)
    g_ce = p - q
    if mode == "ce":
        return ce, g_ce, {"ce": ce}
    if t_tokens is None:
        raise InvalidArgument(f"{mode} mode needs teacher inputs")

    tt = np.asarray(t_tokens, dtype=np.int64)
    tp = np.asarray(t_probs, dtype=np.float64)
    dense_t = np.zeros((P, V))
    np.add.at(dense_t, (np.repeat(rows, tt.shape[1]), tt.ravel()), tp.ravel())
    live = tp > 0
    log_tp = np.log(np.where(live, tp, 1.0))
    logp_at = np.take_along_axis(logp, tt, axis=1)
    nkd = np.where(live, tp * (log_tp - logp_at), 0.0).sum(axis=1)

    if mode == "nkd":
        g_nkd = p - dense_t
        total = w.lam * ce + (1 - w.lam) * nkd
        grad = w.lam * g_ce + (1 - w.lam) * g_nkd
        return total, grad, {"ce": ce, "nkd": nkd}

    on_t = tt == t[:, None]
    a = np.where(on_t, tp, 0.0).sum(axis=1)
    na = np.where(on_t, 0.0, tp).sum(axis=1)
    z_rest = z.copy()
    z_rest[rows, t] = -np.inf
    m_r = z_rest.max(axis=1, keepdims=True)
    e_r = np.exp(z_rest - m_r)
    s_r = e_r.sum(axis=1)
    lse_r = m_r[:, 0] + np.log(s_r)
    hat_s = e_r / s_r[:, None]
    log_pt = z[rows, t] - lse
    log_pnt = lse_r - lse
    p_t = p[rows, t]

    def xlog(x, log_q):
        return np.where(x > 0, x * (np.log(np.where(x > 0, x, 1.0)) - log_q), 0.0)

    bkl = xlog(a, log_pt) + xlog(na, log_pnt)
    g_b = p * a[:, None] - hat_s * (p_t * na)[:, None]
    g_b[rows, t] = p_t - a

    defined = na >= HAT_UNDEFINED
    safe_na = np.where(defined, na, 1.0)
    h = np.where(on_t, 0.0, tp) / safe_na[:, None]
    h_live = h > 0
    log_hat_at = np.take_along_axis(z, tt, axis=1) - lse_r[:, None]
    nkl = np.where(h_live, h * (np.log(np.where(h_live, h, 1.0)) - log_hat_at), 0.0).sum(axis=1)
    dense_h = np.zeros((P, V))
    np.add.at(dense_h, (np.repeat(rows, tt.shape[1]), tt.ravel()), h.ravel())
    g_n = hat_s - dense_h
    g_n[rows, t] = 0.0
    nkl = np.where(defined, nkl, 0.0)
    g_n = np.where(defined[:, None], g_n, 0.0)

    total = w.lam * ce + (1 - w.lam) * (w.alpha * bkl + w.beta * nkl)
    grad = w.lam * g_ce + (1 - w.lam) * (w.alpha * g_b + w.beta * g_n)
    return total, grad, {"ce": ce, "nkd": nkd, "binary_kl": bkl, "nontarget_kl": nkl, "p_t_teacher": a}
