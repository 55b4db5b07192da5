"""
Entropy-regularized optimal transport.

Sinkhorn scaling between two discrete distributions, the regularized transport
value, an exact permutation-enumeration oracle for small uniform problems and
the gradients of the regularized objective with respect to the cost matrix.

Shapes follow (rows of the source distribution) x (rows of the target
distribution). All computation is float64.
"""
import itertools
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp, xlogy

from src.errors import InvalidConfigError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

WEIGHT_SUM_TOL = 1e-9
SCALING_RANGE = (1e-30, 1e30)
ORACLE_MAX_N = 8
GRAD_MODES = ('envelope', 'unrolled')


@dataclass(frozen=True)
class SinkhornConfig:
    """
    :param lam: entropic regularizer (also the kernel temperature).
    :param max_iters: iteration budget.
    :param tol: stop once both marginal residuals are below this value.
    :param cost_clamp_multiplier: costs are clamped at multiplier * lam before the
        kernel is formed. None disables the clamp.
    """
    lam: float = 0.1
    max_iters: int = 100
    tol: float = 1e-6
    cost_clamp_multiplier: Optional[float] = 10.0

    def __post_init__(self):
        if not self.lam > 0:
            raise InvalidConfigError('sinkhorn lambda must be > 0, got %r' % (self.lam,))
        if int(self.max_iters) < 1:
            raise InvalidConfigError('sinkhorn max_iters must be >= 1, got %r' % (self.max_iters,))
        if not self.tol > 0:
            raise InvalidConfigError('sinkhorn tol must be > 0, got %r' % (self.tol,))
        if self.cost_clamp_multiplier is not None and not self.cost_clamp_multiplier > 0:
            raise InvalidConfigError('cost_clamp_multiplier must be > 0 or null')

    @property
    def clamp_bound(self):
        if self.cost_clamp_multiplier is None:
            return None
        return self.cost_clamp_multiplier * self.lam


@dataclass
class TransportPlan:
    t: np.ndarray
    row_marginal_residual: float
    col_marginal_residual: float
    iterations_used: int
    log_domain: bool = False
    clamped: bool = False

    @property
    def shape(self):
        return self.t.shape


@dataclass
class TransportPlanBatch:
    t: np.ndarray
    row_marginal_residual: np.ndarray
    col_marginal_residual: np.ndarray
    iterations_used: np.ndarray
    log_domain: np.ndarray
    clamped: np.ndarray

    def __len__(self):
        return self.t.shape[0]

    def __getitem__(self, i):
        return TransportPlan(t=self.t[i],
                             row_marginal_residual=float(self.row_marginal_residual[i]),
                             col_marginal_residual=float(self.col_marginal_residual[i]),
                             iterations_used=int(self.iterations_used[i]),
                             log_domain=bool(self.log_domain[i]),
                             clamped=bool(self.clamped[i]))


def uniform_weights(n):
    if n < 1:
        raise ShapeError('a distribution needs at least one atom')
    return np.full(n, 1.0 / n)


def as_weights(w, name='weights'):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] < 1:
        raise ShapeError('%s must be a non-empty vector, got shape %s' % (name, w.shape))
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise NumericalError('%s must be finite and nonnegative' % name)
    if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
        raise NumericalError('%s must sum to 1 (sum=%.12g)' % (name, w.sum()))
    return w


def as_cost_matrix(c):
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2:
        raise ShapeError('cost matrix must be 2-D, got shape %s' % (c.shape,))
    if not np.all(np.isfinite(c)):
        raise NumericalError('cost matrix has non-finite entries')
    return c


def effective_cost(c, cfg):
    """
    Cost seen by the Sinkhorn kernel: min(C, multiplier * lam). Objectives are
    still evaluated on the raw cost. Returns the clamped matrix and the mask of
    entries left untouched.
    """
    bound = cfg.clamp_bound
    if bound is None:
        return c, np.ones(c.shape, dtype=bool)
    return np.minimum(c, bound), c <= bound


def negentropy(t):
    """sum T (log T - 1) with 0 log 0 = 0."""
    return float(np.sum(xlogy(t, t) - t))


def _all_in_range(x, lo, hi):
    flat = x.reshape(x.shape[0], -1)
    return np.all(np.isfinite(flat) & (flat >= lo) & (flat <= hi), axis=1)


def _sinkhorn_batched(a, b, c, cfg):
    """
    Runs every instance of the batch on its own trajectory: converged instances
    are frozen, and an instance whose scalings leave SCALING_RANGE continues in
    the log domain from its last valid scalings.

    The raw-domain loop keeps K v from the previous iteration, so one iteration
    costs two batched products. Finished instances are dropped from the working
    set once they make up a quarter of it.
    """
    B, n, m = c.shape
    c_eff, _ = effective_cost(c, cfg)
    bound = cfg.clamp_bound
    clamped = np.any(c > bound, axis=(1, 2)) if bound is not None else np.zeros(B, dtype=bool)

    log_kernel = -c_eff / cfg.lam
    kernel = np.exp(log_kernel)
    lo, hi = SCALING_RANGE

    u = np.ones((B, n))
    v = np.ones((B, m))
    in_log = np.zeros(B, dtype=bool)
    log_start = np.zeros(B, dtype=np.int64)
    iterations = np.full(B, cfg.max_iters, dtype=np.int64)
    converged = np.zeros(B, dtype=bool)

    work = np.arange(B)
    k_w, a_w, b_w = kernel, a, b
    u_w, v_w = u.copy(), v.copy()
    kv = kernel.sum(axis=2)
    live = np.ones(B, dtype=bool)

    for it in range(1, cfg.max_iters + 1):
        if not live.any():
            break
        with np.errstate(divide='ignore', over='ignore', invalid='ignore'):
            u_new = a_w / kv
            ktu = np.matmul(u_new[:, None, :], k_w)[:, 0, :]
            v_new = b_w / ktu
        ok = _all_in_range(u_new, lo, hi) & _all_in_range(v_new, lo, hi)
        failed = live & ~ok
        if failed.any():
            sel = work[failed]
            logger.debug('sinkhorn: %d instance(s) switch to log domain at iteration %d', sel.size, it)
            u[sel] = u_w[failed]
            v[sel] = v_w[failed]
            in_log[sel] = True
            log_start[sel] = it
            live &= ok
        u_w = np.where(ok[:, None], u_new, u_w)
        v_w = np.where(ok[:, None], v_new, v_w)
        with np.errstate(over='ignore', invalid='ignore'):
            kv = np.matmul(k_w, v_w[:, :, None])[:, :, 0]
            row_res = np.max(np.abs(u_w * kv - a_w), axis=1)
            col_res = np.max(np.abs(v_w * ktu - b_w), axis=1)
        done = live & (np.maximum(row_res, col_res) <= cfg.tol)
        if done.any():
            sel = work[done]
            u[sel] = u_w[done]
            v[sel] = v_w[done]
            iterations[sel] = it
            converged[sel] = True
            live &= ~done
        if live.any() and live.sum() <= 0.75 * live.size:
            keep = np.flatnonzero(live)
            work, k_w, a_w, b_w = work[keep], k_w[keep], a_w[keep], b_w[keep]
            u_w, v_w, kv = u_w[keep], v_w[keep], kv[keep]
            live = np.ones(keep.size, dtype=bool)

    rest = work[live]
    u[rest] = u_w[live]
    v[rest] = v_w[live]

    t = u[:, :, None] * kernel * v[:, None, :]
    lg = np.flatnonzero(in_log)
    if lg.size:
        t[lg], done_at = _sinkhorn_log_rows(a[lg], b[lg], log_kernel[lg], u[lg], v[lg], log_start[lg], cfg)
        converged[lg] = done_at > 0
        iterations[lg] = np.where(done_at > 0, done_at, cfg.max_iters)

    row_res = np.max(np.abs(t.sum(axis=2) - a), axis=1)
    col_res = np.max(np.abs(t.sum(axis=1) - b), axis=1)
    if not converged.all():
        logger.debug('sinkhorn: %d of %d instance(s) hit max_iters=%d (worst residual %.3g)',
                     int((~converged).sum()), B, cfg.max_iters,
                     float(np.max(np.maximum(row_res, col_res)[~converged])))
    return TransportPlanBatch(t=t, row_marginal_residual=row_res, col_marginal_residual=col_res,
                              iterations_used=iterations, log_domain=in_log, clamped=clamped)


def _sinkhorn_log_rows(a, b, log_kernel, u, v, start, cfg):
    """
    Log-domain iterations for the instances that left SCALING_RANGE. Instance i
    resumes at iteration start[i]. Returns the plans and the iteration each one
    converged at (0 when it never did).
    """
    with np.errstate(divide='ignore'):
        log_a, log_b = np.log(a), np.log(b)
        log_u, log_v = np.log(u), np.log(v)
    done_at = np.zeros(start.size, dtype=np.int64)
    for it in range(int(start.min()), cfg.max_iters + 1):
        if np.all(done_at > 0):
            break
        act = np.flatnonzero((done_at == 0) & (start <= it))
        if not act.size:
            continue
        lk = log_kernel[act]
        log_u[act] = log_a[act] - logsumexp(lk + log_v[act][:, None, :], axis=2)
        log_v[act] = log_b[act] - logsumexp(lk + log_u[act][:, :, None], axis=1)
        t = np.exp(log_u[act][:, :, None] + lk + log_v[act][:, None, :])
        row_res = np.max(np.abs(t.sum(axis=2) - a[act]), axis=1)
        col_res = np.max(np.abs(t.sum(axis=1) - b[act]), axis=1)
        done_at[act[np.maximum(row_res, col_res) <= cfg.tol]] = it
    return np.exp(log_u[:, :, None] + log_kernel + log_v[:, None, :]), done_at


def sinkhorn_solve_batch(a, b, c, cfg):
    """
    Solves B independent problems. a and b are either shared vectors or one row
    per instance; c has shape (B, n, m).
    """
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 3:
        raise ShapeError('batched cost must be 3-D, got shape %s' % (c.shape,))
    if not np.all(np.isfinite(c)):
        raise NumericalError('cost matrix has non-finite entries')
    B, n, m = c.shape
    a = _batched_weights(a, B, n, 'source weights')
    b = _batched_weights(b, B, m, 'target weights')
    return _sinkhorn_batched(a, b, c, cfg)


def _batched_weights(w, B, size, name):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        w = np.broadcast_to(as_weights(w, name), (B, w.shape[0]))
    else:
        for row in w:
            as_weights(row, name)
    if w.shape != (B, size):
        raise ShapeError('%s have shape %s, expected %s' % (name, w.shape, (B, size)))
    return np.ascontiguousarray(w)


def sinkhorn_solve(a, b, c, cfg):
    a = as_weights(a, 'source weights')
    b = as_weights(b, 'target weights')
    c = as_cost_matrix(c)
    if c.shape != (a.shape[0], b.shape[0]):
        raise ShapeError('cost shape %s does not match weights (%d, %d)' % (c.shape, a.shape[0], b.shape[0]))
    return _sinkhorn_batched(a[None, :], b[None, :], c[None, :, :], cfg)[0]


def solve_uniform_many(costs, cfg):
    """
    Solves every cost matrix with uniform marginals. Matrices of equal shape are
    stacked and solved together; output order follows the input.
    """
    groups = {}
    for i, c in enumerate(costs):
        groups.setdefault(np.shape(c), []).append(i)
    plans = [None] * len(costs)
    for (n, m), members in groups.items():
        stack = np.stack([as_cost_matrix(costs[i]) for i in members])
        batch = sinkhorn_solve_batch(uniform_weights(n), uniform_weights(m), stack, cfg)
        for j, i in enumerate(members):
            plans[i] = batch[j]
    return plans


def ot_value(plan, c, lam, include_entropy=True):
    t = plan.t if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    c = as_cost_matrix(c)
    if t.shape != c.shape:
        raise ShapeError('plan shape %s does not match cost shape %s' % (t.shape, c.shape))
    value = float(np.sum(t * c))
    if include_entropy:
        value += lam * negentropy(t)
    return value


def exact_ot_oracle(c, a=None, b=None):
    """
    Exact unregularized optimum under uniform marginals by enumerating every
    permutation plan. Ties resolve to the first permutation in lexicographic order.
    """
    c = as_cost_matrix(c)
    n, m = c.shape
    if n != m:
        raise ShapeError('oracle needs a square cost matrix, got %s' % (c.shape,))
    if n > ORACLE_MAX_N:
        raise ShapeError('oracle enumerates n! plans and is limited to n <= %d' % ORACLE_MAX_N)
    for w in (a, b):
        if w is not None and not np.allclose(as_weights(w), uniform_weights(n), rtol=0, atol=WEIGHT_SUM_TOL):
            raise InvalidConfigError('oracle supports uniform marginals only')

    best_cost = np.inf
    best_perm = None
    for perm in itertools.permutations(range(n)):
        cost = 0.0
        for i in range(n):
            cost += c[i, perm[i]]
        if cost < best_cost:
            best_cost = cost
            best_perm = perm

    t = np.zeros((n, n))
    t[np.arange(n), best_perm] = 1.0 / n
    return best_cost / n, TransportPlan(t=t, row_marginal_residual=0.0, col_marginal_residual=0.0,
                                        iterations_used=0)


@dataclass
class OTObjective:
    value: float
    transport_cost: float
    plan: TransportPlan
    grad_c: np.ndarray


def entropic_objectives(costs, cfg, grad_mode='envelope'):
    """
    Regularized objective <T*, C> + lam * sum T*(log T* - 1) under uniform
    marginals for every cost matrix, with its gradient w.r.t. the raw cost.

    The clamp only shapes the kernel; the value uses the raw cost. envelope:
    the optimal plan is held fixed, so dvalue/dC = T*. unrolled: reverse pass
    through the recorded Sinkhorn iterations.
    """
    if grad_mode not in GRAD_MODES:
        raise InvalidConfigError('grad_mode must be one of %s, got %r' % (GRAD_MODES, grad_mode))
    costs = [as_cost_matrix(c) for c in costs]
    if grad_mode == 'unrolled':
        return [_unrolled_objective(c, cfg) for c in costs]

    out = []
    for c, plan in zip(costs, solve_uniform_many(costs, cfg)):
        transport = ot_value(plan, c, cfg.lam, include_entropy=False)
        value = transport + cfg.lam * negentropy(plan.t)
        out.append(OTObjective(value=value, transport_cost=transport, plan=plan, grad_c=plan.t.copy()))
    return out


def _unrolled_objective(c, cfg):
    n, m = c.shape
    a = uniform_weights(n)
    b = uniform_weights(m)
    c_eff, mask = effective_cost(c, cfg)
    kernel = np.exp(-c_eff / cfg.lam)
    lo, hi = SCALING_RANGE

    us = []
    vs = [np.ones(m)]
    iterations = cfg.max_iters
    for it in range(1, cfg.max_iters + 1):
        u = a / kernel.dot(vs[-1])
        v = b / kernel.T.dot(u)
        if not (_all_in_range(u[None], lo, hi)[0] and _all_in_range(v[None], lo, hi)[0]):
            raise NumericalError('unrolled differentiation needs raw-domain Sinkhorn; '
                                 'scalings left range at iteration %d' % it)
        us.append(u)
        vs.append(v)
        t = u[:, None] * kernel * v[None, :]
        if max(np.max(np.abs(t.sum(1) - a)), np.max(np.abs(t.sum(0) - b))) <= cfg.tol:
            iterations = it
            break

    u, v = us[-1], vs[-1]
    t = u[:, None] * kernel * v[None, :]
    transport = float(np.sum(t * c))
    value = transport + cfg.lam * negentropy(t)

    # reverse pass; only the kernel path sees the clamp
    d_t = c + cfg.lam * np.log(t)
    d_c = t.copy()
    d_kernel = u[:, None] * v[None, :] * d_t
    d_u = np.sum(kernel * v[None, :] * d_t, axis=1)
    d_v = np.sum(kernel * u[:, None] * d_t, axis=0)
    for s in range(len(us) - 1, -1, -1):
        u_s, v_next, v_prev = us[s], vs[s + 1], vs[s]
        col = kernel.T.dot(u_s)
        d_col = -d_v * v_next / col
        d_kernel += np.outer(u_s, d_col)
        d_u = d_u + kernel.dot(d_col)
        row = kernel.dot(v_prev)
        d_row = -d_u * u_s / row
        d_kernel += np.outer(d_row, v_prev)
        d_v = kernel.T.dot(d_row)
        d_u = np.zeros(n)
    d_c += d_kernel * (-kernel / cfg.lam) * mask

    plan = TransportPlan(t=t,
                         row_marginal_residual=float(np.max(np.abs(t.sum(1) - a))),
                         col_marginal_residual=float(np.max(np.abs(t.sum(0) - b))),
                         iterations_used=iterations,
                         clamped=not bool(mask.all()))
    return OTObjective(value=value, transport_cost=transport, plan=plan, grad_c=d_c)
