"""Compiled inner loops: RK4 on (S, E, I), its adjoint, and oracle sweeps.

States are plain (S, E, I) floats; R is recovered as 1 - S - E - I by callers.
"""

import numpy as np
from numba import njit

BLOWUP_TOL = 1e-9


@njit(cache=True)
def rhs(s, e, i, beta, gamma, eta):
    inf = beta * s * i
    return -inf, inf - eta * e, eta * e - gamma * i


@njit(cache=True)
def rk4(s, e, i, beta, gamma, eta, h):
    a1, b1, c1 = rhs(s, e, i, beta, gamma, eta)
    a2, b2, c2 = rhs(s + 0.5 * h * a1, e + 0.5 * h * b1, i + 0.5 * h * c1, beta, gamma, eta)
    a3, b3, c3 = rhs(s + 0.5 * h * a2, e + 0.5 * h * b2, i + 0.5 * h * c2, beta, gamma, eta)
    a4, b4, c4 = rhs(s + h * a3, e + h * b3, i + h * c3, beta, gamma, eta)
    w = h / 6.0
    return (
        s + w * (a1 + 2.0 * a2 + 2.0 * a3 + a4),
        e + w * (b1 + 2.0 * b2 + 2.0 * b3 + b4),
        i + w * (c1 + 2.0 * c2 + 2.0 * c3 + c4),
    )


@njit(cache=True)
def _clamp(v):
    # returns (value, ok)
    if v < 0.0:
        if v < -BLOWUP_TOL:
            return v, False
        return 0.0, True
    if v > 1.0:
        if v > 1.0 + BLOWUP_TOL:
            return v, False
        return 1.0, True
    return v, True


@njit(cache=True)
def rk4_clamped(s, e, i, beta, gamma, eta, h):
    s, e, i = rk4(s, e, i, beta, gamma, eta, h)
    s, ok1 = _clamp(s)
    e, ok2 = _clamp(e)
    i, ok3 = _clamp(i)
    return s, e, i, ok1 and ok2 and ok3


@njit(cache=True)
def simulate_steps(x0, hs, betas, gammas, eta, beta_nom, gamma_nom):
    """Integrate over a step schedule.

    Returns (states (n+1, 3), running cost (n+1,), index of failed step or -1).
    Running cost is the per-step trapezoid of the stage cost with the step's control.
    """
    n = hs.shape[0]
    out = np.empty((n + 1, 3))
    cost = np.zeros(n + 1)
    s, e, i = x0[0], x0[1], x0[2]
    out[0, 0], out[0, 1], out[0, 2] = s, e, i
    for k in range(n):
        b = betas[k]
        g = gammas[k]
        du = (b - beta_nom) ** 2 + (g - gamma_nom) ** 2
        l0 = e * e + i * i + du
        s, e, i, ok = rk4_clamped(s, e, i, b, g, eta, hs[k])
        if not ok:
            return out[: k + 1], cost[: k + 1], k
        l1 = e * e + i * i + du
        cost[k + 1] = cost[k] + 0.5 * hs[k] * (l0 + l1)
        out[k + 1, 0], out[k + 1, 1], out[k + 1, 2] = s, e, i
    return out, cost, -1


@njit(cache=True)
def _quad_terms(s, e, i, beta, gamma, eta):
    # integrands E, I, E^2, I^2, beta*S*I and their time derivatives
    ds, de, di = rhs(s, e, i, beta, gamma, eta)
    f = (e, i, e * e, i * i, beta * s * i)
    df = (de, di, 2.0 * e * de, 2.0 * i * di, beta * (ds * i + s * di))
    return f, df


@njit(cache=True)
def nominal_tail_cost(s, e, i, beta, gamma, eta, h, trunc_tol, t_cap):
    """Integral of E^2 + I^2 under a constant control.

    Corrected trapezoid rule (endpoint derivatives), fourth order like RK4.
    Stops once E + I < trunc_tol or after t_cap days.
    Returns (value, stop time, reached trunc_tol).
    """
    total = 0.0
    t = 0.0
    f, df = _quad_terms(s, e, i, beta, gamma, eta)
    q0 = f[2] + f[3]
    dq0 = df[2] + df[3]
    while e + i >= trunc_tol:
        if t >= t_cap:
            return total, t, False
        s, e, i = rk4(s, e, i, beta, gamma, eta, h)
        if e < 0.0:
            e = 0.0
        if i < 0.0:
            i = 0.0
        f, df = _quad_terms(s, e, i, beta, gamma, eta)
        q1 = f[2] + f[3]
        dq1 = df[2] + df[3]
        total += 0.5 * h * (q0 + q1) + h * h / 12.0 * (dq0 - dq1)
        q0 = q1
        dq0 = dq1
        t += h
    return total, t, True


@njit(cache=True)
def integral_sums(x0, hs, betas, gammas, eta):
    """Integrals of E, I, E^2, I^2, beta*S*I over a step schedule.

    Corrected trapezoid rule per step, using the step's own control for the
    endpoint derivatives. Returns (sums (5,), final state (3,), ok).
    """
    sums = np.zeros(5)
    s, e, i = x0[0], x0[1], x0[2]
    for k in range(hs.shape[0]):
        b = betas[k]
        g = gammas[k]
        h = hs[k]
        f0, d0 = _quad_terms(s, e, i, b, g, eta)
        s, e, i, ok = rk4_clamped(s, e, i, b, g, eta, h)
        if not ok:
            return sums, np.array([s, e, i]), False
        f1, d1 = _quad_terms(s, e, i, b, g, eta)
        for j in range(5):
            sums[j] += 0.5 * h * (f0[j] + f1[j]) + h * h / 12.0 * (d0[j] - d1[j])
    return sums, np.array([s, e, i]), True


@njit(cache=True)
def _jx_t(s, e, i, beta, gamma, eta, v1, v2, v3):
    # (df/dx)^T v
    return (
        beta * i * (v2 - v1),
        eta * (v3 - v2),
        beta * s * (v2 - v1) - gamma * v3,
    )


@njit(cache=True)
def _ju_t(s, e, i, v1, v2, v3):
    # (df/du)^T v, u = (beta, gamma)
    return s * i * (v2 - v1), -i * v3


@njit(cache=True)
def rk4_vjp(s, e, i, beta, gamma, eta, h, a1, a2, a3):
    """Pull an adjoint of the RK4 output back to (state, control)."""
    k1 = rhs(s, e, i, beta, gamma, eta)
    z2 = (s + 0.5 * h * k1[0], e + 0.5 * h * k1[1], i + 0.5 * h * k1[2])
    k2 = rhs(z2[0], z2[1], z2[2], beta, gamma, eta)
    z3 = (s + 0.5 * h * k2[0], e + 0.5 * h * k2[1], i + 0.5 * h * k2[2])
    k3 = rhs(z3[0], z3[1], z3[2], beta, gamma, eta)
    z4 = (s + h * k3[0], e + h * k3[1], i + h * k3[2])

    w = h / 6.0
    xb = [a1, a2, a3]
    kb4 = (w * a1, w * a2, w * a3)
    kb3 = [2 * w * a1, 2 * w * a2, 2 * w * a3]
    kb2 = [2 * w * a1, 2 * w * a2, 2 * w * a3]
    kb1 = [w * a1, w * a2, w * a3]
    ub = 0.0
    gb = 0.0

    zb = _jx_t(z4[0], z4[1], z4[2], beta, gamma, eta, kb4[0], kb4[1], kb4[2])
    du = _ju_t(z4[0], z4[1], z4[2], kb4[0], kb4[1], kb4[2])
    ub += du[0]
    gb += du[1]
    for j in range(3):
        xb[j] += zb[j]
        kb3[j] += h * zb[j]

    zb = _jx_t(z3[0], z3[1], z3[2], beta, gamma, eta, kb3[0], kb3[1], kb3[2])
    du = _ju_t(z3[0], z3[1], z3[2], kb3[0], kb3[1], kb3[2])
    ub += du[0]
    gb += du[1]
    for j in range(3):
        xb[j] += zb[j]
        kb2[j] += 0.5 * h * zb[j]

    zb = _jx_t(z2[0], z2[1], z2[2], beta, gamma, eta, kb2[0], kb2[1], kb2[2])
    du = _ju_t(z2[0], z2[1], z2[2], kb2[0], kb2[1], kb2[2])
    ub += du[0]
    gb += du[1]
    for j in range(3):
        xb[j] += zb[j]
        kb1[j] += 0.5 * h * zb[j]

    zb = _jx_t(s, e, i, beta, gamma, eta, kb1[0], kb1[1], kb1[2])
    du = _ju_t(s, e, i, kb1[0], kb1[1], kb1[2])
    ub += du[0]
    gb += du[1]
    for j in range(3):
        xb[j] += zb[j]
    return xb[0], xb[1], xb[2], ub, gb


@njit(cache=True)
def shooting_forward(x0, betas, gammas, m, h, eta):
    """Unclamped RK4 over n_ctrl intervals of m steps each; states (n*m+1, 3)."""
    n = betas.shape[0]
    out = np.empty((n * m + 1, 3))
    s, e, i = x0[0], x0[1], x0[2]
    out[0, 0], out[0, 1], out[0, 2] = s, e, i
    idx = 0
    for k in range(n):
        for _ in range(m):
            s, e, i = rk4(s, e, i, betas[k], gammas[k], eta, h)
            idx += 1
            out[idx, 0], out[idx, 1], out[idx, 2] = s, e, i
    return out


@njit(cache=True)
def shooting_backward(states, betas, gammas, m, h, eta, state_weight, terminal_adjoint):
    """Gradient of  sum_n w_n . x_n + lambda_T . x_N  w.r.t. the controls.

    ``state_weight`` is (N+1, 3): direct sensitivity of the objective to each sample.
    """
    n = betas.shape[0]
    gb = np.zeros(n)
    gg = np.zeros(n)
    nn = n * m
    a1 = terminal_adjoint[0] + state_weight[nn, 0]
    a2 = terminal_adjoint[1] + state_weight[nn, 1]
    a3 = terminal_adjoint[2] + state_weight[nn, 2]
    idx = nn
    for k in range(n - 1, -1, -1):
        for _ in range(m):
            idx -= 1
            x1, x2, x3, ub, ugb = rk4_vjp(
                states[idx, 0], states[idx, 1], states[idx, 2],
                betas[k], gammas[k], eta, h, a1, a2, a3,
            )
            gb[k] += ub
            gg[k] += ugb
            a1 = x1 + state_weight[idx, 0]
            a2 = x2 + state_weight[idx, 1]
            a3 = x3 + state_weight[idx, 2]
    return gb, gg


@njit(cache=True)
def worst_max_i(x0, beta_table, gamma_table, period, h, t_max, eta, limit):
    """Peak I under each row of a piecewise-constant signal table.

    A row stops early once its peak exceeds ``limit``, and the sweep stops at the
    first such row. Returns (peak per row, -1 for rows not run; index of the
    violating row or -1).
    """
    n_sig = beta_table.shape[0]
    n_per = beta_table.shape[1]
    steps_per = max(1, int(round(period / h)))
    hh = period / steps_per
    n_steps = int(round(t_max / hh))
    peaks = np.full(n_sig, -1.0)
    for r in range(n_sig):
        s, e, i = x0[0], x0[1], x0[2]
        peak = i
        for k in range(n_steps):
            j = k // steps_per
            if j >= n_per:
                j = n_per - 1
            s, e, i = rk4(s, e, i, beta_table[r, j], gamma_table[r, j], eta, hh)
            if i > peak:
                peak = i
                if peak > limit:
                    break
        peaks[r] = peak
        if peak > limit:
            return peaks, r
    return peaks, -1


# barrier stop codes
FLOOR = 0
LEFT_DOMAIN = 1
TIME_LIMIT = 2
ADJOINT_BLOWUP = 3


@njit(cache=True)
def _barrier_rhs(s, e, i, l1, l2, l3, beta, gamma, eta):
    # backward time: dx/dtau = -f, dlambda/dtau = (df/dx)^T lambda
    fs, fe, fi = rhs(s, e, i, beta, gamma, eta)
    g1, g2, g3 = _jx_t(s, e, i, beta, gamma, eta, l1, l2, l3)
    return -fs, -fe, -fi, g1, g2, g3


@njit(cache=True)
def _pick(sigma, prev, low, high, maximize, tol):
    # Hamiltonian is linear in the input with coefficient sigma
    if sigma > tol:
        return high if maximize else low
    if sigma < -tol:
        return low if maximize else high
    return prev


@njit(cache=True)
def barrier_backward(x0, lam0, maximize, beta_min, beta_nom, gamma_nom, gamma_max,
                     eta, h, t_max, i_floor, i_cap, sing_tol):
    """Integrate an extremal curve backward from a tangency point.

    Returns (points (n, 3), betas (n,), gammas (n,), stop code). The adjoint is
    renormalized every step; only its direction enters the switching functions.
    """
    n_max = int(t_max / h) + 1
    pts = np.empty((n_max + 1, 3))
    ub = np.empty(n_max + 1)
    ug = np.empty(n_max + 1)
    s, e, i = x0[0], x0[1], x0[2]
    l1, l2, l3 = lam0[0], lam0[1], lam0[2]
    nrm = np.sqrt(l1 * l1 + l2 * l2 + l3 * l3)
    l1, l2, l3 = l1 / nrm, l2 / nrm, l3 / nrm

    # resolve ties at the start by the switching functions after a probe step
    p1, p2, p3 = _jx_t(s, e, i, beta_nom, gamma_nom, eta, l1, l2, l3)
    q1, q2, q3 = l1 + h * p1, l2 + h * p2, l3 + h * p3
    beta = _pick(s * i * (q2 - q1), beta_nom, beta_min, beta_nom, maximize, 0.0)
    gamma = _pick(-i * q3, gamma_nom, gamma_nom, gamma_max, maximize, 0.0)

    pts[0, 0], pts[0, 1], pts[0, 2] = s, e, i
    count = 1
    code = TIME_LIMIT
    for k in range(n_max):
        beta = _pick(s * i * (l2 - l1), beta, beta_min, beta_nom, maximize, sing_tol)
        gamma = _pick(-i * l3, gamma, gamma_nom, gamma_max, maximize, sing_tol)
        ub[count - 1] = beta
        ug[count - 1] = gamma
        a = _barrier_rhs(s, e, i, l1, l2, l3, beta, gamma, eta)
        b = _barrier_rhs(s + 0.5 * h * a[0], e + 0.5 * h * a[1], i + 0.5 * h * a[2],
                         l1 + 0.5 * h * a[3], l2 + 0.5 * h * a[4], l3 + 0.5 * h * a[5],
                         beta, gamma, eta)
        c = _barrier_rhs(s + 0.5 * h * b[0], e + 0.5 * h * b[1], i + 0.5 * h * b[2],
                         l1 + 0.5 * h * b[3], l2 + 0.5 * h * b[4], l3 + 0.5 * h * b[5],
                         beta, gamma, eta)
        d = _barrier_rhs(s + h * c[0], e + h * c[1], i + h * c[2],
                         l1 + h * c[3], l2 + h * c[4], l3 + h * c[5],
                         beta, gamma, eta)
        w = h / 6.0
        s_n = s + w * (a[0] + 2 * b[0] + 2 * c[0] + d[0])
        e_n = e + w * (a[1] + 2 * b[1] + 2 * c[1] + d[1])
        i_n = i + w * (a[2] + 2 * b[2] + 2 * c[2] + d[2])
        l1 = l1 + w * (a[3] + 2 * b[3] + 2 * c[3] + d[3])
        l2 = l2 + w * (a[4] + 2 * b[4] + 2 * c[4] + d[4])
        l3 = l3 + w * (a[5] + 2 * b[5] + 2 * c[5] + d[5])
        nrm = np.sqrt(l1 * l1 + l2 * l2 + l3 * l3)
        if not np.isfinite(nrm) or nrm > 1e12 or nrm == 0.0:
            code = ADJOINT_BLOWUP
            break
        l1, l2, l3 = l1 / nrm, l2 / nrm, l3 / nrm
        if (s_n < -BLOWUP_TOL or e_n < -BLOWUP_TOL or i_n < -BLOWUP_TOL
                or s_n + e_n + i_n > 1.0 + BLOWUP_TOL or i_n > i_cap + BLOWUP_TOL):
            code = LEFT_DOMAIN
            break
        s, e, i = s_n, e_n, i_n
        pts[count, 0], pts[count, 1], pts[count, 2] = s, e, i
        count += 1
        if i < i_floor:
            code = FLOOR
            break
    ub[count - 1] = beta
    ug[count - 1] = gamma
    return pts[:count], ub[:count], ug[:count], code


@njit(cache=True)
def advance(s, e, i, beta, gamma, eta, duration, h):
    """Constant-input RK4 over ``duration`` (steps refined to fit).

    Returns (s, e, i, peak I along the samples).
    """
    n = max(1, int(np.ceil(duration / h - 1e-9)))
    dt = duration / n
    peak = i
    for _ in range(n):
        s, e, i = rk4(s, e, i, beta, gamma, eta, dt)
        if i > peak:
            peak = i
    return s, e, i, peak


@njit(cache=True)
def constant_peak(s, e, i, beta, gamma, eta, h, t_max, limit):
    """Peak I under a constant input.

    Stops early above ``limit`` or once E and I are both nonincreasing: under a
    constant input that region is forward invariant, so I has peaked.
    """
    peak = i
    n = int(t_max / h)
    for _ in range(n):
        s, e, i = rk4(s, e, i, beta, gamma, eta, h)
        if i > peak:
            peak = i
            if peak > limit:
                return peak
        ds, de, di = rhs(s, e, i, beta, gamma, eta)
        if de <= 0.0 and di <= 0.0:
            return peak
    return peak
