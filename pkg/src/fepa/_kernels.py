"""Compiled inner loops: vector-field evaluation and the Runge-Kutta steppers.

The field is passed around as a flat tuple of arrays (see
``VectorField.kernel_args``)::

    (emb, rep, state_leaf, state_rate, e_src, e_dst, e_act, e_rate,
     left, right, node_leaf, sync, product)

``emb[i]`` says which entry of the integrated vector feeds full state ``i``
(-1 means zero) and ``rep`` lists the full states whose derivatives are
returned.  The full system uses the identity for both.
"""
import types

import numpy as np
from numba import njit

OK, UNDERFLOW, NONFINITE, MAX_STEPS = 0, 1, 2, 3


@njit(cache=True)
def leaf_factors(V, state_leaf, state_rate, left, right, node_leaf, sync, product):
    """Node apparent rates (actions x nodes) and per-leaf scaling (actions x leaves).

    The component rate of state P for action a is
    ``factor[a, leaf(P)] * V[P] * state_rate[a, P]``.
    Nodes are in post-order; the root is last.
    """
    m = state_rate.shape[0]
    n_nodes = left.shape[0]
    n_leaves = 0
    for k in range(n_nodes):
        if node_leaf[k] >= 0:
            n_leaves += 1
    node_rate = np.zeros((m, n_nodes))
    leaf_rate = np.zeros((m, n_leaves))
    for i in range(V.shape[0]):
        for a in range(m):
            leaf_rate[a, state_leaf[i]] += V[i] * state_rate[a, i]
    for a in range(m):
        for k in range(n_nodes):
            if node_leaf[k] >= 0:
                node_rate[a, k] = leaf_rate[a, node_leaf[k]]
            else:
                x = node_rate[a, left[k]]
                y = node_rate[a, right[k]]
                if sync[k, a]:
                    if product:
                        node_rate[a, k] = x * y
                    else:
                        node_rate[a, k] = min(x, y)
                else:
                    node_rate[a, k] = x + y

    node_factor = np.zeros((m, n_nodes))
    factor = np.zeros((m, n_leaves))
    for a in range(m):
        node_factor[a, n_nodes - 1] = 1.0
        for k in range(n_nodes - 1, -1, -1):
            f = node_factor[a, k]
            if node_leaf[k] >= 0:
                factor[a, node_leaf[k]] = f
                continue
            for child in (left[k], right[k]):
                if not sync[k, a]:
                    node_factor[a, child] = f
                elif node_rate[a, child] > 0.0:
                    # R/r at the child, scaled up to the parent's apparent rate
                    node_factor[a, child] = f * node_rate[a, k] / node_rate[a, child]
                else:
                    node_factor[a, child] = 0.0
    return node_rate, factor


@njit(cache=True)
def component_rates(V, state_leaf, state_rate, left, right, node_leaf, sync, product):
    node_rate, factor = leaf_factors(V, state_leaf, state_rate, left, right, node_leaf, sync, product)
    m, n = state_rate.shape
    R = np.empty((m, n))
    for a in range(m):
        for i in range(n):
            R[a, i] = factor[a, state_leaf[i]] * V[i] * state_rate[a, i]
    return R, node_rate[:, left.shape[0] - 1]


@njit(cache=True)
def inflow(V, R, state_rate, e_src, e_dst, e_act, e_rate):
    """sum_{P'} p_a(P', P) R_a(P') for every action a and state P."""
    out = np.zeros(R.shape)
    for e in range(e_src.shape[0]):
        a = e_act[e]
        s = e_src[e]
        if state_rate[a, s] > 0.0:
            out[a, e_dst[e]] += e_rate[e] / state_rate[a, s] * R[a, s]
    return out


@njit(cache=True)
def full_field(V, out, state_leaf, state_rate, e_src, e_dst, e_act, e_rate,
               left, right, node_leaf, sync, product):
    node_rate, factor = leaf_factors(V, state_leaf, state_rate, left, right, node_leaf, sync, product)
    m, n = state_rate.shape
    for i in range(n):
        acc = 0.0
        for a in range(m):
            acc -= factor[a, state_leaf[i]] * V[i] * state_rate[a, i]
        out[i] = acc
    for e in range(e_src.shape[0]):
        s = e_src[e]
        out[e_dst[e]] += factor[e_act[e], state_leaf[s]] * V[s] * e_rate[e]


@njit(cache=True)
def fepa_rhs(y, out, args):
    (emb, rep, state_leaf, state_rate, e_src, e_dst, e_act, e_rate,
     left, right, node_leaf, sync, product) = args
    n = emb.shape[0]
    V = np.empty(n)
    for i in range(n):
        V[i] = y[emb[i]] if emb[i] >= 0 else 0.0
    F = np.empty(n)
    full_field(V, F, state_leaf, state_rate, e_src, e_dst, e_act, e_rate,
               left, right, node_leaf, sync, product)
    for k in range(rep.shape[0]):
        out[k] = F[rep[k]]


# Dormand-Prince 5(4) coefficients
A21 = 1 / 5
A31, A32 = 3 / 40, 9 / 40
A41, A42, A43 = 44 / 45, -56 / 15, 32 / 9
A51, A52, A53, A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
A61, A62, A63, A64, A65 = 9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656
B1, B3, B4, B5, B6 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
E1, E3, E4, E5, E6, E7 = (71 / 57600, -71 / 16695, 71 / 1920, -17253 / 339200,
                          22 / 525, -1 / 40)


def dopri5(y0, grid, rtol, atol, max_steps, args):
    """Adaptive Dormand-Prince integration reporting the state at each grid time.

    Steps are clipped so that every grid time is hit exactly.  Returns
    ``(states, status, t_fail, n_accepted, n_rejected)``.
    """
    n = y0.shape[0]
    out = np.zeros((grid.shape[0], n))
    out[0] = y0
    y = y0.copy()
    yt = np.empty(n)
    yn = np.empty(n)
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    k5 = np.empty(n)
    k6 = np.empty(n)
    k7 = np.empty(n)
    rhs(y, k1, args)
    t = grid[0]

    # initial step as in Hairer, Norsett & Wanner II.4
    d0 = 0.0
    d1 = 0.0
    for i in range(n):
        sc = atol + rtol * abs(y[i])
        d0 = max(d0, abs(y[i]) / sc)
        d1 = max(d1, abs(k1[i]) / sc)
    if d0 < 1e-5 or d1 < 1e-5:
        h = 1e-6
    else:
        h = 0.01 * d0 / d1
    for i in range(n):
        yt[i] = y[i] + h * k1[i]
    rhs(yt, k2, args)
    d2 = 0.0
    for i in range(n):
        sc = atol + rtol * abs(y[i])
        d2 = max(d2, abs(k2[i] - k1[i]) / sc / h)
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    h = min(100 * h, h1)
    if grid.shape[0] > 1:
        h = min(h, grid[-1] - grid[0])

    accepted = 0
    rejected = 0
    for g in range(1, grid.shape[0]):
        t_end = grid[g]
        while t < t_end:
            remaining = t_end - t
            # avoid leaving a sliver before the grid time
            hh = remaining if 1.01 * h >= remaining else h
            clipped = hh < h
            if hh <= 1e-14 * max(1.0, abs(t)):
                return out, UNDERFLOW, t, accepted, rejected
            for i in range(n):
                yt[i] = y[i] + hh * A21 * k1[i]
            rhs(yt, k2, args)
            for i in range(n):
                yt[i] = y[i] + hh * (A31 * k1[i] + A32 * k2[i])
            rhs(yt, k3, args)
            for i in range(n):
                yt[i] = y[i] + hh * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i])
            rhs(yt, k4, args)
            for i in range(n):
                yt[i] = y[i] + hh * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i])
            rhs(yt, k5, args)
            for i in range(n):
                yt[i] = y[i] + hh * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i]
                                     + A64 * k4[i] + A65 * k5[i])
            rhs(yt, k6, args)
            for i in range(n):
                yn[i] = y[i] + hh * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i]
                                     + B5 * k5[i] + B6 * k6[i])
            rhs(yn, k7, args)
            err = 0.0
            finite = True
            for i in range(n):
                if not np.isfinite(yn[i]):
                    finite = False
                sc = atol + rtol * max(abs(y[i]), abs(yn[i]))
                e = hh * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i]
                          + E6 * k6[i] + E7 * k7[i]) / sc
                err = max(err, abs(e))
            if accepted + rejected > max_steps:
                return out, MAX_STEPS, t, accepted, rejected
            if not finite or not np.isfinite(err):
                if hh < 1e-12:
                    return out, NONFINITE, t, accepted, rejected
                h = 0.1 * hh
                rejected += 1
                continue
            if err <= 1.0:
                accepted += 1
                t = t_end if hh == remaining else t + hh
                for i in range(n):
                    y[i] = yn[i]
                    k1[i] = k7[i]
                fac = 10.0 if err == 0.0 else min(10.0, max(0.2, 0.9 * err ** -0.2))
                if clipped:
                    h = max(h, hh * fac)
                else:
                    h = hh * fac
            else:
                rejected += 1
                h = hh * max(0.2, 0.9 * err ** -0.2)
        for i in range(n):
            out[g, i] = y[i]
    return out, OK, t, accepted, rejected


def rk4(y0, grid, h, args):
    """Classical fourth-order Runge-Kutta with fixed step, substepping each grid interval."""
    n = y0.shape[0]
    out = np.zeros((grid.shape[0], n))
    out[0] = y0
    y = y0.copy()
    yt = np.empty(n)
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    for g in range(1, grid.shape[0]):
        span = grid[g] - grid[g - 1]
        nsub = max(1, int(np.ceil(span / h - 1e-9)))
        hh = span / nsub
        for _ in range(nsub):
            rhs(y, k1, args)
            for i in range(n):
                yt[i] = y[i] + 0.5 * hh * k1[i]
            rhs(yt, k2, args)
            for i in range(n):
                yt[i] = y[i] + 0.5 * hh * k2[i]
            rhs(yt, k3, args)
            for i in range(n):
                yt[i] = y[i] + hh * k3[i]
            rhs(yt, k4, args)
            for i in range(n):
                y[i] = y[i] + hh / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        for i in range(n):
            if not np.isfinite(y[i]):
                return out, NONFINITE, grid[g]
            out[g, i] = y[i]
    return out, OK, grid[-1]


rhs = fepa_rhs
dopri5_jit = njit(cache=True)(dopri5)
rk4_jit = njit(cache=True)(rk4)


def with_rhs(stepper, func):
    """Uncompiled copy of ``stepper`` whose global ``rhs`` is ``func``."""
    scope = dict(globals(), rhs=func)
    return types.FunctionType(stepper.__code__, scope, stepper.__name__, stepper.__defaults__)
