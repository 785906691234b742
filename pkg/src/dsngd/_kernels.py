"""Compiled inner loops for SGD and DSNGD.

Each kernel applies a chunk of updates in place and returns
``(steps_applied, diverged, clamp_events)``.  They mirror
:func:`dsngd.optimizers.sgd_step` / :func:`dsngd.optimizers.dsngd_step`
step for step; the tests hold them to that.

Work per step is dense over the ``s x t`` parameter block, as in the
reference operations, so timing reflects the algorithms rather than
sparsity of the standard feature statistic.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def _softmax_q(alpha, beta, S, T, x, y, out):
    s, t = beta.shape
    a = alpha.shape[0]
    mx = -np.inf
    for k in range(s):
        v = 0.0
        for i in range(a):
            v += S[k, i] * alpha[i]
        for j in range(t):
            v += beta[k, j] * T[x, j]
        out[k] = v
        if v > mx:
            mx = v
    tot = 0.0
    for k in range(s):
        out[k] = np.exp(out[k] - mx)
        tot += out[k]
    for k in range(s):
        out[k] = -out[k] / tot
    out[y] += 1.0


@njit(cache=True)
def _bad(v, guard):
    return not (abs(v) <= guard)


@njit(cache=True)
def sgd_chunk(alpha, beta, S, T, xs, ys, gammas, guard):
    s, t = beta.shape
    a = alpha.shape[0]
    q = np.empty(s)
    for n in range(xs.shape[0]):
        x = xs[n]
        g = gammas[n]
        _softmax_q(alpha, beta, S, T, x, ys[n], q)
        bad = False
        for i in range(a):
            acc = 0.0
            for k in range(s):
                acc += S[k, i] * q[k]
            alpha[i] += g * acc
            bad |= _bad(alpha[i], guard)
        for k in range(s):
            gq = g * q[k]
            for j in range(t):
                beta[k, j] += gq * T[x, j]
                bad |= _bad(beta[k, j], guard)
        if bad:
            return n + 1, True, 0
    return xs.shape[0], False, 0


@njit(cache=True)
def dsngd_chunk(alpha, beta, S, T, sum_a, sum_b, count, kappa, prior_a, prior_b,
                MinvT, onehot, xs, ys, gammas, guard, eps):
    s, t = beta.shape
    a = alpha.shape[0]
    q = np.empty(s)
    pi = np.empty(s)
    d = np.empty(s)
    theta = np.empty(t)
    clamps = 0
    for n in range(xs.shape[0]):
        x = xs[n]
        y = ys[n]
        g = gammas[n]

        # running dual estimate, including this sample
        for i in range(a):
            sum_a[i] += S[y, i]
        for j in range(t):
            sum_b[y, j] += T[x, j]
        count[0] += 1.0
        w = 1.0 / (kappa + count[0])

        if onehot:
            for k in range(s):
                pi[k] = (kappa * prior_a[k] + sum_a[k]) * w
        else:
            last = 0.0
            for k in range(s - 1):
                acc = 0.0
                for i in range(a):
                    acc += MinvT[i, k] * ((kappa * prior_a[i] + sum_a[i]) * w - S[s - 1, i])
                pi[k] = acc
                last += acc
            pi[s - 1] = 1.0 - last
        hit = 0
        for k in range(s):
            if not (pi[k] >= eps):
                pi[k] = eps
                hit += 1
            elif pi[k] > 1.0 - eps:
                pi[k] = 1.0 - eps
                hit += 1
        if hit > 0 and not onehot:
            tot = 0.0
            for k in range(s):
                tot += pi[k]
            for k in range(s):
                pi[k] /= tot
        clamps += hit

        _softmax_q(alpha, beta, S, T, x, y, q)

        bad = False
        for k in range(s):
            inv_pi = 1.0 / pi[k]
            tot = 0.0
            for j in range(t):
                th = (kappa * prior_b[k, j] + sum_b[k, j]) * w * inv_pi
                if not (th >= eps):
                    th = eps
                    clamps += 1
                elif th > 1.0 - eps:
                    th = 1.0 - eps
                    clamps += 1
                theta[j] = th
                tot += th
            rest = 1.0 - tot
            if rest < eps:
                scale = (1.0 - eps) / tot
                tot = 0.0
                for j in range(t):
                    theta[j] *= scale
                    tot += theta[j]
                rest = 1.0 - tot
                clamps += 1
            # categorical score in expectation coordinates, then d_k and beta update
            coef = g * q[k] * inv_pi
            if x < t:
                sx = 1.0 / theta[x]
                dot = theta[x] * sx
                for j in range(t):
                    beta[k, j] += coef * (sx if j == x else 0.0)
            else:
                sr = -1.0 / rest
                dot = tot * sr
                for j in range(t):
                    beta[k, j] += coef * sr
            for j in range(t):
                bad |= _bad(beta[k, j], guard)
            d[k] = (1.0 - dot) * inv_pi

        if onehot:
            for k in range(s):
                alpha[k] += g * d[k] * q[k]
                bad |= _bad(alpha[k], guard)
        else:
            v_last = d[s - 1] * q[s - 1]
            for i in range(a):
                acc = 0.0
                for k in range(s - 1):
                    acc += MinvT[i, k] * (d[k] * q[k] - v_last)
                alpha[i] += g * acc
                bad |= _bad(alpha[i], guard)
        if bad:
            return n + 1, True, clamps
    return xs.shape[0], False, clamps
