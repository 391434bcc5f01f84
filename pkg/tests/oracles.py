"""Independent reference implementations used by the tests.

Everything here is written as plain Python loops or through a different library
path than the package, so agreement is meaningful.
"""
import itertools
import math
from functools import lru_cache

import numpy as np
from scipy import integrate, special


def softmax_attention(q, k, v):
    q, k, v = (np.asarray(x, dtype=np.float64) for x in (q, k, v))
    d = q.shape[1]
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        logits = [sum(q[i, c] * k[j, c] for c in range(d)) / math.sqrt(d) for j in range(k.shape[0])]
        top = max(logits)
        w = [math.exp(x - top) for x in logits]
        total = sum(w)
        for j in range(k.shape[0]):
            for c in range(v.shape[1]):
                out[i, c] += w[j] / total * v[j, c]
    return out


def mix(a, b, alpha):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return [[(1 - alpha) * a[r, c] + alpha * b[r, c] for c in range(a.shape[1])] for r in range(a.shape[0])]


def interp_attention(q, ks, kt, vs, vt, alpha):
    return softmax_attention(q, mix(ks, kt, alpha), mix(vs, vt, alpha))


def aid_inner(q, ks, kt, ki, vs, vt, vi, alpha):
    k = mix(ks, kt, alpha) + np.asarray(ki, dtype=np.float64).tolist()
    v = mix(vs, vt, alpha) + np.asarray(vi, dtype=np.float64).tolist()
    return softmax_attention(q, k, v)


def aid_outer(q, ks, kt, ki, vs, vt, vi, alpha):
    src = softmax_attention(q, np.concatenate([ks, ki]), np.concatenate([vs, vi]))
    tgt = softmax_attention(q, np.concatenate([kt, ki]), np.concatenate([vt, vi]))
    return (1 - alpha) * src + alpha * tgt


def block_permute(k, perm, n, side):
    """Row r of the output is the row of ``k`` at the same offset inside patch perm[p]."""
    per = -(-n // side)
    out = np.array(k, copy=True)
    for x in range(n):
        for y in range(n):
            for z in range(n):
                p = ((x // side) * per + y // side) * per + z // side
                q = perm[p]
                qx, qy, qz = q // (per * per), (q // per) % per, q % per
                sx = qx * side + x % side
                sy = qy * side + y % side
                sz = qz * side + z % side
                out[(x * n + y) * n + z] = k[(sx * n + sy) * n + sz]
    return out


def fused_structure(q, ks, vs, kt, vt, ki, vi, alpha, perm, n, side):
    return aid_outer(q, ks, block_permute(kt, perm, n, side), ki, vs, block_permute(vt, perm, n, side), vi, alpha)


def _cos(a, b):
    dot = sum(float(x) * float(y) for x, y in zip(a, b))
    na = math.sqrt(sum(float(x) ** 2 for x in a))
    nb = math.sqrt(sum(float(y) ** 2 for y in b))
    return dot / (na * nb)


def texture_match(ki, ks, kt):
    m, n = [], []
    for row in ki:
        for bank, out in ((ks, m), (kt, n)):
            best, arg = -math.inf, 0
            for j, cand in enumerate(bank):
                c = _cos(row, cand)
                if c > best:
                    best, arg = c, j
            out.append(arg)
    return m, n


def texture_fuse(ki, vi, m, n, ks, vs, kt, vt, alpha):
    outs = []
    for own_all, src, tgt in ((ki, ks, kt), (vi, vs, vt)):
        rows = []
        for r, own in enumerate(own_all):
            tilde = [(1 - alpha) * float(src[m[r]][c]) + alpha * float(tgt[n[r]][c]) + float(own[c])
                     for c in range(len(own))]
            mag = math.sqrt(sum(x * x for x in tilde))
            own_norm = math.sqrt(sum(float(x) ** 2 for x in own))
            rows.append([x * own_norm / mag for x in tilde])
        outs.append(np.array(rows))
    return outs


def best_permutation_value(sim):
    """Maximum of sum sim[k, pi(k)] over all permutations, exactly summed."""
    n = len(sim)
    return max(math.fsum(sim[k][p[k]] for k in range(n)) for p in itertools.permutations(range(n)))


def best_partial_injection(sim, admissible):
    """Maximum summed similarity over injective partial maps using admissible pairs only.

    Returns the chosen pairs; the caller sums them with fsum.
    """
    g, h = len(sim), len(sim[0])

    @lru_cache(maxsize=None)
    def solve(i, used):
        if i == g:
            return 0.0, ()
        best = solve(i + 1, used)
        for j in range(h):
            if admissible[i][j] and not used >> j & 1:
                val, pairs = solve(i + 1, used | 1 << j)
                cand = (val + sim[i][j], ((i, j),) + pairs)
                if cand[0] > best[0]:
                    best = cand
        return best

    return solve(0, 0)[1]


def beta_quantile_quadrature(p, a, b, tol=1e-12):
    """Inverse CDF by bisection on a numerically integrated density."""
    norm = special.beta(a, b)

    def cdf(x):
        return integrate.quad(lambda t: t ** (a - 1) * (1 - t) ** (b - 1), 0.0, x, epsabs=1e-14, epsrel=1e-12)[0] / norm

    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def mmd2_two_samples(x, y):
    """Unbiased MMD^2 with (a.b/d + 1)^3 written out for two samples per side."""
    d = len(x[0])

    def k(a, b):
        return (sum(p * q for p, q in zip(a, b)) / d + 1.0) ** 3

    return (2 * k(x[0], x[1])) / 2 + (2 * k(y[0], y[1])) / 2 - 2 * (
        k(x[0], y[0]) + k(x[0], y[1]) + k(x[1], y[0]) + k(x[1], y[1])) / 4


def random_attention_case(rng, n_ext=None, n_own=None, n_q=None, d=None):
    """Random small single-head instance: q, source/target/own keys and values."""
    d = d or int(rng.integers(2, 6))
    n_ext = n_ext or int(rng.integers(1, 7))
    n_own = n_own or int(rng.integers(1, 7))
    n_q = n_q or int(rng.integers(1, 6))

    def f(n):
        return rng.normal(size=(n, d)).astype(np.float32)

    return dict(q=f(n_q), ks=f(n_ext), kt=f(n_ext), ki=f(n_own), vs=f(n_ext), vt=f(n_ext), vi=f(n_own))
