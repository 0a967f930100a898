from contextlib import contextmanager

import numpy as np
import pytest


def star_polygon(rng, L=None, center=(32.0, 32.0), r_min=6.0, r_max=20.0):
    """Random positively oriented star-shaped polygon (simple by construction)."""
    L = L or int(rng.integers(6, 40))
    t = np.sort(rng.uniform(0, 2 * np.pi, L))
    t += np.arange(L) * 1e-3  # keep angles distinct
    r = rng.uniform(r_min, r_max, L)
    return np.stack([center[0] + r * np.cos(t), center[1] + r * np.sin(t)], axis=1)


def pnpoly_mask(c, U, V):
    """Brute-force point-in-polygon at every pixel center (even-odd rule)."""
    mask = np.zeros((V, U), dtype=bool)
    n = len(c)
    for v in range(V):
        for u in range(U):
            inside = False
            j = n - 1
            for i in range(n):
                ui, vi = c[i]
                uj, vj = c[j]
                if (vi > v) != (vj > v) and u < (uj - ui) * (v - vi) / (vj - vi) + ui:
                    inside = not inside
                j = i
            mask[v, u] = inside
    return mask


def smooth_grid(rng, U, V, n_modes=4, scale=1.0):
    """Smooth random field: a few low-frequency cosines."""
    uu, vv = np.meshgrid(np.arange(U), np.arange(V))
    g = np.zeros((V, U))
    for _ in range(n_modes):
        fu, fv = rng.uniform(0.02, 0.12, 2)
        ph = rng.uniform(0, 2 * np.pi)
        g += rng.normal() * np.cos(2 * np.pi * (fu * uu + fv * vv) + ph)
    return scale * g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _row_integrals(kappa):
    """R[j, k] = integral of the linear interpolant of row j from 0 to k."""
    mid = 0.5 * (kappa[:, 1:] + kappa[:, :-1])
    return np.concatenate([np.zeros((kappa.shape[0], 1)), np.cumsum(mid, axis=1)], axis=1)


def _antiderivative(kappa, R, q):
    """P(u, v) = integral of the bilinear kappa surface along u from 0 to u."""
    V, U = kappa.shape
    u = np.clip(q[:, 0], 0, U - 1)
    v = np.clip(q[:, 1], 0, V - 1)
    j = np.minimum(v.astype(int), V - 2)
    fv = v - j
    k = np.minimum(u.astype(int), U - 2)
    fu = u - k

    def row(jj):
        a, b = kappa[jj, k], kappa[jj, k + 1]
        return R[jj, k] + a * fu + 0.5 * (b - a) * fu ** 2

    return (1 - fv) * row(j) + fv * row(j + 1)


def _edge_integrals(kappa, R, a, b, n_gauss=64, splits=16):
    """Line integral of P dv along each edge a[i] -> b[i]."""
    x, w = np.polynomial.legendre.leggauss(n_gauss)
    t = np.concatenate([(x + 1) / 2 / splits + i / splits for i in range(splits)])
    wt = np.tile(w / 2 / splits, splits)
    q = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
    P = _antiderivative(kappa, R, q.reshape(-1, 2)).reshape(len(a), -1)
    return (P * wt).sum(axis=1) * (b[:, 1] - a[:, 1])


def green_balloon_energy(kappa, c, n_gauss=64, splits=16):
    """Smooth kappa mass enclosed by ``c``: the bilinear kappa surface
    integrated over the exact polygon, via the line integral of P dv."""
    R = _row_integrals(kappa)
    return float(_edge_integrals(kappa, R, c, np.roll(c, -1, axis=0), n_gauss, splits).sum())


def green_balloon_gradient(kappa, c, h):
    """Central differences of :func:`green_balloon_energy` w.r.t. every node.
    Moving node s only changes the edges (s-1, s) and (s, s+1), so only
    those two are re-integrated."""
    R = _row_integrals(kappa)
    prev = np.roll(c, 1, axis=0)
    nxt = np.roll(c, -1, axis=0)
    g = np.zeros_like(c, dtype=np.float64)
    for k in range(2):
        vals = []
        for sign in (1, -1):
            moved = c.copy()
            moved[:, k] += sign * h
            vals.append(_edge_integrals(kappa, R, prev, moved) + _edge_integrals(kappa, R, moved, nxt))
        g[:, k] = (vals[0] - vals[1]) / (2 * h)
    return g


def central_difference(f, c, h):
    g = np.zeros_like(c)
    for s in range(c.shape[0]):
        for k in range(2):
            cp, cm = c.copy(), c.copy()
            cp[s, k] += h
            cm[s, k] -= h
            g[s, k] = (f(cp) - f(cm)) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def activation_pattern(cache):
    """Every ReLU/pool switch of a ConvNet forward pass, flattened."""
    bits = [blk[2].ravel() for blk in cache["blocks"]]
    bits += [np.asarray(blk[3]).ravel() for blk in cache["blocks"] if blk[3] is not None]
    bits.append((cache["a1"] > 0).ravel())
    return np.concatenate(bits)


def backprop_check(net, params, patch, grads, n, rng, eps=1e-6):
    """Analytic vs central-difference gradients of ``probe_loss`` on ``n``
    random scalar parameters. Draws whose +-eps perturbation flips a ReLU or
    pooling switch are redrawn, since the loss is not differentiable there.
    Returns (relative errors, number of redraws)."""
    from dsac.predictor import probe_loss

    analytic = net.backward(params, patch, grads)
    names = sorted(params)
    sizes = np.array([params[k].size for k in names])
    errs, redraws = [], 0
    while len(errs) < n:
        k = names[rng.choice(len(names), p=sizes / sizes.sum())]
        i = int(rng.integers(params[k].size))
        vals = []
        patterns = []
        for sign in (1, -1):
            p = {key: v.copy() for key, v in params.items()}
            p[k].flat[i] += sign * eps
            maps, cache = net.forward_with_cache(p, patch)
            vals.append(probe_loss(maps, grads))
            patterns.append(activation_pattern(cache))
        if not np.array_equal(patterns[0], patterns[1]):
            redraws += 1
            continue
        fd = (vals[0] - vals[1]) / (2 * eps)
        a = float(analytic[k].flat[i])
        errs.append(abs(fd - a) / max(abs(a), abs(fd), 1e-8))
    return np.array(errs), redraws


# -- acceptance reporting -------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@contextmanager
def criterion(number, title):
    """Record one PASS/FAIL line for an acceptance criterion. The body may
    put a short summary of the measured values in ``info["detail"]``."""
    info = {"detail": ""}
    try:
        yield info
    except BaseException as exc:
        detail = info["detail"] or f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        line = f"[FAIL] criterion {number:>2}: {title} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        raise
    line = f"[PASS] criterion {number:>2}: {title} ({info['detail']})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
