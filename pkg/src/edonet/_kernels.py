"""Hot inner loops, compiled with numba when available.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version with identical semantics. ``EDONET_NUMBA=0`` in the environment
forces the numpy path (read once, at import). Both implementations stay
importable as ``numba_impl`` / ``numpy_impl`` for tests and benchmarks.

Kernels
-------
scatter_add_rows(out, idx, src)
    out[idx[e]] += src[e] for every row e.
edge_relu_sum(P, Q, R, dst, src, seg, n_seg)
    S[seg[e]] += relu(P[dst[e]] + Q[src[e]] + R[e]); also returns the
    activation mask needed by the backward pass.
edge_relu_sum_backward(dS, mask, dst, src, seg, n_nodes)
    gradients of the above wrt P, Q and R.
simulate(...)
    semi-implicit Euler mass-spring integrator with penalty contacts,
    run for a fixed number of steps or until the force residual drops
    below a tolerance.
"""

import os
import types

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("EDONET_NUMBA", "1").strip() not in ("0", "false", "no")


# ---------------------------------------------------------------------------
# pure python/numpy bodies
# ---------------------------------------------------------------------------


def _scatter_add_rows_np(out, idx, src):
    np.add.at(out, idx, src)
    return out


def _edge_relu_sum_np(P, Q, R, dst, src, seg, n_seg):
    h = P[dst] + Q[src] + R
    mask = h > 0.0
    S = np.zeros((n_seg, P.shape[1]))
    np.add.at(S, seg, np.where(mask, h, 0.0))
    return S, mask


def _edge_relu_sum_backward_np(dS, mask, dst, src, seg, n_nodes):
    g = np.where(mask, dS[seg], 0.0)
    dP = np.zeros((n_nodes, dS.shape[1]))
    dQ = np.zeros((n_nodes, dS.shape[1]))
    np.add.at(dP, dst, g)
    np.add.at(dQ, src, g)
    return dP, dQ, g


def _static_forces_py(x, si, sj, rest, ks, mass, ext, gravity, cyl, table, sphere, f):
    """Velocity-independent forces (springs, gravity, loads, contacts) into ``f``.

    Written as scalar loops so numba can compile it verbatim; the numpy
    path uses ``_static_forces_vec`` instead.
    """
    n = x.shape[0]
    for i in range(n):
        for d in range(3):
            f[i, d] = ext[i, d] + mass[i] * gravity[d]
    for s in range(si.shape[0]):
        i = si[s]
        j = sj[s]
        dx = x[j, 0] - x[i, 0]
        dy = x[j, 1] - x[i, 1]
        dz = x[j, 2] - x[i, 2]
        length = np.sqrt(dx * dx + dy * dy + dz * dz)
        if length > 0.0:
            mag = ks[s] * (length - rest[s]) / length
            f[i, 0] += mag * dx
            f[i, 1] += mag * dy
            f[i, 2] += mag * dz
            f[j, 0] -= mag * dx
            f[j, 1] -= mag * dy
            f[j, 2] -= mag * dz
    # cylinder along the x axis: cyl = [on, cy, cz, radius, k]
    if cyl[0] > 0.0:
        for i in range(n):
            if int(sphere[0]) == i:
                continue
            dy = x[i, 1] - cyl[1]
            dz = x[i, 2] - cyl[2]
            r = np.sqrt(dy * dy + dz * dz)
            if r < cyl[3] and r > 0.0:
                mag = cyl[4] * (cyl[3] - r) / r
                f[i, 1] += mag * dy
                f[i, 2] += mag * dz
    # table plane z = height: table = [on, height, k]
    if table[0] > 0.0:
        for i in range(n):
            bottom = x[i, 2]
            if int(sphere[0]) == i:
                bottom = x[i, 2] - sphere[1]
            if bottom < table[1]:
                f[i, 2] += table[2] * (table[1] - bottom)
    # sphere particle vs cloth nodes: sphere = [index or -1, radius, k]
    k_idx = int(sphere[0])
    if k_idx >= 0:
        for i in range(n):
            if i == k_idx:
                continue
            dx = x[i, 0] - x[k_idx, 0]
            dy = x[i, 1] - x[k_idx, 1]
            dz = x[i, 2] - x[k_idx, 2]
            r = np.sqrt(dx * dx + dy * dy + dz * dz)
            if r < sphere[1] and r > 0.0:
                mag = sphere[2] * (sphere[1] - r) / r
                f[i, 0] += mag * dx
                f[i, 1] += mag * dy
                f[i, 2] += mag * dz
                f[k_idx, 0] -= mag * dx
                f[k_idx, 1] -= mag * dy
                f[k_idx, 2] -= mag * dz


def _residual_py(f, free):
    worst = 0.0
    for i in range(f.shape[0]):
        acc = 0.0
        for d in range(3):
            if free[i, d]:
                acc += f[i, d] * f[i, d]
        if acc > worst:
            worst = acc
    return np.sqrt(worst)


def _static_forces_vec(x, si, sj, rest, ks, mass, ext, gravity, cyl, table, sphere, f):
    f[:] = ext + mass[:, None] * gravity[None, :]
    d = x[sj] - x[si]
    length = np.sqrt(np.sum(d * d, axis=1))
    safe = np.where(length > 0.0, length, 1.0)
    mag = np.where(length > 0.0, ks * (length - rest) / safe, 0.0)
    fs = mag[:, None] * d
    np.add.at(f, si, fs)
    np.subtract.at(f, sj, fs)
    k_idx = int(sphere[0])
    cloth = np.ones(x.shape[0], dtype=bool)
    if k_idx >= 0:
        cloth[k_idx] = False
    if cyl[0] > 0.0:
        dy = x[:, 1] - cyl[1]
        dz = x[:, 2] - cyl[2]
        r = np.sqrt(dy * dy + dz * dz)
        hit = cloth & (r < cyl[3]) & (r > 0.0)
        mag = np.where(hit, cyl[4] * (cyl[3] - r) / np.where(r > 0.0, r, 1.0), 0.0)
        f[:, 1] += mag * dy
        f[:, 2] += mag * dz
    if table[0] > 0.0:
        bottom = x[:, 2].copy()
        if k_idx >= 0:
            bottom[k_idx] -= sphere[1]
        f[:, 2] += np.where(bottom < table[1], table[2] * (table[1] - bottom), 0.0)
    if k_idx >= 0:
        d = x - x[k_idx]
        r = np.sqrt(np.sum(d * d, axis=1))
        hit = cloth & (r < sphere[1]) & (r > 0.0)
        mag = np.where(hit, sphere[2] * (sphere[1] - r) / np.where(r > 0.0, r, 1.0), 0.0)
        fc = mag[:, None] * d
        f += fc
        f[k_idx] -= fc.sum(axis=0)


def _simulate_py(x, v, x0, vel, step0, si, sj, rest, ks, mass, ext, gravity, cyl, table, sphere,
                 free, dt, damping, n_steps, tol, check_every):
    """Advance ``x, v`` in place.

    Held coordinates (``free[i, d]`` false) follow ``x0 + vel * t`` with
    ``t = step * dt``. With ``tol > 0`` the run stops early once the
    static-force residual on free coordinates falls below ``tol``; the
    residual is checked before the first step and every ``check_every``
    steps. Returns ``(steps_taken, residual)``; residual is -1 when never
    evaluated, and NaN signals divergence.
    """
    f = np.zeros_like(x)
    residual = -1.0
    taken = 0
    inv_m = 1.0 / mass[:, None]
    for s in range(n_steps + 1):
        if tol > 0.0 and s % check_every == 0:
            _static_forces_vec(x, si, sj, rest, ks, mass, ext, gravity, cyl, table, sphere, f)
            residual = float(np.sqrt(np.max(np.sum(np.where(free, f, 0.0) ** 2, axis=1))))
            if not np.isfinite(residual):
                return taken, np.nan
            if residual < tol:
                return taken, residual
        if s == n_steps:
            break
        _static_forces_vec(x, si, sj, rest, ks, mass, ext, gravity, cyl, table, sphere, f)
        t = (step0 + s + 1) * dt
        v_new = v + dt * (f - damping * v) * inv_m
        v[:] = np.where(free, v_new, 0.0)
        x[:] = np.where(free, x + dt * v, x0 + vel * t)
        taken += 1
        if not np.all(np.isfinite(x)):
            return taken, np.nan
    return taken, residual


def _static_forces_wrapper(static_forces):
    def forces(x, si, sj, rest, ks, mass, ext, gravity, cyl, table, sphere):
        f = np.zeros((x.shape[0], 3))
        static_forces(x, si, sj, rest, ks, mass, ext, gravity, cyl, table, sphere, f)
        return f

    return forces


numpy_impl = types.SimpleNamespace(
    name="numpy",
    scatter_add_rows=_scatter_add_rows_np,
    edge_relu_sum=_edge_relu_sum_np,
    edge_relu_sum_backward=_edge_relu_sum_backward_np,
    static_forces=_static_forces_wrapper(_static_forces_vec),
    simulate=_simulate_py,
)


# ---------------------------------------------------------------------------
# numba versions
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _scatter_add_rows_nb(out, idx, src):
        for e in range(idx.shape[0]):
            r = idx[e]
            for c in range(src.shape[1]):
                out[r, c] += src[e, c]
        return out

    @njit(cache=True)
    def _edge_relu_sum_nb(P, Q, R, dst, src, seg, n_seg):
        H = P.shape[1]
        S = np.zeros((n_seg, H))
        mask = np.zeros((dst.shape[0], H), dtype=np.bool_)
        for e in range(dst.shape[0]):
            a = dst[e]
            b = src[e]
            k = seg[e]
            for c in range(H):
                h = P[a, c] + Q[b, c] + R[e, c]
                if h > 0.0:
                    mask[e, c] = True
                    S[k, c] += h
        return S, mask

    @njit(cache=True)
    def _edge_relu_sum_backward_nb(dS, mask, dst, src, seg, n_nodes):
        H = dS.shape[1]
        E = dst.shape[0]
        dP = np.zeros((n_nodes, H))
        dQ = np.zeros((n_nodes, H))
        g = np.zeros((E, H))
        for e in range(E):
            a = dst[e]
            b = src[e]
            k = seg[e]
            for c in range(H):
                if mask[e, c]:
                    val = dS[k, c]
                    g[e, c] = val
                    dP[a, c] += val
                    dQ[b, c] += val
        return dP, dQ, g

    _static_forces_nb = njit(cache=True)(_static_forces_py)
    _residual_nb = njit(cache=True)(_residual_py)

    @njit(cache=True)
    def _simulate_nb(x, v, x0, vel, step0, si, sj, rest, ks, mass, ext, gravity, cyl, table, sphere,
                     free, dt, damping, n_steps, tol, check_every):
        n = x.shape[0]
        f = np.zeros((n, 3))
        residual = -1.0
        taken = 0
        for s in range(n_steps + 1):
            if tol > 0.0 and s % check_every == 0:
                _static_forces_nb(x, si, sj, rest, ks, mass, ext, gravity, cyl, table, sphere, f)
                residual = _residual_nb(f, free)
                if not np.isfinite(residual):
                    return taken, np.nan
                if residual < tol:
                    return taken, residual
            if s == n_steps:
                break
            _static_forces_nb(x, si, sj, rest, ks, mass, ext, gravity, cyl, table, sphere, f)
            t = (step0 + s + 1) * dt
            for i in range(n):
                for d in range(3):
                    if free[i, d]:
                        v[i, d] += dt * (f[i, d] - damping * v[i, d]) / mass[i]
                        x[i, d] += dt * v[i, d]
                    else:
                        v[i, d] = 0.0
                        x[i, d] = x0[i, d] + vel[i, d] * t
                if not (np.isfinite(x[i, 0]) and np.isfinite(x[i, 1]) and np.isfinite(x[i, 2])):
                    return taken + 1, np.nan
            taken += 1
        return taken, residual

    numba_impl = types.SimpleNamespace(
        name="numba",
        scatter_add_rows=_scatter_add_rows_nb,
        edge_relu_sum=_edge_relu_sum_nb,
        edge_relu_sum_backward=_edge_relu_sum_backward_nb,
        static_forces=_static_forces_wrapper(_static_forces_nb),
        simulate=_simulate_nb,
    )
else:  # pragma: no cover
    numba_impl = None

active = numba_impl if USE_NUMBA else numpy_impl

scatter_add_rows = active.scatter_add_rows
edge_relu_sum = active.edge_relu_sum
edge_relu_sum_backward = active.edge_relu_sum_backward
static_forces = active.static_forces
simulate = active.simulate
