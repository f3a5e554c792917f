"""Compare the numba and numpy kernel implementations.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel is run on representative inputs with both backends; the script
prints the median wall time per call and the max absolute difference
between the two outputs.
"""

import argparse
import time

import numpy as np

from edonet import _kernels as K
from edonet import clothsim
from edonet.graphrep import grid_graph, neighbor_table


def _time(fn, repeat):
    fn()  # warm-up (numba compile on first call)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return float(np.median(times))


def edge_case(rng, batch=8, hidden=32):
    nt = neighbor_table(grid_graph(8, 8))
    n = 64 * batch
    off = np.repeat(np.arange(batch) * 64, len(nt.dst))
    dst = np.tile(nt.dst, batch) + off
    src = np.tile(nt.src, batch) + off
    P, Q = rng.normal(size=(n, hidden)), rng.normal(size=(n, hidden))
    R = rng.normal(size=(len(dst), hidden))
    return P, Q, R, dst, src, dst.copy(), n


def sim_case(params=clothsim.PhysicalParams(28.0, 2.51), n_steps=2000):
    cfg = clothsim.SimConfig()
    state = clothsim.make_cloth(16, 16, cfg.spacing * 7 / 15, params)
    a = clothsim._pack(state, None, cfg.gravity)
    args = (state.spring_i, state.spring_j, state.rest, state.spring_constants(), a["mass"], a["ext"],
            a["gravity"], a["cyl"], a["table"], a["sphere"], a["free"], cfg.dt, cfg.damping, n_steps, 0.0, 20)
    return a["x"], a["v"], args


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    if K.numba_impl is None:
        raise SystemExit("numba is not installed")
    rng = np.random.default_rng(0)
    rows = []

    P, Q, R, dst, src, seg, n = edge_case(rng)
    outs = {}
    for impl in (K.numpy_impl, K.numba_impl):
        t = _time(lambda: impl.edge_relu_sum(P, Q, R, dst, src, seg, n), args.repeat)
        outs[impl.name] = impl.edge_relu_sum(P, Q, R, dst, src, seg, n)[0]
        rows.append(("edge_relu_sum", impl.name, t))
    rows.append(("edge_relu_sum", "maxdiff", float(np.max(np.abs(outs["numpy"] - outs["numba"])))))

    S, mask = K.numpy_impl.edge_relu_sum(P, Q, R, dst, src, seg, n)
    dS = rng.normal(size=S.shape)
    for impl in (K.numpy_impl, K.numba_impl):
        t = _time(lambda: impl.edge_relu_sum_backward(dS, mask, dst, src, seg, n), args.repeat)
        outs[impl.name] = impl.edge_relu_sum_backward(dS, mask, dst, src, seg, n)[0]
        rows.append(("edge_relu_sum_backward", impl.name, t))
    rows.append(("edge_relu_sum_backward", "maxdiff", float(np.max(np.abs(outs["numpy"] - outs["numba"])))))

    for impl in (K.numpy_impl, K.numba_impl):
        x0, v0, sargs = sim_case()

        def run():
            x, v = x0.copy(), v0.copy()
            impl.simulate(x, v, x0, np.zeros_like(x0), 0, *sargs)
            return x

        t = _time(run, max(1, args.repeat // 2))
        outs[impl.name] = run()
        rows.append(("simulate(2000 steps, 16x16)", impl.name, t))
    rows.append(("simulate(2000 steps, 16x16)", "maxdiff", float(np.max(np.abs(outs["numpy"] - outs["numba"])))))

    print(f"{'kernel':32s} {'backend':8s} {'value':>12s}")
    for name, backend, val in rows:
        unit = "" if backend == "maxdiff" else " s"
        print(f"{name:32s} {backend:8s} {val:12.4g}{unit}")
    for name in dict.fromkeys(r[0] for r in rows):
        t = {b: v for k, b, v in rows if k == name}
        print(f"speedup {name}: {t['numpy'] / t['numba']:.1f}x")


if __name__ == "__main__":
    main()
