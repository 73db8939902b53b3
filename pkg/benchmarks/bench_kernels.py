"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--blocks 6] [--rx 400] [--repeat 3]

Both backends run in one process (the ``backend=`` argument picks the route),
and their outputs are compared before timings are reported.  Run with
GERT_DISABLE_NUMBA=1 to confirm the package works without numba at all; only
the numpy rows are printed then.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from gert import _jit
from gert.synthetic import manhattan_scene
from gert.tracer import TraceConfig, TraceEngine


def _best(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--blocks", type=int, default=6)
    ap.add_argument("--rx", type=int, default=400)
    ap.add_argument("--order", type=int, default=2)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    scene = manhattan_scene(blocks=args.blocks)
    size = args.blocks * 50.0
    rng = np.random.default_rng(args.seed)
    rx = np.column_stack([rng.uniform(0, size, args.rx), rng.uniform(0, size, args.rx),
                          np.full(args.rx, 1.5)])
    tx = np.array([size / 2 + 0.3, size / 2 + 0.7, 10.0])
    a = np.repeat(tx[None], len(rx), axis=0)

    backends = ["numba", "numpy"] if _jit.use_numba() else ["numpy"]
    engine = TraceEngine(scene, TraceConfig(args.order, True))
    accel = engine.accel
    if "numba" in backends:  # compile outside the timed region
        accel.segments_blocked(a[:2], rx[:2], backend="numba")
        engine.trace(tx, rx[:2], backend="numba")

    rows, results = [], {}
    for be in backends:
        t_occ, occ = _best(lambda: accel.segments_blocked(a, rx, backend=be), args.repeat)
        t_trace, batch = _best(lambda: engine.trace(tx, rx, backend=be), args.repeat)
        results[be] = (occ, batch)
        rows.append((be, t_occ, t_trace, len(batch.delay_s)))

    if len(results) == 2:
        (o1, b1), (o2, b2) = results["numba"], results["numpy"]
        assert np.array_equal(o1, o2), "occlusion results differ between backends"
        assert len(b1.delay_s) == len(b2.delay_s), "path counts differ between backends"
        np.testing.assert_allclose(b1.delay_s, b2.delay_s, rtol=1e-12)

    n_tri = len(accel.v0)
    print(f"scene: {args.blocks}x{args.blocks} blocks, {n_tri} triangles; {len(rx)} receivers, "
          f"order {args.order}")
    print(f"{'backend':<8} {'occlusion [ms]':>15} {'trace [ms]':>12} {'paths':>7}")
    for be, t_occ, t_trace, n in rows:
        print(f"{be:<8} {1e3 * t_occ:>15.2f} {1e3 * t_trace:>12.2f} {n:>7}")
    if len(rows) == 2:
        print(f"speedup  {rows[1][1] / rows[0][1]:>15.1f}x {rows[1][2] / rows[0][2]:>11.1f}x")


if __name__ == "__main__":
    main()
