"""Compare the compiled and numpy convolution kernels.

Times ``im2col`` and ``col2im`` on the default model's layer shapes, then a
single-sample forward pass and a batch-64 training step, once per backend.

Usage::

    python benchmarks/bench_kernels.py --repeats 50
"""

from __future__ import annotations

import argparse
import logging
import time

import numpy as np

from cadnet.model import CADNet, ModelConfig, random_inputs
from cadnet.numerics import Tape, _pykernels, kernels

log = logging.getLogger("bench_kernels")


def backends() -> dict[str, object]:
    out = {"python": _pykernels}
    try:
        from cadnet.numerics import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        log.warning("compiled extension not built; timing the numpy fallback only")
    return out


def best_ms(fn, repeats: int) -> float:
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1000.0 * min(times)


def cases(repeats: int) -> dict[str, float]:
    cfg = ModelConfig()
    rng = np.random.default_rng(0)
    x = rng.random((64, cfg.S, cfg.S, cfg.C)).astype(np.float32)
    cols = kernels.im2col(x, 3, 1, 1)
    model = CADNet(cfg, seed=0)
    one = random_inputs(cfg, 1, seed=0, dtype=np.float32)
    batch = random_inputs(cfg, 64, seed=1, dtype=np.float32)

    def step() -> None:
        tape = Tape()
        trace = model.forward(tape, batch, model.noise(rng, 64))
        tape.backward(model.loss(tape, batch, trace))
        model.params.collect_grads()

    return {
        "im2col 64x13x13x8 k3": best_ms(lambda: kernels.im2col(x, 3, 1, 1), repeats),
        "col2im 64x13x13x8 k3": best_ms(lambda: kernels.col2im(cols, 64, cfg.S, cfg.S, cfg.C, 3, 1, 1), repeats),
        "forward, 1 sample": best_ms(lambda: model.forward(Tape(), one), repeats),
        "train step, batch 64": best_ms(step, max(3, repeats // 10)),
    }


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=50, help="timed repetitions per case (best is reported)")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    results: dict[str, dict[str, float]] = {}
    saved = kernels._impl
    try:
        for name, impl in backends().items():
            kernels._impl = impl
            results[name] = cases(args.repeats)
    finally:
        kernels._impl = saved

    names = list(results)
    print(f"{'case':<24}" + "".join(f"{n + ' ms':>14}" for n in names) + ("     speedup" if len(names) > 1 else ""))
    for case in results[names[0]]:
        row = f"{case:<24}" + "".join(f"{results[n][case]:>14.3f}" for n in names)
        if len(names) > 1:
            row += f"{results['python'][case] / results['cython'][case]:>11.2f}x"
        print(row)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
