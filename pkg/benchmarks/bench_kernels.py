"""Time the compiled and numpy framing kernels on STFT-shaped workloads.

    python benchmarks/bench_kernels.py --repeat 20
"""
import argparse
import timeit

import numpy as np

from latmask import kernels

CASES = [
    # (batch, length, frame size, hop)
    (1, 32000, 1024, 256),
    (8, 16000, 256, 64),
    (2, 16000, 4, 2),  # conv1d-style framing: many tiny frames
]


def bench(backend, fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=10)
    args = parser.parse_args(argv)
    backends = ["python"] + (["cython"] if kernels._compiled is not None else [])
    if len(backends) == 1:
        print("compiled kernels not built; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    print(f"{'case':>28} {'op':>12} " + " ".join(f"{b:>10}" for b in backends) + "    speedup")
    for batch, length, size, hop in CASES:
        x = rng.standard_normal((batch, length))
        frames = kernels.frame(x, size, hop, backend="python")
        t = frames.shape[-2]
        out_len = (t - 1) * hop + size
        for op, fn in (("frame", lambda b: kernels.frame(x, size, hop, backend=b)),
                       ("overlap_add", lambda b: kernels.overlap_add(frames, hop, out_len, backend=b))):
            ref = fn("python")
            times = []
            for b in backends:
                np.testing.assert_allclose(fn(b), ref, rtol=1e-12, atol=1e-12)
                times.append(bench(b, lambda: fn(b), args.repeat))
            speed = f"{times[0] / times[-1]:8.2f}x" if len(times) > 1 else ""
            label = f"{batch}x{length} n={size} h={hop}"
            print(f"{label:>28} {op:>12} " + " ".join(f"{v:8.3f}ms" for v in times) + f"  {speed}")


if __name__ == "__main__":
    main()
