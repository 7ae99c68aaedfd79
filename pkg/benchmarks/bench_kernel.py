"""Compare the compiled ALU kernel with the pure-Python fallback.

Micro: calls per second of each kernel entry point on a fixed operand stream.
End to end: wall time of a long native guest run with each backend selected
through DBISHIELD_PURE in a child process.

    python benchmarks/bench_kernel.py [--repeat N]
"""

import argparse
import os
import random
import subprocess
import sys
import time

from dbishield.kernel import _pykernel

try:
    from dbishield.kernel import _ckernel
except ImportError:
    _ckernel = None

E2E = """
import time
from dbishield import corpus
from dbishield.vm.reference import run_reference
img = corpus.load("smc_fuzz", seed=7, rounds=3000)
t0 = time.perf_counter()
run_reference(img)
print(time.perf_counter() - t0)
"""


def operands(n, seed=0):
    rng = random.Random(seed)
    ops = [5, 6, 7, 8, 9, 10, 11, 12, 13]
    out = []
    for _ in range(n):
        op = rng.choice(ops)
        a = rng.getrandbits(32)
        b = rng.randrange(40) if op >= 12 else rng.getrandbits(32) or 1
        out.append((op, a, b))
    return out


def micro(mod, stream, repeat):
    alu, add, sub = mod.alu, mod.flags_add, mod.flags_sub
    best = {}
    for name, fn in (("alu", lambda: [alu(o, a, b) for o, a, b in stream]),
                     ("flags_add", lambda: [add(a, b) for _, a, b in stream]),
                     ("flags_sub", lambda: [sub(a, b) for _, a, b in stream])):
        times = []
        for _ in range(repeat):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        best[name] = len(stream) / min(times)
    return best


def end_to_end(pure, repeat):
    env = dict(os.environ)
    env.pop("DBISHIELD_PURE", None)
    if pure:
        env["DBISHIELD_PURE"] = "1"
    runs = [float(subprocess.run([sys.executable, "-c", E2E], env=env, check=True,
                                 capture_output=True, text=True).stdout)
            for _ in range(repeat)]
    return min(runs)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--n", type=int, default=200_000)
    args = ap.parse_args()

    stream = operands(args.n)
    if _ckernel is not None:
        for o, a, b in stream[:5000]:
            assert _ckernel.alu(o, a, b) == _pykernel.alu(o, a, b)
    py = micro(_pykernel, stream, args.repeat)
    print(f"{'kernel':<10} {'python Mcall/s':>15} {'cython Mcall/s':>15} {'speedup':>8}")
    if _ckernel is None:
        for k, v in py.items():
            print(f"{k:<10} {v / 1e6:15.2f} {'n/a':>15} {'n/a':>8}")
        print("compiled kernel not built; end-to-end comparison skipped")
        return
    cy = micro(_ckernel, stream, args.repeat)
    for k in py:
        print(f"{k:<10} {py[k] / 1e6:15.2f} {cy[k] / 1e6:15.2f} {cy[k] / py[k]:7.2f}x")
    tp = end_to_end(True, max(1, args.repeat // 2))
    tc = end_to_end(False, max(1, args.repeat // 2))
    print(f"\nend to end (native smc_fuzz, 3000 rounds): python {tp:.3f}s  "
          f"cython {tc:.3f}s  speedup {tp / tc:.2f}x")


if __name__ == "__main__":
    main()
