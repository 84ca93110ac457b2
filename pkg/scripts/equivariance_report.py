"""Run the full symmetry suite in both precisions and print a report.

Checks the encoder under random rotations, reflections and
translations, the relation/scaling primitives for every channel count,
and the bitwise pose-invariance of the readout.  Exits nonzero if any
check misses its tolerance.

    python3 scripts/equivariance_report.py --trials 100
"""

import argparse

from hemenet.verify import run_all


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ok = True
    for dtype in ("float64", "float32"):
        for rep in run_all(trials=args.trials, seed=args.seed, dtype=dtype):
            ok &= rep.ok
            for line in rep.lines():
                print(line)
    return 0 if ok else 1


if __name__ == "__main__":
    raise SystemExit(main())
