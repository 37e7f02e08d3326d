"""Print per-component finite-difference errors for the 64-bit gradient suite."""

import argparse

from grurec.gradcheck import TOLERANCE, run_suite


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--trials", type=int, default=10)
    args = ap.parse_args()
    for r in run_suite(seed=args.seed, trials=args.trials, model_trials=3):
        print(f"{r.component:16s} {r.max_rel_error:.2e} {'ok' if r.passed else 'FAIL'} ({r.tensors} tensors, {r.seconds:.2f} s)")
    print(f"tolerance {TOLERANCE:g}")


if __name__ == "__main__":
    main()
