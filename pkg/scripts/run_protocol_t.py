"""User-dependent T protocol on a synthetic 10-subject set, for several T."""

import argparse
import json

from grurec.cli import build_parser, run_protocol_t
from grurec.data import synth_generate
from grurec.tensor import SeededRng


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--T", type=int, nargs="+", default=[1, 2, 3, 4])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--hidden", default="64,64,32,32,32")
    args = ap.parse_args()

    samples, _ = synth_generate(8, 10, 0, 6, SeededRng(7), subjects=10)
    for T in args.T:
        flags = build_parser().parse_args(["protocol-t", "--data", "-", "--T", str(T), "--hidden", args.hidden,
                                           "--batch-size", "16", "--epochs", "150", "--patience", "40"])
        rep = run_protocol_t(samples, T, flags, args.seed)
        print(json.dumps({"T": T, "mean_accuracy": rep["mean_accuracy"],
                          "per_subject": [round(p["accuracy"], 4) for p in rep["participants"]]}), flush=True)


if __name__ == "__main__":
    main()
