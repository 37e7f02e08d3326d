"""Attention on/off across {3, 5} stacks x {1, 2} FC layers on the synthetic set."""

import argparse
import itertools
import time

from grurec.data import synth_generate
from grurec.model import DEFAULT_WIDTHS, THREE_STACK_WIDTHS, ModelConfig, build_model
from grurec.tensor import SeededRng
from grurec.train import TrainConfig, train

WIDTHS = {3: (64, 32, 32), 5: (64, 64, 32, 32, 32)}
FULL_WIDTHS = {3: THREE_STACK_WIDTHS, 5: DEFAULT_WIDTHS}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--full-width", action="store_true", help="use the 512..128 encoder widths (slow on CPU)")
    args = ap.parse_args()

    tr, te = synth_generate(8, 20, 20, 6, SeededRng(0))
    labels = [f"g{k}" for k in range(8)]
    print("stacks fc attention best_val epochs seconds")
    for stacks, fc, att in itertools.product((3, 5), (1, 2), (True, False)):
        widths = (FULL_WIDTHS if args.full_width else WIDTHS)[stacks]
        model = build_model(ModelConfig(6, 8, widths, att, fc), SeededRng(1), labels=labels)
        t0 = time.perf_counter()
        _, hist = train(model, tr, te, TrainConfig(batch_size=32, max_epochs=args.epochs, patience=20, seed=args.seed))
        print(stacks, fc, "on" if att else "off", f"{max(r.val_acc for r in hist):.4f}", len(hist),
              f"{time.perf_counter() - t0:.1f}", flush=True)


if __name__ == "__main__":
    main()
