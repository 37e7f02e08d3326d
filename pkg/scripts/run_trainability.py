"""Train the default-width model on the synthetic 8-class set and time it."""

import argparse
import time

from grurec.data import synth_generate
from grurec.model import ModelConfig, build_model, parameter_count
from grurec.tensor import SeededRng
from grurec.train import TrainConfig, evaluate, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args()

    tr, te = synth_generate(8, 20, 20, 6, SeededRng(0))
    cfg = ModelConfig(6, 8)
    model = build_model(cfg, SeededRng(1), labels=[f"g{k}" for k in range(8)])
    print(f"parameters: {parameter_count(cfg):,}")
    t0 = time.perf_counter()
    model, history = train(model, tr, None, TrainConfig(max_epochs=args.epochs, patience=args.epochs, seed=args.seed),
                           on_epoch=lambda r: print(f"epoch {r.epoch:3d} loss {r.train_loss:.4f} val {r.val_acc:.3f}", flush=True))
    minutes = (time.perf_counter() - t0) / 60
    print(f"test accuracy {evaluate(model, te).accuracy:.4f} in {minutes:.2f} min")


if __name__ == "__main__":
    main()
