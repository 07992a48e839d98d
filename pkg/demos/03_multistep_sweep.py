"""Does catastrophic overfitting need a single step? A small PGD-AT grid.

Trains one model per (iterations, step size) cell with multi-step PGD
adversarial training at a fixed budget and reports the lowest held-out PGD
accuracy over the second half of training. Large steps relative to the
budget are the cells that collapse on natural images; small steps with
several iterations stay robust. Cells are cached under ``--out`` so a rerun
only trains what is missing, and ``COFORGE_THREADS`` > 1 trains cells in
parallel processes.

    python3 demos/03_multistep_sweep.py --out runs/demo_sweep
"""

import argparse
import functools
import os

from coforge.attacks import AttackSpec
from coforge.data import synthetic_dataset
from coforge.diagnostics import co_sweep, write_sweep_csv
from coforge.nn import ModelConfig, build_model
from coforge.training import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/demo_sweep")
    ap.add_argument("--epochs", type=int, default=6)
    args = ap.parse_args()

    shape = [3, 16, 16]
    eps = 16 / 255
    iters, alphas = [1, 4], [4 / 255, 16 / 255]
    train_set = synthetic_dataset(1000, seed=0, shape=shape)
    test_set = synthetic_dataset(200, seed=0, shape=shape, split="test")
    factory = functools.partial(build_model, ModelConfig(widths=[8, 16], input_shape=shape), 0)
    base = TrainConfig(epochs=args.epochs, lr=0.05, lr_decay_epochs=(args.epochs,), attack=AttackSpec.pgd(eps),
                       augment=False, train_eval_size=100, test_eval_size=100)
    workers = int(os.environ.get("COFORGE_THREADS", "1"))

    cells = co_sweep(factory, train_set, test_set, base, iters, alphas, eps, cache_dir=args.out, workers=workers)
    print("min PGD-10 accuracy over the second half of training (eps 16/255)")
    print("iters  " + "  ".join(f"alpha {a * 255:4.1f}" for a in alphas))
    for i in iters:
        row = [c for c in cells if c.iters == i]
        print(f"{i:5d}  " + "  ".join(f"{c.min_robust_acc:10.3f}" if c.status == "ok" else f"{c.status:>10s}"
                                      for c in row))
    print("grid written to", write_sweep_csv(os.path.join(args.out, "grid.csv"), cells))


if __name__ == "__main__":
    main()
