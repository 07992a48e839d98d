"""Single-step adversarial training on synthetic data, epoch by epoch.

Trains a small CNN with FGSM examples (zero start, step = budget) and prints
the numbers that expose catastrophic overfitting: FGSM accuracy on training
data, accuracy under random-label FGSM, and PGD-10 accuracy on held-out data.
A collapse shows up as train FGSM accuracy climbing while PGD accuracy drops
towards zero. Synthetic blobs are far easier than natural images, so a short
run here usually stays robust; point ``--data-dir`` at CIFAR-10 binaries to
see the real effect.

    python3 demos/01_fgsm_training_curves.py --epochs 6
"""

import argparse
import time

from coforge.attacks import AttackSpec
from coforge.data import load_cifar10, subset, synthetic_dataset
from coforge.nn import ModelConfig, build_model
from coforge.training import TrainConfig, is_co, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=6)
    ap.add_argument("--eps", type=float, default=16, help="budget in pixel units (/255)")
    ap.add_argument("--data-dir", default=None, help="CIFAR-10 binary directory (default: synthetic data)")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if args.data_dir:
        train_set, test_set = load_cifar10(args.data_dir)
        train_set, test_set = subset(train_set, 5000, args.seed), test_set.head(500)
        shape = [3, 32, 32]
    else:
        shape = [3, 16, 16]
        train_set = synthetic_dataset(2000, seed=args.seed, shape=shape)
        test_set = synthetic_dataset(300, seed=args.seed, shape=shape, split="test")

    eps = args.eps / 255
    model = build_model(ModelConfig(widths=[16, 32], input_shape=shape), seed=args.seed)
    cfg = TrainConfig(
        epochs=args.epochs,
        lr=0.05,
        lr_decay_epochs=(args.epochs,),
        attack=AttackSpec.fgsm(eps),
        seed=args.seed,
        augment=bool(args.data_dir),
        train_eval_size=300,
        test_eval_size=300,
    )
    print(f"{len(train_set)} train / {len(test_set)} test images, eps = {args.eps:g}/255")
    print("epoch  loss   train-FGSM  RL-FGSM  clean  PGD-10  CO")

    t0 = time.perf_counter()

    def report(m, _model):
        print(f"{m.epoch:5d}  {m.train_loss:5.3f}  {m.train_fgsm_acc:10.3f}  {m.rl_fgsm_acc:7.3f}"
              f"  {m.test_clean_acc:5.3f}  {m.test_pgd_acc:6.3f}  {'yes' if is_co(m) else '-'}")

    train(model, train_set, test_set, cfg, callback=report)
    print(f"done in {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
