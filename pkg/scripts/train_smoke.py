"""Short training run that prints the smoothed loss curve and held-out metrics."""

import argparse

import numpy as np

from cambdepth.data import synth_dataset
from cambdepth.loss import Ablation, LossConfig
from cambdepth.network import ModelConfig
from cambdepth.train import TrainConfig, evaluate_model, smoothed, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=50)
    ap.add_argument("--n-train", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--every", type=int, default=10, help="print interval")
    args = ap.parse_args()

    samples = synth_dataset(args.n_train, seed=0)
    params, _, history = train(samples, ModelConfig(), LossConfig(), Ablation(),
                               TrainConfig(steps=args.steps, seed=args.seed))
    curve = smoothed([h["total_loss"] for h in history])
    for step in range(args.every, args.steps + 1, args.every):
        h = history[step - 1]
        print(f"step {step:4d}  smoothed {curve[step - 1]:8.4f}  lambda {h['lambda']:.4f}  "
              f"depth {h['depth_loss']:.4f}  grad {h['grad_loss']:.4f}")
    _, overall = evaluate_model(params, synth_dataset(16, seed=100000))
    print("held-out:", {k: round(v, 4) for k, v in overall.to_dict().items()})
    print("decreased:", bool(np.asarray(curve)[-1] < curve[min(9, len(curve) - 1)]))


if __name__ == "__main__":
    main()
