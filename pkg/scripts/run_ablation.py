"""Train the default model and each ablation under one seed and budget, then tabulate.

    python3 scripts/run_ablation.py --steps 300 --out ablation.csv
"""

import argparse
import time

from cambdepth.data import synth_dataset
from cambdepth.loss import Ablation, LossConfig
from cambdepth.metrics import HEADERS
from cambdepth.network import ModelConfig
from cambdepth.train import TrainConfig, evaluate_model, smoothed, train

VARIANTS = {
    "full": Ablation(),
    "no_camb": Ablation(no_camb=True),
    "no_grad_loss": Ablation(no_grad_loss=True),
    "no_diag": Ablation(no_diag=True),
    "no_ssim_weight": Ablation(no_ssim_weight=True),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-train", type=int, default=64)
    ap.add_argument("--n-eval", type=int, default=16)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--only", nargs="*", choices=list(VARIANTS), help="subset of variants")
    ap.add_argument("--out", help="write the table as CSV")
    args = ap.parse_args()

    train_set = synth_dataset(args.n_train, seed=0, height=args.size, width=args.size)
    eval_set = synth_dataset(args.n_eval, seed=100000, height=args.size, width=args.size)
    rows = []
    for name in args.only or VARIANTS:
        toggles = VARIANTS[name]
        model_cfg = ModelConfig(use_camb=not toggles.no_camb)
        start = time.perf_counter()
        params, _, history = train(train_set, model_cfg, LossConfig(), toggles,
                                   TrainConfig(steps=args.steps, seed=args.seed))
        _, overall = evaluate_model(params, eval_set)
        loss = smoothed([h["total_loss"] for h in history])[-1]
        rows.append((name, overall, loss))
        print(f"{name:<15s} {overall.format_row(None, '  ')}  loss {loss:.4f}  "
              f"({time.perf_counter() - start:.0f}s)", flush=True)

    header = ",".join(("variant",) + HEADERS + ("n_valid", "final_smoothed_loss"))
    lines = [header] + [f"{name},{r.format_row(None)},{loss:.6f}" for name, r, loss in rows]
    print("\n".join(lines))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
