"""GRPO from a random router on the single-primitive bandit; prints gate probabilities over training."""
import argparse

import numpy as np

from routed_steering import router as R
from routed_steering import training as TR


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--every", type=int, default=25)
    args = ap.parse_args()
    rc = R.RouterConfig()
    for seed in range(args.seeds):
        be, U, insts = TR.planted_bandit(seed=seed)
        trainer = TR.GRPOTrainer(R.RouterParams.init(16, 6, rc, seed), be, U, TR.GRPOConfig(seed=seed), rc,
                                 total_steps=args.steps)
        H = be.prompt_hidden(insts)
        rng = np.random.default_rng([seed, 7])
        order = []
        converged = None
        while trainer.step_index < args.steps:
            if not order:
                order = list(rng.permutation(len(insts)))
            batch, order = order[:32], order[32:]
            m = trainer.step([insts[i] for i in batch])
            p = TR.route_batch(trainer.params, H, rc)[0]
            if converged is None and p[:, 0].min() > rc.tau and p[:, 1:].max() < 0.5:
                converged = trainer.step_index
            if trainer.step_index % args.every == 0:
                print(f"seed {seed} step {trainer.step_index:4d} reward {m['mean_reward']:.2f} "
                      f"p = {np.array2string(p.mean(axis=0), precision=2)}")
        print(f"seed {seed}: converged at step {converged}")


if __name__ == "__main__":
    main()
