"""Two-skill planted environment: oracle SFT + GRPO router, full composition vs top-1 on held-out prompts."""
import argparse

import numpy as np

from routed_steering import router as R
from routed_steering import training as TR


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--rl-steps", type=int, default=100)
    args = ap.parse_args()
    rc = R.RouterConfig()
    for seed in range(args.seeds):
        be, U, insts = TR.planted_pairs(seed=seed, n_prompts=128)
        train, test = insts[:64], insts[64:]
        labels, stats = TR.build_oracle_dataset(train, be, U)
        by_seed = {x.seed: x for x in train}
        H = be.prompt_hidden([by_seed[lab.instance_id] for lab in labels])
        sft, _ = TR.sft_train(R.RouterParams.init(16, 6, rc, seed), H, labels, TR.SFTConfig(), rc)
        rl, _ = TR.grpo_train(sft, be, U, train, TR.GRPOConfig(seed=seed), rc, steps=args.rl_steps)
        for name, params in (("sft-only", sft), ("sft+rl", rl)):
            P, W, A = TR.route_batch(params, be.prompt_hidden(test), rc)
            full = top = 0
            for x, p, w, a in zip(test, P, W, A):
                dec = R.RoutingDecision(p, w, a)
                full += be.verify(be.greedy(x, R.compose(dec, U)), x)
                top += be.verify(be.greedy(x, R.compose(R.top1_only(dec), U)), x)
            print(f"seed {seed} {name:8s} full {full / len(test):.3f} top-1 {top / len(test):.3f} "
                  f"(oracle labelled {stats['labelled']}/{stats['instances']})")
        print("  mean applied strength per kind:")
        for kind in (0, 1):
            rows = [x for x in test if x.kind == kind]
            P, W, A = TR.route_batch(rl, be.prompt_hidden(rows), rc)
            print(f"  kind {kind}: {np.array2string((W * A).mean(axis=0), precision=2)}")


if __name__ == "__main__":
    main()
