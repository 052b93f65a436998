"""Train each adapter kind on several seeds and print split accuracies.

    python scripts/seed_sweep.py --seeds 0 1 2 --adapters none linear
"""

import argparse
import time

from emma import pipeline as P
from emma import world as W
from emma.config import parse_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--adapters", nargs="+", default=["none", "linear", "cross_attention"])
    args = ap.parse_args()
    print("seed,adapter,acc_ambiguous,acc_unambiguous,acc_all,train_seconds")
    for seed in args.seeds:
        cfg = parse_config(args.config, {"seed": seed})
        stack, _, _ = P.pretrain_encoders(cfg)
        wc = cfg.world()
        train = W.Dataset(wc, W.generate(wc, seed, 0, cfg.n_train))
        test = W.Dataset(wc, W.generate(wc, seed, cfg.n_train, cfg.n_test))
        for kind in args.adapters:
            start = time.perf_counter()
            ev = P.train_two_stage(cfg.replace(adapter=kind), train, test, stack).final
            took = time.perf_counter() - start
            print(f"{seed},{kind},{ev.acc_ambiguous:.4f},{ev.acc_unambiguous:.4f},{ev.acc_all:.4f},{took:.1f}", flush=True)


if __name__ == "__main__":
    main()
