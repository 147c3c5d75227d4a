#!/usr/bin/env python3
"""Central-difference check of the hand-written backward pass on a small net.

    python3 scripts/gradcheck.py --classes 3 --stage stage2
"""
import argparse

import numpy as np

from segblend.bindnet import BindNetParams, _forward, backward, objective


def relu_pattern(params, x):
    preds, cache = _forward(params, x)
    zs = [z for _, _, z in cache["enc"]] + [cache["fb_z"], preds.s_p]
    return np.concatenate([z.ravel() > 0 for z in zs])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--classes", type=int, default=3)
    ap.add_argument("--stage", choices=("stage1", "stage2", "plain"), default="stage1")
    ap.add_argument("--size", type=int, default=4)
    ap.add_argument("--step", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    n = args.classes
    params = BindNetParams.init(n, rng, channels=(4, 4, 4), fb_hidden=5)
    params.tensors["head_p_b"] += 0.5
    x = rng.random((2, args.size, args.size, 3))
    ga = rng.integers(0, n, (2, args.size, args.size)).astype(np.uint8)
    gb = rng.integers(0, n, (2, args.size, args.size)).astype(np.uint8)
    delta = np.array([0.8, 0.65])

    grads = backward(params, x, args.stage, ga, gb, delta)
    print(f"{'tensor':10s} {'size':>5s} {'kinks':>5s} {'max rel err':>12s}")
    for name, p in params.tensors.items():
        worst, kinks = 0.0, 0
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + args.step
            up = objective(params, x, args.stage, ga, gb, delta)[0].total
            mask_up = relu_pattern(params, x)
            p[idx] = old - args.step
            down = objective(params, x, args.stage, ga, gb, delta)[0].total
            mask_down = relu_pattern(params, x)
            p[idx] = old
            # a step across a ReLU kink makes the difference meaningless
            if not np.array_equal(mask_up, mask_down):
                kinks += 1
                continue
            fd = (up - down) / (2 * args.step)
            worst = max(worst, abs(grads[name][idx] - fd) / max(abs(fd), 1e-6))
        print(f"{name:10s} {p.size:5d} {kinks:5d} {worst:12.2e}")


if __name__ == "__main__":
    main()
