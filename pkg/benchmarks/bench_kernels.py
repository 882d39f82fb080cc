"""Compare the compiled and numpy kernel backends.

Times the row-wise kernels on attention-sized inputs and one full policy
forward/backward pass on the Sioux Falls network, for each available backend.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from gpght import kernels
from gpght import tensor as te
from gpght.network import build_sioux_falls
from gpght.policy import Policy, StateBatch, TrajectoryState


def kernel_cases(rng):
    x = rng.standard_normal((4096, 32))
    mask = (rng.random(x.shape) < 0.8).astype(np.uint8)
    mask[:, 0] = 1
    y = kernels.softmax_fwd(x, mask)
    g = rng.standard_normal(x.shape)
    xhat, inv_std = kernels.layernorm_fwd(x, 1e-5)
    return {
        "softmax_fwd": lambda: kernels.softmax_fwd(x, mask),
        "softmax_bwd": lambda: kernels.softmax_bwd(y, g),
        "layernorm_fwd": lambda: kernels.layernorm_fwd(x, 1e-5),
        "layernorm_bwd": lambda: kernels.layernorm_bwd(xhat, inv_std, g),
    }


def policy_case(rng):
    net = build_sioux_falls()
    policy = Policy.for_network(net, 30.0, seed=0)
    states = []
    for _ in range(64):
        s = TrajectoryState.start(0, 13, 30.0)
        for _ in range(int(rng.integers(0, 8))):
            e = int(rng.choice(net.outgoing[s.current]))
            s = s.advance(e, int(net.heads[e]), float(net.mu[e]))
        states.append(s)
    batch = StateBatch.from_states(states)

    def step():
        policy.params.zero_grad()
        te.backward(te.sum(te.log(te.gather(policy.forward(batch), policy.outgoing_mask[batch.current].argmax(1)))))

    return step


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    backends = ["python"]
    try:
        kernels.use_backend("cython")
        backends.insert(0, "cython")
    except ImportError:
        print("compiled extension not built; timing the numpy backend only")
    results = {}
    for name in backends:
        kernels.use_backend(name)
        rng = np.random.default_rng(0)
        cases = {**kernel_cases(rng), "policy fwd+bwd (B=64)": policy_case(rng)}
        for case, fn in cases.items():
            fn()
            results[(case, name)] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    print(f"{'case':<24}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for case in dict.fromkeys(c for c, _ in results):
        row = [results[(case, b)] * 1e3 for b in backends]
        line = f"{case:<24}" + "".join(f"{t:>10.3f}ms" for t in row)
        if len(backends) > 1:
            line += f"{row[1] / row[0]:>11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
