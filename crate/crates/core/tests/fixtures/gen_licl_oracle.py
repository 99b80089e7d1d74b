"""Regenerates licl_oracle.json: loss values evaluated with 50-digit arithmetic.

Each instance stores raw float64 features (repr round-trips exactly), the
temperature, the normalization flag and the loss as a decimal string.
"""
import json
import random

import mpmath as mp

mp.mp.dps = 50


def loss(pos, neg, tau, normalize):
    def prep(f):
        v = [mp.mpf(x) for x in f]
        if normalize:
            n = mp.sqrt(mp.fsum(x * x for x in v))
            v = [x / n for x in v]
        return v

    u = [prep(f) for f in pos]
    v = [prep(f) for f in neg]
    t = mp.mpf(tau)
    dot = lambda a, b: mp.fsum(x * y for x, y in zip(a, b))
    total = mp.mpf(0)
    for um in u:
        num = mp.exp(mp.fsum(dot(um, ui) for ui in u) / t)
        den = mp.fsum(mp.exp(mp.fsum(dot(ui, vn) for ui in u) / t) for vn in v)
        total += mp.log(num / den)
    return -total / len(u)


def main():
    rng = random.Random(20240611)
    out = []
    for k in range(120):
        c = rng.randint(1, 8)
        m = rng.randint(1, 4)
        n = rng.randint(1, 4)
        tau = rng.choice([0.05, 0.07, 0.1, 0.5, 1.0])
        normalize = k % 3 != 2
        scale = 1.0 if normalize else 0.3
        feat = lambda: [rng.uniform(-scale, scale) for _ in range(c)]
        pos = [feat() for _ in range(m)]
        neg = [feat() for _ in range(n)]
        out.append({
            "tau": tau,
            "normalize": normalize,
            "pos": pos,
            "neg": neg,
            "loss": mp.nstr(loss(pos, neg, tau, normalize), 30),
        })
    with open("licl_oracle.json", "w") as f:
        json.dump(out, f, indent=1)
        f.write("\n")


if __name__ == "__main__":
    main()
