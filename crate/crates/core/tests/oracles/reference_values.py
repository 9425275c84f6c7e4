"""Reference values for the integration tests, evaluated in 60-digit
arithmetic with mpmath. Run with `python3 reference_values.py`; the printed
numbers are pasted into the Rust tests."""

import math
import random

from mpmath import mp, mpf, binomial, exp, log, tanh, betainc, findroot

mp.dps = 60

DEFAULT_ORDERS = [1.25, 1.5, 1.75, 2, 2.5, 3, 4, 5, 6, 8, 10, 12, 16, 20, 24, 32, 48, 64, 128, 256]


def rdp(q, sigma, alpha):
    q, sigma = mpf(q), mpf(sigma)
    a = int(math.ceil(alpha))
    total = mpf(0)
    for k in range(a + 1):
        total += binomial(a, k) * (1 - q) ** (a - k) * q**k * exp(mpf(k * (k - 1)) / (2 * sigma**2))
    return log(total) / (a - 1)


def epsilon(q, sigma, steps, delta, orders=DEFAULT_ORDERS):
    return min(steps * rdp(q, sigma, a) + log(1 / mpf(delta)) / (mpf(a) - 1) for a in orders)


def dense_forward(sizes, params, x):
    act = [mpf(v) for v in x]
    off = 0
    for layer in range(len(sizes) - 1):
        n_in, n_out = sizes[layer], sizes[layer + 1]
        w = params[off : off + n_in * n_out]
        b = params[off + n_in * n_out : off + n_in * n_out + n_out]
        z = [b[o] + sum(w[o * n_in + i] * act[i] for i in range(n_in)) for o in range(n_out)]
        if layer + 1 < len(sizes) - 1:
            z = [tanh(v) for v in z]
        act = z
        off += n_in * n_out + n_out
    return act


def cnn_forward(cin, h, w, channels, k, pool, classes, params, x):
    ho, wo = h - k + 1, w - k + 1
    ph, pw = ho // pool, wo // pool
    conv_w = params[: channels * cin * k * k]
    conv_b = params[channels * cin * k * k : channels * cin * k * k + channels]
    rest = params[channels * cin * k * k + channels :]
    pooled_len = channels * ph * pw
    fc_w, fc_b = rest[: classes * pooled_len], rest[classes * pooled_len :]
    act = {}
    for ch in range(channels):
        for i in range(ho):
            for j in range(wo):
                s = conv_b[ch]
                for ci in range(cin):
                    for u in range(k):
                        for v in range(k):
                            s += conv_w[((ch * cin + ci) * k + u) * k + v] * x[(ci * h + i + u) * w + j + v]
                act[(ch, i, j)] = tanh(s)
    pooled = []
    for ch in range(channels):
        for pi in range(ph):
            for pj in range(pw):
                s = sum(act[(ch, pi * pool + u, pj * pool + v)] for u in range(pool) for v in range(pool))
                pooled.append(s / (pool * pool))
    return [fc_b[o] + sum(fc_w[o * pooled_len + i] * pooled[i] for i in range(pooled_len)) for o in range(classes)]


def fixture_params(n):
    return [mpf(((i * 37) % 19 - 9) / 20) for i in range(n)]


def fixture_input(n):
    return [mpf(((j * 11) % 13 - 6) / 10) for j in range(n)]


def main():
    print("rdp(q=0.01, sigma=1, alpha=8) =", mp.nstr(rdp(0.01, 1.0, 8), 20))

    rng = random.Random(20240601)
    print("random triples (q, sigma, alpha, rdp):")
    for _ in range(20):
        q = round(10 ** rng.uniform(-3, math.log10(0.5)), 6)
        sigma = round(rng.uniform(0.6, 5.0), 4)
        alpha = rng.randint(2, 64)
        print(f"    ({q!r}, {sigma!r}, {alpha}.0, {mp.nstr(rdp(q, sigma, alpha), 20)}),")

    print("epsilon(q=0.01, sigma=1.5, T=1000, delta=1e-5) =", mp.nstr(epsilon(0.01, 1.5, 1000, 1e-5), 20))

    # eps(sigma) is piecewise smooth in sigma; solve eps = 8 by bisection.
    lo, hi = mpf("0.3"), mpf(50)
    for _ in range(200):
        mid = (lo + hi) / 2
        if epsilon(0.24, mid, 500, 1e-5) > 8:
            lo = mid
        else:
            hi = mid
    print("calibrated sigma(q=0.24, T=500, delta=1e-5, eps=8) =", mp.nstr(hi, 20))

    tail = 2 * betainc(mpf("0.2"), mpf("0.2"), 0, mpf("0.1"), regularized=True)
    print("P(lambda < 0.1 or lambda > 0.9), Beta(0.2, 0.2) =", mp.nstr(tail, 20))

    sizes = [4, 3, 2]
    n = sum(sizes[i] * sizes[i + 1] + sizes[i + 1] for i in range(len(sizes) - 1))
    logits = dense_forward(sizes, fixture_params(n), fixture_input(4))
    print("mlp [4, 3, 2] logits =", [mp.nstr(v, 20) for v in logits])

    cin, h, w, channels, k, pool, classes = 1, 5, 5, 2, 2, 2, 3
    n = channels * cin * k * k + channels + classes * channels * 2 * 2 + classes
    logits = cnn_forward(cin, h, w, channels, k, pool, classes, fixture_params(n), fixture_input(cin * h * w))
    print("small-cnn logits =", [mp.nstr(v, 20) for v in logits])


if __name__ == "__main__":
    main()
