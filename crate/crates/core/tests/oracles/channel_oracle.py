"""Reference channel values at 1 THz, evaluated with 50-digit arithmetic.

Prints the constants pinned in tests/channel_oracle.rs.
"""

import mpmath as mp

mp.mp.dps = 50

C = mp.mpf(299792458)
KB = mp.mpf("1.380649e-23")
F = mp.mpf("1e12")
W = mp.mpf("30e9")
K = mp.mpf("0.0016")
T0 = mp.mpf(300)
P = mp.mpf(1)
TAU = mp.mpf("1e-3")
M = mp.mpf("1e7")

lam = C / F


def path_gain(d):
    return (lam / (4 * mp.pi * d)) ** 2 * mp.e ** (-2 * K * d)


def noise(distances):
    n0 = W * lam**2 / (4 * mp.pi) * KB * T0
    a0 = C**2 / (16 * mp.pi**2 * F**2)
    return n0 + sum(P * a0 / d**2 * (1 - mp.e ** (-K * d)) for d in distances)


def rate(h, g, n):
    return W * mp.log(1 + P * h * g / n, 2)


if __name__ == "__main__":
    h10 = path_gain(mp.mpf(10))
    n10 = noise([mp.mpf(10)])
    worked = rate(mp.mpf("5.52e-12"), mp.mpf(4096), mp.mpf("9.047e-14"))
    pipeline = rate(h10, mp.mpf(4096), n10)
    for name, v in [
        ("path_gain_10m", h10),
        ("noise_one_ris_10m", n10),
        ("worked_rate_bps", worked),
        ("worked_images_per_slot", worked * TAU / M),
        ("pipeline_rate_bps", pipeline),
    ]:
        print(f"{name} {mp.nstr(v, 17)}")
