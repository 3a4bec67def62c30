"""Independent closed-form evaluations used to freeze expected test values.

Run directly to print the constants that the unit tests assert against.
Everything here is stdlib-only on purpose: these numbers must not depend on
the package under test.
"""
import math


def h2(x: float) -> float:
    if x <= 0.0 or x >= 1.0:
        return 0.0
    return -x * math.log2(x) - (1.0 - x) * math.log2(1.0 - x)


def poisson(mu: float, n: int) -> float:
    if mu == 0.0:
        return 1.0 if n == 0 else 0.0
    return math.exp(-mu + n * math.log(mu) - math.lgamma(n + 1))


def tau(n: int, mu1: float, mu2: float, p1: float) -> float:
    return p1 * poisson(mu1, n) + (1.0 - p1) * poisson(mu2, n)


def hoeffding(n: float, eps: float) -> float:
    return math.sqrt(0.5 * n * math.log(1.0 / eps))


def main() -> None:
    print(f"h2(0.0443)            = {h2(0.0443):.12f}")
    print(f"h2(0.5)               = {h2(0.5):.12f}")
    print(f"poisson(0.31, 0)      = {poisson(0.31, 0):.12f}")
    print(f"poisson(0.1, 2)       = {poisson(0.1, 2):.12f}")
    print(f"tau0(0.31,0.1,0.8)    = {tau(0, 0.31, 0.1, 0.8):.12f}")
    print(f"tau1(0.31,0.1,0.8)    = {tau(1, 0.31, 0.1, 0.8):.12f}")
    print(f"tau0(0.6,0.2,0.8)     = {tau(0, 0.6, 0.2, 0.8):.12f}")
    print(f"tau1(0.6,0.2,0.8)     = {tau(1, 0.6, 0.2, 0.8):.12f}")
    print(f"hoeffding(1e9, 1e-9)  = {hoeffding(1e9, 1e-9):.6f}")
    print(f"leakage 1.16e9*h(.0443) = {1.16 * 1e9 * h2(0.0443):.6e}")
    # asymptotic single-photon fraction at unit efficiency: every non-vacuum
    # pulse clicks, singles are tau1 of the emitted mixture
    t0 = tau(0, 0.31, 0.1, 0.8)
    t1 = tau(1, 0.31, 0.1, 0.8)
    print(f"asymptotic d1/n at eta=1 = {t1 / (1.0 - t0):.12f}")
    # dB conversions quoted in channel tests
    print(f"10^(-0.5)             = {10 ** -0.5:.12f}")
    print(f"10^(-17.5/10)         = {10 ** -1.75:.12f}")
    print(f"10^(-0.3)             = {10 ** -0.3:.12f}")


if __name__ == "__main__":
    main()
