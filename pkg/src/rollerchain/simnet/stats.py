"""Small statistics helpers built on the standard library."""
from __future__ import annotations

import math
from dataclasses import dataclass


def normal_sf(z: float) -> float:
    """Upper tail of the standard normal."""
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def wilson_interval(successes: int, trials: int, z: float = 3.0) -> tuple[float, float]:
    if trials <= 0:
        raise ValueError("trials must be positive")
    p = successes / trials
    denom = 1 + z * z / trials
    centre = (p + z * z / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


def binomial_sigma(p: float, trials: int) -> float:
    return math.sqrt(p * (1 - p) / trials)


@dataclass(frozen=True)
class ZTest:
    z: float
    p_value: float

    def rejects(self, alpha: float) -> bool:
        return self.p_value < alpha


def two_proportion_z(x1: int, n1: int, x2: int, n2: int) -> ZTest:
    """Pooled two-sided test of p1 == p2."""
    pooled = (x1 + x2) / (n1 + n2)
    var = pooled * (1 - pooled) * (1 / n1 + 1 / n2)
    if var == 0:
        # both samples all-failure or all-success: identical proportions
        return ZTest(0.0, 1.0)
    z = (x1 / n1 - x2 / n2) / math.sqrt(var)
    return ZTest(z, 2 * normal_sf(abs(z)))


def expected_min_uniform(n: int, draws: int) -> float:
    """E[min] of ``draws`` iid uniform integers in 0..n-1."""
    return sum(((n - j) / n) ** draws for j in range(1, n))
