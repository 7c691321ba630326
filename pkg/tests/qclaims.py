"""Exact-arithmetic instance generators and checks for the q-function bounds.

Shared by the property tests and the acceptance suite.
"""

from fractions import Fraction as F


def q(s, t):
    return (s + t) / (1 + s * t)


def frac(x) -> F:
    return F(x)


def in_range(lo, hi, u) -> F:
    """Point ``lo + u (hi - lo)`` for ``u`` in [0, 1]."""
    return lo + frac(u) * (hi - lo)


def agreeing_holds(eps, u, v) -> bool:
    """Two strong agreeing inputs: q(s,t) >= 1 - 4/5 eps^2 and its mirror image."""
    s, t = in_range(1 - eps, F(1), u), in_range(1 - eps, F(1), v)
    bound = F(4, 5) * eps**2
    return q(s, t) >= 1 - bound and q(-s, -t) <= -1 + bound


def disagreeing_holds(a, A, delta, u, v, w) -> bool:
    """Two strong disagreeing inputs, both displayed forms."""
    lo, hi = 1 - A * delta, 1 - a * delta
    s, t = in_range(lo, hi, u), in_range(lo, hi, v)
    r = a / A
    ok = -1 + r <= q(s, -t) <= 1 - r and -1 + r <= q(-s, t) <= 1 - r
    s_any = in_range(-hi, hi, w)  # |s| <= 1 - a delta
    return ok and q(s_any, t) >= -1 + r


def distance3_values(a, A, B, delta, us):
    """Left side of both displayed bounds for the inputs encoded by ``us`` (six numbers in [0, 1])."""
    s1 = in_range(-1 + a * delta, F(1), us[0])
    s2, s3, s4 = (in_range(1 - A * delta, F(1), u) for u in us[1:4])
    t1, t2 = (in_range(1 - B * delta, F(1), u) for u in us[4:6])
    inner = t2 * q(t1 * q(s1, s2), s3)
    return inner, q(inner, s4)


def distance3_holds(a, A, B, delta, us) -> bool:
    """Corruption at distance 3, with the squared constant in the second bound."""
    K = 2 * A**2 / a + B
    inner, outer = distance3_values(a, A, B, delta, us)
    return inner >= 1 - K * delta and outer >= 1 - F(4, 5) * K**2 * delta**2


def distance3_hypothesis(a, A, B, delta) -> bool:
    K = 2 * A**2 / a + B
    return 0 < a < A / 2 and B > 0 and 0 < delta < a / 2 and K * delta < F(1, 2) and delta <= 1


def corruption_output(theta, z_leaves):
    """``Z_u`` on the depth-3 tree from 14 edge values and the 8 subtree magnetizations.

    Edges 0-7 join w_i to x_j, 8-11 join v to w, 12-13 join u to v.
    """
    w = [q(theta[2 * i] * z_leaves[2 * i], theta[2 * i + 1] * z_leaves[2 * i + 1]) for i in range(4)]
    v = [q(theta[8 + 2 * i] * w[2 * i], theta[9 + 2 * i] * w[2 * i + 1]) for i in range(2)]
    return q(theta[12] * v[0], theta[13] * v[1])


def corruption_holds(c_hat, C_hat, C_mw, delta, theta_units, z1_unit, zj_units) -> bool:
    """Single corrupted leaf subtree at x_1; sigma_u = +1 without loss of generality."""
    lo, hi = 1 - 2 * C_hat * delta, 1 - 2 * c_hat * delta
    theta = [in_range(lo, hi, u) for u in theta_units]
    z = [in_range(F(-1), F(1), z1_unit)] + [in_range(1 - C_mw * delta**2, F(1), u) for u in zj_units]
    C_rec = F(4, 5) * (9 * C_hat**2 / c_hat + 2 * C_hat) ** 2
    return corruption_output(theta, z) >= 1 - C_rec * delta**2


def corruption_threshold(c_hat, C_hat, C_mw):
    return min(C_hat / (2 * C_mw), F(5, 72) / C_hat, c_hat)
