"""Frozen reference values.

Each value was produced once by a standalone script that does not import the
package (scalar ODEs integrated with an implicit Radau method at rtol 1e-13,
or closed forms) and is pinned here so solver changes cannot move the target.
"""

# Fixture: gamma = psi = 2, delta = 0.1, T = 1, x = 1
GAMMA, PSI, DELTA, T = 2.0, 2.0, 0.1, 1.0
R, MU, SIGMA = 0.02, 0.04, 0.2

# Constant consumption c = 1: Y_t = exp(0.2 t), U_0 = -1
U0_CONST_1 = -1.0
U0_CONST_2 = -0.5

# Dual scalar ODE V' = -g(d, V/gamma) with D constant
V0_DUAL_D1 = -2.1982080909265322
V0_DUAL_D4 = -4.396416181853059

# Constant-coefficient value u(1, 0) with pi* = mu/(gamma sigma^2)
U_EXACT = -1.172524005059942
PI_STAR = 0.5
U_EXACT_MU0 = -1.2080297027537164  # r = mu = 0

# Perturbed exact values u(1, eps): rate shift a = 0.25, drift shift b = 0.05
U_EXACT_RATE = {0.2: -1.1156434328152804, 0.1: -1.1437314759228479,
                0.05: -1.1580385928427, 0.025: -1.1652588747273995}
U_EXACT_DRIFT = {0.2: -1.1659833650278475, 0.1: -1.1694308270363665,
                 0.05: -1.1710218873196736, 0.025: -1.1717840861290574}

# U(1) - U(0.8)/2 - U(1.2)/2 for constant streams
CONCAVITY_SURPLUS = 1.0 / 24.0
