"""Least-squares quartic fit of GELU on [0, 3.2] and its nested form.

Prints the monomial coefficients (highest degree first), the nested
constants used by the fixed-point evaluator, and the max error.
"""
import numpy as np
from scipy.special import erf

xs = np.linspace(0.0, 3.2, 100_001)
gelu = 0.5 * xs * (1.0 + erf(xs / np.sqrt(2.0)))
c = np.polyfit(xs, gelu, 4)
c4, c3, c2, c1, c0 = c
b = c3 / (2.0 * c4)
B = c2 - c4 * b * b
D = c1 - B * b
print("monomial:", np.round(c, 8).tolist())
print(f"nested: A={c4:.8f} b={b:.6f} B={B:.6f} C={c0:.8f} D={D:.6f}")

grid = np.linspace(-3.2, 3.2, 100_001)
a = np.abs(grid)
u = a * (a + b)
approx = c4 * u * u + B * u + c0 + D * a + np.minimum(grid, 0.0)
ref = 0.5 * grid * (1.0 + erf(grid / np.sqrt(2.0)))
print(f"max abs error on [-3.2, 3.2]: {np.max(np.abs(approx - ref)):.5f}")
