"""
Hypercomplex weights from Kronecker sums
========================================

A PH(n) layer never stores its full weight. It keeps ``n`` small algebra
matrices and ``n`` filter banks and assembles the weight as a sum of
Kronecker products. This walk-through builds a few of them by hand.
"""

# %%
# Quaternion arithmetic
# ---------------------
import numpy as np

from hxbcos.hypercomplex import (
    HAMILTON_FIXED,
    PhWeightSpec,
    assemble_ph_weight,
    dense_param_count,
    hamilton_algebra_matrices,
    hamilton_product,
    param_count,
)

i, j = (0, 1, 0, 0), (0, 0, 1, 0)
print("i * j =", hamilton_product(i, j))
print("j * i =", hamilton_product(j, i))

# %%
# The four fixed matrices that encode left multiplication by 1, i, j, k.
# Each one is a signed permutation.
for name, a in zip("1ijk", hamilton_algebra_matrices()):
    print(name)
    print(a)

# %%
# Assembling a quaternion weight
# ------------------------------
# With one scalar per component the assembled 4x4 weight multiplies a
# quaternion exactly like the Hamilton product does.
p = np.array([0.5, -1.0, 2.0, 0.25], dtype=np.float32)
spec = PhWeightSpec(4, 4, 4, (1, 1), mode=HAMILTON_FIXED, filters=p.reshape(4, 1, 1, 1, 1))
w = assemble_ph_weight(spec).data[:, :, 0, 0]
q = np.array([1.0, 0.0, -1.0, 3.0])
print(w)
print("W q   =", w @ q)
print("p * q =", np.array(hamilton_product(p.astype(np.float64), q)))

# %%
# Learned algebras and parameter counts
# -------------------------------------
# With a learnable algebra, ``n`` need not be 4. The filter count shrinks by
# ``n`` while the algebra adds only ``n**3`` numbers.
for n in (1, 2, 3, 4, 6):
    spec = PhWeightSpec(n, 48, 24, (3, 3), rng=0)
    counts = param_count(spec)
    print(f"n={n}: filters {counts['filters']:6d}  algebra {counts['algebra']:4d}  "
          f"dense {dense_param_count(48, 24, 3, 3)}")
