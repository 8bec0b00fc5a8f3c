"""Compare the hand-written adjoint with central differences.

Also shows the negative control: a 0.1% error in the adjoint is caught.
Run: python demos/gradient_check.py
"""
from czt3d.trainer import gradient_check

ok = gradient_check((3, 3, 10), 20, draws=3, seed=1)
print(f"adjoint vs finite differences: max relative error {ok.max_rel:.2e}, passed={ok.passed}")

bad = gradient_check((3, 3, 10), 20, draws=1, seed=1, corrupt=1e-3)
print(f"corrupted adjoint:             max relative error {bad.max_rel:.2e}, passed={bad.passed}")
