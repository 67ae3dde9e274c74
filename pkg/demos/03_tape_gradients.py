"""The reverse-mode tape: recording, gradients, the detach marker, and the
finite-difference oracle.

Run: python demos/03_tape_gradients.py
"""

import numpy as np

from hrmlab import autodiff as ad
from hrmlab.autodiff import Tape, Tensor, finite_diff_check, finite_diff_error

rng = np.random.default_rng(0)

print("== gradients through a little network ==")
tape = Tape()
x = Tensor(rng.standard_normal((4, 8))).watched(tape)
w1 = Tensor(rng.standard_normal((8, 16)) / np.sqrt(8)).watched(tape)
w2 = Tensor(rng.standard_normal((16, 8)) / 4.0).watched(tape)
gain = Tensor(np.ones(8)).watched(tape)

hidden = ad.sigmoid(ad.matmul(x, w1))
out = ad.rms_norm(ad.matmul(hidden, w2), gain)
loss = ad.mean_all(ad.mul(out, out))
print(f"tape recorded {len(tape)} primitive ops, loss = {loss.item():.4f}")

gx, gw1, gw2 = tape.gradients(loss, [x, w1, w2])
print(f"|dL/dx| = {np.abs(gx).sum():.4f}  |dL/dw1| = {np.abs(gw1).sum():.4f}")

print("\n== the detach marker blocks gradient flow ==")
tape2 = Tape()
x2 = Tensor(np.ones((2, 2))).watched(tape2)
y2 = ad.mul(x2, x2)
loss2 = ad.mean_all(ad.mul(y2.detach(), x2))  # y2 enters as a constant
(g2,) = tape2.gradients(loss2, [x2])
print("gradient with y detached:", g2.ravel(), "(only the direct factor remains)")

print("\n== finite differences certify every rule ==")
w = Tensor(rng.standard_normal((6, 3)))

def f(t):
    return ad.softmax_cross_entropy(ad.matmul(t, w), np.array([0, 2, 1]))

probe = Tensor(rng.standard_normal((3, 6)))
print("softmax-CE chain passes:", finite_diff_check(f, probe))
print(f"max relative error: {finite_diff_error(f, probe):.2e}")

print("\n== a deliberately wrong rule fails the check ==")

def broken(t):
    tape = t.tape
    out = Tensor(t.data * 3.0, tape=tape)
    if tape is not None:
        tape.record(out.uid, (t.uid,), lambda g: (g * 2.0,))  # should be * 3
    return ad.mean_all(out)

print("broken rule passes:", finite_diff_check(broken, probe))
