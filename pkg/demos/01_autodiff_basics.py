"""Tour of the tape: record ops, run backward, check against differences.

The whole package sits on a small reverse-mode tape over float64 numpy
arrays. Determinism is the point: the same ops recorded in the same
order accumulate gradients in the same order, which is what later makes
distributed runs bit-identical to single-rank ones.
"""

import numpy as np

from branchpar import tensor as T

rng = np.random.default_rng(0)

# --- record a tiny computation -------------------------------------------
g = T.Graph()
x = g.leaf(rng.normal(size=(3, 4)))
w = g.leaf(rng.normal(size=(4, 2)))
b = g.leaf(np.zeros(2))

y = T.linear(x, w, b)          # x @ w + b
s = T.sigmoid(y)
loss = T.reduce_mean(T.mul(s, s))

print(f"forward: loss = {loss.data:.6f}")
print(f"tape holds {len(g.nodes)} nodes, {g.madds} multiply-adds")

# --- backward --------------------------------------------------------------
g.backward(loss)
print(f"d loss / d w has shape {g.grad(w).shape}, "
      f"norm {np.linalg.norm(g.grad(w)):.6f}")

# --- compare against central differences -----------------------------------
def f(xt, wt, bt):
    return T.reduce_mean(T.mul(T.sigmoid(T.linear(xt, wt, bt)),
                               T.sigmoid(T.linear(xt, wt, bt))))

report = T.grad_check(f, [x.data, w.data, b.data], h=1e-5, n=16, seed=1)
print(report)

# --- determinism ------------------------------------------------------------
g2 = T.Graph()
x2, w2, b2 = g2.leaf(x.data), g2.leaf(w.data), g2.leaf(b.data)
loss2 = T.reduce_mean(T.mul(T.sigmoid(T.linear(x2, w2, b2)),
                            T.sigmoid(T.linear(x2, w2, b2))))
g2.backward(loss2)
same = np.array_equal(g.grad(w), g2.grad(w2))
print(f"re-recording the same ops reproduces the gradient bitwise: {same}")

# --- why addition order matters ---------------------------------------------
a, bb, c = 0.1, 0.2, 0.3
print(f"(a+b)+c == a+(b+c) in floats: {(a + bb) + c == a + (bb + c)}")
print(f"a+b == b+a in floats:         {a + bb == bb + a}")
print("grouped sums are not associative, but two-operand sums commute;")
print("the distributed schedules lean on exactly that distinction.")
