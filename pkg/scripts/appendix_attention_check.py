"""Gradient growth in the appendix's simplified attention, X <- softmax(X X^T) X.

No projections, layer norm or feed-forward: if the virtual-token gradient of the
summed atom loss does not grow like N^2 even here, the full model will not
either.  Prints the fitted log-log slope per layer.
"""
import argparse

import numpy as np

from ccmd import autodiff as ad
from ccmd.gradscan import fit_loglog

ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
ap.add_argument("--layers", type=int, default=4)
ap.add_argument("--d", type=int, default=64)
ap.add_argument("--seeds", type=int, default=5)
args = ap.parse_args()


def run(x0, layers):
    xs, x = [], x0
    for _ in range(layers):
        att = ad.softmax_row(ad.scale(ad.matmul(x, ad.transpose(x, (1, 0))), 1.0 / np.sqrt(args.d)))
        x = ad.matmul(att, x)
        xs.append(x)
    return xs


cells = {}
for n in (8, 16, 32, 64, 128):
    for seed in range(args.seeds):
        r = np.random.default_rng([seed, n])
        x0 = r.normal(size=(n + 1, args.d))
        teacher = [t.value for t in run(ad.const(x0 + 0.1 * r.normal(size=x0.shape)), args.layers)]
        tape = ad.Tape()
        xs = run(tape.leaf(x0), args.layers)
        loss = None
        for x, t in zip(xs, teacher):
            term = ad.sum_axis(ad.abs_(x - ad.const(t)))
            loss = term if loss is None else loss + term
        tape.backward(loss)
        for l, x in enumerate(xs, start=1):
            cells.setdefault((n, l), []).append(np.linalg.norm(tape.grad(x)[0]))

for l in range(1, args.layers + 1):
    pts = [(n, float(np.exp(np.mean(np.log(v))))) for (n, ll), v in sorted(cells.items()) if ll == l]
    s, _, r2 = fit_loglog(pts)
    print(f"layer {l}: slope {s:+.3f}  R2 {r2:.3f}")
