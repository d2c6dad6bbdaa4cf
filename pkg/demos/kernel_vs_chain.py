"""Two-particle contour kernel against brute-force iteration of the pair chain.

The contour is evaluated without its exact-recursion fallback, so the printed
discrepancies measure the quadrature alone.
"""
import numpy as np

from sixvertex import ModelParams
from sixvertex.bethe_kernel import ContourSpec, PairKernel, one_particle_table

P = ModelParams(0.6, 0.3, 0.5)
HI = 16


def main():
    print("one particle, t = 3:", np.round(one_particle_table(P, 3, 6), 6))
    for src in [(0, 1), (0, 3)]:
        for t in (1, 2, 3):
            tgt = np.array([(x1, x2) for x1 in range(src[0], HI)
                            for x2 in range(max(x1 + 1, src[1]), HI + 1)])
            pk = PairKernel(P, t, "U", ContourSpec(fallback=False))
            Y1, Y2 = np.full(len(tgt), src[0]), np.full(len(tgt), src[1])
            vals = pk.evaluate(Y1, Y2, tgt[:, 0], tgt[:, 1])[0]
            exact, _ = pk.recursion(Y1, Y2, tgt[:, 0], tgt[:, 1])
            err = np.abs(vals - exact).max()
            print(f"source {src} t={t}: {len(tgt)} targets, max |contour - chain| = {err:.2e}")


if __name__ == "__main__":
    main()
