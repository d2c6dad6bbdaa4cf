"""Height fluctuations in the Bernoulli stationary state.

Runs a batch of replicas from Ber(v) with the matching Ber(h) injection on the
left and compares the sample variances of the height increments in time and
space with ``t h (1 - h)`` and ``v (1 - v) |x|``.
"""
from sixvertex import InitialCondition, KeyedDrivers, ModelParams, OccupationWindow, stationary_h
from sixvertex.dynamics import heights_from_occupancy, run_batch

P = ModelParams(0.6, 0.3, 0.5)


def main(v=0.5, replicas=20000, t=32, a=-40, b=40):
    h = stationary_h(v, P)
    drivers = KeyedDrivers(2024)
    occ = InitialCondition.bernoulli(v).occupancy(a, b, drivers, replicas)
    start = heights_from_occupancy(a, occ, origin=0)[:, -a]
    window = OccupationWindow(a, occ, boundary="bernoulli-injection", h=h)
    final = run_batch(P, window, t, drivers, origin=0)
    print(f"h = {h:.4f}")
    dt = final.at(0) - start
    print(f"Var N({t},0) - N(0,0) = {dt.var(ddof=1):.3f}   t h (1-h) = {t * h * (1 - h):.3f}")
    for x in (4, 16, 32):
        dx = final.at(x) - final.at(0)
        print(f"Var N({t},{x}) - N({t},0) = {dx.var(ddof=1):.3f}   v (1-v) x = {v * (1 - v) * x:.3f}")


if __name__ == "__main__":
    main()
