"""Independent re-implementations used as test oracles.

Nothing here imports the allocator; the expected-quality formula is written
out again from the model definitions so a shared bug cannot hide.
"""

import math

import numpy as np

from fovstream.quality import LogQrModel, QualityDecayModel, QualityModelSet, RateIncreaseModel

BORDERS = (10, 20, 30, 40, 50)
RI_SIZES = (4, 8, 16, 32, 64)
TOTAL = 512
SPHERE = 4 * math.pi * (180 / math.pi) ** 2
FLOOR = 1e-4


def random_models(rng) -> QualityModelSet:
    b_pf = rng.uniform(2.0, 6.0)
    return QualityModelSet(
        pf=LogQrModel(rng.uniform(10, 30), b_pf),
        pfplus={b: LogQrModel(rng.uniform(10, 30), rng.uniform(2.0, 6.0)) for b in BORDERS},
        ri=LogQrModel(rng.uniform(5, 20), rng.uniform(1.5, 5.0)),
        rho=RateIncreaseModel(rng.uniform(0, 2), rng.uniform(0.05, 1.0)),
        kappa=QualityDecayModel(rng.uniform(0.001, 0.05), rng.uniform(0.5, 1.2)),
    )


def random_inputs_kwargs(rng) -> dict:
    """Keyword arguments for AllocationInputs with hit rates that never sum past 1."""
    apf = rng.uniform(0.2, 0.95)
    rest = 1.0 - apf
    app = {b: rest * rng.uniform(0, 0.7) * (i + 1) / len(BORDERS) for i, b in enumerate(BORDERS)}
    ari = {k: (rest - max(app.values())) * rng.uniform(0, 1) * k / 64 for k in RI_SIZES}
    taus = rng.choice(np.arange(1, 40), size=rng.integers(1, 6), replace=False)
    p = rng.uniform(0.1, 1, len(taus))
    p /= p.sum()
    lapse = {int(t): float(x) for t, x in zip(taus, p)}
    lapse[int(taus[0])] += 1.0 - sum(lapse.values())
    return dict(
        gamma=rng.uniform(0.3, 1.0),
        alpha_pf=apf,
        alpha_pfplus=app,
        alpha_ri=ari,
        budget_bt=10 ** rng.uniform(4, 6.7),
        models=random_models(rng),
        lapse_dist=lapse,
    )


def rho_oracle(c, d, tau):
    return 1 + c * (1 - np.exp(-d * (np.asarray(tau, dtype=float) - 1)))


def eq12(re, rb, kw, border, k):
    """Expected quality written out from the definitions (vectorised in re, rb)."""
    m = kw["models"]
    g = kw["gamma"]
    apf, app, ari = kw["alpha_pf"], kw["alpha_pfplus"][border], kw["alpha_ri"][k]
    taus = np.array(list(kw["lapse_dist"]))
    p = np.array(list(kw["lapse_dist"].values()))
    F = float(p @ rho_oracle(m.rho.c, m.rho.d, taus))
    re = np.maximum(re, FLOOR)
    rb = np.maximum(rb, FLOOR)
    q_pf = m.pf.a + m.pf.b * np.log(re / F)
    pp = m.pfplus[border]
    q_pp = pp.a + pp.b * np.log(rb / F)
    q_ri = m.ri.a + m.ri.b * np.log(rb)
    kmin = math.exp(-m.kappa.g * math.ceil(TOTAL / k) ** m.kappa.h)
    return g * (apf * q_pf + app * q_pp + ari * q_ri) + (1 - g * (apf + app + ari)) * kmin * q_ri


def budget_coeffs(border, k):
    lam = 1 - k / TOTAL
    c_e = lam * 90 * 90
    c_b = lam * ((90 + border) ** 2 - 90 * 90) + k * SPHERE / TOTAL
    return c_e, c_b


def grid_search(kw, border, k, n=10_000):
    """Best expected quality over n points of the feasible budget line (r_e >= r_b >= floor)."""
    B = kw["budget_bt"]
    c_e, c_b = budget_coeffs(border, k)
    lo = B / (c_e + c_b)  # r_e = r_b
    hi = (B - c_b * FLOOR) / c_e  # r_b at the floor
    if hi < lo:
        return float(eq12(lo, lo, kw, border, k)), lo, lo
    re = np.linspace(lo, hi, n)
    rb = (B - c_e * re) / c_b
    q = eq12(re, rb, kw, border, k)
    i = int(np.argmax(q))
    return float(q[i]), float(re[i]), float(rb[i])
