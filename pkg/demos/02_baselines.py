#!/usr/bin/env python3
# Random phases, gradient ascent on the surrogate, and brute force over quantized phases.

import time

import numpy as np

from risisac.baselines import exhaustive_phases, pgd_phases, random_phases, surrogate
from risisac.channel import Scenario, cascade, effective, sample_channels
from risisac.complexlin import make_rng
from risisac.txbf import closed_form_snrs

scn = Scenario.from_db(M=2, N=6)
cp = cascade(sample_channels(scn, make_rng(0, 0)))


def report(name, theta, seconds):
    h_t, h_c = effective(cp, np.exp(1j * theta))
    gr, gc, ok = closed_form_snrs(h_t, h_c, scn)
    print(f"{name:12s} gamma_r {10 * np.log10(gr):6.2f} dB  gamma_c {10 * np.log10(gc):6.2f} dB  "
          f"J {surrogate(cp, theta, 0.8):9.2f}  {seconds * 1e3:8.1f} ms")


t = time.perf_counter()
th = random_phases(scn.N, make_rng(0, purpose=4)).theta
report("random", th, time.perf_counter() - t)

for alpha in (0.8, 1000.0):
    t = time.perf_counter()
    th = pgd_phases(cp, alpha).theta
    report(f"pgd a={alpha:g}", th, time.perf_counter() - t)

# 8^6 = 262144 candidates; K=16 needs a larger budget (16^6 ~ 1.7e7)
for K, budget in ((8, 2 ** 21), (16, 2 ** 24)):
    t = time.perf_counter()
    res = exhaustive_phases(cp, scn, K=K, budget=budget)
    report(f"exhaust K={K}", res.phases.theta, time.perf_counter() - t)

# a large alpha makes the surrogate track the echo gain closely; at alpha=0.8 the
# correlation term dominates under unit-gain channels
