#!/usr/bin/env python3
# Channels, cascaded channels and the closed-form transmit beamformer.

import numpy as np

from risisac.channel import RisPhases, Scenario, cascade, effective, sample_channels, snr_comm, snr_radar
from risisac.complexlin import make_rng
from risisac.txbf import Branch, InfeasibleError, transmit_beamformer

# 16-element RIS, 4-antenna base station, default powers (8 dBm, -20 dBm noise, 10 dB threshold)
scn = Scenario.from_db(M=4, N=16)
ch = sample_channels(scn, make_rng(seed=0, stream=0))
cp = cascade(ch)
print("cascaded channel shapes:", cp.phi_t.shape, cp.phi_c.shape)

# any unit-modulus phase vector gives a pair of effective channels
phases = RisPhases.from_theta(make_rng(1).uniform(0, 2 * np.pi, scn.N))
h_t, h_c = effective(cp, phases)

sol = transmit_beamformer(h_t, h_c, scn)
print("branch:", sol.branch.name, " |w|^2 =", np.vdot(sol.w, sol.w).real, " P =", scn.P_t)
print("echo SNR  %.2f dB" % (10 * np.log10(snr_radar(h_t, sol.w, scn.sigma_r2))))
print("user SNR  %.2f dB  (threshold %.1f dB)" % (10 * np.log10(snr_comm(h_c, sol.w, scn.sigma_c2)), 10 * np.log10(scn.tau_c)))

# tighten the user threshold until the beam has to bend toward the user
for tau_db in (10, 46.0, 46.8, 47.2, 50):
    tight = Scenario.from_db(M=4, N=16, tau_c_db=tau_db)
    try:
        s = transmit_beamformer(h_t, h_c, tight)
    except InfeasibleError as exc:
        print(f"tau={tau_db} dB: infeasible ({exc})")
        continue
    gr = 10 * np.log10(snr_radar(h_t, s.w, tight.sigma_r2))
    gc = 10 * np.log10(snr_comm(h_c, s.w, tight.sigma_c2))
    print(f"tau={tau_db} dB: {s.branch.name:9s} gamma_r={gr:6.2f} dB gamma_c={gc:6.2f} dB")
    if s.branch is Branch.TWO_BASIS:
        assert abs(gc - tau_db) < 1e-6  # the user constraint is met with equality
