#!/usr/bin/env python3
# Train a small IBF-Net on simulated channels and compare it with the baselines.

import numpy as np

from risisac import harness
from risisac.ibfnet import NetConfig, TrainConfig, build_net, save_model, load_model, train

cfg = harness.RunConfig.from_dict(dict(N=8, train_count=3000, test_count=100, epochs=3, S=100))
scn = cfg.scenario()
train_data = harness.generate(scn, cfg.train_count, cfg.seed, "train")
test_data = harness.generate(scn, cfg.test_count, cfg.seed, "test")

model = build_net(NetConfig.for_n(cfg.N), seed=0)
print("parameters:", sum(p.data.size for p in model.param_list()))

_, log = train(model, train_data, TrainConfig(S=cfg.S, lr=cfg.lr, epochs=cfg.epochs, alpha=cfg.alpha),
               scn, test_data, progress=lambda r: print(f"epoch {r.epoch}: loss {r.loss:10.2f}  "
                                                        f"gamma_r {r.gamma_r_db:6.2f} dB"))

for method in ("random", "pgd", "nn"):
    rows, theta = harness.evaluate(test_data, harness.Designer(method, cfg, scn, model), timing=True)
    summary = harness.summarize(rows, method)[0]
    print(f"{method:7s} mean gamma_r {summary['gamma_r_db']:6.2f} dB  gamma_c {summary['gamma_c_db']:6.2f} dB  "
          f"{summary['design_time_us'] / 1e3:6.2f} ms/sample")

# the model file stores weights, BN statistics and optimizer state
save_model("/tmp/ibfnet_demo.ibfm", model)
again = load_model("/tmp/ibfnet_demo.ibfm")
print("reloaded step counter:", again.adam.step)
