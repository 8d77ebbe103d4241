#!/usr/bin/env python3
# The command-line workflow end to end, driven from Python.  Each call is the
# same as `python -m risisac <command> ...` in a shell.

import json
import tempfile
from pathlib import Path

from risisac.harness import main, read_csv

work = Path(tempfile.mkdtemp())
config = work / "run.json"
config.write_text(json.dumps({
    "N": 8, "M": 4, "train_count": 2000, "test_count": 50, "epochs": 2,
    "train_data": str(work / "train.ibfd"), "test_data": str(work / "test.ibfd"),
    "model": str(work / "model.ibfm"),
}, indent=2))

c = ["--config", str(config), "-q"]
main(["gen", *c, "--out", str(work / "train.ibfd")])
main(["gen", *c, "--set", 'split="test"', "--out", str(work / "test.ibfd")])
main(["train", *c])
for method in ("nn", "pgd", "random"):
    main(["eval", *c, "--set", f"method={method}", "--out", str(work / f"{method}.csv")])
    mean = read_csv(work / f"{method}.csv")[-2]
    print(f"{method:7s} {mean['gamma_r_db']} dB")

main(["sweep-n", *c, "--set", "ns=[8,16]", "--set", 'methods=["pgd","random"]', "--out", str(work / "sweep_n.csv")])
print((work / "sweep_n.csv").read_text())

# errors come back as a nonzero exit code and one line on stderr
code = main(["bench", "--set", "ns=[12]", "--set", 'methods=["exhaustive"]', "--out", str(work / "b.csv")])
print("exit code:", code)
