"""Command-line orchestration: data generation, training, evaluation, sweeps and timing."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import BudgetError, PgdConfig, exhaustive_phases, pgd_phases, random_phases
from .channel import (
    CascadedPair, Scenario, cascade, db_from_linear, dbm_from_watts, effective, sample_channels,
    snr_comm, snr_radar,
)
from .complexlin import make_rng
from .dataset import ChannelDataset, DatasetFormatError, build_input, read_dataset, write_dataset
from .ibfnet import (
    EpochLog, Model, ModelFormatError, NetConfig, TrainConfig, build_net, euler_map, load_model,
    predict_phases, save_model, train,
)
from .txbf import InfeasibleError, transmit_beamformer

log = logging.getLogger("risisac")

METHODS = ("nn", "pgd", "random", "exhaustive")
SPLIT_PURPOSE = {"train": 1, "test": 2, "bench": 3}
RANDOM_PURPOSE = 4

METRICS_COLUMNS = ["sample_id", "method", "gamma_r_db", "gamma_c_db", "feasible", "design_time_us"]
LOG_COLUMNS = ["epoch", "loss", "gamma_r_db", "gamma_c_db"]
ALPHA_COLUMNS = ["alpha", "gamma_r_db", "gamma_c_db", "infeasible"]
N_COLUMNS = ["N", "method", "gamma_r_db", "gamma_c_db", "infeasible"]
BENCH_COLUMNS = ["N", "method", "samples", "mean_us", "median_us"]


class HarnessError(Exception):
    """Failure with a machine-readable category for the CLI's error line."""

    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# ---------------------------------------------------------------- config

PROFILES = {
    "desk": dict(N=16, M=4, train_count=20000, test_count=100, S=100, lr=1e-3, epochs=10, alpha=0.8),
    "full": dict(N=32, M=4, train_count=500000, test_count=100, S=200, lr=1e-3, epochs=30, alpha=0.8),
}


def read_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise HarnessError("io", f"config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise HarnessError("config", f"{path}: {exc}") from None
    if not isinstance(raw, dict):
        raise HarnessError("config", f"{path}: top level must be an object")
    return raw


@dataclass
class RunConfig:
    """Everything a subcommand needs.  Powers are in dBm, the SNR threshold in dB."""

    profile: str = "desk"
    M: int = 4
    N: int = 16
    P_t_dbm: float = 8.0
    sigma_c2_dbm: float = -20.0
    sigma_r2_dbm: float = -20.0
    tau_c_db: float = 10.0
    kappa: float = 10.0
    seed: int = 0
    method: str = "nn"
    split: str = "train"
    count: int | None = None
    train_count: int = 20000
    test_count: int = 100
    S: int = 100
    lr: float = 1e-3
    epochs: int = 10
    alpha: float = 0.8
    precision: str = "float64"
    resume: bool = False
    timing: bool = False
    train_data: str | None = None
    test_data: str | None = None
    model: str | None = None
    log: str | None = None
    out: str | None = None
    alphas: list = field(default_factory=lambda: [0.0, 0.4, 0.8, 1.6])
    ns: list = field(default_factory=lambda: [8, 16, 32])
    methods: list = field(default_factory=lambda: ["nn", "pgd", "random"])
    levels: int = 16
    budget: int = 2 ** 21
    pgd_steps: int = 500
    pgd_step_size: float = 0.1
    pgd_restarts: int = 8
    bench_samples: int = 100

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - names)
        if unknown:
            raise HarnessError("config", f"unknown config keys: {', '.join(unknown)}")
        profile = raw.get("profile", "desk")
        if profile not in PROFILES:
            raise HarnessError("config", f"unknown profile {profile!r}")
        cfg = cls(**{**PROFILES[profile], **raw})
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(read_config(path))

    def validate(self) -> None:
        bad = [m for m in [self.method, *self.methods] if m not in METHODS]
        if bad:
            raise HarnessError("config", f"unknown method {bad[0]!r}; expected one of {', '.join(METHODS)}")
        if self.split not in ("train", "test"):
            raise HarnessError("config", f"split must be 'train' or 'test', got {self.split!r}")
        if self.precision not in ("float64", "float32"):
            raise HarnessError("config", f"precision must be float64 or float32, got {self.precision!r}")
        if not self.alphas or not self.ns:
            raise HarnessError("config", "alphas and ns must be nonempty")
        for name in ("train_count", "test_count", "bench_samples", "epochs"):
            if getattr(self, name) < 0:
                raise HarnessError("config", f"{name} must be >= 0")
        try:
            self.scenario()
            self.train_config()
            self.pgd_config()
        except ValueError as exc:
            raise HarnessError("config", str(exc)) from None

    def scenario(self, N: int | None = None) -> Scenario:
        return Scenario.from_db(M=self.M, N=self.N if N is None else N, P_t_dbm=self.P_t_dbm,
                                sigma_c2_dbm=self.sigma_c2_dbm, sigma_r2_dbm=self.sigma_r2_dbm,
                                tau_c_db=self.tau_c_db, kappa=self.kappa)

    def train_config(self, alpha: float | None = None) -> TrainConfig:
        return TrainConfig(S=self.S, lr=self.lr, epochs=self.epochs,
                           alpha=self.alpha if alpha is None else alpha, seed=self.seed)

    def pgd_config(self) -> PgdConfig:
        return PgdConfig(steps=self.pgd_steps, step_size=self.pgd_step_size,
                         restarts=self.pgd_restarts, seed=self.seed)

    @property
    def dtype(self):
        return np.dtype(self.precision)


def scenario_to_db(scn: Scenario) -> dict:
    """Inverse of the config boundary conversion."""
    return dict(P_t_dbm=float(dbm_from_watts(scn.P_t)),
                sigma_c2_dbm=float(dbm_from_watts(scn.sigma_c2)),
                sigma_r2_dbm=float(dbm_from_watts(scn.sigma_r2)),
                tau_c_db=float(db_from_linear(scn.tau_c)))


# ---------------------------------------------------------------- helpers

def generate(scn: Scenario, count: int, seed: int, split: str = "train") -> ChannelDataset:
    """Sample ``i`` uses its own counter-based stream, so prefixes are stable across counts."""
    purpose = SPLIT_PURPOSE[split]
    pairs = [cascade(sample_channels(scn, make_rng(seed, i, purpose=purpose))) for i in range(count)]
    return ChannelDataset.from_pairs(pairs) if pairs else ChannelDataset.empty(scn.N, scn.M)


def _need(path, what: str) -> Path:
    if path is None:
        raise HarnessError("config", f"missing {what} path")
    p = Path(path)
    if not p.is_file():
        raise HarnessError("io", f"{what} not found: {p}")
    return p


def _output(path, what: str) -> Path:
    if path is None:
        raise HarnessError("config", f"missing output path for {what} (set 'out' or pass --out)")
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer, str)):
        return str(x)
    return repr(float(x))


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def pipeline_snrs(cp: CascadedPair, v: np.ndarray, scn: Scenario):
    """``(gamma_r, gamma_c, feasible)`` for one phase vector via the scalar beamformer."""
    h_t, h_c = effective(cp, v)
    try:
        sol = transmit_beamformer(h_t, h_c, scn)
    except InfeasibleError:
        return float("nan"), float("nan"), False
    return snr_radar(h_t, sol.w, scn.sigma_r2), snr_comm(h_c, sol.w, scn.sigma_c2), True


class Designer:
    """Per-sample RIS phase design for one method."""

    def __init__(self, method: str, cfg: RunConfig, scn: Scenario, model: Model | None = None):
        if method == "nn" and model is None:
            raise HarnessError("config", "method 'nn' needs a model")
        if method == "nn" and model.cfg.N != scn.N:
            raise HarnessError("mismatch", f"model N={model.cfg.N} but data N={scn.N}")
        self.method, self.cfg, self.scn, self.model = method, cfg, scn, model
        self.pgd = cfg.pgd_config()

    def __call__(self, cp: CascadedPair, sample_id: int) -> np.ndarray:
        if self.method == "nn":
            return predict_phases(self.model, build_input(cp)[0])
        if self.method == "pgd":
            return pgd_phases(cp, self.cfg.alpha, self.pgd).theta
        if self.method == "random":
            return random_phases(self.scn.N, make_rng(self.cfg.seed, sample_id, purpose=RANDOM_PURPOSE)).theta
        res = exhaustive_phases(cp, self.scn, self.cfg.levels, budget=self.cfg.budget)
        if res.phases is None:
            return np.zeros(self.scn.N)
        return res.phases.theta


def evaluate(data: ChannelDataset, designer: Designer, timing: bool = False):
    """Design every sample; returns metric rows and the ``(count, N)`` phase array."""
    rows, thetas = [], []
    for i in range(len(data)):
        cp = data[i]
        t0 = time.perf_counter()
        theta = designer(cp, i)
        elapsed = time.perf_counter() - t0
        thetas.append(theta)
        gr, gc, ok = pipeline_snrs(cp, euler_map(theta), designer.scn)
        rows.append(dict(sample_id=i, method=designer.method,
                         gamma_r_db=db_from_linear(gr) if ok else float("nan"),
                         gamma_c_db=db_from_linear(gc) if ok else float("nan"),
                         feasible=ok, design_time_us=elapsed * 1e6 if timing else 0.0))
    theta = np.array(thetas) if thetas else np.zeros((0, designer.scn.N))
    return rows, theta


def metrics_from_phases(data: ChannelDataset, theta: np.ndarray, scn: Scenario, method: str):
    """Recompute metric rows (without timing) from stored phases."""
    rows = []
    for i in range(len(data)):
        gr, gc, ok = pipeline_snrs(data[i], euler_map(theta[i]), scn)
        rows.append(dict(sample_id=i, method=method,
                         gamma_r_db=db_from_linear(gr) if ok else float("nan"),
                         gamma_c_db=db_from_linear(gc) if ok else float("nan"),
                         feasible=ok, design_time_us=0.0))
    return rows


def summarize(rows: list[dict], method: str) -> list[dict]:
    """Mean and median rows over feasible samples; ``feasible`` holds the feasible count."""
    if not rows:
        return []
    ok = [r for r in rows if r["feasible"]]
    out = []
    for name, fn in (("mean", np.mean), ("median", np.median)):
        pick = lambda key: float(fn([r[key] for r in ok])) if ok else float("nan")
        out.append(dict(sample_id=name, method=method, gamma_r_db=pick("gamma_r_db"),
                        gamma_c_db=pick("gamma_c_db"), feasible=len(ok),
                        design_time_us=float(fn([r["design_time_us"] for r in rows]))))
    return out


def _progress(row: EpochLog) -> None:
    log.info("epoch %d loss %.6g gamma_r %.3f dB gamma_c %.3f dB",
             row.epoch, row.loss, row.gamma_r_db, row.gamma_c_db)


def _fit(cfg: RunConfig, scn: Scenario, train_data: ChannelDataset, heldout, alpha=None, model=None):
    if model is None:
        model = build_net(NetConfig.for_n(scn.N), cfg.seed, dtype=cfg.dtype)
    _, rows = train(model, train_data, cfg.train_config(alpha), scn, heldout, progress=_progress)
    return model, rows


def _load_or_generate(path, scn, cfg, count, split) -> ChannelDataset:
    if path is not None:
        data = read_dataset(_need(path, f"{split} data"))
        if (data.N, data.M) != (scn.N, scn.M) and len(data):
            raise HarnessError("mismatch", f"{path}: dataset is N={data.N}, M={data.M}; config has N={scn.N}, M={scn.M}")
        return data
    return generate(scn, count, cfg.seed, split)


# ---------------------------------------------------------------- commands

def cmd_gen(cfg: RunConfig) -> Path:
    out = _output(cfg.out, "gen")
    count = cfg.count if cfg.count is not None else (cfg.train_count if cfg.split == "train" else cfg.test_count)
    if count < 0:
        raise HarnessError("config", "count must be >= 0")
    write_dataset(out, generate(cfg.scenario(), count, cfg.seed, cfg.split))
    return out


def cmd_train(cfg: RunConfig) -> tuple[Path, Path]:
    data = read_dataset(_need(cfg.train_data, "training data"))
    scn = cfg.scenario(data.N if len(data) else cfg.N)
    heldout = read_dataset(_need(cfg.test_data, "test data")) if cfg.test_data else None
    model_out = _output(cfg.out or cfg.model, "model")
    log_out = _output(cfg.log or str(model_out) + ".log.csv", "training log")
    model = None
    if cfg.resume and cfg.model and Path(cfg.model).is_file():
        model = load_model(cfg.model)
    try:
        model, rows = _fit(cfg, scn, data, heldout, model=model)
    except ValueError as exc:
        raise HarnessError("mismatch", str(exc)) from None
    save_model(model_out, model)
    write_csv(log_out, LOG_COLUMNS, [dataclasses.asdict(r) for r in rows])
    return model_out, log_out


def cmd_eval(cfg: RunConfig) -> Path:
    data = read_dataset(_need(cfg.test_data, "test data"))
    model = load_model(_need(cfg.model, "model")) if cfg.method == "nn" else None
    out = _output(cfg.out, "metrics")
    scn = cfg.scenario(data.N if len(data) else cfg.N)
    rows, theta = evaluate(data, Designer(cfg.method, cfg, scn, model), timing=cfg.timing)
    write_csv(out, METRICS_COLUMNS, rows + summarize(rows, cfg.method))
    np.save(phases_path(out), theta)
    return out


def phases_path(metrics_path) -> Path:
    p = Path(metrics_path)
    return p.with_name(p.stem + ".phases.npy")


def _mean_row(rows):
    ok = [r for r in rows if r["feasible"]]
    gr = float(np.mean([r["gamma_r_db"] for r in ok])) if ok else float("nan")
    gc = float(np.mean([r["gamma_c_db"] for r in ok])) if ok else float("nan")
    return gr, gc, len(rows) - len(ok)


def cmd_sweep_alpha(cfg: RunConfig) -> Path:
    out = _output(cfg.out, "alpha sweep")
    scn = cfg.scenario()
    train_data = _load_or_generate(cfg.train_data, scn, cfg, cfg.train_count, "train")
    test_data = _load_or_generate(cfg.test_data, scn, cfg, cfg.test_count, "test")
    table = []
    for alpha in cfg.alphas:
        log.info("alpha %g", alpha)
        model, _ = _fit(cfg, scn, train_data, None, alpha=float(alpha))
        rows, _ = evaluate(test_data, Designer("nn", cfg, scn, model))
        gr, gc, bad = _mean_row(rows)
        table.append(dict(alpha=float(alpha), gamma_r_db=gr, gamma_c_db=gc, infeasible=bad))
    write_csv(out, ALPHA_COLUMNS, table)
    return out


def cmd_sweep_n(cfg: RunConfig) -> Path:
    out = _output(cfg.out, "N sweep")
    table = []
    for N in cfg.ns:
        scn = cfg.scenario(int(N))
        test_data = generate(scn, cfg.test_count, cfg.seed, "test")
        for method in cfg.methods:
            model = None
            if method == "nn":
                log.info("training N=%d", N)
                model, _ = _fit(cfg, scn, generate(scn, cfg.train_count, cfg.seed, "train"), None)
            rows, _ = evaluate(test_data, Designer(method, cfg, scn, model))
            gr, gc, bad = _mean_row(rows)
            table.append(dict(N=int(N), method=method, gamma_r_db=gr, gamma_c_db=gc, infeasible=bad))
    write_csv(out, N_COLUMNS, table)
    return out


def bench_times(cfg: RunConfig, N: int, method: str, model: Model | None = None) -> np.ndarray:
    """Wall-clock seconds per sample for phase design plus the transmit beamformer.

    One extra sample runs first as warmup and is not timed.  The network
    weights do not affect timing, so an untrained model is used if none is
    given.
    """
    scn = cfg.scenario(N)
    if method == "exhaustive":
        total = cfg.levels ** N
        if total > cfg.budget:
            raise BudgetError(f"K^N = {cfg.levels}^{N} = {total} candidates exceeds budget {cfg.budget}")
    if method == "nn" and model is None:
        model = build_net(NetConfig.for_n(N), cfg.seed, dtype=cfg.dtype)
    designer = Designer(method, cfg, scn, model)
    data = generate(scn, cfg.bench_samples + 1, cfg.seed, "bench")
    times = []
    for i in range(len(data)):
        cp = data[i]
        t0 = time.perf_counter()
        v = euler_map(designer(cp, i))
        h_t, h_c = effective(cp, v)
        try:
            transmit_beamformer(h_t, h_c, scn)
        except InfeasibleError:
            pass
        times.append(time.perf_counter() - t0)
    return np.array(times[1:])


def cmd_bench(cfg: RunConfig) -> Path:
    out = _output(cfg.out, "bench")
    table = []
    for N in cfg.ns:
        for method in cfg.methods:
            t = bench_times(cfg, int(N), method)
            table.append(dict(N=int(N), method=method, samples=len(t),
                              mean_us=float(np.mean(t) * 1e6), median_us=float(np.median(t) * 1e6)))
            log.info("N=%d %s %.1f us", N, method, table[-1]["mean_us"])
    write_csv(out, BENCH_COLUMNS, table)
    return out


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-alpha": cmd_sweep_alpha,
    "sweep-n": cmd_sweep_n,
    "bench": cmd_bench,
}


# ---------------------------------------------------------------- CLI

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="risisac", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file with RunConfig fields")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                       help="override one config field, e.g. --set epochs=3")
        p.add_argument("-q", "--quiet", action="store_true")
    return parser


def config_from_args(args) -> RunConfig:
    raw = read_config(args.config) if args.config else {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise HarnessError("config", f"--set expects KEY=VALUE, got {item!r}")
        try:
            raw[key] = json.loads(value)
        except json.JSONDecodeError:
            raw[key] = value
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["out"] = args.out
    return RunConfig.from_dict(raw)


def _category(exc: BaseException) -> str:
    if isinstance(exc, HarnessError):
        return exc.category
    if isinstance(exc, BudgetError):
        return "budget"
    if isinstance(exc, (DatasetFormatError, ModelFormatError)):
        return "format"
    if isinstance(exc, OSError):
        return "io"
    if isinstance(exc, ValueError):
        return "value"
    return "internal"


EXIT_CODES = {"config": 2, "io": 3, "format": 4, "mismatch": 5, "budget": 6, "value": 7, "internal": 1}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = config_from_args(args)
        result = COMMANDS[args.command](cfg)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one error line
        category = _category(exc)
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {category}: {message}", file=sys.stderr)
        return EXIT_CODES[category]
    outputs = result if isinstance(result, tuple) else (result,)
    for p in outputs:
        print(p)
    return 0
