"""Experiment drivers behind the CLI subcommands.

Every driver takes an :class:`ExperimentConfig`, writes its CSV artifacts and
a ``config.resolved`` echo into ``out_dir``, and returns the in-memory result.
"""

from __future__ import annotations

import contextlib
import copy
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import accountant as acc
from . import bounds, data, dp, nn
from .config import BUDGETS, FULL_EPOCHS, ConfigError, ExperimentConfig
from .tensor import RngStream

log = logging.getLogger(__name__)

# Learning rates: FashionMNIST values are the tuned ones reported for SGD/Adam
# with and without privacy; MNIST/CIFAR values come from our own lr grid.
DEFAULT_LR = {
    ("mnist", True, "sgd"): 0.5,
    ("mnist", False, "sgd"): 0.1,
    ("fashion-mnist", True, "sgd"): 0.332,
    ("fashion-mnist", False, "sgd"): 0.107,
    ("fashion-mnist", True, "adam"): 1.32e-3,
    ("fashion-mnist", False, "adam"): 1.06e-3,
    ("cifar10", True, "sgd"): 0.5,
    ("cifar10", False, "sgd"): 0.05,
}
ADAM_FALLBACK_LR = 1e-3


def resolve(cfg: ExperimentConfig) -> ExperimentConfig:
    """Copy of ``cfg`` with dataset-dependent defaults filled in."""
    cfg = copy.deepcopy(cfg)
    if cfg.dataset not in BUDGETS:
        raise ConfigError(f"unknown dataset {cfg.dataset!r}; expected one of {sorted(BUDGETS)}")
    if cfg.architecture == "auto":
        cfg.architecture = "cifar" if cfg.dataset == "cifar10" else "mnist"
    if cfg.architecture not in ("mnist", "cifar"):
        raise ConfigError(f"unknown architecture {cfg.architecture!r}")
    if cfg.architecture == "cifar" and not cfg.long:
        raise ConfigError("the CIFAR10 model takes hours on CPU; pass --long to run it")
    if cfg.full and cfg.steps is None:
        cfg.epochs = FULL_EPOCHS[cfg.dataset]
    if cfg.budget_epsilon is None:
        cfg.budget_epsilon = BUDGETS[cfg.dataset]
    if cfg.learning_rate is None:
        cfg.learning_rate = DEFAULT_LR.get(
            (cfg.dataset, cfg.private, cfg.optimizer),
            ADAM_FALLBACK_LR if cfg.optimizer == "adam" else 0.1,
        )
    if cfg.probes == ("none",):
        cfg.probes = ()
    for p in cfg.probes:
        if p not in dp.PROBE_COLUMNS:
            raise ConfigError(f"unknown probe {p!r}; expected {sorted(dp.PROBE_COLUMNS)}")
    return cfg


def activation_of(cfg: ExperimentConfig, name: str | None = None) -> nn.Activation:
    return nn.Activation.parse(name or cfg.activation, cfg.scale, cfg.inverse_temp, cfg.offset)


def build_network(cfg: ExperimentConfig, activation: nn.Activation | None = None):
    act = activation or activation_of(cfg)
    return nn.build_cifar_net(act) if cfg.architecture == "cifar" else nn.build_mnist_net(act)


def dp_config(cfg: ExperimentConfig, n_train: int) -> dp.DpSgdConfig:
    """DpSgdConfig for ``n_train`` examples, solving the noise if it is ``auto``."""
    d = dp.DpSgdConfig(
        clip_norm=cfg.clip_norm,
        noise_multiplier=0.0,
        batch_size=cfg.batch_size,
        sampling_probability=cfg.sampling_probability,
        microbatch_size=cfg.microbatch_size,
        epochs=cfg.epochs,
        steps=cfg.steps,
        learning_rate=cfg.learning_rate,
        optimizer=cfg.optimizer,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps_hat=cfg.eps_hat,
        seed=cfg.seed,
        private=cfg.private,
        clip=cfg.clip,
        delta=cfg.delta,
        target_epsilon=cfg.target_epsilon,
        eval_every=cfg.eval_every,
        chunk_size=cfg.chunk_size,
    )
    if cfg.private:
        if cfg.noise_multiplier == "auto":
            d.noise_multiplier = acc.solve_noise_multiplier(
                d.q(n_train), d.total_steps(n_train), cfg.delta, cfg.budget_epsilon
            )
        else:
            d.noise_multiplier = float(cfg.noise_multiplier)
    return d


def load_data(cfg: ExperimentConfig, subset=None):
    root = data.resolve_data_dir(cfg.data_dir)
    train, test = data.load_dataset(cfg.dataset, root)
    train = train.subset(subset if subset is not None else cfg.train_subset)
    test = test.subset(cfg.test_subset)
    return train, test


def _out(cfg) -> Path:
    p = Path(cfg.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _echo(cfg, out: Path, extra: dict | None = None):
    text = cfg.to_text()
    if extra:
        text += "".join(f"# resolved {k} = {v!r}\n" for k, v in extra.items())
    (out / "config.resolved").write_text(text, encoding="utf-8")


@contextlib.contextmanager
def thread_limit(n):
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


# ---------------------------------------------------------------------------
# train


def run_training(cfg: ExperimentConfig, activation=None, datasets=None, subset=None):
    cfg = resolve(cfg)
    train_split, test_split = datasets or load_data(cfg, subset)
    net = build_network(cfg, activation)
    dcfg = dp_config(cfg, len(train_split))
    with thread_limit(cfg.threads):
        report = dp.train(net, train_split.as_tuple(), test_split.as_tuple(), dcfg,
                          probes=tuple(cfg.probes))
    return report, dcfg


def cmd_train(cfg: ExperimentConfig, datasets=None) -> dp.TrainReport:
    cfg = resolve(cfg)
    out = _out(cfg)
    report, dcfg = run_training(cfg, datasets=datasets)
    report.to_csv(out / "report.csv")
    _echo(cfg, out, {"noise_multiplier": dcfg.noise_multiplier,
                     "sampling_probability": dcfg.q(_n_train(cfg, datasets))})
    f = report.final
    delta = cfg.delta if cfg.private else 0
    print(f"accuracy={f['test_accuracy']:.4f} epsilon={f['epsilon']:.4g} delta={delta:g}")
    return report


def _n_train(cfg, datasets):
    if datasets is not None:
        return len(datasets[0])
    return len(load_data(cfg)[0])


# ---------------------------------------------------------------------------
# sweep


@dataclass
class SweepResult:
    rows: list  # (s, T, o, accuracy or nan, status)
    top_mean: tuple = ()
    best: tuple = ()

    def accuracy(self, s, T, o):
        for r in self.rows:
            if (r[0], r[1], r[2]) == (s, T, o):
                return r[3]
        raise KeyError((s, T, o))


def _sweep_cell(args):
    cfg, triplet = args
    s, T, o = triplet
    cell = copy.deepcopy(cfg)
    cell.activation = "tempered_sigmoid"
    cell.scale, cell.inverse_temp, cell.offset = s, T, o
    cell.probes = ()
    try:
        report, _ = run_training(cell, subset=cfg.sweep_subset)
        return (s, T, o, report.final["test_accuracy"], "ok")
    except Exception as e:  # a failed cell is recorded, the sweep goes on
        log.warning("sweep cell %s failed: %s", triplet, e)
        return (s, T, o, math.nan, f"error: {type(e).__name__}: {e}".replace(",", ";"))


def top_fraction_mean(rows, fraction=0.1):
    ok = [r for r in rows if r[4] == "ok"]
    if not ok:
        return ()
    ok.sort(key=lambda r: (-r[3], r[0], r[1], r[2]))
    top = ok[: max(1, int(round(fraction * len(ok))))]
    return tuple(float(np.mean([r[i] for r in top])) for i in range(3))


def cmd_sweep(cfg: ExperimentConfig) -> SweepResult:
    cfg = resolve(cfg)
    grid = [(s, T, o) for s in cfg.sweep_scale for T in cfg.sweep_inverse_temp
            for o in cfg.sweep_offset]
    if not grid:
        raise ConfigError("sweep grid is empty")
    if cfg.eval_every is None:
        cfg.eval_every = 10**9  # evaluate once, after the last step
    jobs = [(cfg, t) for t in grid]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(cfg.jobs) as ex:
            rows = list(ex.map(_sweep_cell, jobs))  # map keeps grid order
    else:
        rows = [_sweep_cell(j) for j in jobs]
    res = SweepResult(rows, top_fraction_mean(rows))
    ok = [r for r in rows if r[4] == "ok"]
    if ok:
        res.best = max(ok, key=lambda r: r[3])[:4]
    out = _out(cfg)
    with open(out / "sweep.csv", "w", encoding="utf-8", newline="") as f:
        f.write("scale,inverse_temp,offset,test_accuracy,status\n")
        for s, T, o, a, st in rows:
            f.write(f"{s:g},{T:g},{o:g},{dp._fmt(a)},{st}\n")
    _echo(cfg, out)
    if res.top_mean:
        print("top-10%% mean (s, T, o) = (%.3f, %.3f, %.3f)" % res.top_mean)
        print("best cell (s, T, o, accuracy) = (%g, %g, %g, %.4f)" % res.best)
    return res


# ---------------------------------------------------------------------------
# curve (paired activations) and activation-norm scenarios


CURVE_COLUMNS = ("scenario", "repeat", "epoch", "step", "epsilon", "test_accuracy",
                 "first_conv_act_norm", "grad_norm_median", "clipped_fraction")


@dataclass
class CurveResult:
    reports: dict = field(default_factory=dict)  # (scenario, repeat) -> TrainReport
    dominates: bool | None = None

    def mean_column(self, scenario, name):
        reps = [r for (s, _), r in sorted(self.reports.items()) if s == scenario]
        return np.mean([r.column(name) for r in reps], axis=0)

    def scenarios(self):
        return sorted({s for s, _ in self.reports}, key=_scenario_order)


def _scenario_order(s):
    return (s.startswith("dp-"), s)


def _curve_job(args):
    cfg, scenario, act_name, private, rep = args
    run = copy.deepcopy(cfg)
    run.seed = cfg.seed + rep
    run.private = private
    if not private:
        run.clip = False
        run.learning_rate = DEFAULT_LR.get((cfg.dataset, False, cfg.optimizer), 0.1)
    report, _ = run_training(run, activation=activation_of(cfg, act_name))
    report.theta = None
    return (scenario, rep), report


def activation_norm_probe(report: dp.TrainReport) -> np.ndarray:
    """Per-evaluation mean first-conv activation norm recorded by ``train``."""
    if "first_conv_act_norm" not in report.columns:
        raise KeyError("activation probe was disabled for this run")
    return report.column("first_conv_act_norm")


def cmd_curve(cfg: ExperimentConfig) -> CurveResult:
    """Train the curve activations with identical settings (and optionally a
    non-private ReLU baseline), write ``curve.csv`` and check dominance."""
    cfg = resolve(cfg)
    if "activation" not in cfg.probes:
        cfg.probes = tuple(cfg.probes) + ("activation",)
    jobs = [(cfg, f"dp-{a}", a, True, r) for r in range(cfg.repeats)
            for a in cfg.curve_activations]
    if cfg.curve_nonprivate:
        jobs += [(cfg, "nonprivate-relu", "relu", False, r) for r in range(cfg.repeats)]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(cfg.jobs) as ex:
            results = list(ex.map(_curve_job, jobs))
    else:
        results = [_curve_job(j) for j in jobs]
    res = CurveResult(dict(results))
    out = _out(cfg)
    with open(out / "curve.csv", "w", encoding="utf-8", newline="") as f:
        f.write(",".join(CURVE_COLUMNS) + "\n")
        for (scenario, rep) in sorted(res.reports, key=lambda k: (_scenario_order(k[0]), k[1])):
            rpt = res.reports[(scenario, rep)]
            for row in rpt.rows:
                vals = [scenario, str(rep)] + [dp._fmt(row.get(c)) for c in CURVE_COLUMNS[2:]]
                f.write(",".join(vals) + "\n")
    _echo(cfg, out)
    names = [f"dp-{a}" for a in cfg.curve_activations]
    if len(names) == 2 and all(any(s == n for s, _ in res.reports) for n in names):
        base, cand = names
        eps = res.mean_column(cand, "epsilon")
        a_base = res.mean_column(base, "test_accuracy")
        a_cand = res.mean_column(cand, "test_accuracy")
        mask = eps >= cfg.warmup_epsilon
        res.dominates = bool(np.all(a_cand[mask] >= a_base[mask]))
        print(f"{cand} >= {base} for every epsilon >= {cfg.warmup_epsilon}: {res.dominates}")
        print(f"final: {cand}={a_cand[-1]:.4f} {base}={a_base[-1]:.4f} at epsilon={eps[-1]:.4g}")
    return res


# ---------------------------------------------------------------------------
# accountant and bounds


def cmd_accountant(cfg: ExperimentConfig) -> list:
    """Epsilon table over step checkpoints, or inversion for one parameter.

    Returns a list of (steps, epsilon, order) rows; inversion prints the
    solved value first.
    """
    n = cfg.dataset_size or {"cifar10": 50_000}.get(cfg.dataset, 60_000)
    q = cfg.sampling_probability if cfg.sampling_probability is not None else cfg.batch_size / n
    steps = cfg.steps if cfg.steps is not None else int(math.ceil(cfg.epochs / q))
    budget = cfg.target_epsilon if cfg.target_epsilon is not None else cfg.budget_epsilon
    budget = budget if budget is not None else BUDGETS.get(cfg.dataset)
    M = cfg.noise_multiplier
    if cfg.solve_for == "noise_multiplier":
        M = acc.solve_noise_multiplier(q, steps, cfg.delta, budget)
        print(f"noise_multiplier = {M:.6f}")
    elif cfg.solve_for == "steps":
        steps = acc.solve_steps(q, _noise(M), cfg.delta, budget)
        print(f"steps = {steps} (epochs = {steps * q:.3f})")
    elif cfg.solve_for == "sampling_probability":
        q = acc.solve_sampling_probability(_noise(M), steps, cfg.delta, budget)
        print(f"sampling_probability = {q:.8f} (batch = {q * n:.1f})")
    elif cfg.solve_for != "none":
        raise ConfigError(f"unknown solve_for {cfg.solve_for!r}")
    M = _noise(M)
    k = max(1, cfg.checkpoints)
    marks = sorted({int(round(steps * i / k)) for i in range(0, k + 1)})
    ledger = acc.RdpLedger(q, M)
    rows = []
    for s in marks:
        ledger.steps = s
        sp = ledger.spending(cfg.delta)
        rows.append((s, sp.epsilon, sp.optimal_order))
    print(f"q = {q:.6g}  noise_multiplier = {M:.6g}  delta = {cfg.delta:g}")
    print(f"{'steps':>10} {'epochs':>8} {'epsilon':>10} {'order':>6}")
    for s, e, o in rows:
        print(f"{s:>10d} {s * q:>8.2f} {e:>10.4f} {o:>6d}")
    out = _out(cfg)
    with open(out / "accountant.csv", "w", encoding="utf-8", newline="") as f:
        f.write("steps,epochs,epsilon,optimal_order\n")
        for s, e, o in rows:
            f.write(f"{s},{s * q:.6g},{e:.8g},{o}\n")
    return rows


def _noise(M):
    if M == "auto":
        raise ConfigError("noise_multiplier = auto needs solve_for = noise_multiplier")
    return float(M)


def cmd_bounds(cfg: ExperimentConfig) -> bounds.BoundsReport:
    rng = RngStream(cfg.seed).derive("bounds")
    rep = bounds.verify_bounds(cfg.trials, cfg.dim, cfg.num_classes,
                               (-cfg.t_max, cfg.t_max), rng)
    adv = bounds.verify_bounds(max(1, cfg.trials // 10), cfg.dim, cfg.num_classes,
                               (-cfg.t_max, cfg.t_max), rng.derive("adversarial"),
                               adversarial=True)
    out = _out(cfg)
    rep.to_csv(out / "bounds.csv")
    adv.to_csv(out / "bounds_adversarial.csv")
    _echo(cfg, out)
    print(f"random: {len(rep.violations)} violations, max ratio "
          f"binary={rep.max_ratio('binary'):.6f} "
          f"block={rep.max_ratio('multiclass_block'):.6f} "
          f"full={rep.max_ratio('multiclass_full'):.6f}")
    print(f"adversarial: {len(adv.violations)} violations, max binary ratio "
          f"{adv.max_ratio('binary'):.9f}")
    rep.adversarial = adv
    return rep
