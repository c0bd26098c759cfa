"""Capacity-scaling harness: sweep grids, optimality verdicts, selection and exponential fit."""

from __future__ import annotations

import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from lqgan.errors import ConfigError, DataError, LqgError, NoOptimumError
from lqgan.nets import MlpConfig, mlp_param_count
from lqgan.quantum import count_params

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (42, 693094, 13671417)
VERDICTS = ("chaotic", "transitional", "stable")


# ---------------------------------------------------------------------------
# Optimality


@dataclass
class Verdict:
    verdict: str
    transition_step: int | None
    window_mean: float
    window_std: float
    global_min: float

    def to_dict(self) -> dict:
        return asdict(self)


def _window_ok(series: np.ndarray, window: int, tau_sigma: float, tau_min: float):
    """Per-window (mean, population std, ok) for every window ending at i >= window - 1."""
    gmin = float(series.min())
    n = len(series)
    means = np.empty(n - window + 1)
    stds = np.empty(n - window + 1)
    for j in range(n - window + 1):
        w = series[j:j + window]
        means[j] = w.mean()
        stds[j] = w.std()
    ok = (stds <= tau_sigma * means) & (means <= (1.0 + tau_min) * gmin)
    return means, stds, ok, gmin


def detect_optimality(fid, steps=None, window: int = 20, tau_sigma: float = 0.05, tau_min: float = 0.10,
                      burn_in: int = 2000) -> Verdict:
    """Classify an FID series as stable, transitional or chaotic.

    A window of ``window`` consecutive evaluations is settled when its
    standard deviation is at most ``tau_sigma`` times its mean and its mean
    is within ``tau_min`` of the global minimum. A run whose final window is
    not settled is chaotic. Otherwise the onset is the first step of the
    earliest window from which every later window is settled: at or before
    ``burn_in`` the run is stable (transition step 0), after it the run is
    transitional and the onset step is reported.
    """
    f = np.asarray(fid, dtype=np.float64)
    if window < 2:
        raise ConfigError("window must be at least 2", window=window)
    if len(f) < 2 * window:
        raise ConfigError("FID series shorter than two windows", length=len(f), window=window)
    if not np.all(np.isfinite(f)):
        raise DataError("FID series contains non-finite values")
    st = np.arange(len(f)) if steps is None else np.asarray(steps)
    means, stds, ok, gmin = _window_ok(f, window, tau_sigma, tau_min)
    last_mean, last_std = float(means[-1]), float(stds[-1])
    if not ok[-1]:
        return Verdict("chaotic", None, last_mean, last_std, gmin)
    bad = np.nonzero(~ok)[0]
    first = int(bad[-1]) + 1 if len(bad) else 0
    onset = int(st[first])
    if onset <= burn_in:
        return Verdict("stable", 0, last_mean, last_std, gmin)
    return Verdict("transitional", onset, last_mean, last_std, gmin)


@dataclass
class CapacityResult:
    capacity: int
    verdict: str
    final_fid: float
    label: str = ""


def select_optimal_capacity(results: list[CapacityResult], tau_min: float = 0.10) -> CapacityResult:
    """Smallest stable-or-transitional capacity whose final FID is within tau_min of the best.

    When a stable run exists, candidates larger than the largest stable
    capacity are ignored. Raises NoOptimumError if every run is chaotic.
    """
    if len(results) < 2:
        raise ConfigError("need at least two capacities to select from", count=len(results))
    good = [r for r in results if r.verdict in ("stable", "transitional")]
    if not good:
        raise NoOptimumError("no optimum in grid: every capacity is chaotic; extend the grid upward",
                             capacities=[r.capacity for r in results])
    stable = [r.capacity for r in good if r.verdict == "stable"]
    if stable:
        cap = max(stable)
        good = [r for r in good if r.capacity <= cap]
    best = min(r.final_fid for r in good)
    eligible = [r for r in good if r.final_fid <= (1.0 + tau_min) * best]
    return min(eligible, key=lambda r: r.capacity)


# ---------------------------------------------------------------------------
# Exponential fit


@dataclass
class ScalingFit:
    a: float
    b: float
    residuals: list[float]
    band: dict[str, float]
    points: list[tuple[float, float]] = field(default_factory=list)

    def predict(self, x):
        return self.a * np.exp(self.b * np.asarray(x, dtype=np.float64))

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "residuals": self.residuals, "band": self.band,
                "points": [list(p) for p in self.points]}


def fit_exponential(points) -> ScalingFit:
    """Fit P = a * exp(b * x) by least squares on ln P.

    ``points`` is a sequence of (x, P) pairs; repeated x values (one per
    seed) are all used in the fit and also give the 1-sigma band per x.
    """
    pts = [(float(x), float(p)) for x, p in points]
    if any(p <= 0 or not np.isfinite(p) for _, p in pts):
        raise DataError("optimal capacities must be positive and finite", points=pts)
    xs = np.array([x for x, _ in pts])
    if len(np.unique(xs)) < 3:
        raise ConfigError("need at least three distinct generator capacities", distinct=len(np.unique(xs)))
    ys = np.log(np.array([p for _, p in pts]))
    design = np.stack([np.ones_like(xs), xs], axis=1)
    (intercept, slope), *_ = np.linalg.lstsq(design, ys, rcond=None)
    residuals = ys - design @ np.array([intercept, slope])
    band = {}
    for x in np.unique(xs):
        vals = np.array([p for xx, p in pts if xx == x])
        band[repr(float(x))] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return ScalingFit(float(np.exp(intercept)), float(slope), [float(r) for r in residuals], band, pts)


# ---------------------------------------------------------------------------
# Sweep plans


QUANTUM_CRITIC_RANGES = {  # generator layers -> (min, max) critic hidden sizes
    2: ([75, 36], [350, 175]),
    4: ([125, 62], [800, 400]),
    6: ([350, 175], [900, 450]),
    8: ([1000, 500], [1500, 750]),
}
CLASSICAL_GENERATOR_RANGES = {
    2: ([50, 25], [400, 200]),
    4: ([100, 50], [700, 350]),
    6: ([300, 150], [1200, 600]),
    8: ([600, 300], [2000, 1000]),
}


def size_grid(lo, hi, points: int) -> list[list[int]]:
    """Geometric grid of [N1, N2] sizes from ``lo`` to ``hi`` inclusive, N2 = N1 // 2 in between."""
    if points < 2:
        return [list(lo)]
    n1 = np.geomspace(lo[0], hi[0], points)
    out = [list(lo)]
    for v in n1[1:-1]:
        a = int(round(v))
        out.append([a, a // 2])
    out.append(list(hi))
    return out


@dataclass
class RunSpec:
    run_id: str
    axis: str
    seed: int
    generator: dict
    critic: list[int]
    train: dict

    @property
    def gen_capacity(self) -> int:
        g = self.generator
        if g["kind"] == "quantum":
            return count_params(g["qubits"], g["layers"])
        return mlp_param_count(MlpConfig.generator(g["hidden"], g.get("d_noise", 10), g.get("d_out", 24)))

    @property
    def critic_capacity(self) -> int:
        return mlp_param_count(MlpConfig.critic(self.critic, self.train.get("d_z", 24)))


@dataclass
class SweepPlan:
    """Grid of runs for one axis of the capacity study.

    ``axis`` is "critic-for-quantum-gen" (vary critic per quantum depth) or
    "classical-gen-for-fixed-critic" (vary classical generator per fixed
    critic). ``qubits`` may list several register sizes, which serve as the
    generator-capacity axis at desk scale.
    """

    axis: str = "critic-for-quantum-gen"
    layers: list[int] = field(default_factory=lambda: [2, 4, 6, 8])
    qubits: list[int] = field(default_factory=lambda: [12])
    grid: dict = field(default_factory=dict)
    grid_points: int = 5
    seeds: list[int] = field(default_factory=lambda: list(DEFAULT_SEEDS))
    fixed_critics: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: dict = field(default_factory=lambda: {"kind": "latent-mixture", "n": 2500})

    def __post_init__(self):
        if self.axis not in ("critic-for-quantum-gen", "classical-gen-for-fixed-critic"):
            raise ConfigError("unknown sweep axis", axis=self.axis)
        if not self.seeds:
            raise ConfigError("sweep needs at least one seed")

    @classmethod
    def full_quantum(cls) -> "SweepPlan":
        return cls(grid={str(k): size_grid(*v, 6) for k, v in QUANTUM_CRITIC_RANGES.items()})

    @classmethod
    def full_classical(cls, fixed_critics: dict) -> "SweepPlan":
        return cls(axis="classical-gen-for-fixed-critic", fixed_critics=fixed_critics,
                   grid={str(k): size_grid(*v, 6) for k, v in CLASSICAL_GENERATOR_RANGES.items()},
                   train={"lr_d": 0.0005, "lr_g": 0.0001, "generator": "classical"})

    @classmethod
    def desk(cls) -> "SweepPlan":
        return cls(layers=[2], qubits=[4, 6, 8, 10], grid={"*": [[8, 4], [32, 16], [125, 62]]},
                   train={"epochs": 2000, "batch": 64, "eval_cohort": 2000, "eval_interval": 50},
                   data={"kind": "latent-mixture", "n": 500})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SweepPlan":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError("unknown sweep plan fields", fields=sorted(unknown))
        return cls(**d)

    def _grid_for(self, key) -> list[list[int]]:
        g = self.grid.get(str(key), self.grid.get("*"))
        if g is None:
            table = QUANTUM_CRITIC_RANGES if self.axis == "critic-for-quantum-gen" else CLASSICAL_GENERATOR_RANGES
            if key not in table:
                raise ConfigError("no grid for generator depth", layers=key)
            g = size_grid(*table[key], self.grid_points)
        return [list(x) for x in g]

    def runs(self) -> list[RunSpec]:
        out = []
        for seed in self.seeds:
            for q in self.qubits:
                for layers in self.layers:
                    if self.axis == "critic-for-quantum-gen":
                        for c in self._grid_for(layers):
                            rid = f"q{q}_l{layers}_c{c[0]}x{c[1]}_s{seed}"
                            out.append(RunSpec(rid, self.axis, seed, {"kind": "quantum", "qubits": q, "layers": layers},
                                               c, dict(self.train)))
                    else:
                        crit = self.fixed_critics.get(str(layers)) or self.fixed_critics.get(f"{q}/{layers}")
                        if crit is None:
                            raise ConfigError("classical axis needs the chosen critic per depth", layers=layers)
                        for h in self._grid_for(layers):
                            rid = f"cg{h[0]}x{h[1]}_l{layers}_q{q}_s{seed}"
                            out.append(RunSpec(rid, self.axis, seed, {"kind": "classical", "hidden": h, "layers": layers, "d_out": 2 * q,
                                                                      "qubits": q}, list(crit), dict(self.train)))
        return out


# ---------------------------------------------------------------------------
# Running


def _atomic_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
    os.replace(tmp, path)


def run_one(spec: RunSpec, root: str, plan_data: dict) -> dict:
    """Execute (or resume) one run and write its verdict.json. Returns the verdict record."""
    from lqgan import gan, quantum
    from lqgan.rng import stream

    rdir = Path(root) / spec.run_id
    vpath = rdir / "verdict.json"
    if vpath.exists():
        with open(vpath) as f:
            return json.load(f)
    rdir.mkdir(parents=True, exist_ok=True)
    train_kw = {k: v for k, v in spec.train.items() if k != "d_z"}
    train_kw.setdefault("generator", spec.generator["kind"])
    cfg = gan.GanTrainConfig(seed=spec.seed, **train_kw)
    _atomic_json(rdir / "config.json", {"run_id": spec.run_id, "axis": spec.axis, "seed": spec.seed,
                                        "generator": spec.generator, "critic": spec.critic,
                                        "train": cfg.to_dict(), "data": plan_data})
    if spec.generator["kind"] == "quantum":
        qspec = quantum.CircuitSpec(spec.generator["qubits"], spec.generator["layers"])
        generator = gan.QuantumGenerator(qspec, stream(spec.seed, "init/qgen"))
    else:
        d_out = 2 * spec.generator.get("qubits", 12)
        generator = gan.ClassicalGenerator(spec.generator["hidden"], stream(spec.seed, "init/cgen"),
                                           spec.generator.get("d_noise", 10), d_out)
    d_z = generator.latent_dim
    critic = gan.Critic(spec.critic, stream(spec.seed, "init/critic"), d_z)
    kind = plan_data.get("kind", "latent-mixture")
    if kind != "latent-mixture":
        raise ConfigError("sweeps currently run on the synthetic latent target", kind=kind)
    n = int(plan_data.get("n", 2500))
    real = gan.latent_mixture(n, spec.seed, d_z)
    reference = gan.latent_mixture(cfg.eval_cohort, spec.seed + 1_000_003, d_z)
    evaluator = gan.Evaluator(reference)
    gan.train(cfg, generator, critic, real, evaluator, rdir)
    return finalize_run(rdir)


def _capacities(conf: dict) -> dict:
    g, axis = conf["generator"], conf["axis"]
    spec = RunSpec(conf["run_id"], axis, conf["seed"], g, conf["critic"], {"d_z": 2 * g["qubits"]})
    return {"gen_capacity": spec.gen_capacity, "critic_capacity": spec.critic_capacity,
            "qgen_capacity": count_params(g["qubits"], g["layers"]),
            "varied_capacity": spec.critic_capacity if axis == "critic-for-quantum-gen" else spec.gen_capacity}


def finalize_run(rdir: str | os.PathLike) -> dict:
    """Apply the optimality rule to a run's evals.csv and write verdict.json.

    Works on any directory holding config.json and evals.csv, so finished
    runs can be re-judged and externally produced FID series can be fed in.
    """
    from lqgan.gan import read_evals

    rdir = Path(rdir)
    try:
        with open(rdir / "config.json") as f:
            conf = json.load(f)
        evals = read_evals(rdir / "evals.csv")
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"run directory is incomplete: {exc}", run=str(rdir)) from exc
    t = conf.get("train", {})
    window = t.get("window", 20)
    fids = [e["fid"] for e in evals]
    steps = [e["step"] for e in evals]
    try:
        v = detect_optimality(fids, steps, window, t.get("tau_sigma", 0.05), t.get("tau_min", 0.10),
                              t.get("burn_in", 2000)).to_dict()
    except (ConfigError, DataError) as exc:
        # too short or non-finite: the run never settled
        tail = np.asarray(fids[-window:], dtype=np.float64)
        v = {"verdict": "chaotic", "transition_step": None,
             "window_mean": float(tail.mean()) if len(tail) else float("nan"),
             "window_std": float("nan"), "global_min": float("nan"), "note": exc.message}
    rec = {"run_id": conf["run_id"], "seed": conf["seed"], "axis": conf["axis"], "generator": conf["generator"],
           "critic": conf["critic"], **_capacities(conf), **v, "final_fid": v["window_mean"],
           "final_jsd_feat": evals[-1]["jsd_feat"] if evals else float("nan"),
           "last_step": steps[-1] if steps else 0}
    _atomic_json(rdir / "verdict.json", rec)
    return rec


def _run_safe(args):
    spec, root, plan_data = args
    try:
        return run_one(spec, root, plan_data)
    except LqgError as exc:
        return {"run_id": spec.run_id, "error": exc.to_dict()}
    except Exception as exc:  # a broken run must not stop the sweep
        return {"run_id": spec.run_id, "error": {"kind": type(exc).__name__, "message": str(exc),
                                                  "trace": traceback.format_exc()}}


def collect(root: str | os.PathLike) -> list[dict]:
    """Verdict records of every run under ``root``.

    Runs with an evals.csv but no verdict.json (interrupted, or written by
    another tool) are judged on the spot.
    """
    out = []
    for d in sorted(p for p in Path(root).iterdir() if p.is_dir()):
        vpath = d / "verdict.json"
        if vpath.exists():
            with open(vpath) as f:
                out.append(json.load(f))
        elif (d / "config.json").exists() and (d / "evals.csv").exists():
            out.append(finalize_run(d))
    return out


def select_and_fit(records: list[dict], tau_min: float = 0.10) -> dict:
    """Pick the optimal varied capacity per (seed, quantum capacity), then fit across quantum capacities.

    On the critic axis the varied network is the critic; on the classical
    axis it is the classical generator, grouped by the quantum generator
    whose chosen critic it was trained against.
    """
    groups: dict[tuple[int, int], list[dict]] = {}
    for r in records:
        if "error" in r:
            continue
        groups.setdefault((r["seed"], r["qgen_capacity"]), []).append(r)
    chosen = []
    failures = []
    for (seed, qcap), recs in sorted(groups.items()):
        cands = [CapacityResult(r["varied_capacity"], r["verdict"], r["final_fid"], r["run_id"]) for r in recs]
        try:
            best = select_optimal_capacity(cands, tau_min)
            chosen.append({"seed": seed, "qgen_capacity": qcap, "optimal_capacity": best.capacity,
                           "run_id": best.label})
        except (NoOptimumError, ConfigError) as exc:
            failures.append({"seed": seed, "qgen_capacity": qcap, "error": exc.to_dict()})
    out = {"selections": chosen, "failures": failures}
    pts = [(c["qgen_capacity"], c["optimal_capacity"]) for c in chosen]
    try:
        out["fit"] = fit_exponential(pts).to_dict()
    except (ConfigError, DataError) as exc:
        out["fit"] = None
        out["fit_error"] = exc.to_dict()
    return out


def run_sweep(plan: SweepPlan, root: str | os.PathLike, workers: int = 1, budget: int | None = None) -> dict:
    """Run every grid point not yet finished, then select optima and fit.

    Finished runs (those with verdict.json) are skipped, so an interrupted
    sweep resumes where it stopped. ``budget`` caps how many new runs start.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    _atomic_json(root / "plan.json", plan.to_dict())
    todo = [r for r in plan.runs() if not (root / r.run_id / "verdict.json").exists()]
    if budget is not None:
        todo = todo[:budget]
    jobs = [(r, str(root), plan.data) for r in todo]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_safe, jobs))
    else:
        results = [_run_safe(j) for j in jobs]
    errors = [r for r in results if "error" in r]
    for e in errors:
        log.warning("run %s failed: %s", e["run_id"], e["error"].get("message"))
    summary = select_and_fit(collect(root), plan.train.get("tau_min", 0.10))
    summary["errors"] = errors
    if summary.get("fit") is not None:
        _atomic_json(root / "scaling_fit.json", summary["fit"])
    _atomic_json(root / "selection.json", summary)
    return summary


def fit_from_sweep(root: str | os.PathLike, tau_min: float = 0.10) -> dict:
    summary = select_and_fit(collect(root), tau_min)
    if summary.get("fit") is None:
        raise DataError("sweep does not support a fit", detail=summary.get("fit_error"),
                        failures=summary["failures"])
    _atomic_json(Path(root) / "scaling_fit.json", summary["fit"])
    return summary
