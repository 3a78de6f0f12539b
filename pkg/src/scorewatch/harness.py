"""Synthetic experiments: planted changes, power curves, null checks and timing.

Every replicate draws from its own counter-based substream, so a curve is
bit-identical for a fixed seed no matter how replicates are scheduled.
Per-replicate results can be cached on disk (``SCOREWATCH_CACHE``) so that an
interrupted run resumes where it stopped.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import adcore as ad
from .detect import (InformationOperator, TestConfig, auto_test, cg_solve, linear_stat,
                     restrict_components)
from .errors import (ConditioningError, ConfigError, ConvergenceError, DomainError,
                     ScorewatchError, SizeError)
from .models.arma import ArmaModel, coefficients_from_roots
from .models.hmm import HmmModel
from .models.io import program_from_spec
from .models.linear import LinearModel, MlpModel
from .models.topic import TopicModel

TESTS = ("lin", "scan", "auto")
PARTIAL_LIMIT = 0.05
# desk-scale limits of the runtime benchmark
BENCH_MAX_TERMS_X_DIM = 20_000_000
BENCH_MLP_SIGMA = 0.1
ARMA_ROOT_RANGE = (1.5, 3.0)


# ---------------------------------------------------------------------------
# random streams


def substream(seed, *key) -> np.random.Generator:
    """Philox generator for the substream ``key`` of ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=key)))


def _derived_seed(seed, *key) -> int:
    return int(np.random.SeedSequence(int(seed), spawn_key=key).generate_state(1)[0])


def _as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return substream(seed)


# ---------------------------------------------------------------------------
# pre-change parameters and planted changes


@dataclass(frozen=True)
class BaseParameter:
    """A pre-change parameter, plus the construction roots for ARMA models."""

    theta: np.ndarray
    ar_roots: np.ndarray | None = None
    ma_roots: np.ndarray | None = None


def hmm_transition(N, rng) -> np.ndarray:
    """Rows ``(2N)^{-1} 1 + Dirichlet(0.5 1) / 2``; every entry is at least ``1 / (2N)``."""
    return 0.5 / N + 0.5 * rng.dirichlet(np.full(N, 0.5), size=N)


def draw_parameter(program, rng) -> BaseParameter:
    """Random pre-change parameter for the synthetic scenarios of each model kind.

    Linear and network weights are standard normal (the network uses half
    that scale). ARMA roots are uniform on ``(1.5, 3)``. HMM emission means
    are ``0..N-1``. Topic-model emissions mix a uniform law with a
    Dirichlet(0.5) draw within each cluster.
    """
    if isinstance(program, LinearModel):
        theta = rng.standard_normal(program.d)
        if program.monitor_sigma:
            theta = np.append(theta, np.log(program.sigma))
        return BaseParameter(theta)
    if isinstance(program, MlpModel):
        return BaseParameter(0.5 * rng.standard_normal(program.dim))
    if isinstance(program, ArmaModel):
        lam = rng.uniform(*ARMA_ROOT_RANGE, size=program.r)
        mu = rng.uniform(*ARMA_ROOT_RANGE, size=program.q)
        phi, varphi = coefficients_from_roots(lam, mu)
        return BaseParameter(np.concatenate([phi, varphi]), lam, mu)
    if isinstance(program, HmmModel):
        q = hmm_transition(program.N, rng)
        means = np.arange(program.N, dtype=float)
        return BaseParameter(np.concatenate([q[:, :-1].reshape(-1), means]))
    if isinstance(program, TopicModel):
        q = hmm_transition(program.N, rng)
        g = np.empty(program.M)
        for c in range(program.N):
            words = program.members(c)
            g[words] = 0.5 / words.size + 0.5 * rng.dirichlet(np.full(words.size, 0.5))
        return BaseParameter(program.pack(q, g))
    raise ConfigError(f"no synthetic parameter draw for {type(program).__name__}")


def plant_change(program, base: BaseParameter, p: int, delta: float):
    """``(theta0, theta1)`` for a jump of size ``delta``.

    Linear, network, and topic models add ``delta`` to the first ``p``
    components. The HMM moves ``delta`` of mass from the ``(1, 1)`` entry of
    the transition matrix to the ``(1, N)`` entry. ARMA models shift every AR
    construction root by ``delta`` and re-extract the coefficients. For the
    last two, ``p`` is fixed by the construction and only checked.

    Raises
    ------
    DomainError
        If the post-change parameter leaves the model's domain.
    """
    theta0 = np.array(base.theta, dtype=float)
    d = theta0.size
    if not 1 <= p <= d:
        raise ConfigError(f"sparsity p must lie in 1..{d}, got {p}")
    theta1 = theta0.copy()
    if delta == 0:
        return theta0, theta1
    if isinstance(program, ArmaModel):
        if base.ar_roots is None:
            raise ConfigError("ARMA changes need the construction roots")
        lam = np.asarray(base.ar_roots, dtype=float) + delta
        if np.any(np.abs(lam) <= 1.0):
            raise DomainError("shifted AR roots leave the stationary region")
        phi, varphi = coefficients_from_roots(lam, base.ma_roots)
        theta1 = np.concatenate([phi, varphi])
    elif isinstance(program, HmmModel):
        theta1[0] -= delta
    else:
        theta1[:p] += delta
    program.check_domain(theta1)
    return theta0, theta1


def simulate(program, theta0, theta1, tau, n, seed):
    """``n`` observations from ``theta0`` up to ``tau`` and from ``theta1`` afterwards.

    ``seed`` may be an integer, a ``SeedSequence`` or a ``Generator``; with
    ``theta1 == theta0`` the draw equals a pure null draw from the same seed.
    """
    if not 0 <= tau <= n:
        raise ConfigError(f"changepoint tau must lie in 0..{n}, got {tau}")
    return program.simulate(np.asarray(theta0, dtype=float), n, _as_rng(seed),
                            theta_after=np.asarray(theta1, dtype=float), tau=tau)


# ---------------------------------------------------------------------------
# scenarios and power curves


@dataclass(frozen=True)
class ScenarioConfig:
    """One power-curve experiment.

    ``model`` is a model-spec mapping (``kind``, ``dim``, ``params``). The
    fit starts from the pre-change parameter when ``init_at_truth`` is set.
    """

    model: dict
    n: int = 400
    tau: int | None = None
    p: int = 1
    deltas: tuple = (0.0,)
    reps: int = 200
    seed: int = 0
    test: TestConfig = field(default_factory=TestConfig)
    restrict: tuple | None = None
    init_at_truth: bool = True
    name: str = "scenario"

    def __post_init__(self):
        deltas = tuple(float(x) for x in self.deltas)
        if 0.0 not in deltas:
            raise ConfigError("the delta grid must include 0 (the false-alarm point)")
        object.__setattr__(self, "deltas", deltas)
        if self.n < 2 or self.reps < 1:
            raise ConfigError("need n >= 2 and reps >= 1")
        tau = self.n // 2 if self.tau is None else int(self.tau)
        object.__setattr__(self, "tau", tau)
        taus = self.test.taus(self.n)
        if not taus[0] <= tau <= taus[-1]:
            raise ConfigError(f"tau={tau} lies outside the scanned range {taus[0]}..{taus[-1]}")
        d = self.program().dim
        if not 1 <= self.p <= d:
            raise ConfigError(f"sparsity p must lie in 1..{d}, got {self.p}")
        if self.restrict is not None:
            object.__setattr__(self, "restrict", tuple(int(i) for i in self.restrict))
            restrict_components(self.test, self.restrict).components(d)

    def program(self):
        return program_from_spec(self.model)

    def test_config(self) -> TestConfig:
        cfg = self.test
        return cfg if self.restrict is None else restrict_components(cfg, self.restrict)

    def to_json(self) -> dict:
        out = asdict(self)
        out["test"] = self.test.to_json()
        out["deltas"] = list(self.deltas)
        out["restrict"] = None if self.restrict is None else list(self.restrict)
        return out

    def config_hash(self) -> str:
        return config_hash(self.to_json())

    @classmethod
    def from_dict(cls, obj: dict) -> "ScenarioConfig":
        """Build from a parsed JSON/TOML mapping.

        ``delta_grid = {max, num}`` is accepted in place of an explicit
        ``deltas`` list and expands to ``linspace(0, max, num)``.
        """
        obj = dict(obj)
        known = set(cls.__dataclass_fields__) | {"delta_grid"}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown scenario fields: {sorted(unknown)}")
        if "model" not in obj:
            raise ConfigError('scenario config needs a "model" table')
        grid = obj.pop("delta_grid", None)
        if grid is not None:
            if "deltas" in obj:
                raise ConfigError("give either deltas or delta_grid, not both")
            obj["deltas"] = tuple(np.linspace(0.0, float(grid["max"]), int(grid["num"])))
        test = dict(obj.pop("test", None) or {})
        test_fields = set(TestConfig.__dataclass_fields__)
        bad = set(test) - test_fields
        if bad:
            raise ConfigError(f"unknown test-config fields: {sorted(bad)}")
        if "tau_range" in test:
            test["tau_range"] = tuple(test["tau_range"])
        if test.get("restrict") is not None:
            test["restrict"] = tuple(test["restrict"])
        for key in ("deltas", "restrict"):
            if obj.get(key) is not None:
                obj[key] = tuple(obj[key])
        return cls(test=TestConfig(**test), **obj)


def config_hash(obj) -> str:
    """First 16 hex digits of the SHA-256 of the canonical JSON form."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _json_default(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.integer, np.floating)):
        return x.item()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _finite(x):
    x = float(x)
    return x if math.isfinite(x) else None


def _clean(obj):
    """Copy of ``obj`` with non-finite floats replaced by ``None``."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return _finite(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _run_rep(config: ScenarioConfig, rep: int, j: int) -> dict:
    """Simulate and test one (replicate, delta) cell; errors are recorded, not raised."""
    program = config.program()
    delta = config.deltas[j]
    record = {"rep": rep, "j": j, "delta": delta}
    try:
        base = draw_parameter(program, substream(config.seed, rep))
        theta0, theta1 = plant_change(program, base, config.p, delta)
        data = simulate(program, theta0, theta1, config.tau, config.n,
                        np.random.SeedSequence(config.seed, spawn_key=(rep, j)))
        cfg = config.test_config().replace(seed=_derived_seed(config.seed, rep, j, 1))
        report = auto_test(program, data, cfg, init=theta0 if config.init_at_truth else None)
    except ScorewatchError as exc:
        record["error"] = f"{type(exc).__name__}: {exc}"
        return record
    record.update(
        psi_lin=report.psi_lin, psi_scan=report.psi_scan, psi_auto=report.psi_auto,
        r_lin=_finite(report.r_lin), r_scan=_finite(report.r_scan),
        tau_hat_lin=report.tau_hat_lin, tau_hat_scan=report.tau_hat_scan,
        subset_hat=list(report.subset_hat), fit_failed=report.fit_failed,
        skipped_fraction=float(np.mean(report.skipped)) if report.skipped.size else 0.0)
    return record


class _RepCache:
    """One JSON file per (replicate, delta) cell under ``root/<config hash>/``."""

    def __init__(self, root, key):
        self.dir = None if root is None else Path(root) / key

    def path(self, rep, j):
        return self.dir / f"r{rep:05d}_d{j:03d}.json"

    def load(self, rep, j):
        if self.dir is None:
            return None
        path = self.path(rep, j)
        if not path.exists():
            return None
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            return None

    def store(self, record):
        if self.dir is None:
            return
        self.dir.mkdir(parents=True, exist_ok=True)
        path = self.path(record["rep"], record["j"])
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(record, sort_keys=True), encoding="utf-8")
        os.replace(tmp, path)


def _rep_chunk(config, cells):
    return [_run_rep(config, rep, j) for rep, j in cells]


def run_cells(config: ScenarioConfig, cells, jobs=1, cache_dir=None) -> list[dict]:
    """Records for ``(rep, j)`` cells, in the order given."""
    cache = _RepCache(cache_dir, config.config_hash())
    done = {}
    todo = []
    for cell in cells:
        hit = cache.load(*cell)
        if hit is None:
            todo.append(cell)
        else:
            done[cell] = hit
    if jobs > 1 and len(todo) > 1:
        chunks = [todo[k::jobs] for k in range(jobs)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for part in pool.map(_rep_chunk, [config] * len(chunks), chunks):
                for rec in part:
                    done[(rec["rep"], rec["j"])] = rec
                    cache.store(rec)
    else:
        for rep, j in todo:
            rec = _run_rep(config, rep, j)
            done[(rep, j)] = rec
            cache.store(rec)
    return [done[cell] for cell in cells]


@dataclass
class PowerCurve:
    """Rejection frequency of each test at every delta, with Monte-Carlo errors.

    ``stderr = sqrt(f (1 - f) / n_ok)`` where ``n_ok`` counts replicates that
    ran to completion; the curve is ``partial`` when more than 5% failed at
    any delta.
    """

    deltas: np.ndarray
    freq: dict
    stderr: dict
    n_ok: np.ndarray
    failures: np.ndarray
    fit_failed: np.ndarray
    partial: bool
    config: dict
    config_hash: str
    records: list = field(default_factory=list, repr=False)

    @classmethod
    def from_records(cls, config: ScenarioConfig, records) -> "PowerCurve":
        k = len(config.deltas)
        hits = {t: np.zeros(k) for t in TESTS}
        n_ok = np.zeros(k, dtype=int)
        failures = np.zeros(k, dtype=int)
        fit_failed = np.zeros(k, dtype=int)
        for rec in records:
            j = rec["j"]
            if "error" in rec:
                failures[j] += 1
                continue
            n_ok[j] += 1
            fit_failed[j] += bool(rec.get("fit_failed"))
            for t in TESTS:
                hits[t][j] += bool(rec[f"psi_{t}"])
        with np.errstate(invalid="ignore", divide="ignore"):
            freq = {t: np.where(n_ok > 0, hits[t] / np.maximum(n_ok, 1), np.nan) for t in TESTS}
            se = {t: np.sqrt(freq[t] * (1.0 - freq[t]) / np.maximum(n_ok, 1)) for t in TESTS}
        partial = bool(np.any(failures > PARTIAL_LIMIT * (n_ok + failures)))
        return cls(np.asarray(config.deltas), freq, se, n_ok, failures, fit_failed, partial,
                   config.to_json(), config.config_hash(), list(records))

    def to_json(self, include_records=False) -> dict:
        out = {
            "deltas": self.deltas.tolist(),
            "freq": {t: [_finite(x) for x in v] for t, v in self.freq.items()},
            "stderr": {t: [_finite(x) for x in v] for t, v in self.stderr.items()},
            "n_ok": self.n_ok.tolist(), "failures": self.failures.tolist(),
            "fit_failed": self.fit_failed.tolist(), "partial": self.partial,
            "config": self.config, "config_hash": self.config_hash,
        }
        if include_records:
            out["records"] = self.records
        return out

    def write_json(self, path, include_records=False) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(include_records), fh, indent=2, sort_keys=True,
                      allow_nan=False, default=_json_default)

    def write_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            header = ["delta"]
            for t in TESTS:
                header += [t, f"{t}_stderr"]
            writer.writerow(header + ["n_ok", "failures", "fit_failed", "config_hash"])
            for j, delta in enumerate(self.deltas):
                row = [repr(float(delta))]
                for t in TESTS:
                    row += [repr(float(self.freq[t][j])), repr(float(self.stderr[t][j]))]
                writer.writerow(row + [int(self.n_ok[j]), int(self.failures[j]),
                                       int(self.fit_failed[j]), self.config_hash])


def power_curve(config: ScenarioConfig, jobs=1, cache_dir=None) -> PowerCurve:
    """Rejection frequencies over ``config.reps`` replicates at every delta.

    ``cache_dir`` defaults to the ``SCOREWATCH_CACHE`` environment variable;
    with neither set, or with ``cache_dir=False``, nothing is cached.
    """
    if cache_dir is None:
        cache_dir = os.environ.get("SCOREWATCH_CACHE") or None
    elif cache_dir is False:
        cache_dir = None
    cells = [(rep, j) for j in range(len(config.deltas)) for rep in range(config.reps)]
    records = run_cells(config, cells, jobs=jobs, cache_dir=cache_dir)
    return PowerCurve.from_records(config, records)


# ---------------------------------------------------------------------------
# null and local-alternative checks


def unit_information(program, theta, rng, n_ref=20_000) -> np.ndarray:
    """Per-observation Fisher information at ``theta``.

    Exact for the fixed-scale linear model with standard normal covariates
    (the identity over ``sigma^2``); other models use the observed
    information of one long simulated path divided by its length.
    """
    if isinstance(program, LinearModel) and not program.monitor_sigma:
        return np.eye(program.d) / program.sigma**2
    data = program.simulate(np.asarray(theta, dtype=float), n_ref, rng)
    return ad.Workspace(program, theta, data).info() / n_ref


@dataclass
class NullCheck:
    """``R_n(tau_n)`` over null (or locally drifting) replicates versus its chi-squared limit."""

    stats: np.ndarray
    d: int
    n: int
    tau: int
    ks: float
    ks_pvalue: float
    mean: float
    expected_mean: float
    noncentrality: float
    failures: int
    h: list | None = None

    def to_json(self) -> dict:
        out = asdict(self)
        out["stats"] = [float(x) for x in self.stats]
        return out


def null_distribution_check(model, n=500, tau=None, reps=500, seed=0, h=None,
                            method="direct") -> NullCheck:
    """Empirical law of ``R_n(tau_n)`` at the fixed ``tau_n = floor(n/2)``.

    With a drift ``h`` the post-change parameter is ``theta0 + h / sqrt(n)``
    and the reference law is noncentral chi-squared with noncentrality
    ``lambda (1 - lambda) h^T I_0 h``. The KS distance is always against
    the (central or noncentral) limit.
    """
    program = program_from_spec(model) if isinstance(model, dict) else model
    tau = n // 2 if tau is None else int(tau)
    lam = tau / n
    d = program.dim
    h_vec = None if h is None else np.broadcast_to(np.asarray(h, dtype=float), (d,)).copy()
    out = []
    failures = 0
    nc = 0.0
    info0 = None
    for rep in range(reps):
        rng = substream(seed, rep)
        base = draw_parameter(program, rng)
        theta1 = base.theta if h_vec is None else base.theta + h_vec / math.sqrt(n)
        try:
            data = simulate(program, base.theta, theta1, tau, n, rng)
            fit = auto_fit(program, data, base.theta)
            out.append(linear_stat(program, fit, data, tau, method=method))
        except ScorewatchError:
            failures += 1
            continue
        if h_vec is not None and info0 is None:
            info0 = unit_information(program, base.theta, substream(seed, reps, rep))
            nc = float(lam * (1.0 - lam) * h_vec @ info0 @ h_vec)
    r = np.asarray(out)
    ref = stats.chi2(d) if nc == 0.0 else stats.ncx2(d, nc)
    ks = stats.kstest(r, ref.cdf)
    return NullCheck(r, d, n, tau, float(ks.statistic), float(ks.pvalue), float(r.mean()),
                     d + nc, nc, failures, None if h_vec is None else h_vec.tolist())


def auto_fit(program, data, init):
    """MLE with the auto-test's default tolerance, warm-started at ``init``."""
    from .models.fit import fit_mle

    return fit_mle(program, data, init=init, tol=1e-7 * data.n).values


def fixed_alternative_check(model, ns=(500, 1000, 2000), p=1, delta=0.5, reps=50, seed=0,
                            method="direct") -> dict:
    """Mean of ``R_n(tau_n) / n`` under a fixed jump, for each ``n`` in ``ns``.

    The ratio settles to a constant as ``n`` grows; ``rel_change`` lists the
    relative change of the mean across consecutive sizes.
    """
    program = program_from_spec(model) if isinstance(model, dict) else model
    means = []
    for k, n in enumerate(ns):
        tau = n // 2
        vals = []
        for rep in range(reps):
            rng = substream(seed, k, rep)
            base = draw_parameter(program, substream(seed, rep))
            theta0, theta1 = plant_change(program, base, p, delta)
            data = simulate(program, theta0, theta1, tau, n, rng)
            fit = auto_fit(program, data, theta0)
            vals.append(linear_stat(program, fit, data, tau, method=method) / n)
        means.append(float(np.mean(vals)))
    rel = [abs(means[k + 1] - means[k]) / abs(means[k]) for k in range(len(means) - 1)]
    return {"ns": list(ns), "means": means, "rel_change": rel}


# ---------------------------------------------------------------------------
# runtime benchmark


@dataclass
class TimingRow:
    model: str
    n: int
    size: int
    dim: int
    direct_mean: float
    direct_stderr: float
    cg_mean: float
    cg_stderr: float
    cg_iterations: float
    rel_diff: float
    cg_failures: int
    direct_failures: int = 0


def _mean_se(x):
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    if x.size == 0:
        return math.nan, math.nan
    se = float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
    return float(np.mean(x)), se


def _fitted(program, data, init):
    from .models.fit import fit_mle

    try:
        return fit_mle(program, data, init=init, tol=1e-7 * data.n).values
    except ConvergenceError as exc:
        return exc.best.values


def benchmark_program(model, size):
    if model == "linear":
        return LinearModel(int(size))
    if model == "mlp":
        return MlpModel(int(size), sigma=BENCH_MLP_SIGMA)
    raise ConfigError(f"benchmark model must be 'linear' or 'mlp', got {model!r}")


def runtime_benchmark(model="linear", n_grid=(500,), d_grid=(50,), reps=5, seed=0,
                      cg_tol=1e-7) -> list[TimingRow]:
    """Wall-clock of ``I_{1:n}^{-1} z`` for random ``z``, dense versus CG.

    The dense route assembles the information from ``d`` information-vector
    products and solves; the CG route only applies the information. For the
    linear model ``d_grid`` lists parameter dimensions, for the network it
    lists input widths ``r`` (noise scale 0.1), and the information is taken
    at the MLE (fitted untimed from the true parameter) because at the true
    parameter it is usually indefinite. Both timings include the forward
    pass; the tape itself is recorded beforehand. CG runs that stop on
    non-positive curvature are still timed and are counted in ``cg_failures``;
    singular dense solves likewise count in ``direct_failures``.

    Raises
    ------
    SizeError
        If ``n * dim`` exceeds the desk-scale cap.
    """
    n_grid, d_grid = list(n_grid), list(d_grid)
    if not n_grid or not d_grid:
        raise ConfigError("benchmark grids must be nonempty")
    rows = []
    for n in n_grid:
        for size in d_grid:
            program = benchmark_program(model, size)
            dim = program.dim
            if n * dim > BENCH_MAX_TERMS_X_DIM or dim > ad.DEFAULT_HESSIAN_CAP:
                raise SizeError(f"{model} cell n={n}, dim={dim} exceeds the benchmark cap")
            t_dir, t_cg, iters, diffs = [], [], [], []
            fails = dir_fails = 0
            for rep in range(reps):
                rng = substream(seed, n, size, rep)
                theta = draw_parameter(program, rng).theta
                data = program.simulate(theta, n, rng)
                if isinstance(program, MlpModel):
                    theta = _fitted(program, data, theta)
                z = rng.standard_normal(dim)
                ad.get_tape(program, data, theta)
                start = time.perf_counter()
                ws = ad.Workspace(program, theta, data)
                try:
                    x_dir = np.linalg.solve(ws.info(), z)
                except np.linalg.LinAlgError:
                    x_dir = None
                    dir_fails += 1
                t_dir.append(time.perf_counter() - start)
                start = time.perf_counter()
                ws = ad.Workspace(program, theta, data)
                op = InformationOperator(ws.info_vp, dim, "segment")
                try:
                    res = cg_solve(op, z, tol=cg_tol, full_output=True)
                except ConditioningError:
                    # indefinite or unconverged: the time still counts, the solution does not
                    fails += 1
                    t_cg.append(time.perf_counter() - start)
                    continue
                t_cg.append(time.perf_counter() - start)
                iters.append(res.iterations)
                if x_dir is not None:
                    diffs.append(np.linalg.norm(res.x - x_dir) / max(np.linalg.norm(x_dir), 1e-300))
            dm, ds = _mean_se(t_dir)
            cm, cs = _mean_se(t_cg)
            rows.append(TimingRow(model, n, int(size), dim, dm, ds, cm, cs,
                                  float(np.mean(iters)) if iters else math.nan,
                                  float(np.max(diffs)) if diffs else math.nan, fails, dir_fails))
    return rows


def write_timing_csv(rows, path, config_hash_value: str) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        names = list(TimingRow.__dataclass_fields__)
        writer.writerow(names + ["config_hash"])
        for row in rows:
            writer.writerow([getattr(row, k) for k in names] + [config_hash_value])


# ---------------------------------------------------------------------------
# ARMA heterogeneity


@dataclass
class HeterogeneityReport:
    """False alarms of unrestricted and AR-restricted runs on the same null data."""

    r: int
    q: int
    n: int
    reps: int
    fa_unrestricted: dict
    fa_restricted: dict
    stderr_unrestricted: dict
    stderr_restricted: dict
    median_log10_cond: float
    median_log10_cond_restricted: float
    skipped_fraction: float
    ar_only_subsets: float
    score_scale_ratio: float
    fit_failed: int
    failures: int

    def to_json(self) -> dict:
        return _clean(asdict(self))


def _freq_se(hits, k):
    f = {t: hits[t] / k for t in TESTS} if k else {t: math.nan for t in TESTS}
    se = {t: math.sqrt(f[t] * (1 - f[t]) / k) if k else math.nan for t in TESTS}
    return f, se


def arma_heterogeneity_study(orders=(3, 2), n=500, reps=100, seed=0, config=None) -> HeterogeneityReport:
    """Null false-alarm rates with and without restricting the scan to AR coefficients.

    Each replicate fits once and reuses the estimate for both runs.
    ``score_scale_ratio`` is the median ratio of the mean diagonal of the
    information over AR coefficients to that over MA coefficients.
    ``ar_only_subsets`` is the fraction of unrestricted runs with a
    nonempty scan subset whose entries are all AR coefficients.
    """
    r, q = (int(x) for x in orders)
    program = ArmaModel(r, q)
    cfg = (config or TestConfig()).replace(accept_unconverged=True)
    ar = tuple(range(r))
    cfg_ar = restrict_components(cfg, ar)
    hits_u = {t: 0 for t in TESTS}
    hits_r = {t: 0 for t in TESTS}
    conds, conds_r, skipped, ratios = [], [], [], []
    subsets_ar = subsets_total = 0
    fit_failed = failures = 0
    for rep in range(reps):
        rng = substream(seed, rep)
        base = draw_parameter(program, rng)
        try:
            data = simulate(program, base.theta, base.theta, n, n, rng)
            rep_u = auto_test(program, data, cfg, init=base.theta)
            rep_r = auto_test(program, data, cfg_ar, theta_hat=rep_u.theta_hat)
            diag = np.diag(ad.Workspace(program, rep_u.theta_hat, data).info())
        except ScorewatchError:
            failures += 1
            continue
        fit_failed += rep_u.fit_failed
        for t in TESTS:
            hits_u[t] += getattr(rep_u, f"psi_{t}")
            hits_r[t] += getattr(rep_r, f"psi_{t}")
        conds.append(np.nanmedian(np.log10(rep_u.cond)))
        conds_r.append(np.nanmedian(np.log10(rep_r.cond)))
        skipped.append(float(np.mean(rep_u.skipped)))
        if q:
            ratios.append(float(np.mean(diag[:r]) / np.mean(diag[r:])))
        if rep_u.subset_hat:
            subsets_total += 1
            subsets_ar += all(i < r for i in rep_u.subset_hat)
    k = reps - failures
    fu, su = _freq_se(hits_u, k)
    fr, sr = _freq_se(hits_r, k)
    return HeterogeneityReport(
        r, q, n, reps, fu, fr, su, sr,
        float(np.median(conds)) if conds else math.nan,
        float(np.median(conds_r)) if conds_r else math.nan,
        float(np.mean(skipped)) if skipped else math.nan,
        subsets_ar / subsets_total if subsets_total else math.nan,
        float(np.median(ratios)) if ratios else math.nan,
        int(fit_failed), int(failures))
