"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line (also repeated in the pytest
terminal summary). Run only these with ``pytest -m acceptance -v``.
"""

import json
import time

import numpy as np
import pytest

from phenohybrid.autodiff import Tape
from phenohybrid.cli import run
from phenohybrid.datagen import ClimateSpec, OracleSpec, gen_dataset, gen_dataset_with_truth
from phenohybrid.domain import SEASON_LENGTH
from phenohybrid.evaluation import (
    AblationFitter,
    HybridFitter,
    MechanisticFitter,
    MedianFitter,
    SplitSpec,
    evaluate,
    export_response_density,
)
from phenohybrid.hybrid import (
    ChillHoursSurrogate,
    ConstantChill,
    HybridModel,
    HybridParams,
    MlpChill,
    ScaledUtahChill,
    TrainConfig,
    forward,
    predict_bloom_soft,
)
from phenohybrid.hybrid.model import build_forward, nll_from_graph
from phenohybrid.hybrid.training import initial_phi
from phenohybrid.mechanistic import GridSpec, MechanisticParams, grid_search
from phenohybrid.mechanistic.models import NO_BLOOM, predict_bloom_hard

pytestmark = pytest.mark.acceptance

UTAH_ORACLE = MechanisticParams(800.0, 6000.0, 5.0)
YEARS = range(2000, 2020)
N_LOCATIONS = 10
SEEDS = (0, 1, 2)
EPOCHS = 2000
CLIMATE = ClimateSpec(daily_noise_autocorr=0.8, seed=1)

_cache = {}


def utah_data(jitter: float):
    key = ("utah", jitter)
    if key not in _cache:
        _cache[key] = gen_dataset(CLIMATE, OracleSpec("utah", UTAH_ORACLE, jitter), N_LOCATIONS, YEARS)
    return _cache[key]


def hybrid_report():
    """Hybrid evaluation shared by criteria 3 and 7 (computed once)."""
    if "hybrid" not in _cache:
        start = time.perf_counter()
        report = evaluate(HybridFitter(TrainConfig(epochs=EPOCHS)), utah_data(1.0), SplitSpec("temporal"),
                          seeds=SEEDS)
        _cache["hybrid"] = (report, time.perf_counter() - start)
    return _cache["hybrid"]


def minutes(seconds):
    return f"{seconds / 60:.1f} min"


# --- 1: gradient fidelity ---------------------------------------------------

GRAD_S = 20
GRAD_N = 5
GRAD_H = 1e-4
GRAD_GROUPS = np.array([0, 1, 0, 1, 0])
NLL_EPS = 1e-12


def _logistic(x):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def oracle_nll(params, temps, observed):
    """Numpy NLL of the hybrid model plus the on/off pattern of every kink.

    ``params`` maps "W0".."b2" and the threshold names to arrays (thresholds
    have one entry per group).
    """
    n, s, hours = temps.shape
    h = temps.reshape(-1, hours)
    pattern = []
    for i in range(3):
        h = h @ params[f"W{i}"] + params[f"b{i}"]
        if i < 2:
            pattern.append(h > 0)
            h = np.maximum(h, 0.0)
    chill = _logistic(h[:, 0]).reshape(n, s)
    g = GRAD_GROUPS
    beta_c = params["chill_inflection"][g][:, None]
    beta_f = params["forcing_inflection"][g][:, None]
    base = params["base_temp"][g][:, None, None]
    scale = params["forcing_scale"][g][:, None]
    gate = _logistic(50.0 * (np.cumsum(chill, axis=1) / s - beta_c))
    excess = temps - base
    pattern.append(excess > 0)
    forcing = np.cumsum(np.maximum(excess, 0.0).sum(axis=2) * gate, axis=1)
    cdf = _logistic((forcing / s - beta_f) / scale)
    full = np.concatenate([_logistic(-beta_f / scale), cdf], axis=1)
    p = full[np.arange(n), observed] - full[np.arange(n), observed - 1]
    pattern.append(p > NLL_EPS)
    return float(np.mean(-np.log(np.maximum(p, NLL_EPS)))), pattern


def autodiff_nll_grad(params, temps, observed):
    template = MlpChill.init(0)
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    theta = {k: leaves[k] for k in template.param_arrays()}
    phi = {k: v for k, v in leaves.items() if k not in theta}
    graph = build_forward(tape, temps, template, theta, phi, GRAD_GROUPS)
    loss = nll_from_graph(graph, observed, NLL_EPS)
    grads = tape.backward(loss)
    return float(loss.value), {k: grads[v] for k, v in leaves.items()}


def random_point(rng):
    """A starting point of training: fresh MLP weights and data-informed thresholds.

    Observations are drawn near each season's mode so no probability sits at
    the NLL clamp.
    """
    temps = rng.normal(8.0, 3.0, (GRAD_N, GRAD_S, 1)) + rng.normal(0.0, 2.0, (GRAD_N, GRAD_S, 24))
    chill = MlpChill.init(int(rng.integers(1 << 31)))
    config = TrainConfig(base_temp_init=float(rng.uniform(2.0, 6.0)), forcing_scale_init=float(rng.uniform(1.0, 4.0)))
    guess = rng.integers(8, 17, GRAD_N)
    phi = initial_phi(chill, temps, guess, GRAD_GROUPS, 2, config)
    params = {**{k: v.copy() for k, v in chill.param_arrays().items()}, **phi}
    probe = HybridModel(chill, ("a", "b"), phi, "location")
    mode = predict_bloom_soft(probe.distribution(temps, GRAD_GROUPS))
    observed = np.clip(mode + rng.integers(-1, 2, GRAD_N), 1, GRAD_S)
    return params, temps, observed


def _shifted(params, name, i, delta, temps, observed):
    flat = params[name].reshape(-1)
    keep = flat[i]
    flat[i] = keep + delta
    try:
        return oracle_nll(params, temps, observed)
    finally:
        flat[i] = keep


def _same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def check_coordinate(params, name, i, ad, base, pattern0, temps, observed):
    """Return (ok, relative error, used a one-sided stencil).

    Central differences are used when no kink lies within h. Otherwise the
    second-order one-sided stencil on a kink-free side estimates the slope of
    the piece containing the point, which is what the tape differentiates.
    """
    up, pat_up = _shifted(params, name, i, GRAD_H, temps, observed)
    down, pat_down = _shifted(params, name, i, -GRAD_H, temps, observed)
    one_sided = False
    if _same(pattern0, pat_up) and _same(pattern0, pat_down):
        fd = (up - down) / (2 * GRAD_H)
    else:
        one_sided = True
        fd = None
        for sign, (near, pat_near) in ((-1, (down, pat_down)), (1, (up, pat_up))):
            far, pat_far = _shifted(params, name, i, 2 * sign * GRAD_H, temps, observed)
            if _same(pattern0, pat_near) and _same(pattern0, pat_far):
                fd = sign * (-3 * base + 4 * near - far) / (2 * GRAD_H)
                break
        if fd is None:
            # kinks on both sides within 2h: retry the one-sided stencils at h / 100
            fine = GRAD_H / 100
            for sign in (-1, 1):
                near, pat_near = _shifted(params, name, i, sign * fine, temps, observed)
                far, pat_far = _shifted(params, name, i, 2 * sign * fine, temps, observed)
                if _same(pattern0, pat_near) and _same(pattern0, pat_far):
                    fd = sign * (-3 * base + 4 * near - far) / (2 * fine)
                    break
        if fd is None:
            # still no kink-free side: the gradient must lie in the subdifferential interval
            lo, hi = sorted(((up - base) / GRAD_H, (base - down) / GRAD_H))
            return lo - 1e-8 <= ad <= hi + 1e-8, 0.0, True
    err = abs(ad - fd)
    if err < 1e-8:
        return True, 0.0, one_sided
    rel = err / max(abs(ad), abs(fd))
    return rel < 1e-5, rel, one_sided


def finer_central_agrees(params, name, i, ad, pattern0, temps, observed):
    """Diagnostic for a miss: do central differences at h / 10 match the tape?"""
    h = GRAD_H / 10
    up, pat_up = _shifted(params, name, i, h, temps, observed)
    down, pat_down = _shifted(params, name, i, -h, temps, observed)
    if not (_same(pattern0, pat_up) and _same(pattern0, pat_down)):
        return False
    fd = (up - down) / (2 * h)
    return abs(ad - fd) < 1e-8 or abs(ad - fd) / max(abs(ad), abs(fd)) < 1e-6


def check_point(params, temps, observed):
    """Count coordinates checked, one-sided stencils used and failures."""
    _, grads = autodiff_nll_grad(params, temps, observed)
    base, pattern0 = oracle_nll(params, temps, observed)
    checked = kinks = 0
    worst = 0.0
    failures = []
    for name, arr in params.items():
        gflat = grads[name].reshape(-1)
        for i in range(arr.size):
            ok, rel, one_sided = check_coordinate(params, name, i, float(gflat[i]), base, pattern0, temps, observed)
            checked += 1
            kinks += one_sided
            worst = max(worst, rel)
            if not ok:
                explained = finer_central_agrees(params, name, i, float(gflat[i]), pattern0, temps, observed)
                failures.append((name, i, rel, explained))
    return checked, kinks, worst, failures


def test_criterion_1_gradient_fidelity(acceptance_report):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    checked = kinks = 0
    worst = 0.0
    failures = []
    for _ in range(10):
        c, k, w, f = check_point(*random_point(rng))
        checked += c
        kinks += k
        worst = max(worst, w)
        failures += f
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 60
    names = sorted({name for name, *_ in failures})
    explained = sum(f[3] for f in failures)
    acceptance_report(1, "gradient fidelity", ok,
                      f"{checked} coordinates over 10 points x {GRAD_N} seasons (S={GRAD_S}), "
                      f"max rel err {worst:.2e}, {kinks} kink-adjacent one-sided checks, "
                      f"{len(failures)} over tolerance (in {', '.join(names) or 'none'}; "
                      f"{explained} of them match the tape to 1e-6 at h/10), {elapsed:.1f} s")


# --- 2: oracle parameter recovery -------------------------------------------


def _point(p):
    return (p.chill_req, p.forcing_req, p.base_temp)


def _grid_steps(grid, fitted, truth):
    steps = []
    for axis, f, t in zip((grid.chill_reqs, grid.forcing_reqs, grid.base_temps), fitted, truth):
        steps.append(abs(int(np.searchsorted(axis, f)) - int(np.searchsorted(axis, t))))
    return steps


def test_criterion_2_oracle_recovery(acceptance_report):
    start = time.perf_counter()
    grid = GridSpec.default("utah")
    truth = (UTAH_ORACLE.chill_req, UTAH_ORACLE.forcing_req, UTAH_ORACLE.base_temp)
    assert truth[0] in grid.chill_reqs and truth[1] in grid.forcing_reqs and truth[2] in grid.base_temps

    exact = grid_search(utah_data(0.0), "utah", grid, grouping="location")
    exact_ok = all(_point(p) == truth and exact.mse[k] == 0.0 for k, p in exact.items())

    noisy = grid_search(utah_data(1.0), "utah", grid, grouping="location")
    max_steps = max(max(_grid_steps(grid, _point(p), truth)) for p in noisy.values())
    elapsed = time.perf_counter() - start
    ok = exact_ok and max_steps <= 1 and elapsed < 300
    acceptance_report(2, "oracle parameter recovery", ok,
                      f"jitter 0: {sum(_point(p) == truth for p in exact.values())}/{len(exact)} locations "
                      f"at the oracle point, max MSE {max(exact.mse.values()):g}; "
                      f"jitter 1: max {max_steps} grid step(s) off; {elapsed:.1f} s")


# --- 3: hybrid learning on oracle data ----------------------------------------


def test_criterion_3_hybrid_learning(acceptance_report):
    report, elapsed = hybrid_report()
    median = evaluate(MedianFitter(), utah_data(1.0), SplitSpec("temporal"), seeds=SEEDS)
    ok = (report.n_seeds == len(SEEDS) and report.mean_mae <= 2.0 and report.mean_mae < median.mean_mae
          and elapsed < 900)
    acceptance_report(3, "hybrid learning", ok,
                      f"hybrid MAE {report.mean_mae:.2f} (per seed {report.per_seed_mae}) vs median "
                      f"{median.mean_mae:.2f}, {EPOCHS} epochs x {len(SEEDS)} seeds, {minutes(elapsed)}")


# --- 4: underfitting of per-variety mechanistic fits ---------------------------

# warmer sites need less chill: 150 Utah units per degC of climate offset
HETERO_ORACLE = OracleSpec("utah", UTAH_ORACLE, 1.0, chill_req_per_degree=-150.0)
HETERO_SEEDS = (0,)


def test_criterion_4_per_variety_underfit(acceptance_report):
    start = time.perf_counter()
    data, _ = gen_dataset_with_truth(CLIMATE, HETERO_ORACLE, N_LOCATIONS, YEARS)
    mae = {}
    for setting in ("temporal", "temporal-variety"):
        spec = SplitSpec(setting)
        mae["mech", setting] = evaluate(MechanisticFitter("utah"), data, spec, seeds=HETERO_SEEDS).mean_mae
        mae["hybrid", setting] = evaluate(HybridFitter(TrainConfig(epochs=EPOCHS)), data, spec,
                                          seeds=HETERO_SEEDS).mean_mae
    elapsed = time.perf_counter() - start
    mech_gap = mae["mech", "temporal-variety"] - mae["mech", "temporal"]
    hybrid_gap = mae["hybrid", "temporal-variety"] - mae["hybrid", "temporal"]
    ok = mech_gap >= 2.0 and hybrid_gap < 1.0 and elapsed < 1200
    acceptance_report(4, "per-variety underfit", ok,
                      f"Utah per-location {mae['mech', 'temporal']:.2f} -> per-variety "
                      f"{mae['mech', 'temporal-variety']:.2f} (+{mech_gap:.2f}); hybrid "
                      f"{mae['hybrid', 'temporal']:.2f} -> {mae['hybrid', 'temporal-variety']:.2f} "
                      f"({hybrid_gap:+.2f}); {minutes(elapsed)}")


# --- 5: hard/soft consistency ---------------------------------------------------

MARGIN = 0.3
BASE_TEMP = 8.0


def segment_season(rng):
    """Warm autumn, a winter inside the chill band and below the base temperature, warm spring."""
    autumn = int(rng.integers(10, 30))
    winter = int(rng.integers(170, 200))
    spring = SEASON_LENGTH - autumn - winter
    daily = np.concatenate([
        rng.uniform(12.0, 18.0, autumn),
        rng.uniform(1.5, 6.0, winter),
        np.linspace(rng.uniform(10.0, 13.0), rng.uniform(18.0, 25.0), spring),
    ])
    hourly = np.clip(rng.normal(0.0, 0.2, (SEASON_LENGTH, 24)), -0.4, 0.4)
    return daily[:, None] + hourly, autumn + winter


def test_criterion_5_hard_soft_consistency(acceptance_report):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    s = SEASON_LENGTH
    diffs = []
    while len(diffs) < 100:
        temps, spring_start = segment_season(rng)
        in_band = ((temps >= 0.0) & (temps <= 7.2)).sum(axis=1)
        chill_norm = np.cumsum(in_band) / (24.0 * s)
        beta_c = float(rng.uniform(0.3, 0.35))
        excess = np.maximum(temps - BASE_TEMP, 0.0).sum(axis=1)
        # forcing only on days whose chill total is at least MARGIN from the inflection
        if np.any((excess > 0) & (np.abs(chill_norm - beta_c) < MARGIN)):
            continue
        done = np.flatnonzero(chill_norm >= beta_c)[0]
        forcing_norm = np.cumsum(np.where(np.arange(s) >= done, excess, 0.0)) / s
        beta_f = float(rng.uniform(2.0, 0.8 * forcing_norm[-1]))
        cross = int(np.flatnonzero(forcing_norm >= beta_f)[0])
        if forcing_norm[cross] - beta_f < MARGIN or beta_f - forcing_norm[cross - 1] < MARGIN:
            continue
        hard = predict_bloom_hard(temps, MechanisticParams(beta_c * 24 * s, beta_f * s, BASE_TEMP), "chill-hours")
        soft = predict_bloom_soft(forward(temps, HybridParams(ChillHoursSurrogate(50.0), beta_c, beta_f,
                                                              BASE_TEMP, 0.01, 50.0)))
        diffs.append(np.inf if hard is NO_BLOOM else abs(soft - hard))
    elapsed = time.perf_counter() - start
    ok = max(diffs) <= 1 and elapsed < 60
    acceptance_report(5, "hard/soft consistency", ok,
                      f"{len(diffs)} seasons, max |soft - hard| = {max(diffs):g} day(s), "
                      f"{sum(d == 0 for d in diffs)} exact, {elapsed:.1f} s")


# --- 6: invariants ----------------------------------------------------------------


def random_chill(rng):
    kind = int(rng.integers(4))
    if kind == 0:
        return MlpChill.init(int(rng.integers(1 << 31)))
    if kind == 1:
        return ScaledUtahChill(bool(rng.integers(2)))
    if kind == 2:
        return ChillHoursSurrogate(float(rng.uniform(1.0, 100.0)))
    return ConstantChill(float(rng.uniform(0.0, 1.0)))


def test_criterion_6_invariants(acceptance_report):
    start = time.perf_counter()
    rng = np.random.default_rng(99)
    bad = 0
    for _ in range(1000):
        s = int(rng.integers(5, SEASON_LENGTH + 1))
        temps = rng.normal(rng.uniform(-5, 20), rng.uniform(0.5, 10), (s, 1)) + rng.normal(0, 3, (s, 24))
        params = HybridParams(random_chill(rng), float(rng.uniform(1e-3, 1 - 1e-3)),
                              float(rng.exponential(20.0)), float(rng.uniform(-5, 15)),
                              float(10 ** rng.uniform(-2, 2)), float(rng.uniform(1, 100)))
        dist = forward(temps, params)
        cdf = np.concatenate([[dist.cdf_start], dist.cdf])
        ok = (np.all(np.diff(cdf) >= 0) and np.all((dist.prob >= 0) & (dist.prob <= 1))
              and np.all((cdf >= 0) & (cdf <= 1)) and dist.prob.sum() <= 1 + 1e-12)
        bad += not ok

    worst = 0.0
    for seed in range(5):
        data = gen_dataset(ClimateSpec(seed=seed), OracleSpec("utah", UTAH_ORACLE), 2, range(2000, 2003))
        for chill in (MlpChill.init(seed), ScaledUtahChill(), ChillHoursSurrogate()):
            sums = {}
            for t, _, density in export_response_density(chill, data):
                sums[t] = sums.get(t, 0.0) + density
            worst = max(worst, max(abs(v - 1.0) for v in sums.values()))
    elapsed = time.perf_counter() - start
    ok = bad == 0 and worst <= 1e-9 and elapsed < 60
    acceptance_report(6, "monotone CDF and normalization", ok,
                      f"{bad}/1000 forwards violated an invariant, max |column sum - 1| = {worst:.1e}, "
                      f"{elapsed:.1f} s")


# --- 7: ablation ordering -------------------------------------------------------


def test_criterion_7_ablation(acceptance_report):
    report, hybrid_time = hybrid_report()
    start = time.perf_counter()
    ablation = evaluate(AblationFitter(TrainConfig(epochs=EPOCHS)), utah_data(1.0), SplitSpec("temporal"),
                        seeds=SEEDS)
    elapsed = time.perf_counter() - start
    gap = ablation.mean_mae - report.mean_mae
    ok = ablation.n_seeds == len(SEEDS) and abs(gap) <= 1.0 and elapsed < 900
    acceptance_report(7, "Utah-frozen ablation", ok,
                      f"ablation MAE {ablation.mean_mae:.2f} vs hybrid {report.mean_mae:.2f} ({gap:+.2f}), "
                      f"ablation {minutes(elapsed)} (shared hybrid runs {minutes(hybrid_time)})")


# --- 8: determinism -----------------------------------------------------------------


def test_criterion_8_determinism(acceptance_report, tmp_path, capsys):
    start = time.perf_counter()
    data = gen_dataset(CLIMATE, OracleSpec("utah", UTAH_ORACLE, 1.0), 4, range(2000, 2008), n_varieties=2)
    same = []
    for fitter, setting in ((MechanisticFitter("chill-days"), "spatiotemporal"),
                            (HybridFitter(TrainConfig(epochs=30)), "temporal"),
                            (AblationFitter(TrainConfig(epochs=30)), "temporal-variety")):
        spec = SplitSpec(setting)
        runs = [evaluate(fitter, data, spec, seeds=range(4), jobs=j).to_json() for j in (1, 1, 4)]
        same.append(len(set(runs)) == 1)

    code = run(["gen-synthetic", "--n-locations", "3", "--n-years", "6", "--jitter", "1", "--seed", "3",
                "--out", str(tmp_path / "gen")])
    (gen,) = (tmp_path / "gen").iterdir()
    reports = []
    for i, jobs in enumerate((1, 1, 3)):
        code |= run(["evaluate", "--temps", str(gen / "temps.csv"), "--blooms", str(gen / "blooms.csv"),
                     "--model", "hybrid", "--epochs", "20", "--seeds", "3", "--jobs", str(jobs),
                     "--out", str(tmp_path / f"eval{i}")])
        (d,) = (tmp_path / f"eval{i}").iterdir()
        reports.append((d / "report.json").read_bytes())
    capsys.readouterr()
    cli_same = code == 0 and len(set(reports)) == 1 and json.loads(reports[0])["n_seeds"] == 3
    elapsed = time.perf_counter() - start
    ok = all(same) and cli_same
    acceptance_report(8, "determinism", ok,
                      f"API reports identical at jobs 1/1/4 for {sum(same)}/{len(same)} fitters; "
                      f"CLI report.json byte-identical at --jobs 1/1/3: {cli_same}; {elapsed:.1f} s")
