"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest -s tests/test_acceptance.py`` to see the lines as they
complete.  The microscopy comparison (criteria 8 and 9) dominates the
runtime; everything else finishes within seconds.
"""

import time

import numpy as np
import pytest

from bisparse.cli import cmd_simulate, cmd_solve, load_config
from bisparse.operators import DenseOperator, SmlmOperator
from bisparse.reformulation import (
    Constrained,
    Penalized,
    ProblemInstance,
    check_constrained_u_structure,
    check_penalized_u_structure,
    coupling_gap,
    l0_norm,
    l0_witness,
)
from bisparse.smlm import jaccard, localize_frame, random_molecules, read_molecule_csv, simulate_stack
from bisparse.solvers import SolveConfig, biconvex_minimize, l1_nonneg_solve, u_update_constrained, u_update_penalized

from oracles import (
    box_l1_prox_scalar,
    capped_simplex_projection,
    global_min_constrained,
    global_min_penalized,
)


def report(number, description, detail=""):
    suffix = f" ({detail})" if detail else ""
    print(f"\n[acceptance] criterion {number}: PASS - {description}{suffix}")


def test_criterion_1_sparsity_witness_identity():
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    for _ in range(1000):
        n = int(rng.integers(1, 64))
        x = rng.standard_normal(n)
        x[rng.random(n) < rng.uniform(0.1, 0.9)] = 0.0
        count, u = l0_witness(x)
        assert count == np.count_nonzero(x)
        assert np.sum(np.abs(u)) == count
        assert np.abs(u).max(initial=0.0) <= 1.0
        assert np.array_equal(x * u, np.abs(x))
    elapsed = time.perf_counter() - start
    assert elapsed < 1.0
    report(1, "witness attains the exact sparsity count on 1000 vectors", f"{elapsed:.2f}s")


def test_criterion_2_exact_penalty_termination():
    start = time.perf_counter()
    rng = np.random.default_rng(202)
    for trial in range(50):
        matrix = rng.standard_normal((8, 16))
        x_true = np.zeros(16)
        x_true[rng.choice(16, 3, replace=False)] = rng.uniform(0.5, 1.5, 3)
        clean = matrix @ x_true
        d = clean + 0.01 * np.abs(clean).max() * rng.standard_normal(8)
        op = DenseOperator(matrix)
        if trial % 2 == 0:
            sol = biconvex_minimize(ProblemInstance(op, d, Constrained(3)))
            assert check_constrained_u_structure(sol.pair, 3)
            assert l0_norm(sol.pair.x) <= 3
        else:
            lam = 0.05 * np.abs(matrix.T @ d).max()
            sol = biconvex_minimize(ProblemInstance(op, d, Penalized(lam)))
            assert check_penalized_u_structure(sol.pair, lam, sol.trace.rho_max)
        assert coupling_gap(sol.pair) <= 1e-8
    elapsed = time.perf_counter() - start
    assert elapsed < 30.0
    report(2, "gap closes and the minimizer structure holds on 50 noisy instances", f"{elapsed:.2f}s")


def test_criterion_3_never_beats_the_global_minimum():
    start = time.perf_counter()
    rng = np.random.default_rng(303)
    attained = 0
    for trial in range(50):
        if trial % 2 == 0:
            m, n, k = 8, 12, 3
            matrix = rng.standard_normal((m, n))
            x_true = np.zeros(n)
            x_true[rng.choice(n, k, replace=False)] = rng.uniform(0.5, 1.5, k)
            d = matrix @ x_true + 0.02 * rng.standard_normal(m)
            sol = biconvex_minimize(ProblemInstance(DenseOperator(matrix), d, Constrained(k)))
            oracle = global_min_constrained(matrix, d, k)
        else:
            m, n = 7, 10
            matrix = rng.standard_normal((m, n))
            x_true = np.zeros(n)
            x_true[rng.choice(n, 3, replace=False)] = rng.uniform(0.5, 1.5, 3)
            d = matrix @ x_true + 0.02 * rng.standard_normal(m)
            lam = 0.05 * np.abs(matrix.T @ d).max()
            sol = biconvex_minimize(ProblemInstance(DenseOperator(matrix), d, Penalized(lam)))
            oracle = global_min_penalized(matrix, d, lam)
        assert np.isfinite(sol.objective)
        assert sol.objective >= oracle - 1e-9
        if abs(sol.objective - oracle) <= 1e-6 * (1.0 + abs(oracle)):
            attained += 1
    elapsed = time.perf_counter() - start
    assert elapsed < 120.0
    report(
        3,
        "solutions never undercut the enumerated global minimum",
        f"{attained}/50 attained it exactly (informational), {elapsed:.1f}s",
    )


def _l1_suite():
    rng = np.random.default_rng(404)
    cases = []
    for _ in range(50):
        m, n = 8, 16
        matrix = rng.standard_normal((m, n))
        d = rng.standard_normal(m)
        op = DenseOperator(matrix)
        weight = (1.0 + 1e-6) * op.spectral_norm().sigma * float(np.linalg.norm(d))
        cases.append((op, d, l1_nonneg_solve(op, d, weight)))
    return cases


def test_criterion_4_large_weights_zero_everything():
    for _, _, res in _l1_suite():
        assert np.all(res.x <= 1e-10)
    report(4, "l1 weights above the threshold return the zero vector, 50/50")


def test_criterion_5_residual_never_exceeds_data_norm():
    for op, d, res in _l1_suite():
        assert np.linalg.norm(op.apply(res.x) - d) <= np.linalg.norm(d) + 1e-8
    report(5, "every solver residual stays within the data norm, 50/50")


def test_criterion_6_auxiliary_updates_are_exact():
    rng = np.random.default_rng(606)
    for _ in range(200):
        n = int(rng.integers(1, 7))
        z = rng.standard_normal(n) * 2.5
        k = int(rng.integers(0, n + 1))
        ours = u_update_constrained(z, k)
        ref = np.sign(z) * capped_simplex_projection(np.abs(z), float(k))
        assert np.abs(ours - ref).max() <= 1e-8
    for _ in range(500):
        z = float(rng.uniform(-4, 4))
        lam = float(rng.uniform(0.05, 2.0))
        b = float(rng.uniform(0.2, 3.0))
        ours = u_update_penalized(np.array([z]), lam, b)[0]
        assert abs(ours - box_l1_prox_scalar(z, lam, b)) <= 1e-8
    report(6, "both auxiliary updates match their minimization oracles to 1e-8")


# desk-scale acquisition geometry used by the microscopy criteria
DESK_OPERATOR = dict(coarse_size=32, zoom=4, fwhm_nm=258.21, pixel_nm=100.0)
BICONVEX_PROTOCOL = dict(
    pam_c=10.0, pam_tol=0.5, pam_max_iter=16, fista_tol=1e-8, fista_fp_tol=1e-5, fista_max_iter=80
)
IHT_PROTOCOL = dict(pam_tol=1e-3, iht_max_iter=1000)


def test_criterion_7_roundtrip_recovers_every_molecule():
    start = time.perf_counter()
    op = SmlmOperator(**DESK_OPERATOR)
    rng = np.random.default_rng(707)
    truth = [
        random_molecules(
            op,
            5,
            rng,
            min_separation_nm=4.0 * op.fwhm_nm,
            intensity_range=(1000.0, 1000.0),
            margin_nm=1.5 * op.fwhm_nm,
            snap_to_fine=True,
        )
        for _ in range(3)
    ]
    stack = simulate_stack(truth, op, 0.0, seed=707)
    for algo, params in (("biconvex", BICONVEX_PROTOCOL), ("iht", IHT_PROTOCOL)):
        cfg = SolveConfig(**params)
        cr = fp = fn = 0
        for frame, gt in zip(stack.frames, truth):
            loc = localize_frame(frame, op, Constrained(5), cfg, algo)
            rep = jaccard(loc.molecules, gt, 100.0)
            cr, fp, fn = cr + rep.cr, fp + rep.fp, fn + rep.fn
        assert cr / (cr + fp + fn) == 1.0, f"{algo}: CR={cr} FP={fp} FN={fn}"
    elapsed = time.perf_counter() - start
    assert elapsed < 120.0
    report(7, "noiseless well-separated molecules localize perfectly for both solvers", f"{elapsed:.1f}s")


PROTOCOL_SEEDS = list(range(10))

CONFIG_TEMPLATE = """
[operator]
coarse_size = 32
zoom = 4
fwhm_nm = 258.21
pixel_nm = 100.0

[solver]
algo = "{algo}"
mode = "constrained"
k = 15
pam_c = {pam_c}
pam_tol = {pam_tol}
pam_max_iter = {pam_max_iter}
fista_tol = {fista_tol}
fista_fp_tol = {fista_fp_tol}
fista_max_iter = {fista_max_iter}
iht_max_iter = {iht_max_iter}

[simulate]
frames = 20
molecules_per_frame = 15
intensity_min = 800.0
intensity_max = 1200.0
noise_peak_fraction = 0.05
seed = {seed}

[io]
molecules = "molecules_{algo}.csv"
"""


def _write_protocol_config(directory, algo, seed):
    solver = {**BICONVEX_PROTOCOL, "iht_max_iter": IHT_PROTOCOL["iht_max_iter"]}
    if algo == "iht":
        solver = {**BICONVEX_PROTOCOL, **IHT_PROTOCOL}
    path = directory / f"{algo}.toml"
    path.write_text(
        CONFIG_TEMPLATE.format(
            algo=algo,
            seed=seed,
            pam_c=solver["pam_c"],
            pam_tol=solver["pam_tol"],
            pam_max_iter=solver["pam_max_iter"],
            fista_tol=solver["fista_tol"],
            fista_fp_tol=solver["fista_fp_tol"],
            fista_max_iter=solver["fista_max_iter"],
            iht_max_iter=solver["iht_max_iter"],
        )
    )
    return path


def _aggregate_jaccard(est_path, gt_path, tolerance_nm=100.0):
    est = read_molecule_csv(est_path)
    gt = read_molecule_csv(gt_path)
    cr = fp = fn = 0
    for frame in sorted(set(est) | set(gt)):
        rep = jaccard(est.get(frame, []), gt.get(frame, []), tolerance_nm)
        cr, fp, fn = cr + rep.cr, fp + rep.fp, fn + rep.fn
    return cr / (cr + fp + fn) if cr + fp + fn else 1.0


def _run_protocol_seed(directory, seed):
    """Simulate one 20-frame stack and localize it with both solvers."""
    directory.mkdir(parents=True, exist_ok=True)
    cfg_b = _write_protocol_config(directory, "biconvex", seed)
    cfg_i = _write_protocol_config(directory, "iht", seed)
    assert cmd_simulate(load_config(cfg_b)) == 0
    assert cmd_solve(load_config(cfg_b), jobs=2) in (0, 4)
    assert cmd_solve(load_config(cfg_i), jobs=2) in (0, 4)
    return {
        "configs": (cfg_b, cfg_i),
        "stack": directory / "stack.f32",
        "gt": directory / "ground_truth.csv",
        "biconvex": directory / "molecules_biconvex.csv",
        "iht": directory / "molecules_iht.csv",
    }


@pytest.fixture(scope="module")
def protocol_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("protocol")
    start = time.perf_counter()
    runs = {seed: _run_protocol_seed(base / f"seed_{seed}", seed) for seed in PROTOCOL_SEEDS}
    elapsed = time.perf_counter() - start
    return {"runs": runs, "elapsed": elapsed}


def test_criterion_8_biconvex_not_inferior_to_iht(protocol_runs):
    per_seed = {}
    for seed, paths in protocol_runs["runs"].items():
        per_seed[seed] = (
            _aggregate_jaccard(paths["biconvex"], paths["gt"]),
            _aggregate_jaccard(paths["iht"], paths["gt"]),
        )
    mean_b = float(np.mean([v[0] for v in per_seed.values()]))
    mean_i = float(np.mean([v[1] for v in per_seed.values()]))
    print("\n[acceptance] criterion 8 detail: per-seed jaccard@100nm (biconvex, iht)")
    for seed, (jb, ji) in per_seed.items():
        print(f"    seed {seed}: {jb:.4f}  {ji:.4f}")
    print(f"    means: biconvex {mean_b:.4f}, iht {mean_i:.4f}")
    assert mean_b >= mean_i - 0.02
    elapsed = protocol_runs["elapsed"]
    assert elapsed < 900.0
    report(
        8,
        "high-density localization: biconvex mean jaccard is not inferior",
        f"biconvex {mean_b:.3f} vs iht {mean_i:.3f}, {elapsed:.0f}s for 10 seeds x 20 frames",
    )


def test_criterion_9_protocol_is_byte_deterministic(protocol_runs):
    tracked = ("stack", "gt", "biconvex", "iht")
    before = {
        seed: {key: paths[key].read_bytes() for key in tracked}
        for seed, paths in protocol_runs["runs"].items()
    }
    for seed, paths in protocol_runs["runs"].items():
        cfg_b, cfg_i = paths["configs"]
        assert cmd_simulate(load_config(cfg_b)) == 0
        assert cmd_solve(load_config(cfg_b), jobs=2) in (0, 4)
        assert cmd_solve(load_config(cfg_i), jobs=2) in (0, 4)
        for key in tracked:
            assert paths[key].read_bytes() == before[seed][key], f"seed {seed}: {key} differs"
    report(9, "repeating the comparison reproduces every artifact byte for byte")
