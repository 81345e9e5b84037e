"""Acceptance criteria, one test each, at their stated tolerances.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one PASS line per
criterion.  The end-to-end experiment (criteria 8-10) uses the planted-signal
synthetic dataset: 200 cases, 5-fold cross-validation, and the default
training protocol (micro-batch min(256, M_p), tau 0.5, eps 0.05, 20 epochs,
Adam lr 2e-4, weight decay 1e-5, 32-step gradient accumulation).
"""

import time

import numpy as np
import pytest

from otsurv.autodiff import Tape, backward
from otsurv.bags import SurvivalRecord, generate_synthetic_dataset
from otsurv.config import ExperimentConfig
from otsurv.microbatch import OTSettings, solve_batch
from otsurv.neural import (attention_pool_t, encode_genomic_t, hazard_t,
                           init_params, project_t, wrap_params)
from otsurv.survival import (PROB_EPS, c_index, chi2_sf_1df, km_estimate,
                             logrank)
from otsurv.train import (CaseData, ablation_sweep, bench_solves, case_forward,
                          case_risk, cross_validate, load_cases,
                          pooled_logrank)
from otsurv.transport import (CostMatrix, Marginals, normalize_cost, sinkhorn,
                              solve_exact_emd, unbalanced_sinkhorn)

from oracles import lp_transport, pairwise_c_index

EXPERIMENT = dict(n_cases=200, M_p=48, M_g=6, d=64, signal_fraction=0.6,
                  noise_scale=0.25, censor_rate=0.25, seed=11)
PROTOCOL = dict(seed=0, folds=5, micro_batch=256, epsilon=0.05, tau=0.5,
                epochs=20, lr=2e-4, weight_decay=1e-5, grad_accum_steps=32,
                bins=4, attention_mode="umbot")


def random_instance(rng, n, m):
    C = CostMatrix(rng.uniform(0.0, 1.0, size=(n, m)), "l2")
    a = rng.integers(1, 10, size=n).astype(float)
    b = rng.integers(1, 10, size=m).astype(float)
    return C, Marginals(a / a.sum(), b / b.sum())


@pytest.fixture(scope="module")
def experiment_cases(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance_data")
    manifest = generate_synthetic_dataset(output_dir=out, **EXPERIMENT)
    return load_cases(manifest)


_experiment_reports = {}


def run_experiment(cases, out_dir=None):
    config = ExperimentConfig(**PROTOCOL)
    report = cross_validate(cases, config, out_dir)
    result = pooled_logrank(report, {c.case_id: c.record for c in cases})
    return report, result


def test_criterion_1_exact_ot_oracle_agreement():
    rng = np.random.default_rng(100)
    t0 = time.perf_counter()
    worst_gap = worst_diff = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 6))
        m = int(rng.integers(2, 5))
        C, marg = random_instance(rng, n, m)
        plan = solve_exact_emd(C, marg)
        want = lp_transport(C.values, marg.source, marg.target)
        worst_diff = max(worst_diff, abs(plan.objective_value - want))
        worst_gap = max(worst_gap, abs(plan.duality_gap))
    elapsed = time.perf_counter() - t0
    assert worst_diff <= 1e-9
    assert worst_gap <= 1e-8
    assert elapsed < 10.0
    print(f"\nPASS criterion 1: exact OT matches LP oracle on 100 instances "
          f"(max objective diff {worst_diff:.2e}, max gap {worst_gap:.2e}, "
          f"{elapsed:.1f}s)")


def test_criterion_2_entropic_limit():
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(50):
        C, marg = random_instance(rng, 4, 3)
        C = normalize_cost(C)
        exact = solve_exact_emd(C, marg)
        plan = sinkhorn(C, marg, epsilon=1e-3, max_iters=50000, tol=1e-10)
        worst = max(worst, abs(plan.objective_value - exact.objective_value))
    assert worst <= 1e-3
    print(f"\nPASS criterion 2: sinkhorn at eps=1e-3 within {worst:.2e} "
          f"of exact EMD over 50 instances (tolerance 1e-3)")


def test_criterion_3_unbalanced_limits():
    rng = np.random.default_rng(102)
    worst_closed = worst_balanced = 0.0
    for _ in range(20):
        C, marg = random_instance(rng, 4, 3)
        eps = float(rng.uniform(0.05, 0.3))
        plan0 = unbalanced_sinkhorn(C, marg, epsilon=eps, tau=0.0)
        closed = np.outer(marg.source, marg.target) * np.exp(-C.values / eps)
        worst_closed = max(worst_closed, float(np.abs(plan0.coupling - closed).max()))
        balanced = sinkhorn(C, marg, epsilon=0.1, tol=1e-10, max_iters=100000)
        relaxed = unbalanced_sinkhorn(C, marg, epsilon=0.1, tau=1e6,
                                      tol=1e-12, max_iters=5000)
        worst_balanced = max(worst_balanced,
                             float(np.abs(balanced.coupling - relaxed.coupling).max()))
    assert worst_closed <= 1e-10
    assert worst_balanced <= 1e-4
    print(f"\nPASS criterion 3: tau=0 closed form to {worst_closed:.2e} "
          f"(tol 1e-10); tau=1e6 matches balanced to {worst_balanced:.2e} (tol 1e-4)")


def test_criterion_4_microbatch_equivalence():
    rng = np.random.default_rng(103)
    from otsurv.bags import GenomicProfile

    attr_dims = [8, 10, 12]
    profile = GenomicProfile([(f"c{j}", rng.standard_normal(dj))
                              for j, dj in enumerate(attr_dims)], "x")
    case = CaseData("x", rng.standard_normal((12, 8)), profile,
                    SurvivalRecord(10.0, 0, bin=2))
    params = init_params(8, 8, attr_dims, 4, seed=9)
    settings = OTSettings(epsilon=0.1, tau=0.5)

    _, _, loss, hazards, _ = case_forward(params, case, m=12,
                                          ot_settings=settings, mode="umbot",
                                          seed=77)
    risk = case_risk(params, case, 12, settings, "umbot", 77)

    # whole-bag pipeline written without the batching machinery
    tape = Tape()
    pv = wrap_params(tape, params)
    b_g = encode_genomic_t(tape, pv, profile)
    pooled_g = attention_pool_t(tape, pv, "attn_g", b_g, 4)
    projected = project_t(tape, pv, tape.const(case.pathology_raw))
    tplan = solve_batch(projected.value, b_g.value, settings)
    selected = tape.matmul(tape.const(tplan.coupling.T), projected)
    pooled_p = attention_pool_t(tape, pv, "attn_p", selected, 4)
    hazard_row = hazard_t(tape, pv, pooled_p, pooled_g)
    t = case.record.bin
    S_prev = None
    for z in range(t):
        f = tape.clamp_min(tape.sub_from(1.0, tape.pick(hazard_row, 0, z)), PROB_EPS)
        S_prev = f if S_prev is None else tape.mul(S_prev, f)
    log_h = tape.log(tape.clamp_min(tape.pick(hazard_row, 0, t), PROB_EPS))
    direct_loss = tape.scale(tape.add(tape.log(tape.clamp_min(S_prev, PROB_EPS)),
                                      log_h), -1.0)
    S = np.cumprod(1 - np.clip(hazard_row.value[0], PROB_EPS, 1 - PROB_EPS))
    direct_risk = -float(S.sum())

    assert float(loss.value) == float(direct_loss.value)
    assert np.array_equal(hazards[0], hazard_row.value[0])
    assert risk == direct_risk
    print("\nPASS criterion 4: m = M_p micro-batched pipeline equals the "
          "whole-bag pipeline exactly (loss and risk bitwise identical)")


def test_criterion_5_complexity_scaling():
    t0 = time.perf_counter()
    rows = bench_solves([2048, 4096, 8192], m=256, d=16, repeats=5)
    elapsed = time.perf_counter() - t0
    times = [secs for _, secs, _ in rows]
    r1 = times[1] / times[0]
    r2 = times[2] / times[1]
    assert r1 <= 2.5, f"2048->4096 ratio {r1:.2f}"
    assert r2 <= 2.5, f"4096->8192 ratio {r2:.2f}"
    assert elapsed < 120.0
    print(f"\nPASS criterion 5: doubling M scales solve time by "
          f"{r1:.2f}x and {r2:.2f}x (limit 2.5x per doubling, {elapsed:.1f}s)")


def test_criterion_6_gradient_verification():
    rng = np.random.default_rng(104)
    from otsurv.bags import GenomicProfile

    attr_dims = [8, 10, 12, 9, 11, 8]
    profile = GenomicProfile([(f"c{j}", rng.standard_normal(dj))
                              for j, dj in enumerate(attr_dims)], "x")
    case = CaseData("x", rng.standard_normal((10, 8)), profile,
                    SurvivalRecord(12.0, 0, bin=2))
    params = init_params(8, 8, attr_dims, 4, seed=10)
    settings = OTSettings(epsilon=0.1, tau=0.5)

    tape, pv, loss, _, couplings = case_forward(params, case, 5, settings,
                                                "umbot", 13)
    backward(tape, loss)
    arrays = dict(params.tensors())

    def loss_at():
        _, _, lv, _, _ = case_forward(params, case, 5, settings, "umbot", 13,
                                      fixed_couplings=couplings)
        return float(lv.value)

    # Relative error with an absolute floor of 1e-6: central differences at
    # 64-bit resolve the derivative to ~4e-12 absolute, so coordinates whose
    # gradient sits below the floor are still required to agree to 1e-11.
    worst = 0.0
    checked = 0
    for name, arr in arrays.items():
        grad = pv[name].grad
        assert grad is not None, f"no gradient for {name}"
        grad = grad.reshape(arr.shape)
        for _ in range(20):
            idx = tuple(rng.integers(0, s) for s in arr.shape)
            h = 1e-4 * max(1.0, abs(float(arr[idx])))
            arr[idx] += h
            fp = loss_at()
            arr[idx] -= 2 * h
            fm = loss_at()
            arr[idx] += h
            fd = (fp - fm) / (2 * h)
            ga = float(grad[idx])
            worst = max(worst, abs(fd - ga) / max(abs(fd), abs(ga), 1e-6))
            checked += 1
    assert worst <= 1e-5, f"worst rel err {worst:.2e}"
    print(f"\nPASS criterion 6: analytic gradients match central differences "
          f"to {worst:.2e} over {checked} coordinates across "
          f"{len(arrays)} tensors (tolerance 1e-5)")


def test_criterion_7_survival_metric_oracles():
    rng = np.random.default_rng(105)
    for _ in range(200):
        n = int(rng.integers(4, 14))
        times = rng.uniform(1, 50, size=n)
        if rng.uniform() < 0.3:
            times = np.round(times / 5) * 5
        censor = (rng.uniform(size=n) < 0.3).astype(int)
        censor[int(rng.integers(0, n))] = 0
        risks = rng.standard_normal(n)
        if rng.uniform() < 0.3:
            risks = np.round(risks)
        records = [SurvivalRecord(float(t), int(c)) for t, c in zip(times, censor)]
        try:
            got = c_index(risks, records)
        except Exception:
            continue
        want = pairwise_c_index(risks, times, censor == 0)
        assert got == want or abs(got - want) < 1e-14

    # hand-computed product-limit steps, including the tie convention
    km1 = km_estimate([SurvivalRecord(1, 0), SurvivalRecord(2, 0),
                       SurvivalRecord(3, 0)])
    assert np.allclose(km1.survival, [2 / 3, 1 / 3, 0.0])
    km2 = km_estimate([SurvivalRecord(1, 0), SurvivalRecord(1, 1),
                       SurvivalRecord(2, 0)])
    assert np.array_equal(km2.at_risk, [3, 1])
    assert np.allclose(km2.survival, [2 / 3, 0.0])

    p = chi2_sf_1df(3.841)
    assert abs(p - 0.05) <= 1e-3
    print(f"\nPASS criterion 7: c-index equals the exhaustive oracle on 200 "
          f"configurations; KM matches the hand-worked tie cases; "
          f"chi2 tail at 3.841 = {p:.5f} (0.05 +/- 1e-3)")


def test_criterion_8_end_to_end_synthetic(experiment_cases, tmp_path):
    untrained = cross_validate(experiment_cases,
                               ExperimentConfig(**{**PROTOCOL, "epochs": 0}))
    assert 0.4 <= untrained["c_index_mean"] <= 0.6, \
        f"untrained baseline {untrained['c_index_mean']:.3f} not near 0.5"

    t0 = time.perf_counter()
    report, lr_result = run_experiment(experiment_cases, tmp_path)
    elapsed = time.perf_counter() - t0
    _experiment_reports["first"] = report
    assert report["c_index_mean"] >= 0.75, \
        f"mean c-index {report['c_index_mean']:.3f} < 0.75"
    assert lr_result.p_value < 0.05
    assert elapsed < 15 * 60
    print(f"\nPASS criterion 8: untrained baseline "
          f"{untrained['c_index_mean']:.3f} (~0.5); trained mean c-index "
          f"{report['c_index_mean']:.3f} +/- {report['c_index_std']:.3f} "
          f">= 0.75; pooled log-rank p = {lr_result.p_value:.2e} < 0.05 "
          f"({elapsed / 60:.1f} min)")


def test_criterion_9_ablation_direction(experiment_cases, tmp_path):
    # Tab-2-style component sweep: umbot vs dense co-attention over 3 seeds.
    # Both arms get the same reduced budget (10 epochs) to keep the suite
    # fast; the comparison is budget-matched and deterministic.
    by_mode = {"umbot": [], "dense": []}
    for seed in (0, 1, 2):
        config = ExperimentConfig(**{**PROTOCOL, "seed": seed, "epochs": 10})
        rows = ablation_sweep(experiment_cases, config, m_values=[256],
                              modes=["umbot", "dense"],
                              out_dir=tmp_path / f"seed{seed}")
        for row in rows:
            assert row["status"] == "ok", row
            by_mode[row["mode"]].append(row["c_index"])
    csv_head = (tmp_path / "seed0" / "ablation.csv").read_text().splitlines()[0]
    assert csv_head == "mode,m,fold,c_index,status"
    mean_umbot = float(np.mean(by_mode["umbot"]))
    mean_dense = float(np.mean(by_mode["dense"]))
    assert mean_umbot >= mean_dense - 0.02, \
        f"umbot {mean_umbot:.4f} vs dense {mean_dense:.4f}"
    print(f"\nPASS criterion 9: umbot mean c-index {mean_umbot:.4f} >= "
          f"dense mean {mean_dense:.4f} - 0.02 over 3 seeds x 5 folds; "
          f"report emitted in ablation schema")


def test_criterion_10_determinism(experiment_cases):
    if "first" not in _experiment_reports:
        _experiment_reports["first"] = run_experiment(experiment_cases)[0]
    first = _experiment_reports["first"]
    repeat, _ = run_experiment(experiment_cases)
    assert repeat["c_index_mean"] == first["c_index_mean"]
    assert repeat["c_index_std"] == first["c_index_std"]
    assert repeat["per_fold"] == first["per_fold"]
    assert repeat["pooled_risks"] == first["pooled_risks"]
    print("\nPASS criterion 10: repeating the end-to-end experiment with the "
          "same seed reproduces every reported number bit-exactly")
