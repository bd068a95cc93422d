"""Acceptance criteria 1-10, each reported as one PASS/FAIL line in the terminal summary.

MNIST-backed criteria (7, 8, 9 and the N=0 part of 3) skip when the digits are absent.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from mistlab import ops
from mistlab.attacks import AttackConfig, momentum_step, run_attack
from mistlab.benchmark import BASE_ATTACK, SURROGATE, TARGETS, build_setup, headline_attacks, mnist_mist, zoo_fingerprint
from mistlab.cli import EXIT_OK, main
from mistlab.data import parse_idx_bytes, write_idx
from mistlab.evaluation import (
    LAMBDA_GRID,
    N_GRID,
    ablate_components,
    ablate_lambda,
    ablate_n,
    component_variants,
    transfer_matrix,
)
from mistlab.exceptions import IDXMagicError, IDXOverflowError, IDXTruncatedError
from mistlab.models import LinearSoftmax, make_classifier
from mistlab.tensor import (
    Tensor,
    add,
    concat,
    cross_entropy,
    grad,
    grad_check,
    log_softmax,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    sub,
    take,
    tsum,
)
from mistlab.toy2d import ToySpec, generate, run_toy_experiment, toy_epsilon, train_pair
from mistlab.transforms import (
    DIM,
    MIST,
    SIM,
    TIM,
    Admix,
    Identity,
    PassCounter,
    compose,
    dim_transform,
    estimate_admix,
    estimate_identity,
    estimate_mist,
    estimate_sim,
    tim_filter,
)

# golden values from the seeded reference run (seed 0), asserted within one point
GOLDEN_BLACKBOX = {"mi-fgsm": 0.7947, "admix": 0.8007, "mist": 0.8333}
GOLDEN_TOL = 0.01
TOY_SEEDS = range(5)
TOY_EPS_FACTOR = 2.5  # "sufficient" budget: every method fools f1 on every seed


def verdict(log, label, ok, detail):
    log.append(f"criterion {label}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# -- 1: gradient oracle -------------------------------------------------------------


def _weights(r, shape):
    return r.standard_normal(shape)


def _op_cases():
    """(name, input shape, function of (tensor, rng-derived constants))."""
    return [
        ("add", (3, 4), lambda t, r: tsum(mul(add(t, _weights(r, (4,))), _weights(r, (3, 4))))),
        ("sub", (3, 4), lambda t, r: tsum(mul(sub(_weights(r, (3, 1)), t), _weights(r, (3, 4))))),
        ("mul", (3, 4), lambda t, r: tsum(mul(t, t))),
        ("matmul", (3, 4), lambda t, r: tsum(mul(matmul(t, _weights(r, (4, 2))), _weights(r, (3, 2))))),
        ("mean", (3, 4), lambda t, r: tsum(mul(mean(t, axis=0), _weights(r, (4,))))),
        ("reshape", (3, 4), lambda t, r: tsum(mul(reshape(t, (2, 6)), _weights(r, (2, 6))))),
        ("relu", (3, 4), lambda t, r: tsum(mul(relu(t), _weights(r, (3, 4))))),
        ("take", (5, 2), lambda t, r: tsum(mul(take(t, [4, 0, 4]), _weights(r, (3, 2))))),
        ("concat", (2, 3), lambda t, r: tsum(mul(concat([t, mul(t, t)], axis=0), _weights(r, (4, 3))))),
        ("log_softmax", (3, 5), lambda t, r: tsum(mul(log_softmax(t), _weights(r, (3, 5))))),
        ("cross_entropy", (4, 5), lambda t, r: tsum(cross_entropy(t, r.integers(0, 5, 4)))),
        ("circular_shift", (2, 1, 5, 5), lambda t, r: tsum(mul(ops.circular_shift(t, r.integers(-4, 5, (2, 2))), _weights(r, (2, 1, 5, 5))))),
        ("resize_bilinear", (1, 2, 5, 5), lambda t, r: tsum(mul(ops.resize_bilinear(t, (7, 6)), _weights(r, (1, 2, 7, 6))))),
        ("pad_zero", (1, 1, 4, 4), lambda t, r: tsum(mul(ops.pad_zero(t, 1, 2, 0, 1), _weights(r, (1, 1, 5, 7))))),
        ("conv_same", (1, 2, 6, 6), lambda t, r: tsum(mul(ops.conv_same(t, _weights(r, (3, 3))), _weights(r, (1, 2, 6, 6))))),
        ("conv2d", (2, 2, 5, 5), lambda t, r: tsum(mul(ops.conv2d(t, _weights(r, (3, 2, 3, 3)), _weights(r, (3,)), padding=1), _weights(r, (2, 3, 5, 5))))),
        ("max_pool2x2", (1, 2, 4, 4), lambda t, r: tsum(mul(ops.max_pool2x2(t), _weights(r, (1, 2, 2, 2))))),
        ("dim_transform", (1, 1, 6, 6), lambda t, r: tsum(mul(dim_transform(t, 1.0, 1.5, np.random.default_rng(int(r.integers(1 << 30)))), _weights(r, (1, 1, 6, 6))))),
    ]


ARCHITECTURES = {
    "linear-softmax": dict(input_shape=(1, 6, 6)),
    "mlp": dict(input_shape=(1, 6, 6), hidden=5),
    "small-conv": dict(input_shape=(1, 8, 8), channels=(2, 3)),
}


def _arch_case(arch, r):
    opts = dict(ARCHITECTURES[arch])
    shape = opts.pop("input_shape")
    model = make_classifier(arch, **opts)
    params = model._init_params(r, shape, 4)
    params = {k: v + 0.1 * r.standard_normal(v.shape) for k, v in params.items()}
    x = r.uniform(0, 1, size=(2,) + shape)
    y = r.integers(0, 4, 2)
    consts = {k: Tensor(v) for k, v in params.items()}
    checks = [("input", x, lambda t: tsum(cross_entropy(model._logits(consts, t), y)))]
    for name, value in params.items():
        def fn(t, name=name):
            p = dict(consts)
            p[name] = t
            return tsum(cross_entropy(model._logits(p, Tensor(x)), y))

        checks.append((name, value, fn))
    return checks


def test_criterion_1_gradient_oracle(acceptance_log):
    start = time.perf_counter()
    cases = [("op", c) for c in _op_cases()] + [("arch", a) for a in ARCHITECTURES]
    worst, worst_at, trials = 0.0, None, 100
    for trial in range(trials):
        r = np.random.default_rng([2024, trial])
        kind, case = cases[trial % len(cases)]
        if kind == "op":
            name, shape, fn = case
            seed = int(r.integers(1 << 30))
            x = r.standard_normal(shape)
            checks = [(name, x, lambda t, fn=fn, seed=seed: fn(t, np.random.default_rng(seed)))]
        else:
            checks = [(f"{case}/{n}", v, f) for n, v, f in _arch_case(case, r)]
        for name, x, fn in checks:
            err = grad_check(fn, x, h=1e-5)
            if err > worst:
                worst, worst_at = err, name
    elapsed = time.perf_counter() - start
    covered = len(_op_cases()) + len(ARCHITECTURES)
    ok = worst < 1e-5 and elapsed < 30
    verdict(acceptance_log, 1, ok, f"{trials} trials over {covered} ops/architectures, max rel err {worst:.2e} ({worst_at}), {elapsed:.1f}s")


# -- 2: decomposition identity ----------------------------------------------------------


def test_criterion_2_decomposition_identity(acceptance_log):
    r = np.random.default_rng(7)
    model = make_classifier("mlp", hidden=8)
    params = {k: Tensor(v) for k, v in model._init_params(r, (6,), 5).items()}
    worst = 0.0
    for _ in range(1000):
        x = r.standard_normal((1, 6))
        y1, y2 = r.integers(0, 5, 1), r.integers(0, 5, 1)
        lam = r.uniform()
        leaf = Tensor(x, requires_grad=True)
        logits = model._logits(params, leaf)
        mixed = grad(tsum(add(mul(cross_entropy(logits, y1), lam), mul(cross_entropy(logits, y2), 1 - lam))), leaf)
        g1 = grad(tsum(cross_entropy(logits, y1)), leaf)
        g2 = grad(tsum(cross_entropy(logits, y2)), leaf)
        worst = max(worst, float(np.abs(lam * g1 + (1 - lam) * g2 - mixed).max()))
    verdict(acceptance_log, 2, worst <= 1e-12, f"1000 triples, max abs diff {worst:.2e}")


# -- 3: degenerate reductions -----------------------------------------------------------


@pytest.fixture(scope="module")
def mnist(mnist_dir, request):
    start = time.perf_counter()
    cache = request.config.cache.mkdir(f"mistlab-zoo-{zoo_fingerprint()}")
    setup = build_setup(mnist_dir, cache_dir=cache)
    setup.build_seconds = time.perf_counter() - start
    return setup


@pytest.mark.slow
def test_criterion_3_degenerate_reductions(acceptance_log, tiny_models, tiny_images, mnist):
    X, y = tiny_images
    x, yy = X[::5], y[::5]
    zero = np.zeros_like(x)
    results = {}
    for name, model in tiny_models.items():
        plain = estimate_identity(model, x, yy)
        g_mist = estimate_mist(model, x, yy, MIST(n=3, fixed_lambda=1.0, shift=False), np.random.default_rng(0))
        results.setdefault("mist-direction", []).append(
            np.array_equal(momentum_step(zero, g_mist, 1.0), momentum_step(zero, plain, 1.0))
        )
        g_admix = estimate_admix(model, x, yy, X, y, m2=3, eta=0.0, scale=None, rng=np.random.default_rng(0))
        results.setdefault("admix-eta0", []).append(np.array_equal(g_admix, plain))
        results.setdefault("sim-m1", []).append(np.array_equal(estimate_sim(model, x, yy, 1), plain))
        results.setdefault("dim-p0", []).append(
            np.array_equal(compose([DIM(p=0.0)])(model, x, yy, np.random.default_rng(0)), plain)
        )
        results.setdefault("tim-size1", []).append(np.array_equal(tim_filter(plain, TIM(size=1).kernel), plain))
    base = AttackConfig(0.3, 10, clip=(0.0, 1.0))
    n_tab = ablate_n(mnist.surrogate, mnist.targets, mnist.X, mnist.y, BASE_ATTACK, grid=(0,), seed=0)
    report = transfer_matrix(
        {SURROGATE: mnist.surrogate, **mnist.targets}, {"mi-fgsm": BASE_ATTACK}, mnist.X, mnist.y,
        seed=0, surrogates=[SURROGATE], prefilter=False,
    )
    results["n0-row"] = [n_tab.per_target["0"][t] == report.rate(SURROGATE, t, "mi-fgsm") for t in TARGETS]
    failed = [k for k, v in results.items() if not all(v)]
    verdict(acceptance_log, 3, not failed, f"{len(results)} reductions exact" if not failed else f"failed: {failed}")


# -- 4: budget invariant --------------------------------------------------------------


@pytest.mark.filterwarnings("ignore:could not avoid")
def test_criterion_4_budget_invariant(acceptance_log, tiny_models, tiny_images):
    X, y = tiny_images
    r = np.random.default_rng(44)
    names = ["mi-fgsm", "dim", "tim", "sim", "admix", "mist", "mist-ti-dim", "mist-si-ti-dim", "admix-ti-dim"]
    from mistlab.attacks import estimator_specs

    worst_excess, range_ok, count = -np.inf, True, 0
    for k in range(50):
        eps = float(r.uniform(0.01, 0.5))
        n_iter = int(r.integers(1, 8))
        step = None if r.random() < 0.5 else float(r.uniform(0.005, 0.5))
        specs = estimator_specs(names[k % len(names)])
        specs = tuple(MIST(n=2, max_shift=int(r.integers(0, 4))) if isinstance(s, MIST) else s for s in specs)
        lo = float(r.choice([0.0, 0.1]))
        config = AttackConfig(eps, n_iter, step, float(r.uniform(0, 1.5)), (lo, 1.0), specs, seed=k, record_trajectory=True)
        model = list(tiny_models.values())[k % 3]
        idx = r.choice(len(y), 8, replace=False)
        x0 = np.clip(X[idx], lo, 1.0)
        res = run_attack(model, x0, y[idx], config)
        for it in res.trajectory:
            worst_excess = max(worst_excess, float(np.abs(it - x0).max() - eps))
            range_ok &= bool(it.min() >= lo and it.max() <= 1.0)
            count += 1
    ok = worst_excess <= 1e-9 and range_ok
    verdict(acceptance_log, 4, ok, f"50 configs, {count} iterates, max (linf - eps) {worst_excess:.2e}, range ok {range_ok}")


# -- 5: pass counts ---------------------------------------------------------------------


def test_criterion_5_pass_counts(acceptance_log, tiny_models, tiny_images):
    X, y = tiny_images
    x, yy = X[::4], y[::4]
    rows = []
    for n_iter, n in [(1, 1), (10, 30), (4, 7)]:
        res = run_attack(tiny_models["mlp"], x, yy, AttackConfig(0.1, n_iter, estimator=[MIST(n=n)]))
        rows.append((res.counter.forwards, res.counter.backwards) == (n_iter * n, 2 * n_iter * n))
    for n_iter, m, m2 in [(1, 5, 3), (3, 2, 4)]:
        res = run_attack(tiny_models["mlp"], x, yy, AttackConfig(0.1, n_iter, estimator=[Admix(m2=m2, scale=m)]))
        rows.append((res.counter.forwards, res.counter.backwards) == (n_iter * m * m2,) * 2)
    verdict(acceptance_log, 5, all(rows), f"{sum(rows)}/{len(rows)} MIST/Admix configurations match closed form")


# -- 6: toy reproduction ------------------------------------------------------------------


def test_criterion_6_toy(acceptance_log):
    start = time.perf_counter()
    per_seed = []
    for s in TOY_SEEDS:
        ds = generate(ToySpec(seed=s))
        f1, f2 = train_pair(ds, (10 * s + 1, 10 * s + 2))
        starts = ds.points[(ds.labels == 0) & (f1.predict(ds.points) == 0) & (f2.predict(ds.points) == 0)][:200]
        res = run_toy_experiment(ds, f1, f2, epsilon=toy_epsilon(f1, starts, TOY_EPS_FACTOR), n_points=200, seed=s)
        per_seed.append(res.summary)
    elapsed = time.perf_counter() - start
    a = all(s[m]["whitebox_rate"] >= 0.99 for s in per_seed for m in s)
    b_count = sum(
        s["MIST"]["transfer_rate"] >= s["Admix"]["transfer_rate"] >= s["MI-FGSM"]["transfer_rate"]
        and s["MIST"]["transfer_rate"] - s["MI-FGSM"]["transfer_rate"] >= 0.05
        for s in per_seed
    )
    c_count = sum(s["MIST"]["mean_dist"] < s["Admix"]["mean_dist"] < s["MI-FGSM"]["mean_dist"] for s in per_seed)
    gaps = [round(s["MIST"]["transfer_rate"] - s["MI-FGSM"]["transfer_rate"], 3) for s in per_seed]
    ok = a and b_count >= 4 and c_count >= 4 and elapsed < 120
    detail = (
        f"(a) whitebox >= 0.99 {'PASS' if a else 'FAIL'}; "
        f"(b) transfer ordering with 5pt gap {b_count}/5 {'PASS' if b_count >= 4 else 'FAIL'} (MIST-MI gaps {gaps}); "
        f"(c) distance ordering {c_count}/5 {'PASS' if c_count >= 4 else 'FAIL'}; {elapsed:.1f}s"
    )
    verdict(acceptance_log, 6, ok, detail)


# -- 7-9: MNIST -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def headline(mnist):
    start = time.perf_counter()
    models = {SURROGATE: mnist.surrogate, **mnist.targets}
    report = transfer_matrix(models, headline_attacks(), mnist.X, mnist.y, seed=0, surrogates=[SURROGATE], prefilter=False)
    report.seconds = time.perf_counter() - start + mnist.build_seconds
    return report


@pytest.mark.slow
def test_criterion_7_mnist_transfer(acceptance_log, mnist, headline):
    means = {a: headline.blackbox_mean(SURROGATE, a) for a in GOLDEN_BLACKBOX}
    ordered = means["mist"] > means["admix"] > means["mi-fgsm"]
    gap = means["mist"] - means["admix"]
    golden = all(abs(means[a] - GOLDEN_BLACKBOX[a]) <= GOLDEN_TOL for a in means)
    ok = ordered and gap >= 0.03 and golden and len(mnist.y) == 500 and headline.seconds < 900
    shown = ", ".join(f"{a} {v:.4f}" for a, v in means.items())
    verdict(acceptance_log, 7, ok, f"n={len(mnist.y)}: {shown}; MIST-Admix {100 * gap:.2f}pt; golden +-1pt {golden}; {headline.seconds:.0f}s")


@pytest.fixture(scope="module")
def sweeps(mnist):
    lam = ablate_lambda(mnist.surrogate, mnist.targets, mnist.X, mnist.y, BASE_ATTACK, LAMBDA_GRID, 0, mnist_mist())
    n = ablate_n(mnist.surrogate, mnist.targets, mnist.X, mnist.y, BASE_ATTACK, N_GRID, 0, mnist_mist())
    return lam, n


@pytest.mark.slow
def test_criterion_8_ablation_shapes(acceptance_log, sweeps):
    lam, n = sweeps
    argmax = lam.values[int(np.argmax(lam.means))]
    interior = argmax not in (lam.values[0], lam.values[-1])
    r0, r5, r30 = n.mean("0"), n.mean("5"), n.mean("30")
    monotone = r30 >= r5 >= r0
    lam_text = " ".join(f"{v}:{m:.4f}" for v, m in zip(lam.values, lam.means))
    verdict(
        acceptance_log, 8, interior and monotone,
        f"lambda sweep [{lam_text}] argmax {argmax} interior {interior}; N sweep 0:{r0:.4f} 5:{r5:.4f} 30:{r30:.4f} monotone {monotone}",
    )


@pytest.mark.slow
def test_criterion_9_component_ablation(acceptance_log, mnist):
    tab = ablate_components(mnist.surrogate, mnist.targets, mnist.X, mnist.y, BASE_ATTACK, 0, component_variants(mnist_mist()))
    m = dict(zip(tab.values, tab.means))
    mix_gain = m["mixup"] - m["admix-noscale"]
    shift_gain = m["mixup-shift"] - m["mixup"]
    ok = mix_gain >= 0.01 and shift_gain >= 0.01
    shown = ", ".join(f"{k} {v:.4f}" for k, v in m.items())
    verdict(acceptance_log, 9, ok, f"{shown}; mixup-admix {100 * mix_gain:.2f}pt, shift gain {100 * shift_gain:.2f}pt")


# -- 10: reproducibility ---------------------------------------------------------------


def test_criterion_10_reproducibility(acceptance_log, tmp_path):
    checks = {}
    first, second = tmp_path / "a", tmp_path / "b"
    checks["gen-toy exit"] = main(["gen-toy", "--seed", "3", "--n-points", "50", "--out", str(first)]) == EXIT_OK
    checks["rerun exit"] = main(["rerun", str(first / "manifest.json"), "--out", str(second)]) == EXIT_OK
    csvs = sorted(p.name for p in first.glob("*.csv"))
    checks["csv identical"] = bool(csvs) and all((first / c).read_bytes() == (second / c).read_bytes() for c in csvs)
    manifest = json.loads((first / "manifest.json").read_text())
    checks["manifest seed"] = manifest["seed"] == 3

    images = bytes([0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 128, 7, 1, 2, 254, 64])
    data, shape = parse_idx_bytes(images)
    checks["idx values"] = shape == (2, 2, 2) and data.reshape(-1).tolist() == [0, 255, 128, 7, 1, 2, 254, 64]
    labels = bytes([0, 0, 8, 1, 0, 0, 0, 2, 3, 9])
    checks["idx labels"] = parse_idx_bytes(labels)[0].tolist() == [3, 9]
    write_idx(tmp_path / "f.idx", data)
    checks["idx writer"] = (tmp_path / "f.idx").read_bytes() == images
    for name, raw, exc in [
        ("idx truncation", images[:-1], IDXTruncatedError),
        ("idx magic", b"\x00\x00\x09\x03" + images[4:], IDXMagicError),
        ("idx overflow", b"\x00\x00\x08\x02" + b"\xff" * 8, IDXOverflowError),
    ]:
        try:
            parse_idx_bytes(raw)
            checks[name] = False
        except exc as e:
            checks[name] = "byte offset" in str(e)
    failed = [k for k, v in checks.items() if not v]
    verdict(acceptance_log, 10, not failed, f"{len(checks)} checks" + (f", failed {failed}" if failed else " all hold"))
