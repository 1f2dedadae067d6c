"""Experiment-scale acceptance checks, one verdict per criterion.

Each test records its measured numbers through the ``acceptance`` fixture
before asserting, so the terminal summary shows a PASS/FAIL line for every
criterion even when one of them fails.
"""
import json
import time

import numpy as np
import pytest

from crisp_ik.baseline import DampedLeastSquaresIK
from crisp_ik.boxopt import OptimizerConfig, minimize
from crisp_ik.crisp import CRiSP, load_model, save_model, select_hyperparameters
from crisp_ik.data import TorusRegion, make_trajectory, read_dataset, sample_dataset, track, write_dataset, write_report
from crisp_ik.kernel import KernelSpec, embed_poses, gram
from crisp_ik.kinematics import BiasSpec, JointBox, make_panda, make_planar5, wrap_signed
from crisp_ik.loss import LossSpec, WeightedObjective, circle_dist_sq

pytestmark = pytest.mark.slow

PLANAR = make_planar5()
PANDA = make_panda()
N_PLANAR = 5000
SIGMAS = (0.25, 0.5, 1.0, 2.0)
LAMBDAS = ("auto", 1e-3, 1e-4, 1e-5, 1e-6)
JOINT_BIAS_DEG = (0.0, 0.1, 1.0, 3.0)
LINK_BIAS_MM = (1.0, 10.0, 30.0)
LINK_SIGN_SEEDS = range(8)
PANDA_N = 8000
PANDA_SIGMAS = (0.02, 0.05, 0.1)
PANDA_LAMBDAS = ("auto", 1e-4, 1e-6)


def _lam(value, n):
    return n**-0.5 if value == "auto" else value


def _pos_rmse(method, trajectory):
    return track(method, trajectory).summary()["pos_rmse_m"]


def _check(acceptance, key, passed, detail):
    acceptance.record(key, passed, detail)
    assert passed, detail


@pytest.fixture(scope="module")
def planar_train(acceptance):
    return acceptance.timed("planar_train", lambda: sample_dataset(PLANAR, N_PLANAR, seed=0))


@pytest.fixture(scope="module")
def planar_validation():
    return sample_dataset(PLANAR, 200, seed=1)


def _select(train_set, validation, sigmas, lams, loss):
    n = len(train_set)
    grid = [(KernelSpec("gaussian", s), _lam(lam, n)) for s in sigmas for lam in lams]
    return select_hyperparameters(train_set, validation, grid, LossSpec(loss, PLANAR if loss == "fk" else None),
                                  chain=PLANAR)


@pytest.fixture(scope="module")
def fk_default_lam(acceptance, planar_train, planar_validation):
    return acceptance.timed("fk_default_lam", lambda: _select(planar_train, planar_validation, SIGMAS, ("auto",), "fk"))


@pytest.fixture(scope="module")
def fk_tuned(acceptance, planar_train, planar_validation):
    return acceptance.timed("fk_tuned", lambda: _select(planar_train, planar_validation, SIGMAS, LAMBDAS, "fk"))


def _cost(acceptance, *names):
    return sum(acceptance.costs.get(n, 0.0) for n in names)


def test_criterion_1_unbiased_planar_tracking(acceptance, fk_default_lam):
    t = time.perf_counter()
    summary = track(fk_default_lam.model, make_trajectory("eight")).summary()
    runtime = time.perf_counter() - t + _cost(acceptance, "planar_train", "fk_default_lam")
    pos, orn = summary["pos_rmse_m"], summary["orn_rmse_rad"]
    detail = (f"sigma={fk_default_lam.kernel.sigma} lam={fk_default_lam.lam:.4g}: pos {100 * pos:.3f} cm (< 1), "
              f"orn {orn:.4f} rad (< 0.1), {runtime:.0f} s (< 600)")
    _check(acceptance, 1, pos < 0.01 and orn < 0.1 and runtime < 600, detail)


def test_planar_tracking_with_selected_lambda(fk_tuned):
    # Not a criterion: the same bound once lambda joins the validation grid.
    pos = _pos_rmse(fk_tuned.model, make_trajectory("eight"))
    assert pos < 0.01, (fk_tuned.kernel.sigma, fk_tuned.lam, pos)


def test_criterion_2_loss_ablation(acceptance, planar_train, planar_validation, fk_default_lam):
    radians = _select(planar_train, planar_validation, SIGMAS, ("auto",), "radians")
    eight = make_trajectory("eight")
    fk_pos = _pos_rmse(fk_default_lam.model, eight)
    r_pos = _pos_rmse(radians.model, eight)
    ratio = r_pos / fk_pos
    detail = f"radians-loss pos {100 * r_pos:.2f} cm vs FK-loss {100 * fk_pos:.3f} cm, ratio {ratio:.1f} (>= 10)"
    _check(acceptance, 2, ratio >= 10, detail)


def _monotone_increasing(values):
    return all(b > a for a, b in zip(values, values[1:]))


def test_criterion_3_joint_bias(acceptance, fk_tuned):
    t = time.perf_counter()
    circle = make_trajectory("circle2d")
    crisp, dls = [], []
    for deg in JOINT_BIAS_DEG:
        chain = PLANAR.with_bias(BiasSpec.joint(np.deg2rad(deg), PLANAR.n_joints))
        crisp.append(_pos_rmse(fk_tuned.model.with_loss_chain(chain), circle))
        dls.append(_pos_rmse(DampedLeastSquaresIK(chain).fit(), circle))
    runtime = time.perf_counter() - t + _cost(acceptance, "planar_train", "fk_tuned")
    monotone = _monotone_increasing(dls)
    ratio = dls[-1] / crisp[-1]
    detail = (f"DLS mm {[round(1000 * v, 2) for v in dls]} monotone={monotone}; CRiSP mm "
              f"{[round(1000 * v, 2) for v in crisp]}; 3 deg ratio {ratio:.2f} (>= 2), {runtime:.0f} s (< 1200)")
    _check(acceptance, 3, monotone and ratio >= 2 and runtime < 1200, detail)


def test_criterion_4_link_bias(acceptance, fk_tuned):
    # The sign of each link perturbation is not fixed by the criterion, so the
    # RMSE is averaged over a fixed set of seeded sign patterns.
    circle = make_trajectory("circle2d")
    crisp = np.zeros((len(LINK_SIGN_SEEDS), len(LINK_BIAS_MM)))
    dls = np.zeros_like(crisp)
    for r, seed in enumerate(LINK_SIGN_SEEDS):
        signs = np.random.default_rng(seed).choice([-1.0, 1.0], PLANAR.n_joints)
        for c, mm in enumerate(LINK_BIAS_MM):
            chain = PLANAR.with_bias(BiasSpec.link(mm / 1000, signs))
            crisp[r, c] = _pos_rmse(fk_tuned.model.with_loss_chain(chain), circle)
            dls[r, c] = _pos_rmse(DampedLeastSquaresIK(chain).fit(), circle)
    crisp_mean, dls_mean = crisp.mean(axis=0), dls.mean(axis=0)
    monotone = _monotone_increasing(list(dls_mean))
    ratio = dls_mean[-1] / crisp_mean[-1]
    per_pattern = np.round(dls[:, -1] / crisp[:, -1], 2).tolist()
    detail = (f"mean DLS mm {np.round(1000 * dls_mean, 2).tolist()} monotone={monotone}; mean CRiSP mm "
              f"{np.round(1000 * crisp_mean, 2).tolist()}; 30 mm ratio {ratio:.2f} (>= 2), per pattern {per_pattern}")
    _check(acceptance, 4, monotone and ratio >= 2, detail)


def test_criterion_5_consistency_trend(acceptance, planar_train, planar_validation):
    eight = make_trajectory("eight")
    sizes = (250, 500, 1000, 2000, 5000)
    errors = []
    for n in sizes:
        sel = _select(planar_train.head(n), planar_validation, SIGMAS, ("auto",), "fk")
        errors.append(_pos_rmse(sel.model, eight))
    decreases = sum(b < a for a, b in zip(errors, errors[1:]))
    detail = f"n {list(sizes)} pos cm {[round(100 * e, 2) for e in errors]}: {decreases} of 4 steps decrease (>= 3)"
    _check(acceptance, 5, decreases >= 3, detail)


def _fd_jacobian(chain, y, h=1e-6):
    cols = []
    for j in range(chain.n_joints):
        e = np.zeros(chain.n_joints)
        e[j] = h
        diff = chain.forward_array(y + e)[0] - chain.forward_array(y - e)[0]
        diff[chain.pos_dim:] = wrap_signed(diff[chain.pos_dim:])
        cols.append(diff / (2 * h))
    return np.column_stack(cols)


def test_criterion_6a_jacobian(acceptance):
    worst = 0.0
    for chain in (PLANAR, PANDA):
        for y in chain.box.sample(np.random.default_rng(60), 100):
            fd = _fd_jacobian(chain, y)
            worst = max(worst, np.max(np.abs(chain.jacobian(y) - fd)) / max(1.0, np.max(np.abs(fd))))
    _check(acceptance, "6a", worst <= 1e-5, f"Jacobian worst relative FD gap {worst:.2e} (<= 1e-5)")


def test_criterion_6b_loss_gradient(acceptance):
    rng = np.random.default_rng(61)
    worst, checked = 0.0, 0
    for chain in (PLANAR, PANDA):
        spec = LossSpec("fk", chain)
        while checked < 100 * (1 + (chain is PANDA)):
            ys = chain.box.sample(rng, 6)
            y = chain.box.sample(rng, 1)[0]
            d = chain.pos_dim
            gap = np.abs(np.mod(chain.forward_array(y)[0, d:] - chain.forward_array(ys)[:, d:], 2 * np.pi) - np.pi)
            if np.any(gap < 1e-3) or chain.jacobian(y, return_flag=True)[1]:
                continue
            obj = WeightedObjective(spec, rng.normal(size=6), ys)
            grad = obj(y)[1]
            fd = np.array([(obj(y + e)[0] - obj(y - e)[0]) / 2e-6 for e in np.eye(y.size) * 1e-6])
            worst = max(worst, np.max(np.abs(grad - fd)) / max(1.0, np.max(np.abs(fd))))
            checked += 1
    _check(acceptance, "6b", worst <= 1e-5, f"FK-loss gradient worst relative FD gap {worst:.2e} over {checked}")


def test_criterion_6c_weights_residual(acceptance):
    ds = sample_dataset(PLANAR, 500, seed=62)
    model = CRiSP(PLANAR, sigma=1.0, lam=1e-3).fit(ds.X, ds.Y)
    K = gram(model.kernel_spec_, embed_poses(ds.X, 2))
    A = K + 500 * 1e-3 * np.eye(500)
    queries = sample_dataset(PLANAR, 50, seed=63).X
    W = model.weights(queries)
    Kx = gram(model.kernel_spec_, embed_poses(np.vstack([queries, ds.X]), 2))[:50, 50:]
    worst = max(np.linalg.norm(A @ w - kx) / np.linalg.norm(kx) for w, kx in zip(W, Kx))
    _check(acceptance, "6c", worst <= 1e-9, f"weights relative residual {worst:.2e} (<= 1e-9)")


def test_criterion_6d_in_box(acceptance):
    ds = sample_dataset(PLANAR, 300, seed=64)
    model = CRiSP(PLANAR, sigma=1.0, lam=1e-3, n_starts=1, max_iters=60).fit(ds.X, ds.Y)
    rng = np.random.default_rng(65)
    X = np.column_stack([rng.uniform(-14, 14, (1000, 2)), rng.uniform(-10, 10, 1000)])
    inside = sum(PLANAR.box.contains(model.predict_one(x).y) for x in X)
    _check(acceptance, "6d", inside == 1000, f"{inside}/1000 predictions in box")


def test_criterion_6e_metric_axioms(acceptance):
    rng = np.random.default_rng(66)
    a, b, c = (rng.uniform(-10, 10, (1000, 7)) for _ in range(3))

    def d(u, v):
        return np.sqrt(circle_dist_sq(u, v))

    tol = 1e-12
    ok = (np.all(d(a, a) == 0) and np.all(d(a, b) >= 0) and np.allclose(d(a, b), d(b, a), atol=tol)
          and np.all(d(a, c) <= d(a, b) + d(b, c) + tol) and np.all(d(a, a + 2 * np.pi) <= 1e-7))
    _check(acceptance, "6e", bool(ok), "identity, symmetry, triangle, periodicity on 1000 triples")


def test_criterion_6f_boxopt_references(acceptance):
    rng = np.random.default_rng(67)
    worst_pg = 0.0
    for _ in range(20):
        J = int(rng.integers(1, 11))
        B = rng.normal(size=(J, J))
        Q = B @ B.T + 0.5 * np.eye(J)
        c = rng.normal(size=J) * 3
        box = JointBox(-np.ones(J), np.ones(J))
        res = minimize(lambda y: (float(0.5 * y @ Q @ y - c @ y), Q @ y - c), box, rng.uniform(-1, 1, J),
                       OptimizerConfig(max_iters=500, objective_tolerance=1e-20))
        g = Q @ res.minimizer - c
        worst_pg = max(worst_pg, np.max(np.abs(res.minimizer - np.clip(res.minimizer - g, -1, 1))))

    def rosen(y):
        a, b = y
        return float((1 - a) ** 2 + 100 * (b - a**2) ** 2), np.array(
            [-2 * (1 - a) - 400 * a * (b - a**2), 200 * (b - a**2)])

    res = minimize(rosen, JointBox(np.full(2, -2.0), np.full(2, 2.0)), np.array([-1.2, 1.0]),
                   OptimizerConfig(max_iters=500))
    gap = np.max(np.abs(res.minimizer - 1.0))
    ok = worst_pg <= 1e-6 and gap <= 1e-6 and res.converged
    _check(acceptance, "6f", ok, f"quadratic projected gradient {worst_pg:.1e}, Rosenbrock gap {gap:.1e}")


def test_criterion_6g_round_trips(acceptance, tmp_path):
    ds = sample_dataset(PLANAR, 200, seed=68)
    write_dataset(ds, tmp_path / "a.csv")
    write_dataset(read_dataset(tmp_path / "a.csv"), tmp_path / "b.csv")
    data_ok = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    model = CRiSP(PLANAR, sigma=1.0, lam=1e-3).fit(ds.X, ds.Y)
    save_model(model, tmp_path / "a.model")
    save_model(load_model(tmp_path / "a.model"), tmp_path / "b.model")
    model_ok = (tmp_path / "a.model").read_bytes() == (tmp_path / "b.model").read_bytes()

    report = track(model, make_trajectory("eight", n_points=8))
    write_report(report, tmp_path / "r1")
    write_report(report, tmp_path / "r2")
    same = all((tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes()
               for f in ("tracking.csv", "plot.csv", "summary.json"))
    rows = [line for line in (tmp_path / "r1" / "tracking.csv").read_text().splitlines() if not line[0] in "#t"]
    parsed = np.array([[float(v) for v in row.split(",")[4:9]] for row in rows])
    summary = json.loads((tmp_path / "r1" / "summary.json").read_text())
    report_ok = (same and np.array_equal(parsed, report.predicted)
                 and summary["pos_rmse_m"] == report.summary()["pos_rmse_m"])
    ok = data_ok and model_ok and report_ok
    _check(acceptance, "6g", ok, f"dataset {data_ok}, model {model_ok}, report {report_ok}")


@pytest.fixture(scope="module")
def panda_selection(acceptance):
    def build():
        region = TorusRegion()
        train_set = sample_dataset(PANDA, PANDA_N, region=region, seed=0)
        validation = sample_dataset(PANDA, 60, region=region, seed=1)
        grid = [(KernelSpec("gaussian", s), _lam(lam, PANDA_N)) for s in PANDA_SIGMAS for lam in PANDA_LAMBDAS]
        return select_hyperparameters(train_set, validation, grid, LossSpec("fk", PANDA))

    return acceptance.timed("panda_selection", build)


def test_criterion_7_panda_smoke(acceptance, panda_selection):
    t = time.perf_counter()
    circle = make_trajectory("circle3d")
    model = panda_selection.model
    nominal = _pos_rmse(model, circle)
    biased = PANDA.with_bias(BiasSpec.joint(np.deg2rad(3.0), PANDA.n_joints))
    crisp_b = _pos_rmse(model.with_loss_chain(biased), circle)
    dls_b = _pos_rmse(DampedLeastSquaresIK(biased).fit(), circle)
    runtime = time.perf_counter() - t + _cost(acceptance, "panda_selection")
    detail = (f"sigma={panda_selection.kernel.sigma} lam={panda_selection.lam:.3g}: zero-bias pos "
              f"{1000 * nominal:.3f} mm (< 10); 3 deg CRiSP {1000 * crisp_b:.2f} mm vs DLS {1000 * dls_b:.2f} mm; "
              f"{runtime:.0f} s (< 1800)")
    _check(acceptance, 7, nominal < 0.01 and crisp_b < dls_b and runtime < 1800, detail)
