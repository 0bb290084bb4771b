"""Command-line surface: simulate | fit | sweep | check.

Flags may also be supplied through a JSON config file (``--config``); values
given on the command line win.  Exit codes: 0 on success, 2 for usage or
validation problems, 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import secrets
import sys
from pathlib import Path

import numpy as np

__all__ = ["main", "run_checks"]

FORMAT_VERSION = 1


class ValidationError(Exception):
    """Bad user input; reported with exit code 2."""


def _positive(value, name):
    if value is None or value <= 0:
        raise ValidationError(f"{name} must be positive, got {value}")
    return value


def _nonnegative(value, name):
    if value is None or value < 0:
        raise ValidationError(f"{name} must be nonnegative, got {value}")
    return value


def _resolve_seed(seed):
    """Draw and announce a seed when none was given."""
    if seed is None:
        seed = secrets.randbelow(2**31)
        print(f"seed: {seed} (drawn; pass --seed {seed} to reproduce)")
    return seed


def _merge_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> argparse.Namespace:
    """Fill argument values from the JSON config file for flags left unset."""
    if not getattr(args, "config", None):
        return args
    path = Path(args.config)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ValidationError("config file must hold a JSON object of flag values")
    known = set(vars(args))
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise ValidationError(f"config key {key!r} is not a recognized option")
        if getattr(args, dest) is None:
            setattr(args, dest, value)
    return args


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of default option values")
    p.add_argument("--seed", type=int, default=None, help="master random seed")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pfpca",
        description="Penalized-spline functional PCA for sparse curves",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="draw a sparse dataset from a known truth")
    _add_common(p_sim)
    p_sim.add_argument("--n", type=int, default=None, help="number of curves (default 100)")
    p_sim.add_argument("--out", default=None, help="output CSV path (default dataset.csv)")
    p_sim.add_argument("--family", choices=["fourier", "kinked"], default=None)
    p_sim.add_argument("--p", type=int, default=None, help="smoothness order of the kinked family")
    p_sim.add_argument("--r", type=int, default=None, help="number of components (default 2)")
    p_sim.add_argument("--sigma-e", type=float, default=None, help="noise standard deviation")
    p_sim.add_argument("--lambdas", default=None, help="comma-separated component variances")
    p_sim.add_argument("--m-lo", type=int, default=None, help="min observations per curve")
    p_sim.add_argument("--m-hi", type=int, default=None, help="max observations per curve")
    p_sim.add_argument("--score-dist", choices=["normal", "uniform"], default=None)

    p_fit = sub.add_parser("fit", help="estimate components from a dataset CSV")
    _add_common(p_fit)
    p_fit.add_argument("--data", default=None, help="input dataset CSV")
    p_fit.add_argument("--truth", default=None, help="dataset sidecar JSON for evaluation")
    p_fit.add_argument("--out", default=None, help="output JSON path (default fit.json)")
    p_fit.add_argument("--plot", default=None, help="optional SVG of the fitted components")
    p_fit.add_argument("--k", type=int, default=None, help="spline dimension (default 20)")
    p_fit.add_argument("--m", type=int, default=None, help="spline degree (default 3)")
    p_fit.add_argument("--q", type=int, default=None, help="penalty order (default 2)")
    p_fit.add_argument("--r", type=int, default=None, help="number of components (default 2)")
    p_fit.add_argument("--eta", type=float, default=None, help="penalty parameter (default 1e-4)")
    p_fit.add_argument("--loss", default=None, help="seed function (default frobenius)")
    p_fit.add_argument("--method", choices=["conjugate-gradient", "gradient-descent"], default=None)
    p_fit.add_argument("--max-iters", type=int, default=None)
    p_fit.add_argument("--grad-tol", type=float, default=None)
    p_fit.add_argument("--init", choices=["moment", "random"], default=None)

    p_sweep = sub.add_parser("sweep", help="run a Monte Carlo rate scenario")
    _add_common(p_sweep)
    p_sweep.add_argument("--scenario", default=None, help="scenario name (e.g. I.3)")
    p_sweep.add_argument("--fast", action="store_true", help="reduced grid and replicates")
    p_sweep.add_argument("--out-dir", default=None, help="output directory (default .)")
    p_sweep.add_argument("--workers", type=int, default=None, help="parallel worker processes")

    p_check = sub.add_parser("check", help="run the fast invariant suite")
    _add_common(p_check)

    return parser


def cmd_simulate(args) -> int:
    from . import simulate

    n = args.n if args.n is not None else 100
    _positive(n, "--n")
    seed = _resolve_seed(args.seed)
    family = args.family or "fourier"
    r = args.r if args.r is not None else 2
    _positive(r, "--r")
    sigma_e = args.sigma_e if args.sigma_e is not None else 0.5
    _nonnegative(sigma_e, "--sigma-e")
    if args.lambdas is not None:
        if isinstance(args.lambdas, str):
            lambdas = [float(x) for x in args.lambdas.split(",")]
        else:
            lambdas = [float(x) for x in args.lambdas]
    else:
        lambdas = [4.0 / 4**i for i in range(r)]
    if len(lambdas) != r:
        raise ValidationError(f"--lambdas must list {r} values, got {len(lambdas)}")
    m_lo = args.m_lo if args.m_lo is not None else 4
    m_hi = args.m_hi if args.m_hi is not None else 8
    if not (1 <= m_lo <= m_hi):
        raise ValidationError(f"--m-lo/--m-hi must satisfy 1 <= lo <= hi, got {m_lo}, {m_hi}")
    score_dist = args.score_dist or "normal"

    kwargs = dict(R=r, eigenvalues=lambdas, sigma_e=sigma_e, m_range=(m_lo, m_hi), score_dist=score_dist)
    try:
        if family == "kinked":
            if args.p is None:
                raise ValidationError("--p is required for the kinked family")
            tm = simulate.kinked_true_model(p=args.p, **kwargs)
        else:
            tm = simulate.fourier_true_model(**kwargs)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None

    out = Path(args.out or "dataset.csv")
    ds = simulate.sample_dataset(tm, n, seed=seed)
    meta = out.with_suffix(".json")
    simulate.write_dataset(ds, tm, out, meta)
    print(f"wrote {ds.n_obs} observations from {ds.n} curves to {out} (sidecar {meta})")
    return 0


def cmd_fit(args) -> int:
    from . import simulate
    from .basis import diagonalized_basis
    from .divergence import get_seed
    from .evaluate import align
    from .model import make_design_set
    from .optimizer import FitConfig, fit

    if not args.data:
        raise ValidationError("--data is required")
    data_path = Path(args.data)
    if not data_path.exists():
        raise ValidationError(f"--data file not found: {data_path}")
    K = args.k if args.k is not None else 20
    m = args.m if args.m is not None else 3
    q = args.q if args.q is not None else 2
    r = args.r if args.r is not None else 2
    eta = args.eta if args.eta is not None else 1e-4
    _nonnegative(eta, "--eta")
    if K < m + 1:
        raise ValidationError(f"--k must be at least m+1 = {m + 1}, got {K}")
    if not (1 <= q <= m):
        raise ValidationError(f"--q must satisfy 1 <= q <= m = {m}, got {q}")
    try:
        seed_fn = get_seed(args.loss or "frobenius")
    except ValueError as exc:
        raise ValidationError(str(exc)) from None

    dataset = simulate.read_dataset_csv(data_path)
    db = diagonalized_basis(K, m, q)
    cfg_kwargs = {}
    if args.method:
        cfg_kwargs["method"] = args.method
    if args.max_iters is not None:
        cfg_kwargs["max_iters"] = _positive(args.max_iters, "--max-iters")
    if args.grad_tol is not None:
        cfg_kwargs["grad_tol"] = _positive(args.grad_tol, "--grad-tol")
    if args.init:
        cfg_kwargs["init"] = args.init
        cfg_kwargs["init_seed"] = _resolve_seed(args.seed)
    cfg = FitConfig(**cfg_kwargs)
    ds = make_design_set(db, dataset)
    result = fit(seed_fn, db, ds, r, eta, cfg)

    payload = {
        "format_version": FORMAT_VERSION,
        "kind": "pfpca-fit",
        "data": str(data_path),
        "loss": seed_fn.name,
        "basis": {"K": K, "m": m, "q": q},
        "eta": eta,
        "rank": r,
        "status": result.status,
        "iterations": result.iterations,
        "loss_trace": [float(v) for v in result.loss_trace],
        "grad_norm_trace": [float(v) for v in result.grad_norm_trace],
        "point": {
            "U": [float(v) for v in result.point.U.ravel()],  # row-major K x R
            "shape": list(result.point.U.shape),
            "lambda": [float(v) for v in result.point.lam],
            "sigma2": float(result.point.sigma2),
        },
    }

    truth_path = Path(args.truth) if args.truth else data_path.with_suffix(".json")
    if args.truth and not truth_path.exists():
        raise ValidationError(f"--truth file not found: {truth_path}")
    if truth_path.exists():
        tm, _ = simulate.read_truth_sidecar(truth_path)
        ae = align(db, result.point.U, tm.eigenfunctions, eta=eta)
        payload["evaluation"] = {
            "truth": str(truth_path),
            "components": [
                {
                    "matched_truth": c.matched + 1,
                    "sign": c.sign,
                    "l2_sq_error": c.l2_sq_error,
                    "j_value": c.j_value,
                    "eta_j": c.eta_j,
                    "combined": c.combined,
                }
                for c in ae.components
            ],
        }

    out = Path(args.out or "fit.json")
    with open(out, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"fit {result.status} after {result.iterations} iterations; wrote {out}")

    if args.plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        from .basis import eval_diag

        grid = np.linspace(0.0, 1.0, 401)
        Bg = eval_diag(db, grid, 0)
        fig, ax = plt.subplots(figsize=(6, 4))
        for rr in range(r):
            ax.plot(grid, Bg @ result.point.U[:, rr], label=f"component {rr + 1}")
        ax.set_xlabel("u")
        ax.legend(fontsize=8)
        fig.savefig(args.plot, format="svg", metadata={"Date": None})
        plt.close(fig)
        print(f"wrote {args.plot}")
    return 0


def cmd_sweep(args) -> int:
    from . import rates

    if not args.scenario:
        raise ValidationError("--scenario is required")
    seed = _resolve_seed(args.seed)
    try:
        spec = rates.scenario_spec(args.scenario, fast=bool(args.fast), seed=seed)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    if args.workers is not None:
        _positive(args.workers, "--workers")

    report = rates.run_scenario(spec, workers=args.workers)
    out_dir = Path(args.out_dir or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"rates_{spec.name.replace('.', '_')}"
    rates.write_report_json(report, out_dir / f"{stem}.json")
    rates.write_report_csv(report, out_dir / f"{stem}.csv")
    svgs = rates.write_report_svg(report, str(out_dir / (stem + "_component_{component}.svg")))
    for comp, (slope, stderr) in sorted(report.slopes.items()):
        mark = "PASS" if report.passed[comp] else "FAIL"
        if report.advisory:
            mark = "ADVISORY"
        print(
            f"component {comp + 1}: slope {slope:.3f} +/- {stderr:.3f} "
            f"(expected {spec.expected_slope:.3f} +/- {spec.slope_tol}) [{mark}]"
        )
    for msg in report.warnings:
        print(f"note: {msg}")
    print(f"wrote {out_dir / (stem + '.json')}, {out_dir / (stem + '.csv')}, {len(svgs)} plot(s)")
    return 0


# ---------------------------------------------------------------------------
# invariant checks (shared by `pfpca check` and the test suite)


def _check_basis_partition():
    from . import basis

    kv = basis.make_knots(12, 3)
    u = np.linspace(0.0, 1.0, 200)
    err = np.abs(basis.eval_raw(kv, u, 0).sum(axis=1) - 1.0).max()
    return err < 1e-12, f"partition-of-unity error {err:.2e}"


def _check_basis_diagonalization():
    from . import basis

    worst = 0.0
    for m, q in ((3, 2), (3, 1), (2, 2)):
        db = basis.diagonalized_basis(16, m, q)
        pts, wts = basis.gauss_legendre_cells(db.knots.breakpoints, 12)
        B0 = basis.eval_diag(db, pts, 0)
        Bq = basis.eval_diag(db, pts, q)
        gram_err = np.abs((B0 * wts[:, None]).T @ B0 - np.eye(16)).max()
        pen = (Bq * wts[:, None]).T @ Bq
        pen_err = np.abs(pen - np.diag(db.gamma)).max() / max(db.gamma[-1], 1.0)
        nzeros = int((db.gamma < 1e-8).sum())
        worst = max(worst, gram_err, pen_err)
        if nzeros != q:
            return False, f"(m={m}, q={q}): {nzeros} near-zero gammas, expected {q}"
    return worst < 1e-8, f"max Gram/penalty deviation {worst:.2e}"


def _check_divergence():
    from . import divergence as dv

    rng = np.random.default_rng(20240817)
    seeds = [dv.get_seed(n) for n in dv.SEED_NAMES]
    for _ in range(200):
        dim = int(rng.integers(2, 7))
        A = rng.standard_normal((dim, dim))
        A = A @ A.T + dim * np.eye(dim)
        B = rng.standard_normal((dim, dim))
        B = B @ B.T + dim * np.eye(dim)
        for seed in seeds:
            val = dv.bregman(seed, A, B)
            if val < 0.0:
                return False, f"negative divergence for {seed.name}"
        frob = dv.bregman(seeds[0], A, B)
        if abs(frob - np.sum((A - B) ** 2)) > 1e-8 * max(1.0, frob):
            return False, "squared-Frobenius identity violated"
    return True, "nonnegativity and Frobenius identity on 200 random pairs"


def _check_frechet():
    from . import divergence as dv

    rng = np.random.default_rng(7)
    worst = 0.0
    for seed in (dv.log_det_seed(), dv.von_neumann_seed()):
        for _ in range(25):
            A = rng.standard_normal((5, 5))
            A = A @ A.T + 5 * np.eye(5)
            H = rng.standard_normal((5, 5))
            H = 0.5 * (H + H.T)
            D = dv.frechet_phi_prime(seed, A, H)
            t = 1e-5
            fd = (
                dv.apply_matrix_function(seed.phi_prime, A + t * H)
                - dv.apply_matrix_function(seed.phi_prime, A - t * H)
            ) / (2 * t)
            worst = max(worst, np.linalg.norm(D - fd) / np.linalg.norm(fd))
    return worst < 1e-5, f"worst Frechet-vs-FD relative error {worst:.2e}"


def _check_manifold():
    from . import manifold

    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        Q, _ = np.linalg.qr(rng.standard_normal((7, 2)))
        du = manifold.project_tangent(Q, rng.standard_normal((7, 2)))
        t = rng.uniform(-2.0, 2.0)
        X = manifold.exp_stiefel(Q, du, t)
        worst = max(worst, np.abs(X.T @ X - np.eye(2)).max())
    return worst < 1e-10, f"worst orthonormality drift {worst:.2e}"


def _check_gradients():
    import pfpca.model as model_mod
    from . import basis, divergence as dv, simulate

    db = basis.diagonalized_basis(8, 3, 2)
    tm = simulate.default_true_model()
    dataset = simulate.sample_dataset(tm, 5, seed=101)
    ds = model_mod.make_design_set(db, dataset)
    rng = np.random.default_rng(5)
    Q, _ = np.linalg.qr(rng.standard_normal((8, 2)))
    mp = model_mod.ModelPoint(Q, np.array([1.5, 0.6]), 0.4)
    h = 1e-6
    worst = 0.0
    for name in dv.SEED_NAMES:
        seed = dv.get_seed(name)
        for eta in (0.0, 0.1):
            _, (gU, gl, gs) = model_mod.loss_and_grad(seed, db, mp, ds, eta)

            def value(U, lam, s2, with_penalty):
                p = model_mod.ModelPoint(U, lam, s2, check=False)
                v = model_mod.loss(seed, p, ds)
                # the penalty is constant along lam / sigma2 probes; leaving
                # it out keeps the finite differences free of cancellation
                return v + (model_mod.penalty_value(db, p, eta) if with_penalty else 0.0)

            fdU = np.zeros_like(gU)
            for i in range(8):
                for j in range(2):
                    Up, Um = mp.U.copy(), mp.U.copy()
                    Up[i, j] += h
                    Um[i, j] -= h
                    fdU[i, j] = (
                        value(Up, mp.lam, mp.sigma2, True) - value(Um, mp.lam, mp.sigma2, True)
                    ) / (2 * h)
            fdl = np.zeros_like(gl)
            for j in range(2):
                lp, lm = mp.lam.copy(), mp.lam.copy()
                lp[j] += h
                lm[j] -= h
                fdl[j] = (
                    value(mp.U, lp, mp.sigma2, False) - value(mp.U, lm, mp.sigma2, False)
                ) / (2 * h)
            fds = (
                value(mp.U, mp.lam, mp.sigma2 + h, False) - value(mp.U, mp.lam, mp.sigma2 - h, False)
            ) / (2 * h)
            worst = max(
                worst,
                np.linalg.norm(gU - fdU) / max(np.linalg.norm(fdU), 1e-12),
                np.linalg.norm(gl - fdl) / max(np.linalg.norm(fdl), 1e-12),
                abs(gs - fds) / max(abs(fds), 1e-12),
            )
    return worst < 1e-5, f"worst gradient-vs-FD relative error {worst:.2e}"


CHECKS = (
    ("basis-partition-of-unity", _check_basis_partition),
    ("basis-diagonalization", _check_basis_diagonalization),
    ("divergence-suite", _check_divergence),
    ("frechet-derivative", _check_frechet),
    ("manifold-exponential", _check_manifold),
    ("gradient-check", _check_gradients),
)


def run_checks():
    """Run the fast invariant suite; returns a list of (name, ok, detail)."""
    results = []
    for name, func in CHECKS:
        try:
            ok, detail = func()
        except Exception as exc:  # a crashed check is a failed check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append((name, ok, detail))
    return results


def cmd_check(args) -> int:
    results = run_checks()
    failed = [name for name, ok, _ in results if not ok]
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return 1
    return 0


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "sweep": cmd_sweep,
    "check": cmd_check,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        args = _merge_config(args, parser)
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
