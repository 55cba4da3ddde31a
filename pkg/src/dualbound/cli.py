"""Experiment runner: deterministic end-to-end pipelines over all modules.

Subcommands: train-adrl, dual-bound, eval-policy, oracle, derm, gap-report,
dump-model, selftest. Every run with an output directory writes a manifest
(the fully resolved configuration plus content hashes of its inputs) so the
artifacts are reproducible from the manifest alone.

Exit codes: 0 success, 2 usage/config, 3 model, 4 numerical, 5 selftest
failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import io as dio
from .bounds import (GreedyPolicy, bound_report, derm_stopping_rule,
                     derm_train, dp_oracle_discrete, exec_closed_form,
                     relative_gap)
from .control import (enumerate_noise_dataset, evaluate_policy, rollout,
                      sample_noise_dataset)
from .duality import dual_value, make_penalty_context
from .envs import (cost_scale, dump_model_csv, feature_scales,
                   make_exec_problem, make_toy_chain, make_toy_t1,
                   project_simplex, project_simplex_bruteforce, resolve_model)
from .errors import (ConfigurationError, DualBoundError, EvaluationError,
                     FeasibilityError, ModelError)
from .neural import (CallableGeneratingFunction, init_mlp_generating_function,
                     quadratic_feature_map)
from .training import (EvalRecord, TrainConfig, checkpoint_hash, held_out_dual,
                       stream_key, train_adrl)

Z95 = 1.959963984540054

_MODEL_KEYS = {
    "n_assets", "signal_dim", "horizon", "no_shorting", "model_seed",
    "impact_scale", "impact_offdiag", "signal_load_scale", "signal_ar_decay",
    "sigma_eps", "sigma_eta", "price0", "target_shares", "impact",
    "signal_load", "signal_ar", "cov_eps", "cov_eta", "initial_price",
    "target",
}


def _out_dir(args) -> Optional[Path]:
    out = getattr(args, "out", None) or os.environ.get("DUALBOUND_OUT")
    if out is None:
        return None
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _model_from_config(path: Optional[str]):
    cfg = dio.load_config(path)
    model_cfg = {k: v for k, v in cfg.items() if k in _MODEL_KEYS}
    return resolve_model(model_cfg), cfg


def _exec_setup(args):
    model, cfg = _model_from_config(getattr(args, "config", None))
    problem = make_exec_problem(model)
    offset, scale = feature_scales(model)
    features = quadratic_feature_map(model.n_assets, model.signal_dim,
                                     offset=offset, scale=scale)
    return model, cfg, problem, features


def _write_manifest(out: Path, subcommand: str, args, extra: Optional[dict] = None):
    resolved = {k: v for k, v in vars(args).items()
                if k not in ("func", "out") and v is not None}
    resolved["out"] = str(out)
    if extra:
        resolved.update(extra)
    inputs = {}
    for key in ("config", "checkpoint", "trace"):
        p = getattr(args, key, None)
        if p:
            inputs[key] = p
    dio.write_manifest(str(out / "manifest.txt"), subcommand, resolved, inputs)


# ---------------------------------------------------------------------------
# learning curves
# ---------------------------------------------------------------------------


def emit_learning_curve(trace_csv: str, out_csv: str, out_svg: str,
                        oracle: Optional[float] = None) -> int:
    """Tidy plot data and a static SVG chart from a training trace.

    Emits rows (iter, series, value) with series in {dual, primal, ci_lo,
    ci_hi, oracle}; ci_lo/ci_hi is the envelope of both bounds' 95%
    intervals, so every plotted value lies inside it. Returns the number of
    evaluation records found.
    """
    rows = []
    with open(trace_csv) as fh:
        for rec in csv.DictReader(fh):
            if rec.get("dual_mean"):
                rows.append((int(rec["iter"]), float(rec["dual_mean"]),
                             float(rec["dual_se"]), float(rec["primal_mean"]),
                             float(rec["primal_se"])))
    if not rows:
        raise ConfigurationError("trace has no evaluation records to plot")
    series: list[tuple[int, str, float]] = []
    for it, d, dse, p, pse in rows:
        lo = min(d - Z95 * dse, p - Z95 * pse)
        hi = max(d + Z95 * dse, p + Z95 * pse)
        series.append((it, "dual", d))
        series.append((it, "primal", p))
        series.append((it, "ci_lo", lo))
        series.append((it, "ci_hi", hi))
        if oracle is not None:
            series.append((it, "oracle", oracle))
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "series", "value"])
        for it, name, val in series:
            w.writerow([it, name, repr(val)])
    _write_curve_svg(out_svg, rows, oracle)
    return len(rows)


def _write_curve_svg(path: str, rows, oracle: Optional[float]) -> None:
    W, H, ML, MB, MT, MR = 640, 400, 70, 40, 20, 20
    xs = [r[0] for r in rows]
    vals = []
    for _, d, dse, p, pse in rows:
        vals += [d - Z95 * dse, d + Z95 * dse, p - Z95 * pse, p + Z95 * pse]
    if oracle is not None:
        vals.append(oracle)
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(vals), max(vals)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1.0
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def X(x):
        return ML + (W - ML - MR) * (x - x0) / (x1 - x0)

    def Y(y):
        return H - MB - (H - MB - MT) * (y - y0) / (y1 - y0)

    def poly(pts):
        return " ".join(f"{X(x):.2f},{Y(y):.2f}" for x, y in pts)

    band_up = [(r[0], max(r[1] + Z95 * r[2], r[3] + Z95 * r[4])) for r in rows]
    band_dn = [(r[0], min(r[1] - Z95 * r[2], r[3] - Z95 * r[4])) for r in rows]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<polygon points="{poly(band_up + band_dn[::-1])}" fill="#cccccc" '
        'fill-opacity="0.5" stroke="none"/>',
        f'<polyline points="{poly([(r[0], r[1]) for r in rows])}" fill="none" '
        'stroke="blue" stroke-width="1.5"/>',
        f'<polyline points="{poly([(r[0], r[3]) for r in rows])}" fill="none" '
        'stroke="red" stroke-width="1.5"/>',
    ]
    if oracle is not None:
        parts.append(
            f'<line x1="{X(x0):.2f}" y1="{Y(oracle):.2f}" x2="{X(x1):.2f}" '
            f'y2="{Y(oracle):.2f}" stroke="black" stroke-dasharray="4 3"/>')
    parts += [
        f'<line x1="{ML}" y1="{H - MB}" x2="{W - MR}" y2="{H - MB}" stroke="black"/>',
        f'<line x1="{ML}" y1="{MT}" x2="{ML}" y2="{H - MB}" stroke="black"/>',
        f'<text x="{ML}" y="{H - 10}" font-size="12">{x0}</text>',
        f'<text x="{W - MR - 30}" y="{H - 10}" font-size="12">{x1}</text>',
        f'<text x="5" y="{Y(y0):.0f}" font-size="12">{y0:.6g}</text>',
        f'<text x="5" y="{Y(y1):.0f}" font-size="12">{y1:.6g}</text>',
        f'<text x="{W - 160}" y="{MT + 14}" font-size="12" fill="blue">dual bound</text>',
        f'<text x="{W - 160}" y="{MT + 30}" font-size="12" fill="red">policy value</text>',
        "</svg>",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------


def _cmd_dump_model(args) -> int:
    model, _ = _model_from_config(args.config)
    text = dump_model_csv(model)
    out = _out_dir(args)
    if out is not None:
        (out / "model.csv").write_text(text)
        _write_manifest(out, "dump-model", args)
    sys.stdout.write(text)
    return 0


def _train_config_from_args(args) -> TrainConfig:
    return TrainConfig(
        iterations=args.iters,
        batch_size=args.batch_size,
        estimator=args.estimator,
        adam_step=args.adam_step,
        seed=args.seed,
        train_paths=args.train_paths,
        freeze_dataset=args.freeze_dataset,
        scheme="mc",
        n_inner=args.n_inner,
        freeze_eta=args.freeze_eta,
        eval_every=args.eval_every,
        eval_paths=args.eval_paths,
        greedy_samples=args.greedy_samples,
        checkpoint_every=args.checkpoint_every,
        inner_max_iter=args.inner_max_iter,
        workers=args.workers,
        spsa_gamma0=args.spsa_gamma0,
        spsa_c0=args.spsa_c0,
    )


def _cmd_train(args) -> int:
    model, _, problem, features = _exec_setup(args)
    out = _out_dir(args)
    if out is None:
        raise ConfigurationError("train-adrl needs --out (or DUALBOUND_OUT)")
    config = _train_config_from_args(args)
    hidden = tuple(int(h) for h in args.hidden.split(",") if h)
    gen = init_mlp_generating_function(
        problem, features, hidden=hidden, activation=args.activation,
        seed=args.seed, pin_terminal=True, output_scale=cost_scale(model))
    dio.save_checkpoint(str(out / "checkpoint_init.npz"), gen,
                        seed=args.seed, iteration=0)
    primal_ds = sample_noise_dataset(problem, config.eval_paths, config.eval_paths,
                                     stream_key(config.seed, "eval-primal"))
    greedy_seed = stream_key(config.seed, "greedy-eval")
    t_start = time.perf_counter()

    def eval_hook(gen_now, iteration) -> EvalRecord:
        dual, _ = held_out_dual(problem, gen_now, config)
        greedy = GreedyPolicy(problem, gen_now, "mc", config.greedy_samples,
                              greedy_seed)
        primal = evaluate_policy(problem, greedy, primal_ds)
        return EvalRecord(iteration, dual.mean, dual.stderr, primal.mean,
                          primal.stderr, relative_gap(primal.mean, dual.mean),
                          checkpoint_hash(gen_now),
                          time.perf_counter() - t_start)

    def checkpoint_hook(gen_now, iteration):
        dio.save_checkpoint(str(out / f"checkpoint_{iteration:06d}.npz"),
                            gen_now, seed=args.seed, iteration=iteration)

    gen_final, trace = train_adrl(problem, gen, config,
                                  eval_hook=eval_hook,
                                  checkpoint_hook=checkpoint_hook)
    dio.save_checkpoint(str(out / "checkpoint_final.npz"), gen_final,
                        seed=args.seed, iteration=config.iterations)
    trace.to_csv(str(out / "trace.csv"))
    _write_manifest(out, "train-adrl", args,
                    extra={"checkpoint_hash": checkpoint_hash(gen_final)})
    lines = [f"iterations = {len(trace.iterations)}",
             f"checkpoint = {checkpoint_hash(gen_final)}"]
    if trace.halted:
        lines.append(f"halted = {trace.halted}")
    if trace.evals:
        last = trace.evals[-1]
        lines += [f"dual_mean = {last.dual_mean!r}",
                  f"dual_se = {last.dual_se!r}",
                  f"primal_mean = {last.primal_mean!r}",
                  f"primal_se = {last.primal_se!r}",
                  f"gap = {last.gap!r}"]
        emit_learning_curve(str(out / "trace.csv"), str(out / "curve.csv"),
                            str(out / "curve.svg"), oracle=args.oracle_value)
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    sys.stdout.write("\n".join(lines) + "\n")
    return 0


def _load_exec_checkpoint(args, problem):
    gen, meta = dio.load_checkpoint(args.checkpoint, problem)
    return gen, meta


def _cmd_dual_bound(args) -> int:
    _, _, problem, _ = _exec_setup(args)
    gen, _ = _load_exec_checkpoint(args, problem)
    out = _out_dir(args)
    ds = sample_noise_dataset(problem, args.paths, args.paths, args.dataset_seed)
    ctx = make_penalty_context(problem, gen, "mc", args.n_inner,
                               seed=args.dataset_seed, iteration=0)
    dv = dual_value(ctx, ds, workers=args.workers)
    lo, hi = dv.ci95()
    summary = (f"dual_mean = {dv.mean!r}\nstderr = {dv.stderr!r}\n"
               f"ci95 = ({lo!r}, {hi!r})\nn_not_converged = {dv.n_not_converged}\n")
    if out is not None:
        with open(out / "dual_paths.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path_id", "Y_star", "solver_iters", "kkt_residual"])
            for i in range(len(ds)):
                w.writerow([int(ds.path_ids[i]), repr(dv.per_path[i]),
                            int(dv.iterations[i]), repr(dv.residuals[i])])
        (out / "summary.txt").write_text(summary)
        _write_manifest(out, "dual-bound", args)
    sys.stdout.write(summary)
    return 0


def _cmd_eval_policy(args) -> int:
    _, _, problem, _ = _exec_setup(args)
    gen, _ = _load_exec_checkpoint(args, problem)
    out = _out_dir(args)
    ds = sample_noise_dataset(problem, args.paths, args.paths, args.dataset_seed)
    greedy = GreedyPolicy(problem, gen, "mc", args.greedy_samples, args.greedy_seed)
    pv = evaluate_policy(problem, greedy, ds)
    summary = (f"primal_mean = {pv.mean!r}\nstderr = {pv.stderr!r}\n"
               f"greedy_flagged = {greedy.flagged_queries}\n")
    if out is not None:
        with open(out / "policy_paths.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path_id", "total_cost"])
            for i in range(len(ds)):
                w.writerow([int(ds.path_ids[i]), repr(pv.totals[i])])
        (out / "summary.txt").write_text(summary)
        _write_manifest(out, "eval-policy", args)
    sys.stdout.write(summary)
    return 0


def _toy_env(args):
    if args.env == "toy-t1":
        return make_toy_t1()
    if args.env == "toy-chain":
        return make_toy_chain(args.horizon)
    raise ConfigurationError(f"unknown toy environment {args.env!r}")


def _cmd_oracle(args) -> int:
    problem = _toy_env(args)
    grid = np.linspace(0.0, 1.0, args.grid_points)[:, None]
    orc = dp_oracle_discrete(problem, grid)
    lines = [f"v0 = {orc.v0_native!r}"]
    for (t, key), val in sorted(orc.values.items()):
        state = ",".join(repr(x) for x in key)
        lines.append(f"V[{t}][{state}] = {val!r}")
    text = "\n".join(lines) + "\n"
    out = _out_dir(args)
    if out is not None:
        (out / "oracle.txt").write_text(text)
        _write_manifest(out, "oracle", args)
    sys.stdout.write(text)
    return 0


def _cmd_derm(args) -> int:
    model, _, problem, _ = _exec_setup(args)
    out = _out_dir(args)
    dataset = sample_noise_dataset(problem, args.dataset_size, args.dataset_size,
                                   args.dataset_seed)
    hidden = tuple(int(h) for h in args.hidden.split(",") if h)
    result = derm_train(model, dataset, args.iters, hidden=hidden, lr=args.lr,
                        optimizer=args.optimizer, eval_every=args.eval_every,
                        eval_paths=args.eval_paths, seed=args.seed,
                        dual_bound=args.dual)
    lines = [f"final_train_loss = {result.trace[-1].train_loss!r}",
             f"overfit_iteration = {result.overfit_iteration}"]
    if args.dual is not None and args.primal is not None:
        stop = derm_stopping_rule(result.trace, args.dual, args.primal)
        lines += [f"stop_iteration = {stop.iteration}",
                  f"overfit_warning = {stop.overfit_warning}",
                  f"stop_message = {stop.message}"]
    text = "\n".join(lines) + "\n"
    if out is not None:
        with open(out / "derm_trace.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "train_loss", "eval_loss"])
            for rec in result.trace:
                ev = "" if np.isnan(rec.eval_loss) else repr(rec.eval_loss)
                w.writerow([rec.iteration, repr(rec.train_loss), ev])
        (out / "summary.txt").write_text(text)
        _write_manifest(out, "derm", args)
    sys.stdout.write(text)
    return 0


def _cmd_gap_report(args) -> int:
    out = _out_dir(args)
    if args.env:
        problem = _toy_env(args)
        if not args.oracle_w:
            raise ConfigurationError("toy gap reports need --oracle-w")
        grid = np.linspace(0.0, 1.0, 21)[:, None]
        orc = dp_oracle_discrete(problem, grid)
        for (t, key), val in orc.values.items():
            if abs(val - key[0]) > 1e-9:
                raise EvaluationError(
                    "oracle tables deviate from the linear value structure")
        pair = (lambda S: S[:, 0].copy(), lambda S: np.ones_like(S))
        gen = CallableGeneratingFunction(problem.horizon,
                                         [pair] * (problem.horizon + 1))
        report = bound_report(problem, gen, exact=True, greedy_samples=64)
    else:
        _, _, problem, _ = _exec_setup(args)
        gen, _ = _load_exec_checkpoint(args, problem)
        report = bound_report(
            problem, gen, dual_paths=args.dual_paths,
            primal_paths=args.primal_paths, seed_dual=args.seed_dual,
            seed_primal=args.seed_primal, n_inner=args.n_inner,
            greedy_samples=args.greedy_samples, greedy_seed=args.greedy_seed,
            workers=args.workers)
    text = report.summary()
    if out is not None:
        (out / "report.txt").write_text(text)
        _write_manifest(out, "gap-report", args)
    sys.stdout.write(text)
    sys.stdout.write(f"gap = {report.gap:.6%}\n")
    return 0


# ---------------------------------------------------------------------------
# selftest
# ---------------------------------------------------------------------------


def _selftest_checks():
    from .neural import (LinearGeneratingFunction, ZeroGeneratingFunction,
                         identity_features, init_mlp_generating_function,
                         quadratic_feature_dim)
    from .training import rm_gradient

    def rollout_hand_values():
        toy = make_toy_t1()
        ds = enumerate_noise_dataset(toy)
        ones = lambda t, S: np.ones((S.shape[0], 1))
        vals = sorted(rollout(toy, ones, ds.path(i)).total for i in range(2))
        return vals == [-1.0, 1.0], f"rollout totals {vals}"

    def dataset_determinism():
        toy = make_toy_t1()
        a = sample_noise_dataset(toy, 8, 4, seed=7)
        b = sample_noise_dataset(toy, 8, 4, seed=7)
        return np.array_equal(a.entries, b.entries), "same seed, same bits"

    def simplex_vs_bruteforce():
        gen = np.random.default_rng(11)
        worst = 0.0
        for _ in range(100):
            T = int(gen.integers(2, 7))
            v = gen.normal(size=T) * 2.0
            r = float(gen.random() * 3.0)
            worst = max(worst, float(np.max(np.abs(
                project_simplex(v, r) - project_simplex_bruteforce(v, r)))))
        return worst <= 1e-8, f"max deviation {worst:.3g}"

    def penalty_feasibility():
        from .duality import pathwise_objective
        chain = make_toy_chain(2)
        ds = enumerate_noise_dataset(chain)
        worst = 0.0
        for k in range(5):
            gen = init_mlp_generating_function(
                chain, identity_features(1), hidden=(8,), activation="softplus",
                seed=100 + k, pin_terminal=False, randomize=True)
            ctx = make_penalty_context(chain, gen, "exact")
            for j in range(5):
                rng = np.random.default_rng(200 + j)
                coef = rng.normal(size=(2, 2))
                policy = lambda t, S, c=coef: np.clip(
                    c[t, 0] + c[t, 1] * S[:, :1], 0.0, 1.0)
                total = 0.0
                for i in range(len(ds)):
                    traj = rollout(chain, policy, ds.path(i))
                    _, zs, _ = pathwise_objective(ctx, traj.actions, ds.path(i))
                    total += ds.probs[i] * zs.sum()
                worst = max(worst, abs(total))
        return worst <= 1e-12, f"max |E sum z| = {worst:.3g}"

    def weak_duality():
        chain = make_toy_chain(2)
        ds = enumerate_noise_dataset(chain)
        grid = np.linspace(0.0, 1.0, 21)[:, None]
        vstar = dp_oracle_discrete(chain, grid).v0
        worst = np.inf
        for k in range(10):
            gen = init_mlp_generating_function(
                chain, identity_features(1), hidden=(8,), activation="softplus",
                seed=300 + k, pin_terminal=False, randomize=True)
            ctx = make_penalty_context(chain, gen, "exact")
            dv = dual_value(ctx, ds)
            worst = min(worst, dv.mean - vstar)
        return worst >= -1e-9, f"min dual slack {worst:.3g}"

    def strong_duality():
        chain = make_toy_chain(2)
        ds = enumerate_noise_dataset(chain)
        pair = (lambda S: S[:, 0].copy(), lambda S: np.ones_like(S))
        gen = CallableGeneratingFunction(2, [pair] * 3)
        ctx = make_penalty_context(chain, gen, "exact")
        dv = dual_value(ctx, ds)
        spread = float(np.max(np.abs(dv.per_path)))
        var = float(np.var(dv.per_path))
        return spread <= 1e-6 and var < 1e-10, f"max |Y*| {spread:.3g}, var {var:.3g}"

    def rm_matches_fd():
        chain = make_toy_chain(2)
        ds = enumerate_noise_dataset(chain)
        worst = 0.0
        for k in range(3):
            gen = init_mlp_generating_function(
                chain, identity_features(1), hidden=(4,), activation="softplus",
                seed=400 + k, pin_terminal=True, randomize=True)
            ctx = make_penalty_context(chain, gen, "exact")
            grad, _, _ = rm_gradient(ctx, ds.entries, ds.weights())
            phi = gen.flat()
            h = 1e-4
            fd = np.zeros_like(phi)
            for i in range(phi.size):
                for s, store in ((+1, 0), (-1, 1)):
                    e = phi.copy()
                    e[i] += s * h
                    ctx2 = make_penalty_context(chain, gen.with_flat(e), "exact")
                    dv = dual_value(ctx2, ds)
                    if s > 0:
                        up = dv.mean
                    else:
                        fd[i] = (up - dv.mean) / (2 * h)
            rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12)
            worst = max(worst, rel)
        return worst <= 1e-3, f"max relative error {worst:.3g}"

    def closed_form_formula():
        gen = np.random.default_rng(17)
        worst = 0.0
        for _ in range(5):
            theta = float(gen.uniform(0.01, 0.5))
            tgt = float(gen.uniform(0.5, 5.0))
            p0 = float(gen.uniform(5.0, 50.0))
            T = int(gen.integers(2, 12))
            model = resolve_model({
                "n_assets": 1, "signal_dim": 1, "horizon": T,
                "impact": [[theta]], "signal_load": [[0.0]],
                "initial_price": [p0], "target": [tgt], "no_shorting": False})
            cf = exec_closed_form(model)
            ref = tgt * p0 + theta * tgt ** 2 * (T + 1) / (2.0 * T)
            worst = max(worst, abs(cf.expected_cost - ref))
        return worst <= 1e-10, f"max |cost - formula| = {worst:.3g}"

    def inner_dominates_uniform():
        chain = make_toy_chain(2)
        ds = enumerate_noise_dataset(chain)
        gen = init_mlp_generating_function(
            chain, identity_features(1), hidden=(8,), activation="softplus",
            seed=500, pin_terminal=False, randomize=True)
        ctx = make_penalty_context(chain, gen, "exact")
        from .duality import inner_solve, pathwise_objective
        ok = True
        for i in range(len(ds)):
            res = inner_solve(ctx, ds.path(i))
            uniform = chain.actions.uniform_sequence
            y_uni, _, _ = pathwise_objective(ctx, uniform, ds.path(i))
            ok = ok and res.objective >= y_uni
        return ok, "inner solve never loses to its uniform start"

    def feature_dims():
        ok = quadratic_feature_dim(10, 3) == 263 and quadratic_feature_dim(1, 1) == 8
        return ok, "263 at (n=10, m=3); 8 at (n=1, m=1)"

    return [
        ("rollout-hand-values", rollout_hand_values),
        ("dataset-determinism", dataset_determinism),
        ("simplex-vs-bruteforce", simplex_vs_bruteforce),
        ("penalty-feasibility", penalty_feasibility),
        ("weak-duality", weak_duality),
        ("strong-duality", strong_duality),
        ("rm-matches-fd", rm_matches_fd),
        ("closed-form-formula", closed_form_formula),
        ("inner-dominates-uniform", inner_dominates_uniform),
        ("feature-dims", feature_dims),
    ]


def _cmd_selftest(args) -> int:
    failures = 0
    lines = []
    for name, check in _selftest_checks():
        try:
            ok, detail = check()
        except Exception as exc:  # a crash is a failure, not an abort
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        status = "PASS" if ok else "FAIL"
        failures += 0 if ok else 1
        lines.append(f"{status} {name}: {detail}")
    lines.append(f"selftest: {len(lines) - failures}/{len(lines)} checks passed")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    out = _out_dir(args)
    if out is not None:
        (out / "selftest.txt").write_text(text)
        _write_manifest(out, "selftest", args)
    return 0 if failures == 0 else 5


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualbound",
        description="Dual bounds for finite-horizon stochastic control via "
                    "adversarially trained information-relaxation penalties.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add_common(p, config=True):
        if config:
            p.add_argument("--config", help="model config file (key = value lines)")
        p.add_argument("--out", help="output directory (env DUALBOUND_OUT)")

    p = sub.add_parser("dump-model", help="print the fully resolved model as CSV")
    add_common(p)
    p.set_defaults(func=_cmd_dump_model)

    p = sub.add_parser("train-adrl", help="adversarial training of the penalty networks")
    add_common(p)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--estimator", choices=("rm", "spsa"), default="rm")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--train-paths", type=int, default=256)
    p.add_argument("--n-inner", type=int, default=128)
    p.add_argument("--hidden", default="16,16")
    p.add_argument("--activation", choices=("relu", "softplus"), default="relu")
    p.add_argument("--adam-step", type=float, default=2e-3)
    p.add_argument("--spsa-gamma0", type=float, default=0.05)
    p.add_argument("--spsa-c0", type=float, default=0.01)
    p.add_argument("--eval-every", type=int, default=500)
    p.add_argument("--eval-paths", type=int, default=128)
    p.add_argument("--greedy-samples", type=int, default=256)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--inner-max-iter", type=int, default=500)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--freeze-dataset", action="store_true")
    p.add_argument("--freeze-eta", action="store_true")
    p.add_argument("--oracle-value", type=float, default=None,
                   help="reference value drawn on the learning curve")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("dual-bound", help="dual bound from a checkpoint")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset-seed", type=int, default=101)
    p.add_argument("--paths", type=int, default=256)
    p.add_argument("--n-inner", type=int, default=128)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_dual_bound)

    p = sub.add_parser("eval-policy", help="greedy policy value from a checkpoint")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset-seed", type=int, default=202)
    p.add_argument("--paths", type=int, default=256)
    p.add_argument("--greedy-samples", type=int, default=256)
    p.add_argument("--greedy-seed", type=int, default=303)
    p.set_defaults(func=_cmd_eval_policy)

    p = sub.add_parser("oracle", help="exact DP tables for the toy environments")
    p.add_argument("--env", choices=("toy-t1", "toy-chain"), default="toy-t1")
    p.add_argument("--horizon", type=int, default=2)
    p.add_argument("--grid-points", type=int, default=21)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_oracle)

    p = sub.add_parser("derm", help="empirical-risk policy baseline")
    add_common(p)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--dataset-size", type=int, default=32)
    p.add_argument("--dataset-seed", type=int, default=404)
    p.add_argument("--hidden", default="256,256")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--eval-every", type=int, default=50)
    p.add_argument("--eval-paths", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dual", type=float, default=None,
                   help="trained dual lower bound (native)")
    p.add_argument("--primal", type=float, default=None,
                   help="trained policy upper bound (native)")
    p.set_defaults(func=_cmd_derm)

    p = sub.add_parser("gap-report", help="dual and primal bounds with the gap")
    add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--env", choices=("toy-t1", "toy-chain"))
    p.add_argument("--horizon", type=int, default=2)
    p.add_argument("--oracle-w", action="store_true",
                   help="pin W to the exact value functions (toy mode)")
    p.add_argument("--dual-paths", type=int, default=256)
    p.add_argument("--primal-paths", type=int, default=256)
    p.add_argument("--seed-dual", type=int, default=101)
    p.add_argument("--seed-primal", type=int, default=202)
    p.add_argument("--greedy-seed", type=int, default=303)
    p.add_argument("--n-inner", type=int, default=128)
    p.add_argument("--greedy-samples", type=int, default=256)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_gap_report)

    p = sub.add_parser("selftest", help="run the enumerated-oracle invariant suite")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_selftest)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return 2
    except ModelError as exc:
        print(f"error[model]: {exc}", file=sys.stderr)
        return 3
    except (EvaluationError, FeasibilityError, FloatingPointError) as exc:
        print(f"error[numerical]: {exc}", file=sys.stderr)
        return 4
    except DualBoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
