"""Command-line workbench.

Verbs: fit-projector, score-report, eval, grid-k, ntk-experiment, dynamics,
synth. Every verb accepts ``--config FILE`` and ``--KEY VALUE`` flags for any
config key. Exit codes: 0 success, 2 invalid input, 3 numerical failure flag.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, clean_accuracy, robust_accuracy
from .core import information_of_projector, robustness_scores, select_classwise_bc, select_topk_union
from .fixtures import planted_task
from .io import CONFIG_SCHEMA, ExperimentConfig, FormatError, read_matrix, read_projector, write_csv, write_matrix, write_projector
from .linalg import DimensionError, Spectrum, feature_covariance, sym_eig
from .metrics import empirical_robustness
from .models import FEATURE_KINDS, FeatureMap, GamModel, SyntheticDatasetSpec, fit_least_squares, sample_dataset
from .ntk import (PerturbationConfig, gd_closed_form, gd_simulate, kernel_flow, ntk_gram, perturbation_experiment,
                  risk_profile, simulation_deviation, usefulness_robustness_profile)
from .rng import substream

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3

EVAL_COLUMNS = ("model", "metric", "class", "value", "std_error")
GRID_COLUMNS = ("K", "selected", "clean_accuracy", "robust_accuracy")
SCORE_COLUMNS = ("class", "rank", "eigen_index", "eigenvalue", "score", "selected")


# the NTK stability experiment runs at its own scale unless told otherwise
VERB_DEFAULTS = {
    "ntk-experiment": {"d": "100", "n": "1000", "noise_sigma": "1.0"},
}


class NumericalFlag(RuntimeError):
    """A run finished but tripped a numerical check; outputs are still written."""


_SPECTRA: dict = {}


def cached_spectrum(phi: np.ndarray) -> Spectrum:
    """Covariance spectrum, computed once per distinct feature stack in this process."""
    key = hashlib.sha256(np.ascontiguousarray(phi).tobytes() + str(phi.shape).encode()).hexdigest()
    if key not in _SPECTRA:
        _SPECTRA[key] = sym_eig(feature_covariance(phi))
    return _SPECTRA[key]


def _out(cfg: ExperimentConfig, name: str) -> Path:
    return Path(cfg["out_dir"]) / name


def _attack(cfg: ExperimentConfig) -> AttackConfig:
    return AttackConfig(norm=cfg["norm"], epsilon=cfg["epsilon"],
                        step_size=cfg["step"] or None, iterations=cfg["iters"] or None,
                        loss=cfg["loss"], random_start=cfg["random_start"], seed=cfg["seed"])


def _project(phi, beta, K, mode):
    p = phi.shape[0]
    if beta.shape[0] != p:
        raise DimensionError(f"features have dim {p}, weights have {beta.shape[0]} rows")
    K = K or beta.shape[1]
    if mode == "global-union":
        decomp = cached_spectrum(phi)
        return select_topk_union(robustness_scores(decomp, beta), decomp, K)
    if mode == "classwise-bc":
        return select_classwise_bc(feature_covariance(phi), beta, K)
    raise ValueError(f"unknown mode {mode!r}")


def _score_rows(proj, decomp):
    table = proj.scores
    chosen = set(int(i) for i in proj.selected_indices)
    for c in range(table.scores.shape[0]):
        for rank, i in enumerate(table.order[c]):
            yield c, rank, int(i), decomp.eigenvalues[i], table.scores[c, i], int(i in chosen)


def cmd_fit_projector(cfg, args):
    phi = read_matrix(args.features)
    beta = read_matrix(args.weights)
    proj = _project(phi, beta, cfg["K"], cfg["mode"])
    write_projector(args.out, proj)
    if proj.mode == "global-union" and args.report:
        write_csv(args.report, SCORE_COLUMNS, _score_rows(proj, cached_spectrum(phi)), cfg)


def cmd_score_report(cfg, args):
    phi = read_matrix(args.features)
    beta = read_matrix(args.weights)
    cfg_mode = cfg["mode"]
    if cfg_mode != "global-union":
        raise ValueError("score reports are defined for the global-union mode")
    proj = _project(phi, beta, cfg["K"], cfg_mode)
    decomp = cached_spectrum(phi)
    info = information_of_projector(proj)
    footer = {f"information_class_{c}": v for c, v in enumerate(info)}
    write_csv(args.out or _out(cfg, "scores.csv"), SCORE_COLUMNS, _score_rows(proj, decomp), cfg, footer)


def _dataset(cfg):
    """(model, X_train, Y_train, X_test, Y_test) for the configured task."""
    if cfg["task"] == "planted":
        t = planted_task(d=cfg["d"], C=cfg["classes"], n_train=cfg["n"], n_test=cfg["n_test"], seed=cfg["seed"])
        return t.model, t.X_train, t.Y_train, t.X_test, t.Y_test
    if cfg["task"] == "files":
        for key in ("x_file", "y_file", "weights_file"):
            if not cfg[key]:
                raise ValueError(f"task=files needs {key}")
        X, Y, beta = (read_matrix(cfg[k]) for k in ("x_file", "y_file", "weights_file"))
        if X.shape[0] != Y.shape[0]:
            raise DimensionError("x_file and y_file have different row counts")
        fm = FeatureMap.create(cfg["feature_kind"], X.shape[1], cfg["feature_dim"] or None, seed=cfg["seed"])
        model = GamModel(fm, beta)
        return model, X, Y, X, Y
    raise ValueError(f"unknown task {cfg['task']!r}")


def _feature_matrix(model, proj, c):
    """Projector applied to the features of class c; exactly I for a full basis."""
    p = model.feature_map.feature_dim
    if proj is None:
        return np.eye(p)
    U = proj.class_bases[c] if proj.mode == "classwise-bc" else proj.U_tilde
    return np.eye(p) if U.shape[1] == p else U @ U.T


def _eval_rows(label, model, X, Y, attack, proj=None):
    rows = [(label, "clean_accuracy", "all", clean_accuracy(model, X, Y, proj), 0.0),
            (label, "robust_accuracy", "all", robust_accuracy(model, X, Y, attack, proj), 0.0)]
    if attack.norm == "l2" and Y.shape[1] > 1:
        for c in range(model.n_outputs):
            est = empirical_robustness(model, _feature_matrix(model, proj, c), X, Y, c, attack.epsilon)
            rows.append((label, "robustness", c, est.value, est.std_error))
    return rows


def cmd_eval(cfg, args):
    model, Xtr, Ytr, X, Y = _dataset(cfg)
    attack = _attack(cfg)
    rows = _eval_rows("base", model, X, Y, attack)
    proj = None
    if cfg["projector_file"]:
        proj = read_projector(cfg["projector_file"])
    elif args.fit:
        proj = _project(model.feature_map.feature_matrix(Xtr), model.weights, cfg["K"], cfg["mode"])
    if proj is not None:
        if proj.beta_tilde.shape != model.weights.shape:
            raise DimensionError("projector does not match the model's weights")
        rows += _eval_rows("rfi", model, X, Y, attack, proj)
    write_csv(args.out or _out(cfg, "eval.csv"), EVAL_COLUMNS, rows, cfg)


def _k_values(cfg, p):
    text = cfg["k_range"].strip()
    if not text:
        return list(range(1, p + 1))
    if ":" in text:
        lo, hi = (int(v) for v in text.split(":"))
        ks = list(range(lo, hi + 1))
    else:
        ks = [int(v) for v in text.split(",") if v.strip()]
    if not ks:
        raise ValueError("empty K range")
    return ks


def cmd_grid_k(cfg, args):
    model, Xtr, Ytr, X, Y = _dataset(cfg)
    attack = _attack(cfg)
    phi = model.feature_map.feature_matrix(Xtr)
    rows = []
    for K in _k_values(cfg, phi.shape[0]):
        proj = _project(phi, model.weights, K, cfg["mode"])
        rows.append((K, len(proj.selected_indices), clean_accuracy(model, X, Y, proj),
                     robust_accuracy(model, X, Y, attack, proj)))
    footer = {"base_clean_accuracy": clean_accuracy(model, X, Y),
              "base_robust_accuracy": robust_accuracy(model, X, Y, attack)}
    write_csv(args.out or _out(cfg, "grid_k.csv"), GRID_COLUMNS, rows, cfg, footer)


def cmd_ntk_experiment(cfg, args):
    deltas = tuple(cfg["deltas"])
    if 0.0 not in deltas:
        deltas = (0.0,) + deltas
    pc = PerturbationConfig(d=cfg["d"], n=cfg["n"], deltas=deltas, sigma=cfg["noise_sigma"],
                            n_probes=cfg["n_probes"], pgd_iterations=cfg["pgd_iters"], seed=cfg["seed"],
                            feature_kind=cfg["feature_kind"], feature_dim=cfg["feature_dim"] or None,
                            eig_rel_tol=cfg["eig_rel_tol"])
    res = perturbation_experiment(pc)
    out = Path(cfg["out_dir"])
    write_csv(out / "ntk_deviation.csv", ("delta", "rank", "eigenvalue", "deviation"), res.rows(), cfg,
              {"perturbation": res.method})
    write_csv(out / "ntk_spectrum.csv", ("rank", "eigenvalue"), enumerate(res.full_spectrum), cfg)
    write_csv(out / "ntk_summary.csv", ("delta", "spearman"), zip(res.deltas, res.spearman), cfg)


def _dynamics_problem(cfg):
    d = cfg["d"]
    fm = FeatureMap.create(cfg["feature_kind"], d, cfg["feature_dim"] or None, seed=cfg["seed"])
    teacher = substream(cfg["seed"], "teacher", 0).standard_normal(fm.feature_dim) / np.sqrt(fm.feature_dim)
    data_spec = SyntheticDatasetSpec(d, cfg["n"], teacher, cfg["covariance"], cfg["noise_sigma"], cfg["seed"])
    X, Y = sample_dataset(data_spec, fm)
    probes = substream(cfg["seed"], "probe", 0).standard_normal((4, d))
    return fm, X, Y, probes


def cmd_dynamics(cfg, args):
    fm, X, Y, probes = _dynamics_problem(cfg)
    phi = fm.feature_matrix(X)
    decomp = sym_eig(feature_covariance(phi))
    eig = np.clip(decomp.eigenvalues, 0.0, None)
    eta = cfg["eta"] or 0.5 / eig[0]
    target = fit_least_squares(phi, Y)
    trace = gd_simulate(eta, cfg["T"], phi, Y, probes, fm)
    dev = simulation_deviation(trace, eta, phi, Y, probes, fm)
    system = ntk_gram(fm, X, Y)
    out = Path(cfg["out_dir"])
    times = [t for t in cfg["t_grid"]]

    coef_rows = []
    for t in times:
        cf = gd_closed_form(eta, t, decomp, target, probes, fm)
        ti = int(t)
        sim = trace.coefficients[ti] if float(ti) == t and ti < len(trace.times) else np.full(len(eig), np.nan)
        for j in range(len(eig)):
            coef_rows.append((t, j, eig[j], cf.coefficients[j], sim[j]))
    prof_rows = []
    sigma = cfg["noise_sigma"]
    for t in times:
        risk = risk_profile(t, eta, decomp, target[:, 0], sigma)
        for j in range(len(eig)):
            rho, gam = usefulness_robustness_profile(j, t, eta, decomp, target[:, 0], cfg["delta"], sigma)
            prof_rows.append((t, j, eig[j], float(rho), float(gam), risk.per_index[j]))
    flow_rows = []
    for t in times:
        kf = kernel_flow(cfg["gamma"], t, system, probes)
        for i in range(probes.shape[0]):
            flow_rows.append((t, i, kf.spectral[i, 0], kf.matrix[i, 0]))
    footer = {"eta": eta, "max_simulation_deviation": dev, "diverged": trace.diverged}
    write_csv(out / "dynamics_coefficients.csv", ("t", "index", "eigenvalue", "closed_form", "simulated"),
              coef_rows, cfg, footer)
    write_csv(out / "dynamics_profiles.csv", ("t", "index", "eigenvalue", "usefulness", "robustness", "risk_share"),
              prof_rows, cfg, footer)
    write_csv(out / "dynamics_kernel_flow.csv", ("t", "probe", "spectral", "matrix"), flow_rows, cfg, footer)
    if trace.diverged or np.any(eta * eig >= 2.0):
        raise NumericalFlag(f"step size {eta!r} diverges")
    if dev > 1e-6:
        raise NumericalFlag(f"simulation deviates from the closed form by {dev:.3e}")


def cmd_synth(cfg, args):
    """Write the planted task as matrix files (features, weights, inputs, labels)."""
    model, Xtr, Ytr, X, Y = _dataset(cfg)
    out = Path(cfg["out_dir"])
    write_matrix(out / "features.rfi", model.feature_map.feature_matrix(Xtr))
    write_matrix(out / "weights.rfi", model.weights)
    write_matrix(out / "x_test.rfi", X)
    write_matrix(out / "y_test.rfi", Y)


COMMANDS = {
    "fit-projector": cmd_fit_projector,
    "score-report": cmd_score_report,
    "eval": cmd_eval,
    "grid-k": cmd_grid_k,
    "ntk-experiment": cmd_ntk_experiment,
    "dynamics": cmd_dynamics,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rfi", description="Robust feature inference workbench")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        for key in CONFIG_SCHEMA:
            p.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", metavar="VALUE")
        if name in ("fit-projector", "score-report"):
            p.add_argument("--features", required=True, help="p x n feature matrix file")
            p.add_argument("--weights", required=True, help="p x C weight matrix file")
        if name == "fit-projector":
            p.add_argument("--out", required=True, help="projector file to write")
            p.add_argument("--report", help="score CSV to write")
        if name in ("score-report", "eval", "grid-k"):
            p.add_argument("--out", help="CSV to write")
        if name == "eval":
            p.add_argument("--fit", action="store_true", help="fit a projector on the training split")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
        defaults = VERB_DEFAULTS.get(args.command)
        if args.config:
            cfg = ExperimentConfig.load(args.config, overrides, defaults)
        else:
            cfg = ExperimentConfig.parse("", overrides, defaults)
        if cfg["feature_kind"] not in FEATURE_KINDS:
            raise ValueError(f"unknown feature kind {cfg['feature_kind']!r}")
        COMMANDS[args.command](cfg, args)
    except NumericalFlag as exc:
        print(f"rfi: numerical flag: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, DimensionError, FormatError, OSError) as exc:
        print(f"rfi: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
