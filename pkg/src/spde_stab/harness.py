"""Experiment configuration, orchestration and result files.

Config files are flat ``key = value`` text with ``#`` comments; keys are the
:class:`ExperimentConfig` field names (``lambda`` for ``lambda_``).
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import os
import platform
import sys
import warnings
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .basis import EigenBasis
from .errors import (BlowUpError, ConfigError, DegenerateFitError, SingularGramError,
                     UnreliableFitWarning)
from .estimators import (decay_row, estimate_as_exponent, feedback_energy, fit_mean_square_decay,
                         strong_errors, sup_statistic, write_decay_report)
from .feedback import build_feedback, closed_loop_drift, uncontrolled_drift
from .null_control import build_plan, run_plan
from .parallel import ensemble_runner
from .region import calibrate_spectral_constant, parse_region, spectral_bound
from .sde import SCHEMES, SimConfig, simulate_ensemble

__all__ = ["KINDS", "ExperimentConfig", "load_config", "run_experiment", "ensemble_runner",
           "initial_state", "main"]

log = logging.getLogger(__name__)

KINDS = ("uncontrolled", "closed_loop", "as_exponent", "null_control", "convergence", "gram_report")

EXIT_OK, EXIT_CONFIG, EXIT_BLOWUP, EXIT_FIT = 0, 2, 3, 4


@dataclass
class ExperimentConfig:
    kind: str = "uncontrolled"
    noise_intensity: float = 1.0
    drift_constant: float = 0.0
    dt: float = 0.01
    T_end: float = 5.0
    truncation: int = 8
    scheme: str = "exact_transform"
    seed: int = 0
    n_paths: int = 1000
    length: float = math.pi
    region: str = "0-pi/2"
    lambda_: float = 0.0          # 0 means no feedback (uncontrolled dynamics)
    gain: float | None = None     # overrides the calibrated feedback gain
    calibration_grid: str = "1,4,9,16,25,36"
    T: float = 1.0
    gamma: float | None = None    # None: calibrated from C
    n_max: int = 3
    initial: str = "e1"           # e<k>, smooth, flat
    t_eval: float | None = None
    fit_t_lo: float | None = None
    fit_t_hi: float | None = None
    dt_sequence: str = "2^-6,2^-7,2^-8,2^-9,2^-10,2^-11,2^-12"
    dump_paths: int = 0
    workers: int = 0              # 0: all available cores
    strict: bool = False
    out: str = "results"

    # -- parsing -----------------------------------------------------------

    @staticmethod
    def key(f) -> str:
        return f.name.rstrip("_")

    @classmethod
    def field_map(cls):
        return {cls.key(f): f for f in fields(cls)}

    @classmethod
    def from_mapping(cls, mapping) -> "ExperimentConfig":
        fm = cls.field_map()
        kwargs = {}
        for k, raw in mapping.items():
            if k not in fm:
                raise ConfigError(f"{k}: unknown configuration key")
            kwargs[fm[k].name] = _coerce(fm[k], raw)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def replace(self, **changes) -> "ExperimentConfig":
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{self.key(f)} = {_render(v)}")
        return "\n".join(lines) + "\n"

    # -- validation --------------------------------------------------------

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"kind: {self.kind!r} is not one of {', '.join(KINDS)}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme: {self.scheme!r} is not one of {', '.join(SCHEMES)}")
        if not self.length > 0:
            raise ConfigError("length: must be positive")
        if not self.n_paths >= 1:
            raise ConfigError("n_paths: must be >= 1")
        if self.dump_paths < 0 or self.workers < 0:
            raise ConfigError("dump_paths/workers: must be nonnegative")
        if self.lambda_ < 0:
            raise ConfigError("lambda: must be nonnegative")
        if self.kind == "closed_loop" and not self.lambda_ > 0:
            raise ConfigError("lambda: closed_loop needs a positive lambda")
        self.region_obj().check_within(self.length)
        self.grid()
        self.dt_levels()
        self.sim_config()

    def region_obj(self):
        return parse_region(self.region)

    def grid(self):
        try:
            vals = sorted({float(_number(x)) for x in self.calibration_grid.split(",") if x.strip()})
        except ValueError as exc:
            raise ConfigError(f"calibration_grid: {exc}") from None
        if not vals or min(vals) <= 0:
            raise ConfigError("calibration_grid: needs positive lambda values")
        return vals

    def dt_levels(self):
        try:
            return [float(_number(x)) for x in self.dt_sequence.split(",") if x.strip()]
        except ValueError as exc:
            raise ConfigError(f"dt_sequence: {exc}") from None

    def sim_config(self, **overrides) -> SimConfig:
        kw = dict(noise_intensity=self.noise_intensity, drift_constant=self.drift_constant,
                  dt=self.dt, T_end=self.T_end, truncation=self.truncation, scheme=self.scheme,
                  seed=self.seed, n_paths=self.n_paths,
                  deterministic=self.noise_intensity == 0)
        kw.update(overrides)
        return SimConfig(**kw)


def _number(tok: str) -> float:
    tok = tok.strip()
    if "^" in tok:
        base, exp = tok.split("^", 1)
        return float(base) ** float(exp)
    return float(tok)


def _render(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(f, raw):
    if not isinstance(raw, str):
        return raw
    s = raw.strip()
    t = str(f.type)
    try:
        if "None" in t and s.lower() in ("none", ""):
            return None
        if t == "bool":
            if s.lower() in ("1", "true", "yes", "on"):
                return True
            if s.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {s!r}")
        if t.startswith("int"):
            return int(s)
        if t.startswith("float"):
            if s.lower() == "pi":
                return math.pi
            return float(_number(s))
    except ValueError as exc:
        raise ConfigError(f"{ExperimentConfig.key(f)}: {exc}") from None
    return s


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path, overrides=None) -> ExperimentConfig:
    mapping = parse_config_text(Path(path).read_text()) if path else {}
    mapping.update(overrides or {})
    return ExperimentConfig.from_mapping(mapping)


def initial_state(spec: str, M: int) -> np.ndarray:
    """Unit-norm initial mode vector: ``e<k>``, ``smooth`` (1/k) or ``flat``."""
    s = spec.strip().lower()
    if s.startswith("e") and s[1:].isdigit():
        k = int(s[1:])
        if not 1 <= k <= M:
            raise ConfigError(f"initial: mode {k} outside 1..{M}")
        v = np.zeros(M)
        v[k - 1] = 1.0
        return v
    if s == "smooth":
        v = 1.0 / np.arange(1, M + 1)
    elif s == "flat":
        v = np.ones(M)
    else:
        raise ConfigError(f"initial: unknown initial condition {spec!r}")
    return v / np.linalg.norm(v)


# -- experiments -------------------------------------------------------------


def _fit_window(cfg, T_end):
    lo = cfg.fit_t_lo if cfg.fit_t_lo is not None else 0.2 * T_end
    hi = cfg.fit_t_hi if cfg.fit_t_hi is not None else T_end
    return (lo, hi)


def _system(cfg, manifest):
    basis = EigenBasis.on_interval(cfg.length, cfg.truncation)
    if cfg.lambda_ > 0:
        region = cfg.region_obj()
        cal = calibrate_spectral_constant(region, basis, set(cfg.grid()) | {cfg.lambda_})
        law = build_feedback(cfg.lambda_, region, basis, cal, gain=cfg.gain)
        if cfg.gain is None:
            law.require_hypothesis(cfg.noise_intensity, cfg.drift_constant)
        tail = 2 * (math.pi * (cfg.truncation + 1) / cfg.length) ** 2 \
            - 2 * cfg.drift_constant - cfg.noise_intensity ** 2
        if tail < cfg.lambda_:
            warnings.warn(f"truncation M={cfg.truncation} may mask slow tails "
                          f"(2 tau_(M+1) - 2c - a^2 = {tail:.4g} < lambda)", RuntimeWarning)
        manifest.update(constant_C=cal.constant_C, gamma_lambda=law.gain, N_lambda=law.n_low)
        return basis, law, closed_loop_drift(law, cfg.drift_constant, basis)
    return basis, None, uncontrolled_drift(basis, cfg.drift_constant)


def _simulate(cfg, out, manifest, drift, basis, T_end=None):
    sim = cfg.sim_config(T_end=T_end or cfg.T_end)
    y0 = initial_state(cfg.initial, basis.truncation)
    ens = simulate_ensemble(sim, drift, y0, workers=cfg.workers or None,
                            keep=range(min(cfg.dump_paths, cfg.n_paths)))
    for k, tr in ens.trajectories.items():
        tr.to_csv(out / f"trajectory_{k}.csv")
    return ens


def _fit_row(name, fit_fn, cfg, window, manifest):
    """Fitted row, or an empty row when the statistic underflows to zero."""
    try:
        return decay_row(name, fit_fn(), seed=cfg.seed)
    except DegenerateFitError as exc:
        manifest["degenerate_fits"] = manifest.get("degenerate_fits", 0) + 1
        warnings.warn(f"{name}: {exc}; shorten T_end or the fit window", UnreliableFitWarning)
        return decay_row(name, t_lo=window[0], t_hi=window[1], n_paths=cfg.n_paths, seed=cfg.seed)


def _run_decay(cfg, out, manifest):
    basis, law, drift = _system(cfg, manifest)
    ens = _simulate(cfg, out, manifest, drift, basis)
    window = _fit_window(cfg, ens.T_end)
    rows = [_fit_row("mean_square", lambda: fit_mean_square_decay(ens, window, min_paths=1),
                     cfg, window, manifest)]
    if law is not None:
        rows.append(_fit_row("feedback_energy", lambda: feedback_energy(ens, law, window, min_paths=1),
                             cfg, window, manifest))
    t_eval = cfg.t_eval if cfg.t_eval is not None else ens.T_end
    _as_rows(rows, ens, t_eval, cfg, manifest)
    manifest["sup_norm_sq"] = sup_statistic(ens, 0.0)
    write_decay_report(out / "decay.csv", rows)


def _as_rows(rows, ens, t_eval, cfg, manifest):
    try:
        sample = estimate_as_exponent(ens, t_eval)
    except DegenerateFitError as exc:
        manifest["degenerate_fits"] = manifest.get("degenerate_fits", 0) + 1
        warnings.warn(f"as_exponent: {exc}", UnreliableFitWarning)
        rows += [decay_row(name, t_lo=t_eval, t_hi=t_eval, n_paths=0, seed=cfg.seed)
                 for name in ("as_mean", "as_p95", "as_max")]
        return
    n = len(sample.values)
    for name, v in (("as_mean", sample.mean), ("as_p95", sample.p95), ("as_max", sample.max)):
        rows.append(decay_row(name, exponent=v, t_lo=t_eval, t_hi=t_eval, n_paths=n, seed=cfg.seed))


def _run_as(cfg, out, manifest):
    basis, law, drift = _system(cfg, manifest)
    t_eval = cfg.t_eval if cfg.t_eval is not None else cfg.T_end
    ens = _simulate(cfg, out, manifest, drift, basis, T_end=max(cfg.T_end, t_eval))
    rows = []
    _as_rows(rows, ens, t_eval, cfg, manifest)
    write_decay_report(out / "decay.csv", rows)


def _run_convergence(cfg, out, manifest):
    basis, law, drift = _system(cfg, manifest)
    sim = cfg.sim_config()
    y0 = initial_state(cfg.initial, basis.truncation)
    rows, conv = [], []
    for scheme in ("euler_maruyama", "milstein"):
        dts, errs = strong_errors(sim, drift, y0, cfg.dt_levels(), scheme, cfg.workers or None)
        slope, icpt = np.polyfit(np.log(dts), np.log(errs), 1)
        pred = icpt + slope * np.log(dts)
        ss = np.sum((np.log(errs) - np.log(errs).mean()) ** 2)
        r2 = 1 - np.sum((np.log(errs) - pred) ** 2) / ss if ss > 0 else 1.0
        rows.append(decay_row(f"strong_order_{scheme}", exponent=slope, intercept=icpt, r2=r2,
                              t_lo=cfg.T_end, t_hi=cfg.T_end, n_paths=cfg.n_paths, seed=cfg.seed))
        conv += [[scheme, repr(float(d)), repr(float(e)), str(cfg.n_paths), str(cfg.seed)]
                 for d, e in zip(dts, errs)]
    write_decay_report(out / "decay.csv", rows)
    _write_csv(out / "convergence.csv", ["scheme", "dt", "strong_error", "n_paths", "seed"], conv)


def _run_gram(cfg, out, manifest):
    basis = EigenBasis.on_interval(cfg.length, cfg.truncation)
    region = cfg.region_obj()
    cal = calibrate_spectral_constant(region, basis, cfg.grid())
    manifest["constant_C"] = cal.constant_C
    rows = []
    for lam, n, lmin in cal.samples:
        rows.append([repr(lam), str(n), repr(lmin), repr(spectral_bound(cal.constant_C, lam))])
    _write_csv(out / "gram.csv", ["lambda", "N_lambda", "lambda_min", "bound"], rows)


def _run_null(cfg, out, manifest):
    basis = EigenBasis.on_interval(cfg.length, cfg.truncation)
    region = cfg.region_obj()
    cal = calibrate_spectral_constant(region, basis, cfg.grid())
    plan = build_plan(cfg.T, cal, region, basis, cfg.noise_intensity, cfg.drift_constant,
                      cfg.n_max, gamma=cfg.gamma)
    y0 = initial_state(cfg.initial, basis.truncation)
    run = run_plan(plan, cfg.sim_config(), y0, workers=cfg.workers or None)
    manifest.update(constant_C=plan.constant_C, Gamma=plan.gamma, n_T=plan.n_T,
                    T_effective=plan.T_effective, gamma_inequality_verified=plan.gamma_verified,
                    energy_converged=run.energy_converged(),
                    contraction_bounds_hold=all(c[3] for c in run.contraction_checks()))
    if not plan.gamma_verified:
        warnings.warn("Gamma does not satisfy the gain inequality for every executed n",
                      RuntimeWarning)
    run.to_csv(out / "plan.csv")


def _write_csv(path, header, rows):
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


_RUNNERS = {
    "uncontrolled": _run_decay,
    "closed_loop": _run_decay,
    "as_exponent": _run_as,
    "null_control": _run_null,
    "convergence": _run_convergence,
    "gram_report": _run_gram,
}


def _write_manifest(path, cfg, manifest):
    lines = ["# spde-stab run manifest", cfg.to_text().rstrip("\n"), "# derived"]
    for k, v in manifest.items():
        lines.append(f"{k} = {_render(v)}")
    lines += ["# versions", f"spde_stab = {__version__}", f"numpy = {np.__version__}",
              f"scipy = {scipy.__version__}", f"python = {platform.python_version()}"]
    Path(path).write_text("\n".join(lines) + "\n")


def run_experiment(cfg: ExperimentConfig) -> int:
    """Run one experiment, write its files under ``cfg.out`` and return an exit status."""
    try:
        cfg.validate()
    except ConfigError as exc:
        log.error("invalid configuration: %s", exc)
        return EXIT_CONFIG
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            _RUNNERS[cfg.kind](cfg, out, manifest)
        except (ConfigError, SingularGramError) as exc:
            log.error("invalid configuration: %s", exc)
            return EXIT_CONFIG
        except BlowUpError as exc:
            log.error("blow-up: %s", exc)
            return EXIT_BLOWUP
    unreliable = [w for w in caught if issubclass(w.category, UnreliableFitWarning)]
    for w in caught:
        log.warning("%s", w.message)
    manifest["unreliable_fits"] = len(unreliable)
    _write_manifest(out / "manifest.txt", cfg, manifest)
    if cfg.strict and unreliable:
        return EXIT_FIT
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spde-stab",
                                description="Stochastic heat equation feedback experiments")
    p.add_argument("kind", choices=KINDS)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--paths", type=int, dest="n_paths")
    p.add_argument("--dt", type=float)
    p.add_argument("--lambda", type=float, dest="lambda")
    p.add_argument("--region")
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.add_argument("--strict", action="store_true", default=None,
                   help="treat unreliable fits as errors (exit 4)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    overrides = {"kind": args.kind}
    for key in ("seed", "n_paths", "dt", "lambda", "region", "out", "workers", "strict"):
        v = getattr(args, key)
        if v is not None:
            overrides[key] = v
    try:
        cfg = load_config(args.config, overrides)
    except (ConfigError, OSError) as exc:
        print(f"spde-stab: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    status = run_experiment(cfg)
    if status == EXIT_OK:
        print(f"results written to {os.path.abspath(cfg.out)}")
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
