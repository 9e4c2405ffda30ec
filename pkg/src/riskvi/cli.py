"""Batch command-line interface and flat-file run configuration.

Configuration is resolved in layers: built-in defaults, then a flat
key=value config file, then command-line overrides; unknown keys are
rejected. Every run writes a manifest that is itself a valid config file,
so a finished run can be replayed exactly from its output directory.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, fields as dc_fields

import numpy as np

from . import __version__, fields, gradient as grad, mesh as fem, svrg
from .benchmark import build_instance
from .fields import sample_xi
from .mesh import FemFunction
from .penalty import PenaltyParams
from .risk import Control
from ._util import atomic_write, fmt

__all__ = ["RunConfig", "parse_config", "run", "main"]

MODES = ("optimize", "stationarity_only", "field_preview")
NOISE_MODELS = (fields.MEAN_ZERO, fields.LOGNORMAL)
WORKERS_ENV = "RISKVI_WORKERS"


@dataclass
class RunConfig:
    """Fully resolved run parameters (defaults follow the benchmark)."""

    noise: str = fields.MEAN_ZERO
    beta: float = 0.0
    epsilon: float = 0.05
    nx: int = 32
    ny: int = 32
    order: int = 1
    n: int = 500
    kl_terms: int = 0            # 0 = model default (20 mean-zero, 100 lognormal)
    seed: int = 1
    tau_initial: float = 1e-1
    tau_final: float = 1e-6
    gamma: float = 0.1
    r: int = 1000                # SVRG update frequency
    tol: float = 0.0             # 0 = default 5e-4 h^2
    max_middle: int = 200
    z_init: float = 1.0
    s_init: float = 1.0
    newton_rel_tol: float = 1e-8
    strict: bool = False
    workers: int = 0             # 0 = RISKVI_WORKERS env var or 1
    mode: str = "optimize"
    outdir: str = "riskvi-out"
    from_dir: str = ""           # prior run directory for stationarity_only

    def validate(self) -> "RunConfig":
        if self.noise not in NOISE_MODELS:
            raise ValueError(f"noise must be one of {NOISE_MODELS}, got {self.noise!r}")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must be in [0, 1), got {self.beta}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.nx < 2 or self.ny < 2:
            raise ValueError("nx and ny must be >= 2")
        if self.order not in (1, 2):
            raise ValueError("order must be 1 or 2")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.kl_terms < 0:
            raise ValueError("kl_terms must be >= 0")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        if not 0.0 < self.tau_final <= self.tau_initial:
            raise ValueError("need 0 < tau_final <= tau_initial")
        if self.r < 1:
            raise ValueError("r must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.workers < 0:
            raise ValueError("workers must be >= 0")
        return self

    def resolved_workers(self) -> int:
        if self.workers > 0:
            return self.workers
        env = os.environ.get(WORKERS_ENV, "").strip()
        return max(1, int(env)) if env else 1


_FIELD_TYPES = {f.name: f.type for f in dc_fields(RunConfig)}
_KEY_ALIASES = {"from": "from_dir"}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    if kind == "bool" or kind is bool:
        low = str(raw).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean value {raw!r} for key {key!r}")
    if kind == "int" or kind is int:
        return int(raw)
    if kind == "float" or kind is float:
        return float(raw)
    return str(raw)


def _apply(config: RunConfig, key: str, value: str) -> None:
    key = _KEY_ALIASES.get(key, key)
    if key not in _FIELD_TYPES:
        raise ValueError(f"unknown configuration key {key!r}")
    setattr(config, key, _coerce(key, value))


def parse_config(path: str | None = None, overrides=None) -> RunConfig:
    """Resolve defaults <- config file <- overrides ("key=value" strings)."""
    config = RunConfig()
    if path:
        with open(path) as handle:
            for lineno, line in enumerate(handle, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, _, value = line.partition("=")
                _apply(config, key.strip(), value.strip())
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, _, value = item.partition("=")
        _apply(config, key.strip(), value.strip())
    return config.validate()


def _manifest_text(config: RunConfig) -> str:
    lines = [
        f"# riskvi {__version__} run manifest (replayable config)",
        f"# numpy {np.__version__}",
    ]
    for f in dc_fields(RunConfig):
        value = getattr(config, f.name)
        key = "from" if f.name == "from_dir" else f.name
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def _svrg_config(config: RunConfig) -> svrg.SvrgConfig:
    return svrg.SvrgConfig(
        tau_initial=config.tau_initial,
        tau_final=config.tau_final,
        gamma=config.gamma,
        update_frequency=config.r,
        tol=config.tol if config.tol > 0 else None,
        seed=config.seed,
        n=config.n,
        max_middle=config.max_middle,
        z_init=config.z_init,
        s_init=config.s_init,
        newton_rel_tol=config.newton_rel_tol,
        workers=config.resolved_workers(),
        strict=config.strict,
    )


def _build_instance(config: RunConfig, noise: str | None = None):
    return build_instance(
        config.nx,
        config.ny,
        order=config.order,
        noise=noise or config.noise,
        beta=config.beta,
        epsilon=config.epsilon,
        kl_terms=config.kl_terms or None,
    )


def _export_field(outdir: str, stem: str, field: FemFunction) -> None:
    fem.export_field_csv(os.path.join(outdir, stem + ".csv"), field)
    fem.export_field_vtk(os.path.join(outdir, stem + ".vtk"), field, name=stem)


def _write_terminal(outdir: str, report: svrg.RunReport) -> None:
    lines = [
        f"s={fmt(report.control.s)}",
        f"objective={fmt(report.objective)}",
        f"residual={fmt(report.residual)}",
        f"tol={fmt(report.tol)}",
        f"converged={'true' if report.converged else 'false'}",
        f"full_gradients={report.full_gradients}",
        f"pde_solves={report.pde_solves}",
        f"inner_steps={report.inner_steps}",
        f"wall_seconds={fmt(report.wall_seconds)}",
    ]
    atomic_write(os.path.join(outdir, "terminal.txt"), "\n".join(lines) + "\n")


def _read_terminal(path: str) -> dict:
    out = {}
    with open(path) as handle:
        for line in handle:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def _run_optimize(config: RunConfig) -> int:
    instance = _build_instance(config)
    try:
        report = svrg.run_path_following(instance, _svrg_config(config))
    except RuntimeError as exc:
        print(f"riskvi: run failed: {exc}", file=sys.stderr)
        return 1
    outdir = config.outdir
    svrg.write_history_csv(os.path.join(outdir, "history.csv"), report)
    _export_field(outdir, "control_z", FemFunction(instance.mesh, report.control.z))
    _export_field(outdir, "mean_state", report.mean_state)
    _export_field(outdir, "mean_multiplier", report.mean_multiplier)
    grad.write_stationarity_csv(
        os.path.join(outdir, "stationarity.csv"), report.stationarity
    )
    _write_terminal(outdir, report)
    atomic_write(os.path.join(outdir, "manifest.txt"), _manifest_text(config))
    print(
        f"riskvi: objective={report.objective:.7f} residual={report.residual:.3e} "
        f"pde_solves={report.pde_solves} wall={report.wall_seconds:.1f}s -> {outdir}"
    )
    return 0 if (report.converged or not config.strict) else 1


def _run_field_preview(config: RunConfig) -> int:
    outdir = config.outdir
    for noise in NOISE_MODELS:
        instance = _build_instance(config, noise=noise)
        samples = sample_xi(instance.expansion, 1, seed=config.seed)
        b = instance.field_values(samples.samples[0])
        _export_field(outdir, f"field_{noise}", FemFunction(instance.mesh, b))
    atomic_write(os.path.join(outdir, "manifest.txt"), _manifest_text(config))
    print(f"riskvi: wrote field realizations for {', '.join(NOISE_MODELS)} -> {outdir}")
    return 0


def _read_field_csv(path: str) -> np.ndarray:
    values = []
    with open(path) as handle:
        header = handle.readline().strip()
        if header != "x1,x2,value":
            raise ValueError(f"unexpected field CSV header {header!r}")
        for line in handle:
            values.append(float(line.strip().split(",")[2]))
    return np.asarray(values)


def _run_stationarity(config: RunConfig) -> int:
    src = config.from_dir
    if not src:
        print("riskvi: stationarity_only requires from=<run directory>", file=sys.stderr)
        return 1
    run_config = parse_config(os.path.join(src, "manifest.txt"))
    instance = _build_instance(run_config)
    z = _read_field_csv(os.path.join(src, "control_z.csv"))
    terminal = _read_terminal(os.path.join(src, "terminal.txt"))
    control = Control(z, float(terminal["s"]))
    samples = sample_xi(instance.expansion, run_config.n, seed=run_config.seed)
    report = grad.stationarity_report(
        instance, control, samples, PenaltyParams(run_config.tau_final),
        newton_rel_tol=run_config.newton_rel_tol,
    )
    outdir = config.outdir
    grad.write_stationarity_csv(os.path.join(outdir, "stationarity.csv"), report)
    print(f"riskvi: stationarity residuals for {src} -> {outdir}/stationarity.csv")
    return 0


def run(config: RunConfig) -> int:
    """Execute the configured mode; returns a process exit status."""
    os.makedirs(config.outdir, exist_ok=True)
    if config.mode == "optimize":
        return _run_optimize(config)
    if config.mode == "field_preview":
        return _run_field_preview(config)
    return _run_stationarity(config)


def _collect_overrides(pairs: list[str]) -> list[str]:
    """Turn ["--beta", "0.95", ...] remainders into ["beta=0.95", ...]."""
    out = []
    i = 0
    while i < len(pairs):
        token = pairs[i]
        if not token.startswith("--"):
            raise ValueError(f"unexpected argument {token!r}")
        key = token[2:]
        if "=" in key:
            out.append(key)
            i += 1
            continue
        if i + 1 >= len(pairs):
            raise ValueError(f"flag --{key} is missing a value")
        out.append(f"{key}={pairs[i + 1]}")
        i += 2
    return out


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="riskvi",
        description="Risk-averse control of random obstacle problems "
                    "(penalization + SAA + path-following SVRG).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="solve the configured problem")
    p_run.add_argument("--config", default=None, help="flat key=value config file")

    p_prev = sub.add_parser("preview-fields",
                            help="write one noise realization per model")
    p_prev.add_argument("--config", default=None)

    p_stat = sub.add_parser("check-stationarity",
                            help="stationarity residuals for a finished run")
    p_stat.add_argument("--from", dest="from_dir", required=True,
                        help="output directory of a finished optimize run")
    p_stat.add_argument("--config", default=None)

    args, rest = parser.parse_known_args(argv)
    try:
        overrides = _collect_overrides(rest)
        if args.command == "preview-fields":
            overrides.append("mode=field_preview")
        elif args.command == "check-stationarity":
            overrides.append("mode=stationarity_only")
            overrides.append(f"from={args.from_dir}")
        config = parse_config(args.config, overrides)
    except (ValueError, OSError) as exc:
        print(f"riskvi: {exc}", file=sys.stderr)
        return 2
    try:
        return run(config)
    except OSError as exc:
        print(f"riskvi: I/O failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
