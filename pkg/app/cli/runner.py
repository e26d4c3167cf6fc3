"""
Command-line runner
Batch front end: simulate traces, run the array pipeline, fit CSV data and
render register frames. Every run writes its artifacts plus manifest.json.

Exit codes: 0 ok, 2 configuration or input error, 3 numeric failure,
4 fit did not converge (the result is still written).
"""

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict
from typing import Any, Dict, Optional, Sequence

import numpy as np
import pandas as pd

from app.api.schemas import ExperimentConfig, parse_config
from app.core.config import settings
from app.core.exceptions import ConfigError, InvalidArgumentError, TrapSimError
from app.core.logging_config import configure_logging
from app.data.experiment_presets import get_preset, get_preset_names
from app.physics.bloch_core import BlochState, PopulationTrace, lineshape_scan, rabi_sequence, run_sequence
from app.physics.dephasing_ensemble import (
    echo_analytic,
    echo_visibility_scan,
    mc_echo,
    mc_modulation,
    mc_ramsey,
    predicted_ramsey_params,
    ramsey_analytic,
)
from app.physics.register_array import array_state, load_array, site_grid
from app.services.array_pipeline import ArrayRamseyPipeline
from app.services.detection_sim import detection_simulator
from app.services.fit_engine import FitOptions, ModelKind, ModelSpec, fit_engine
from app.utils.artifact_storage import ArtifactStore, RunManifest, file_sha256

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_NOT_CONVERGED = 4

SIMULATE_KINDS = ("rabi", "ramsey", "echo", "lineshape", "visibility")

MODEL_ALIASES = {
    "rabi": ModelKind.RABI_BLOCH,
    "ramsey": ModelKind.RAMSEY_EQ4,
    "ramsey_thermal": ModelKind.RAMSEY_EQ4,
    "decay": ModelKind.EXP_DECAY,
}

# Data columns tried in order when reading a trace CSV
Y_COLUMNS = ("p0", "visibility", "population")


def _assignment(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got '{text}'")
    key, value = text.split("=", 1)
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return key.strip(), parsed


def _float_assignment(text: str):
    key, value = _assignment(text)
    try:
        return key, float(value)
    except (TypeError, ValueError):
        raise argparse.ArgumentTypeError(f"'{key}' needs a numeric value")


def _add_source_arguments(parser: argparse.ArgumentParser) -> None:
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--config", help="JSON experiment configuration")
    source.add_argument("--preset", choices=get_preset_names(), help="built-in experiment configuration")
    parser.add_argument("--seed", type=int, help="64-bit run seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--set", dest="overrides", action="append", type=_assignment, default=[],
                        metavar="KEY=VALUE", help="dotted config override, e.g. trap.depth_k=8e-4")


def _add_config_arguments(parser: argparse.ArgumentParser) -> None:
    _add_source_arguments(parser)
    parser.add_argument("--t-max", type=float, help="last sample time (s)")
    parser.add_argument("--points", type=int, help="number of samples")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trapsim", description=settings.PROJECT_DESCRIPTION)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", help="simulate a single-trap trace")
    simulate.add_argument("kind", choices=SIMULATE_KINDS)
    _add_config_arguments(simulate)
    simulate.add_argument("--analytic", action="store_true", help="closed-form signal instead of Monte Carlo")
    simulate.add_argument("--t1", type=float, help="echo pi-pulse delay (s)")
    simulate.add_argument("--n-atoms", type=int, help="Monte-Carlo ensemble size")
    omega = simulate.add_mutually_exclusive_group()
    omega.add_argument("--omega", type=float, help="Rabi frequency (rad/s)")
    omega.add_argument("--omega-hz", type=float, help="Rabi frequency (Hz)")
    delta = simulate.add_mutually_exclusive_group()
    delta.add_argument("--delta-rl", type=float, help="drive offset from the bare clock line (rad/s)")
    delta.add_argument("--delta-rl-hz", type=float, help="drive offset from the bare clock line (Hz)")

    array = commands.add_parser("array-ramsey", help="simultaneous Ramsey measurement over the register")
    _add_config_arguments(array)
    array.add_argument("--no-frames", action="store_true", help="skip writing the frame stack")

    fit = commands.add_parser("fit", help="fit a model to a trace CSV")
    fit.add_argument("model", choices=[kind.value for kind in ModelKind] + sorted(MODEL_ALIASES))
    fit.add_argument("--input", required=True, help="CSV with an x column and a p0/visibility column")
    fit.add_argument("--init", action="append", type=_float_assignment, default=[], metavar="NAME=VALUE")
    fit.add_argument("--fix", action="append", type=_float_assignment, default=[], metavar="NAME=VALUE")
    _add_source_arguments(fit)
    fit.add_argument("--bootstrap", type=int, help="residual bootstrap resamples (default fit.bootstrap)")
    fit.add_argument("--max-iter", type=int, help="iteration limit (default fit.max_iter)")

    render = commands.add_parser("render", help="render one fluorescence frame of the loaded register")
    _add_config_arguments(render)
    return parser


def load_experiment(args: argparse.Namespace, extra: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Config file or preset, then --set overrides, then dedicated flags"""
    if args.config:
        try:
            with open(args.config) as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config {args.config}: {e.strerror}")
    elif args.preset:
        text = json.dumps(get_preset(args.preset), indent=2)
    else:
        text = "{}"
    overrides: Dict[str, Any] = dict(args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out:
        overrides["output_dir"] = args.out
    if getattr(args, "t_max", None) is not None:
        overrides["sequence.t_max_s"] = args.t_max
    if getattr(args, "points", None) is not None:
        overrides["sequence.points"] = args.points
    overrides.update(extra or {})
    return parse_config(text, overrides)


def _store(command: str, config: ExperimentConfig) -> ArtifactStore:
    store = ArtifactStore(config.output_dir, RunManifest(command, config.digest(), config.seed))
    store.write_json("config.json", config.dict())
    return store


def _sample_times(config: ExperimentConfig, t_min_end: float = 0.0) -> np.ndarray:
    seq = config.sequence
    return np.linspace(0.0, max(seq.t_max_s, t_min_end), seq.points)


def _simulate_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    extra: Dict[str, Any] = {}
    if args.omega is not None:
        extra["sequence.omega_rabi_rad_s"] = args.omega
    if args.omega_hz is not None:
        extra["sequence.omega_rabi_rad_s"] = TWO_PI * args.omega_hz
    if args.delta_rl is not None:
        extra["sequence.delta_rl_rad_s"] = args.delta_rl
    if args.delta_rl_hz is not None:
        extra["sequence.delta_rl_rad_s"] = TWO_PI * args.delta_rl_hz
    if args.t1 is not None:
        extra["sequence.t1_s"] = args.t1
    if args.n_atoms is not None:
        extra["ensemble.n_atoms"] = args.n_atoms
    return extra


def simulate_trace(kind: str, config: ExperimentConfig, analytic: bool = False) -> PopulationTrace:
    """Trace for one simulate kind (visibility excluded)"""
    seq = config.sequence
    if kind == "rabi":
        times = _sample_times(config)
        sequence = rabi_sequence(seq.omega_rabi_rad_s, float(times[-1]), seq.rabi_detuning_rad_s,
                                 seq.pulse_phase_rad)
        return run_sequence(BlochState.upper(), sequence, config.relaxation_params(), times, seq.max_step_s)

    if kind == "lineshape":
        t_pulse = seq.t_pulse_s or math.pi / seq.omega_rabi_rad_s
        detunings = np.linspace(-seq.detuning_span_rad_s, seq.detuning_span_rad_s, seq.points)
        return lineshape_scan(t_pulse, seq.omega_rabi_rad_s, detunings)

    ensemble = config.thermal_ensemble()
    model, field = config.shift_model(), config.field_params()
    relax = config.relaxation_params(ensemble.trap)
    if kind == "ramsey":
        times = _sample_times(config)
        if analytic:
            params = predicted_ramsey_params(ensemble, seq.delta_rl_rad_s, model, field)
            return PopulationTrace(times, ramsey_analytic(times, params))
        return mc_ramsey(ensemble, seq.delta_rl_rad_s, config.pulse_spec(), times, relax=relax,
                         seed=config.seed, model=model, field=field, max_step=seq.max_step_s)

    if kind == "echo":
        times = _sample_times(config, t_min_end=2.5 * seq.t1_s)
        if analytic:
            params = predicted_ramsey_params(ensemble, seq.delta_rl_rad_s, model, field)
            trace = PopulationTrace(times, echo_analytic(times, seq.t1_s, params, relax.t2))
        else:
            trace = mc_echo(ensemble, seq.t1_s, seq.delta_rl_rad_s, relax, times, seed=config.seed,
                            pulse=config.pulse_spec(), model=model, field=field, max_step=seq.max_step_s)
        trace.x_label = "x"
        return trace

    raise InvalidArgumentError(f"unknown simulation kind '{kind}'")


def _echo_summary(config: ExperimentConfig) -> Dict[str, Any]:
    """Echo and Ramsey fringe modulation at 2*t1"""
    seq = config.sequence
    ensemble = config.thermal_ensemble()
    kwargs = dict(relax=config.relaxation_params(ensemble.trap), seed=config.seed, pulse=config.pulse_spec(),
                  model=config.shift_model(), field=config.field_params(), max_step=seq.max_step_s)
    echo = mc_modulation(ensemble, 2.0 * seq.t1_s, seq.delta_rl_rad_s, t1=seq.t1_s, **kwargs)
    ramsey = mc_modulation(ensemble, 2.0 * seq.t1_s, seq.delta_rl_rad_s, **kwargs)
    return {
        "t1_s": seq.t1_s,
        "echo_modulation": echo.amplitude,
        "echo_stderr": echo.stderr,
        "ramsey_modulation": ramsey.amplitude,
        "ramsey_stderr": ramsey.stderr,
        "atoms": echo.n_atoms,
    }


def cmd_simulate(args: argparse.Namespace) -> int:
    config = load_experiment(args, _simulate_overrides(args))
    store = _store(f"simulate {args.kind}", config)
    if args.kind == "visibility":
        ensemble = config.thermal_ensemble()
        seq = config.sequence
        relax = config.relaxation_params(ensemble.trap)
        # the population decay time stands in for T_echo
        scan = echo_visibility_scan(ensemble, seq.visibility_t1_s, seq.delta_rl_rad_s, relax=relax,
                                    seed=config.seed, pulse=config.pulse_spec(), model=config.shift_model(),
                                    field=config.field_params(), max_step=seq.max_step_s, t_echo=relax.t1,
                                    decay_in_total_time=config.relaxation.echo_decay_in_total_time)
        store.write_csv("visibility.csv", scan.to_frame())
    else:
        trace = simulate_trace(args.kind, config, args.analytic)
        store.write_csv(f"{args.kind}.csv", trace.to_frame())
        if args.kind == "echo" and not args.analytic:
            store.write_json("echo_summary.json", _echo_summary(config))
    store.finalize()
    return EXIT_OK


def cmd_array_ramsey(args: argparse.Namespace) -> int:
    config = load_experiment(args)
    pipeline = ArrayRamseyPipeline(config)
    run = pipeline.run(keep_frames=not args.no_frames)
    store = _store("array-ramsey", config)
    store.write_json("sites.json", run.array_state())
    for k, site in enumerate(run.sites):
        store.write_csv(f"site_{site.index[0]}_{site.index[1]}.csv", run.site_trace(k))
    params = asdict(pipeline.params)
    grid = site_grid(pipeline.spec).tolist()
    for step, frame in enumerate(run.frames):
        store.write_pgm(f"frames/frame_{step:04d}.pgm", frame.counts, sidecar={
            "seed": config.seed, "stream": step, "time_s": float(run.times[step]),
            "params": params, "grid_m": grid, "digest": frame.digest(),
        })
    store.write_json("fits.json", run.fits_payload())
    store.write_json("summary.json", run.summary())
    store.finalize()
    return EXIT_OK


def read_trace_csv(path: str):
    """x from the first column, y from p0/visibility/population or the second column"""
    try:
        data = pd.read_csv(path)
    except (OSError, ValueError) as e:
        raise InvalidArgumentError(f"cannot read {path}: {e}")
    if data.shape[1] < 2 or data.empty:
        raise InvalidArgumentError(f"{path}: need a header row, an x column and a data column")
    y_name = next((name for name in Y_COLUMNS if name in data.columns), data.columns[1])
    try:
        x = pd.to_numeric(data.iloc[:, 0]).to_numpy(dtype=float)
        y = pd.to_numeric(data[y_name]).to_numpy(dtype=float)
    except (TypeError, ValueError) as e:
        raise InvalidArgumentError(f"{path}: non-numeric data ({e})")
    return x, y


def cmd_fit(args: argparse.Namespace) -> int:
    extra = {f"fit.{name}": value for name, value in (("max_iter", args.max_iter), ("bootstrap", args.bootstrap))
             if value is not None}
    config = load_experiment(args, extra)
    max_iter, n_resamples = config.fit.max_iter, config.fit.bootstrap
    kind = MODEL_ALIASES.get(args.model) or ModelKind(args.model)
    x, y = read_trace_csv(args.input)
    model = ModelSpec(kind, fixed=dict(args.fix))
    init = None
    if args.init:
        init = fit_engine.initial_guess(model, x, y)
        init.update(dict(args.init))
    options = FitOptions(max_iter=max_iter)
    result = fit_engine.fit_curve(model, x, y, init=init, options=options)
    payload = result.to_dict()
    payload["message"] = result.message
    if n_resamples:
        payload["bootstrap_sigmas"] = fit_engine.bootstrap_uncertainties(
            model, x, y, result, n_resamples=n_resamples, seed=config.seed, options=options)

    store = ArtifactStore(config.output_dir, RunManifest(f"fit {kind.value}", file_sha256(args.input), config.seed))
    store.write_json("fits.json", payload)
    store.finalize()
    if not result.converged:
        logger.error(f"fit did not converge: {result.message}")
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_render(args: argparse.Namespace) -> int:
    config = load_experiment(args)
    spec = config.array_spec()
    params = config.detection_params()
    sites = load_array(spec, config.loading_params(), config.seed, trap_template=config.trap_params(),
                       field=config.field_params(), model=config.shift_model())
    grid = site_grid(spec)
    frame = detection_simulator.render_frame([(site.position, site.atom_number) for site in sites],
                                             params, config.seed)
    readout = detection_simulator.integrate_sites(frame, grid, config.integration_radius(), params,
                                                  indices=[site.index for site in sites])
    store = _store("render", config)
    store.write_pgm("frame.pgm", frame.counts, sidecar={
        "seed": config.seed, "params": asdict(params), "grid_m": grid.tolist(), "digest": frame.digest(),
    })
    store.write_json("sites.json", array_state(sites))
    store.write_csv("readout.csv", readout.to_frame())
    store.finalize()
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "array-ramsey": cmd_array_ramsey,
    "fit": cmd_fit,
    "render": cmd_render,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging("DEBUG" if args.verbose else None)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, InvalidArgumentError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_INPUT
    except TrapSimError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except (FloatingPointError, np.linalg.LinAlgError) as e:
        logger.error(f"numeric failure: {e}")
        return EXIT_NUMERIC


def run() -> None:
    sys.exit(main())
