"""
Fit engine
Levenberg-Marquardt recovery of Rabi, Ramsey, lineshape and echo-decay
parameters from population traces.
"""

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy.signal import lombscargle
from scipy.stats import linregress

from app.core.config import settings
from app.core.exceptions import DegenerateDataError, InvalidArgumentError, NumericError
from app.physics.bloch_core import BlochState, RelaxationParams, rabi_sequence, rabi_transfer, run_sequence
from app.physics.dephasing_ensemble import envelope_alpha, phase_kappa
from app.utils.random_streams import StreamPurpose, rng_stream

logger = logging.getLogger(__name__)

INF = math.inf

# alpha(t) = 1/2 at t = 0.7863 T2*
ENVELOPE_HALF_POINT = math.sqrt((2.0 ** (2.0 / 3.0) - 1.0) / 0.95)
# a pi-pulse lineshape falls to half height at |delta| ~ 0.8 Omega
LINESHAPE_HALF_WIDTH = 0.8
LAMBDA_MAX = 1e16
RESIDUAL_FLOOR = 1e-10


class ModelKind(str, enum.Enum):
    RABI_BLOCH = "rabi_bloch"
    RAMSEY_EQ4 = "ramsey_eq4"
    LINESHAPE = "lineshape"
    EXP_DECAY = "exp_decay"


PARAMETER_NAMES: Dict[ModelKind, Tuple[str, ...]] = {
    ModelKind.RABI_BLOCH: ("omega", "t2", "gamma_bg", "amplitude"),
    ModelKind.RAMSEY_EQ4: ("amplitude", "offset", "delta", "phase", "t2_star"),
    ModelKind.LINESHAPE: ("omega", "t_pulse", "delta0", "amplitude", "offset"),
    ModelKind.EXP_DECAY: ("v0", "tau"),
}

DEFAULT_BOUNDS: Dict[ModelKind, Dict[str, Tuple[float, float]]] = {
    ModelKind.RABI_BLOCH: {
        "omega": (0.0, INF), "t2": (1e-9, INF), "gamma_bg": (0.0, INF), "amplitude": (0.0, 2.0),
    },
    ModelKind.RAMSEY_EQ4: {
        "amplitude": (0.0, 1.0), "offset": (0.0, 1.0), "delta": (-INF, INF),
        "phase": (-INF, INF), "t2_star": (1e-9, INF),
    },
    ModelKind.LINESHAPE: {
        "omega": (0.0, INF), "t_pulse": (0.0, INF), "delta0": (-INF, INF),
        "amplitude": (0.0, 2.0), "offset": (-1.0, 1.0),
    },
    ModelKind.EXP_DECAY: {"v0": (-INF, INF), "tau": (1e-12, INF)},
}


@dataclass(frozen=True)
class ModelSpec:
    """
    Model family plus fixed parameters and bounds of the free ones

    rabi_bloch fits amplitude * P0 of a resonant drive started in |1>, with
    transverse time t2, population decay rate gamma_bg towards w_eq.
    """

    kind: ModelKind
    fixed: Dict[str, float] = field(default_factory=dict)
    bounds: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    w_eq: float = 0.0
    detuning: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        names = PARAMETER_NAMES[self.kind]
        unknown = (set(self.fixed) | set(self.bounds)) - set(names)
        if unknown:
            raise InvalidArgumentError(f"unknown parameters for {self.kind.value}: {sorted(unknown)}")
        for name, (lo, hi) in self.bounds.items():
            if math.isnan(lo) or math.isnan(hi) or lo >= hi:
                raise InvalidArgumentError(f"invalid bounds for {name}: ({lo}, {hi})")
        if len(self.free_names) == 0:
            raise InvalidArgumentError("model has no free parameters")

    @property
    def names(self) -> Tuple[str, ...]:
        return PARAMETER_NAMES[self.kind]

    @property
    def free_names(self) -> List[str]:
        return [name for name in self.names if name not in self.fixed]

    def bound(self, name: str) -> Tuple[float, float]:
        return self.bounds.get(name, DEFAULT_BOUNDS[self.kind][name])


@dataclass(frozen=True)
class FitOptions:
    max_iter: int = 500
    ftol: float = 1e-10
    gtol: float = 1e-12
    # largest residual/Jacobian-column cosine a converged fit may report
    cosine_tol: float = 1e-3
    lambda0: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    rel_step: float = 1e-6


@dataclass
class FitResult:
    model: ModelKind
    params: Dict[str, float]
    sigmas: Dict[str, float]
    rss: float
    iterations: int
    converged: bool
    message: str = ""
    rss_history: List[float] = field(default_factory=list)
    gradient_cosine: float = math.nan
    at_bounds: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": self.model.value,
            "params": {name: {"value": value, "sigma": self.sigmas.get(name, 0.0)}
                       for name, value in self.params.items()},
            "rss": self.rss,
            "iterations": self.iterations,
            "converged": self.converged,
        }


def wrap_phase(phase: float) -> float:
    """Map onto (-pi, pi]"""
    return math.pi - (math.pi - phase) % (2.0 * math.pi)


def _as_data(x, y=None) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    x = np.asarray(x, dtype=float).ravel()
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("x contains non-finite values")
    if y is None:
        return x, None
    y = np.asarray(y, dtype=float).ravel()
    if y.shape != x.shape:
        raise InvalidArgumentError("x and y must have equal length")
    if not np.all(np.isfinite(y)):
        raise InvalidArgumentError("y contains NaN or infinite values")
    return x, y


def _periodogram_peak(x: np.ndarray, y: np.ndarray) -> float:
    """Angular frequency of the dominant Lomb-Scargle peak"""
    span = float(x.max() - x.min())
    dx = np.diff(np.sort(x))
    dx = dx[dx > 0]
    nyquist = math.pi / float(np.median(dx))
    freqs = np.linspace(math.pi / span, nyquist, max(2000, 20 * x.size))
    power = lombscargle(x, y - y.mean(), freqs)
    return float(freqs[int(np.argmax(power))])


def _half_time(x: np.ndarray, envelope: np.ndarray) -> Optional[float]:
    """First x where a decaying envelope drops to half its initial value"""
    start = envelope[0]
    if start <= 0:
        return None
    below = np.nonzero(envelope <= start / 2.0)[0]
    if below.size == 0:
        return None
    k = int(below[0])
    if k == 0:
        return float(x[0])
    x0, x1, e0, e1 = x[k - 1], x[k], envelope[k - 1], envelope[k]
    frac = (e0 - start / 2.0) / (e0 - e1) if e0 != e1 else 0.0
    return float(x0 + frac * (x1 - x0) - x[0])


def _oscillation_envelope(x: np.ndarray, y: np.ndarray, omega: float) -> Tuple[np.ndarray, np.ndarray]:
    """Half peak-to-peak of y in windows at least one period long"""
    # at least eight samples per window so near-Nyquist fringes still show their swing
    period = max(2.0 * math.pi / omega, 8.0 * float(np.median(np.diff(x))))
    edges = np.arange(x.min(), x.max() + period, period)
    centers, envelope = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        mask = (x >= lo) & (x < hi)
        if mask.sum() >= 3:
            centers.append(lo)
            envelope.append(float(np.ptp(y[mask])) / 2.0)
    return np.asarray(centers), np.asarray(envelope)


class FitEngine:
    """
    Damped least squares with Marquardt scaling
    """

    def __init__(self, options: Optional[FitOptions] = None):
        self.options = options or FitOptions()

    # Models

    def _full_params(self, model: ModelSpec, params: Dict[str, float]) -> Dict[str, float]:
        values = dict(model.fixed)
        values.update(params)
        missing = [name for name in model.names if name not in values]
        if missing:
            raise InvalidArgumentError(f"missing parameters for {model.kind.value}: {missing}")
        return values

    def _evaluate(self, model: ModelSpec, p: Dict[str, float], x: np.ndarray) -> np.ndarray:
        kind = model.kind
        if kind == ModelKind.EXP_DECAY:
            return p["v0"] * np.exp(-x / p["tau"])
        if kind == ModelKind.RAMSEY_EQ4:
            return p["amplitude"] * envelope_alpha(x, p["t2_star"]) * np.cos(
                p["delta"] * x + phase_kappa(x, p["t2_star"]) + p["phase"]
            ) + p["offset"]
        if kind == ModelKind.LINESHAPE:
            return p["amplitude"] * rabi_transfer(p["t_pulse"], p["omega"], x - p["delta0"]) + p["offset"]
        return self._rabi_bloch(model, p, x)

    def _rabi_bloch(self, model: ModelSpec, p: Dict[str, float], x: np.ndarray) -> np.ndarray:
        if np.any(x < 0):
            raise InvalidArgumentError("rabi_bloch needs times >= 0")
        t1 = INF if p["gamma_bg"] == 0 else 1.0 / p["gamma_bg"]
        relax = RelaxationParams(t1=t1, t2=p["t2"], w_eq=model.w_eq)
        unique, inverse = np.unique(x, return_inverse=True)
        duration = float(unique[-1])
        if duration == 0:
            return np.zeros_like(x)
        sequence = rabi_sequence(p["omega"], duration, detuning=model.detuning)
        trace = run_sequence(BlochState.upper(), sequence, relax, unique)
        return p["amplitude"] * trace.p0[inverse]

    def predict(self, model: ModelSpec, params: Dict[str, float], x) -> np.ndarray:
        """Model values at x; parameters must lie inside their bounds"""
        x, _ = _as_data(x)
        values = self._full_params(model, params)
        for name in model.names:
            lo, hi = model.bound(name)
            value = values[name]
            if math.isnan(value) or not lo <= value <= hi:
                raise InvalidArgumentError(f"{name} = {value} outside bounds [{lo}, {hi}]")
        out = np.asarray(self._evaluate(model, values, x), dtype=float)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"{model.kind.value} prediction produced non-finite values")
        return out

    # Initial guesses

    def initial_guess(self, model: ModelSpec, x, y) -> Dict[str, float]:
        """Heuristic start values for the free parameters"""
        x, y = _as_data(x, y)
        if x.size < 3:
            raise DegenerateDataError("need at least 3 points to guess parameters")
        if np.ptp(y) == 0:
            raise DegenerateDataError("y is constant; nothing to fit")
        if np.ptp(x) == 0:
            raise DegenerateDataError("x has zero span")
        order = np.argsort(x)
        x, y = x[order], y[order]
        span = float(x[-1] - x[0])

        kind = model.kind
        if kind == ModelKind.EXP_DECAY:
            guess = self._guess_decay(x, y, span)
        elif kind == ModelKind.RAMSEY_EQ4:
            guess = self._guess_ramsey(model, x, y, span)
        elif kind == ModelKind.LINESHAPE:
            guess = self._guess_lineshape(x, y)
        else:
            guess = self._guess_rabi(x, y, span)
        guess = {name: value for name, value in guess.items() if name not in model.fixed}
        logger.debug(f"initial guess for {kind.value}: {guess}")
        return guess

    def _guess_decay(self, x: np.ndarray, y: np.ndarray, span: float) -> Dict[str, float]:
        v0 = float(y[0])
        t_half = _half_time(x, y if v0 > 0 else -y)
        if t_half is not None and t_half > 0:
            tau = t_half / math.log(2.0)
        else:
            positive = y > 0
            tau = span
            if positive.sum() >= 2:
                slope = linregress(x[positive], np.log(y[positive])).slope
                if slope < 0:
                    tau = -1.0 / slope
        return {"v0": v0, "tau": tau}

    def _guess_ramsey(self, model: ModelSpec, x: np.ndarray, y: np.ndarray, span: float) -> Dict[str, float]:
        fixed = model.fixed
        peak = _periodogram_peak(x, y)
        centers, envelope = _oscillation_envelope(x, y, peak)
        t_half = _half_time(centers, envelope) if envelope.size >= 2 else None
        t2_guess = t_half / ENVELOPE_HALF_POINT if t_half else 3.0 * span

        # the thermal phase lag pulls the periodogram peak below delta
        deltas = np.array([fixed["delta"]]) if "delta" in fixed else peak * np.linspace(0.95, 1.10, 31)
        phases = (np.array([fixed["phase"]]) if "phase" in fixed
                  else np.linspace(-math.pi, math.pi, 16, endpoint=False))
        t2s = np.array([fixed["t2_star"]]) if "t2_star" in fixed else t2_guess * np.array([0.5, 1.0, 2.0])

        d = deltas[:, None, None, None]
        ph = phases[None, :, None, None]
        t2 = t2s[None, None, :, None]
        g = envelope_alpha(x / t2, 1.0) * np.cos(d * x + phase_kappa(x / t2, 1.0) + ph)
        if "amplitude" in fixed or "offset" in fixed:
            amplitude = np.full(g.shape[:-1] + (1,), fixed.get("amplitude", float(np.ptp(y)) / 2.0))
            offset = np.full_like(amplitude, fixed.get("offset", float(y.mean())))
        else:
            g_mean = g.mean(axis=-1, keepdims=True)
            g_var = ((g - g_mean) ** 2).mean(axis=-1, keepdims=True)
            cov = ((g - g_mean) * (y - y.mean())).mean(axis=-1, keepdims=True)
            amplitude = np.clip(cov / np.where(g_var > 0, g_var, 1.0), 0.0, 1.0)
            offset = np.clip(y.mean() - amplitude * g_mean, 0.0, 1.0)
        rss = np.sum((y - amplitude * g - offset) ** 2, axis=-1)
        i, j, k = np.unravel_index(int(np.argmin(rss)), rss.shape)
        return {"amplitude": float(amplitude[i, j, k, 0]), "offset": float(offset[i, j, k, 0]),
                "delta": float(deltas[i]), "phase": float(phases[j]), "t2_star": float(t2s[k])}

    def _guess_rabi(self, x: np.ndarray, y: np.ndarray, span: float) -> Dict[str, float]:
        omega = _periodogram_peak(x, y)
        centers, envelope = _oscillation_envelope(x, y, omega)
        t_half = _half_time(centers, envelope) if envelope.size >= 2 else None
        t2 = t_half / math.log(2.0) if t_half else 3.0 * span
        return {"omega": omega, "t2": t2, "gamma_bg": 0.1 / span,
                "amplitude": float(min(max(y.max(), 1e-3), 2.0))}

    def _guess_lineshape(self, x: np.ndarray, y: np.ndarray) -> Dict[str, float]:
        offset = float(y.min())
        peak = int(np.argmax(y))
        amplitude = float(y[peak] - offset)
        half = offset + amplitude / 2.0
        left = peak
        while left > 0 and y[left] > half:
            left -= 1
        right = peak
        while right < y.size - 1 and y[right] > half:
            right += 1
        half_width = max((x[right] - x[left]) / 2.0, float(np.median(np.diff(x))))
        omega = half_width / LINESHAPE_HALF_WIDTH
        return {"omega": omega, "t_pulse": math.pi / omega, "delta0": float(x[peak]),
                "amplitude": amplitude, "offset": offset}

    # Fitting

    def _project(self, model: ModelSpec, names: List[str], values: np.ndarray) -> np.ndarray:
        lo = np.array([model.bound(name)[0] for name in names])
        hi = np.array([model.bound(name)[1] for name in names])
        return np.clip(values, lo, hi)

    def _projected_cosine(self, model: ModelSpec, names: List[str], values: np.ndarray, jac: np.ndarray,
                          gradient: np.ndarray, rss: float, rss_floor: float) -> Tuple[float, List[str]]:
        """
        Largest |J_j . r| / (|J_j| |r|) over the parameters free to move

        A parameter sitting at a bound with the gradient pushing it outward is
        skipped and reported as blocked.
        """
        blocked = []
        free = np.ones(len(names), dtype=bool)
        for j, name in enumerate(names):
            lo, hi = model.bound(name)
            if (values[j] <= lo and gradient[j] < 0) or (values[j] >= hi and gradient[j] > 0):
                free[j] = False
                blocked.append(name)
        if rss <= rss_floor or not free.any():
            return 0.0, blocked
        col_norms = np.linalg.norm(jac, axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            cosines = np.where(col_norms > 0, np.abs(gradient) / (col_norms * math.sqrt(rss)), 0.0)
        return float(np.max(cosines[free])), blocked

    def _jacobian(self, model: ModelSpec, names: List[str], values: np.ndarray, x: np.ndarray,
                  f0: np.ndarray, rel_step: float, typical: np.ndarray) -> np.ndarray:
        """Central differences, one-sided at a bound"""
        jac = np.empty((x.size, len(names)))
        for j, name in enumerate(names):
            lo, hi = model.bound(name)
            h = rel_step * max(abs(values[j]), typical[j])
            up, down = values.copy(), values.copy()
            up[j] += h
            down[j] -= h
            if down[j] < lo:
                jac[:, j] = (self._eval_vector(model, names, up, x) - f0) / h
            elif up[j] > hi:
                jac[:, j] = (f0 - self._eval_vector(model, names, down, x)) / h
            else:
                jac[:, j] = (self._eval_vector(model, names, up, x)
                             - self._eval_vector(model, names, down, x)) / (2.0 * h)
        return jac

    def _eval_vector(self, model: ModelSpec, names: List[str], values: np.ndarray, x: np.ndarray) -> np.ndarray:
        params = dict(model.fixed)
        params.update(zip(names, (float(v) for v in values)))
        return np.asarray(self._evaluate(model, params, x), dtype=float)

    def fit_curve(self, model: ModelSpec, x, y, init: Optional[Dict[str, float]] = None,
                  options: Optional[FitOptions] = None) -> FitResult:
        """
        Levenberg-Marquardt least squares

        Args:
            model: model family, fixed parameters and bounds
            x, y: data
            init: start values of the free parameters (heuristic guess if None)
            options: iteration limits, tolerances and damping schedule

        Returns:
            FitResult; singular normal equations or the iteration limit give
            converged=False instead of raising
        """
        opts = options or self.options
        x, y = _as_data(x, y)
        names = model.free_names
        if x.size < len(names) + 1:
            raise InvalidArgumentError(f"need at least {len(names) + 1} points for {len(names)} free parameters")
        if init is None:
            init = self.initial_guess(model, x, y)
        missing = [name for name in names if name not in init]
        if missing:
            raise InvalidArgumentError(f"missing start values: {missing}")
        values = self._project(model, names, np.array([float(init[name]) for name in names]))
        # parameter magnitudes that set the finite-difference step near zero
        typical = np.where(values != 0, np.abs(values), 1.0)

        f = self._eval_vector(model, names, values, x)
        residual = y - f
        rss = float(residual @ residual)
        if not math.isfinite(rss):
            raise NumericError("model is not finite at the start values")
        # residuals below this are rounding noise; the gradient there counts as zero
        rss_floor = (RESIDUAL_FLOOR * float(np.linalg.norm(y))) ** 2
        history = [rss]
        lam = opts.lambda0
        converged, message, cosine = False, "iteration limit reached", math.nan
        blocked: List[str] = []
        small_reduction = False
        iteration = 0

        for iteration in range(1, opts.max_iter + 1):
            jac = self._jacobian(model, names, values, x, f, opts.rel_step, typical)
            gradient = jac.T @ residual
            normal = jac.T @ jac
            cosine, blocked = self._projected_cosine(model, names, values, jac, gradient, rss, rss_floor)
            if cosine <= opts.gtol:
                converged, message = True, "gradient orthogonal to residual"
                break
            if small_reduction and cosine <= opts.cosine_tol:
                converged, message = True, "relative reduction below ftol"
                break
            small_reduction = False

            scale = np.diag(normal).copy()
            accepted = False
            singular = False
            while lam <= LAMBDA_MAX:
                try:
                    step = np.linalg.solve(normal + lam * np.diag(scale), gradient)
                    singular = False
                except np.linalg.LinAlgError:
                    singular = True
                    lam *= opts.lambda_up
                    continue
                trial = self._project(model, names, values + step)
                f_trial = self._eval_vector(model, names, trial, x)
                r_trial = y - f_trial
                rss_trial = float(r_trial @ r_trial)
                if math.isfinite(rss_trial) and rss_trial < rss:
                    accepted = True
                    break
                lam *= opts.lambda_up

            if not accepted:
                converged = not singular and cosine <= opts.cosine_tol
                if singular:
                    message = "singular normal equations at maximum damping"
                elif converged:
                    message = "no further reduction possible"
                else:
                    message = f"no step reduces the residual (gradient cosine {cosine:.3g})"
                break

            decrease = rss - rss_trial
            values, f, residual, rss = trial, f_trial, r_trial, rss_trial
            history.append(rss)
            lam = max(lam / opts.lambda_down, 1e-15)
            # a small reduction only ends the fit once the gradient test passes at the new point
            small_reduction = decrease <= opts.ftol * rss or rss == 0

        params = dict(model.fixed)
        params.update(zip(names, (float(v) for v in values)))
        if model.kind == ModelKind.RAMSEY_EQ4 and "phase" in names:
            params["phase"] = wrap_phase(params["phase"])

        sigmas = {name: 0.0 for name in model.fixed}
        sigmas.update(self._uncertainties(model, names, values, x, f, rss, opts, typical))
        result = FitResult(model.kind, params, sigmas, rss, iteration, converged, message, history, cosine,
                           at_bounds=blocked)
        log = logger.info if converged else logger.warning
        log(f"{model.kind.value} fit: rss={rss:.4g}, {iteration} iterations, {message}")
        return result

    def _uncertainties(self, model: ModelSpec, names: List[str], values: np.ndarray, x: np.ndarray,
                       f: np.ndarray, rss: float, opts: FitOptions,
                       typical: np.ndarray) -> Dict[str, float]:
        dof = x.size - len(names)
        jac = self._jacobian(model, names, values, x, f, opts.rel_step, typical)
        normal = jac.T @ jac
        try:
            covariance = np.linalg.inv(normal)
        except np.linalg.LinAlgError:
            logger.warning("singular covariance; using pseudo-inverse")
            covariance = np.linalg.pinv(normal)
        covariance = covariance * (rss / dof)
        return {name: float(math.sqrt(abs(covariance[j, j]))) for j, name in enumerate(names)}

    def bootstrap_uncertainties(self, model: ModelSpec, x, y, result: FitResult, n_resamples: int = 100,
                                seed: int = 0, options: Optional[FitOptions] = None) -> Dict[str, float]:
        """Residual bootstrap: refit resampled residuals added to the best fit"""
        if n_resamples < 2:
            raise InvalidArgumentError("need at least 2 bootstrap resamples")
        x, y = _as_data(x, y)
        names = model.free_names
        best = self.predict(model, result.params, x)
        residual = y - best
        start = {name: result.params[name] for name in names}

        def one(index: int) -> List[float]:
            rng = rng_stream(seed, 0, StreamPurpose.BOOTSTRAP, offset=index)
            resampled = best + rng.choice(residual, size=residual.size, replace=True)
            fit = self.fit_curve(model, x, resampled, init=start, options=options)
            return [fit.params[name] for name in names]

        samples = np.array(Parallel(n_jobs=settings.N_JOBS, prefer="threads")(
            delayed(one)(index) for index in range(n_resamples)
        ))
        return {name: float(np.std(samples[:, j], ddof=1)) for j, name in enumerate(names)}


# Global instance
fit_engine = FitEngine()


def predict(model: ModelSpec, params: Dict[str, float], x) -> np.ndarray:
    return fit_engine.predict(model, params, x)


def fit_curve(model: ModelSpec, x, y, init: Optional[Dict[str, float]] = None,
              options: Optional[FitOptions] = None) -> FitResult:
    return fit_engine.fit_curve(model, x, y, init, options)


def initial_guess(model: ModelSpec, x, y) -> Dict[str, float]:
    return fit_engine.initial_guess(model, x, y)


def bootstrap_uncertainties(model: ModelSpec, x, y, result: FitResult, n_resamples: int = 100,
                            seed: int = 0, options: Optional[FitOptions] = None) -> Dict[str, float]:
    return fit_engine.bootstrap_uncertainties(model, x, y, result, n_resamples, seed, options)
