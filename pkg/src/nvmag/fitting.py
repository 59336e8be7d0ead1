"""Per-pixel spectral fitting: spatial pre-averaging, a damped least-squares
kernel, four-Lorentzian dip fits and Rabi-trace fits.

The minimizer is a Levenberg-Marquardt loop with multiplicative damping of
the normal-equation diagonal, box constraints handled by projection, and a
strict accept-only-on-decrease rule, so the residual sum of squares is
non-increasing across accepted steps by construction. Frequencies are
handled in MHz internally to keep the normal equations well conditioned.
"""

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import find_peaks

from .errors import (
    BadGuessError,
    NoPeaksError,
    NotConvergedError,
    TooSmallError,
)
from .synth import DipModel, OdmrCube


def fwhm_to_hwhm(gamma_fwhm):
    """Full width at half maximum -> half width, the single conversion point.

    The dip model ``A * g^2 / ((nu - nu0)^2 + g^2)`` uses half widths ``g``;
    reported ODMR linewidths (a few MHz) are interpreted as full widths.
    """
    return np.asarray(gamma_fwhm, dtype=float) / 2.0


def hwhm_to_fwhm(gamma_hwhm):
    """Inverse of :func:`fwhm_to_hwhm`."""
    return np.asarray(gamma_hwhm, dtype=float) * 2.0


def worker_count(requested=None) -> int:
    """Effective parallel worker count, capped by the NV_THREADS env var."""
    cap = os.cpu_count() or 1
    env = os.environ.get("NV_THREADS")
    if env is not None:
        cap = int(env)
        if cap < 1:
            raise ValueError("NV_THREADS must be a positive integer")
    if requested is None:
        return cap
    return max(1, min(int(requested), cap))


# ---------------------------------------------------------------------------
# spatial pre-averaging


def _clamped_box_mean_2d(arr):
    """3x3 mean over the two leading axes with windows clamped at the edges."""
    a = np.asarray(arr, dtype=np.float64)
    h, w = a.shape[:2]
    s = np.zeros((h + 1, w + 1) + a.shape[2:], dtype=np.float64)
    np.cumsum(a, axis=0, out=s[1:, 1:])
    np.cumsum(s[1:, 1:], axis=1, out=s[1:, 1:])

    y = np.arange(h)
    x = np.arange(w)
    y0 = np.maximum(y - 1, 0)
    y1 = np.minimum(y + 1, h - 1) + 1
    x0 = np.maximum(x - 1, 0)
    x1 = np.minimum(x + 1, w - 1) + 1

    total = (
        s[np.ix_(y1, x1)]
        - s[np.ix_(y0, x1)]
        - s[np.ix_(y1, x0)]
        + s[np.ix_(y0, x0)]
    )
    counts = (y1 - y0)[:, None] * (x1 - x0)[None, :]
    return total / counts.reshape(counts.shape + (1,) * (a.ndim - 2))


def moving_average_3x3(cube: OdmrCube) -> OdmrCube:
    """Replace each pixel by the mean of its 3x3 neighbourhood per frequency.

    Edge pixels use the clamped (shrunken) window, so dimensions are
    unchanged but boundary pixels average fewer neighbours.
    """
    if cube.height_px < 3 or cube.width_px < 3:
        raise TooSmallError("image must be at least 3x3 for the moving average")
    smoothed = _clamped_box_mean_2d(cube.contrast)
    return OdmrCube(
        frequencies=cube.frequencies,
        contrast=smoothed.astype(np.float32),
        ref_counts_mean=cube.ref_counts_mean,
        schedule=cube.schedule,
        rng_seed=cube.rng_seed,
    )


# ---------------------------------------------------------------------------
# four-Lorentzian model in internal units (frequency in MHz)
#
# theta = [baseline, A1..A4, g1..g4, nu1..nu4]

N_DIPS = 4
N_PARAMS = 1 + 3 * N_DIPS


def lorentzian_sum(theta, x):
    """Baseline plus four Lorentzian dips; ``x`` and widths in the same unit."""
    theta = np.asarray(theta, dtype=float)
    out = np.full_like(np.asarray(x, dtype=float), theta[0])
    for i in range(N_DIPS):
        a, g, nu = theta[1 + i], theta[5 + i], theta[9 + i]
        out += a * g * g / ((x - nu) ** 2 + g * g)
    return out


def lorentzian_jacobian(theta, x):
    """Analytic Jacobian of :func:`lorentzian_sum`, shape (len(x), 13)."""
    theta = np.asarray(theta, dtype=float)
    x = np.asarray(x, dtype=float)
    jac = np.empty((len(x), N_PARAMS))
    jac[:, 0] = 1.0
    for i in range(N_DIPS):
        a, g, nu = theta[1 + i], theta[5 + i], theta[9 + i]
        dx = x - nu
        denom = dx * dx + g * g
        jac[:, 1 + i] = g * g / denom
        jac[:, 5 + i] = 2.0 * a * g * dx * dx / (denom * denom)
        jac[:, 9 + i] = 2.0 * a * g * g * dx / (denom * denom)
    return jac


# ---------------------------------------------------------------------------
# damped least-squares kernel


def levenberg_marquardt(
    fun,
    jac,
    theta0,
    lower,
    upper,
    max_iter=200,
    rss_tol=1e-10,
    step_tol=1e-8,
    damping0=1e-3,
):
    """Minimize ``sum(fun(theta)^2)`` subject to box bounds.

    ``fun`` returns the residual vector, ``jac`` its Jacobian. Steps solve
    the damped normal equations; a proposed step is accepted only if it
    strictly decreases the residual sum of squares, otherwise the damping is
    raised and the step retried. Convergence: relative rss change below
    ``rss_tol`` or relative parameter step below ``step_tol``.

    Returns ``(theta, rss, converged, n_iter, rss_history)`` where
    ``rss_history`` lists the rss after every accepted step (non-increasing).
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    theta = np.clip(np.asarray(theta0, dtype=float), lower, upper)
    if not np.all(np.isfinite(theta)):
        raise BadGuessError("starting parameters are not finite")

    r = fun(theta)
    if not np.all(np.isfinite(r)):
        raise BadGuessError("residual is not finite at the starting point")
    rss = float(r @ r)
    history = [rss]

    j = jac(theta)
    h = j.T @ j
    g = j.T @ r
    # lam is dimensionless: it scales the diagonal of the normal equations
    lam = damping0
    grow = 2.0
    converged = False
    n_iter = 0

    for n_iter in range(1, max_iter + 1):
        # freeze parameters pinned at a bound with an outward gradient, so
        # they stop poisoning the step prediction (active-set reduction)
        free = ~(((theta <= lower) & (g > 0)) | ((theta >= upper) & (g < 0)))
        if not np.any(free):
            converged = True
            break
        hf = h[np.ix_(free, free)]
        dscale = np.maximum(np.diag(hf), 1e-12 * np.max(np.diag(hf)) + 1e-300)
        try:
            delta_free = np.linalg.solve(hf + lam * np.diag(dscale), -g[free])
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        delta = np.zeros_like(theta)
        delta[free] = delta_free
        theta_new = np.clip(theta + delta, lower, upper)
        step = theta_new - theta
        if np.linalg.norm(step) <= step_tol * (np.linalg.norm(theta) + step_tol):
            converged = True
            break

        r_new = fun(theta_new)
        rss_new = float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
        if rss_new < rss:
            predicted = float(step[free] @ (lam * dscale * step[free] - g[free]))
            # clamp: a vanishing predicted reduction would overflow the cube
            rho = min((rss - rss_new) / max(predicted, 1e-300), 1e6)
            lam *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
            grow = 2.0
            prev = rss
            theta, r, rss = theta_new, r_new, rss_new
            history.append(rss)
            if abs(prev - rss) <= rss_tol * max(prev, 1e-300):
                converged = True
                break
            j = jac(theta)
            h = j.T @ j
            g = j.T @ r
        else:
            lam *= grow
            grow *= 2.0
            if lam > 1e30:
                break

    return theta, rss, converged, n_iter, history


# ---------------------------------------------------------------------------
# spectrum fitting


@dataclass
class SpectrumFit:
    """Result of a four-Lorentzian fit (amplitudes dimensionless, Hz widths)."""

    amplitudes: np.ndarray  # (4,)
    gamma_hwhm: np.ndarray  # (4,) Hz
    nu: np.ndarray  # (4,) Hz
    baseline: float
    rss: float
    converged: bool
    n_iter: int
    rss_history: list = field(default_factory=list)


def _theta_from_guess(guess: DipModel, baseline):
    return np.concatenate(
        [
            [baseline],
            guess.amplitudes,
            guess.linewidths_hwhm * 1e-6,
            guess.frequencies * 1e-6,
        ]
    )


def _spectrum_bounds(x_mhz):
    lower = np.empty(N_PARAMS)
    upper = np.empty(N_PARAMS)
    lower[0], upper[0] = -1.0, 1.0
    lower[1:5], upper[1:5] = 0.0, 1.0
    lower[5:9], upper[5:9] = 0.2, 30.0
    lower[9:13], upper[9:13] = x_mhz.min() - 20.0, x_mhz.max() + 20.0
    return lower, upper


def fit_four_lorentzians(
    freqs,
    contrast,
    guess: DipModel,
    baseline_guess=0.0,
    max_iter=200,
    track_history=False,
) -> SpectrumFit:
    """Least-squares fit of baseline + four Lorentzian dips to one spectrum.

    Bounds: amplitudes in [0, 1], half widths in [0.2, 30] MHz, resonances
    within the sampled range +- 20 MHz. A non-converged fit returns the best
    parameters found with ``converged=False`` rather than raising.
    """
    x = np.asarray(freqs, dtype=float) * 1e-6
    y = np.asarray(contrast, dtype=float)
    if len(x) < N_PARAMS:
        raise ValueError(f"need at least {N_PARAMS} samples to fit {N_PARAMS} parameters")
    if not np.all(np.isfinite(y)):
        raise BadGuessError("spectrum contains non-finite values")

    theta0 = _theta_from_guess(guess, baseline_guess)
    if not np.all(np.isfinite(theta0)):
        raise BadGuessError("starting parameters are not finite")
    lower, upper = _spectrum_bounds(x)

    theta, rss, converged, n_iter, history = levenberg_marquardt(
        lambda t: lorentzian_sum(t, x) - y,
        lambda t: lorentzian_jacobian(t, x),
        theta0,
        lower,
        upper,
        max_iter=max_iter,
    )
    return SpectrumFit(
        amplitudes=theta[1:5].copy(),
        gamma_hwhm=theta[5:9] * 1e6,
        nu=theta[9:13] * 1e6,
        baseline=float(theta[0]),
        rss=rss,
        converged=converged,
        n_iter=n_iter,
        rss_history=history if track_history else [],
    )


def _running_mean(y, width=5):
    half = width // 2
    n = len(y)
    s = np.concatenate([[0.0], np.cumsum(y, dtype=float)])
    i0 = np.maximum(np.arange(n) - half, 0)
    i1 = np.minimum(np.arange(n) + half, n - 1) + 1
    return (s[i1] - s[i0]) / (i1 - i0)


def estimate_spectral_noise(y) -> float:
    """Robust noise sigma from the median absolute deviation of differences."""
    d = np.diff(np.asarray(y, dtype=float))
    mad = np.median(np.abs(d - np.median(d)))
    return 1.4826 * mad / np.sqrt(2.0)


def initial_guess(freqs, contrast, n_dips=4, min_separation=8e6) -> DipModel:
    """Starting dip parameters from peak picking on a smoothed spectrum.

    The spectrum (positive dip depth) is smoothed with a 5-point running
    mean; the ``n_dips`` deepest local maxima separated by at least
    ``min_separation`` become seeds with the smoothed depth as amplitude and
    a 2.5 MHz half-width. If fewer peaks are found, the remaining dips are
    parked on an evenly spaced candidate grid across the sweep, preferring
    the candidates with the deepest smoothed signal, at half the global
    maximum depth. Raises :class:`NoPeaksError` when the global maximum does
    not exceed three times the noise estimate. Returned dips are sorted by
    frequency.
    """
    x = np.asarray(freqs, dtype=float)
    y = np.asarray(contrast, dtype=float)
    if len(x) < 3 * n_dips:
        raise ValueError("too few samples for an initial guess")
    smooth = _running_mean(y, 5)
    noise = estimate_spectral_noise(y)
    if smooth.max() <= 3.0 * noise:
        raise NoPeaksError("no dip rises above 3x the spectral noise estimate")

    df = np.median(np.diff(x))
    distance = max(1, int(np.ceil(min_separation / df)))
    peaks, props = find_peaks(smooth, distance=distance)
    order = np.argsort(smooth[peaks])[::-1]
    picked = list(peaks[order[:n_dips]])

    positions = list(x[picked])
    amplitudes = list(smooth[picked])
    n_missing = n_dips - len(positions)
    if n_missing > 0:
        span = x.max() - x.min()
        candidates = x.min() + (np.arange(n_dips) + 0.5) * span / n_dips
        depth = np.interp(candidates, x, smooth)
        for idx in np.argsort(depth)[::-1][:n_missing]:
            positions.append(candidates[idx])
            amplitudes.append(0.5 * smooth.max())

    positions = np.asarray(positions)
    amplitudes = np.maximum(np.asarray(amplitudes), 0.0)
    order = np.argsort(positions)
    return DipModel(
        amplitudes=amplitudes[order],
        linewidths_hwhm=np.full(n_dips, 2.5e6),
        frequencies=positions[order],
    )


def fit_quality(fit: SpectrumFit, freqs, contrast) -> dict:
    """Goodness-of-fit: standard r^2 and amplitude-to-residual-noise per dip."""
    x = np.asarray(freqs, dtype=float) * 1e-6
    y = np.asarray(contrast, dtype=float)
    theta = np.concatenate([[fit.baseline], fit.amplitudes, fit.gamma_hwhm * 1e-6, fit.nu * 1e-6])
    resid = y - lorentzian_sum(theta, x)
    rss = float(resid @ resid)
    tss = float(np.sum((y - y.mean()) ** 2))
    r_squared = 1.0 - rss / max(tss, 1e-300)
    sigma = float(np.std(resid))
    with np.errstate(divide="ignore"):
        snr = fit.amplitudes / sigma if sigma > 0 else np.full(4, np.inf)
    return {"r_squared": r_squared, "per_dip_snr": snr}


# ---------------------------------------------------------------------------
# Rabi-trace fitting
#
# theta = [f0, contrast, f_rabi (MHz), decay rate (1/us)]


@dataclass
class RabiFit:
    t_pi: float  # s
    rabi_freq: float  # Hz
    decay: float  # s (inf when no damping is resolved)
    contrast: float
    rss: float


def _rabi_model(theta, tau_us):
    f0, c, f_mhz, rate = theta
    phase = 2.0 * np.pi * f_mhz * tau_us
    return f0 * (1.0 - 0.5 * c * (1.0 - np.cos(phase) * np.exp(-rate * tau_us)))


def _rabi_jacobian(theta, tau_us):
    f0, c, f_mhz, rate = theta
    phase = 2.0 * np.pi * f_mhz * tau_us
    env = np.exp(-rate * tau_us)
    cos_e = np.cos(phase) * env
    jac = np.empty((len(tau_us), 4))
    jac[:, 0] = 1.0 - 0.5 * c * (1.0 - cos_e)
    jac[:, 1] = -0.5 * f0 * (1.0 - cos_e)
    jac[:, 2] = -0.5 * f0 * c * np.sin(phase) * env * 2.0 * np.pi * tau_us
    jac[:, 3] = -0.5 * f0 * c * cos_e * tau_us
    return jac


def fit_rabi(durations, fluorescence, guess_freq) -> RabiFit:
    """Fit the damped-cosine Rabi model; ``t_pi = 1/(2 * rabi_freq)``.

    ``guess_freq`` (Hz) seeds the oscillation frequency. Raises
    :class:`NotConvergedError` if the minimizer stalls.
    """
    tau_us = np.asarray(durations, dtype=float) * 1e6
    y = np.asarray(fluorescence, dtype=float)
    if len(tau_us) < 8:
        raise ValueError("need at least 8 samples to fit a Rabi trace")
    span = tau_us.max() - tau_us.min()
    if span * guess_freq * 1e-6 < 1.0:
        raise ValueError("durations must span at least one oscillation period")

    f0 = float(y.max())
    c0 = min(max(1.0 - y.min() / max(f0, 1e-300), 1e-3), 1.0)
    theta0 = np.array([f0, c0, guess_freq * 1e-6, 0.1 / max(span, 1e-6)])
    lower = np.array([1e-300, 0.0, guess_freq * 1e-6 / 10.0, 0.0])
    upper = np.array([np.inf, 1.0, guess_freq * 1e-6 * 10.0, 1e3])

    theta, rss, converged, _, _ = levenberg_marquardt(
        lambda t: _rabi_model(t, tau_us) - y,
        lambda t: _rabi_jacobian(t, tau_us),
        theta0,
        lower,
        upper,
    )
    if not converged:
        raise NotConvergedError("Rabi fit did not converge")
    f_rabi = theta[2] * 1e6
    rate = theta[3] * 1e6
    return RabiFit(
        t_pi=1.0 / (2.0 * f_rabi),
        rabi_freq=f_rabi,
        decay=np.inf if rate == 0 else 1.0 / rate,
        contrast=float(theta[1]),
        rss=rss,
    )


# ---------------------------------------------------------------------------
# whole-cube fitting with row-wise warm starts


def _fit_row(args):
    x_mhz, row, base_theta, lower, upper, max_iter = args
    w = row.shape[0]
    params = np.full((w, N_PARAMS), np.nan)
    rss = np.full(w, np.nan)
    converged = np.zeros(w, dtype=bool)
    iters = np.zeros(w, dtype=int)
    warm = base_theta

    for ix in range(w):
        y = row[ix].astype(float)
        if not np.all(np.isfinite(y)):
            continue
        theta, r, ok, it, _ = levenberg_marquardt(
            lambda t: lorentzian_sum(t, x_mhz) - y,
            lambda t: lorentzian_jacobian(t, x_mhz),
            warm,
            lower,
            upper,
            max_iter=max_iter,
        )
        if not ok:
            # cold restart from this pixel's own peak picking
            try:
                guess = initial_guess(x_mhz * 1e6, y)
                cold = _theta_from_guess(guess, 0.0)
            except NoPeaksError:
                cold = base_theta
            theta2, r2, ok2, it2, _ = levenberg_marquardt(
                lambda t: lorentzian_sum(t, x_mhz) - y,
                lambda t: lorentzian_jacobian(t, x_mhz),
                cold,
                lower,
                upper,
                max_iter=max_iter,
            )
            if (ok2 and not ok) or (ok2 == ok and r2 < r):
                theta, r, ok, it = theta2, r2, ok2, it + it2
        params[ix] = theta
        rss[ix] = r
        converged[ix] = ok
        iters[ix] = it
        if ok:
            warm = theta  # warm-start chain, reset at each row start
    return params, rss, converged, iters


def fit_cube_pixels(cube: OdmrCube, base_guess: DipModel, baseline_guess=0.0, max_iter=200, workers=None):
    """Fit every pixel spectrum of a cube, row by row.

    Within a row the previous converged parameters warm-start the next
    pixel, with a cold restart (per-pixel peak picking) as fallback. Rows
    are independent, so results are identical for any worker count; workers
    are capped by NV_THREADS.

    Returns a dict of per-pixel arrays: ``amplitudes``/``gamma_hwhm``/``nu``
    (H, W, 4), ``baseline``/``rss`` (H, W), ``converged`` (H, W) bool,
    ``n_iter`` (H, W) int.
    """
    x_mhz = cube.frequencies * 1e-6
    lower, upper = _spectrum_bounds(x_mhz)
    base_theta = _theta_from_guess(base_guess, baseline_guess)
    h, w = cube.height_px, cube.width_px

    jobs = [
        (x_mhz, cube.contrast[iy], base_theta, lower, upper, max_iter)
        for iy in range(h)
    ]
    n_workers = worker_count(workers)
    if n_workers > 1 and h > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_fit_row, jobs, chunksize=max(1, h // (4 * n_workers))))
    else:
        results = [_fit_row(job) for job in jobs]

    params = np.stack([r[0] for r in results])  # (H, W, 13)
    return {
        "amplitudes": params[:, :, 1:5],
        "gamma_hwhm": params[:, :, 5:9] * 1e6,
        "nu": params[:, :, 9:13] * 1e6,
        "baseline": params[:, :, 0],
        "rss": np.stack([r[1] for r in results]),
        "converged": np.stack([r[2] for r in results]),
        "n_iter": np.stack([r[3] for r in results]),
    }
