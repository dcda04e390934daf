"""The GP adapter: irregular series in, fixed-length Gaussian representation out.

``adapt_forward`` returns either the posterior mean at the reference times
(IMP) or S reparameterized samples ``mean + cov^{1/2} xi_s`` (UAC), in exact
or SKI mode. ``adapt_backward`` pulls a gradient on those outputs back to
the GP parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import InvalidArgumentError, InvalidStateError, NumericBreakdownError
from .exact_gp import ExactPosterior, TimeSeries
from .kernel import GpParams
from .krylov import LanczosRecord, block_lanczos_sqrt, lanczos_backprop
from .ski import SkiOperator, ski_cov_matvec, ski_cov_matvec_grad, ski_mean_grad, ski_posterior_mean

__all__ = [
    "AdapterConfig",
    "AdapterOutput",
    "adapt_forward",
    "adapt_backward",
    "posterior_context",
    "series_rng",
]

MODES = ("exact", "ski")
FRAMEWORKS = ("uac", "imp")


@dataclass(frozen=True)
class AdapterConfig:
    """Reference grid and approximation knobs.

    The d reference times are evenly spaced over ``[0, T]``.
    """

    T: float = 1.0
    d: int = 254
    m: int = 256
    k: int = 5
    S: int = 10
    mode: str = "ski"
    framework: str = "uac"
    seed: int = 0
    cg_tol: float = 1e-10

    def __post_init__(self):
        if self.d < 1 or self.m < 4 or self.k < 1 or self.S < 1:
            raise InvalidArgumentError("need d >= 1, m >= 4, k >= 1 and S >= 1")
        if not self.T > 0:
            raise InvalidArgumentError("T must be positive")
        if self.mode not in MODES:
            raise InvalidArgumentError(f"mode must be one of {MODES}")
        if self.framework not in FRAMEWORKS:
            raise InvalidArgumentError(f"framework must be one of {FRAMEWORKS}")

    @property
    def ref_times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.d)

    def replace(self, **kwargs) -> "AdapterConfig":
        values = dict(self.__dict__)
        values.update(kwargs)
        return AdapterConfig(**values)


def series_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, series index)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def posterior_context(series: TimeSeries, params: GpParams, cfg: AdapterConfig):
    """Exact factorization or SKI operator for one series."""
    ref = cfg.ref_times
    if cfg.mode == "exact":
        return ExactPosterior(series, ref, params)
    return SkiOperator(series, ref, cfg.m, params, cg_tol=cfg.cg_tol)


@dataclass
class _Tape:
    context: Union[ExactPosterior, SkiOperator]
    noise: Optional[np.ndarray] = None
    record: Optional[LanczosRecord] = None
    consumed: bool = False


@dataclass
class AdapterOutput:
    """Adapter result plus the tape needed for the reverse pass.

    ``samples`` is d x S under UAC; ``mean`` is always set.
    """

    framework: str
    mean: np.ndarray
    samples: Optional[np.ndarray] = None
    tape: Optional[_Tape] = field(default=None, repr=False)

    @property
    def values(self) -> np.ndarray:
        """What the classifier consumes: d x S samples, or the d-vector mean."""
        return self.samples if self.framework == "uac" else self.mean


def _with_context(exc: NumericBreakdownError, series: TimeSeries) -> NumericBreakdownError:
    diag = dict(exc.diagnostics)
    diag.update(n_obs=len(series), label=series.label, t_range=(float(series.times[0]), float(series.times[-1])))
    return NumericBreakdownError(f"{exc} (series with {len(series)} observations)", **diag)


def adapt_forward(
    series: TimeSeries,
    params: GpParams,
    cfg: AdapterConfig,
    noise: Optional[np.ndarray] = None,
) -> AdapterOutput:
    """Map one series to its IMP mean or UAC samples.

    Under UAC, ``noise`` (d x S standard normal) may be supplied; otherwise
    it is drawn from ``cfg.seed``.
    """
    try:
        return _forward(series, params, cfg, noise)
    except NumericBreakdownError as exc:
        raise _with_context(exc, series) from exc


def _forward(series, params, cfg, noise):
    ctx = posterior_context(series, params, cfg)
    if cfg.mode == "exact":
        mean = ctx.mean
    else:
        mean = ski_posterior_mean(ctx)
    if cfg.framework == "imp":
        return AdapterOutput("imp", mean, tape=_Tape(ctx))

    if noise is None:
        noise = np.random.default_rng(cfg.seed).standard_normal((cfg.d, cfg.S))
    noise = np.asarray(noise, dtype=float)
    if noise.ndim == 1:
        noise = noise[:, None]
    if noise.shape[0] != cfg.d:
        raise InvalidArgumentError(f"noise must have {cfg.d} rows, got {noise.shape[0]}")

    if cfg.mode == "exact":
        samples = ctx.sample(noise)
        return AdapterOutput("uac", mean, samples, _Tape(ctx, noise))

    if not np.any(noise):
        # zero noise has no Krylov direction; the sample is the mean
        return AdapterOutput("uac", mean, np.repeat(mean[:, None], noise.shape[1], axis=1), _Tape(ctx, noise))
    root_xi, record = block_lanczos_sqrt(lambda q: ski_cov_matvec(ctx, None, q), noise, cfg.k)
    return AdapterOutput("uac", mean, mean[:, None] + root_xi, _Tape(ctx, noise, record))


def adapt_backward(output: AdapterOutput, upstream: np.ndarray) -> np.ndarray:
    """Gradient in (alpha, beta, gamma) of a loss whose gradient on
    ``output.values`` is ``upstream``.

    ``upstream`` must already include any 1/S Monte Carlo averaging from the
    loss. The tape is consumed.
    """
    tape = output.tape
    if tape is None or tape.consumed:
        raise InvalidStateError("adapter tape is missing or already consumed")
    upstream = np.asarray(upstream, dtype=float)
    ctx = tape.context
    exact = isinstance(ctx, ExactPosterior)
    try:
        if output.framework == "imp":
            g = upstream.reshape(-1) if upstream.ndim == 1 or upstream.shape[1] == 1 else upstream.sum(axis=1)
            grad = ctx.vjp(g, None) if exact else ski_mean_grad(ctx, None, g)
        else:
            if upstream.ndim == 1:
                upstream = upstream[:, None]
            if upstream.shape != output.samples.shape:
                raise InvalidArgumentError("upstream must match the samples shape")
            mean_bar = upstream.sum(axis=1)
            if exact:
                cov_bar = ctx.sqrt.sylvester_outer(upstream, tape.noise)
                grad = ctx.vjp(mean_bar, cov_bar)
            else:
                grad = ski_mean_grad(ctx, None, mean_bar)
                if tape.record is not None:
                    grad = grad + lanczos_backprop(
                        tape.record,
                        lambda q, q_bar: ski_cov_matvec_grad(ctx, None, q, q_bar),
                        upstream,
                    )
    finally:
        tape.consumed = True
    return grad
