"""EM re-estimation of cue models over a discrete comb-parameter grid.

The hidden variable of every TF bin is the pair (source, grid candidate),
plus one garbage component.  All likelihood arithmetic is in the log domain.
MESSL, IC-, ER- and ERIC-MESSL differ only in the grid (comb disabled or
not) and in whether the interaural-coherence prior enters the E-step.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import Spectrogram, Waveform, istft
from .mixture import InterauralObservation
from .models import (LOG_2PI, VARIANCE_FLOOR, CombParams, IcMask, SourceCueModel, comb_ipd_model,
                     dump_matrix, garbage_model, gaussian_logpdf)

VARIANTS = ("messl", "ic-messl", "er-messl", "eric-messl")


@dataclass(frozen=True)
class EmConfig:
    variant: str = "eric-messl"
    max_iters: int = 16
    grid_steps_per_dim: int | tuple = 5
    range_s: float | tuple = 0.13e-3
    variance_floor: float = VARIANCE_FLOOR
    ild_var_init: float = 100.0
    ipd_var_init: float = 0.1
    garbage_ild_var_init: float = 400.0
    use_garbage: bool = True
    block_bins: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        for s in np.atleast_1d(self.grid_steps_per_dim):
            if int(s) % 2 == 0:
                raise ValueError("grid steps per dimension must be odd")

    @property
    def uses_comb(self) -> bool:
        return self.variant in ("er-messl", "eric-messl")

    @property
    def uses_ic(self) -> bool:
        return self.variant in ("ic-messl", "eric-messl")

    def to_dict(self) -> dict:
        return {"variant": self.variant, "max_iters": self.max_iters,
                "grid_steps_per_dim": self.grid_steps_per_dim, "range_s": self.range_s,
                "variance_floor": self.variance_floor, "ild_var_init": self.ild_var_init,
                "ipd_var_init": self.ipd_var_init, "garbage_ild_var_init": self.garbage_ild_var_init,
                "use_garbage": self.use_garbage, "seed": self.seed}


@dataclass
class SourceInit:
    """Initial comb parameters and ILD prior for one source."""

    comb: CombParams
    ild_mean_db: np.ndarray | None = None
    ild_var: float | None = None


@dataclass
class ParamGrid:
    candidates: list  # per source: tuple of CombParams

    @property
    def sizes(self) -> list[int]:
        return [len(c) for c in self.candidates]


@dataclass
class SoftMask:
    values: np.ndarray
    source_id: int
    is_garbage: bool = False

    @property
    def emitting(self) -> bool:
        return not self.is_garbage


@dataclass
class EmState:
    beta: np.ndarray  # flat over components: source 0 candidates, source 1 ..., garbage
    models: list  # SourceCueModel per real source, then garbage if used
    loglik_trace: list = field(default_factory=list)
    norm_error_trace: list = field(default_factory=list)
    bin_count: int = 0
    zero_likelihood_bins: int = 0
    empty_components: int = 0
    occupation: np.ndarray | None = None
    masks: np.ndarray | None = None

    @property
    def sizes(self) -> list[int]:
        return [m.n_candidates for m in self.models]

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)])

    def source_beta(self, l: int) -> np.ndarray:
        o = self.offsets
        return self.beta[o[l]:o[l + 1]]

    def best_candidates(self) -> list:
        return [m.candidates[int(np.argmax(self.source_beta(l)))]
                for l, m in enumerate(self.models) if not m.is_garbage]

    def diagnostics(self) -> dict:
        real = [m for m in self.models if not m.is_garbage]
        return {
            "loglik_trace": [float(v) for v in self.loglik_trace],
            "posterior_norm_error": [float(v) for v in self.norm_error_trace],
            "beta": [self.source_beta(l).tolist() for l in range(len(self.models))],
            "best_candidate": [c.to_dict() for c in self.best_candidates()],
            "best_candidate_index": [int(np.argmax(self.source_beta(l))) for l in range(len(real))],
            "bin_count": int(self.bin_count),
            "zero_likelihood_bins": int(self.zero_likelihood_bins),
            "empty_components": int(self.empty_components),
        }


def build_param_grid(inits, range_s=0.13e-3, steps=5, comb: bool = True) -> ParamGrid:
    """Cartesian grid of delay candidates around each initial CombParams.

    ``range_s`` and ``steps`` may be scalars or (n_ds, n_df, n_st) triples.
    With ``comb=False`` only n_ds varies and reflection amplitudes are zeroed.
    """
    ranges = np.broadcast_to(np.asarray(range_s, float), (3,))
    steps = np.broadcast_to(np.asarray(steps, int), (3,))
    if np.any(steps % 2 == 0) or np.any(steps < 1):
        raise ValueError("grid steps must be odd and positive")
    grids = []
    for init in inits:
        c0 = init.comb if isinstance(init, SourceInit) else init
        axis = lambda v, r, s: v + r * np.linspace(-1.0, 1.0, s) if s > 1 else np.array([v])
        ds = axis(c0.n_ds_s, ranges[0], steps[0])
        if not comb:
            grids.append(tuple(CombParams(float(d), c0.n_df_s, c0.n_st_s, c0.p01, 0.0, c0.p02, 0.0)
                               for d in ds))
            continue
        df = np.maximum(axis(c0.n_df_s, ranges[1], steps[1]), 0.0)
        st = axis(c0.n_st_s, ranges[2], steps[2])
        grids.append(tuple(CombParams(float(a), float(b), float(c), c0.p01, c0.p11, c0.p02, c0.p12)
                           for a, b, c in itertools.product(ds, df, st)))
    return ParamGrid(grids)


def init_state(obs: InterauralObservation, inits, config: EmConfig, grid: ParamGrid | None = None) -> EmState:
    inits = [i if isinstance(i, SourceInit) else SourceInit(i) for i in inits]
    if grid is None:
        grid = build_param_grid(inits, config.range_s, config.grid_steps_per_dim, config.uses_comb)
    n_bins = obs.shape[1]
    models = []
    for init, cands in zip(inits, grid.candidates):
        if not cands:
            raise ValueError("parameter grid is empty")
        ild = np.zeros(n_bins) if init.ild_mean_db is None else np.asarray(init.ild_mean_db, float).copy()
        var = config.ild_var_init if init.ild_var is None else init.ild_var
        k = len(cands)
        models.append(SourceCueModel(ild, np.full(n_bins, float(var)), np.zeros((k, n_bins)),
                                     np.full((k, n_bins), float(config.ipd_var_init)), tuple(cands)))
    if config.use_garbage:
        models.append(garbage_model(obs.frequencies, config.garbage_ild_var_init))
    n_classes = len(models)
    beta = np.concatenate([np.full(m.n_candidates, 1.0 / (n_classes * m.n_candidates)) for m in models])
    return EmState(beta, models)


class _Context:
    """Read-only per-run data: observation, model phase tables, log priors."""

    def __init__(self, obs: InterauralObservation, models, ic: IcMask | None):
        self.alpha = obs.ild_db
        self.phi = obs.ipd_rad
        self.active = obs.active if obs.active is not None else np.ones(obs.shape, bool)
        freqs = obs.frequencies
        self.phase_tables = []
        for m in models:
            if m.is_garbage:
                self.phase_tables.append(None)
                continue
            table = np.stack([comb_ipd_model(c, freqs) for c in m.candidates])
            # bins where the comb model is undefined compare against zero phase
            self.phase_tables.append(np.nan_to_num(table, nan=0.0))
        self.log_prior_real = self.log_prior_garbage = None
        if ic is not None:
            if ic.gamma.shape != obs.shape:
                raise ValueError("coherence mask shape does not match the observation")
            with np.errstate(divide="ignore"):
                self.log_prior_real = np.log(ic.gamma)
                self.log_prior_garbage = np.log(ic.garbage_prior)
        self._residuals = {}

    def residual(self, l: int, fsl: slice, cache: bool) -> np.ndarray:
        key = (l, fsl.start, fsl.stop)
        if key in self._residuals:
            return self._residuals[key]
        model = self.phase_tables[l][:, fsl]
        r = np.mod(self.phi[None, :, fsl] - model[:, None, :] + np.pi, 2.0 * np.pi) - np.pi
        if cache:
            self._residuals[key] = r
        return r


def _block_log_joint(ctx: _Context, models, log_beta, offsets, fsl, cache):
    alpha = ctx.alpha[:, fsl]
    act = ctx.active[:, fsl]
    n_t, n_f = alpha.shape
    lj = np.empty((offsets[-1], n_t, n_f))
    residuals = []
    for l, m in enumerate(models):
        ild_ll = gaussian_logpdf(alpha, m.ild_mean[fsl], m.ild_var[fsl])
        part = lj[offsets[l]:offsets[l + 1]]
        if m.is_garbage:
            part[0] = np.where(act, ild_ll - LOG_2PI, 0.0)
            residuals.append(None)
        else:
            res = ctx.residual(l, fsl, cache)
            var = m.ipd_var[:, fsl]
            # Gaussian log-density of the residual, built in place
            np.subtract(res, m.ipd_mean[:, None, fsl], out=part)
            np.multiply(part, part, out=part)
            part *= (-0.5 / var)[:, None, :]
            part += (-0.5 * (LOG_2PI + np.log(var)))[:, None, :]
            part += ild_ll[None]
            part *= act[None]
            residuals.append(res)
        part += log_beta[offsets[l]:offsets[l + 1], None, None]
        if ctx.log_prior_real is not None:
            prior = ctx.log_prior_garbage if m.is_garbage else ctx.log_prior_real
            part += prior[None, :, fsl]
    return lj, residuals


def _block_posterior(lj: np.ndarray):
    """Normalise over components per bin, reusing ``lj``; returns (nu, log normaliser, degenerate bins)."""
    mx = lj.max(axis=0)
    degenerate = ~np.isfinite(mx)
    mx_safe = np.where(degenerate, 0.0, mx)
    nu = lj
    nu -= mx_safe[None]
    np.exp(nu, out=nu)
    total = nu.sum(axis=0)
    degenerate |= ~(total > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        nu /= total[None]
        logz = mx_safe + np.log(total)
    if degenerate.any():
        nu[:, degenerate] = 1.0 / nu.shape[0]
        logz[degenerate] = 0.0
    return nu, logz, degenerate


def _weighted_moments(weights, values, total, old_mean, old_var, floor):
    """Weighted mean/variance along axis -2 (frames), keeping old values where mass is zero."""
    ok = total > 0
    safe = np.where(ok, total, 1.0)
    mean = np.where(ok, np.einsum("...tf,...tf->...f", weights, values) / safe, old_mean)
    dev = values - mean[..., None, :]
    np.multiply(dev, dev, out=dev)
    var = np.where(ok, np.einsum("...tf,...tf->...f", weights, dev) / safe, old_var)
    return mean, np.maximum(var, floor), ~ok


def _block_m_step(ctx, models, new_models, nu, residuals, offsets, fsl, floor):
    """Update per-frequency parameters for bins ``fsl``; returns occupation mass per component.

    ``nu`` is zeroed on silent bins in place.
    """
    alpha = ctx.alpha[:, fsl]
    nu *= ctx.active[None, :, fsl]
    mass = np.empty(offsets[-1])
    empty = 0
    for l, (m, new) in enumerate(zip(models, new_models)):
        w = nu[offsets[l]:offsets[l + 1]]
        src_w = w.sum(axis=0)
        total = src_w.sum(axis=0)
        mu, var, dead = _weighted_moments(src_w, alpha, total, m.ild_mean[fsl], m.ild_var[fsl], floor)
        new.ild_mean[fsl], new.ild_var[fsl] = mu, var
        empty += int(dead.sum())
        tot_c = w.sum(axis=1)
        if not m.is_garbage:
            mu, var, dead = _weighted_moments(w, residuals[l], tot_c, m.ipd_mean[:, fsl],
                                              m.ipd_var[:, fsl], floor)
            new.ipd_mean[:, fsl], new.ipd_var[:, fsl] = mu, var
            empty += int(dead.sum())
        mass[offsets[l]:offsets[l + 1]] = tot_c.sum(axis=1)
    return mass, empty


def _blocks(n_bins: int, size: int):
    return [slice(s, min(n_bins, s + size)) for s in range(0, n_bins, size)]


def _check_ic(config: EmConfig, ic: IcMask | None) -> IcMask | None:
    if config.uses_ic:
        if ic is None:
            raise ValueError(f"variant {config.variant} needs a precomputed coherence mask")
        return ic
    return None


def e_step(obs: InterauralObservation, state: EmState, ic: IcMask | None = None) -> np.ndarray:
    """Posterior occupation over all components, shape (components, frames, bins)."""
    ctx = _Context(obs, state.models, ic)
    with np.errstate(divide="ignore"):
        log_beta = np.log(state.beta)
    lj, _ = _block_log_joint(ctx, state.models, log_beta, state.offsets, slice(0, obs.shape[1]), False)
    nu, _, _ = _block_posterior(lj)
    return nu


def m_step(obs: InterauralObservation, nu: np.ndarray, state: EmState, floor: float = VARIANCE_FLOOR) -> EmState:
    """Weighted-moment updates of ILD/IPD parameters and memberships from ``nu``."""
    ctx = _Context(obs, state.models, None)
    fsl = slice(0, obs.shape[1])
    residuals = [None if m.is_garbage else ctx.residual(l, fsl, False) for l, m in enumerate(state.models)]
    new_models = [m.copy() for m in state.models]
    nu = np.array(nu, dtype=float)
    mass, empty = _block_m_step(ctx, state.models, new_models, nu, residuals, state.offsets, fsl, floor)
    n_active = int(ctx.active.sum())
    return EmState(mass / n_active, new_models, list(state.loglik_trace), list(state.norm_error_trace),
                   n_active, state.zero_likelihood_bins, empty)


def run_em(obs: InterauralObservation, inits, config: EmConfig = EmConfig(), ic: IcMask | None = None,
           grid: ParamGrid | None = None, cache_residuals: bool = True):
    """Alternate E and M steps for ``config.max_iters`` iterations.

    Returns (masks, state): one SoftMask per real source followed by the
    non-emitting garbage mask; masks come from the last E-step.
    """
    ic = _check_ic(config, ic)
    state = init_state(obs, inits, config, grid)
    ctx = _Context(obs, state.models, ic)
    offsets = state.offsets
    n_t, n_f = obs.shape
    n_active = int(ctx.active.sum())
    if n_active == 0:
        raise ValueError("observation has no active time-frequency bins")
    n_classes = len(state.models)
    masks = np.empty((n_classes, n_t, n_f))
    blocks = _blocks(n_f, config.block_bins)
    for it in range(config.max_iters):
        with np.errstate(divide="ignore"):
            log_beta = np.log(state.beta)
        new_models = [m.copy() for m in state.models]
        mass = np.zeros(offsets[-1])
        loglik = 0.0
        norm_err = 0.0
        zero_bins = empty = 0
        for fsl in blocks:
            lj, residuals = _block_log_joint(ctx, state.models, log_beta, offsets, fsl, cache_residuals)
            nu, logz, degenerate = _block_posterior(lj)
            del lj
            act = ctx.active[:, fsl]
            loglik += float(logz[act & ~degenerate].sum())
            zero_bins += int((degenerate & act).sum())
            err = np.abs(nu.sum(axis=0) - 1.0)[act]
            norm_err = max(norm_err, float(err.max()) if err.size else 0.0)
            for l in range(n_classes):
                masks[l, :, fsl] = nu[offsets[l]:offsets[l + 1]].sum(axis=0)
            m_mass, m_empty = _block_m_step(ctx, state.models, new_models, nu, residuals, offsets, fsl,
                                            config.variance_floor)
            mass += m_mass
            empty += m_empty
        if not np.isfinite(loglik):
            raise FloatingPointError(f"non-finite log-likelihood at iteration {it}")
        state.loglik_trace.append(loglik)
        state.norm_error_trace.append(norm_err)
        state.zero_likelihood_bins = zero_bins
        state.empty_components = empty
        state.models = new_models
        state.beta = mass / n_active
        state.bin_count = n_active
    state.masks = masks
    out = [SoftMask(masks[l], l, state.models[l].is_garbage) for l in range(n_classes)]
    return out, state


def apply_masks(left_spec: Spectrogram, right_spec: Spectrogram, masks) -> list[tuple[Waveform, Waveform]]:
    """Mask both ear spectrograms and resynthesise; one stereo pair per mask."""
    out = []
    for mask in masks:
        values = mask.values if isinstance(mask, SoftMask) else np.asarray(mask)
        if values.shape != left_spec.bins.shape or values.shape != right_spec.bins.shape:
            raise ValueError("mask dimensions do not match the spectrograms")
        out.append((istft(left_spec.with_bins(left_spec.bins * values)),
                    istft(right_spec.with_bins(right_spec.bins * values))))
    return out


def export_mask(mask: SoftMask, path) -> Path:
    return dump_matrix(mask.values, path, {"source_id": mask.source_id, "garbage": mask.is_garbage})


def write_pgm(values: np.ndarray, path) -> None:
    """8-bit binary PGM, frequency increasing upwards, time to the right."""
    img = np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8).T[::-1]
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def write_diagnostics(state: EmState, path, extra: dict | None = None) -> None:
    data = state.diagnostics()
    if extra:
        data.update(extra)
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True))
