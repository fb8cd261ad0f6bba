"""
Monte Carlo checks of how attention propagates value noise and misalignment.

All estimators draw trials in fixed-size chunks.  A chunk's generator is
derived from ``(seed, experiment tag, chunk index)``, so the estimates are
identical whether chunks run in this process or across a process pool.
Value projections act on column vectors, ``W_v(x) = W_v @ x``.
"""
from __future__ import annotations

import dataclasses
import enum
import logging
import math
import pathlib
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Optional, Sequence

import numpy as np

from . import constants
from .util import make_rng, orthogonal_matrix, write_csv

logger = logging.getLogger(__name__)

SNR_VS_SIGMA_HEADER = ("d", "sigma", "snr_empirical", "snr_theoretical", "n_trials")
SNR_VS_D_HEADER = ("d", "mean_shift_sq", "snr_empirical", "n_trials")
GAMMA_VS_D_HEADER = (
    "d", "mean_shift_sq", "gamma_empirical", "gamma_theoretical", "n_trials",
)
LEMMA1_HEADER = ("d", "n", "sigma", "weights_mode", "n_trials", "violations")
LEMMA2_HEADER = (
    "d", "n", "sigma", "weights_mode",
    "error_empirical", "error_theoretical", "rel_error", "n_trials",
)
MHA_HEADER = ("quantity", "d", "heads", "empirical", "theoretical", "rel_error", "n_trials")


class WeightsMode(str, enum.Enum):
    UNIFORM = "uniform"
    PEAKED = "peaked"
    RANDOM_SOFTMAX = "random_softmax"


class InputDistribution(str, enum.Enum):
    GAUSSIAN = "gaussian"
    UNIFORM = "uniform"


@dataclasses.dataclass(frozen=True)
class NoiseSpec:
    sigma: float

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"Noise scale must be nonnegative, got {self.sigma}")


@dataclasses.dataclass
class MisalignmentSpec:
    """
    Moments of the key source x and the value source y.

    ``sigma_x`` / ``sigma_y`` are per-component standard deviations and
    default to one (normalized inputs).
    """
    mu_x: np.ndarray
    mu_y: np.ndarray
    sigma_x: Optional[np.ndarray] = None
    sigma_y: Optional[np.ndarray] = None

    def __post_init__(self):
        self.mu_x = np.asarray(self.mu_x, dtype=np.float64)
        self.mu_y = np.asarray(self.mu_y, dtype=np.float64)
        if self.mu_x.shape != self.mu_y.shape or self.mu_x.ndim != 1:
            raise ValueError(
                f"Mean vectors must share a 1-D shape, got {self.mu_x.shape} "
                f"and {self.mu_y.shape}"
            )
        d = self.mu_x.shape[0]
        self.sigma_x = np.ones(d) if self.sigma_x is None else np.asarray(self.sigma_x, float)
        self.sigma_y = np.ones(d) if self.sigma_y is None else np.asarray(self.sigma_y, float)
        for name in ("mu_x", "mu_y", "sigma_x", "sigma_y"):
            value = getattr(self, name)
            if value.shape != (d, ) or not np.all(np.isfinite(value)):
                raise ValueError(f"{name} must be a finite vector of length {d}")

    @classmethod
    def from_norms(
        cls, d: int, signal_mean_sq: float = 0.0, mean_shift_sq: float = 0.0
    ) -> MisalignmentSpec:
        """Isotropic means with ``|mu_x|^2 = signal_mean_sq``, ``|mu_y - mu_x|^2 = mean_shift_sq``."""
        mu_x = np.full(d, math.sqrt(signal_mean_sq / d))
        return cls(mu_x=mu_x, mu_y=mu_x + math.sqrt(mean_shift_sq / d))

    @property
    def d(self) -> int:
        return self.mu_x.shape[0]

    @property
    def mean_shift_sq(self) -> float:
        return float(np.sum((self.mu_y - self.mu_x) ** 2))

    @property
    def signal_mean_sq(self) -> float:
        return float(np.sum(self.mu_x ** 2))


@dataclasses.dataclass(frozen=True)
class TrialConfig:
    d: int
    n: int
    n_trials: int
    seed: int = 0
    weights_mode: WeightsMode = WeightsMode.UNIFORM
    heads: int = 1
    input_distribution: InputDistribution = InputDistribution.GAUSSIAN

    def __post_init__(self):
        if self.n_trials < 1:
            raise ValueError(f"n_trials must be at least 1, got {self.n_trials}")
        if self.d < 1 or self.n < 1 or self.heads < 1:
            raise ValueError(f"d, n and heads must be positive: {self}")
        if self.d % self.heads:
            raise ValueError(f"heads={self.heads} does not divide d={self.d}")
        object.__setattr__(self, "weights_mode", WeightsMode(self.weights_mode))
        object.__setattr__(
            self, "input_distribution", InputDistribution(self.input_distribution)
        )

    def tag(self, experiment: str, *extra) -> tuple:
        return (
            experiment, self.d, self.n, self.heads,
            self.weights_mode.value, self.input_distribution.value,
            *(repr(item) for item in extra),
        )


def _relative_error(empirical: float, theoretical: float) -> float:
    return abs(empirical - theoretical) / max(abs(theoretical), 1e-12)


@dataclasses.dataclass
class Estimate:
    empirical: float
    theoretical: float
    rel_error: float
    n_trials: int
    std_error: float = math.nan

    @classmethod
    def from_values(
        cls, empirical: float, theoretical: float, n_trials: int,
        std_error: float = math.nan,
    ) -> Estimate:
        return cls(
            empirical=float(empirical),
            theoretical=float(theoretical),
            rel_error=_relative_error(empirical, theoretical),
            n_trials=n_trials,
            std_error=float(std_error),
        )


@dataclasses.dataclass
class SNREstimate(Estimate):
    ...


@dataclasses.dataclass
class GammaEstimate(Estimate):
    """
    ``theoretical`` is the headline ``2d + |mu_y - mu_x|^2``;
    ``general_theoretical`` keeps the attention-concentration factor,
    ``|mu_y - mu_x|^2 + (tr S_x + tr S_y) E[sum a_i^2]``.
    """
    general_theoretical: float = math.nan
    general_rel_error: float = math.nan


def sample_weights(
    mode: WeightsMode,
    rng: np.random.Generator,
    shape: tuple[int, ...],
) -> np.ndarray:
    """Attention weights of ``shape`` whose last axis sums to one."""
    mode = WeightsMode(mode)
    n = shape[-1]
    if mode is WeightsMode.UNIFORM:
        return np.full(shape, 1.0 / n)
    if mode is WeightsMode.PEAKED:
        weights = np.zeros(shape)
        peaks = rng.integers(0, n, size=shape[:-1])
        np.put_along_axis(weights, peaks[..., None], 1.0, axis=-1)
        return weights
    logits = rng.standard_normal(shape)
    exps = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return exps / exps.sum(axis=-1, keepdims=True)


def sample_inputs(
    rng: np.random.Generator,
    shape: tuple[int, ...],
    mean: np.ndarray,
    std: np.ndarray,
    distribution: InputDistribution = InputDistribution.GAUSSIAN,
) -> np.ndarray:
    """Independent components with the given per-component mean and std."""
    if InputDistribution(distribution) is InputDistribution.UNIFORM:
        unit = rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), size=shape)
    else:
        unit = rng.standard_normal(shape)
    return mean + std * unit


def value_projection(seed: int, d: int, *tag) -> np.ndarray:
    """The orthogonal W_v shared by every chunk of one experiment."""
    return orthogonal_matrix(d, d, make_rng(seed, "w_v", d, *tag))


def _mix(weights: np.ndarray, tokens: np.ndarray, w_v: np.ndarray) -> np.ndarray:
    """``sum_i a_i W_v(tokens_i)`` per trial: (T, n) x (T, n, d) -> (T, d)."""
    return np.einsum("tn,tnd->td", weights, tokens) @ w_v.T


def _chunk_sizes(n_trials: int) -> list[tuple[int, int]]:
    size = constants.CHUNK_TRIALS
    return [
        (index, min(size, n_trials - index * size))
        for index in range(math.ceil(n_trials / size))
    ]


def _map_chunks(
    func: Callable[..., dict[str, float]],
    n_trials: int,
    *args,
    workers: Optional[int] = None,
) -> dict[str, float]:
    """Run ``func(*args, index, size)`` per chunk and sum results in chunk order."""
    workers = constants.WORKERS if workers is None else workers
    chunks = _chunk_sizes(n_trials)
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(func, *args, index, size) for index, size in chunks]
            results = [future.result() for future in futures]
    else:
        results = [func(*args, index, size) for index, size in chunks]

    totals: dict[str, float] = {}
    for result in results:
        for key, value in result.items():
            totals[key] = totals.get(key, 0.0) + value
    return totals


def _noise_chunk(
    cfg: TrialConfig,
    sigma: float,
    w_v: np.ndarray,
    tag: tuple,
    index: int,
    size: int,
) -> dict[str, float]:
    rng = make_rng(cfg.seed, *tag, index)
    d, n = cfg.d, cfg.n
    weights = sample_weights(cfg.weights_mode, rng, (size, n))
    x = sample_inputs(rng, (size, n, d), 0.0, 1.0, cfg.input_distribution)
    noise = sigma * rng.standard_normal((size, n, d))

    clean = _mix(weights, x, w_v)
    noisy = _mix(weights, x + noise, w_v)
    error = np.linalg.norm(noisy - clean, axis=-1)
    bound = (weights * np.linalg.norm(noise, axis=-1)).sum(axis=-1)
    squared = error ** 2
    return {
        "violations": float(np.count_nonzero(error > bound + constants.LEMMA1_SLACK)),
        "error_sq": float(squared.sum()),
        "error_sq_sq": float((squared ** 2).sum()),
        "signal_sq": float((clean ** 2).sum()),
        "theory": float((sigma ** 2 * d * (weights ** 2).sum(axis=-1)).sum()),
    }


def lemma1_check(cfg: TrialConfig, noise: NoiseSpec) -> float:
    """
    Fraction of trials where ``|o_hat - o*| > sum_i a_i |eps_i|``.

    The bound is deterministic, so anything but 0.0 is a bug.
    """
    tag = cfg.tag("lemma1", noise.sigma)
    w_v = value_projection(cfg.seed, cfg.d, *tag)
    totals = _map_chunks(_noise_chunk, cfg.n_trials, cfg, noise.sigma, w_v, tag)
    fraction = totals["violations"] / cfg.n_trials
    logger.info(
        "lemma1 d=%d n=%d sigma=%g mode=%s: %d/%d violations",
        cfg.d, cfg.n, noise.sigma, cfg.weights_mode.value,
        int(totals["violations"]), cfg.n_trials,
    )
    return fraction


def lemma2_error(cfg: TrialConfig, noise: NoiseSpec) -> Estimate:
    """
    Mean squared output error against ``sigma^2 d sum_i a_i^2``.

    For random weights the theoretical value is the per-trial formula
    averaged over the same trials.
    """
    tag = cfg.tag("lemma2", noise.sigma)
    w_v = value_projection(cfg.seed, cfg.d, *tag)
    totals = _map_chunks(_noise_chunk, cfg.n_trials, cfg, noise.sigma, w_v, tag)
    count = cfg.n_trials
    empirical = totals["error_sq"] / count
    variance = max(totals["error_sq_sq"] / count - empirical ** 2, 0.0)
    estimate = Estimate.from_values(
        empirical, totals["theory"] / count, count, math.sqrt(variance / count)
    )
    logger.info(
        "lemma2 d=%d n=%d sigma=%g mode=%s: empirical=%.6g theoretical=%.6g",
        cfg.d, cfg.n, noise.sigma, cfg.weights_mode.value,
        estimate.empirical, estimate.theoretical,
    )
    return estimate


def _scaled_noise_chunk(
    cfg: TrialConfig,
    w_v: np.ndarray,
    tag: tuple,
    index: int,
    size: int,
) -> dict[str, float]:
    """Signal energy and unit-scale noise energy; sigma is applied afterward."""
    rng = make_rng(cfg.seed, *tag, index)
    weights = sample_weights(cfg.weights_mode, rng, (size, cfg.n))
    x = sample_inputs(rng, (size, cfg.n, cfg.d), 0.0, 1.0, cfg.input_distribution)
    unit_noise = rng.standard_normal((size, cfg.n, cfg.d))
    clean = _mix(weights, x, w_v)
    noise = _mix(weights, unit_noise, w_v)
    return {
        "signal_sq": float((clean ** 2).sum()),
        "noise_sq": float((noise ** 2).sum()),
    }


@dataclasses.dataclass
class SNRRow:
    d: int
    sigma: float
    snr_empirical: float
    snr_theoretical: float
    n_trials: int


@dataclasses.dataclass
class SNRSweep:
    rows: list[SNRRow]
    crossings: dict[int, float]

    def max_crossing_error(self) -> float:
        """NaN when no curve crosses SNR = 1 inside the sigma grid."""
        errors = [
            abs(crossing - 1.0) for crossing in self.crossings.values()
            if math.isfinite(crossing)
        ]
        return max(errors, default=math.nan)

    def max_spread(self) -> float:
        """Largest relative spread of empirical SNR across d at any finite sigma."""
        by_sigma: dict[float, list[float]] = {}
        for row in self.rows:
            if math.isfinite(row.snr_empirical):
                by_sigma.setdefault(row.sigma, []).append(row.snr_empirical)
        return max((
            (max(values) - min(values)) / min(values)
            for values in by_sigma.values()
            if min(values) > 0
        ), default=0.0)


def _crossing(sigmas: Sequence[float], snrs: Sequence[float]) -> float:
    """
    Sigma where SNR falls through one, interpolated on log-log axes where the
    noise law is a straight line.  NaN if the sweep never crosses.
    """
    points = [
        (sigma, snr) for sigma, snr in zip(sigmas, snrs)
        if sigma > 0 and math.isfinite(snr) and snr > 0
    ]
    for (s0, r0), (s1, r1) in zip(points, points[1:]):
        if r0 >= 1.0 >= r1:
            if r0 == r1:
                return s0
            t = math.log(r0) / (math.log(r0) - math.log(r1))
            return math.exp(math.log(s0) + t * (math.log(s1) - math.log(s0)))
    return math.nan


def snr_sweep(
    d_list: Sequence[int],
    sigma_list: Sequence[float],
    cfg: TrialConfig,
) -> SNRSweep:
    """
    Empirical SNR ``E|o*|^2 / E|o_hat - o*|^2`` over a (d, sigma) grid.

    Each d draws one set of trials; every sigma rescales the same unit noise
    (common random numbers), so each curve is exactly monotone in sigma.
    Sigma = 0 rows report ``inf``.
    """
    rows: list[SNRRow] = []
    crossings: dict[int, float] = {}
    for d in d_list:
        d_cfg = dataclasses.replace(cfg, d=int(d))
        tag = d_cfg.tag("snr")
        w_v = value_projection(cfg.seed, d_cfg.d, *tag)
        totals = _map_chunks(_scaled_noise_chunk, cfg.n_trials, d_cfg, w_v, tag)
        curve = []
        for sigma in sigma_list:
            NoiseSpec(sigma)
            noise_sq = sigma ** 2 * totals["noise_sq"]
            empirical = totals["signal_sq"] / noise_sq if noise_sq > 0 else math.inf
            theoretical = 1.0 / sigma ** 2 if sigma > 0 else math.inf
            rows.append(SNRRow(int(d), float(sigma), empirical, theoretical, cfg.n_trials))
            curve.append(empirical)
        crossings[int(d)] = _crossing(sigma_list, curve)
        logger.info("snr d=%d: crosses 1 at sigma=%.4f", d, crossings[int(d)])
    return SNRSweep(rows, crossings)


def _misalignment_chunk(
    cfg: TrialConfig,
    mis: MisalignmentSpec,
    w_v: np.ndarray,
    tag: tuple,
    index: int,
    size: int,
) -> dict[str, float]:
    rng = make_rng(cfg.seed, *tag, index)
    weights = sample_weights(cfg.weights_mode, rng, (size, cfg.n))
    shape = (size, cfg.n, cfg.d)
    x = sample_inputs(rng, shape, mis.mu_x, mis.sigma_x, cfg.input_distribution)
    y = sample_inputs(rng, shape, mis.mu_y, mis.sigma_y, cfg.input_distribution)
    aligned = _mix(weights, x, w_v)
    delta = _mix(weights, y - x, w_v)
    delta_sq = (delta ** 2).sum(axis=-1)
    return {
        "delta_sq": float(delta_sq.sum()),
        "delta_sq_sq": float((delta_sq ** 2).sum()),
        "aligned_sq": float((aligned ** 2).sum()),
        "concentration": float((weights ** 2).sum()),
        "mass_sq": float((weights.sum(axis=-1) ** 2).sum()),
    }


def _misalignment_totals(cfg: TrialConfig, mis: MisalignmentSpec) -> dict[str, float]:
    if mis.d != cfg.d:
        raise ValueError(f"MisalignmentSpec has d={mis.d}, trial config has d={cfg.d}")
    tag = cfg.tag("misalignment", mis.signal_mean_sq, mis.mean_shift_sq)
    w_v = value_projection(cfg.seed, cfg.d, *tag)
    totals = _map_chunks(_misalignment_chunk, cfg.n_trials, cfg, mis, w_v, tag)
    return {key: value / cfg.n_trials for key, value in totals.items()}


def gamma_estimate(cfg: TrialConfig, mis: MisalignmentSpec) -> GammaEstimate:
    """
    Effective misalignment noise ``gamma = E|sum_i a_i (W_v y_i - W_v x_i)|^2``.

    The headline closed form ``2d + |mu_y - mu_x|^2`` holds when
    ``sum_i a_i^2 = 1`` (peaked weights); the general form is reported
    alongside for every weights mode.
    """
    means = _misalignment_totals(cfg, mis)
    empirical = means["delta_sq"]
    variance = max(means["delta_sq_sq"] - empirical ** 2, 0.0)
    headline = 2 * cfg.d + mis.mean_shift_sq
    total_variance = float(np.sum(mis.sigma_x ** 2) + np.sum(mis.sigma_y ** 2))
    general = mis.mean_shift_sq * means["mass_sq"] + total_variance * means["concentration"]
    estimate = GammaEstimate(
        empirical=empirical,
        theoretical=headline,
        rel_error=_relative_error(empirical, headline),
        n_trials=cfg.n_trials,
        std_error=math.sqrt(variance / cfg.n_trials),
        general_theoretical=general,
        general_rel_error=_relative_error(empirical, general),
    )
    logger.info(
        "gamma d=%d shift=%g mode=%s: empirical=%.6g headline=%.6g general=%.6g",
        cfg.d, mis.mean_shift_sq, cfg.weights_mode.value, empirical, headline, general,
    )
    return estimate


def misaligned_snr(cfg: TrialConfig, mis: MisalignmentSpec) -> SNREstimate:
    """
    SNR when the misalignment deviation is the noise: ``E|sum a_i W_v x_i|^2 / gamma``.

    The theoretical value uses the aligned-output approximation
    ``E|o*|^2 = |mu_x|^2 (sum a_i)^2 + tr(S_x) sum a_i^2``.
    """
    means = _misalignment_totals(cfg, mis)
    trace_x = float(np.sum(mis.sigma_x ** 2))
    trace_y = float(np.sum(mis.sigma_y ** 2))
    signal = mis.signal_mean_sq * means["mass_sq"] + trace_x * means["concentration"]
    noise = mis.mean_shift_sq * means["mass_sq"] + (trace_x + trace_y) * means["concentration"]
    empirical = means["aligned_sq"] / means["delta_sq"] if means["delta_sq"] > 0 else math.inf
    return SNREstimate.from_values(empirical, signal / noise, cfg.n_trials)


@dataclasses.dataclass
class MultiHeadEstimates:
    error: Estimate
    per_head_error: list[Estimate]
    snr: SNREstimate
    gamma: GammaEstimate


def _multi_head_chunk(
    cfg: TrialConfig,
    sigma: float,
    mis: MisalignmentSpec,
    w_v: np.ndarray,
    w_o: np.ndarray,
    tag: tuple,
    index: int,
    size: int,
) -> dict[str, float]:
    rng = make_rng(cfg.seed, *tag, index)
    heads, n, d = cfg.heads, cfg.n, cfg.d
    d_h = d // heads
    weights = sample_weights(cfg.weights_mode, rng, (size, heads, n))
    shape = (size, n, d)
    x = sample_inputs(rng, shape, 0.0, 1.0, cfg.input_distribution)
    noise = sigma * rng.standard_normal(shape)
    key_src = sample_inputs(rng, shape, mis.mu_x, mis.sigma_x, cfg.input_distribution)
    value_src = sample_inputs(rng, shape, mis.mu_y, mis.sigma_y, cfg.input_distribution)

    def heads_out(tokens):
        values = (tokens @ w_v.T).reshape(size, n, heads, d_h)
        per_head = np.einsum("thn,tnhk->thk", weights, values)
        return per_head, per_head.reshape(size, d) @ w_o.T

    _, clean = heads_out(x)
    head_error, error = heads_out(noise)
    _, delta = heads_out(value_src - key_src)
    concentration = (weights ** 2).sum(axis=-1)
    error_sq = (error ** 2).sum(axis=-1)
    result = {
        "error_sq": float(error_sq.sum()),
        "error_sq_sq": float((error_sq ** 2).sum()),
        "signal_sq": float((clean ** 2).sum()),
        "delta_sq": float((delta ** 2).sum()),
        "concentration": float(concentration.sum()),
        "mass_sq": float(((weights.sum(axis=-1) ** 2).sum(axis=-1)).sum()),
    }
    for h in range(heads):
        result[f"head_error_sq_{h}"] = float((head_error[:, h] ** 2).sum())
        result[f"head_theory_{h}"] = float((sigma ** 2 * d_h * concentration[:, h]).sum())
    return result


def mha_variants(
    cfg: TrialConfig,
    noise: NoiseSpec,
    mis: Optional[MisalignmentSpec] = None,
) -> MultiHeadEstimates:
    """
    Multi-head versions of the noise error, SNR and gamma.

    W_v and the output projection W_o are both orthogonal, so the mixed
    output error is the sum of per-head errors:
    ``sigma^2 (d/H) sum_h sum_i (a_i^h)^2``.  Gamma is compared with
    ``2d + (1/H) sum_h |dmu^h|^2`` where every head reads the same input
    shift ``dmu``.
    """
    mis = mis if mis is not None else MisalignmentSpec.from_norms(cfg.d)
    tag = cfg.tag("mha", noise.sigma, mis.mean_shift_sq)
    w_v = value_projection(cfg.seed, cfg.d, *tag)
    w_o = orthogonal_matrix(cfg.d, cfg.d, make_rng(cfg.seed, "w_o", *tag))
    totals = _map_chunks(
        _multi_head_chunk, cfg.n_trials, cfg, noise.sigma, mis, w_v, w_o, tag
    )
    count = cfg.n_trials
    d_h = cfg.d // cfg.heads
    sigma_sq = noise.sigma ** 2

    error_mean = totals["error_sq"] / count
    variance = max(totals["error_sq_sq"] / count - error_mean ** 2, 0.0)
    error = Estimate.from_values(
        error_mean,
        sigma_sq * d_h * totals["concentration"] / count,
        count,
        math.sqrt(variance / count),
    )
    per_head = [
        Estimate.from_values(
            totals[f"head_error_sq_{h}"] / count, totals[f"head_theory_{h}"] / count, count
        )
        for h in range(cfg.heads)
    ]
    noise_sq = totals["error_sq"]
    snr = SNREstimate.from_values(
        totals["signal_sq"] / noise_sq if noise_sq > 0 else math.inf,
        1.0 / sigma_sq if sigma_sq > 0 else math.inf,
        count,
    )

    # Every head reads the same input, so the per-head shifts average to dmu.
    headline = 2 * cfg.d + mis.mean_shift_sq
    total_variance = float(np.sum(mis.sigma_x ** 2) + np.sum(mis.sigma_y ** 2))
    general = (
        mis.mean_shift_sq * totals["mass_sq"] / (count * cfg.heads)
        + total_variance / cfg.heads * totals["concentration"] / count
    )
    gamma_empirical = totals["delta_sq"] / count
    gamma = GammaEstimate(
        empirical=gamma_empirical,
        theoretical=headline,
        rel_error=_relative_error(gamma_empirical, headline),
        n_trials=count,
        general_theoretical=general,
        general_rel_error=_relative_error(gamma_empirical, general),
    )
    logger.info(
        "mha d=%d H=%d: error %.6g/%.6g, snr %.6g, gamma %.6g/%.6g",
        cfg.d, cfg.heads, error.empirical, error.theoretical, snr.empirical,
        gamma.empirical, gamma.theoretical,
    )
    return MultiHeadEstimates(error=error, per_head_error=per_head, snr=snr, gamma=gamma)


@dataclasses.dataclass
class Figure1Config:
    seed: int = 0
    n_trials: int = 100_000
    n: int = 16
    snr_d_list: tuple[int, ...] = (32, 64, 128)
    sigma_list: tuple[float, ...] = tuple(round(0.1 * step, 10) for step in range(1, 21))
    snr_weights_mode: WeightsMode = WeightsMode.UNIFORM
    misaligned_d_list: tuple[int, ...] = (16, 32, 64, 128)
    signal_mean_sq: float = 64.0
    snr_mean_shifts: tuple[float, ...] = (0.0, 16.0, 64.0)
    gamma_mean_shifts: tuple[float, ...] = (0.0, 32.0, 128.0)
    misaligned_weights_mode: WeightsMode = WeightsMode.PEAKED


@dataclasses.dataclass
class Figure1Result:
    snr: SNRSweep
    misaligned: dict[tuple[int, float], SNREstimate]
    gamma: dict[tuple[int, float], GammaEstimate]
    paths: list[pathlib.Path]


def figure1_emit(output_path: pathlib.Path, config: Optional[Figure1Config] = None) -> Figure1Result:
    """
    Write the three panel CSVs: snr_vs_sigma.csv, snr_vs_d_misaligned.csv
    and gamma_vs_d.csv.
    """
    config = config or Figure1Config()
    output_path = pathlib.Path(output_path)

    sweep = snr_sweep(
        config.snr_d_list,
        config.sigma_list,
        TrialConfig(
            d=config.snr_d_list[0], n=config.n, n_trials=config.n_trials,
            seed=config.seed, weights_mode=config.snr_weights_mode,
        ),
    )

    misaligned: dict[tuple[int, float], SNREstimate] = {}
    gamma: dict[tuple[int, float], GammaEstimate] = {}
    for d in config.misaligned_d_list:
        cfg = TrialConfig(
            d=d, n=config.n, n_trials=config.n_trials, seed=config.seed,
            weights_mode=config.misaligned_weights_mode,
        )
        for shift in config.snr_mean_shifts:
            mis = MisalignmentSpec.from_norms(d, config.signal_mean_sq, shift)
            misaligned[(d, shift)] = misaligned_snr(cfg, mis)
        for shift in config.gamma_mean_shifts:
            gamma[(d, shift)] = gamma_estimate(cfg, MisalignmentSpec.from_norms(d, 0.0, shift))

    paths = [
        write_csv(
            output_path / "snr_vs_sigma.csv",
            SNR_VS_SIGMA_HEADER,
            [
                (row.d, row.sigma, row.snr_empirical, row.snr_theoretical, row.n_trials)
                for row in sweep.rows
            ],
        ),
        write_csv(
            output_path / "snr_vs_d_misaligned.csv",
            SNR_VS_D_HEADER,
            [
                (d, shift, estimate.empirical, estimate.n_trials)
                for (d, shift), estimate in sorted(misaligned.items(), key=lambda item: (item[0][1], item[0][0]))
            ],
        ),
        write_csv(
            output_path / "gamma_vs_d.csv",
            GAMMA_VS_D_HEADER,
            [
                (d, shift, estimate.empirical, estimate.theoretical, estimate.n_trials)
                for (d, shift), estimate in sorted(gamma.items(), key=lambda item: (item[0][1], item[0][0]))
            ],
        ),
    ]
    return Figure1Result(snr=sweep, misaligned=misaligned, gamma=gamma, paths=paths)


def affine_fit(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    """Least-squares ``(slope, intercept)``."""
    slope, intercept = np.polyfit(np.asarray(xs, float), np.asarray(ys, float), 1)
    return float(slope), float(intercept)
