"""
Monte Carlo counterpart of the random-discharge system.

Each particle follows dX = (-X + b N_hat) dt + sqrt(2a) dW by Euler-Maruyama,
and while at or above V_F it fires within a step with probability
1 - exp(-dt/eps), jumping to V_R. N_hat is the fired fraction of the previous
step divided by dt.

Particles are split into fixed-size chunks, each with its own Philox stream
keyed by (seed, chunk index). A chunk draws from its stream in the same order
whatever thread runs it, so results do not depend on the thread count.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from logging import getLogger
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from numpy.random import Generator, Philox, SeedSequence
from scipy.stats import norm

from config import DEFAULT_THREADS, PARTICLE_BINS_PER_UNIT, PARTICLE_CHUNK
from lib.errors import ParameterError
from lib.green import RateInput, ou_mean, ou_variance
from lib.model import DensityField, ModelParams

logger = getLogger(__name__)

Sampler = Callable[[Generator, int], np.ndarray]


def chunk_generator(seed: int, chunk: int) -> Generator:
    return Generator(Philox(SeedSequence([seed, chunk])))


# ---------------------------------------------------------------------------
# Initial samplers
# ---------------------------------------------------------------------------

def gaussian_sampler(mean: float, sd: float) -> Sampler:
    return lambda rng, n: rng.normal(mean, sd, n)


def uniform_sampler(low: float, high: float) -> Sampler:
    return lambda rng, n: rng.uniform(low, high, n)


def point_sampler(x0: float) -> Sampler:
    return lambda rng, n: np.full(n, float(x0))


def density_sampler(density: DensityField) -> Sampler:
    """Draws a cell by its mass, then a uniform position inside it."""
    weights = np.asarray(density.values) * density.grid.dv
    if weights.sum() <= 0:
        raise ParameterError("cannot sample from a zero density")
    probabilities = weights / weights.sum()
    left = density.grid.interfaces[:-1]
    dv = density.grid.dv

    def sample(rng: Generator, n: int) -> np.ndarray:
        cells = rng.choice(probabilities.size, size=n, p=probabilities)
        return left[cells] + dv * rng.random(n)

    return sample


# ---------------------------------------------------------------------------
# Ensemble
# ---------------------------------------------------------------------------

class _Chunk:
    """Positions and stream of one block of particles."""

    def __init__(self, seed: int, index: int, size: int, sampler: Sampler):
        self.rng = chunk_generator(seed, index)
        self.positions = np.asarray(sampler(self.rng, size), dtype=float)
        if self.positions.shape != (size,) or not np.all(np.isfinite(self.positions)):
            raise ParameterError("initial sampler must return finite positions of the requested size")

    def above(self, V_F: float) -> int:
        return int(np.count_nonzero(self.positions >= V_F))

    def step(self, params: ModelParams, rate: float, h: float, fire_probability: float) -> int:
        x = self.positions
        noise = self.rng.standard_normal(x.size)
        x += (-x + params.b * rate) * h + math.sqrt(2.0 * params.a * h) * noise
        candidates = x >= params.V_F
        fired = candidates & (self.rng.random(x.size) < fire_probability)
        x[fired] = params.V_R
        return int(np.count_nonzero(fired))


@dataclass(frozen=True, eq=False)
class ParticleResult:
    """
    Binned output of simulate_particles.

    N_hat[k] is the fired fraction in bin k over its duration; fired_cum[k]
    the fired fraction from 0 to t[k]. Bin k spans (t[k-1], t[k]], t[-1] = 0.
    """
    n_particles: int
    seed: int
    t: np.ndarray
    N_hat: np.ndarray
    N_hat_stderr: np.ndarray
    fired_cum: np.ndarray
    positions: np.ndarray
    steps: int

    @property
    def bin_starts(self) -> np.ndarray:
        return np.concatenate(([0.0], self.t[:-1]))

    def histogram(self, edges: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
        counts, edges = np.histogram(self.positions, bins=100 if edges is None else edges)
        return edges, counts

    def to_csv(self, path: Path) -> Path:
        from helpers.csv_export import write_columns
        return write_columns(path, {"t": self.t, "N_hat": self.N_hat, "fired_cum": self.fired_cum})

    def histogram_to_csv(self, path: Path, edges: Optional[np.ndarray] = None) -> Path:
        from helpers.csv_export import write_rows
        edges, counts = self.histogram(edges)
        centers = 0.5 * (edges[1:] + edges[:-1])
        return write_rows(path, ["v", "count"], zip(centers, counts.astype(int)))


def simulate_particles(
        params: ModelParams,
        sampler: Sampler,
        n_particles: int,
        dt: float,
        t_end: float,
        seed: int,
        bin_width: Optional[float] = None,
        threads: int = DEFAULT_THREADS,
) -> ParticleResult:
    eps = params.require_eps()
    if n_particles < 1:
        raise ParameterError(f"need at least one particle, got {n_particles}")
    if not (dt > 0 and t_end > 0):
        raise ParameterError(f"dt and t_end must be positive, got dt={dt}, t_end={t_end}")
    width = bin_width if bin_width is not None else 1.0 / PARTICLE_BINS_PER_UNIT
    if not width > 0:
        raise ParameterError(f"bin_width must be positive, got {width}")

    n_steps = max(1, int(math.ceil(t_end / dt - 1e-9)))
    steps_per_bin = max(1, int(round(width / dt)))
    sizes = [min(PARTICLE_CHUNK, n_particles - start) for start in range(0, n_particles, PARTICLE_CHUNK)]
    chunks = [_Chunk(seed, k, size, sampler) for k, size in enumerate(sizes)]
    rate = sum(c.above(params.V_F) for c in chunks) / (n_particles * eps)
    logger.info("[PARTICLES] start: N_p=%d chunks=%d steps=%d seed=%d threads=%d",
                n_particles, len(chunks), n_steps, seed, threads)

    bin_ends: list[float] = []
    bin_counts: list[int] = []
    bin_durations: list[float] = []
    t = 0.0
    in_bin = 0
    bin_start = 0.0
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for step in range(n_steps):
            h = dt if step < n_steps - 1 else t_end - t
            fire_probability = -math.expm1(-h / eps)
            counts = list(pool.map(lambda c: c.step(params, rate, h, fire_probability), chunks))
            fired = sum(counts)
            rate = fired / (n_particles * h)
            t = t_end if step == n_steps - 1 else t + h
            in_bin += fired
            if (step + 1) % steps_per_bin == 0 or step == n_steps - 1:
                bin_ends.append(t)
                bin_counts.append(in_bin)
                bin_durations.append(t - bin_start)
                bin_start = t
                in_bin = 0

    counts_arr = np.array(bin_counts, dtype=float)
    durations = np.array(bin_durations)
    N_hat = counts_arr / (n_particles * durations)
    stderr = np.sqrt(counts_arr) / (n_particles * durations)
    fired_cum = np.cumsum(counts_arr) / n_particles
    positions = np.concatenate([c.positions for c in chunks])
    logger.info("[PARTICLES] end: fired fraction %.6g", fired_cum[-1])
    return ParticleResult(n_particles, seed, np.array(bin_ends), N_hat, stderr, fired_cum, positions, n_steps)


# ---------------------------------------------------------------------------
# Tail probability of the forced OU process
# ---------------------------------------------------------------------------

def ou_tail_probability(params: ModelParams, t: float, x0: float, rate: RateInput) -> float:
    """P(X_t >= V_F) for dX = (-X + b N) dt + sqrt(2a) dW, X_0 = x0."""
    if not t > 0:
        raise ParameterError(f"t must be positive, got {t}")
    mean = ou_mean(0.0, t, x0, rate, params)
    sigma = math.sqrt(ou_variance(0.0, t, params))
    return float(norm.sf((params.V_F - mean) / sigma))


@dataclass(frozen=True)
class TailEstimate:
    probability: float
    stderr: float


def mc_tail_probability(
        params: ModelParams,
        t: float,
        x0: float,
        rate: RateInput,
        n_samples: int,
        seed: int,
        n_steps: int = 64,
) -> TailEstimate:
    """
    Monte Carlo estimate of the same tail without firing.

    Steps with the exact OU transition over each substep, so the only error
    is sampling error.
    """
    if not t > 0 or n_samples < 1 or n_steps < 1:
        raise ParameterError("need t > 0, n_samples >= 1, n_steps >= 1")
    rng = chunk_generator(seed, 0)
    x = np.full(n_samples, float(x0))
    times = np.linspace(0.0, t, n_steps + 1)
    for s, u in zip(times[:-1], times[1:]):
        shift = params.b * rate.weighted_integral(s, u)
        x = math.exp(s - u) * x + shift + math.sqrt(ou_variance(s, u, params)) * rng.standard_normal(n_samples)
    p = float(np.mean(x >= params.V_F))
    return TailEstimate(p, math.sqrt(max(p * (1.0 - p), 0.0) / n_samples))
