"""Ray generation, sampling, and front-to-back compositing of spatial spectra.

Rays leave the fixed receiver over the upper hemisphere (z up, elevation
measured from the horizon) on an M x N grid of cell-center directions. Each
ray is clipped to the scene box, sampled uniformly, and composited with the
standard emission-absorption model; samples whose density falls below a
threshold are skipped as empty space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .field_model import FieldModel, positional_encode, query_density, signal_forward
from .voxel_grid import Aabb, interpolate


@dataclass
class SceneGeometry:
    """Fixed receiver, scene box, and spectrum resolution (M azimuth, N elevation)."""

    rx_position: np.ndarray
    bbox: Aabb
    spectrum_res: tuple[int, int]

    def __post_init__(self):
        self.rx_position = np.asarray(self.rx_position, dtype=np.float64)
        self.spectrum_res = (int(self.spectrum_res[0]), int(self.spectrum_res[1]))
        if self.rx_position.shape != (3,):
            raise ValueError("rx_position must be a 3-vector")
        if not self.bbox.contains(self.rx_position):
            raise ValueError("receiver must sit inside the scene box")
        if self.spectrum_res[0] < 1 or self.spectrum_res[1] < 1:
            raise ValueError("spectrum resolution must be at least 1 x 1")

    @property
    def n_directions(self) -> int:
        return self.spectrum_res[0] * self.spectrum_res[1]


def direction_from_angles(m: int, n: int, res) -> np.ndarray:
    """Unit direction of spectrum cell (m, n): azimuth 2*pi*(m+0.5)/M,
    elevation (pi/2)*(n+0.5)/N above the horizon, z up."""
    big_m, big_n = int(res[0]), int(res[1])
    if not (0 <= m < big_m and 0 <= n < big_n):
        raise ValueError(f"cell ({m}, {n}) outside resolution {big_m}x{big_n}")
    phi = 2.0 * np.pi * (m + 0.5) / big_m
    theta = 0.5 * np.pi * (n + 0.5) / big_n
    return np.array([np.cos(theta) * np.cos(phi),
                     np.cos(theta) * np.sin(phi),
                     np.sin(theta)])


def all_directions(res) -> np.ndarray:
    """All M*N cell-center directions, azimuth-major: row m*N + n."""
    big_m, big_n = int(res[0]), int(res[1])
    m, n = np.meshgrid(np.arange(big_m), np.arange(big_n), indexing="ij")
    phi = 2.0 * np.pi * (m.ravel() + 0.5) / big_m
    theta = 0.5 * np.pi * (n.ravel() + 0.5) / big_n
    return np.stack([np.cos(theta) * np.cos(phi),
                     np.cos(theta) * np.sin(phi),
                     np.sin(theta)], axis=-1)


def clip_ray(origin: np.ndarray, direction: np.ndarray, bbox: Aabb):
    """Slab intersection of a ray starting inside the box.

    Returns (t_near, t_far) with t_near = 0; axis-parallel directions get
    infinite slab bounds rather than NaN.
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    t1 = np.full(3, -np.inf)
    t2 = np.full(3, np.inf)
    moving = d != 0.0
    t1[moving] = (bbox.min_corner[moving] - o[moving]) / d[moving]
    t2[moving] = (bbox.max_corner[moving] - o[moving]) / d[moving]
    t_far = float(np.min(np.maximum(t1, t2)))
    return 0.0, max(t_far, 0.0)


def default_step(bbox: Aabb, dims) -> float:
    """Quarter of the smallest voxel edge: extent / (dims - 1) per axis."""
    edges = bbox.extent / (np.asarray(dims, dtype=np.float64) - 1.0)
    return float(edges.min()) / 4.0


def sample_ray(geometry: SceneGeometry, direction: np.ndarray, step: float):
    """Uniform samples along a receiver ray, clipped to the scene box.

    Sample i sits at distance (i + 0.5) * step, K = floor(t_far / step); every
    spacing equals `step` except the last, which covers the remaining distance
    to the box exit. Returns (positions (K, 3), spacings (K,)).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    _, t_far = clip_ray(geometry.rx_position, direction, geometry.bbox)
    k = int(np.floor(t_far / step))
    if k == 0:
        return np.empty((0, 3)), np.empty(0)
    r = (np.arange(k) + 0.5) * step
    spacings = np.full(k, step)
    spacings[-1] = t_far - r[-1]
    positions = geometry.rx_position + r[:, None] * np.asarray(direction, dtype=np.float64)
    return positions, spacings


def composite(sigma: np.ndarray, signal: np.ndarray, spacing: np.ndarray):
    """Front-to-back emission-absorption compositing of one ray.

    alpha_i = 1 - exp(-sigma_i * delta_i); T_i is the transmittance reaching
    sample i; the ray accumulates R = sum T_i * alpha_i * S_i in one pass.

    Returns (R, T_K, w) where T_K is the transmittance leaving the box and w
    the per-sample contribution weights (w.sum() + T_K == 1).
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    signal = np.asarray(signal, dtype=np.float64)
    spacing = np.asarray(spacing, dtype=np.float64)
    if not (sigma.shape == signal.shape == spacing.shape):
        raise ValueError("sigma, signal, spacing must have equal lengths")
    if sigma.size == 0:
        return 0.0, 1.0, np.empty(0)
    if np.any(sigma < 0):
        raise ValueError("negative volume density")
    if np.any(spacing <= 0):
        raise ValueError("spacings must be positive")
    alpha = -np.expm1(-sigma * spacing)
    one_minus = 1.0 - alpha
    trans = np.empty_like(alpha)
    trans[0] = 1.0
    if alpha.size > 1:
        trans[1:] = np.cumprod(one_minus[:-1])
    w = trans * alpha
    r_out = float(np.sum(w * signal))
    t_k = float(trans[-1] * one_minus[-1])
    return r_out, t_k, w


def composite_backward(sigma: np.ndarray, signal: np.ndarray, spacing: np.ndarray,
                       d_r: float, d_t_k: float):
    """Adjoint of `composite`: gradients of a loss w.r.t. density and signal.

    Given upstream dL/dR and dL/dT_K, uses the closed forms
        dL/dS_i     = dL/dR * w_i,
        dL/dsigma_i = delta_i * (dL/dR * (T_{i+1} S_i - sum_{j>i} w_j S_j)
                                  - dL/dT_K * T_K),
    which avoid dividing by (1 - alpha). Returns (d_sigma, d_signal).
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    signal = np.asarray(signal, dtype=np.float64)
    spacing = np.asarray(spacing, dtype=np.float64)
    if sigma.size == 0:
        return np.empty(0), np.empty(0)
    alpha = -np.expm1(-sigma * spacing)
    one_minus = 1.0 - alpha
    trans = np.empty_like(alpha)
    trans[0] = 1.0
    if alpha.size > 1:
        trans[1:] = np.cumprod(one_minus[:-1])
    t_k = trans[-1] * one_minus[-1]
    w = trans * alpha
    ws = w * signal
    tail = np.concatenate([np.cumsum(ws[::-1])[::-1][1:], [0.0]])  # sum over j > i
    trans_after = trans * one_minus  # T_{i+1}
    d_signal = d_r * w
    d_sigma = spacing * (d_r * (trans_after * signal - tail) - d_t_k * t_k)
    return d_sigma, d_signal


@dataclass
class RayTrace:
    """Every intermediate of one ray: samples, skip mask, and compositing terms.

    Compositing arrays (alphas, transmittance, weights) cover kept samples
    only, in ray order; skipped samples contribute exactly alpha = 0.
    """

    direction: np.ndarray
    positions: np.ndarray
    spacings: np.ndarray
    kept: np.ndarray
    sigma: np.ndarray
    signal: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    transmittance: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    accumulated: float = 0.0
    final_transmittance: float = 1.0

    @property
    def n_samples(self) -> int:
        return len(self.positions)

    @property
    def n_kept(self) -> int:
        return int(self.kept.sum())


def trace_ray(model: FieldModel, geometry: SceneGeometry, tx: np.ndarray,
              direction: np.ndarray, step: float | None = None,
              tau: float = 0.0) -> RayTrace:
    """Render one ray keeping all intermediates (for tests and diagnostics)."""
    if tau < 0:
        raise ValueError("skip threshold must be nonnegative")
    if step is None:
        step = default_step(geometry.bbox, model.density_grid.dims)
    positions, spacings = sample_ray(geometry, direction, step)
    if len(positions) == 0:
        empty = np.empty(0)
        return RayTrace(direction=np.asarray(direction, dtype=np.float64),
                        positions=positions, spacings=spacings,
                        kept=np.empty(0, dtype=bool), sigma=empty, signal=empty,
                        alphas=empty, transmittance=empty, weights=empty,
                        accumulated=0.0, final_transmittance=1.0)
    sigma = query_density(model, positions)
    kept = sigma >= tau
    signal = np.zeros(len(positions))
    if kept.any():
        emission_dir = -np.asarray(direction, dtype=np.float64)
        xs = positions[kept]
        feat = interpolate(model.feature_grid, xs)
        enc_tx = positional_encode(
            model.normalize_positions(np.broadcast_to(tx, (len(xs), 3))), model.enc_pos)
        enc_x = positional_encode(model.normalize_positions(xs), model.enc_pos)
        enc_d = positional_encode(
            np.broadcast_to(emission_dir, (len(xs), 3)), model.enc_dir)
        signal[kept] = signal_forward(model, feat, enc_tx, enc_x, enc_d)
    r_out, t_k, w = composite(sigma[kept], signal[kept], spacings[kept])
    alpha = -np.expm1(-sigma[kept] * spacings[kept])
    trans = np.empty_like(alpha)
    if alpha.size:
        trans[0] = 1.0
        trans[1:] = np.cumprod((1.0 - alpha)[:-1])
    return RayTrace(direction=np.asarray(direction, dtype=np.float64),
                    positions=positions, spacings=spacings, kept=kept,
                    sigma=sigma, signal=signal, alphas=alpha, transmittance=trans,
                    weights=w, accumulated=r_out, final_transmittance=t_k)


def render_ray(model: FieldModel, geometry: SceneGeometry, tx: np.ndarray,
               direction: np.ndarray, step: float | None = None,
               tau: float = 0.0):
    """Accumulated signal and final transmittance of a single ray."""
    t = trace_ray(model, geometry, tx, direction, step=step, tau=tau)
    return t.accumulated, t.final_transmittance


def sample_rays(geometry: SceneGeometry, directions: np.ndarray, step: float):
    """Sample many rays at once; returns concatenated positions/spacings plus
    per-ray offsets (offsets[b]..offsets[b+1] indexes ray b's samples)."""
    pos_list, spc_list = [], []
    counts = np.empty(len(directions), dtype=np.int64)
    for b, d in enumerate(directions):
        p, s = sample_ray(geometry, d, step)
        counts[b] = len(p)
        pos_list.append(p)
        spc_list.append(s)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    positions = np.concatenate(pos_list) if pos_list else np.empty((0, 3))
    spacings = np.concatenate(spc_list) if spc_list else np.empty(0)
    return positions, spacings, offsets


@dataclass
class SpectrumTrace:
    """Per-ray compositing summary of a full spectrum render."""

    final_transmittance: np.ndarray  # (M*N,) azimuth-major
    n_samples: int
    n_kept: int


def _render_directions(model: FieldModel, geometry: SceneGeometry, tx: np.ndarray,
                       directions: np.ndarray, step: float, tau: float):
    """Shared batched path: returns (R per ray, T_K per ray, totals)."""
    positions, spacings, offsets = sample_rays(geometry, directions, step)
    n_total = len(positions)
    n_rays = len(directions)
    r_out = np.zeros(n_rays)
    t_out = np.ones(n_rays)
    if n_total == 0:
        return r_out, t_out, 0, 0
    sigma = query_density(model, positions)
    kept = sigma >= tau
    signal = np.zeros(n_total)
    if kept.any():
        ray_of = np.repeat(np.arange(n_rays), np.diff(offsets))
        xs = positions[kept]
        emission = -directions[ray_of[kept]]
        feat = interpolate(model.feature_grid, xs)
        enc_tx = positional_encode(
            model.normalize_positions(np.broadcast_to(tx, (len(xs), 3))), model.enc_pos)
        enc_x = positional_encode(model.normalize_positions(xs), model.enc_pos)
        enc_d = positional_encode(emission, model.enc_dir)
        signal[kept] = signal_forward(model, feat, enc_tx, enc_x, enc_d)
    for b in range(n_rays):
        sel = slice(offsets[b], offsets[b + 1])
        k = kept[sel]
        r_out[b], t_out[b], _ = composite(sigma[sel][k], signal[sel][k],
                                          spacings[sel][k])
    return r_out, t_out, n_total, int(kept.sum())


def render_spectrum(model: FieldModel, geometry: SceneGeometry, tx: np.ndarray,
                    step: float | None = None, tau: float = 0.0) -> np.ndarray:
    """Spatial spectrum for one transmitter position: (M, N) array with cell
    (m, n) holding the accumulated signal from that direction."""
    spectrum, _ = render_spectrum_traced(model, geometry, tx, step=step, tau=tau)
    return spectrum


def render_spectrum_traced(model: FieldModel, geometry: SceneGeometry,
                           tx: np.ndarray, step: float | None = None,
                           tau: float = 0.0):
    """render_spectrum plus per-ray transmittance and skip statistics."""
    if tau < 0:
        raise ValueError("skip threshold must be nonnegative")
    tx = np.asarray(tx, dtype=np.float64)
    if not np.all(np.isfinite(tx)):
        raise ValueError("tx must be finite")
    if step is None:
        step = default_step(geometry.bbox, model.density_grid.dims)
    dirs = all_directions(geometry.spectrum_res)
    r_out, t_out, n_total, n_kept = _render_directions(model, geometry, tx,
                                                       dirs, step, tau)
    spectrum = r_out.reshape(geometry.spectrum_res)
    trace = SpectrumTrace(final_transmittance=t_out, n_samples=n_total,
                          n_kept=n_kept)
    return spectrum, trace


def aggregate_rssi(spectrum: np.ndarray, calibration_db: float = 0.0) -> float:
    """Received signal strength in dB: 10*log10 of the spectrum's total linear
    power plus a calibration offset."""
    spectrum = np.asarray(spectrum, dtype=np.float64)
    if np.any(spectrum < 0):
        raise ValueError("spectrum values must be nonnegative")
    total = float(spectrum.sum())
    if total <= 0.0:
        raise ValueError("no received power: spectrum sums to zero")
    return 10.0 * np.log10(total) + calibration_db
