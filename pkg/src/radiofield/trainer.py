"""Training loop: Adam, exponential LR decay, progressive grids, calibration.

Ray geometry is fixed per resolution stage (receiver, box, direction set, and
step size do not change between upsample events), so sample positions,
interpolation supports, and positional encodings are precomputed per direction
and gathered per batch. Compositing and its adjoint run per ray on top of the
batched grid/MLP math, keeping results identical to the single-ray renderer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataio import Dataset
from .field_model import (
    FieldModel,
    GradientSet,
    init_field_model,
    positional_encode,
    sigmoid,
    signal_backward,
    signal_forward,
    softplus,
)
from .objectives import LossReport, background_entropy, spectrum_mse, total_loss
from .renderer import (
    SceneGeometry,
    all_directions,
    default_step,
    render_spectrum,
    sample_rays,
)
from .voxel_grid import interp_support, scatter_grid_gradient, upsample

GRID_PARAM_NAMES = ("density_grid", "feature_grid")


class NumericalError(RuntimeError):
    """Training produced a non-finite quantity."""


@dataclass
class TrainConfig:
    """Hyperparameters; the defaults are the desk-scale profile.

    The desk grid learning rate is scaled down from the full-scale 0.2: at
    32^3 the higher rate random-walks weakly constrained nodes into sharp
    structure that the progressive upsampling then perturbs badly.
    """

    final_dims: tuple = (32, 32, 32)
    feature_dim: int = 8
    mlp_width: int = 64
    stages: int = 3
    upsample_iters: tuple | None = None  # default: total/8, total/4, total/2
    total_iters: int = 5000
    batch_rays: int = 256
    lr_grid: float = 0.04
    lr_mlp: float = 2e-3
    lr_decay_target_fraction: float = 0.1
    tau: float = 1e-4
    bg_weight: float = 1e-4
    step_size: float | None = None  # None: quarter of the current voxel edge
    seed: int = 0
    density_bias: float = -3.0
    enc_pos_levels: int = 5
    enc_dir_levels: int = 4
    deform_enabled: bool = True
    log_interval: int = 100

    def __post_init__(self):
        self.final_dims = tuple(int(d) for d in self.final_dims)
        if self.upsample_iters is None:
            # front-loaded: the three-stage family is {T/8, T/4, T/2}; fewer
            # stages keep its leading members, more stages extend it downward
            span = max(self.stages, 3)
            self.upsample_iters = tuple(
                self.total_iters // 2 ** (span - s) for s in range(self.stages))
        else:
            self.upsample_iters = tuple(int(i) for i in self.upsample_iters)
        if len(self.upsample_iters) != self.stages:
            raise ValueError(f"need {self.stages} upsample iterations, "
                             f"got {len(self.upsample_iters)}")
        if any(b >= a for a, b in zip(self.upsample_iters[1:], self.upsample_iters)):
            raise ValueError("upsample_iters must be strictly increasing")
        if any(i >= self.total_iters for i in self.upsample_iters):
            raise ValueError("upsample_iters must all precede total_iters")
        if self.batch_rays < 1:
            raise ValueError("batch_rays must be at least 1")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        """Full-scale profile: 160^3 grid, 24 features, 256-wide MLPs,
        1024-ray batches, grid learning rate 0.2, ~100k iterations."""
        defaults = dict(final_dims=(160, 160, 160), feature_dim=24, mlp_width=256,
                        total_iters=100_000, batch_rays=1024, lr_grid=0.2)
        defaults.update(overrides)
        return cls(**defaults)


@dataclass
class AdamState:
    """First/second moment buffers and step counter for one parameter group."""

    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads, state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, in place on the parameter arrays."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape "
                             f"{p.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in tensor {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


def lr_at(iteration: int, lr0: float, total_iters: int,
          target_fraction: float = 0.1) -> float:
    """Exponential decay from lr0 to target_fraction * lr0 over the run."""
    if not 0 <= iteration <= total_iters:
        raise ValueError("iteration outside schedule")
    if total_iters == 0:
        return lr0
    return lr0 * target_fraction ** (iteration / total_iters)


def progressive_dims(final_dims, stage: int, m_stages: int) -> tuple:
    """Node counts of a progressive stage: the voxel count doubles per stage,
    reaching final_dims at stage == m_stages; per-axis counts scale by the
    cube root of the count ratio."""
    if not 0 <= stage <= m_stages:
        raise ValueError(f"stage {stage} outside 0..{m_stages}")
    final_dims = tuple(int(d) for d in final_dims)
    if stage == m_stages:
        return final_dims
    final_count = final_dims[0] * final_dims[1] * final_dims[2]
    target = final_count // 2 ** (m_stages - stage)
    ratio = (target / final_count) ** (1.0 / 3.0)
    return tuple(min(max(2, round(d * ratio)), d) for d in final_dims)


def _split_params(model: FieldModel):
    params = model.parameters()
    grid = {k: v for k, v in params.items() if k in GRID_PARAM_NAMES}
    mlp = {k: v for k, v in params.items() if k not in GRID_PARAM_NAMES}
    return grid, mlp


class _StageCache:
    """Per-direction ray geometry, interpolation supports, and encodings,
    valid while the grid resolution (hence step size) is unchanged."""

    def __init__(self, geometry: SceneGeometry, model: FieldModel, step: float):
        self.step = step
        dirs = all_directions(geometry.spectrum_res)
        self.n_dirs = len(dirs)
        self.emission_enc = positional_encode(-dirs, model.enc_dir)
        positions, spacings, offsets = sample_rays(geometry, dirs, step)
        self.offsets = offsets
        self.counts = np.diff(offsets)
        self.spacings = spacings
        self.idx, self.weights = interp_support(model.density_grid.dims,
                                                geometry.bbox, positions)
        self.enc_x = positional_encode(model.normalize_positions(positions),
                                       model.enc_pos)


@dataclass
class _BatchTrace:
    kept_idx: np.ndarray       # interpolation support of kept samples
    kept_weights: np.ndarray
    raw_kept: np.ndarray       # pre-activation density at kept samples
    ray_of_kept: np.ndarray    # owning ray per kept sample (non-decreasing)
    optical: np.ndarray        # sigma * delta per kept sample
    excl_prefix: np.ndarray    # per-ray exclusive prefix of optical depth
    signal_kept: np.ndarray
    spacings_kept: np.ndarray
    t_final: np.ndarray        # per ray
    sig_cache: object


def _segment_prefix(values: np.ndarray, ray_of: np.ndarray, n_rays: int):
    """Per-ray inclusive prefix sums of contiguous ray segments."""
    cs = np.cumsum(values)
    counts = np.bincount(ray_of, minlength=n_rays)
    starts = np.concatenate([[0], np.cumsum(counts)])[:-1]
    if len(values):
        safe = np.clip(starts - 1, 0, len(values) - 1)
        base = np.where(starts > 0, cs[safe], 0.0)
    else:
        base = np.zeros(n_rays)
    return cs - np.repeat(base, counts)


def _forward_batch(model: FieldModel, cache: _StageCache, enc_tx_by_ray: np.ndarray,
                   cells: np.ndarray, tau: float, want_cache: bool = False):
    """Render a batch of (tx, direction-cell) rays through the cached geometry.

    Compositing runs on per-ray segments of the kept samples: transmittance is
    exp of the segmented exclusive prefix of optical depth, identical to the
    sequential front-to-back pass. Returns (accumulated per ray, final
    transmittance per ray, trace)."""
    n_rays = len(cells)
    counts = cache.counts[cells]
    rows = np.concatenate([np.arange(cache.offsets[c], cache.offsets[c + 1])
                           for c in cells]) if counts.sum() else np.empty(0, np.int64)
    idx = cache.idx[rows]
    weights = cache.weights[rows]
    raw = np.einsum("nk,nk->n", model.density_grid.values[:, 0][idx], weights)
    sigma = softplus(raw + model.density_bias)
    kept = sigma >= tau
    ray_of = np.repeat(np.arange(n_rays), counts)

    rk = ray_of[kept]
    spc = cache.spacings[rows[kept]]
    sig_cache = None
    if kept.any():
        feat = np.einsum("nkf,nk->nf", model.feature_grid.values[idx[kept]],
                         weights[kept])
        enc_tx = enc_tx_by_ray[rk]
        enc_x = cache.enc_x[rows[kept]]
        enc_d = cache.emission_enc[np.asarray(cells)[rk]]
        res = signal_forward(model, feat, enc_tx, enc_x, enc_d, want_cache=want_cache)
        signal_kept, sig_cache = res if want_cache else (res, None)
    else:
        signal_kept = np.empty(0)

    optical = sigma[kept] * spc
    incl = _segment_prefix(optical, rk, n_rays)
    excl = incl - optical
    alpha = -np.expm1(-optical)
    w = np.exp(-excl) * alpha
    r_hat = np.bincount(rk, weights=w * signal_kept, minlength=n_rays)
    t_final = np.exp(-np.bincount(rk, weights=optical, minlength=n_rays))
    trace = _BatchTrace(kept_idx=idx[kept], kept_weights=weights[kept],
                        raw_kept=raw[kept], ray_of_kept=rk, optical=optical,
                        excl_prefix=excl, signal_kept=signal_kept,
                        spacings_kept=spc, t_final=t_final, sig_cache=sig_cache)
    return r_hat, t_final, trace


def _backward_batch(model: FieldModel, trace: _BatchTrace, d_r: np.ndarray,
                    d_t: np.ndarray, grads: GradientSet) -> None:
    """Chain loss gradients back through compositing, nets, and grids.

    Uses the division-free adjoint dL/dsigma_i = delta_i * (dL/dR *
    (T_{i+1} S_i - sum_{j>i} w_j S_j) - dL/dT_K * T_K) per ray segment."""
    if not len(trace.ray_of_kept):
        return
    n_rays = len(d_r)
    rk = trace.ray_of_kept
    alpha = -np.expm1(-trace.optical)
    w = np.exp(-trace.excl_prefix) * alpha
    ws = w * trace.signal_kept
    incl_ws = _segment_prefix(ws, rk, n_rays)
    total_ws = np.bincount(rk, weights=ws, minlength=n_rays)
    tail = total_ws[rk] - incl_ws
    t_next = np.exp(-(trace.excl_prefix + trace.optical))
    d_sigma = trace.spacings_kept * (
        d_r[rk] * (t_next * trace.signal_kept - tail) - d_t[rk] * trace.t_final[rk])
    d_signal = d_r[rk] * w

    d_raw = d_sigma * sigmoid(trace.raw_kept + model.density_bias)
    scatter_grid_gradient(trace.kept_idx, trace.kept_weights, d_raw[:, None],
                          grads["density_grid"])
    d_feat = signal_backward(model, trace.sig_cache, d_signal, grads)
    scatter_grid_gradient(trace.kept_idx, trace.kept_weights, d_feat,
                          grads["feature_grid"])


@dataclass
class TrainResult:
    model: FieldModel
    history: list  # (iteration, LossReport) pairs
    upsample_events: list = field(default_factory=list)


def _config_step(config: TrainConfig, geometry: SceneGeometry) -> float:
    """Quarter of the final grid's voxel edge, fixed across progressive stages
    so upsample events change only the representation, not the quadrature."""
    if config.step_size is not None:
        return config.step_size
    return default_step(geometry.bbox, config.final_dims)


def _eval_loss(model, cache, config, txs, cells, targets):
    enc_tx = positional_encode(model.normalize_positions(txs), model.enc_pos)
    r_hat, t_k, _ = _forward_batch(model, cache, enc_tx, cells, config.tau)
    sl, _ = spectrum_mse(r_hat, targets)
    bl, _ = background_entropy(t_k)
    return total_loss(sl, bl, config.bg_weight)


def train(dataset: Dataset, config: TrainConfig, log_fn=None,
          eval_rays=None) -> TrainResult:
    """Fit a field model to a dataset of (tx, spectrum) records.

    Each iteration draws batch_rays (record, direction-cell) pairs uniformly,
    renders them with empty-space skipping, and applies bias-corrected Adam
    with separate exponentially decayed rates for grids and MLPs. At each
    configured iteration both grids are trilinearly upsampled to the next
    progressive resolution and the grid Adam moments restart (their shapes
    changed); MLP moments persist.

    log_fn, when given, receives one CSV line per log interval:
    ``iter,spectrum_loss,bg_loss,total,lr_grid,lr_mlp``. eval_rays, when
    given as (tx_positions, direction_cells, targets), is evaluated before
    and after every upsample event into TrainResult.upsample_events.
    """
    if not dataset.records:
        raise ValueError("dataset has no records")
    geometry = dataset.geometry
    targets = dataset.load_spectra().reshape(len(dataset.records), -1)
    tx_positions = dataset.tx_positions()
    n_records, n_cells = targets.shape

    stage = 0
    model = init_field_model(
        geometry.bbox, progressive_dims(config.final_dims, 0, config.stages),
        config.feature_dim, config.mlp_width, seed=config.seed,
        density_bias=config.density_bias, enc_pos_levels=config.enc_pos_levels,
        enc_dir_levels=config.enc_dir_levels)
    model.deform_enabled = config.deform_enabled

    grid_params, mlp_params = _split_params(model)
    adam_grid = AdamState.for_params(grid_params)
    adam_mlp = AdamState.for_params(mlp_params)
    enc_tx_all = positional_encode(model.normalize_positions(tx_positions),
                                   model.enc_pos)
    cache = _StageCache(geometry, model, _config_step(config, geometry))
    upsample_at = {it: s + 1 for s, it in enumerate(config.upsample_iters)}

    rng = np.random.default_rng(config.seed)
    history = []
    events = []
    for it in range(config.total_iters):
        if it in upsample_at:
            before = (_eval_loss(model, cache, config, *eval_rays)
                      if eval_rays is not None else None)
            stage = upsample_at[it]
            new_dims = progressive_dims(config.final_dims, stage, config.stages)
            model.density_grid = upsample(model.density_grid, new_dims)
            model.feature_grid = upsample(model.feature_grid, new_dims)
            grid_params, mlp_params = _split_params(model)
            adam_grid = AdamState.for_params(grid_params)
            cache = _StageCache(geometry, model, _config_step(config, geometry))
            after = (_eval_loss(model, cache, config, *eval_rays)
                     if eval_rays is not None else None)
            events.append({"iteration": it, "stage": stage, "dims": new_dims,
                           "loss_before": before, "loss_after": after})

        rec = rng.integers(0, n_records, config.batch_rays)
        cell = rng.integers(0, n_cells, config.batch_rays)
        r_hat, t_k, trace = _forward_batch(model, cache, enc_tx_all[rec], cell,
                                           config.tau, want_cache=True)
        sl_loss, d_r = spectrum_mse(r_hat, targets[rec, cell])
        bg_loss, d_t = background_entropy(t_k)
        tot = total_loss(sl_loss, bg_loss, config.bg_weight)
        if not math.isfinite(tot):
            raise NumericalError(f"non-finite loss at iteration {it}")

        grads = GradientSet.zeros_like(model)
        _backward_batch(model, trace, d_r, config.bg_weight * d_t, grads)
        lr_g = lr_at(it, config.lr_grid, config.total_iters,
                     config.lr_decay_target_fraction)
        lr_m = lr_at(it, config.lr_mlp, config.total_iters,
                     config.lr_decay_target_fraction)
        adam_step(grid_params, grads, adam_grid, lr_g)
        adam_step(mlp_params, grads, adam_mlp, lr_m)

        if it % config.log_interval == 0 or it == config.total_iters - 1:
            report = LossReport.build(sl_loss, bg_loss, config.bg_weight,
                                      ray_count=config.batch_rays)
            history.append((it, report))
            if log_fn is not None:
                log_fn(f"{it},{sl_loss:.10e},{bg_loss:.10e},{tot:.10e},"
                       f"{lr_g:.10e},{lr_m:.10e}")
    return TrainResult(model=model, history=history, upsample_events=events)


def fit_rssi_calibration(model: FieldModel, geometry: SceneGeometry, records,
                         step: float | None = None, tau: float = 1e-4) -> float:
    """Least-squares constant offset between measured RSSI and the model's
    10*log10(total predicted power), over records carrying a measurement."""
    residuals = []
    for rec in records:
        if rec.rssi_dbm is None:
            continue
        spectrum = render_spectrum(model, geometry, rec.tx_position, step=step,
                                   tau=tau)
        power = float(spectrum.sum())
        if power <= 0:
            continue
        residuals.append(rec.rssi_dbm - 10.0 * np.log10(power))
    if not residuals:
        raise ValueError("no records with measured RSSI and positive predicted power")
    return float(np.mean(residuals))
