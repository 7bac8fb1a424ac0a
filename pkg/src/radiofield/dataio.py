"""File formats, synthetic scenes, and the brute-force reference renderer.

Binary formats are little-endian and versioned; spectra and checkpoints
round-trip bit-exactly. The oracle renderer evaluates a closed-form blob field
and composites it with full products (no incremental recurrence), so it can
falsify the production compositing path and supply ground-truth datasets.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .field_model import FieldModel, Mlp, PositionalEncodingConfig
from .renderer import SceneGeometry, all_directions
from .voxel_grid import Aabb, VoxelGrid

SPECTRUM_MAGIC = b"VXRF"
SPECTRUM_VERSION = 1
CHECKPOINT_MAGIC = b"VXCK"
CHECKPOINT_VERSION = 1
MANIFEST_NAME = "manifest.json"


class FormatError(ValueError):
    """A file does not conform to its declared binary or manifest format."""


# ---------------------------------------------------------------------------
# spectrum files
# ---------------------------------------------------------------------------

def write_spectrum(path, spectrum: np.ndarray) -> None:
    """Write an (M, N) spectrum: 16-byte header + float32 LE, azimuth-major."""
    arr = np.asarray(spectrum, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"spectrum must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise ValueError("spectrum values must be finite and nonnegative")
    m, n = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", SPECTRUM_MAGIC, SPECTRUM_VERSION, m, n))
        fh.write(payload)


def read_spectrum(path) -> np.ndarray:
    """Read a spectrum file back as float64; rejects malformed files."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise FormatError(f"{path}: truncated header, {len(blob)} bytes at byte offset 0")
    magic, version, m, n = struct.unpack_from("<4sIII", blob, 0)
    if magic != SPECTRUM_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    if version != SPECTRUM_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 4")
    if m < 1 or n < 1 or m * n > 2 ** 28:
        raise FormatError(f"{path}: unreasonable dimensions {m}x{n} at byte offset 8")
    expected = 16 + 4 * m * n
    if len(blob) != expected:
        raise FormatError(f"{path}: payload is {len(blob) - 16} bytes, expected "
                          f"{expected - 16} at byte offset 16")
    values = np.frombuffer(blob, dtype="<f4", offset=16).reshape(m, n)
    out = values.astype(np.float64)
    if not np.all(np.isfinite(out)) or np.any(out < 0):
        raise FormatError(f"{path}: non-finite or negative values at byte offset 16")
    return out


# ---------------------------------------------------------------------------
# synthetic scenes and the reference renderer
# ---------------------------------------------------------------------------

@dataclass
class Blob:
    """Gaussian density/emission bump."""

    center: np.ndarray
    radius: float
    peak_density: float
    emission: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.radius <= 0:
            raise ValueError("blob radius must be positive")
        if self.peak_density < 0:
            raise ValueError("peak density must be nonnegative")
        if not (0.0 < self.emission < 1.0):
            raise ValueError("emission must lie in (0, 1)")


@dataclass
class SyntheticScene:
    """Closed-form scene: a few blobs plus a transmitter-dependent emission
    modulation, standing in for a measured environment."""

    bbox: Aabb
    rx_position: np.ndarray
    blobs: list
    tx_modulation: float = 0.0

    def __post_init__(self):
        self.rx_position = np.asarray(self.rx_position, dtype=np.float64)
        if self.tx_modulation < 0:
            raise ValueError("tx_modulation must be nonnegative")
        for b in self.blobs:
            if not self.bbox.contains(b.center):
                raise ValueError("blob centers must lie inside the bbox")


def oracle_density_emission(scene: SyntheticScene, x: np.ndarray, tx: np.ndarray,
                            direction: np.ndarray):
    """Analytic ground-truth field at sample positions.

    Density is a sum of Gaussians. Emission is the same Gaussian mixture with
    each blob scaled by (1 + tx_modulation * cos(pi * <unit(tx - c), dir>)) / 2,
    clamped to [0, 1]: smooth, transmitter- and direction-dependent.

    x is (N, 3) or (3,); direction is the emission direction per sample.
    """
    xs = np.atleast_2d(np.asarray(x, dtype=np.float64))
    dirs = np.broadcast_to(np.atleast_2d(np.asarray(direction, dtype=np.float64)),
                           (xs.shape[0], 3))
    tx = np.asarray(tx, dtype=np.float64)
    sigma = np.zeros(xs.shape[0])
    emission = np.zeros(xs.shape[0])
    for b in scene.blobs:
        d2 = np.sum((xs - b.center) ** 2, axis=1)
        g = np.exp(-d2 / (2.0 * b.radius ** 2))
        sigma += b.peak_density * g
        to_tx = tx - b.center
        norm = np.linalg.norm(to_tx)
        cos_term = (dirs @ (to_tx / norm)) if norm > 0 else np.zeros(xs.shape[0])
        gain = (1.0 + scene.tx_modulation * np.cos(np.pi * cos_term)) / 2.0
        emission += b.emission * g * gain
    emission = np.clip(emission, 0.0, 1.0)
    if np.asarray(x).ndim == 1:
        return float(sigma[0]), float(emission[0])
    return sigma, emission


def oracle_composite(sigma: np.ndarray, signal: np.ndarray, spacing: np.ndarray):
    """Product-form compositing: each sample's transmittance is recomputed as
    a full product over its predecessors, with no incremental recurrence.

    Returns (R, T_K, w); the independent counterpart of renderer.composite.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    signal = np.asarray(signal, dtype=np.float64)
    spacing = np.asarray(spacing, dtype=np.float64)
    k = sigma.size
    if k == 0:
        return 0.0, 1.0, np.empty(0)
    alpha = 1.0 - np.exp(-sigma * spacing)
    one_minus = 1.0 - alpha
    j = np.arange(k)
    # row i multiplies the predecessors of sample i, ones elsewhere
    partial = np.where(j[None, :] < j[:, None], one_minus[None, :], 1.0)
    trans = partial.prod(axis=1)
    w = trans * alpha
    r_out = float(np.sum(w * signal))
    t_k = float(one_minus.prod())
    return r_out, t_k, w


def _oracle_clip(origin, direction, bbox: Aabb) -> float:
    """Exit distance of an interior ray; written independently of renderer."""
    t_exit = np.inf
    for axis in range(3):
        d = direction[axis]
        if d > 0:
            t_exit = min(t_exit, (bbox.max_corner[axis] - origin[axis]) / d)
        elif d < 0:
            t_exit = min(t_exit, (bbox.min_corner[axis] - origin[axis]) / d)
    return max(float(t_exit), 0.0)


def oracle_render(scene: SyntheticScene, geometry: SceneGeometry, tx: np.ndarray,
                  fine_step: float) -> np.ndarray:
    """Ground-truth spatial spectrum of the analytic scene at a fine step."""
    if fine_step <= 0:
        raise ValueError("fine_step must be positive")
    res = geometry.spectrum_res
    dirs = all_directions(res)
    out = np.zeros(len(dirs))
    for i, d in enumerate(dirs):
        t_far = _oracle_clip(geometry.rx_position, d, geometry.bbox)
        k = int(t_far / fine_step)
        if k == 0:
            continue
        r = (np.arange(k) + 0.5) * fine_step
        positions = geometry.rx_position + r[:, None] * d
        spacing = np.full(k, fine_step)
        spacing[-1] = t_far - r[-1]
        sigma, emission = oracle_density_emission(scene, positions, tx, -d)
        out[i], _, _ = oracle_composite(sigma, emission, spacing)
    return out.reshape(res)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class DatasetRecord:
    tx_position: np.ndarray
    spectrum_path: str
    rssi_dbm: float | None = None


@dataclass
class Dataset:
    """Scene metadata plus (tx position, spectrum) records."""

    geometry: SceneGeometry
    normalization: float
    units: str
    records: list
    base_dir: Path
    _spectra: np.ndarray | None = field(default=None, repr=False)

    def tx_positions(self) -> np.ndarray:
        return np.array([r.tx_position for r in self.records])

    def load_spectra(self) -> np.ndarray:
        """All spectra as one (n_records, M, N) array, cached after first load."""
        if self._spectra is None:
            self._spectra = np.stack([
                read_spectrum(self.base_dir / r.spectrum_path) for r in self.records])
        return self._spectra


def save_manifest(dataset: Dataset, path) -> None:
    geo = dataset.geometry
    doc = {
        "format": "radiofield-dataset",
        "version": 1,
        "scene": {
            "rx_position": list(geo.rx_position),
            "bbox": {"min_corner": list(geo.bbox.min_corner),
                     "max_corner": list(geo.bbox.max_corner)},
            "spectrum_res": list(geo.spectrum_res),
            "normalization": dataset.normalization,
            "units": dataset.units,
        },
        "records": [
            {"tx_position": list(r.tx_position), "spectrum_path": r.spectrum_path,
             **({"rssi_dbm": r.rssi_dbm} if r.rssi_dbm is not None else {})}
            for r in dataset.records
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(path) -> Dataset:
    """Load and validate a dataset directory (or manifest path)."""
    path = Path(path)
    manifest = path / MANIFEST_NAME if path.is_dir() else path
    base = manifest.parent
    try:
        with open(manifest) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise FormatError(f"{manifest}: not valid JSON: {e}") from e
    if doc.get("format") != "radiofield-dataset":
        raise FormatError(f"{manifest}: not a dataset manifest")
    scene = doc["scene"]
    normalization = float(scene["normalization"])
    if normalization <= 0:
        raise FormatError(f"{manifest}: normalization must be positive")
    geometry = SceneGeometry(
        rx_position=np.array(scene["rx_position"], dtype=np.float64),
        bbox=Aabb(np.array(scene["bbox"]["min_corner"], dtype=np.float64),
                  np.array(scene["bbox"]["max_corner"], dtype=np.float64)),
        spectrum_res=tuple(scene["spectrum_res"]),
    )
    records = []
    for rec in doc["records"]:
        records.append(DatasetRecord(
            tx_position=np.array(rec["tx_position"], dtype=np.float64),
            spectrum_path=rec["spectrum_path"],
            rssi_dbm=rec.get("rssi_dbm"),
        ))
    for rec in records:
        spath = base / rec.spectrum_path
        if not spath.exists():
            raise FormatError(f"{manifest}: missing spectrum file {rec.spectrum_path}")
        with open(spath, "rb") as fh:
            head = fh.read(16)
        if len(head) < 16:
            raise FormatError(f"{spath}: truncated header")
        _, _, m, n = struct.unpack("<4sIII", head)
        if (m, n) != geometry.spectrum_res:
            raise FormatError(f"{spath}: resolution {m}x{n} differs from manifest "
                              f"{geometry.spectrum_res}")
    return Dataset(geometry=geometry, normalization=normalization,
                   units=scene.get("units", "linear"), records=records, base_dir=base)


def generate_dataset(scene: SyntheticScene, geometry: SceneGeometry, n_tx: int,
                     seed: int, out_dir, fine_step: float | None = None,
                     rssi_noise_db: float | None = None) -> Dataset:
    """Sample transmitter positions, render ground truth, write a dataset.

    Spectra are normalized by the global maximum across all records (stored in
    the manifest so absolute power is recoverable). With rssi_noise_db set,
    each record also carries a ground-truth RSSI in dB of the unnormalized
    power sum plus seeded Gaussian measurement noise.
    """
    if n_tx < 1:
        raise ValueError("need at least one transmitter position")
    if fine_step is None:
        fine_step = float(geometry.bbox.extent.min()) / 512.0
    rng = np.random.default_rng(seed)
    tx_positions = rng.uniform(geometry.bbox.min_corner, geometry.bbox.max_corner,
                               size=(n_tx, 3))
    raw = np.stack([oracle_render(scene, geometry, tx, fine_step)
                    for tx in tx_positions])
    peak = float(raw.max())
    if peak <= 0:
        raise ValueError("scene produced no power anywhere; cannot normalize")
    normalized = raw / peak

    rssi = [None] * n_tx
    if rssi_noise_db is not None:
        noise = rng.normal(0.0, rssi_noise_db, size=n_tx)
        for i in range(n_tx):
            total = float(raw[i].sum())
            if total > 0:
                rssi[i] = float(10.0 * np.log10(total) + noise[i])

    out_dir = Path(out_dir)
    spectra_dir = out_dir / "spectra"
    spectra_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n_tx):
        rel = f"spectra/tx_{i:05d}.vxrf"
        write_spectrum(out_dir / rel, normalized[i])
        records.append(DatasetRecord(tx_position=tx_positions[i], spectrum_path=rel,
                                     rssi_dbm=rssi[i]))
    dataset = Dataset(geometry=geometry, normalization=peak, units="linear",
                      records=records, base_dir=out_dir)
    save_manifest(dataset, out_dir / MANIFEST_NAME)
    return dataset


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: FieldModel, extra: dict | None = None) -> None:
    """Serialize a model atomically: JSON metadata + named float32 tensors."""
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "grid_dims": list(model.density_grid.dims),
        "feature_dim": model.feature_dim,
        "bbox_min": list(model.bbox.min_corner),
        "bbox_max": list(model.bbox.max_corner),
        "density_bias": model.density_bias,
        "enc_pos_levels": model.enc_pos.levels,
        "enc_dir_levels": model.enc_dir.levels,
        "deform_enabled": model.deform_enabled,
        "deform_hidden_activation": model.deform_net.hidden_activation,
        "deform_output_activation": model.deform_net.output_activation,
        "radiance_hidden_activation": model.radiance_net.hidden_activation,
        "radiance_output_activation": model.radiance_net.output_activation,
    }
    if extra:
        meta["extra"] = extra
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    params = model.parameters()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                             len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(params)))
        for name, tensor in params.items():
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Rebuild a FieldModel from a checkpoint; returns (model, metadata)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header at byte offset 0")
    magic, version, meta_len = struct.unpack_from("<4sII", blob, off)
    off += 12
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 4")
    if off + meta_len > len(blob):
        raise FormatError(f"{path}: metadata overruns file at byte offset {off}")
    try:
        meta = json.loads(blob[off:off + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt metadata block: {e}") from e
    off += meta_len

    def take(fmt, size):
        nonlocal off
        if off + size > len(blob):
            raise FormatError(f"{path}: truncated at byte offset {off}")
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    (count,) = take("<I", 4)
    tensors = {}
    for _ in range(count):
        (name_len,) = take("<I", 4)
        if off + name_len > len(blob):
            raise FormatError(f"{path}: truncated tensor name at byte offset {off}")
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = take("<I", 4)
        shape = take(f"<{rank}I", 4 * rank)
        n_items = int(np.prod(shape, dtype=np.int64)) if rank else 1
        nbytes = 4 * n_items
        if off + nbytes > len(blob):
            raise FormatError(f"{path}: truncated payload of {name!r} "
                              f"at byte offset {off}")
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=n_items,
                                      offset=off).reshape(shape).astype(np.float64)
        off += nbytes
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes at byte offset {off}")

    dims = tuple(meta["grid_dims"])
    feature_dim = int(meta["feature_dim"])
    bbox = Aabb(np.array(meta["bbox_min"]), np.array(meta["bbox_max"]))
    n_nodes = dims[0] * dims[1] * dims[2]
    for name, want in (("density_grid", (n_nodes, 1)),
                       ("feature_grid", (n_nodes, feature_dim))):
        if name not in tensors:
            raise FormatError(f"{path}: missing tensor {name!r}")
        if tensors[name].shape != want:
            raise FormatError(f"{path}: tensor {name!r} has shape "
                              f"{tensors[name].shape}, expected {want}")

    def build_mlp(tag, hidden_act, output_act):
        weights, biases = [], []
        i = 0
        while f"{tag}.w{i}" in tensors:
            weights.append(tensors[f"{tag}.w{i}"])
            biases.append(tensors[f"{tag}.b{i}"])
            i += 1
        if not weights:
            raise FormatError(f"{path}: no layers found for network {tag!r}")
        return Mlp(weights=weights, biases=biases, hidden_activation=hidden_act,
                   output_activation=output_act)

    try:
        model = FieldModel(
            density_grid=VoxelGrid(dims=dims, channels=1, bbox=bbox,
                                   values=tensors["density_grid"]),
            feature_grid=VoxelGrid(dims=dims, channels=feature_dim, bbox=bbox,
                                   values=tensors["feature_grid"]),
            deform_net=build_mlp("deform", meta["deform_hidden_activation"],
                                 meta["deform_output_activation"]),
            radiance_net=build_mlp("radiance", meta["radiance_hidden_activation"],
                                   meta["radiance_output_activation"]),
            enc_pos=PositionalEncodingConfig(int(meta["enc_pos_levels"])),
            enc_dir=PositionalEncodingConfig(int(meta["enc_dir_levels"])),
            density_bias=float(meta["density_bias"]),
            deform_enabled=bool(meta["deform_enabled"]),
        )
    except ValueError as e:
        raise FormatError(f"{path}: inconsistent tensor shapes: {e}") from e
    return model, meta
