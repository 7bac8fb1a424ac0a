"""Formats, synthetic oracle, dataset generation, checkpoints."""

import hashlib
import struct
from pathlib import Path

import numpy as np
import pytest

from radiofield.dataio import (
    Blob,
    Dataset,
    FormatError,
    SyntheticScene,
    generate_dataset,
    load_checkpoint,
    load_dataset,
    oracle_composite,
    oracle_density_emission,
    oracle_render,
    read_spectrum,
    save_checkpoint,
    write_spectrum,
)
from radiofield.field_model import init_field_model, query_signal
from radiofield.renderer import SceneGeometry, composite, render_spectrum
from radiofield.voxel_grid import Aabb


def demo_scene(tx_modulation=0.5):
    box = Aabb(np.zeros(3), np.array([2.0, 2.0, 2.0]))
    blobs = [
        Blob(center=[1.0, 1.0, 1.2], radius=0.25, peak_density=5.0, emission=0.8),
        Blob(center=[0.5, 1.4, 0.8], radius=0.2, peak_density=3.0, emission=0.5),
    ]
    return SyntheticScene(bbox=box, rx_position=np.array([1.0, 1.0, 0.2]),
                          blobs=blobs, tx_modulation=tx_modulation)


def demo_geometry(res=(8, 4)):
    scene = demo_scene()
    return SceneGeometry(rx_position=scene.rx_position, bbox=scene.bbox,
                         spectrum_res=res)


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestSpectrumFile:
    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        spec = rng.uniform(0, 1, size=(36, 9)).astype(np.float32).astype(np.float64)
        path = tmp_path / "s.vxrf"
        write_spectrum(path, spec)
        back = read_spectrum(path)
        assert np.array_equal(back, spec)
        write_spectrum(tmp_path / "s2.vxrf", back)
        assert (tmp_path / "s.vxrf").read_bytes() == (tmp_path / "s2.vxrf").read_bytes()

    def test_file_size_full_resolution(self, tmp_path):
        path = tmp_path / "big.vxrf"
        write_spectrum(path, np.zeros((360, 90)))
        assert path.stat().st_size == 16 + 4 * 360 * 90 == 129616

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.vxrf"
        path.write_bytes(b"XXXX" + struct.pack("<III", 1, 2, 2) + b"\x00" * 16)
        with pytest.raises(FormatError, match="magic"):
            read_spectrum(path)

    def test_bad_version_rejected(self, tmp_path):
        path = tmp_path / "bad.vxrf"
        path.write_bytes(struct.pack("<4sIII", b"VXRF", 9, 2, 2) + b"\x00" * 16)
        with pytest.raises(FormatError, match="version"):
            read_spectrum(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "short.vxrf"
        path.write_bytes(struct.pack("<4sIII", b"VXRF", 1, 4, 4) + b"\x00" * 10)
        with pytest.raises(FormatError, match="byte offset 16"):
            read_spectrum(path)

    def test_dimension_overflow_rejected(self, tmp_path):
        path = tmp_path / "huge.vxrf"
        path.write_bytes(struct.pack("<4sIII", b"VXRF", 1, 2 ** 20, 2 ** 20))
        with pytest.raises(FormatError, match="dimensions"):
            read_spectrum(path)

    def test_negative_values_rejected_on_write(self, tmp_path):
        with pytest.raises(ValueError):
            write_spectrum(tmp_path / "n.vxrf", np.array([[-1.0, 0.0]]))


class TestOracleField:
    def test_far_from_blobs_is_empty(self):
        scene = demo_scene()
        # >= 6 radii away from every blob
        sigma, _ = oracle_density_emission(scene, np.array([1.95, 0.05, 1.95]),
                                           np.ones(3), np.array([0, 0, 1.0]))
        assert sigma < 1e-7

    def test_blob_center_hits_peak(self):
        box = Aabb(np.zeros(3), np.ones(3) * 2)
        scene = SyntheticScene(bbox=box, rx_position=np.ones(3) * 0.5,
                               blobs=[Blob([1.0, 1.0, 1.0], 0.3, 4.5, 0.7)])
        sigma, _ = oracle_density_emission(scene, np.array([1.0, 1.0, 1.0]),
                                           np.zeros(3), np.array([0, 0, 1.0]))
        assert sigma == pytest.approx(4.5, rel=1e-12)

    def test_zero_modulation_ignores_tx(self):
        scene = demo_scene(tx_modulation=0.0)
        x = np.array([1.0, 1.0, 1.1])
        d = np.array([0.0, 0.6, 0.8])
        _, s1 = oracle_density_emission(scene, x, np.array([0.1, 0.2, 0.3]), d)
        _, s2 = oracle_density_emission(scene, x, np.array([1.9, 1.5, 1.1]), d)
        assert s1 == s2

    def test_modulation_makes_tx_matter(self):
        scene = demo_scene(tx_modulation=0.5)
        x = np.array([1.0, 1.0, 1.1])
        d = np.array([0.0, 0.6, 0.8])
        _, s1 = oracle_density_emission(scene, x, np.array([0.1, 0.2, 0.3]), d)
        _, s2 = oracle_density_emission(scene, x, np.array([1.9, 1.5, 1.1]), d)
        assert s1 != s2


class TestOracleComposite:
    def test_agrees_with_production_compositor(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            k = int(rng.integers(1, 400))
            sigma = rng.uniform(0, 4, k)
            signal = rng.uniform(0, 1, k)
            spacing = rng.uniform(0.005, 0.2, k)
            r_a, t_a, w_a = composite(sigma, signal, spacing)
            r_b, t_b, w_b = oracle_composite(sigma, signal, spacing)
            assert abs(r_a - r_b) < 1e-10
            assert abs(t_a - t_b) < 1e-10
            np.testing.assert_allclose(w_a, w_b, atol=1e-10)

    def test_empty(self):
        r, t_k, w = oracle_composite(np.empty(0), np.empty(0), np.empty(0))
        assert r == 0.0 and t_k == 1.0 and w.size == 0


class TestOracleRender:
    def test_zero_blob_scene_is_dark(self):
        box = Aabb(np.zeros(3), np.ones(3))
        scene = SyntheticScene(bbox=box, rx_position=np.full(3, 0.5), blobs=[])
        geo = SceneGeometry(rx_position=np.full(3, 0.5), bbox=box, spectrum_res=(6, 3))
        spec = oracle_render(scene, geo, np.full(3, 0.5), fine_step=0.01)
        assert np.all(spec == 0)

    def test_overhead_blob_peaks_at_zenith_row(self):
        box = Aabb(np.zeros(3), np.array([2.0, 2.0, 2.0]))
        scene = SyntheticScene(bbox=box, rx_position=np.array([1.0, 1.0, 0.2]),
                               blobs=[Blob([1.0, 1.0, 1.2], 0.25, 5.0, 0.8)])
        geo = SceneGeometry(rx_position=scene.rx_position, bbox=box,
                            spectrum_res=(8, 4))
        spec = oracle_render(scene, geo, np.array([0.5, 0.5, 0.5]), fine_step=0.01)
        m_idx, n_idx = np.unravel_index(np.argmax(spec), spec.shape)
        assert n_idx == 3  # highest elevation row

    def test_step_self_consistency(self):
        scene = demo_scene()
        geo = demo_geometry(res=(6, 3))
        tx = np.array([0.4, 1.5, 0.9])
        h = float(geo.bbox.extent.min()) / 256
        a = oracle_render(scene, geo, tx, fine_step=h)
        b = oracle_render(scene, geo, tx, fine_step=h / 2)
        assert np.abs(a - b).max() < 1e-3


class TestGenerateDataset:
    def test_counts_normalization_and_files(self, tmp_path):
        scene = demo_scene()
        geo = demo_geometry(res=(12, 4))
        ds = generate_dataset(scene, geo, n_tx=8, seed=7, out_dir=tmp_path / "d",
                              fine_step=0.02)
        assert len(ds.records) == 8
        assert len(list((tmp_path / "d" / "spectra").glob("*.vxrf"))) == 8
        spectra = ds.load_spectra()
        assert spectra.shape == (8, 12, 4)
        assert spectra.max() == 1.0  # global max maps to exactly one
        assert ds.normalization > 0

    def test_deterministic_bytes(self, tmp_path):
        scene = demo_scene()
        geo = demo_geometry(res=(6, 3))
        generate_dataset(scene, geo, n_tx=4, seed=9, out_dir=tmp_path / "a",
                         fine_step=0.03)
        generate_dataset(scene, geo, n_tx=4, seed=9, out_dir=tmp_path / "b",
                         fine_step=0.03)
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
        generate_dataset(scene, geo, n_tx=4, seed=10, out_dir=tmp_path / "c",
                         fine_step=0.03)
        assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")

    def test_round_trip_through_manifest(self, tmp_path):
        scene = demo_scene()
        geo = demo_geometry(res=(6, 3))
        ds = generate_dataset(scene, geo, n_tx=3, seed=1, out_dir=tmp_path / "d",
                              fine_step=0.03, rssi_noise_db=1.0)
        back = load_dataset(tmp_path / "d")
        assert back.geometry.spectrum_res == (6, 3)
        assert back.normalization == pytest.approx(ds.normalization)
        assert back.units == "linear"
        np.testing.assert_allclose(back.tx_positions(), ds.tx_positions())
        assert all(r.rssi_dbm is not None for r in back.records)
        np.testing.assert_array_equal(back.load_spectra(), ds.load_spectra())

    def test_missing_spectrum_detected(self, tmp_path):
        scene = demo_scene()
        geo = demo_geometry(res=(6, 3))
        generate_dataset(scene, geo, n_tx=2, seed=1, out_dir=tmp_path / "d",
                         fine_step=0.03)
        (tmp_path / "d" / "spectra" / "tx_00001.vxrf").unlink()
        with pytest.raises(FormatError, match="missing spectrum"):
            load_dataset(tmp_path / "d")


class TestCheckpoint:
    def make_model(self, seed=3):
        box = Aabb(np.zeros(3), np.array([2.0, 2.0, 2.0]))
        m = init_field_model(box, (6, 6, 6), 4, 16, seed=seed)
        rng = np.random.default_rng(seed)
        m.density_grid.values[:] = rng.normal(size=m.density_grid.values.shape)
        m.feature_grid.values[:] = rng.normal(size=m.feature_grid.values.shape)
        return m

    def test_round_trip_is_stable(self, tmp_path):
        # Payloads are float32: one save/load settles the values, after which
        # the round trip is bit-exact in both directions.
        m = self.make_model()
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, m, extra={"seed": 3, "iteration": 0})
        m2, meta = load_checkpoint(p1)
        assert meta["extra"]["seed"] == 3
        save_checkpoint(p2, m2)
        m3, _ = load_checkpoint(p2)
        for (n2, t2), (n3, t3) in zip(m2.parameters().items(), m3.parameters().items()):
            assert n2 == n3 and np.array_equal(t2, t3)

    def test_loaded_model_renders_identically(self, tmp_path):
        m = self.make_model(seed=5)
        save_checkpoint(tmp_path / "m.ckpt", m)
        a, _ = load_checkpoint(tmp_path / "m.ckpt")
        b, _ = load_checkpoint(tmp_path / "m.ckpt")
        geo = SceneGeometry(rx_position=np.ones(3), bbox=m.bbox, spectrum_res=(6, 3))
        tx = np.array([0.5, 1.5, 1.0])
        assert np.array_equal(render_spectrum(a, geo, tx, tau=1e-4),
                              render_spectrum(b, geo, tx, tau=1e-4))
        # and close to the pre-save model (float32 quantization only)
        np.testing.assert_allclose(render_spectrum(a, geo, tx),
                                   render_spectrum(m, geo, tx), atol=1e-5)

    def test_query_behavior_preserved(self, tmp_path):
        m = self.make_model(seed=6)
        save_checkpoint(tmp_path / "m.ckpt", m)
        back, _ = load_checkpoint(tmp_path / "m.ckpt")
        x = np.array([1.0, 0.8, 1.2])
        d = np.array([0.0, 0.0, 1.0])
        assert query_signal(back, x, np.zeros(3), d) == pytest.approx(
            query_signal(m, x, np.zeros(3), d), abs=1e-6)
        assert back.deform_enabled == m.deform_enabled
        assert back.density_bias == m.density_bias

    def test_tampered_dims_detected(self, tmp_path):
        m = self.make_model()
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, m)
        blob = bytearray(path.read_bytes())
        marker = b'"grid_dims": [6, 6, 6]'
        i = blob.find(marker)
        assert i != -1
        blob[i:i + len(marker)] = b'"grid_dims": [7, 6, 6]'
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="shape"):
            load_checkpoint(path)

    def test_bad_magic_detected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_desk_scale_size(self, tmp_path):
        box = Aabb(np.zeros(3), np.array([6.0, 6.0, 3.0]))
        m = init_field_model(box, (32, 32, 32), 8, 64, seed=0)
        path = tmp_path / "desk.ckpt"
        save_checkpoint(path, m)
        size = path.stat().st_size
        assert 1_150_000 < size < 1_300_000  # ~32^3 * 9 * 4 bytes + small MLPs
