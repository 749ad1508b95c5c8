"""Dataset I/O, normalization, transforms, and the synthetic generator.

The analytic flow doubles as its own oracle: velocity must equal the
finite-difference curl of psi, vorticity the FD curl of velocity, and the
FD divergence of velocity must vanish.
"""

import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorcfd.data import (
    ARRAY_NAMES,
    AnalyticFlow,
    Dataset,
    FlowConstants,
    GeneratorConfig,
    SourceCounts,
    SurfaceFields,
    VolumeFields,
    build_supernode_graph,
    fit_normalization,
    generate_split_samples,
    generate_synthetic,
    normalize_surface_targets,
    normalize_volume_targets,
    prepare_inference_batch,
    prepare_training_sample,
    unnormalize_surface,
    unnormalize_volume,
    write_dataset,
)
from anchorcfd.errors import CorruptDataError
from anchorcfd.transforms import (
    expm1_signed,
    log1p_signed,
    sqrt_signed,
    sqrt_signed_inverse,
    sqrt_signed_torch,
)


# ---------------------------------------------------------------------------
# Transforms


@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=32))
def test_log1p_signed_round_trip(values):
    x = np.asarray(values)
    y = log1p_signed(x)
    np.testing.assert_allclose(expm1_signed(y), x, rtol=1e-12, atol=1e-12)


def test_log1p_signed_is_odd_and_anchored():
    x = np.array([-5.0, -1.0, 0.0, 1.0, 5.0])
    y = log1p_signed(x)
    assert y[2] == 0.0
    np.testing.assert_allclose(y, -log1p_signed(-x))
    np.testing.assert_allclose(y[3], np.log(2.0))
    assert np.all(np.diff(y) > 0)


@given(
    st.lists(
        st.tuples(st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50)),
        min_size=1,
        max_size=16,
    ),
    st.floats(0.1, 10.0),
)
def test_sqrt_signed_round_trip(rows, sigma):
    v = np.asarray(rows)
    back = sqrt_signed_inverse(sqrt_signed(v, sigma), sigma)
    np.testing.assert_allclose(back, v, rtol=1e-10, atol=1e-10)


def test_sqrt_signed_direction_and_magnitude():
    v = np.array([[3.0, 0.0, 0.0]])
    sigma = 0.75
    y = sqrt_signed(v, sigma)
    # |v/sigma| = 4, so the image has magnitude sqrt(4) = 2 along +x.
    np.testing.assert_allclose(y, [[2.0, 0.0, 0.0]], rtol=1e-12)
    assert sqrt_signed(np.zeros((1, 3)), sigma) == pytest.approx(0.0)


def test_sqrt_signed_torch_matches_numpy():
    rng = np.random.default_rng(3)
    v = rng.normal(size=(40, 3)) * 10
    out = sqrt_signed_torch(torch.from_numpy(v), 2.5).numpy()
    np.testing.assert_allclose(out, sqrt_signed(v, 2.5), rtol=1e-9, atol=1e-12)


def test_sqrt_signed_rejects_bad_sigma():
    with pytest.raises(ValueError):
        sqrt_signed(np.ones((2, 3)), 0.0)
    with pytest.raises(ValueError):
        sqrt_signed_inverse(np.ones((2, 3)), -1.0)


# ---------------------------------------------------------------------------
# Analytic flow internal consistency (closed forms vs finite differences)


@pytest.fixture(scope="module")
def flow_and_points():
    config = GeneratorConfig()
    rng = np.random.default_rng(np.random.SeedSequence([77]))
    flow = AnalyticFlow(config, rng)
    points = rng.uniform(5.0, 35.0, size=(64, 3))
    return flow, points


def test_velocity_is_curl_of_psi(flow_and_points):
    from anchorcfd.physics import fd_curl

    flow, points = flow_and_points
    fd = fd_curl(lambda x: torch.from_numpy(flow.psi(x.numpy())), torch.from_numpy(points), 1e-4)
    np.testing.assert_allclose(fd.numpy(), flow.velocity(points), rtol=0, atol=1e-6)


def test_vorticity_is_curl_of_velocity(flow_and_points):
    from anchorcfd.physics import fd_curl

    flow, points = flow_and_points
    fd = fd_curl(
        lambda x: torch.from_numpy(flow.velocity(x.numpy())), torch.from_numpy(points), 1e-4
    )
    np.testing.assert_allclose(fd.numpy(), flow.vorticity(points), rtol=0, atol=1e-6)


def test_velocity_is_divergence_free(flow_and_points):
    from anchorcfd.physics import fd_jacobian

    flow, points = flow_and_points
    jac = fd_jacobian(
        lambda x: torch.from_numpy(flow.velocity(x.numpy())), torch.from_numpy(points), 1e-4
    )
    div = jac[:, 0, 0] + jac[:, 1, 1] + jac[:, 2, 2]
    assert div.abs().max().item() < 1e-7


# ---------------------------------------------------------------------------
# Generated samples


def test_generate_synthetic_is_deterministic(tiny_config):
    a, _ = generate_synthetic(tiny_config, seed=5)
    b, _ = generate_synthetic(tiny_config, seed=5)
    c, _ = generate_synthetic(tiny_config, seed=6)
    np.testing.assert_array_equal(a.volume.positions, b.volume.positions)
    np.testing.assert_array_equal(a.surface.pressure, b.surface.pressure)
    assert not np.array_equal(a.volume.positions, c.volume.positions)
    assert a.sample_id == "synthetic-00005"


def test_sphere_body_geometry():
    config = GeneratorConfig(body="sphere", body_size=4.0, num_surface=500)
    sample, _ = generate_synthetic(config, seed=2)
    center = np.asarray(config.body_center)
    rel = sample.surface.positions - center
    np.testing.assert_allclose(np.linalg.norm(rel, axis=1), 4.0, rtol=1e-12)
    np.testing.assert_allclose(sample.surface.normal, rel / 4.0, atol=1e-12)
    assert sample.surface.area.sum() == pytest.approx(4 * np.pi * 16.0)


def test_box_body_geometry():
    config = GeneratorConfig(body="box", body_size=3.0, num_surface=600)
    sample, _ = generate_synthetic(config, seed=2)
    center = np.asarray(config.body_center)
    rel = sample.surface.positions - center
    # Every point sits on a face: the largest |coordinate| equals the half-extent.
    np.testing.assert_allclose(np.abs(rel).max(axis=1), 3.0, rtol=1e-12)
    # Normals are axis-aligned unit vectors pointing out of that face.
    hits = np.abs(np.abs(rel) - 3.0) < 1e-9
    for i in range(600):
        axis = int(np.argmax(hits[i]))
        expected = np.zeros(3)
        expected[axis] = np.sign(rel[i, axis])
        np.testing.assert_array_equal(sample.surface.normal[i], expected)
    assert sample.surface.area.sum() == pytest.approx(6 * 6.0**2)


def test_shear_is_tangential(tiny_sample):
    sample, _ = tiny_sample
    dots = (sample.surface.shear * sample.surface.normal).sum(axis=1)
    assert np.abs(dots).max() < 1e-12


def test_generate_split_samples_ids_and_determinism(tiny_config):
    samples, splits = generate_split_samples(tiny_config, {"train": 2, "val": 1}, seed=9)
    assert splits == {"train": ["train-0000", "train-0001"], "val": ["val-0002"]}
    assert [s.sample_id for s in samples] == ["train-0000", "train-0001", "val-0002"]
    again, _ = generate_split_samples(tiny_config, {"train": 2, "val": 1}, seed=9)
    np.testing.assert_array_equal(samples[1].volume.velocity, again[1].volume.velocity)


def test_generator_config_validation():
    with pytest.raises(ValueError):
        GeneratorConfig(num_surface=0)
    with pytest.raises(ValueError):
        GeneratorConfig(domain_min=(0, 0, 0), domain_max=(1, 0, 1))
    with pytest.raises(ValueError):
        GeneratorConfig(body="cylinder")
    with pytest.raises(ValueError):
        GeneratorConfig(body_size=-1.0)
    with pytest.raises(ValueError):
        GeneratorConfig(num_modes=0)


# ---------------------------------------------------------------------------
# Field containers and constants


def test_flow_constants_round_trip():
    c = FlowConstants(rho=1.2, speed=30.0, ref_area=2.5, p_inf=101325.0)
    assert FlowConstants.from_dict(c.to_dict()) == c


def test_flow_constants_validation():
    with pytest.raises(ValueError):
        FlowConstants(rho=0.0, speed=30.0, ref_area=1.0)
    with pytest.raises(ValueError):
        FlowConstants(rho=1.0, speed=30.0, ref_area=1.0, flow_dir=(1.0, 1.0, 0.0))


def test_surface_fields_validation():
    n = 4
    pos = np.zeros((n, 3))
    normal = np.tile([0.0, 0.0, 1.0], (n, 1))
    ok = dict(positions=pos, pressure=np.zeros(n), shear=np.zeros((n, 3)),
              normal=normal, area=np.ones(n))
    SurfaceFields(**ok)
    with pytest.raises(ValueError):
        SurfaceFields(**{**ok, "normal": normal * 2.0})
    with pytest.raises(ValueError):
        SurfaceFields(**{**ok, "area": -np.ones(n)})
    with pytest.raises(ValueError):
        SurfaceFields(**{**ok, "pressure": np.full(n, np.nan)})
    with pytest.raises(ValueError):
        SurfaceFields(**{**ok, "shear": np.zeros((n, 2))})


def test_volume_fields_validation():
    m = 3
    ok = dict(positions=np.zeros((m, 3)), pressure=np.zeros(m),
              velocity=np.zeros((m, 3)), vorticity=np.zeros((m, 3)))
    VolumeFields(**ok)
    with pytest.raises(ValueError):
        VolumeFields(**{**ok, "velocity": np.zeros((m, 4))})
    with pytest.raises(ValueError):
        VolumeFields(**{**ok, "vorticity": np.full((m, 3), np.inf)})


def test_source_counts_validation():
    SourceCounts(surface_queries=0, volume_queries=0)
    with pytest.raises(ValueError):
        SourceCounts(supernodes=0)
    with pytest.raises(ValueError):
        SourceCounts(surface_queries=-1)


# ---------------------------------------------------------------------------
# Normalization statistics


def test_fit_normalization_matches_manual_stats(tiny_sample):
    sample, _ = tiny_sample
    stats = fit_normalization([sample])

    all_pos = np.concatenate(
        [sample.geometry.positions, sample.surface.positions, sample.volume.positions]
    )
    np.testing.assert_array_equal(stats.bbox_min, all_pos.min(axis=0))
    np.testing.assert_array_equal(stats.bbox_max, all_pos.max(axis=0))

    surf = np.column_stack((sample.surface.pressure, sample.surface.shear))
    np.testing.assert_allclose(stats.surface_mean, surf.mean(axis=0))
    np.testing.assert_allclose(stats.surface_std, surf.std(axis=0))

    omega_t = log1p_signed(sample.volume.vorticity)
    vol = np.column_stack((sample.volume.pressure, sample.volume.velocity, omega_t))
    np.testing.assert_allclose(stats.volume_mean, vol.mean(axis=0))
    np.testing.assert_allclose(stats.volume_std, vol.std(axis=0))
    assert stats.vorticity_sigma == pytest.approx(sample.volume.vorticity.std())


def test_fit_normalization_none_transform_uses_raw_omega(tiny_sample):
    sample, _ = tiny_sample
    stats = fit_normalization([sample], vorticity_transform="none")
    vol = np.column_stack(
        (sample.volume.pressure, sample.volume.velocity, sample.volume.vorticity)
    )
    np.testing.assert_allclose(stats.volume_mean, vol.mean(axis=0))


def test_fit_normalization_rejects_bad_input(tiny_sample):
    sample, _ = tiny_sample
    with pytest.raises(ValueError):
        fit_normalization([])
    with pytest.raises(ValueError):
        fit_normalization([sample], vorticity_transform="cube-root")


def test_surface_normalization_round_trip(tiny_sample, tiny_stats):
    sample, _ = tiny_sample
    normed = normalize_surface_targets(sample.surface, tiny_stats)
    assert abs(normed.mean()) < 1.0  # standardized scale
    raw = unnormalize_surface(normed, tiny_stats)
    np.testing.assert_allclose(raw[:, 0], sample.surface.pressure, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(raw[:, 1:4], sample.surface.shear, rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("transform", ["log1p-signed", "none"])
def test_volume_normalization_round_trip(tiny_sample, transform):
    sample, _ = tiny_sample
    stats = fit_normalization([sample], vorticity_transform=transform)
    normed = normalize_volume_targets(sample.volume, stats)
    raw = unnormalize_volume(normed, stats)
    np.testing.assert_allclose(raw[:, 0], sample.volume.pressure, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(raw[:, 1:4], sample.volume.velocity, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(raw[:, 4:7], sample.volume.vorticity, rtol=1e-9, atol=1e-9)


# ---------------------------------------------------------------------------
# Dataset round trip and corruption handling


@pytest.fixture()
def disk_dataset(tmp_path, tiny_config):
    samples, splits = generate_split_samples(tiny_config, {"train": 2, "test": 1}, seed=4)
    root = write_dataset(tmp_path / "ds", samples, splits, samples[0].constants)
    return root, samples


def test_dataset_round_trip_is_f32_exact(disk_dataset):
    root, samples = disk_dataset
    ds = Dataset(root)
    assert ds.split_ids("train") == ["train-0000", "train-0001"]
    assert set(ds.sample_ids) == {"train-0000", "train-0001", "test-0002"}
    loaded = ds.load("train-0001")
    original = samples[1]
    # Storage is little-endian float32, so the round trip reproduces the
    # f32-rounded values bitwise.
    np.testing.assert_array_equal(
        loaded.volume.velocity, original.volume.velocity.astype("<f4").astype(np.float64)
    )
    np.testing.assert_array_equal(
        loaded.surface.area, original.surface.area.astype("<f4").astype(np.float64)
    )
    assert loaded.constants == original.constants
    assert len(ds.load_split("test")) == 1


def test_dataset_unknown_split_and_sample(disk_dataset):
    root, _ = disk_dataset
    ds = Dataset(root)
    with pytest.raises(ValueError):
        ds.split_ids("holdout")
    with pytest.raises(ValueError):
        ds.load("train-9999")


def test_write_dataset_rejects_bad_splits(tmp_path, tiny_config):
    samples, _ = generate_split_samples(tiny_config, {"train": 2}, seed=1)
    constants = samples[0].constants
    with pytest.raises(ValueError):
        write_dataset(tmp_path / "a", samples,
                      {"train": ["train-0000"], "val": ["train-0000"]}, constants)
    with pytest.raises(ValueError):
        write_dataset(tmp_path / "b", samples, {"train": ["ghost"]}, constants)


def test_missing_manifest_is_corrupt(tmp_path):
    with pytest.raises(CorruptDataError):
        Dataset(tmp_path / "nowhere")


def test_invalid_manifest_json_is_corrupt(tmp_path):
    root = tmp_path / "ds"
    root.mkdir()
    (root / "manifest").write_text("{not json", encoding="utf-8")
    with pytest.raises(CorruptDataError):
        Dataset(root)


def test_wrong_format_tag_is_corrupt(tmp_path):
    root = tmp_path / "ds"
    root.mkdir()
    (root / "manifest").write_text(json.dumps({"format": "csv"}), encoding="utf-8")
    with pytest.raises(CorruptDataError):
        Dataset(root)


def _blob_path(root, sample_id, name):
    manifest = json.loads((root / "manifest").read_text(encoding="utf-8"))
    return root / manifest["samples"][sample_id]["arrays"][name]["file"]


def test_truncated_blob_is_corrupt(disk_dataset):
    root, _ = disk_dataset
    path = _blob_path(root, "train-0000", "volume.u")
    path.write_bytes(path.read_bytes()[:-8])
    ds = Dataset(root)
    with pytest.raises(CorruptDataError, match="bytes"):
        ds.load("train-0000")


def test_missing_blob_is_corrupt(disk_dataset):
    root, _ = disk_dataset
    _blob_path(root, "train-0000", "surface.p").unlink()
    with pytest.raises(CorruptDataError, match="missing blob"):
        Dataset(root).load("train-0000")


def test_non_finite_blob_is_corrupt(disk_dataset):
    root, _ = disk_dataset
    path = _blob_path(root, "train-0000", "surface.p")
    data = np.frombuffer(path.read_bytes(), dtype="<f4").copy()
    data[3] = np.nan
    path.write_bytes(data.tobytes())
    with pytest.raises(CorruptDataError, match="non-finite"):
        Dataset(root).load("train-0000")


def test_manifest_missing_array_is_corrupt(disk_dataset):
    root, _ = disk_dataset
    manifest = json.loads((root / "manifest").read_text(encoding="utf-8"))
    del manifest["samples"]["train-0000"]["arrays"]["volume.omega"]
    (root / "manifest").write_text(json.dumps(manifest), encoding="utf-8")
    with pytest.raises(CorruptDataError, match="volume.omega"):
        Dataset(root).load("train-0000")


def test_invalid_field_values_surface_as_corrupt(disk_dataset):
    # Finite but physically invalid content (non-unit normals) also surfaces
    # as corruption, not a bare ValueError.
    root, _ = disk_dataset
    path = _blob_path(root, "train-0000", "surface.normal")
    data = np.frombuffer(path.read_bytes(), dtype="<f4").copy()
    data *= 3.0
    path.write_bytes(data.tobytes())
    with pytest.raises(CorruptDataError, match="unit"):
        Dataset(root).load("train-0000")


def test_array_names_cover_every_field():
    assert len(ARRAY_NAMES) == 10
    assert set(ARRAY_NAMES) == {
        "geometry.pos", "surface.pos", "surface.p", "surface.tau",
        "surface.normal", "surface.area", "volume.pos", "volume.p",
        "volume.u", "volume.omega",
    }


# ---------------------------------------------------------------------------
# Batch preparation


SMALL = SourceCounts(
    supernodes=32, surface_anchors=64, volume_anchors=64,
    surface_queries=48, volume_queries=48,
)


def test_cfd_mesh_anchors_and_queries_are_disjoint(tiny_sample, tiny_stats):
    sample, _ = tiny_sample
    prep = prepare_training_sample(sample, tiny_stats, "cfd-mesh", SMALL, radius=8.0, seed=0)
    assert not set(prep.surface_anchor_ids) & set(prep.surface_query_ids)
    assert not set(prep.volume_anchor_ids) & set(prep.volume_query_ids)
    assert len(prep.surface_anchor_ids) == 64
    assert len(prep.volume_query_ids) == 48


def test_cfd_mesh_targets_align_with_ids(tiny_sample, tiny_stats):
    sample, _ = tiny_sample
    prep = prepare_training_sample(sample, tiny_stats, "cfd-mesh", SMALL, radius=8.0, seed=3)
    surf_norm = normalize_surface_targets(sample.surface, tiny_stats)
    vol_norm = normalize_volume_targets(sample.volume, tiny_stats)
    np.testing.assert_array_equal(
        prep.surface_anchor_target.numpy(),
        surf_norm[prep.surface_anchor_ids].astype(np.float32),
    )
    np.testing.assert_array_equal(
        prep.volume_query_target.numpy(),
        vol_norm[prep.volume_query_ids].astype(np.float32),
    )


def test_prepared_positions_are_network_units(tiny_sample, tiny_stats):
    sample, _ = tiny_sample
    prep = prepare_training_sample(sample, tiny_stats, "cfd-mesh", SMALL, radius=8.0, seed=3)
    expected = tiny_stats.to_network(sample.surface.positions[prep.surface_anchor_ids])
    np.testing.assert_array_equal(prep.batch.surface_anchor_pos.numpy(), expected)
    # Network units live in the scaled box.
    assert prep.batch.volume_anchor_pos.min() >= -1e-9
    assert prep.batch.volume_anchor_pos.max() <= 1000.0 + 1e-9


def test_preparation_is_seed_deterministic(tiny_sample, tiny_stats):
    sample, _ = tiny_sample
    a = prepare_training_sample(sample, tiny_stats, "cfd-mesh", SMALL, radius=8.0, seed=7)
    b = prepare_training_sample(sample, tiny_stats, "cfd-mesh", SMALL, radius=8.0, seed=7)
    c = prepare_training_sample(sample, tiny_stats, "cfd-mesh", SMALL, radius=8.0, seed=8)
    np.testing.assert_array_equal(a.surface_anchor_ids, b.surface_anchor_ids)
    assert torch.equal(a.batch.supernode_pos, b.batch.supernode_pos)
    assert not np.array_equal(a.volume_query_ids, c.volume_query_ids)


def test_cfd_mesh_rejects_oversubscription(tiny_sample, tiny_stats):
    sample, _ = tiny_sample
    greedy = SourceCounts(
        supernodes=32, surface_anchors=64, volume_anchors=64,
        surface_queries=sample.surface.count, volume_queries=0,
    )
    with pytest.raises(ValueError, match="surface"):
        prepare_training_sample(sample, tiny_stats, "cfd-mesh", greedy, radius=8.0, seed=0)


def test_unknown_mode_rejected(tiny_sample, tiny_stats):
    sample, _ = tiny_sample
    with pytest.raises(ValueError, match="mode"):
        prepare_training_sample(sample, tiny_stats, "mesh-free", SMALL, radius=8.0, seed=0)


def test_cad_grid_anchors_have_no_targets(tiny_sample, tiny_stats):
    sample, _ = tiny_sample
    counts = SourceCounts(
        supernodes=32, surface_anchors=64, volume_anchors=27,
        surface_queries=48, volume_queries=48,
    )
    prep = prepare_training_sample(sample, tiny_stats, "cad-grid", counts, radius=8.0, seed=0)
    assert prep.surface_anchor_target is None
    assert prep.volume_anchor_target is None
    assert prep.surface_anchor_ids is None
    assert prep.batch.volume_anchor_pos.shape == (27, 3)
    # Queries still carry targets from the meshes.
    assert prep.surface_query_target.shape == (48, 4)
    assert prep.volume_query_target.shape == (48, 7)


def test_cad_grid_volume_anchors_form_a_lattice(tiny_sample, tiny_stats):
    sample, _ = tiny_sample
    counts = SourceCounts(
        supernodes=32, surface_anchors=64, volume_anchors=8,
        surface_queries=1, volume_queries=1,
    )
    prep = prepare_training_sample(sample, tiny_stats, "cad-grid", counts, radius=8.0, seed=0)
    grid = tiny_stats.to_physics(prep.batch.volume_anchor_pos.numpy())
    # A 2x2x2 cell-center lattice has exactly two distinct values per axis at
    # the 1/4 and 3/4 marks of the training box.
    for d in range(3):
        vals = np.unique(np.round(grid[:, d], 9))
        lo, hi = tiny_stats.bbox_min[d], tiny_stats.bbox_max[d]
        span = hi - lo
        np.testing.assert_allclose(vals, [lo + 0.25 * span, lo + 0.75 * span], rtol=1e-6)


def test_cad_grid_rejects_non_cube_anchor_count(tiny_sample, tiny_stats):
    sample, _ = tiny_sample
    counts = SourceCounts(
        supernodes=32, surface_anchors=64, volume_anchors=10,
        surface_queries=1, volume_queries=1,
    )
    with pytest.raises(ValueError, match="cube"):
        prepare_training_sample(sample, tiny_stats, "cad-grid", counts, radius=8.0, seed=0)


def test_inference_batch_has_zero_queries(tiny_sample, tiny_stats):
    sample, _ = tiny_sample
    batch, sa_ids, va_ids = prepare_inference_batch(
        sample, tiny_stats, "cfd-mesh", SMALL, radius=8.0, seed=0
    )
    assert batch.surface_query_pos.shape == (0, 3)
    assert batch.volume_query_pos.shape == (0, 3)
    assert len(sa_ids) == 64 and len(va_ids) == 64
    grid_batch, g_sa, g_va = prepare_inference_batch(
        sample, tiny_stats, "cad-grid",
        SourceCounts(supernodes=32, surface_anchors=64, volume_anchors=27),
        radius=8.0, seed=0,
    )
    assert g_sa is None and g_va is None
    assert grid_batch.volume_anchor_pos.shape == (27, 3)


def test_supernode_graph_lives_in_network_units(tiny_sample, tiny_stats):
    sample, _ = tiny_sample
    pos, edge_center, offsets = build_supernode_graph(
        sample, tiny_stats, num_supernodes=16, radius=8.0, seed=1
    )
    assert pos.shape == (16, 3)
    assert pos.min() >= 0.0 and pos.max() <= 1000.0
    assert edge_center.max() < 16
    # Offsets are physics-space displacements scaled per axis, so their
    # physics-space preimage must respect the search radius.
    phys = offsets.numpy() / tiny_stats.coord_scale[None, :]
    assert np.linalg.norm(phys, axis=1).max() <= 8.0 + 1e-9
