"""Simulation samples, on-disk datasets, normalization, and synthetic flows.

Dataset layout
--------------
A dataset directory holds a UTF-8 JSON `manifest` plus one raw little-endian
float32 blob per array under `blobs/<sample-id>/<array-name>.f32`. Array
names are fixed: geometry.pos, surface.pos, surface.p, surface.tau,
surface.normal, surface.area, volume.pos, volume.p, volume.u, volume.omega.
The manifest records shapes, dtypes, byte offsets, split membership, and the
flow constants. Loads validate shape, byte length, and finiteness and raise
`CorruptDataError` on any mismatch.

Synthetic flows
---------------
Synthetic samples draw an analytic vector potential
psi(x) = sum_m A_m sin(k_m . x + phi_m); its closed-form curl
u = sum_m (k_m x A_m) cos(k_m . x + phi_m) is exactly divergence-free, and
the vorticity w = curl u = -sum_m sin(.) k_m x (k_m x A_m) is available in
closed form as well. Pressure is a separate mode sum shared by the volume
and the body surface; wall shear projects a smooth vector field onto the
local tangent plane. Bodies are parametric (sphere or box) with exact
normals and per-point area weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .errors import CorruptDataError
from .geom import (
    NormalizationStats,
    PointCloud,
    radius_neighbors,
    split_anchors_queries,
    uniform_sample,
)
from .model import ModelBatch
from .transforms import (  # noqa: F401  (re-exported transform surface)
    expm1_signed,
    log1p_signed,
    sqrt_signed,
    sqrt_signed_inverse,
    sqrt_signed_torch,
)

MANIFEST_NAME = "manifest"
DATASET_FORMAT = "anchorcfd-dataset"
DATASET_VERSION = 1

SURFACE_FIELD_NAMES = ("p", "tau_x", "tau_y", "tau_z")
VOLUME_FIELD_NAMES = ("p", "u_x", "u_y", "u_z", "omega_x", "omega_y", "omega_z")


# ---------------------------------------------------------------------------
# Containers


@dataclass(frozen=True)
class FlowConstants:
    """Free-stream constants needed for force coefficients."""

    rho: float  # kg/m^3
    speed: float  # m/s, free-stream magnitude
    ref_area: float  # m^2
    flow_dir: tuple[float, float, float] = (1.0, 0.0, 0.0)
    lift_dir: tuple[float, float, float] = (0.0, 0.0, 1.0)
    p_inf: float = 0.0  # Pa

    def __post_init__(self) -> None:
        if not (self.rho > 0 and self.speed > 0 and self.ref_area > 0):
            raise ValueError("rho, speed, and ref_area must be positive")
        for name in ("flow_dir", "lift_dir"):
            e = np.asarray(getattr(self, name), dtype=np.float64)
            if e.shape != (3,) or abs(np.linalg.norm(e) - 1.0) > 1e-4:
                raise ValueError(f"{name} must be a 3D unit vector")
            object.__setattr__(self, name, tuple(float(x) for x in e))

    def to_dict(self) -> dict:
        return {
            "rho": self.rho,
            "speed": self.speed,
            "ref_area": self.ref_area,
            "flow_dir": list(self.flow_dir),
            "lift_dir": list(self.lift_dir),
            "p_inf": self.p_inf,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FlowConstants":
        return cls(
            rho=float(d["rho"]),
            speed=float(d["speed"]),
            ref_area=float(d["ref_area"]),
            flow_dir=tuple(d["flow_dir"]),
            lift_dir=tuple(d["lift_dir"]),
            p_inf=float(d.get("p_inf", 0.0)),
        )


def _check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class SurfaceFields:
    """Surface mesh points with pressure, wall shear, outward normals, areas."""

    positions: np.ndarray  # [n, 3] m
    pressure: np.ndarray  # [n] Pa
    shear: np.ndarray  # [n, 3] Pa
    normal: np.ndarray  # [n, 3] unit, outward
    area: np.ndarray  # [n] m^2

    def __post_init__(self) -> None:
        pos = _check_finite("surface positions", np.asarray(self.positions, np.float64))
        n = pos.shape[0]
        if pos.shape != (n, 3):
            raise ValueError("surface positions must be [n, 3]")
        p = _check_finite("surface pressure", np.asarray(self.pressure, np.float64).reshape(n))
        tau = _check_finite("surface shear", np.asarray(self.shear, np.float64))
        nrm = _check_finite("surface normals", np.asarray(self.normal, np.float64))
        ar = _check_finite("surface areas", np.asarray(self.area, np.float64).reshape(n))
        if tau.shape != (n, 3) or nrm.shape != (n, 3):
            raise ValueError("surface shear/normals must be [n, 3]")
        lengths = np.linalg.norm(nrm, axis=1)
        if np.abs(lengths - 1.0).max() > 1e-3:
            raise ValueError("surface normals must be unit vectors")
        if (ar < 0).any():
            raise ValueError("surface areas must be non-negative")
        for name, val in (("positions", pos), ("pressure", p), ("shear", tau), ("normal", nrm), ("area", ar)):
            object.__setattr__(self, name, val)

    @property
    def count(self) -> int:
        return int(self.positions.shape[0])


@dataclass(frozen=True)
class VolumeFields:
    """Volume points with pressure, velocity, vorticity."""

    positions: np.ndarray  # [m, 3] m
    pressure: np.ndarray  # [m] Pa
    velocity: np.ndarray  # [m, 3] m/s
    vorticity: np.ndarray  # [m, 3] 1/s

    def __post_init__(self) -> None:
        pos = _check_finite("volume positions", np.asarray(self.positions, np.float64))
        m = pos.shape[0]
        if pos.shape != (m, 3):
            raise ValueError("volume positions must be [m, 3]")
        p = _check_finite("volume pressure", np.asarray(self.pressure, np.float64).reshape(m))
        u = _check_finite("volume velocity", np.asarray(self.velocity, np.float64))
        w = _check_finite("volume vorticity", np.asarray(self.vorticity, np.float64))
        if u.shape != (m, 3) or w.shape != (m, 3):
            raise ValueError("volume velocity/vorticity must be [m, 3]")
        for name, val in (("positions", pos), ("pressure", p), ("velocity", u), ("vorticity", w)):
            object.__setattr__(self, name, val)

    @property
    def count(self) -> int:
        return int(self.positions.shape[0])


@dataclass(frozen=True)
class SimulationSample:
    """One simulation: geometry cloud, surface fields, volume fields, constants."""

    sample_id: str
    geometry: PointCloud
    surface: SurfaceFields
    volume: VolumeFields
    constants: FlowConstants


# ---------------------------------------------------------------------------
# Target transforms and normalization (transform functions live in
# transforms.py so the model's decoding heads can share them; re-exported
# here because they are part of this module's surface).


def fit_normalization(
    samples: list[SimulationSample],
    vorticity_transform: str = "log1p-signed",
) -> NormalizationStats:
    """Fit coordinate and target statistics on training samples.

    The bounding box spans the union of geometry, surface, and volume
    positions. Target channels use population mean/std pooled over all
    training points; vorticity channels are transformed first when the
    log1p-signed transform is active, so their stats describe transformed
    values. `vorticity_sigma` is always the pooled std of the raw components.
    """
    if not samples:
        raise ValueError("cannot fit normalization on zero samples")
    positions = [
        arr
        for s in samples
        for arr in (s.geometry.positions, s.surface.positions, s.volume.positions)
    ]
    all_pos = np.concatenate(positions, axis=0)
    bbox_min, bbox_max = all_pos.min(axis=0), all_pos.max(axis=0)

    surf = np.concatenate(
        [np.column_stack((s.surface.pressure, s.surface.shear)) for s in samples]
    )
    omega_raw = np.concatenate([s.volume.vorticity for s in samples])
    sigma = float(omega_raw.std())
    if not sigma > 0:
        raise ValueError("zero-variance vorticity field")
    if vorticity_transform == "log1p-signed":
        omega_stat = log1p_signed(omega_raw)
    elif vorticity_transform in ("sqrt-signed", "none"):
        omega_stat = omega_raw
    else:
        raise ValueError(f"unknown vorticity transform {vorticity_transform!r}")
    vol = np.column_stack(
        (
            np.concatenate([s.volume.pressure for s in samples]),
            np.concatenate([s.volume.velocity for s in samples]),
            omega_stat,
        )
    )
    return NormalizationStats(
        bbox_min=bbox_min,
        bbox_max=bbox_max,
        surface_mean=surf.mean(axis=0),
        surface_std=surf.std(axis=0),
        volume_mean=vol.mean(axis=0),
        volume_std=vol.std(axis=0),
        vorticity_transform=vorticity_transform,
        vorticity_sigma=sigma,
    )


def normalize_surface_targets(surface: SurfaceFields, stats: NormalizationStats) -> np.ndarray:
    """Standardized [n, 4] target matrix (p, tau)."""
    raw = np.column_stack((surface.pressure, surface.shear))
    return (raw - stats.surface_mean) / stats.surface_std


def unnormalize_surface(values: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Physics-unit [n, 4] matrix from standardized surface predictions."""
    values = np.asarray(values, dtype=np.float64)
    return values * stats.surface_std + stats.surface_mean


def normalize_volume_targets(volume: VolumeFields, stats: NormalizationStats) -> np.ndarray:
    """Standardized [m, 7] target matrix (p, u, omega').

    Vorticity is transformed (per `stats.vorticity_transform`) before
    standardization; velocity/pressure standardize raw values.
    """
    omega = volume.vorticity
    if stats.vorticity_transform == "log1p-signed":
        omega = log1p_signed(omega)
    raw = np.column_stack((volume.pressure, volume.velocity, omega))
    return (raw - stats.volume_mean) / stats.volume_std


def unnormalize_volume(values: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Physics-unit [m, 7] matrix from standardized volume predictions."""
    values = np.asarray(values, dtype=np.float64)
    raw = values * stats.volume_std + stats.volume_mean
    if stats.vorticity_transform == "log1p-signed":
        raw = raw.copy()
        raw[:, 4:7] = expm1_signed(raw[:, 4:7])
    return raw


# ---------------------------------------------------------------------------
# Dataset I/O


def _array_table(sample: SimulationSample) -> dict[str, np.ndarray]:
    return {
        "geometry.pos": sample.geometry.positions,
        "surface.pos": sample.surface.positions,
        "surface.p": sample.surface.pressure,
        "surface.tau": sample.surface.shear,
        "surface.normal": sample.surface.normal,
        "surface.area": sample.surface.area,
        "volume.pos": sample.volume.positions,
        "volume.p": sample.volume.pressure,
        "volume.u": sample.volume.velocity,
        "volume.omega": sample.volume.vorticity,
    }


ARRAY_NAMES = (
    "geometry.pos",
    "surface.pos",
    "surface.p",
    "surface.tau",
    "surface.normal",
    "surface.area",
    "volume.pos",
    "volume.p",
    "volume.u",
    "volume.omega",
)


def save_sample(root: Path, sample: SimulationSample) -> dict:
    """Write one sample's blobs; returns its manifest entry."""
    root = Path(root)
    blob_dir = root / "blobs" / sample.sample_id
    blob_dir.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name, arr in _array_table(sample).items():
        rel = f"blobs/{sample.sample_id}/{name}.f32"
        data = np.ascontiguousarray(arr, dtype="<f4")
        (root / rel).write_bytes(data.tobytes())
        arrays[name] = {
            "file": rel,
            "dtype": "f32",
            "shape": list(arr.shape),
            "offset": 0,
        }
    return {"arrays": arrays}


def write_dataset(
    root: Path,
    samples: list[SimulationSample],
    splits: dict[str, list[str]],
    constants: FlowConstants,
) -> Path:
    """Write a full dataset directory (manifest + blobs)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ids = [s.sample_id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate sample ids")
    seen: set[str] = set()
    for split, members in splits.items():
        for sid in members:
            if sid in seen:
                raise ValueError(f"sample {sid!r} appears in more than one split")
            if sid not in ids:
                raise ValueError(f"split {split!r} references unknown sample {sid!r}")
            seen.add(sid)
    entries = {s.sample_id: save_sample(root, s) for s in samples}
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "constants": constants.to_dict(),
        "splits": {k: list(v) for k, v in splits.items()},
        "samples": entries,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return root


def _read_blob(root: Path, spec: dict, name: str, sample_id: str) -> np.ndarray:
    path = Path(root) / spec["file"]
    shape = tuple(int(x) for x in spec["shape"])
    if spec.get("dtype", "f32") != "f32":
        raise CorruptDataError(f"{sample_id}/{name}: unsupported dtype {spec.get('dtype')!r}")
    expected = int(np.prod(shape)) * 4
    offset = int(spec.get("offset", 0))
    try:
        raw = path.read_bytes()
    except FileNotFoundError as exc:
        raise CorruptDataError(f"{sample_id}/{name}: missing blob {path}") from exc
    if len(raw) < offset + expected:
        raise CorruptDataError(
            f"{sample_id}/{name}: blob holds {len(raw)} bytes, "
            f"need {offset + expected}"
        )
    arr = np.frombuffer(raw, dtype="<f4", count=expected // 4, offset=offset)
    arr = arr.reshape(shape).astype(np.float64)
    if not np.isfinite(arr).all():
        raise CorruptDataError(f"{sample_id}/{name}: non-finite values")
    return arr


class Dataset:
    """Read access to an on-disk dataset directory."""

    def __init__(self, root: Path) -> None:
        self.root = Path(root)
        manifest_path = self.root / MANIFEST_NAME
        try:
            text = manifest_path.read_text(encoding="utf-8")
        except FileNotFoundError as exc:
            raise CorruptDataError(f"no manifest at {manifest_path}") from exc
        try:
            manifest = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CorruptDataError(f"manifest is not valid JSON: {exc}") from exc
        if manifest.get("format") != DATASET_FORMAT:
            raise CorruptDataError(f"unknown dataset format {manifest.get('format')!r}")
        self.manifest = manifest
        self.constants = FlowConstants.from_dict(manifest["constants"])
        seen: set[str] = set()
        for split, members in manifest["splits"].items():
            for sid in members:
                if sid in seen:
                    raise ValueError(f"sample {sid!r} appears in more than one split")
                if sid not in manifest["samples"]:
                    raise ValueError(f"split {split!r} references unknown sample {sid!r}")
                seen.add(sid)

    def split_ids(self, split: str) -> list[str]:
        if split not in self.manifest["splits"]:
            raise ValueError(
                f"unknown split {split!r}; have {sorted(self.manifest['splits'])}"
            )
        return list(self.manifest["splits"][split])

    @property
    def sample_ids(self) -> list[str]:
        return list(self.manifest["samples"])

    def load(self, sample_id: str) -> SimulationSample:
        if sample_id not in self.manifest["samples"]:
            raise ValueError(f"unknown sample id {sample_id!r}")
        specs = self.manifest["samples"][sample_id]["arrays"]
        missing = [n for n in ARRAY_NAMES if n not in specs]
        if missing:
            raise CorruptDataError(f"{sample_id}: manifest lacks arrays {missing}")
        arr = {n: _read_blob(self.root, specs[n], n, sample_id) for n in ARRAY_NAMES}
        try:
            return SimulationSample(
                sample_id=sample_id,
                geometry=PointCloud(arr["geometry.pos"]),
                surface=SurfaceFields(
                    positions=arr["surface.pos"],
                    pressure=arr["surface.p"],
                    shear=arr["surface.tau"],
                    normal=arr["surface.normal"],
                    area=arr["surface.area"],
                ),
                volume=VolumeFields(
                    positions=arr["volume.pos"],
                    pressure=arr["volume.p"],
                    velocity=arr["volume.u"],
                    vorticity=arr["volume.omega"],
                ),
                constants=self.constants,
            )
        except ValueError as exc:
            raise CorruptDataError(f"{sample_id}: {exc}") from exc

    def load_split(self, split: str) -> list[SimulationSample]:
        return [self.load(sid) for sid in self.split_ids(split)]


# ---------------------------------------------------------------------------
# Synthetic generation


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs of the synthetic analytic-flow generator."""

    num_geometry: int = 1024
    num_surface: int = 2048
    num_volume: int = 2048
    domain_min: tuple[float, float, float] = (0.0, 0.0, 0.0)
    domain_max: tuple[float, float, float] = (40.0, 40.0, 40.0)
    body: str = "sphere"  # "sphere" | "box"
    body_center: tuple[float, float, float] = (20.0, 20.0, 20.0)
    body_size: float = 8.0  # sphere radius / box half-extent, m
    num_modes: int = 6
    velocity_scale: float = 3.0  # m/s
    # Mean flow through the sampled box. The domain hugs the body (a near-wake
    # view), so the mean sits well below the tunnel speed used for
    # coefficient normalization.
    freestream: tuple[float, float, float] = (6.0, 0.0, 0.0)  # m/s
    pressure_scale: float = 40.0  # Pa
    shear_scale: float = 1.5  # Pa
    rho: float = 1.205
    speed: float = 30.0

    def __post_init__(self) -> None:
        if min(self.num_geometry, self.num_surface, self.num_volume) <= 0:
            raise ValueError("point counts must be positive")
        lo = np.asarray(self.domain_min, dtype=np.float64)
        hi = np.asarray(self.domain_max, dtype=np.float64)
        if not (hi > lo).all():
            raise ValueError("degenerate domain box")
        if self.body not in ("sphere", "box"):
            raise ValueError(f"unknown body {self.body!r}")
        if self.body_size <= 0:
            raise ValueError("body size must be positive")
        if self.num_modes <= 0:
            raise ValueError("need at least one flow mode")

    @property
    def constants(self) -> FlowConstants:
        if self.body == "sphere":
            ref_area = float(np.pi * self.body_size**2)
        else:
            ref_area = float(4.0 * self.body_size**2)  # projected square face
        return FlowConstants(rho=self.rho, speed=self.speed, ref_area=ref_area)


class AnalyticFlow:
    """Closed-form flow: psi, u = curl psi, w = curl u, pressure, shear donor.

    The velocity is a uniform mean flow plus solenoidal mode sums. All
    evaluators are batched [n, 3] -> array and exact (no discretization),
    which makes them usable as oracles for finite-difference operators.
    """

    def __init__(self, config: GeneratorConfig, rng: np.random.Generator) -> None:
        extent = float(
            np.max(np.asarray(config.domain_max) - np.asarray(config.domain_min))
        )
        m = config.num_modes
        # Wavelengths between extent and extent/3 keep fields smooth at domain scale.
        wavelengths = extent / rng.uniform(1.0, 3.0, size=m)
        k_dir = rng.normal(size=(m, 3))
        k_dir /= np.linalg.norm(k_dir, axis=1, keepdims=True)
        self.k = 2.0 * np.pi / wavelengths[:, None] * k_dir  # [m, 3]
        amp_dir = rng.normal(size=(m, 3))
        amp_dir /= np.linalg.norm(amp_dir, axis=1, keepdims=True)
        k_norm = np.linalg.norm(self.k, axis=1, keepdims=True)
        self.amp = config.velocity_scale / (k_norm * np.sqrt(m)) * amp_dir  # [m, 3]
        self.phase = rng.uniform(0.0, 2.0 * np.pi, size=m)

        jp = max(3, m // 2)
        p_wl = extent / rng.uniform(1.0, 3.0, size=jp)
        p_dir = rng.normal(size=(jp, 3))
        p_dir /= np.linalg.norm(p_dir, axis=1, keepdims=True)
        self.p_k = 2.0 * np.pi / p_wl[:, None] * p_dir
        self.p_amp = config.pressure_scale / np.sqrt(jp) * np.ones(jp)
        self.p_phase = rng.uniform(0.0, 2.0 * np.pi, size=jp)

        js = max(3, m // 2)
        s_wl = extent / rng.uniform(1.0, 3.0, size=js)
        s_dir = rng.normal(size=(js, 3))
        s_dir /= np.linalg.norm(s_dir, axis=1, keepdims=True)
        self.s_k = 2.0 * np.pi / s_wl[:, None] * s_dir
        s_amp_dir = rng.normal(size=(js, 3))
        s_amp_dir /= np.linalg.norm(s_amp_dir, axis=1, keepdims=True)
        self.s_amp = config.shear_scale / np.sqrt(js) * s_amp_dir
        self.s_phase = rng.uniform(0.0, 2.0 * np.pi, size=js)

        self.freestream = np.asarray(config.freestream, dtype=np.float64)

    def _theta(self, x: np.ndarray) -> np.ndarray:
        return x @ self.k.T + self.phase  # [n, m]

    def psi(self, x: np.ndarray) -> np.ndarray:
        """Vector potential, [n, 3]; curl(0.5 * U x x) recovers the mean flow."""
        x = np.asarray(x, np.float64)
        return np.sin(self._theta(x)) @ self.amp + 0.5 * np.cross(self.freestream, x)

    def velocity(self, x: np.ndarray) -> np.ndarray:
        """u = curl psi = U + sum_m cos(theta_m) (k_m x A_m); exactly solenoidal."""
        theta = self._theta(np.asarray(x, np.float64))
        k_cross_a = np.cross(self.k, self.amp)  # [m, 3]
        return np.cos(theta) @ k_cross_a + self.freestream

    def vorticity(self, x: np.ndarray) -> np.ndarray:
        """w = curl u = -sum_m sin(theta_m) k_m x (k_m x A_m)."""
        theta = self._theta(np.asarray(x, np.float64))
        k_cross_ka = np.cross(self.k, np.cross(self.k, self.amp))
        return -np.sin(theta) @ k_cross_ka

    def pressure(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, np.float64)
        return np.cos(x @ self.p_k.T + self.p_phase) @ self.p_amp

    def shear_donor(self, x: np.ndarray) -> np.ndarray:
        """Smooth vector field whose tangential projection becomes wall shear."""
        x = np.asarray(x, np.float64)
        return np.cos(x @ self.s_k.T + self.s_phase) @ self.s_amp


def _sample_body(
    config: GeneratorConfig, count: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Points, outward unit normals, and per-point area weights on the body."""
    center = np.asarray(config.body_center, dtype=np.float64)
    size = config.body_size
    if config.body == "sphere":
        direction = rng.normal(size=(count, 3))
        direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-12)
        points = center + size * direction
        areas = np.full(count, 4.0 * np.pi * size**2 / count)
        return points, direction, areas
    # Cube of half-extent `size`: pick a face uniformly (equal areas), then a
    # uniform point on it. Area weight is total area / count.
    face_axis = rng.integers(0, 3, size=count)
    face_sign = rng.choice((-1.0, 1.0), size=count)
    uv = rng.uniform(-size, size, size=(count, 2))
    points = np.empty((count, 3))
    normals = np.zeros((count, 3))
    for i in range(count):
        axis = face_axis[i]
        others = [a for a in (0, 1, 2) if a != axis]
        points[i, axis] = face_sign[i] * size
        points[i, others[0]] = uv[i, 0]
        points[i, others[1]] = uv[i, 1]
        normals[i, axis] = face_sign[i]
    points += center
    areas = np.full(count, 24.0 * size**2 / count)
    return points, normals, areas


def generate_synthetic(
    config: GeneratorConfig, seed: int, sample_id: str | None = None
) -> tuple[SimulationSample, AnalyticFlow]:
    """One synthetic sample plus its analytic flow (for oracle checks).

    Fields are globally smooth mode sums, so they are well defined at every
    geometry, surface, and volume point; the velocity is exactly
    divergence-free by construction.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    flow = AnalyticFlow(config, rng)
    lo = np.asarray(config.domain_min, dtype=np.float64)
    hi = np.asarray(config.domain_max, dtype=np.float64)

    geo_points, _, _ = _sample_body(config, config.num_geometry, rng)
    surf_points, normals, areas = _sample_body(config, config.num_surface, rng)
    vol_points = rng.uniform(lo, hi, size=(config.num_volume, 3))

    donor = flow.shear_donor(surf_points)
    shear = donor - (donor * normals).sum(axis=1, keepdims=True) * normals

    sample = SimulationSample(
        sample_id=sample_id or f"synthetic-{seed:05d}",
        geometry=PointCloud(geo_points),
        surface=SurfaceFields(
            positions=surf_points,
            pressure=flow.pressure(surf_points),
            shear=shear,
            normal=normals,
            area=areas,
        ),
        volume=VolumeFields(
            positions=vol_points,
            pressure=flow.pressure(vol_points),
            velocity=flow.velocity(vol_points),
            vorticity=flow.vorticity(vol_points),
        ),
        constants=config.constants,
    )
    return sample, flow


def generate_split_samples(
    config: GeneratorConfig, counts: dict[str, int], seed: int
) -> tuple[list[SimulationSample], dict[str, list[str]]]:
    """Samples and split membership for a whole synthetic dataset."""
    samples: list[SimulationSample] = []
    splits: dict[str, list[str]] = {}
    index = 0
    for split, n in counts.items():
        ids = []
        for _ in range(n):
            sid = f"{split}-{index:04d}"
            sample, _ = generate_synthetic(config, seed + index, sample_id=sid)
            samples.append(sample)
            ids.append(sid)
            index += 1
        splits[split] = ids
    return samples, splits


# ---------------------------------------------------------------------------
# Point sourcing / batch preparation


@dataclass(frozen=True)
class SourceCounts:
    """How many supernodes / anchors / queries to draw per forward pass."""

    supernodes: int = 256
    surface_anchors: int = 512
    volume_anchors: int = 512
    surface_queries: int = 0
    volume_queries: int = 0

    def __post_init__(self) -> None:
        if min(self.supernodes, self.surface_anchors, self.volume_anchors) <= 0:
            raise ValueError("supernode and anchor counts must be positive")
        if min(self.surface_queries, self.volume_queries) < 0:
            raise ValueError("query counts must be non-negative")


@dataclass
class PreparedSample:
    """Model inputs plus aligned normalized targets for one training step.

    Anchor targets are None in cad-grid mode (anchors are geometry/lattice
    points that carry no field values there, so the loss must use queries).
    `*_ids` trace each row back into the sample's clouds where applicable.
    """

    batch: ModelBatch
    surface_anchor_target: torch.Tensor | None
    volume_anchor_target: torch.Tensor | None
    surface_query_target: torch.Tensor
    volume_query_target: torch.Tensor
    surface_anchor_ids: np.ndarray | None
    volume_anchor_ids: np.ndarray | None
    surface_query_ids: np.ndarray
    volume_query_ids: np.ndarray


def _derived_seeds(seed: int, count: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(entropy=int(seed)).generate_state(count)]


def _sub_sample(population: int, count: int, seed: int) -> np.ndarray:
    """uniform_sample that tolerates drawing zero items from an empty pool."""
    if count == 0:
        return np.empty(0, dtype=np.int64)
    return uniform_sample(population, count, seed)


def _pos64(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64))


def _grid_anchor_positions(stats: NormalizationStats, count: int) -> np.ndarray:
    """Cell-center lattice over the train bbox with count = n^3 points."""
    n = round(count ** (1.0 / 3.0))
    if n**3 != count:
        raise ValueError(
            f"cad-grid volume anchor count must be a perfect cube, got {count}"
        )
    axes = [
        stats.bbox_min[d] + (np.arange(n) + 0.5) / n * stats.span[d] for d in range(3)
    ]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.column_stack((gx.ravel(), gy.ravel(), gz.ravel()))


def build_supernode_graph(
    sample: SimulationSample,
    stats: NormalizationStats,
    num_supernodes: int,
    radius: float,
    seed: int,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Supernode positions (network units) and their radius-graph edges.

    The search runs in physics space with the configured radius in meters;
    offsets are then scaled per axis into network units for embedding.
    """
    ids = uniform_sample(sample.geometry, num_supernodes, seed)
    centers_phys = sample.geometry.positions[ids]
    graph = radius_neighbors(sample.geometry.positions, centers_phys, radius)
    offsets_net = graph.offsets * stats.coord_scale[None, :]
    return (
        _pos64(stats.to_network(centers_phys)),
        torch.from_numpy(graph.edge_center),
        _pos64(offsets_net),
    )


def prepare_training_sample(
    sample: SimulationSample,
    stats: NormalizationStats,
    mode: str,
    counts: SourceCounts,
    radius: float,
    seed: int,
    target_dtype: torch.dtype = torch.float32,
) -> PreparedSample:
    """Draw supernodes, anchors, and queries for one step.

    cfd-mesh mode: anchors and queries are disjoint subsets of the simulation
    meshes (anchors carry targets). cad-grid mode: surface anchors come from
    the geometry cloud and volume anchors from a regular lattice over the
    train bbox — neither has targets — while queries still come from the
    meshes. Resampling with a fresh seed every step acts as data
    augmentation.
    """
    if mode not in ("cfd-mesh", "cad-grid"):
        raise ValueError(f"unknown mode {mode!r}")
    seeds = _derived_seeds(seed, 6)
    super_pos, edge_center, edge_offset = build_supernode_graph(
        sample, stats, counts.supernodes, radius, seeds[0]
    )
    surf_norm = normalize_surface_targets(sample.surface, stats)
    vol_norm = normalize_volume_targets(sample.volume, stats)

    def _tt(arr: np.ndarray) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(arr)).to(target_dtype)

    if mode == "cfd-mesh":
        s_split = split_anchors_queries(sample.surface.count, counts.surface_anchors, seeds[1])
        v_split = split_anchors_queries(sample.volume.count, counts.volume_anchors, seeds[2])
        if counts.surface_queries > s_split.num_queries:
            raise ValueError("not enough surface points left for queries")
        if counts.volume_queries > v_split.num_queries:
            raise ValueError("not enough volume points left for queries")
        sq_ids = s_split.query_ids[
            _sub_sample(s_split.num_queries, counts.surface_queries, seeds[3])
        ]
        vq_ids = v_split.query_ids[
            _sub_sample(v_split.num_queries, counts.volume_queries, seeds[4])
        ]
        sa_ids, va_ids = s_split.anchor_ids, v_split.anchor_ids
        sa_pos = sample.surface.positions[sa_ids]
        va_pos = sample.volume.positions[va_ids]
        sa_target = _tt(surf_norm[sa_ids])
        va_target = _tt(vol_norm[va_ids])
    else:  # cad-grid
        sa_ids = va_ids = None
        sa_pos = sample.geometry.positions[
            uniform_sample(sample.geometry, counts.surface_anchors, seeds[1])
        ]
        va_pos = _grid_anchor_positions(stats, counts.volume_anchors)
        sq_ids = _sub_sample(sample.surface.count, counts.surface_queries, seeds[3])
        vq_ids = _sub_sample(sample.volume.count, counts.volume_queries, seeds[4])
        sa_target = va_target = None

    batch = ModelBatch(
        supernode_pos=super_pos,
        edge_center=edge_center,
        edge_offset=edge_offset,
        surface_anchor_pos=_pos64(stats.to_network(sa_pos)),
        volume_anchor_pos=_pos64(stats.to_network(va_pos)),
        surface_query_pos=_pos64(stats.to_network(sample.surface.positions[sq_ids])),
        volume_query_pos=_pos64(stats.to_network(sample.volume.positions[vq_ids])),
    )
    return PreparedSample(
        batch=batch,
        surface_anchor_target=sa_target,
        volume_anchor_target=va_target,
        surface_query_target=_tt(surf_norm[sq_ids]),
        volume_query_target=_tt(vol_norm[vq_ids]),
        surface_anchor_ids=sa_ids,
        volume_anchor_ids=va_ids,
        surface_query_ids=sq_ids,
        volume_query_ids=vq_ids,
    )


def prepare_inference_batch(
    sample: SimulationSample,
    stats: NormalizationStats,
    mode: str,
    counts: SourceCounts,
    radius: float,
    seed: int,
) -> tuple[ModelBatch, np.ndarray | None, np.ndarray | None]:
    """Anchor-only batch (zero queries) for building an inference context.

    Returns the batch plus the surface/volume anchor mesh ids (None in
    cad-grid mode, where anchors are not mesh points).
    """
    prepared = prepare_training_sample(
        sample,
        stats,
        mode,
        replace(counts, surface_queries=0, volume_queries=0),
        radius,
        seed,
    )
    return prepared.batch, prepared.surface_anchor_ids, prepared.volume_anchor_ids
