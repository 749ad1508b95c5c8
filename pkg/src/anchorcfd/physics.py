"""Differential and integral operators on predicted fields.

The finite-difference operators act on arbitrary batched callables
f: [n, 3] -> [n, C]; positions, step, and output share whatever coordinate
frame the callable uses. Central differences are second order:

    df_i/dx_j  ~=  (f_i(x + d e_j) - f_i(x - d e_j)) / (2 d)

A model evaluated in network coordinates yields the network Jacobian; the
physics Jacobian follows from the chain rule through the per-axis affine
coordinate and output scalings,

    J_phys[i][j] = b_i * a_j * J_net[i][j]

(`jacobian_correction`), i.e. the elementwise product with the outer product
b a^T. Curl composed with divergence cancels exactly for commuting stencils:
when the inner and outer differences reuse the same step, every velocity
evaluation lands on a shared lattice point and the mixed partial terms cancel
to rounding error.

`surface_force` integrates pressure and wall shear over the discrete surface;
`knn_interpolate` is the training-free interpolation baseline.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch

from .geom import knn_neighbors

FieldFn = Callable[[torch.Tensor], torch.Tensor]

#: Weight floor of the inverse-distance interpolation, in meters.
KNN_EPSILON = 1e-12


def _as_points(x: torch.Tensor | np.ndarray) -> torch.Tensor:
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x))
    if x.ndim == 1:
        x = x.unsqueeze(0)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ValueError(f"positions must be [n, 3], got {tuple(x.shape)}")
    return x


def _axis_offset(x: torch.Tensor, axis: int, delta: float) -> tuple[torch.Tensor, torch.Tensor]:
    step = torch.zeros_like(x)
    step[:, axis] = delta
    return x + step, x - step


def fd_partial(field: FieldFn, x: torch.Tensor | np.ndarray, axis: int, delta: float) -> torch.Tensor:
    """Central-difference partial derivative of a batched field along one axis."""
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1, or 2, got {axis}")
    if not delta > 0:
        raise ValueError("delta must be positive")
    x = _as_points(x)
    plus, minus = _axis_offset(x, axis, delta)
    return (field(plus) - field(minus)) / (2.0 * delta)


def fd_jacobian(field: FieldFn, x: torch.Tensor | np.ndarray, delta: float) -> torch.Tensor:
    """Full Jacobian J[:, i, j] = df_i/dx_j from six offset evaluations."""
    x = _as_points(x)
    cols = [fd_partial(field, x, axis, delta) for axis in (0, 1, 2)]
    return torch.stack(cols, dim=-1)  # [n, C, 3]


def curl_from_jacobian(jac: torch.Tensor) -> torch.Tensor:
    """Axial vector of a [n, 3, 3] Jacobian: curl_i = J[k, j] - J[j, k], (i,j,k) cyclic."""
    if jac.ndim != 3 or jac.shape[1:] != (3, 3):
        raise ValueError(f"jacobian must be [n, 3, 3], got {tuple(jac.shape)}")
    return torch.stack(
        (
            jac[:, 2, 1] - jac[:, 1, 2],
            jac[:, 0, 2] - jac[:, 2, 0],
            jac[:, 1, 0] - jac[:, 0, 1],
        ),
        dim=-1,
    )


def fd_curl(field: FieldFn, x: torch.Tensor | np.ndarray, delta: float) -> torch.Tensor:
    """Curl of a batched 3-vector field via six central-difference passes."""
    x = _as_points(x)
    jac = fd_jacobian(field, x, delta)
    if jac.shape[1] != 3:
        raise ValueError("curl needs a 3-component field")
    return curl_from_jacobian(jac)


def jacobian_correction(jac_net: torch.Tensor, a, b) -> torch.Tensor:
    """Map a network-frame Jacobian to physics units: J[i][j] *= b_i * a_j.

    `a` is the per-axis network-per-meter coordinate scale, `b` the per-output
    physics-per-network-unit scale; the correction is the elementwise product
    with the rank-one matrix b a^T.
    """
    if jac_net.ndim != 3:
        raise ValueError(f"jacobian must be [n, C, 3], got {tuple(jac_net.shape)}")
    a_t = torch.as_tensor(np.asarray(a), dtype=jac_net.dtype).reshape(3)
    b_t = torch.as_tensor(np.asarray(b), dtype=jac_net.dtype).reshape(jac_net.shape[1])
    if not (torch.isfinite(a_t).all() and torch.isfinite(b_t).all()):
        raise ValueError("scales must be finite")
    return jac_net * b_t[None, :, None] * a_t[None, None, :]


def divergence_of_predicted_vorticity(
    field: FieldFn,
    x: torch.Tensor | np.ndarray,
    delta: float,
    axis_scale=None,
) -> torch.Tensor:
    """div of a 3-vector field by central differences, sum_i s_i * d f_i / dx_i.

    `field` is typically a predicted-vorticity callable that internally runs
    the curl head; using the same `delta` here as inside that head makes the
    inner and outer stencils commute, so the result measures pure rounding
    error for a curl-derived field. `axis_scale` (s, default ones) converts
    per-axis derivatives to physics units when `field` runs in network
    coordinates.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    x = _as_points(x)
    scale = torch.ones(3, dtype=torch.float64)
    if axis_scale is not None:
        scale = torch.as_tensor(np.asarray(axis_scale), dtype=torch.float64).reshape(3)
    total = None
    for axis in (0, 1, 2):
        plus, minus = _axis_offset(x, axis, delta)
        diff = (field(plus)[:, axis] - field(minus)[:, axis]) / (2.0 * delta)
        term = diff.to(torch.float64) * scale[axis]
        total = term if total is None else total + term
    return total


def surface_force(
    pressure: np.ndarray,
    shear: np.ndarray,
    normals: np.ndarray,
    areas: np.ndarray,
    p_inf: float = 0.0,
) -> np.ndarray:
    """Total aerodynamic force sum_i [-(p_i - p_inf) n_i + tau_i] dS_i.

    Normals point outward from the body into the fluid; `shear` is the wall
    shear-stress vector per point (already tangential), in Pa.
    """
    p = np.asarray(pressure, dtype=np.float64).ravel()
    tau = np.asarray(shear, dtype=np.float64)
    n = np.asarray(normals, dtype=np.float64)
    ds = np.asarray(areas, dtype=np.float64).ravel()
    if tau.shape != (p.shape[0], 3) or n.shape != (p.shape[0], 3):
        raise ValueError("pressure, shear, and normals must agree on point count")
    if ds.shape != p.shape:
        raise ValueError("areas must match point count")
    if (ds < 0).any():
        raise ValueError("negative patch area")
    if not (np.isfinite(p).all() and np.isfinite(tau).all() and np.isfinite(n).all()):
        raise ValueError("non-finite surface fields")
    return ((-(p - p_inf)[:, None] * n + tau) * ds[:, None]).sum(axis=0)


def drag_lift_coefficients(
    force: np.ndarray,
    rho: float,
    speed: float,
    ref_area: float,
    flow_dir: np.ndarray,
    lift_dir: np.ndarray,
) -> tuple[float, float]:
    """C = 2 F . e / (rho speed^2 ref_area) for the drag and lift directions."""
    if not (rho > 0 and speed > 0 and ref_area > 0):
        raise ValueError("rho, speed, and reference area must be positive")
    f = np.asarray(force, dtype=np.float64).reshape(3)
    coeffs = []
    for name, direction in (("flow", flow_dir), ("lift", lift_dir)):
        e = np.asarray(direction, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(e)
        if abs(norm - 1.0) > 1e-4:
            raise ValueError(f"{name} direction must be a unit vector, |e|={norm:.6g}")
        coeffs.append(2.0 * float(f @ e) / (rho * speed**2 * ref_area))
    return coeffs[0], coeffs[1]


def knn_interpolate(
    anchor_pos: np.ndarray,
    anchor_values: np.ndarray,
    query_pos: np.ndarray,
    k: int = 3,
) -> np.ndarray:
    """Inverse-distance interpolation from anchors to queries.

    Uses the k nearest anchors with weights 1 / max(d, 1e-12); a query that
    coincides with an anchor returns that anchor's value exactly.
    """
    values = np.asarray(anchor_values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != np.asarray(anchor_pos).shape[0]:
        raise ValueError("anchor positions and values disagree on count")
    graph = knn_neighbors(np.asarray(anchor_pos), np.asarray(query_pos), k)
    neigh_vals = values[graph.edge_point].reshape(-1, k, values.shape[1])
    dists = graph.distances.reshape(-1, k)
    weights = 1.0 / np.maximum(dists, KNN_EPSILON)
    out = (weights[:, :, None] * neigh_vals).sum(axis=1) / weights.sum(axis=1)[:, None]
    # Exact hits bypass the weighted average entirely.
    hit_rows, hit_cols = np.nonzero(dists == 0.0)
    if hit_rows.size:
        hit_ids = graph.edge_point.reshape(-1, k)[hit_rows, hit_cols]
        out[hit_rows] = values[hit_ids]
    return out
