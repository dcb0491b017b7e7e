"""Shape types and core geometric operations.

Shapes are dense 3D point clouds stored as flat float64 vectors with
interleaved coordinates (x1, y1, z1, ..., xn, yn, zn). 2D landmark sets use
the same flat layout in the plane. All rotation matrices are proper rotations
(R^T R = I, det R = +1), and everything is computed in double precision.

The camera model is weak perspective: a point p maps to the image as
u = f * P @ (R @ (p + t)), where P is the orthographic projector that drops
the third row. The projector is internal to `project_landmarks`; it is never
exposed as data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, InvalidArgumentError

# Tolerance for accepting a matrix as a proper rotation.
ROTATION_TOL = 1e-10

# Minimum point count for pose estimation and Procrustes alignment.
MIN_POINTS = 4


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise InvalidArgumentError(message)


def _readonly(values, dtype=np.float64) -> np.ndarray:
    out = np.array(values, dtype=dtype, order="C", copy=True)
    out.setflags(write=False)
    return out


def _check_rotation(rotation: np.ndarray, what: str) -> None:
    _require(rotation.shape == (3, 3), f"{what} must be 3x3, got {rotation.shape}")
    _require(bool(np.all(np.isfinite(rotation))), f"{what} must be finite")
    gram_err = np.max(np.abs(rotation.T @ rotation - np.eye(3)))
    _require(gram_err <= ROTATION_TOL, f"{what} is not orthonormal (max deviation {gram_err:.3e})")
    det_err = abs(np.linalg.det(rotation) - 1.0)
    _require(det_err <= ROTATION_TOL, f"{what} is not proper (|det - 1| = {det_err:.3e})")


@dataclass(frozen=True)
class Shape:
    """Dense 3D point cloud as a flat coordinate vector of length 3n, n >= 4."""

    coords: np.ndarray

    def __post_init__(self):
        coords = _readonly(np.ravel(self.coords))
        object.__setattr__(self, "coords", coords)
        _require(coords.size % 3 == 0,
                 f"coordinate vector length {coords.size} is not a multiple of 3")
        _require(coords.size >= 3 * MIN_POINTS,
                 f"shape needs at least {MIN_POINTS} vertices, got {coords.size // 3}")
        _require(bool(np.all(np.isfinite(coords))), "shape coordinates must be finite")

    @property
    def n(self) -> int:
        return self.coords.size // 3

    @property
    def points(self) -> np.ndarray:
        """Vertices as a read-only (n, 3) view."""
        return self.coords.reshape(self.n, 3)


@dataclass(frozen=True)
class LandmarkSet2D:
    """Flat 2D landmark vector (u1, v1, ..., uL, vL)."""

    coords: np.ndarray

    def __post_init__(self):
        coords = _readonly(np.ravel(self.coords))
        object.__setattr__(self, "coords", coords)
        _require(coords.size % 2 == 0,
                 f"2D coordinate vector length {coords.size} is not a multiple of 2")
        _require(coords.size > 0, "landmark set must be non-empty")
        _require(bool(np.all(np.isfinite(coords))), "landmark coordinates must be finite")

    @property
    def count(self) -> int:
        return self.coords.size // 2

    @property
    def points(self) -> np.ndarray:
        """Landmarks as a read-only (L, 2) view."""
        return self.coords.reshape(self.count, 2)


@dataclass(frozen=True)
class CoeffPair:
    """Identity and per-instance residual (expression) coefficient vectors."""

    alpha_id: np.ndarray
    alpha_exp: np.ndarray

    def __post_init__(self):
        alpha_id = _readonly(np.ravel(self.alpha_id))
        alpha_exp = _readonly(np.ravel(self.alpha_exp))
        object.__setattr__(self, "alpha_id", alpha_id)
        object.__setattr__(self, "alpha_exp", alpha_exp)
        _require(bool(np.all(np.isfinite(alpha_id))), "alpha_id must be finite")
        _require(bool(np.all(np.isfinite(alpha_exp))), "alpha_exp must be finite")


@dataclass(frozen=True)
class PoseParams:
    """Weak-perspective camera: scale f > 0, proper rotation R, translation t.

    A point p projects to f * P @ (R @ (p + t)), with t expressed in the model
    frame (applied before rotation).
    """

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = _readonly(self.rotation)
        translation = _readonly(np.ravel(self.translation))
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)
        _require(np.isfinite(self.scale) and self.scale > 0.0,
                 f"scale must be finite and positive, got {self.scale}")
        _check_rotation(rotation, "pose rotation")
        _require(translation.shape == (3,),
                 f"translation must have 3 components, got {translation.shape}")
        _require(bool(np.all(np.isfinite(translation))), "translation must be finite")


@dataclass(frozen=True)
class SimilarityTransform:
    """Similarity map q = scale * R @ p + t with a proper rotation R."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = _readonly(self.rotation)
        translation = _readonly(np.ravel(self.translation))
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)
        _require(np.isfinite(self.scale) and self.scale > 0.0,
                 f"scale must be finite and positive, got {self.scale}")
        _check_rotation(rotation, "similarity rotation")
        _require(translation.shape == (3,),
                 f"translation must have 3 components, got {translation.shape}")
        _require(bool(np.all(np.isfinite(translation))), "translation must be finite")

    def inverse(self) -> "SimilarityTransform":
        """Analytic inverse: scale 1/s, rotation R^T, translation -R^T t / s."""
        inv_scale = 1.0 / self.scale
        inv_rot = self.rotation.T
        inv_t = -inv_scale * (inv_rot @ self.translation)
        return SimilarityTransform(inv_scale, inv_rot, inv_t)


@dataclass(frozen=True)
class MorphableModel:
    """Linear shape model: mean plus identity and residual basis matrices.

    A shape instance is mean + basis_id @ alpha_id + basis_exp @ alpha_exp.
    Columns of the generated synthetic bases are orthonormal, but that is a
    property of the generator, not a requirement of this container; fitted or
    loaded models only need consistent dimensions and positive sigmas.
    """

    mean: Shape
    basis_id: np.ndarray        # (3n, k_id)
    basis_exp: np.ndarray       # (3n, k_exp)
    sigma_id: np.ndarray        # (k_id,), per-dimension sampling std, > 0
    sigma_exp: np.ndarray       # (k_exp,)
    landmark_indices: np.ndarray  # (L,) distinct vertex indices, L >= 4
    nose_tip_index: int

    def __post_init__(self):
        basis_id = _readonly(self.basis_id)
        basis_exp = _readonly(self.basis_exp)
        sigma_id = _readonly(np.ravel(self.sigma_id))
        sigma_exp = _readonly(np.ravel(self.sigma_exp))
        landmarks = _readonly(np.ravel(self.landmark_indices), dtype=np.int64)
        object.__setattr__(self, "basis_id", basis_id)
        object.__setattr__(self, "basis_exp", basis_exp)
        object.__setattr__(self, "sigma_id", sigma_id)
        object.__setattr__(self, "sigma_exp", sigma_exp)
        object.__setattr__(self, "landmark_indices", landmarks)
        object.__setattr__(self, "nose_tip_index", int(self.nose_tip_index))

        dim = self.mean.coords.size
        _require(basis_id.ndim == 2 and basis_id.shape[0] == dim,
                 f"basis_id must be ({dim}, k_id), got {basis_id.shape}")
        _require(basis_exp.ndim == 2 and basis_exp.shape[0] == dim,
                 f"basis_exp must be ({dim}, k_exp), got {basis_exp.shape}")
        _require(basis_id.shape[1] >= 1, "basis_id needs at least one column")
        _require(basis_exp.shape[1] >= 1, "basis_exp needs at least one column")
        _require(bool(np.all(np.isfinite(basis_id))), "basis_id must be finite")
        _require(bool(np.all(np.isfinite(basis_exp))), "basis_exp must be finite")
        _require(sigma_id.shape == (basis_id.shape[1],),
                 "sigma_id length must match basis_id columns")
        _require(sigma_exp.shape == (basis_exp.shape[1],),
                 "sigma_exp length must match basis_exp columns")
        _require(bool(np.all(np.isfinite(sigma_id))) and bool(np.all(sigma_id > 0)),
                 "sigma_id entries must be finite and positive")
        _require(bool(np.all(np.isfinite(sigma_exp))) and bool(np.all(sigma_exp > 0)),
                 "sigma_exp entries must be finite and positive")
        n = self.mean.n
        _require(landmarks.size >= MIN_POINTS,
                 f"need at least {MIN_POINTS} landmark indices, got {landmarks.size}")
        _require(bool(np.all(landmarks >= 0)) and bool(np.all(landmarks < n)),
                 "landmark indices out of vertex range")
        _require(np.unique(landmarks).size == landmarks.size,
                 "landmark indices must be distinct")
        _require(0 <= self.nose_tip_index < n, "nose_tip_index out of vertex range")

    @property
    def n(self) -> int:
        return self.mean.n

    @property
    def k_id(self) -> int:
        return self.basis_id.shape[1]

    @property
    def k_exp(self) -> int:
        return self.basis_exp.shape[1]

    @property
    def n_landmarks(self) -> int:
        return self.landmark_indices.size


def coord_rows(indices: np.ndarray) -> np.ndarray:
    """Flat coordinate-row indices (3i, 3i+1, 3i+2) for the given vertex indices."""
    idx = np.asarray(indices, dtype=np.int64)
    return (3 * idx[:, None] + np.arange(3)).ravel()


def compose_shape(model: MorphableModel, coeffs: CoeffPair) -> Shape:
    """Compose mean + basis_id @ alpha_id + basis_exp @ alpha_exp."""
    _require(coeffs.alpha_id.size == model.k_id,
             f"alpha_id has {coeffs.alpha_id.size} entries, model expects {model.k_id}")
    _require(coeffs.alpha_exp.size == model.k_exp,
             f"alpha_exp has {coeffs.alpha_exp.size} entries, model expects {model.k_exp}")
    return Shape(model.mean.coords
                 + model.basis_id @ coeffs.alpha_id
                 + model.basis_exp @ coeffs.alpha_exp)


def compose_from_components(mean: Shape, delta_id: np.ndarray,
                            delta_res: np.ndarray) -> Shape:
    """Compose mean + delta_id + delta_res from precomputed shape deltas."""
    delta_id = np.ravel(np.asarray(delta_id, dtype=np.float64))
    delta_res = np.ravel(np.asarray(delta_res, dtype=np.float64))
    _require(delta_id.size == mean.coords.size,
             f"delta_id length {delta_id.size} != mean length {mean.coords.size}")
    _require(delta_res.size == mean.coords.size,
             f"delta_res length {delta_res.size} != mean length {mean.coords.size}")
    # deltas are summed first so exactly opposite deltas cancel bitwise
    return Shape(mean.coords + (delta_id + delta_res))


def select_landmarks(shape: Shape, indices: np.ndarray) -> np.ndarray:
    """Gather the (L, 3) landmark vertex positions for the given indices."""
    idx = np.asarray(indices)
    _require(idx.ndim == 1 and idx.size > 0, "indices must be a non-empty 1-D sequence")
    _require(np.issubdtype(idx.dtype, np.integer), "indices must be integers")
    _require(bool(np.all(idx >= 0)) and bool(np.all(idx < shape.n)),
             f"landmark indices must lie in [0, {shape.n})")
    return np.array(shape.points[idx], dtype=np.float64)


def project_landmarks(points3d: np.ndarray, pose: PoseParams) -> LandmarkSet2D:
    """Weak-perspective projection u_i = f * P @ (R @ (p_i + t)) of (L, 3) points."""
    pts = np.asarray(points3d, dtype=np.float64)
    _require(pts.ndim == 2 and pts.shape[1] == 3,
             f"points3d must be (L, 3), got {pts.shape}")
    rotated = (pts + pose.translation) @ pose.rotation.T
    return LandmarkSet2D((pose.scale * rotated[:, :2]).ravel())


def procrustes_align(source: np.ndarray, target: np.ndarray) -> SimilarityTransform:
    """Closed-form similarity alignment of source onto target point lists.

    Minimizes sum_i || s * R @ p_i + t - q_i ||^2 over scale s > 0, proper
    rotation R and translation t, via the SVD of the centered cross-covariance
    with determinant sign correction. Both inputs are (L, 3) with L >= 4.
    """
    src = np.asarray(source, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    _require(src.ndim == 2 and src.shape[1] == 3, f"source must be (L, 3), got {src.shape}")
    _require(tgt.shape == src.shape,
             f"source and target shapes differ: {src.shape} vs {tgt.shape}")
    _require(src.shape[0] >= MIN_POINTS,
             f"need at least {MIN_POINTS} points, got {src.shape[0]}")
    _require(bool(np.all(np.isfinite(src))) and bool(np.all(np.isfinite(tgt))),
             "points must be finite")

    mu_src = src.mean(axis=0)
    mu_tgt = tgt.mean(axis=0)
    x = src - mu_src
    y = tgt - mu_tgt
    var_src = float(np.mean(np.sum(x * x, axis=1)))
    if var_src <= 0.0:
        raise DegenerateGeometryError("source points are coincident")

    cov = (y.T @ x) / src.shape[0]
    u, s, vt = np.linalg.svd(cov)
    if s[0] <= 0.0 or s[1] <= 1e-12 * s[0]:
        raise DegenerateGeometryError(
            "cross-covariance is rank deficient; points are collinear or coincident")

    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0.0:
        d[2] = -1.0
    rotation = u @ np.diag(d) @ vt
    scale = float(np.sum(s * d)) / var_src
    if scale <= 0.0:
        raise DegenerateGeometryError("alignment collapsed to non-positive scale")
    translation = mu_tgt - scale * (rotation @ mu_src)
    return SimilarityTransform(scale, rotation, translation)


def apply_transform(shape: Shape, transform: SimilarityTransform) -> Shape:
    """Apply q_i = s * R @ p_i + t to every vertex."""
    pts = shape.points @ (transform.scale * transform.rotation).T + transform.translation
    return Shape(pts.ravel())


def crop_indices(shape: Shape, center_index: int, radius: float) -> np.ndarray:
    """Sorted vertex indices within Euclidean `radius` of the center vertex.

    The boundary is inclusive, so radius 0 yields exactly the center vertex.
    """
    _require(0 <= center_index < shape.n,
             f"center_index {center_index} out of range [0, {shape.n})")
    _require(np.isfinite(radius) and radius >= 0.0,
             f"radius must be finite and non-negative, got {radius}")
    dists = np.linalg.norm(shape.points - shape.points[center_index], axis=1)
    return np.sort(np.flatnonzero(dists <= radius)).astype(np.int64)


def rmse(pairs: list[tuple[Shape, Shape]], indices: np.ndarray) -> float:
    """Cropped shape error (1/N) * sum_i ||g_i - p_i|| / n_c over shape pairs.

    Each pair is (ground_truth, predicted); both are restricted to the common
    crop index list of size n_c, the stacked 3*n_c coordinate difference is
    measured with the Euclidean norm, divided by the vertex count n_c, and the
    result is averaged over pairs. Note the divisor is the vertex count, not
    the norm-per-vertex average; the companion per-vertex mean distance is
    reported separately by the evaluation layer.
    """
    _require(len(pairs) > 0, "need at least one shape pair")
    idx = np.asarray(indices)
    _require(idx.ndim == 1 and idx.size > 0, "crop index list must be non-empty")
    _require(np.issubdtype(idx.dtype, np.integer), "crop indices must be integers")
    rows = coord_rows(idx)
    total = 0.0
    for ground_truth, predicted in pairs:
        _require(ground_truth.n == predicted.n,
                 f"pair has mismatched vertex counts {ground_truth.n} vs {predicted.n}")
        _require(bool(np.all(idx >= 0)) and bool(np.all(idx < ground_truth.n)),
                 "crop indices out of vertex range")
        diff = ground_truth.coords[rows] - predicted.coords[rows]
        total += float(np.linalg.norm(diff)) / idx.size
    return total / len(pairs)


def rotation_zyx(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Rotation from intrinsic Z-Y-X Euler angles: R = Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    cz, sz = np.cos(yaw), np.sin(yaw)
    cy, sy = np.cos(pitch), np.sin(pitch)
    cx, sx = np.cos(roll), np.sin(roll)
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    return rz @ ry @ rx
