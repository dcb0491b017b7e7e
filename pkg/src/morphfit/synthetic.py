"""Seeded synthetic morphable models and rendered datasets.

Everything here is deterministic: the mean surface and the landmark subset
depend only on the vertex count, the bases on the model seed, and dataset
sampling on the dataset seed through spawned per-subject and per-image
generators, so samples could be drawn in parallel without changing results.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .geometry import (CoeffPair, LandmarkSet2D, MorphableModel, PoseParams,
                       Shape, compose_shape, coord_rows, project_landmarks,
                       rotation_zyx, select_landmarks)

# Landmark subset size, fixed across all synthetic models.
N_LANDMARKS = 68

# Random Fourier features per smooth field channel.
_N_FEATURES = 24

# Geometric decay ratio of the per-dimension sampling stds.
_SIGMA_DECAY = 0.9


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise InvalidArgumentError(message)


@dataclass(frozen=True)
class SyntheticModelSpec:
    """Parameters of the synthetic model generator."""

    n_vertices: int = 600
    k_id: int = 20
    k_exp: int = 8
    smoothness: float = 0.5
    seed: int = 0

    def __post_init__(self):
        _require(self.k_id >= 1, "k_id must be >= 1")
        _require(self.k_exp >= 1, "k_exp must be >= 1")
        minimum = max(self.k_id + self.k_exp + 1, N_LANDMARKS)
        _require(self.n_vertices >= minimum,
                 f"n_vertices must be >= {minimum}, got {self.n_vertices}")
        _require(np.isfinite(self.smoothness) and self.smoothness > 0,
                 "smoothness must be finite and positive")
        _require(self.seed >= 0, "seed must be non-negative")


@dataclass(frozen=True)
class PoseRanges:
    """Closed sampling intervals (lo, hi) for each pose parameter.

    Angles are radians for the intrinsic Z-Y-X convention of `rotation_zyx`;
    scale must stay positive; translations are in model units and applied
    before rotation. Defaults are a near-frontal jitter: at the default
    32x32 raster resolution a pixel spans ~6% of the face, so wider pose
    sweeps would drown the shape signal the encoder is meant to learn.
    Fitting-oriented workloads should widen these explicitly.
    """

    yaw: tuple[float, float] = (-0.015, 0.015)
    pitch: tuple[float, float] = (-0.025, 0.025)
    roll: tuple[float, float] = (-0.015, 0.015)
    scale: tuple[float, float] = (0.99, 1.01)
    tx: tuple[float, float] = (-0.01, 0.01)
    ty: tuple[float, float] = (-0.01, 0.01)
    tz: tuple[float, float] = (-0.01, 0.01)

    def __post_init__(self):
        for name in ("yaw", "pitch", "roll", "scale", "tx", "ty", "tz"):
            lo, hi = getattr(self, name)
            _require(np.isfinite(lo) and np.isfinite(hi) and lo <= hi,
                     f"pose range {name} must satisfy lo <= hi, got ({lo}, {hi})")
        _require(self.scale[0] > 0, "scale range must stay positive")


@dataclass(frozen=True)
class DatasetSpec:
    """Parameters of the rendered dataset builder."""

    n_subjects: int = 20
    images_per_subject: int = 10
    landmark_noise_sigma: float = 0.0
    pose_ranges: PoseRanges = field(default_factory=PoseRanges)
    image_resolution: int = 32
    seed: int = 0

    def __post_init__(self):
        _require(self.n_subjects >= 2, "need at least 2 subjects")
        _require(self.images_per_subject >= 1, "need at least 1 image per subject")
        _require(np.isfinite(self.landmark_noise_sigma)
                 and self.landmark_noise_sigma >= 0,
                 "landmark_noise_sigma must be finite and non-negative")
        _require(self.image_resolution >= 8, "image_resolution must be >= 8")
        _require(self.seed >= 0, "seed must be non-negative")


@dataclass(frozen=True)
class RenderedSample:
    """One rendered observation of one subject."""

    subject_label: int
    ground_truth_coeffs: CoeffPair
    ground_truth_pose: PoseParams
    landmarks: LandmarkSet2D
    depth_image: np.ndarray
    ground_truth_shape: Shape

    def __post_init__(self):
        depth = np.array(self.depth_image, dtype=np.float64, copy=True)
        depth.setflags(write=False)
        object.__setattr__(self, "depth_image", depth)
        object.__setattr__(self, "subject_label", int(self.subject_label))
        _require(self.subject_label >= 0, "subject_label must be non-negative")
        _require(depth.ndim == 2 and depth.shape[0] == depth.shape[1],
                 f"depth_image must be square, got {depth.shape}")
        _require(bool(np.all(np.isfinite(depth))), "depth_image must be finite")
        _require(bool(np.all(depth >= -1.0)) and bool(np.all(depth <= 1.0)),
                 "depth_image values must lie in [-1, 1]")


@dataclass(frozen=True)
class Dataset:
    """Rendered samples plus the generating model and a deterministic split.

    Subjects are split into an initial block used for training and a final
    block held out for verification; within each training subject the last
    fifth of its images forms the validation set. Index lists refer to
    positions in `samples`.
    """

    model: MorphableModel
    spec: DatasetSpec
    samples: list[RenderedSample]
    train_indices: np.ndarray
    val_indices: np.ndarray
    test_indices: np.ndarray

    @property
    def n_train_subjects(self) -> int:
        return self.spec.n_subjects - len(self.heldout_subjects)

    @property
    def heldout_subjects(self) -> list[int]:
        k = self.spec.n_subjects
        n_heldout = min(max(1, round(k / 4)), k - 1)
        return list(range(k - n_heldout, k))


def _mean_face_vertices(n: int) -> np.ndarray:
    """Deterministic front-facing ellipsoidal surface with a nose bump.

    Vertices are a Fibonacci lattice on the +z half of an ellipsoid, displaced
    along z by a central bump (making the max-z vertex a nose tip) and a mild
    low-frequency ripple. Depends only on the vertex count.
    """
    i = np.arange(n, dtype=np.float64)
    cos_theta = 1.0 - 0.92 * (i + 0.5) / n
    sin_theta = np.sqrt(np.clip(1.0 - cos_theta ** 2, 0.0, 1.0))
    azimuth = np.pi * (3.0 - np.sqrt(5.0)) * i
    x = 0.75 * sin_theta * np.cos(azimuth)
    y = 1.0 * sin_theta * np.sin(azimuth)
    z = 0.55 * cos_theta
    z = z + 0.30 * np.exp(-(x ** 2 / 0.030 + y ** 2 / 0.045))
    z = z + 0.05 * np.sin(2.5 * y) * np.cos(1.5 * x)
    return np.column_stack([x, y, z])


def _smooth_fields(positions: np.ndarray, n_fields: int, smoothness: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Stack of smooth random displacement fields as a (3n, n_fields) matrix.

    Each field assigns every vertex a 3-vector; each component is a random
    Fourier series cos(p @ w + phi) with frequencies ~ N(0, 1/smoothness^2),
    so larger smoothness means longer spatial wavelengths.
    """
    n = positions.shape[0]
    freq_std = 1.0 / smoothness
    omegas = rng.normal(0.0, freq_std, size=(n_fields, 3, _N_FEATURES, 3))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(n_fields, 3, _N_FEATURES))
    amps = rng.normal(0.0, 1.0, size=(n_fields, 3, _N_FEATURES)) / np.sqrt(_N_FEATURES)
    out = np.empty((3 * n, n_fields))
    for f in range(n_fields):
        vals = np.empty((n, 3))
        for c in range(3):
            args = positions @ omegas[f, c].T + phases[f, c]
            vals[:, c] = np.cos(args) @ amps[f, c]
        out[:, f] = vals.ravel()
    return out


def _affine_modes(positions: np.ndarray) -> np.ndarray:
    """Orthonormal basis of global affine displacement fields, (3n, 12).

    Spans the three translations and the nine linear modes that displace
    component a of every vertex by coordinate b of its position (covering
    scaling, rotation and shear). Deformation bases are built orthogonal to
    this subspace, mirroring shape models learned from similarity-aligned
    scans; without this, low-frequency fields carry large near-affine
    components that a fitter's pose block also explains, which couples the
    alternation blocks and stalls convergence.
    """
    n = positions.shape[0]
    modes = np.zeros((3 * n, 12))
    col = 0
    for axis in range(3):
        modes[axis::3, col] = 1.0
        col += 1
    for axis in range(3):
        for coord in range(3):
            modes[axis::3, col] = positions[:, coord]
            col += 1
    q, _ = np.linalg.qr(modes)
    return q


def _farthest_point_indices(points: np.ndarray, start: int, count: int) -> np.ndarray:
    """Greedy farthest-point subset of `count` vertex indices starting at `start`."""
    chosen = [start]
    dists = np.linalg.norm(points - points[start], axis=1)
    for _ in range(count - 1):
        nxt = int(np.argmax(dists))
        chosen.append(nxt)
        dists = np.minimum(dists, np.linalg.norm(points - points[nxt], axis=1))
    return np.array(chosen, dtype=np.int64)


def generate_model(spec: SyntheticModelSpec) -> MorphableModel:
    """Build the deterministic synthetic morphable model for a spec.

    The mean surface and the 68 farthest-point-spread landmark indices depend
    only on the vertex count. The identity and residual bases come from
    seeded smooth random fields, orthonormalized so that basis columns are
    orthonormal and the two bases are mutually orthogonal to within 1e-10.
    Sampling stds decay geometrically from 1.0 with ratio 0.9.

    Two extra structural properties are imposed on the fields, mirroring
    shape models built from similarity-aligned scans and keeping the blocks
    of an alternating landmark fitter decoupled:

    - every basis column has zero affine moments over the landmark subset
      (sum_l a_l = 0 and sum_l a_l p_l^T = 0 at the mean landmark positions
      p_l), so a pose solver explains none of it to first order;
    - every identity/residual column pair has a zero landmark cross-moment
      matrix sum_l a_l b_l^T, which makes the two coefficient blocks exactly
      orthogonal after any weak-perspective projection.

    When the requested widths leave no room for the exact cross-moment null
    space (large k_id at the fixed landmark count), the least-coupled
    directions are used instead; construction stays deterministic.
    """
    rng = np.random.default_rng(spec.seed)
    vertices = _mean_face_vertices(spec.n_vertices)
    mean = Shape(vertices.ravel())
    nose_tip = int(np.argmax(vertices[:, 2]))
    landmark_indices = _farthest_point_indices(vertices, nose_tip, N_LANDMARKS)
    rows = coord_rows(landmark_indices)

    n_fields = spec.k_id + spec.k_exp
    extra = int(min(9 * spec.k_exp + 36, 160, 3 * spec.n_vertices - n_fields))
    pool = _smooth_fields(vertices, n_fields + max(extra, 0), spec.smoothness, rng)

    # Cancel each field's landmark-restricted affine content with a global
    # affine field, leaving the fields smooth but invisible to an affine fit
    # on the landmark subset.
    affine = _affine_modes(vertices)
    leak, *_ = np.linalg.lstsq(affine[rows], pool[rows], rcond=None)
    pool -= affine @ leak

    q, r = np.linalg.qr(pool)
    diag = np.diag(r)
    if np.min(np.abs(diag)) <= 1e-12 * np.max(np.abs(diag)):
        raise InvalidArgumentError(
            "random smooth fields are numerically dependent; change the seed")
    q = q * np.sign(diag)

    basis_exp = q[:, :spec.k_exp]
    remainder = q[:, spec.k_exp:]

    # Cross-moment constraints: for identity column b and residual column e,
    # sum_l e_l b_l^T = 0. Rows of the constraint matrix act on the landmark
    # part of b, expressed in pool coordinates through `remainder`.
    exp_landmark = basis_exp[rows].reshape(N_LANDMARKS, 3, spec.k_exp)
    rem_landmark = remainder[rows].reshape(N_LANDMARKS, 3, remainder.shape[1])
    constraints = np.einsum("lre,lcb->recb", exp_landmark, rem_landmark)
    constraints = constraints.reshape(9 * spec.k_exp, remainder.shape[1])
    _, sv, vt = np.linalg.svd(constraints, full_matrices=True)
    # Least-coupled directions last; exact null space when dimensions allow.
    basis_id = remainder @ vt[-spec.k_id:][::-1].T

    sigma_id = _SIGMA_DECAY ** np.arange(spec.k_id)
    sigma_exp = _SIGMA_DECAY ** np.arange(spec.k_exp)
    return MorphableModel(mean=mean, basis_id=basis_id, basis_exp=basis_exp,
                          sigma_id=sigma_id, sigma_exp=sigma_exp,
                          landmark_indices=landmark_indices,
                          nose_tip_index=nose_tip)


def sample_subject(model: MorphableModel, rng: np.random.Generator,
                   sigma_override: np.ndarray | None = None) -> np.ndarray:
    """Draw identity coefficients with independent N(0, sigma_id^2) entries.

    `sigma_override` substitutes the per-dimension stds without touching the
    model (useful for collapsing the draw to a known value in tests).
    """
    sigma = model.sigma_id if sigma_override is None else np.ravel(sigma_override)
    _require(sigma.size == model.k_id, "sigma override length must match k_id")
    return rng.normal(0.0, 1.0, size=model.k_id) * sigma


def sample_instance(model: MorphableModel, spec: DatasetSpec,
                    rng: np.random.Generator) -> tuple[np.ndarray, PoseParams]:
    """Draw per-image residual coefficients and a uniform pose within ranges."""
    alpha_exp = rng.normal(0.0, 1.0, size=model.k_exp) * model.sigma_exp
    ranges = spec.pose_ranges
    yaw = rng.uniform(*ranges.yaw)
    pitch = rng.uniform(*ranges.pitch)
    roll = rng.uniform(*ranges.roll)
    scale = rng.uniform(*ranges.scale)
    tx = rng.uniform(*ranges.tx)
    ty = rng.uniform(*ranges.ty)
    tz = rng.uniform(*ranges.tz)
    pose = PoseParams(scale, rotation_zyx(yaw, pitch, roll), np.array([tx, ty, tz]))
    return alpha_exp, pose


def render_landmarks(model: MorphableModel, coeffs: CoeffPair, pose: PoseParams,
                     noise_sigma: float, rng: np.random.Generator) -> LandmarkSet2D:
    """Project the model landmarks and add i.i.d. Gaussian coordinate noise.

    The noise draw happens even for sigma 0 (where it adds exact zeros), so
    downstream rng state does not depend on the noise level.
    """
    _require(np.isfinite(noise_sigma) and noise_sigma >= 0,
             "noise_sigma must be finite and non-negative")
    shape = compose_shape(model, coeffs)
    pts = select_landmarks(shape, model.landmark_indices)
    clean = project_landmarks(pts, pose)
    noise = rng.normal(0.0, 1.0, size=clean.coords.size) * noise_sigma
    return LandmarkSet2D(clean.coords + noise)


def rasterize_depth(model: MorphableModel, coeffs: CoeffPair, pose: PoseParams,
                    resolution: int) -> np.ndarray:
    """Render a (resolution, resolution) depth image in [-1, 1].

    All vertices are posed and projected; the bounding square of the projected
    points (centered, side = larger bbox extent) maps onto the pixel grid with
    row 0 at the smallest v. Each point lands in one pixel and each pixel
    keeps the maximum rotated z over the points in it (nearest to the viewer).
    The depth range of the projected cloud maps linearly onto [-1, 1], so the
    nearest point always reads +1; empty pixels read -1. A constant-depth
    cloud (including a single vertex) maps to a +1 pixel.
    """
    _require(resolution >= 1, "resolution must be positive")
    shape = compose_shape(model, coeffs)
    rotated = (shape.points + pose.translation) @ pose.rotation.T
    u = pose.scale * rotated[:, 0]
    v = pose.scale * rotated[:, 1]
    depth = rotated[:, 2]

    side = max(float(u.max() - u.min()), float(v.max() - v.min()))
    if side > 0.0:
        ox = (u.max() + u.min()) / 2.0 - side / 2.0
        oy = (v.max() + v.min()) / 2.0 - side / 2.0
        cols = np.clip((u - ox) / side * resolution, 0, resolution - 1).astype(np.int64)
        rows = np.clip((v - oy) / side * resolution, 0, resolution - 1).astype(np.int64)
    else:
        cols = np.zeros(u.size, dtype=np.int64)
        rows = np.zeros(v.size, dtype=np.int64)

    image = np.full((resolution, resolution), -np.inf)
    np.maximum.at(image, (rows, cols), depth)
    occupied = image > -np.inf
    z_min, z_max = float(depth.min()), float(depth.max())
    if z_max - z_min > 0.0:
        image[occupied] = 2.0 * (image[occupied] - z_min) / (z_max - z_min) - 1.0
    else:
        image[occupied] = 1.0
    image[~occupied] = -1.0
    return image


def dilate_max(image: np.ndarray) -> np.ndarray:
    """Max-dilate a 2D image by one pixel (3x3 neighborhood, edges clamped)."""
    _require(image.ndim == 2, "image must be 2D")
    out = np.full_like(image, -np.inf)
    n_rows, n_cols = image.shape
    rows, cols = np.indices(image.shape)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            r = np.clip(rows + dr, 0, n_rows - 1)
            c = np.clip(cols + dc, 0, n_cols - 1)
            np.maximum.at(out, (r, c), image)
    return out


def split_indices(n_subjects: int, images_per_subject: int
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic (train, val, test) sample index lists.

    The final ~quarter of subjects (at least one, at most all but one) is
    held out entirely; the last fifth of each remaining subject's images is
    validation. Samples are assumed ordered subject-major.
    """
    _require(n_subjects >= 2, "need at least 2 subjects")
    _require(images_per_subject >= 1, "need at least 1 image per subject")
    n_heldout = min(max(1, round(n_subjects / 4)), n_subjects - 1)
    n_val = images_per_subject // 5
    train, val, test = [], [], []
    for label in range(n_subjects):
        base = label * images_per_subject
        if label >= n_subjects - n_heldout:
            test.extend(range(base, base + images_per_subject))
        else:
            train.extend(range(base, base + images_per_subject - n_val))
            val.extend(range(base + images_per_subject - n_val,
                             base + images_per_subject))
    return (np.array(train, dtype=np.int64), np.array(val, dtype=np.int64),
            np.array(test, dtype=np.int64))


def build_dataset(model: MorphableModel, spec: DatasetSpec) -> Dataset:
    """Render n_subjects x images_per_subject samples with a deterministic split.

    Per-subject and per-image generators are spawned from the dataset seed, so
    the same spec always yields bit-identical samples. Stored depth rasters
    are max-dilated by one pixel: a few hundred vertices cover a 32x32 grid
    only sparsely, and the dilation closes the sampling holes so downstream
    consumers see a surface rather than speckle. Subject labels run 0..K-1;
    the final ~quarter of subjects (at least one, at most K-1) is held out
    entirely for verification, and the last fifth of each remaining subject's
    images goes to validation.
    """
    root = np.random.SeedSequence(spec.seed)
    subject_seeds = root.spawn(spec.n_subjects)
    samples: list[RenderedSample] = []
    for label in range(spec.n_subjects):
        subject_rng = np.random.default_rng(subject_seeds[label])
        alpha_id = sample_subject(model, subject_rng)
        image_seeds = subject_seeds[label].spawn(spec.images_per_subject)
        for j in range(spec.images_per_subject):
            image_rng = np.random.default_rng(image_seeds[j])
            alpha_exp, pose = sample_instance(model, spec, image_rng)
            coeffs = CoeffPair(alpha_id, alpha_exp)
            landmarks = render_landmarks(model, coeffs, pose,
                                         spec.landmark_noise_sigma, image_rng)
            depth = dilate_max(
                rasterize_depth(model, coeffs, pose, spec.image_resolution))
            samples.append(RenderedSample(
                subject_label=label,
                ground_truth_coeffs=coeffs,
                ground_truth_pose=pose,
                landmarks=landmarks,
                depth_image=depth,
                ground_truth_shape=compose_shape(model, coeffs)))

    train, val, test = split_indices(spec.n_subjects, spec.images_per_subject)
    return Dataset(model=model, spec=spec, samples=samples,
                   train_indices=train, val_indices=val, test_indices=test)
