"""Multi-image landmark fitting by alternating linear least squares.

Given 2D landmark sets from several images of one subject, the fitter
recovers a shared identity coefficient vector together with per-image
residual coefficients and weak-perspective poses by minimizing

    sum_j || u_j - f_j * P @ (R_j @ (s_U(alpha_id, alpha_exp_j) + t_j)) ||^2

plus optional Tikhonov terms reg_id * ||alpha_id / sigma_id||^2 and
reg_exp * ||alpha_exp_j / sigma_exp||^2 per image. Coefficients start at
zero; each pass re-estimates poses, then per-image residual coefficients,
then the shared identity block, each as an exact least-squares minimizer of
its own subproblem. The regularized objective is checked to be non-increasing
across sub-steps (the pose sub-step is a projection, not an exact minimizer,
so the guarantee is asserted rather than proven); a violation beyond slack
aborts loudly instead of being silently accepted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (DegenerateGeometryError, InvalidArgumentError,
                     NumericalFailureError, UnderdeterminedError)
from .geometry import (CoeffPair, LandmarkSet2D, MorphableModel, PoseParams,
                       Shape, compose_shape, coord_rows, project_landmarks,
                       select_landmarks)

# Absolute slack allowed on the objective monotonicity guarantee.
MONOTONE_SLACK = 1e-9


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise InvalidArgumentError(message)


@dataclass(frozen=True)
class FitConfig:
    """Alternation controls. reg defaults are 0 for exact recovery; use
    ~1e-3 on noisy landmarks."""

    max_iterations: int = 20
    rel_tol: float = 1e-6
    reg_id: float = 0.0
    reg_exp: float = 0.0

    def __post_init__(self):
        _require(self.max_iterations >= 1, "max_iterations must be >= 1")
        _require(np.isfinite(self.rel_tol) and self.rel_tol > 0,
                 "rel_tol must be finite and positive")
        _require(np.isfinite(self.reg_id) and self.reg_id >= 0,
                 "reg_id must be finite and non-negative")
        _require(np.isfinite(self.reg_exp) and self.reg_exp >= 0,
                 "reg_exp must be finite and non-negative")


@dataclass(frozen=True)
class FitResult:
    """Shared identity coefficients plus per-image (alpha_exp, pose) states.

    objective_trace holds the regularized objective after each full pass (it
    equals the pure data term when both reg weights are 0) and is
    non-increasing within slack by construction.
    """

    alpha_id: np.ndarray
    per_image: list[tuple[np.ndarray, PoseParams]]
    objective_trace: list[float]
    iterations_used: int
    converged: bool

    def __post_init__(self):
        trace = [float(v) for v in self.objective_trace]
        object.__setattr__(self, "objective_trace", trace)
        _require(all(np.isfinite(v) for v in trace), "objective trace must be finite")
        for earlier, later in zip(trace, trace[1:]):
            _require(later <= earlier + MONOTONE_SLACK,
                     "objective trace must be non-increasing")
        _require(self.iterations_used == len(trace),
                 "iterations_used must match the trace length")


def estimate_pose(points3d: np.ndarray, landmarks2d: LandmarkSet2D) -> PoseParams:
    """Closed-form scaled-orthographic pose from 3D-2D correspondences.

    Fits the least-squares 2x4 affine map from homogeneous 3D points to the
    2D landmarks, projects its two 3-vector rows onto the nearest scaled pair
    of orthonormal rows via the SVD, takes f as the mean of the two affine row
    norms, completes the rotation with the cross product of the orthonormal
    rows (det +1 by construction), and re-solves the translation so that
    u ~ f * P @ (R @ (p + t)) holds in the least-squares sense. The recovered
    t is the minimum-norm solution; its component along the viewing axis is
    unobservable under weak perspective.
    """
    pts = np.asarray(points3d, dtype=np.float64)
    _require(pts.ndim == 2 and pts.shape[1] == 3,
             f"points3d must be (L, 3), got {pts.shape}")
    u = landmarks2d.points
    _require(pts.shape[0] == u.shape[0],
             f"{pts.shape[0]} 3D points vs {u.shape[0]} 2D landmarks")
    _require(pts.shape[0] >= 4, f"need at least 4 correspondences, got {pts.shape[0]}")
    _require(bool(np.all(np.isfinite(pts))), "3D points must be finite")

    centered_sv = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    if centered_sv[1] <= 1e-9 * max(centered_sv[0], np.finfo(float).tiny):
        raise DegenerateGeometryError("3D points are collinear or coincident")

    design = np.hstack([pts, np.ones((pts.shape[0], 1))])
    affine, *_ = np.linalg.lstsq(design, u, rcond=None)
    rows = affine[:3].T  # (2, 3) linear part

    f = (float(np.linalg.norm(rows[0])) + float(np.linalg.norm(rows[1]))) / 2.0
    if f <= 1e-12:
        raise DegenerateGeometryError("projected landmarks carry no scale")
    uu, _, vt = np.linalg.svd(rows, full_matrices=False)
    ortho = uu @ vt  # nearest pair of orthonormal rows
    rotation = np.vstack([ortho, np.cross(ortho[0], ortho[1])])

    proj = f * rotation[:2]
    residual_mean = (u - pts @ proj.T).mean(axis=0)
    translation = np.linalg.pinv(proj) @ residual_mean
    return PoseParams(f, rotation, translation)


def _landmark_components(model: MorphableModel):
    """Landmark-row slices of the mean and both bases, vertex-major."""
    rows = coord_rows(model.landmark_indices)
    count = model.n_landmarks
    mean = model.mean.coords[rows].reshape(count, 3)
    basis_id = model.basis_id[rows].reshape(count, 3, model.k_id)
    basis_exp = model.basis_exp[rows].reshape(count, 3, model.k_exp)
    return mean, basis_id, basis_exp


def _check_landmarks(model: MorphableModel, landmarks: LandmarkSet2D) -> None:
    _require(landmarks.count == model.n_landmarks,
             f"{landmarks.count} landmarks given, model has {model.n_landmarks}")


def solve_expression(model: MorphableModel, alpha_id: np.ndarray, pose: PoseParams,
                     landmarks: LandmarkSet2D, reg_exp: float = 0.0) -> np.ndarray:
    """Exact least-squares residual coefficients for one image at fixed pose.

    Solves the stacked 2L x k_exp system for alpha_exp, optionally damped by
    reg_exp * ||alpha_exp / sigma_exp||^2, through an orthogonal
    decomposition (numpy lstsq) rather than normal equations.
    """
    alpha_id = np.ravel(np.asarray(alpha_id, dtype=np.float64))
    _require(alpha_id.size == model.k_id, "alpha_id length must match the model")
    _require(np.isfinite(reg_exp) and reg_exp >= 0, "reg_exp must be >= 0")
    _check_landmarks(model, landmarks)
    if reg_exp == 0.0 and model.k_exp > 2 * model.n_landmarks:
        raise UnderdeterminedError(
            f"k_exp={model.k_exp} exceeds 2L={2 * model.n_landmarks} with no regularizer")

    mean_u, basis_id_u, basis_exp_u = _landmark_components(model)
    proj = pose.scale * pose.rotation[:2]
    base = (mean_u + basis_id_u @ alpha_id + pose.translation) @ proj.T
    system = np.einsum("rc,lck->lrk", proj, basis_exp_u).reshape(-1, model.k_exp)
    rhs = (landmarks.points - base).ravel()
    if reg_exp > 0.0:
        system = np.vstack([system, np.sqrt(reg_exp) * np.diag(1.0 / model.sigma_exp)])
        rhs = np.concatenate([rhs, np.zeros(model.k_exp)])
    solution, *_ = np.linalg.lstsq(system, rhs, rcond=None)
    return solution


def solve_identity_shared(model: MorphableModel,
                          per_image: list[tuple[np.ndarray, PoseParams, LandmarkSet2D]],
                          reg_id: float = 0.0) -> np.ndarray:
    """Exact least-squares identity coefficients shared across all images.

    per_image lists (alpha_exp, pose, landmarks) triples; their residual
    contributions are folded into the right-hand side and the stacked
    2*L*M x k_id system is solved in one shot, optionally damped by
    reg_id * ||alpha_id / sigma_id||^2.
    """
    _require(len(per_image) >= 1, "need at least one image")
    _require(np.isfinite(reg_id) and reg_id >= 0, "reg_id must be >= 0")
    if reg_id == 0.0 and 2 * model.n_landmarks * len(per_image) < model.k_id:
        raise UnderdeterminedError(
            f"k_id={model.k_id} exceeds total equations "
            f"{2 * model.n_landmarks * len(per_image)} with no regularizer")

    mean_u, basis_id_u, basis_exp_u = _landmark_components(model)
    blocks, rhs_parts = [], []
    for alpha_exp, pose, landmarks in per_image:
        alpha_exp = np.ravel(np.asarray(alpha_exp, dtype=np.float64))
        _require(alpha_exp.size == model.k_exp, "alpha_exp length must match the model")
        _check_landmarks(model, landmarks)
        proj = pose.scale * pose.rotation[:2]
        base = (mean_u + basis_exp_u @ alpha_exp + pose.translation) @ proj.T
        blocks.append(np.einsum("rc,lck->lrk", proj, basis_id_u).reshape(-1, model.k_id))
        rhs_parts.append((landmarks.points - base).ravel())
    system = np.vstack(blocks)
    rhs = np.concatenate(rhs_parts)
    if reg_id > 0.0:
        system = np.vstack([system, np.sqrt(reg_id) * np.diag(1.0 / model.sigma_id)])
        rhs = np.concatenate([rhs, np.zeros(model.k_id)])
    solution, *_ = np.linalg.lstsq(system, rhs, rcond=None)
    return solution


def objective(model: MorphableModel, alpha_id: np.ndarray,
              per_image: list[tuple[np.ndarray, PoseParams, LandmarkSet2D]]) -> float:
    """Pure data term: sum over images of the squared landmark residual norm.

    Regularizer contributions are never included here; callers that need the
    damped objective add them separately.
    """
    alpha_id = np.ravel(np.asarray(alpha_id, dtype=np.float64))
    _require(alpha_id.size == model.k_id, "alpha_id length must match the model")
    total = 0.0
    for alpha_exp, pose, landmarks in per_image:
        _check_landmarks(model, landmarks)
        shape = compose_shape(model, CoeffPair(alpha_id, alpha_exp))
        pts = select_landmarks(shape, model.landmark_indices)
        predicted = project_landmarks(pts, pose)
        diff = landmarks.coords - predicted.coords
        total += float(diff @ diff)
    return total


def _image_data_term(points: np.ndarray, pose: PoseParams,
                     landmarks: LandmarkSet2D) -> float:
    predicted = project_landmarks(points, pose)
    diff = landmarks.coords - predicted.coords
    return float(diff @ diff)


def multi_image_fit(model: MorphableModel, landmark_sets: list[LandmarkSet2D],
                    config: FitConfig = FitConfig()) -> FitResult:
    """Alternating fit of shared identity, per-image residuals and poses.

    Starts from zero coefficients. Each pass runs pose re-estimation, then
    the per-image residual solves, then the shared identity solve, and
    records the regularized objective. The closed-form pose update is not a
    guaranteed descent step (orthonormalization projects the affine
    solution), so a re-estimated pose is kept only when it does not increase
    that image's data term; otherwise the previous pose stands. The
    objective must still not increase beyond slack at any sub-step: a
    violation raises NumericalFailureError with diagnostics. Convergence is
    declared when the change between consecutive passes drops below rel_tol
    relative to the previous value, with the comparison floored at machine
    epsilon times the total landmark energy so that fits sitting at the
    numerical noise floor terminate.
    """
    _require(len(landmark_sets) >= 1, "need at least one landmark set")
    for lm in landmark_sets:
        _check_landmarks(model, lm)

    n_images = len(landmark_sets)
    alpha_id = np.zeros(model.k_id)
    alpha_exps = [np.zeros(model.k_exp) for _ in range(n_images)]
    poses: list[PoseParams] = [None] * n_images  # type: ignore[list-item]

    energy = sum(float(lm.coords @ lm.coords) for lm in landmark_sets)
    floor = np.finfo(float).eps * max(energy, 1.0)

    def regularized(current_alpha_id, current_exps, current_poses) -> float:
        states = [(current_exps[j], current_poses[j], landmark_sets[j])
                  for j in range(n_images)]
        value = objective(model, current_alpha_id, states)
        if config.reg_id > 0.0:
            scaled = current_alpha_id / model.sigma_id
            value += config.reg_id * float(scaled @ scaled)
        if config.reg_exp > 0.0:
            for alpha_exp in current_exps:
                scaled = alpha_exp / model.sigma_exp
                value += config.reg_exp * float(scaled @ scaled)
        return value

    def check_step(step_name: str, iteration: int, before: float | None,
                   after: float) -> float:
        if not np.isfinite(after):
            raise NumericalFailureError(
                f"objective became non-finite after {step_name} in pass {iteration}")
        if before is not None and after > before + MONOTONE_SLACK:
            raise NumericalFailureError(
                f"objective increased after {step_name} in pass {iteration}: "
                f"{before!r} -> {after!r}")
        return after

    current: float | None = None
    trace: list[float] = []
    converged = False
    iterations = 0
    for iteration in range(1, config.max_iterations + 1):
        iterations = iteration
        for j in range(n_images):
            shape = compose_shape(model, CoeffPair(alpha_id, alpha_exps[j]))
            pts = select_landmarks(shape, model.landmark_indices)
            candidate = estimate_pose(pts, landmark_sets[j])
            if poses[j] is None or (_image_data_term(pts, candidate, landmark_sets[j])
                                    <= _image_data_term(pts, poses[j], landmark_sets[j])):
                poses[j] = candidate
        current = check_step("pose estimation", iteration, current,
                             regularized(alpha_id, alpha_exps, poses))

        alpha_exps = [solve_expression(model, alpha_id, poses[j], landmark_sets[j],
                                       config.reg_exp)
                      for j in range(n_images)]
        current = check_step("residual solve", iteration, current,
                             regularized(alpha_id, alpha_exps, poses))

        alpha_id = solve_identity_shared(
            model,
            [(alpha_exps[j], poses[j], landmark_sets[j]) for j in range(n_images)],
            config.reg_id)
        current = check_step("identity solve", iteration, current,
                             regularized(alpha_id, alpha_exps, poses))

        trace.append(current)
        if len(trace) >= 2:
            previous = trace[-2]
            if abs(previous - trace[-1]) <= config.rel_tol * max(previous, floor):
                converged = True
                break

    return FitResult(alpha_id=alpha_id,
                     per_image=[(alpha_exps[j], poses[j]) for j in range(n_images)],
                     objective_trace=trace,
                     iterations_used=iterations,
                     converged=converged)
