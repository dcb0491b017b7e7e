"""Verification, identification, reconstruction and disentangling metrics.

Scores here are similarities (larger = more alike); every threshold sweep
uses the fixed convention accept iff score >= threshold. All operations are
pure and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .geometry import (MorphableModel, Shape, apply_transform, crop_indices,
                       procrustes_align, rmse, select_landmarks)


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise InvalidArgumentError(message)


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ScoredPair:
    """One comparison outcome: a similarity score and the genuine flag."""

    score: float
    is_genuine: bool

    def __post_init__(self):
        object.__setattr__(self, "score", float(self.score))
        object.__setattr__(self, "is_genuine", bool(self.is_genuine))
        _require(np.isfinite(self.score), "pair score must be finite")


@dataclass(frozen=True)
class RocCurve:
    """Operating points (threshold, TAR, FAR), thresholds strictly increasing.

    TAR and FAR are non-increasing along the list because raising the
    threshold can only shrink the accepted set. The last point is a sentinel
    threshold above every score, pinning the (TAR, FAR) = (0, 0) end.
    """

    points: np.ndarray

    def __post_init__(self):
        pts = _readonly(self.points)
        object.__setattr__(self, "points", pts)
        _require(pts.ndim == 2 and pts.shape[1] == 3,
                 f"curve points must be (n, 3), got {pts.shape}")
        _require(pts.shape[0] >= 2, "curve needs at least two operating points")
        _require(bool(np.all(np.isfinite(pts))), "curve entries must be finite")
        rates = pts[:, 1:]
        _require(bool(np.all(rates >= 0.0)) and bool(np.all(rates <= 1.0)),
                 "TAR and FAR must lie in [0, 1]")
        _require(bool(np.all(np.diff(pts[:, 0]) > 0)),
                 "thresholds must be strictly increasing")
        _require(bool(np.all(np.diff(pts[:, 1]) <= 0)) and
                 bool(np.all(np.diff(pts[:, 2]) <= 0)),
                 "TAR and FAR must be non-increasing in the threshold")

    @property
    def thresholds(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def tar(self) -> np.ndarray:
        return self.points[:, 1]

    @property
    def far(self) -> np.ndarray:
        return self.points[:, 2]


@dataclass(frozen=True)
class VerificationReport:
    """Fold accuracy, threshold-free rates, and optional identification ranks."""

    accuracy_mean: float
    accuracy_std: float
    eer: float
    auc: float
    tar_at_far_10pct: float
    tar_at_far_1pct: float
    rank1: float | None = None
    rank5: float | None = None

    def __post_init__(self):
        for name in ("accuracy_mean", "eer", "auc",
                     "tar_at_far_10pct", "tar_at_far_1pct", "rank1", "rank5"):
            value = getattr(self, name)
            if value is None:
                continue
            value = float(value)
            object.__setattr__(self, name, value)
            _require(0.0 <= value <= 1.0, f"{name} must lie in [0, 1]")
        std = float(self.accuracy_std)
        object.__setattr__(self, "accuracy_std", std)
        _require(np.isfinite(std) and std >= 0.0,
                 "accuracy_std must be finite and non-negative")


@dataclass(frozen=True)
class ReconstructionReport:
    """Aggregate shape error over aligned, nose-cropped prediction pairs.

    rmse_paper divides each pair's stacked coordinate difference norm by the
    cropped vertex count; mean_vertex_dist is the companion per-vertex mean
    Euclidean distance, reported because the two summaries differ by a factor
    of roughly sqrt(n_c) and either may be wanted downstream.
    """

    rmse_paper: float
    mean_vertex_dist: float
    n_pairs: int
    crop_radius: float

    def __post_init__(self):
        object.__setattr__(self, "rmse_paper", float(self.rmse_paper))
        object.__setattr__(self, "mean_vertex_dist", float(self.mean_vertex_dist))
        object.__setattr__(self, "n_pairs", int(self.n_pairs))
        object.__setattr__(self, "crop_radius", float(self.crop_radius))
        _require(self.rmse_paper >= 0 and self.mean_vertex_dist >= 0,
                 "error summaries must be non-negative")
        _require(self.n_pairs >= 1, "need at least one pair")


@dataclass(frozen=True)
class DisentanglingReport:
    """Identity-code separation diagnostics.

    Distances are cosine distances of identity codes; displacement_ratio is
    ||d c_res|| / (||d c_res|| + ||d c_id||) averaged over expression-only
    perturbation pairs (1.0 = perfectly absorbed by the residual head);
    variance_explained is the between-subject share of identity-code
    variance. A constant encoder makes every field 0/0, reported via the
    degenerate flag with NaN ratios.
    """

    intra_distance: float
    inter_distance: float
    displacement_ratio: float
    variance_explained: float
    degenerate: bool

    def __post_init__(self):
        for name in ("intra_distance", "inter_distance",
                     "displacement_ratio", "variance_explained"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "degenerate", bool(self.degenerate))
        if not self.degenerate:
            _require(bool(np.isfinite(self.displacement_ratio)),
                     "displacement_ratio must be finite unless degenerate")


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """a.b / (|a||b|), guarding both norms."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    _require(a.size == b.size, f"length mismatch: {a.size} vs {b.size}")
    _require(bool(np.all(np.isfinite(a))) and bool(np.all(np.isfinite(b))),
             "inputs must be finite")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    _require(na > 0 and nb > 0, "cosine similarity needs non-zero vectors")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _split_scores(pairs: list[ScoredPair]) -> tuple[np.ndarray, np.ndarray]:
    _require(len(pairs) > 0, "need at least one scored pair")
    scores = np.array([p.score for p in pairs])
    genuine = np.array([p.is_genuine for p in pairs], dtype=bool)
    _require(bool(genuine.any()) and bool((~genuine).any()),
             "need at least one genuine and one impostor pair")
    return scores, genuine


def roc_curve(pairs: list[ScoredPair]) -> RocCurve:
    """Sweep accept-iff-score>=threshold over every distinct score.

    Thresholds are the distinct scores in increasing order plus one sentinel
    above the maximum, so the curve always reaches both (1, 1) (accept all)
    and (0, 0) (reject all). Ties share an operating point by construction.
    """
    scores, genuine = _split_scores(pairs)
    g_sorted = np.sort(scores[genuine])
    i_sorted = np.sort(scores[~genuine])
    thresholds = np.unique(scores)
    thresholds = np.append(thresholds, thresholds[-1] + 1.0)
    tar = (g_sorted.size - np.searchsorted(g_sorted, thresholds, side="left")
           ) / g_sorted.size
    far = (i_sorted.size - np.searchsorted(i_sorted, thresholds, side="left")
           ) / i_sorted.size
    return RocCurve(np.column_stack([thresholds, tar, far]))


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under TAR(FAR).

    Equals the Mann-Whitney statistic with ties counted one half, because a
    tie block appears as a single diagonal segment of the polyline. The
    polyline is walked in decreasing-threshold order; re-sorting by FAR would
    scramble the neighbors of vertical (tied-FAR) runs.
    """
    return float(np.trapezoid(curve.tar[::-1], curve.far[::-1]))


def eer(curve: RocCurve) -> float:
    """Rate where FAR crosses 1 - TAR, linearly interpolated on the polyline."""
    # f = FAR - (1 - TAR) runs from +1 at accept-all to -1 at reject-all, so
    # a sign change always exists along decreasing threshold.
    f = curve.far + curve.tar - 1.0
    for i in range(len(f) - 1):
        lo, hi = f[i], f[i + 1]
        if lo == 0.0:
            return float(curve.far[i])
        if lo > 0.0 >= hi:
            u = lo / (lo - hi)
            return float(curve.far[i] + u * (curve.far[i + 1] - curve.far[i]))
    return float(curve.far[-1])


def tar_at_far(curve: RocCurve, far_target: float) -> float:
    """TAR linearly interpolated at the requested FAR (upper envelope)."""
    _require(np.isfinite(far_target) and 0.0 < far_target <= 1.0,
             f"far_target must lie in (0, 1], got {far_target}")
    fars, tars = curve.far, curve.tar
    # collapse vertical runs (same FAR, several TARs) to the best TAR
    best: dict[float, float] = {}
    for fa, ta in zip(fars, tars):
        best[float(fa)] = max(best.get(float(fa), 0.0), float(ta))
    xs = np.array(sorted(best))
    ys = np.array([best[x] for x in xs])
    return float(np.interp(far_target, xs, ys))


def verification_accuracy_folds(pairs: list[ScoredPair],
                                n_folds: int = 10) -> tuple[float, float]:
    """Cross-fold accuracy with the threshold tuned on the other folds.

    Pairs are split into contiguous folds; for each, the accept threshold
    maximizing accuracy on the remaining folds (ties toward the smallest
    threshold) is applied to the held-out fold. Returns the mean and
    population standard deviation across folds.
    """
    _require(int(n_folds) >= 2, "need at least two folds")
    n_folds = int(n_folds)
    scores, genuine = _split_scores(pairs)
    _require(scores.size % n_folds == 0,
             f"{scores.size} pairs do not divide into {n_folds} folds")
    fold_size = scores.size // n_folds
    accuracies = []
    for k in range(n_folds):
        held = np.zeros(scores.size, dtype=bool)
        held[k * fold_size:(k + 1) * fold_size] = True
        for part, what in ((held, "held-out"), (~held, "training")):
            flags = genuine[part]
            _require(bool(flags.any()) and bool((~flags).any()),
                     f"{what} fold {k} contains a single class")
        s_train, g_train = scores[~held], genuine[~held]
        candidates = np.unique(s_train)
        candidates = np.append(candidates, candidates[-1] + 1.0)
        # accuracy of accept-iff-score>=t for every candidate at once
        correct = [(np.count_nonzero(g_train & (s_train >= t))
                    + np.count_nonzero(~g_train & (s_train < t)))
                   for t in candidates]
        threshold = candidates[int(np.argmax(correct))]
        s_held, g_held = scores[held], genuine[held]
        hits = (np.count_nonzero(g_held & (s_held >= threshold))
                + np.count_nonzero(~g_held & (s_held < threshold)))
        accuracies.append(hits / s_held.size)
    acc = np.array(accuracies)
    return float(acc.mean()), float(acc.std())


def fuse_scores(score_lists: list[np.ndarray]) -> np.ndarray:
    """Sum of min-max normalized score lists (score-level fusion).

    Each list is mapped to [0, 1] before summation so no matcher dominates
    through scale; a constant list normalizes to all zeros (it carries no
    ranking information) and leaves the fused order unchanged.
    """
    _require(len(score_lists) >= 1, "need at least one score list")
    arrays = [np.asarray(s, dtype=np.float64).ravel() for s in score_lists]
    length = arrays[0].size
    _require(length >= 1, "score lists must be non-empty")
    fused = np.zeros(length)
    for a in arrays:
        _require(a.size == length,
                 f"score list length mismatch: {a.size} vs {length}")
        _require(bool(np.all(np.isfinite(a))), "scores must be finite")
        span = float(a.max() - a.min())
        fused = fused + ((a - a.min()) / span if span > 0 else np.zeros(length))
    return fused


def rank_n_identification(gallery_codes: np.ndarray, gallery_labels: np.ndarray,
                          probe_codes: np.ndarray, probe_labels: np.ndarray,
                          n: int) -> float:
    """Fraction of probes whose subject is among the n nearest gallery codes.

    Similarity is cosine; ties keep gallery index order (stable sort).
    """
    gallery = np.asarray(gallery_codes, dtype=np.float64)
    probes = np.asarray(probe_codes, dtype=np.float64)
    g_labels = np.asarray(gallery_labels).ravel()
    p_labels = np.asarray(probe_labels).ravel()
    _require(gallery.ndim == 2 and gallery.shape[0] >= 1, "gallery is empty")
    _require(probes.ndim == 2 and probes.shape[0] >= 1, "no probes given")
    _require(gallery.shape[1] == probes.shape[1], "code widths differ")
    _require(g_labels.size == gallery.shape[0] and p_labels.size == probes.shape[0],
             "labels must be row-aligned with codes")
    missing = set(p_labels.tolist()) - set(g_labels.tolist())
    _require(not missing, f"probe subjects missing from gallery: {sorted(missing)}")
    _require(int(n) >= 1, "n must be at least 1")
    n = int(n)
    hits = 0
    for code, label in zip(probes, p_labels):
        sims = np.array([cosine_similarity(code, g) for g in gallery])
        top = np.argsort(-sims, kind="stable")[:n]
        hits += int(label in g_labels[top])
    return hits / probes.shape[0]


def evaluate_reconstruction(predicted: list[Shape], ground_truth: list[Shape],
                            landmark_indices: np.ndarray, nose_tip_index: int,
                            crop_radius: float) -> ReconstructionReport:
    """Aligned, cropped shape error between prediction/ground-truth pairs.

    Each prediction is similarity-aligned to its ground truth on the landmark
    subset, then both are cropped to the vertices within crop_radius of the
    ground-truth nose tip (correspondence preserved: the crop set is chosen
    on the ground truth only). Degenerate alignments propagate.
    """
    _require(len(predicted) == len(ground_truth) and len(predicted) >= 1,
             "need equal-length non-empty shape lists")
    indices = np.asarray(landmark_indices, dtype=np.int64).ravel()
    total_rmse = 0.0
    total_dist = 0.0
    for pred, truth in zip(predicted, ground_truth):
        _require(pred.n == truth.n,
                 f"vertex count mismatch: {pred.n} vs {truth.n}")
        transform = procrustes_align(select_landmarks(pred, indices),
                                     select_landmarks(truth, indices))
        aligned = apply_transform(pred, transform)
        crop = crop_indices(truth, nose_tip_index, crop_radius)
        total_rmse += rmse([(truth, aligned)], crop)
        diff = truth.points[crop] - aligned.points[crop]
        total_dist += float(np.mean(np.linalg.norm(diff, axis=1)))
    n_pairs = len(predicted)
    return ReconstructionReport(rmse_paper=total_rmse / n_pairs,
                                mean_vertex_dist=total_dist / n_pairs,
                                n_pairs=n_pairs, crop_radius=crop_radius)


def _cosine_distance_matrix(codes: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(codes, axis=1, keepdims=True)
    unit = codes / np.maximum(norms, 1e-300)
    return 1.0 - np.clip(unit @ unit.T, -1.0, 1.0)


def disentangling_report(encoder, dataset) -> DisentanglingReport:
    """Measure identity/residual code separation on the evaluation split.

    Uses the held-out subjects when the dataset has them, the whole sample
    list otherwise. Expression-only pairs are built by re-rendering each
    evaluated sample with a freshly drawn residual coefficient vector at the
    identical pose, so the displacement ratio isolates the expression factor;
    the perturbation draws are seeded from the dataset seed.

    ``encoder`` is either an EncoderNet or any callable mapping a (B, pixels)
    image array to an ``(identity_codes, residual_codes)`` pair; the callable
    form lets reference embeddings stand in for a trained network.
    """
    from .network import EncoderNet, encode_images  # local import, avoids a cycle
    from .synthetic import dilate_max, rasterize_depth
    from .geometry import CoeffPair

    if isinstance(encoder, EncoderNet):
        def embed(batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            return encode_images(encoder, batch)
    else:
        _require(callable(encoder), "encoder must be an EncoderNet or callable")
        embed = encoder

    model: MorphableModel = dataset.model
    rows = (dataset.test_indices if len(dataset.test_indices)
            else np.arange(len(dataset.samples)))
    samples = [dataset.samples[int(i)] for i in rows]
    labels = np.array([s.subject_label for s in samples])
    _require(np.unique(labels).size >= 2, "need at least two subjects")
    _require(len(samples) >= np.unique(labels).size * 2,
             "need at least two expressions per subject")

    images = np.array([s.depth_image.ravel() for s in samples])
    c_id, _ = embed(images)

    dist = _cosine_distance_matrix(c_id)
    same = labels[:, None] == labels[None, :]
    upper = np.triu(np.ones_like(same, dtype=bool), k=1)
    intra = float(dist[same & upper].mean())
    inter = float(dist[~same & upper].mean())

    rng = np.random.default_rng(np.random.SeedSequence([dataset.spec.seed, 0x1d]))
    num = den = 0.0
    ratios = []
    for sample, image in zip(samples, images):
        base = embed(image[None, :])
        perturbation = rng.normal(0.0, 1.0, size=model.k_exp) * model.sigma_exp
        coeffs = CoeffPair(sample.ground_truth_coeffs.alpha_id,
                           sample.ground_truth_coeffs.alpha_exp + perturbation)
        other = dilate_max(rasterize_depth(model, coeffs, sample.ground_truth_pose,
                                           dataset.spec.image_resolution))
        moved = embed(other.ravel()[None, :])
        d_res = float(np.linalg.norm(moved[1][0] - base[1][0]))
        d_id = float(np.linalg.norm(moved[0][0] - base[0][0]))
        num, den = num + d_res, den + d_res + d_id
        if d_res + d_id > 0:
            ratios.append(d_res / (d_res + d_id))

    # constant encoder: no pair moved, no identity spread to attribute
    degenerate = den <= 0.0 or not np.any(dist[upper] > 0)
    ratio = float(np.mean(ratios)) if ratios else float("nan")

    grand = c_id.mean(axis=0)
    total_var = float(np.sum((c_id - grand) ** 2))
    between = 0.0
    for label in np.unique(labels):
        group = c_id[labels == label]
        between += group.shape[0] * float(np.sum((group.mean(axis=0) - grand) ** 2))
    # variance at rounding level relative to the code energy means the codes
    # are numerically constant; the ratio would be noise over noise
    energy = float(np.sum(c_id * c_id))
    explained = (between / total_var if total_var > 1e-12 * max(energy, 1e-300)
                 else float("nan"))
    if not np.isfinite(explained):
        degenerate = True
        explained = float("nan")

    return DisentanglingReport(intra_distance=intra, inter_distance=inter,
                               displacement_ratio=ratio,
                               variance_explained=explained,
                               degenerate=degenerate)


def verification_pairs(codes: np.ndarray, labels: np.ndarray) -> list[ScoredPair]:
    """All unordered code pairs scored by cosine similarity, in index order."""
    codes = np.asarray(codes, dtype=np.float64)
    labels = np.asarray(labels).ravel()
    _require(codes.ndim == 2 and codes.shape[0] == labels.size,
             "codes must be (n, q) row-aligned with labels")
    _require(codes.shape[0] >= 2, "need at least two codes")
    pairs = []
    for i in range(codes.shape[0]):
        for j in range(i + 1, codes.shape[0]):
            pairs.append(ScoredPair(cosine_similarity(codes[i], codes[j]),
                                    bool(labels[i] == labels[j])))
    return pairs


def stratified_folds(pairs: list[ScoredPair], n_folds: int) -> list[ScoredPair]:
    """Rearrange pairs into equal contiguous folds, each with both classes.

    Genuine and impostor pairs are dealt round-robin into the folds (in
    their incoming order) and every fold is trimmed to the common size, so
    the contiguous fold protocol sees the same class balance everywhere.
    Needs at least n_folds pairs of each class.
    """
    _require(int(n_folds) >= 2, "need at least two folds")
    n_folds = int(n_folds)
    genuine = [p for p in pairs if p.is_genuine]
    impostor = [p for p in pairs if not p.is_genuine]
    _require(len(genuine) >= n_folds and len(impostor) >= n_folds,
             f"need at least {n_folds} pairs of each class, got "
             f"{len(genuine)} genuine / {len(impostor)} impostor")
    g_per, i_per = len(genuine) // n_folds, len(impostor) // n_folds
    folds = []
    for k in range(n_folds):
        folds.extend(genuine[k * g_per:(k + 1) * g_per])
        folds.extend(impostor[k * i_per:(k + 1) * i_per])
    return folds


def verification_report(pairs: list[ScoredPair], n_folds: int = 10,
                        rank1: float | None = None,
                        rank5: float | None = None) -> VerificationReport:
    """Assemble the standard report from one scored pair list.

    The threshold-free metrics use every pair; the fold accuracy runs on the
    stratified rearrangement (a few pairs may be trimmed to equalize folds).
    """
    curve = roc_curve(pairs)
    mean, std = verification_accuracy_folds(stratified_folds(pairs, n_folds),
                                            n_folds)
    return VerificationReport(accuracy_mean=mean, accuracy_std=std,
                              eer=eer(curve), auc=auc(curve),
                              tar_at_far_10pct=tar_at_far(curve, 0.10),
                              tar_at_far_1pct=tar_at_far(curve, 0.01),
                              rank1=rank1, rank5=rank5)
