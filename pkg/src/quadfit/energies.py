"""Energy terms of the fitting objective.

Each term is non-negative; the total objective is the weighted sum of the
active terms.  Data terms (markers, keypoints, silhouettes) are robustified
with the Geman-McClure kernel; the shape and pose priors are squared
Mahalanobis distances and the joint-limit term is a one-sided hinge.

These are the reference (numpy) evaluations used for reporting and testing;
the optimizer differentiates an equivalent formulation in
:mod:`quadfit.autodiff` (the silhouette term there is a smooth surrogate, see
that module).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .body_model import ArticulatedModel, ModelParams, model_markers
from .camera import Camera, project
from .robust import geman_mcclure  # noqa: F401  (re-exported; defined once to avoid an import cycle)
from .silhouette import BinaryMask, distance_transform, rasterize_silhouette

DATA_TERMS = ("kp", "sil", "mocap")
PRIOR_TERMS = ("beta", "theta", "limit")
ALL_TERMS = DATA_TERMS + PRIOR_TERMS


@dataclass(frozen=True)
class EnergyWeights:
    kp: float = 1.0
    sil: float = 1.0
    mocap: float = 10.0
    beta: float = 0.1
    theta: float = 0.1
    limit: float = 100.0
    cam: float = 1.0

    def __post_init__(self):
        for name in ("kp", "sil", "mocap", "beta", "theta", "limit", "cam"):
            if getattr(self, name) < 0:
                raise ValueError(f"weight {name} must be non-negative")

    def get(self, term: str) -> float:
        return getattr(self, term)

    def with_(self, **kw) -> "EnergyWeights":
        return replace(self, **kw)


@dataclass(frozen=True)
class RobustScales:
    """Residual magnitudes at which each robust kernel reaches 0.5."""

    mocap: float = 0.05  # meters
    kp: float = 10.0  # pixels
    sil: float = 5.0  # pixels


@dataclass(frozen=True)
class Observations:
    """Per-frame observations; at least one kind must be present for a fit.

    ``mocap_points`` are 3D marker observations in the model/camera world
    frame, one row per model marker, NaN rows marking missing markers.
    """

    mocap_points: np.ndarray | None = None  # (M, 3)
    keypoints: np.ndarray | None = None  # (M, 2)
    keypoint_visibility: np.ndarray | None = None  # (M,) bool
    keypoint_camera: Camera | None = None
    silhouettes: tuple[tuple[Camera, BinaryMask], ...] = ()
    scales: RobustScales = field(default_factory=RobustScales)

    def __post_init__(self):
        if self.mocap_points is not None:
            object.__setattr__(self, "mocap_points", np.asarray(self.mocap_points, dtype=np.float64))
        if self.keypoints is not None:
            object.__setattr__(self, "keypoints", np.asarray(self.keypoints, dtype=np.float64))
            vis = (
                np.ones(len(self.keypoints), dtype=bool)
                if self.keypoint_visibility is None
                else np.asarray(self.keypoint_visibility, dtype=bool)
            )
            object.__setattr__(self, "keypoint_visibility", vis)
        object.__setattr__(self, "silhouettes", tuple(self.silhouettes))

    def empty(self) -> bool:
        return self.mocap_points is None and self.keypoints is None and not self.silhouettes


def e_mocap(model: ArticulatedModel, params: ModelParams, markers_obs: np.ndarray, scale: float = 0.05) -> float:
    """Robust sum of distances between posed model markers and observations.

    NaN-flagged observation rows (missing markers) are skipped.
    """
    markers_obs = np.asarray(markers_obs, dtype=np.float64)
    mk = model_markers(model, params)
    if markers_obs.shape != mk.shape:
        raise ValueError(f"expected {mk.shape[0]} marker observations, got {markers_obs.shape}")
    present = ~np.isnan(markers_obs).any(axis=1)
    if not present.any():
        return 0.0
    d = np.linalg.norm(mk[present] - markers_obs[present], axis=1)
    return float(geman_mcclure(d, scale).sum())


def e_keypoint(
    model: ArticulatedModel,
    params: ModelParams,
    camera: Camera,
    keypoints: np.ndarray,
    visibility: np.ndarray | None = None,
    scale: float = 10.0,
) -> float:
    """Robust reprojection error of posed markers against visible 2D keypoints."""
    keypoints = np.asarray(keypoints, dtype=np.float64)
    mk = model_markers(model, params)
    if keypoints.shape != (mk.shape[0], 2):
        raise ValueError(f"expected ({mk.shape[0]}, 2) keypoints, got {keypoints.shape}")
    vis = np.ones(len(keypoints), dtype=bool) if visibility is None else np.asarray(visibility, dtype=bool)
    uv, in_front = project(camera, mk)
    use = vis & in_front  # markers behind the camera are skipped
    if not use.any():
        return 0.0
    d = np.linalg.norm(uv[use] - keypoints[use], axis=1)
    return float(geman_mcclure(d, scale).sum())


def e_silhouette(
    model: ArticulatedModel,
    params: ModelParams,
    views: tuple[tuple[Camera, BinaryMask], ...],
    scale: float = 5.0,
) -> float:
    """Bidirectional silhouette distance, summed over views.

    Per view: the raw distances from projected-silhouette pixels into the
    ground-truth distance field, plus the robustified distances from
    ground-truth pixels to the nearest projected pixel.  Each directed sum is
    normalized by the view's total pixel count.  With an empty ground truth
    only the first sum contributes (infinite if the projection is non-empty).
    """
    from .body_model import pose_mesh

    posed, _ = pose_mesh(model, params)
    total = 0.0
    for camera, gt in views:
        if (gt.width, gt.height) != (camera.width, camera.height):
            raise ValueError("mask size does not match camera image size")
        pred = rasterize_silhouette(posed, model.faces, camera, gt.width, gt.height)
        npix = gt.width * gt.height
        term = 0.0
        if pred.count():
            d_gt = distance_transform(gt).values
            term += float(d_gt[pred.bits].sum()) / npix
        if gt.count():
            d_pred = distance_transform(pred).values
            vals = d_pred[gt.bits]
            finite = np.isfinite(vals)
            term += float(geman_mcclure(vals[finite], scale).sum() + (~finite).sum()) / npix
        total += term
    return total


def mahalanobis_prior(x: np.ndarray, mean: np.ndarray, precision: np.ndarray) -> float:
    """Squared Mahalanobis distance (x - mean)^T P (x - mean)."""
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    precision = np.asarray(precision, dtype=np.float64)
    if x.shape != mean.shape or precision.shape != (x.size, x.size):
        raise ValueError("dimension mismatch in Mahalanobis prior")
    if np.abs(precision - precision.T).max() > 1e-9:
        raise ValueError("precision matrix must be symmetric")
    d = x - mean
    return float(d @ precision @ d)


def e_shape_prior(model: ArticulatedModel, params: ModelParams) -> float:
    return mahalanobis_prior(params.beta, model.shape_mean, model.shape_precision)


def e_pose_prior(model: ArticulatedModel, params: ModelParams) -> float:
    """Pose prior over all non-root joint rotations."""
    return mahalanobis_prior(
        params.theta[3:], model.pose_mean[3:], model.pose_precision[3:, 3:]
    )


def e_limit(theta: np.ndarray, limits: np.ndarray) -> float:
    """Hinge penalty outside per-axis rotation ranges (root rows are +-inf)."""
    theta = np.asarray(theta, dtype=np.float64)
    limits = np.asarray(limits, dtype=np.float64)
    if limits.shape != (theta.size, 2):
        raise ValueError("limits must be (len(theta), 2)")
    over = np.maximum(theta - limits[:, 1], 0.0)
    under = np.maximum(limits[:, 0] - theta, 0.0)
    return float(over.sum() + under.sum())


def e_camera(fx: float, fy: float) -> float:
    """Penalty tying the two focal lengths together."""
    return abs(fx - fy)


def energy_breakdown(
    model: ArticulatedModel,
    params: ModelParams,
    obs: Observations,
    active_terms: tuple[str, ...],
) -> dict[str, float]:
    """Unweighted value of each active term."""
    unknown = set(active_terms) - set(ALL_TERMS)
    if unknown:
        raise ValueError(f"unknown energy terms: {sorted(unknown)}")
    out: dict[str, float] = {}
    for term in active_terms:
        if term == "mocap":
            if obs.mocap_points is None:
                raise ValueError("mocap term active but no mocap observations given")
            out[term] = e_mocap(model, params, obs.mocap_points, obs.scales.mocap)
        elif term == "kp":
            if obs.keypoints is None or obs.keypoint_camera is None:
                raise ValueError("kp term active but no keypoint observations given")
            out[term] = e_keypoint(
                model, params, obs.keypoint_camera, obs.keypoints, obs.keypoint_visibility, obs.scales.kp
            )
        elif term == "sil":
            if not obs.silhouettes:
                raise ValueError("sil term active but no silhouette observations given")
            out[term] = e_silhouette(model, params, obs.silhouettes, obs.scales.sil)
        elif term == "beta":
            out[term] = e_shape_prior(model, params)
        elif term == "theta":
            out[term] = e_pose_prior(model, params)
        elif term == "limit":
            out[term] = e_limit(params.theta, model.joint_limits)
    return out


def total_objective(
    model: ArticulatedModel,
    params: ModelParams,
    obs: Observations,
    weights: EnergyWeights,
    active_terms: tuple[str, ...],
) -> float:
    """Weighted sum of the active energy terms."""
    breakdown = energy_breakdown(model, params, obs, active_terms)
    return float(sum(weights.get(t) * v for t, v in breakdown.items()))
