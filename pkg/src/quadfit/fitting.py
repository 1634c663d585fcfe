"""Staged robust fitting of the body model to observations.

The optimizer is damped first-order descent with a backtracking (Armijo) line
search over the free parameter blocks of each stage; accepted steps never
increase the objective.  Gradients come from :mod:`quadfit.autodiff`.

The per-subject pipeline mirrors the intended use: a 2D-only fit initializes
shape and pose, raw mocap is aligned to the posed model, the camera focal pair
is re-estimated, then the full objective is minimized; alignment, camera
update and full fit repeat three times (EM style).  Per-sequence fitting is
per-frame with the subject shape fixed and warm starts from the previous
frame.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from dataclasses import replace as dc_replace
from pathlib import Path

import numpy as np

from .autodiff import FitObjective
from .body_model import ArticulatedModel, ModelParams, model_markers
from .camera import Camera, refine_focal, to_camera_frame
from .energies import ALL_TERMS, EnergyWeights, Observations, RobustScales
from .silhouette import BinaryMask

PARAM_BLOCKS = ("beta", "theta", "theta_root", "gamma", "camera_f")

# relative step scale per parameter block (units differ across blocks)
BLOCK_SCALES = {"beta": 1.0, "theta": 1.0, "theta_root": 1.0, "gamma": 1.0, "camera_f": 100.0}


@dataclass(frozen=True)
class FitStage:
    free_params: tuple[str, ...]
    active_terms: tuple[str, ...]
    weights: EnergyWeights = field(default_factory=EnergyWeights)
    max_iters: int = 150
    convergence_tol: float = 1e-6
    scales: RobustScales | None = None  # override the observation scales (annealing)

    def __post_init__(self):
        object.__setattr__(self, "free_params", tuple(self.free_params))
        object.__setattr__(self, "active_terms", tuple(self.active_terms))
        if not self.free_params:
            raise ValueError("stage must free at least one parameter block")
        unknown = set(self.free_params) - set(PARAM_BLOCKS)
        if unknown:
            raise ValueError(f"unknown parameter blocks: {sorted(unknown)}")
        unknown_terms = set(self.active_terms) - set(ALL_TERMS) - {"cam"}
        if unknown_terms:
            raise ValueError(f"unknown energy terms: {sorted(unknown_terms)}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class FitResult:
    params: ModelParams
    final_objective: float
    term_energies: dict[str, float]  # unweighted values at the final parameters
    weights: EnergyWeights
    iterations: int
    converged: bool
    objective_trace: list[float] = field(default_factory=list)
    camera: Camera | None = None
    error: str | None = None

    def weighted_energy_sum(self) -> float:
        return float(sum(self.weights.get(t) * v for t, v in self.term_energies.items()))


def optimize(
    model: ArticulatedModel,
    init: ModelParams,
    obs: Observations,
    stages: list[FitStage],
    camera: Camera | None = None,
) -> FitResult:
    """Run the stage schedule; returns the final parameters and diagnostics."""
    if not stages:
        raise ValueError("need at least one stage")
    init.validate_for(model)
    beta = init.beta.copy()
    theta = init.theta.copy()
    gamma = init.gamma.copy()
    f = None if camera is None else np.array([camera.fx, camera.fy])

    trace: list[float] = []
    total_iters = 0
    converged = False
    objective = None

    for stage in stages:
        free = tuple(stage.free_params)
        if "camera_f" in free and camera is None:
            raise ValueError("stage frees camera_f but no camera was given")
        if "theta" in free and "theta_root" in free:
            free = tuple(b for b in free if b != "theta_root")
        terms = stage.active_terms
        if "camera_f" in free and "cam" not in terms:
            terms = terms + ("cam",)
        stage_obs = obs if stage.scales is None else dc_replace(obs, scales=stage.scales)
        objective = FitObjective(model, stage_obs, stage.weights, terms, camera=camera)

        value = objective.value(beta, theta, gamma, f)
        if not np.isfinite(value):
            raise ValueError("objective is not finite at the stage start")
        trace.append(value)
        alpha = 1e-2
        recent = [value]
        converged = False
        for _ in range(stage.max_iters):
            value, grads = objective.value_and_grad(beta, theta, gamma, f, free=free)
            direction = {b: -g * BLOCK_SCALES[b] for b, g in grads.items()}
            slope = sum(float(grads[b].reshape(-1) @ d.reshape(-1)) for b, d in direction.items())
            if slope >= 0.0:
                converged = True
                break
            accepted = False
            first_try = True
            while alpha > 1e-16:
                nb, nt, ng = beta, theta, gamma
                nf = f
                if "beta" in direction:
                    nb = beta + alpha * direction["beta"]
                if "theta" in direction:
                    nt = theta + alpha * direction["theta"]
                if "theta_root" in direction:
                    nt = theta + alpha * direction["theta_root"]
                if "gamma" in direction:
                    ng = gamma + alpha * direction["gamma"]
                if "camera_f" in direction:
                    nf = np.maximum(f + alpha * direction["camera_f"], 1e-3)
                new_value = objective.value(nb, nt, ng, nf)
                if np.isfinite(new_value) and new_value <= value + 1e-4 * alpha * slope:
                    improvement = value - new_value
                    beta, theta, gamma, f = nb, nt, ng, nf
                    value = new_value
                    accepted = True
                    break
                alpha *= 0.5
                first_try = False
            if not accepted:
                converged = True
                break
            if first_try:
                alpha = min(alpha * 2.0, 1e3)
            trace.append(value)
            total_iters += 1
            if improvement <= 1e-12 * max(abs(value), 1e-30):
                converged = True  # machine-level progress only
                break
            recent.append(value)
            if len(recent) > 4:
                recent.pop(0)
            if len(recent) == 4:
                drop = recent[0] - recent[-1]
                if drop <= stage.convergence_tol * max(abs(recent[0]), 1e-30):
                    converged = True
                    break
        # the final stage's objective defines the reported energies

    out_camera = camera if f is None else camera.with_focal(float(f[0]), float(f[1]))
    breakdown = objective.breakdown(beta, theta, gamma, f)
    final = float(sum(stages[-1].weights.get(t) * v for t, v in breakdown.items()))
    return FitResult(
        params=ModelParams(beta=beta, theta=theta, gamma=gamma),
        final_objective=final,
        term_energies=breakdown,
        weights=stages[-1].weights,
        iterations=total_iters,
        converged=converged,
        objective_trace=trace,
        camera=out_camera,
    )


# ---------------------------------------------------------------------------
# mocap alignment


@dataclass(frozen=True)
class AlignmentResult:
    matrix: np.ndarray  # (4, 4) homogeneous source -> target
    transformed: np.ndarray  # (N, 3) transformed source points
    residual_rms: float
    mode: str

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix[:3, :3].T + self.matrix[:3, 3]


def align_mocap_to_model(
    mocap_points: np.ndarray,
    model_points: np.ndarray,
    mode: str = "similarity",
) -> AlignmentResult:
    """Rigid-or-affine alignment of mocap points onto model marker points.

    ``similarity`` (default) solves rotation + translation + uniform scale in
    closed form; ``affine`` solves the full linear least-squares system via
    the pseudo-inverse.  Degenerate (collinear) source points raise.
    """
    src = np.asarray(mocap_points, dtype=np.float64)
    dst = np.asarray(model_points, dtype=np.float64)
    ok = ~(np.isnan(src).any(axis=1) | np.isnan(dst).any(axis=1))
    src_ok, dst_ok = src[ok], dst[ok]
    n = len(src_ok)
    if n < 3:
        raise ValueError("need at least 3 valid correspondences")
    mu_s = src_ok.mean(axis=0)
    sv = np.linalg.svd(src_ok - mu_s, compute_uv=False)
    if sv[1] < 1e-9 * max(sv[0], 1e-300):
        raise ValueError("mocap points are collinear; alignment is degenerate")

    M = np.eye(4)
    if mode == "similarity":
        mu_d = dst_ok.mean(axis=0)
        X = src_ok - mu_s
        Y = dst_ok - mu_d
        cov = Y.T @ X / n
        U, D, Vt = np.linalg.svd(cov)
        S = np.eye(3)
        if np.linalg.det(U @ Vt) < 0:
            S[2, 2] = -1.0
        R = U @ S @ Vt
        var_s = (X * X).sum() / n
        scale = np.trace(np.diag(D) @ S) / var_s
        A = scale * R
        t = mu_d - A @ mu_s
    elif mode == "affine":
        # least squares Q = T^+ V on homogeneous coordinates
        Th = np.concatenate([src_ok, np.ones((n, 1))], axis=1)
        Q, *_ = np.linalg.lstsq(Th, dst_ok, rcond=None)
        A = Q[:3].T
        t = Q[3]
    else:
        raise ValueError(f"unknown alignment mode {mode!r}")
    M[:3, :3] = A
    M[:3, 3] = t
    transformed = src @ A.T + t
    residual = float(np.sqrt(np.mean(np.sum((transformed[ok] - dst_ok) ** 2, axis=1))))
    return AlignmentResult(matrix=M, transformed=transformed, residual_rms=residual, mode=mode)


# ---------------------------------------------------------------------------
# representative frames and subject shape


def select_representative_frames(frames: np.ndarray, k: int, seed: int = 0) -> np.ndarray:
    """K-means over centered flattened marker coordinates; one medoid per cluster.

    The medoid of a cluster is the member frame nearest the cluster mean.
    Deterministic given the seed; returns sorted frame indices.
    """
    frames = np.asarray(frames, dtype=np.float64)
    T = frames.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > T:
        raise ValueError(f"cannot select {k} frames from a sequence of {T}")
    feats = frames.reshape(T, -1, 3)
    feats = feats - feats.mean(axis=1, keepdims=True)  # drop per-frame centroid
    feats = feats.reshape(T, -1)

    rng = np.random.default_rng(seed)
    centers = feats[np.sort(rng.choice(T, size=k, replace=False))].copy()
    assign = np.full(T, -1)
    for _ in range(50):
        d2 = ((feats[:, None, :] - centers[None]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)
        for c in range(k):
            members = new_assign == c
            if members.any():
                centers[c] = feats[members].mean(axis=0)
            else:  # deterministic reseed on the farthest point
                far = int(np.argmax(d2[np.arange(T), new_assign]))
                centers[c] = feats[far]
                new_assign[far] = c
        if (new_assign == assign).all():
            break
        assign = new_assign

    medoids = []
    for c in range(k):
        members = np.flatnonzero(assign == c)
        d2 = ((feats[members] - centers[c]) ** 2).sum(axis=1)
        medoids.append(int(members[int(np.argmin(d2))]))
    return np.array(sorted(medoids), dtype=np.int64)


def mean_shape(betas: np.ndarray) -> np.ndarray:
    """Average of per-frame shape estimates."""
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 2 or betas.shape[0] == 0:
        raise ValueError("need a non-empty (frames, n_beta) array")
    return betas.mean(axis=0)


@dataclass
class ShapeEstimate:
    beta: np.ndarray
    frame_indices: np.ndarray
    per_frame_betas: np.ndarray
    results: list[FitResult]


def estimate_subject_shape(
    model: ArticulatedModel,
    mocap_frames: np.ndarray,
    k_frames: int = 20,
    seed: int = 0,
    beta_init: np.ndarray | None = None,
    weights: EnergyWeights | None = None,
    scales: RobustScales | None = None,
    max_iters: int = 150,
) -> ShapeEstimate:
    """Fit the selected representative frames with free shape; average the betas."""
    mocap_frames = np.asarray(mocap_frames, dtype=np.float64)
    if mocap_frames.shape[0] == 0:
        raise ValueError("no frames given")
    idx = select_representative_frames(mocap_frames, k_frames, seed=seed)
    weights = weights or EnergyWeights()
    scales = scales or RobustScales()
    beta0 = np.zeros(model.shape_dim) if beta_init is None else np.asarray(beta_init)

    betas, results = [], []
    for i in idx:
        obs = Observations(mocap_points=mocap_frames[i], scales=scales)
        init = ModelParams(beta=beta0, theta=np.zeros(3 * model.joint_count), gamma=np.zeros(3))
        res = optimize(model, init, obs, default_full_stages(weights, max_iters=max_iters))
        betas.append(res.params.beta)
        results.append(res)
    betas = np.asarray(betas)
    return ShapeEstimate(
        beta=mean_shape(betas), frame_indices=idx, per_frame_betas=betas, results=results
    )


# ---------------------------------------------------------------------------
# stage schedules


def default_full_stages(weights: EnergyWeights | None = None, max_iters: int = 150) -> list[FitStage]:
    """Coarse-to-fine: root+translation, all rotations, then shape as well.

    Early stages run the robust kernels at a coarse scale so far-off markers
    still pull; the last stage reports at the observation scales.
    """
    w = weights or EnergyWeights()
    coarse = RobustScales(mocap=0.5, kp=60.0, sil=20.0)
    mid = RobustScales(mocap=0.15, kp=25.0, sil=10.0)
    return [
        FitStage(("theta_root", "gamma"), ("mocap",), w, max_iters=max_iters, scales=coarse),
        FitStage(("theta", "gamma"), ("mocap", "theta", "limit"), w, max_iters=max_iters, scales=mid),
        FitStage(("theta", "gamma"), ("mocap", "theta", "limit"), w, max_iters=max_iters),
        FitStage(("beta", "theta", "gamma"), ("mocap", "beta", "theta", "limit"), w, max_iters=max_iters),
    ]


def default_sequence_stages(weights: EnergyWeights | None = None, max_iters: int = 120) -> list[FitStage]:
    """Per-frame schedule with the subject shape held fixed."""
    w = weights or EnergyWeights()
    return [
        FitStage(("theta_root", "gamma"), ("mocap",), w, max_iters=max_iters,
                 scales=RobustScales(mocap=0.2)),
        FitStage(("theta", "gamma"), ("mocap", "theta", "limit"), w, max_iters=max_iters,
                 scales=RobustScales(mocap=0.1)),
        FitStage(("theta", "gamma"), ("mocap", "theta", "limit"), w, max_iters=max_iters),
    ]


def silhouette_stages(weights: EnergyWeights | None = None, max_iters: int = 150) -> list[FitStage]:
    """Schedule for fits that also carry silhouette views."""
    w = weights or EnergyWeights()
    return [
        FitStage(("theta_root", "gamma"), ("mocap",), w, max_iters=max_iters,
                 scales=RobustScales(mocap=0.5, kp=60.0, sil=20.0)),
        FitStage(("theta", "gamma"), ("mocap", "theta", "limit"), w, max_iters=max_iters,
                 scales=RobustScales(mocap=0.15, kp=25.0, sil=10.0)),
        FitStage(
            ("beta", "theta", "gamma"),
            ("mocap", "sil", "beta", "theta", "limit"),
            w,
            max_iters=max_iters,
        ),
    ]


# ---------------------------------------------------------------------------
# template generation (one shape per subject)


@dataclass
class TemplateResult:
    beta: np.ndarray
    camera: Camera
    params: ModelParams
    em_iterations: int
    alignment: AlignmentResult
    iteration_log: list[dict]


def generate_template(
    model: ArticulatedModel,
    keypoints: np.ndarray,
    keypoint_visibility: np.ndarray | None,
    silhouette_mask: BinaryMask,
    mocap_frame: np.ndarray,
    camera_init: Camera,
    weights: EnergyWeights | None = None,
    scales: RobustScales | None = None,
    em_iterations: int = 3,
    max_iters: int = 150,
) -> TemplateResult:
    """Estimate one subject shape and a calibrated camera from a reference frame.

    Requires all three observation kinds.  Pipeline: (a) 2D-only fit from the
    keypoints and silhouette, (b) align the raw mocap frame to the posed
    model markers, (c) refine the camera focal lengths on the aligned
    markers, (d) full fit with markers, silhouette and priors; (b)-(d) run
    ``em_iterations`` (default three) times.
    """
    if keypoints is None or silhouette_mask is None or mocap_frame is None:
        raise ValueError("template generation needs keypoints, a silhouette and a mocap frame")
    w = weights or EnergyWeights()
    scales = scales or RobustScales()
    camera = camera_init

    obs_2d = Observations(
        keypoints=keypoints,
        keypoint_visibility=keypoint_visibility,
        keypoint_camera=camera,
        silhouettes=((camera, silhouette_mask),),
        scales=scales,
    )
    stages_2d = [
        FitStage(("theta_root", "gamma"), ("kp",), w, max_iters=max_iters),
        FitStage(("theta", "gamma"), ("kp", "theta", "limit"), w, max_iters=max_iters),
        FitStage(("beta", "theta", "gamma"), ("kp", "sil", "beta", "theta", "limit"), w, max_iters=max_iters),
    ]
    result = optimize(model, ModelParams.rest(model), obs_2d, stages_2d)
    params = result.params

    log: list[dict] = []
    alignment = None
    for it in range(em_iterations):
        markers_now = model_markers(model, params)
        alignment = align_mocap_to_model(mocap_frame, markers_now)
        aligned = alignment.transformed
        camera = refine_focal(
            camera, to_camera_frame(camera, aligned), np.asarray(keypoints), robust_scale=scales.kp
        )
        obs_full = Observations(
            mocap_points=aligned,
            keypoints=keypoints,
            keypoint_visibility=keypoint_visibility,
            keypoint_camera=camera,
            silhouettes=((camera, silhouette_mask),),
            scales=scales,
        )
        result = optimize(model, params, obs_full, silhouette_stages(w, max_iters=max_iters))
        params = result.params
        log.append(
            {
                "iteration": it + 1,
                "alignment_residual": alignment.residual_rms,
                "fx": camera.fx,
                "fy": camera.fy,
                "objective": result.final_objective,
            }
        )
    return TemplateResult(
        beta=params.beta,
        camera=camera,
        params=params,
        em_iterations=em_iterations,
        alignment=alignment,
        iteration_log=log,
    )


# ---------------------------------------------------------------------------
# sequence fitting


def fit_sequence(
    model: ArticulatedModel,
    subject_beta: np.ndarray,
    frame_observations: list[Observations],
    stages: list[FitStage] | None = None,
    weights: EnergyWeights | None = None,
) -> list[FitResult]:
    """Per-frame fitting with a fixed subject shape and warm starts.

    Frame 0 starts from the rest pose; frame t from frame t-1's pose.  Frames
    without observations are flagged in their result and the sequence
    continues.  ``beta`` is never free.
    """
    subject_beta = np.asarray(subject_beta, dtype=np.float64)
    stages = stages or default_sequence_stages(weights)
    if any("beta" in s.free_params for s in stages):
        raise ValueError("sequence fitting keeps the subject shape fixed")
    theta = np.zeros(3 * model.joint_count)
    gamma = np.zeros(3)
    results: list[FitResult] = []
    for t, obs in enumerate(frame_observations):
        init = ModelParams(beta=subject_beta, theta=theta, gamma=gamma)
        if obs is None or obs.empty():
            results.append(
                FitResult(
                    params=init,
                    final_objective=np.nan,
                    term_energies={},
                    weights=stages[-1].weights,
                    iterations=0,
                    converged=False,
                    error=f"frame {t}: no observations",
                )
            )
            continue
        res = optimize(model, init, obs, stages)
        theta, gamma = res.params.theta.copy(), res.params.gamma.copy()
        results.append(res)
    return results


# ---------------------------------------------------------------------------
# mocap CSV and fit-config formats


def write_mocap_csv(path: str | Path, frames: np.ndarray, marker_names: list[str]) -> None:
    """Long-format CSV: frame_index, marker_name, x, y, z (NaN for missing)."""
    frames = np.asarray(frames, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_index", "marker_name", "x", "y", "z"])
        for t in range(frames.shape[0]):
            for m, name in enumerate(marker_names):
                x, y, z = frames[t, m]
                writer.writerow([t, name, repr(float(x)), repr(float(y)), repr(float(z))])


def read_mocap_csv(path: str | Path, marker_names: list[str]) -> np.ndarray:
    """Read the long-format CSV into (frames, markers, 3); missing rows are NaN."""
    name_to_idx = {n: i for i, n in enumerate(marker_names)}
    rows: list[tuple[int, int, float, float, float]] = []
    unknown: set[str] = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["frame_index", "marker_name"]:
            raise ValueError(f"{path}: expected header frame_index,marker_name,x,y,z")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                t = int(row[0])
                name = row[1]
                x, y, z = float(row[2]), float(row[3]), float(row[4])
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}: corrupt CSV row at line {lineno}: {row!r}") from exc
            if name not in name_to_idx:
                unknown.add(name)
                continue
            rows.append((t, name_to_idx[name], x, y, z))
    if unknown:
        raise ValueError(
            f"{path}: marker names not in the model marker set: {sorted(unknown)}; "
            f"expected names: {list(marker_names)}"
        )
    if not rows:
        raise ValueError(f"{path}: no data rows")
    T = max(r[0] for r in rows) + 1
    out = np.full((T, len(marker_names), 3), np.nan)
    for t, m, x, y, z in rows:
        out[t, m] = (x, y, z)
    return out


@dataclass(frozen=True)
class FitConfig:
    weights: EnergyWeights = field(default_factory=EnergyWeights)
    scales: RobustScales = field(default_factory=RobustScales)
    stages: tuple[FitStage, ...] | None = None  # None -> default sequence schedule
    seed: int = 0
    max_iters: int = 120
    k_frames: int = 20

    def sequence_stages(self) -> list[FitStage]:
        if self.stages is not None:
            return list(self.stages)
        return default_sequence_stages(self.weights, max_iters=self.max_iters)


def fit_config_from_json(text: str) -> FitConfig:
    doc = json.loads(text)
    weights = EnergyWeights(**doc.get("weights", {}))
    scales = RobustScales(**doc.get("robust_scales", {}))
    stages = None
    if "stages" in doc:
        stages = tuple(
            FitStage(
                free_params=tuple(s["free_params"]),
                active_terms=tuple(s["active_terms"]),
                weights=EnergyWeights(**s.get("weights", doc.get("weights", {}))),
                max_iters=int(s.get("max_iters", doc.get("max_iters", 120))),
                convergence_tol=float(s.get("convergence_tol", 1e-6)),
            )
            for s in doc["stages"]
        )
    return FitConfig(
        weights=weights,
        scales=scales,
        stages=stages,
        seed=int(doc.get("seed", 0)),
        max_iters=int(doc.get("max_iters", 120)),
        k_frames=int(doc.get("k_frames", 20)),
    )


def load_fit_config(path: str | Path) -> FitConfig:
    return fit_config_from_json(Path(path).read_text())
