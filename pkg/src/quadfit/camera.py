"""Perspective camera: projection and focal-length refinement.

Pixel convention: continuous coordinates (u, v) map to pixel columns/rows so
that integer coordinates land on pixel centers (u = column, v = row).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .robust import geman_mcclure


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    k: tuple[float, ...] = ()  # radial distortion coefficients, zero during fitting
    R: np.ndarray = None  # world -> camera rotation
    t: np.ndarray = None  # world -> camera translation (meters)
    width: int = 256
    height: int = 256

    def __post_init__(self):
        R = np.eye(3) if self.R is None else np.asarray(self.R, dtype=np.float64)
        t = np.zeros(3) if self.t is None else np.asarray(self.t, dtype=np.float64)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "k", tuple(float(c) for c in self.k))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("R must be 3x3 and t length 3")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("R must be orthonormal with determinant +1")

    def with_focal(self, fx: float, fy: float) -> "Camera":
        return replace(self, fx=fx, fy=fy)


def to_camera_frame(camera: Camera, points: np.ndarray) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) @ camera.R.T + camera.t


def project(camera: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project world points to pixels.

    Returns ``(uv, valid)``: (N, 2) pixel coordinates and a boolean mask that
    is False for points at non-positive camera depth (their uv rows are NaN);
    callers skip those residuals.
    """
    pc = to_camera_frame(camera, points)
    z = pc[:, 2]
    valid = z > 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        x = pc[:, 0] / z
        y = pc[:, 1] / z
        if camera.k:
            r2 = x * x + y * y
            scale = np.ones_like(r2)
            rpow = r2.copy()
            for coeff in camera.k:
                scale = scale + coeff * rpow
                rpow = rpow * r2
            x = x * scale
            y = y * scale
        uv = np.stack([camera.fx * x + camera.cx, camera.fy * y + camera.cy], axis=1)
    uv[~valid] = np.nan
    return uv, valid


def project_camera_frame(points_cam: np.ndarray, fx: float, fy: float, cx: float, cy: float):
    """Pinhole projection of points already in the camera frame (no distortion)."""
    pc = np.asarray(points_cam, dtype=np.float64)
    z = pc[:, 2]
    valid = z > 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        uv = np.stack([fx * pc[:, 0] / z + cx, fy * pc[:, 1] / z + cy], axis=1)
    uv[~valid] = np.nan
    return uv, valid


def refine_focal(
    camera: Camera,
    markers_cam: np.ndarray,
    keypoints_2d: np.ndarray,
    robust_scale: float = 10.0,
    tie_weight: float = 1.0,
    max_iters: int = 100,
    tol: float = 1e-12,
) -> Camera:
    """Re-estimate (fx, fy) from 3D/2D correspondences.

    Minimizes the robustified reprojection error of ``markers_cam`` (points in
    the camera frame) against ``keypoints_2d`` plus ``tie_weight * |fx - fy|``,
    by damped Gauss-Newton with backtracking.  Far from the optimum the robust
    kernel saturates and gives no usable gradient, so a plain least-squares
    estimate of the focals is polished alongside the input camera and the
    better of the two is returned; only the focal lengths change and the
    objective never increases.
    """
    pts = np.asarray(markers_cam, dtype=np.float64)
    kps = np.asarray(keypoints_2d, dtype=np.float64)
    front = pts[:, 2] > 0.0
    if front.sum() == 0:
        raise ValueError("all correspondence points are behind the camera")
    if front.sum() < 2:
        raise ValueError("need at least 2 correspondences with positive depth")
    pts, kps = pts[front], kps[front]
    xn = pts[:, 0] / pts[:, 2]
    yn = pts[:, 1] / pts[:, 2]

    def objective(f):
        du = f[0] * xn + camera.cx - kps[:, 0]
        dv = f[1] * yn + camera.cy - kps[:, 1]
        e = np.hypot(du, dv)
        return geman_mcclure(e, robust_scale).sum() + tie_weight * abs(f[0] - f[1])

    def grad_and_gn(f):
        du = f[0] * xn + camera.cx - kps[:, 0]
        dv = f[1] * yn + camera.cy - kps[:, 1]
        e2 = du * du + dv * dv
        c2 = robust_scale * robust_scale
        # d rho / d e2 for rho = e2 / (e2 + c2)
        drho = c2 / (e2 + c2) ** 2
        g = np.array(
            [np.sum(drho * 2.0 * du * xn), np.sum(drho * 2.0 * dv * yn)]
        )
        H = np.diag(
            [np.sum(2.0 * drho * xn * xn), np.sum(2.0 * drho * yn * yn)]
        )
        sign = np.sign(f[0] - f[1])
        g += tie_weight * np.array([sign, -sign])
        return g, H

    def polish(f0):
        f = f0.copy()
        obj = objective(f)
        damping = 1e-6
        for _ in range(max_iters):
            g, H = grad_and_gn(f)
            step = -np.linalg.solve(H + damping * np.eye(2), g)
            alpha, improved = 1.0, False
            for _ in range(40):
                cand = f + alpha * step
                if cand.min() > 0:
                    cand_obj = objective(cand)
                    if cand_obj < obj - 1e-18:
                        f, obj, improved = cand, cand_obj, True
                        break
                alpha *= 0.5
            if not improved:
                damping *= 10.0
                if damping > 1e6:
                    break
                continue
            damping = max(damping * 0.3, 1e-9)
            if abs(alpha * step[0]) + abs(alpha * step[1]) < tol:
                break
        return f, obj

    starts = [np.array([camera.fx, camera.fy], dtype=np.float64)]
    sx, sy = np.sum(xn * xn), np.sum(yn * yn)
    if sx > 0 and sy > 0:
        f_lin = np.array(
            [np.sum(xn * (kps[:, 0] - camera.cx)) / sx, np.sum(yn * (kps[:, 1] - camera.cy)) / sy]
        )
        if f_lin.min() > 0:
            starts.append(f_lin)
    best_f, best_obj = None, np.inf
    for f0 in starts:
        f, obj = polish(f0)
        if obj < best_obj:
            best_f, best_obj = f, obj
    if best_obj > objective(starts[0]):
        best_f = starts[0]
    return camera.with_focal(float(best_f[0]), float(best_f[1]))


# ---------------------------------------------------------------------------
# serialization


def camera_to_json(camera: Camera) -> str:
    doc = {
        "fx": camera.fx,
        "fy": camera.fy,
        "cx": camera.cx,
        "cy": camera.cy,
        "k": list(camera.k),
        "R": camera.R.reshape(-1).tolist(),
        "t": camera.t.tolist(),
        "width": camera.width,
        "height": camera.height,
    }
    return json.dumps(doc, separators=(",", ":"), sort_keys=True)


def camera_from_json(text: str) -> Camera:
    doc = json.loads(text)
    return Camera(
        fx=doc["fx"],
        fy=doc["fy"],
        cx=doc["cx"],
        cy=doc["cy"],
        k=tuple(doc.get("k", ())),
        R=np.asarray(doc["R"], dtype=np.float64).reshape(3, 3),
        t=np.asarray(doc["t"], dtype=np.float64),
        width=int(doc["width"]),
        height=int(doc["height"]),
    )


def save_camera(camera: Camera, path: str | Path) -> None:
    Path(path).write_text(camera_to_json(camera))


def load_camera(path: str | Path) -> Camera:
    return camera_from_json(Path(path).read_text())


def look_at_camera(
    eye: np.ndarray,
    target: np.ndarray,
    fx: float = 500.0,
    fy: float = 500.0,
    width: int = 256,
    height: int = 256,
    up=(0.0, 0.0, 1.0),
) -> Camera:
    """Convenience constructor: a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        raise ValueError("view direction is parallel to the up vector")
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])  # rows: camera axes in world coords
    return Camera(
        fx=fx, fy=fy, cx=width / 2.0, cy=height / 2.0, R=R, t=-R @ eye,
        width=width, height=height,
    )
