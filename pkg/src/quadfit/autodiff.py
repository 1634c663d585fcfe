"""Differentiable (torch, float64) evaluation of the fitting objective.

Mirrors the numpy energies exactly for the marker, keypoint, prior, limit and
camera terms (value parity is enforced by tests).  The silhouette term is a
smooth surrogate: the ground-truth mask's distance field sampled (bilinearly)
at the projected mesh vertices.  The exact pixel-set silhouette energy is not
differentiable; the surrogate vanishes together with it at a perfect fit and
pulls stray vertices back inside the observed silhouette.

Gradients come from reverse-mode autodiff; robust kernels are evaluated on
squared norms so the objective is smooth at zero residual.
"""

from __future__ import annotations

import numpy as np
import torch

from .body_model import ArticulatedModel, topological_order
from .camera import Camera
from .energies import EnergyWeights, Observations
from .silhouette import distance_transform

_DT = torch.float64


def _t(a) -> torch.Tensor:
    return torch.tensor(np.asarray(a, dtype=np.float64), dtype=_DT)


def rodrigues_torch(aa: torch.Tensor) -> torch.Tensor:
    """Axis-angle (J, 3) to rotation matrices (J, 3, 3), differentiable at 0."""
    theta2 = (aa * aa).sum(dim=1)
    small = theta2 < 1e-16
    # clamp inside the untaken branch keeps its gradient finite
    theta2_safe = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(theta2_safe)
    c1 = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    c2 = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / theta2_safe)

    J = aa.shape[0]
    zero = torch.zeros(J, dtype=aa.dtype)
    K = torch.stack(
        [zero, -aa[:, 2], aa[:, 1], aa[:, 2], zero, -aa[:, 0], -aa[:, 1], aa[:, 0], zero],
        dim=1,
    ).view(J, 3, 3)
    eye = torch.eye(3, dtype=aa.dtype).expand(J, 3, 3)
    return eye + c1[:, None, None] * K + c2[:, None, None] * (K @ K)


class TorchBody:
    """Torch constants of a model plus the differentiable posing pipeline."""

    def __init__(self, model: ArticulatedModel):
        self.model = model
        self.template = _t(model.template_vertices)
        self.shape_basis = _t(model.shape_basis)
        self.regressor = _t(model.joint_regressor)
        self.skin = _t(model.skin_weights)
        self.marker_idx = torch.tensor(np.asarray(model.marker_set.vertex_indices))
        self.marker_w = _t(model.marker_set.weights)
        self.parents = [int(p) for p in model.kinematic_tree]
        self.order = topological_order(model.kinematic_tree)
        self.J = model.joint_count

    def pose(self, beta, theta, gamma):
        """Returns (posed_vertices (V,3), world rotations, world translations)."""
        verts = self.template + (self.shape_basis @ beta).view(-1, 3)
        rest = self.regressor @ verts
        R_local = rodrigues_torch(theta.view(self.J, 3))
        eye = torch.eye(3, dtype=_DT)
        R_world = [None] * self.J
        drift = [None] * self.J
        for k in self.order:
            p = self.parents[k]
            if p < 0:
                R_world[k] = R_local[k]
                drift[k] = gamma
            else:
                R_world[k] = R_world[p] @ R_local[k]
                drift[k] = drift[p] + (R_world[p] - eye) @ (rest[k] - rest[p])
        R = torch.stack(R_world)
        d = torch.stack(drift)
        # rest-relative transforms blended by the skin weights
        a_trans = d + rest - torch.einsum("jab,jb->ja", R, rest)
        TR = torch.einsum("vj,jab->vab", self.skin, R)
        Tt = self.skin @ a_trans
        posed = torch.einsum("vab,vb->va", TR, verts) + Tt
        return posed, R, d + rest

    def markers(self, posed):
        tri = posed[self.marker_idx]  # (M, 3, 3)
        return (tri * self.marker_w[:, :, None]).sum(dim=1)

    def joint_positions(self, beta, theta, gamma):
        _, _, t = self.pose(beta, theta, gamma)
        return t


def _gm_sq(d2: torch.Tensor, c: float) -> torch.Tensor:
    return d2 / (d2 + c * c)


def _bilinear(field: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    h, w = field.shape
    u = u.clamp(0.0, w - 1.000001)
    v = v.clamp(0.0, h - 1.000001)
    u0 = u.floor()
    v0 = v.floor()
    du = u - u0
    dv = v - v0
    u0l = u0.long()
    v0l = v0.long()
    f00 = field[v0l, u0l]
    f01 = field[v0l, u0l + 1]
    f10 = field[v0l + 1, u0l]
    f11 = field[v0l + 1, u0l + 1]
    return (1 - dv) * ((1 - du) * f00 + du * f01) + dv * ((1 - du) * f10 + du * f11)


class _CameraConsts:
    def __init__(self, camera: Camera):
        self.R = _t(camera.R)
        self.t = _t(camera.t)
        self.f = torch.tensor([camera.fx, camera.fy], dtype=_DT)
        self.c = torch.tensor([camera.cx, camera.cy], dtype=_DT)
        self.source = camera


def _project(cc: _CameraConsts, pts: torch.Tensor, f: torch.Tensor | None):
    pc = pts @ cc.R.T + cc.t
    z = pc[:, 2]
    valid = (z > 1e-9).detach()
    z_safe = z.clamp_min(1e-9)
    focal = cc.f if f is None else f
    uv = pc[:, :2] / z_safe[:, None] * focal + cc.c
    return uv, valid


class FitObjective:
    """Weighted differentiable objective over (beta, theta, gamma [, focal]).

    When a ``camera`` is supplied its focal pair may be optimized as the
    ``camera_f`` block; the keypoint term and any silhouette view sharing that
    camera object then project through the variable focal.
    """

    def __init__(
        self,
        model: ArticulatedModel,
        obs: Observations,
        weights: EnergyWeights,
        active_terms: tuple[str, ...],
        camera: Camera | None = None,
    ):
        self.body = TorchBody(model)
        self.weights = weights
        self.active = tuple(active_terms)
        self.scales = obs.scales
        self.camera = camera

        self.mocap = None
        if obs.mocap_points is not None:
            pts = np.asarray(obs.mocap_points, dtype=np.float64)
            present = ~np.isnan(pts).any(axis=1)
            safe = np.where(present[:, None], pts, 0.0)
            self.mocap = (
                _t(safe),
                _t(present.astype(np.float64)),
            )

        self.kp = None
        if obs.keypoints is not None and obs.keypoint_camera is not None:
            self.kp = (
                _CameraConsts(obs.keypoint_camera),
                _t(obs.keypoints),
                _t(obs.keypoint_visibility.astype(np.float64)),
            )

        self.sil_views = []
        for cam, gt in obs.silhouettes:
            d = distance_transform(gt).values
            cap = float(gt.width + gt.height)
            d = np.where(np.isfinite(d), d, cap)
            self.sil_views.append((_CameraConsts(cam), _t(d)))

        prior_mean = np.asarray(model.shape_mean)
        self.beta_mean = _t(prior_mean)
        self.beta_prec = _t(model.shape_precision)
        self.theta_mean = _t(model.pose_mean[3:])
        self.theta_prec = _t(model.pose_precision[3:, 3:])
        self.lim_lo = _t(model.joint_limits[:, 0])
        self.lim_hi = _t(model.joint_limits[:, 1])

    def _focal_for(self, cc: _CameraConsts, f: torch.Tensor | None):
        if f is not None and self.camera is not None and cc.source is self.camera:
            return f
        return None

    def term_values(self, beta, theta, gamma, f=None) -> dict[str, torch.Tensor]:
        need_pose = any(t in self.active for t in ("mocap", "kp", "sil"))
        out: dict[str, torch.Tensor] = {}
        if need_pose:
            posed, _, _ = self.body.pose(beta, theta, gamma)
            mk = self.body.markers(posed)
        if "mocap" in self.active:
            pts, present = self.mocap
            d2 = ((mk - pts) ** 2).sum(dim=1)
            out["mocap"] = (_gm_sq(d2, self.scales.mocap) * present).sum()
        if "kp" in self.active:
            cc, kps, vis = self.kp
            uv, valid = _project(cc, mk, self._focal_for(cc, f))
            d2 = ((uv - kps) ** 2).sum(dim=1)
            out["kp"] = (_gm_sq(d2, self.scales.kp) * vis * valid).sum()
        if "sil" in self.active:
            total = None
            for cc, field in self.sil_views:
                uv, valid = _project(cc, posed, self._focal_for(cc, f))
                samp = _bilinear(field, uv[:, 0], uv[:, 1]) * valid
                term = samp.sum() / max(float(valid.sum()), 1.0)
                total = term if total is None else total + term
            out["sil"] = total
        if "beta" in self.active:
            d = beta - self.beta_mean
            out["beta"] = d @ self.beta_prec @ d
        if "theta" in self.active:
            d = theta[3:] - self.theta_mean
            out["theta"] = d @ self.theta_prec @ d
        if "limit" in self.active:
            out["limit"] = (
                torch.relu(theta - self.lim_hi).sum() + torch.relu(self.lim_lo - theta).sum()
            )
        if "cam" in self.active and f is not None:
            out["cam"] = torch.abs(f[0] - f[1])
        return out

    def value_tensor(self, beta, theta, gamma, f=None) -> torch.Tensor:
        terms = self.term_values(beta, theta, gamma, f)
        total = torch.zeros((), dtype=_DT)
        for name, v in terms.items():
            total = total + self.weights.get(name) * v
        return total

    def value(self, beta: np.ndarray, theta: np.ndarray, gamma: np.ndarray, f=None) -> float:
        with torch.no_grad():
            return float(
                self.value_tensor(
                    _t(beta),
                    _t(theta),
                    _t(gamma),
                    None if f is None else _t(f),
                )
            )

    def breakdown(self, beta, theta, gamma, f=None) -> dict[str, float]:
        with torch.no_grad():
            terms = self.term_values(
                _t(beta), _t(theta), _t(gamma), None if f is None else _t(f)
            )
        return {k: float(v) for k, v in terms.items()}

    def value_and_grad(
        self,
        beta: np.ndarray,
        theta: np.ndarray,
        gamma: np.ndarray,
        f: np.ndarray | None = None,
        free: tuple[str, ...] = ("beta", "theta", "gamma"),
    ) -> tuple[float, dict[str, np.ndarray]]:
        tb = _t(beta)
        tt = _t(theta)
        tg = _t(gamma)
        tf = None if f is None else _t(f)
        tensors = {"beta": tb, "theta": tt, "gamma": tg}
        if tf is not None:
            tensors["camera_f"] = tf
        for name in free:
            if name == "theta_root":
                continue
            tensors[name].requires_grad_(True)
        if "theta_root" in free and not tt.requires_grad:
            tt.requires_grad_(True)
        total = self.value_tensor(tb, tt, tg, tf)
        total.backward()

        def grad_of(t):
            # a block that the active terms never touch has no grad
            return np.zeros(t.shape) if t.grad is None else t.grad.numpy().copy()

        grads: dict[str, np.ndarray] = {}
        for name in free:
            if name == "theta_root":
                g = np.zeros_like(np.asarray(theta, dtype=np.float64))
                g[:3] = grad_of(tt)[:3]
                grads[name] = g
            elif name == "theta":
                grads[name] = grad_of(tt)
            else:
                grads[name] = grad_of(tensors[name])
        return float(total.detach()), grads
