"""Parametric articulated quadruped mesh.

A model is a template mesh plus a linear shape space, a kinematic tree with
per-vertex skinning weights, a row-stochastic joint regressor and a set of
surface markers expressed in barycentric coordinates.  Posing a model is a
fixed pipeline::

    shaped = shape_blend(model, beta)
    joints = regress_joints(model, shaped)
    transforms = forward_kinematics(model, theta, gamma, rest_joints=joints)
    posed = skin_vertices(model, shaped, transforms)
    markers = marker_positions(model, posed)

All functions are pure; :class:`ArticulatedModel` is immutable after
construction and safe to share between threads.

Conventions: x is the lateral axis (sagittal plane x = 0, left is +x),
y points forward, z points up.  Rotations are axis-angle, three values per
joint, with joint 0 the root (its rotation is the global orientation, and
``gamma`` is the global translation).  Units are meters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


def _as_readonly(a, dtype=np.float64):
    out = np.asarray(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class MarkerSet:
    """Surface markers as convex combinations of the vertices of a mesh face."""

    names: tuple[str, ...]
    vertex_indices: np.ndarray  # (M, 3) int
    weights: np.ndarray  # (M, 3) barycentric, rows sum to 1

    def __post_init__(self):
        object.__setattr__(self, "vertex_indices", _as_readonly(self.vertex_indices, np.int64))
        object.__setattr__(self, "weights", _as_readonly(self.weights))
        object.__setattr__(self, "names", tuple(self.names))

    def __len__(self):
        return len(self.names)


@dataclass(frozen=True)
class ArticulatedModel:
    template_vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    shape_basis: np.ndarray  # (3V, n_beta), vertex-major (x, y, z) layout
    shape_mean: np.ndarray  # (n_beta,)
    shape_precision: np.ndarray  # (n_beta, n_beta), symmetric PSD
    pose_mean: np.ndarray  # (3J,)
    pose_precision: np.ndarray  # (3J, 3J), symmetric PSD
    kinematic_tree: np.ndarray  # (J,) parent index, -1 at the root
    segment_of_vertex: np.ndarray  # (V,)
    skin_weights: np.ndarray  # (V, J), rows sum to 1
    joint_regressor: np.ndarray  # (J, V), row-stochastic
    joint_limits: np.ndarray  # (3J, 2) [min, max], +-inf where unbounded
    marker_set: MarkerSet
    joint_names: tuple[str, ...]
    joint_left_right_pairs: tuple[tuple[int, int], ...] = ()
    marker_left_right_pairs: tuple[tuple[int, int], ...] = ()
    build_config: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "template_vertices", _as_readonly(self.template_vertices))
        object.__setattr__(self, "faces", _as_readonly(self.faces, np.int64))
        object.__setattr__(self, "shape_basis", _as_readonly(self.shape_basis))
        object.__setattr__(self, "shape_mean", _as_readonly(self.shape_mean))
        object.__setattr__(self, "shape_precision", _as_readonly(self.shape_precision))
        object.__setattr__(self, "pose_mean", _as_readonly(self.pose_mean))
        object.__setattr__(self, "pose_precision", _as_readonly(self.pose_precision))
        object.__setattr__(self, "kinematic_tree", _as_readonly(self.kinematic_tree, np.int64))
        object.__setattr__(self, "segment_of_vertex", _as_readonly(self.segment_of_vertex, np.int64))
        object.__setattr__(self, "skin_weights", _as_readonly(self.skin_weights))
        object.__setattr__(self, "joint_regressor", _as_readonly(self.joint_regressor))
        object.__setattr__(self, "joint_limits", _as_readonly(self.joint_limits))
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(
            self, "joint_left_right_pairs", tuple(tuple(p) for p in self.joint_left_right_pairs)
        )
        object.__setattr__(
            self, "marker_left_right_pairs", tuple(tuple(p) for p in self.marker_left_right_pairs)
        )
        validate_model(self)

    @property
    def vertex_count(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def joint_count(self) -> int:
        return self.kinematic_tree.shape[0]

    @property
    def shape_dim(self) -> int:
        return self.shape_basis.shape[1]

    @property
    def root_joint(self) -> int:
        return int(np.flatnonzero(self.kinematic_tree < 0)[0])

    def classifier_excluded_joints(self) -> tuple[int, ...]:
        """Joints flagged out of the classifier graph (ears and mouth)."""
        return tuple(
            i for i, n in enumerate(self.joint_names) if n.startswith(("ear", "mouth"))
        )


@dataclass(frozen=True)
class ModelParams:
    """One frame of model parameters: shape, per-joint rotations, translation."""

    beta: np.ndarray  # (n_beta,)
    theta: np.ndarray  # (3J,), theta[0:3] is the root / global rotation
    gamma: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "beta", _as_readonly(self.beta))
        object.__setattr__(self, "theta", _as_readonly(self.theta))
        object.__setattr__(self, "gamma", _as_readonly(self.gamma))
        if self.gamma.shape != (3,):
            raise ValueError(f"gamma must have shape (3,), got {self.gamma.shape}")

    @classmethod
    def rest(cls, model: ArticulatedModel) -> "ModelParams":
        return cls(
            beta=np.zeros(model.shape_dim),
            theta=np.zeros(3 * model.joint_count),
            gamma=np.zeros(3),
        )

    def with_(self, **kw) -> "ModelParams":
        return replace(self, **kw)

    def validate_for(self, model: ArticulatedModel) -> None:
        if self.beta.shape != (model.shape_dim,):
            raise ValueError(
                f"beta has length {self.beta.shape[0]}, model expects {model.shape_dim}"
            )
        if self.theta.shape != (3 * model.joint_count,):
            raise ValueError(
                f"theta has length {self.theta.shape[0]}, model expects {3 * model.joint_count}"
            )


def validate_model(model: ArticulatedModel, tol: float = 1e-9) -> None:
    """Check every structural invariant; raise ``ValueError`` on the first failure."""
    V, J = model.vertex_count, model.joint_count
    if model.template_vertices.shape != (V, 3):
        raise ValueError("template_vertices must be (V, 3)")
    if model.faces.ndim != 2 or model.faces.shape[1] != 3:
        raise ValueError("faces must be (F, 3)")
    if model.faces.size and (model.faces.min() < 0 or model.faces.max() >= V):
        raise ValueError("face indices out of range")
    if model.shape_basis.shape[0] != 3 * V:
        raise ValueError("shape_basis must have 3V rows")
    if model.shape_basis.shape[1] != model.shape_mean.shape[0]:
        raise ValueError("shape_basis column count must equal len(shape_mean)")
    n_b = model.shape_mean.shape[0]
    if model.shape_precision.shape != (n_b, n_b):
        raise ValueError("shape_precision must be (n_beta, n_beta)")
    if model.pose_mean.shape != (3 * J,):
        raise ValueError("pose_mean must have length 3J")
    if model.pose_precision.shape != (3 * J, 3 * J):
        raise ValueError("pose_precision must be (3J, 3J)")

    roots = np.flatnonzero(model.kinematic_tree < 0)
    if len(roots) != 1:
        raise ValueError(f"kinematic tree must have exactly one root, found {len(roots)}")
    # parents must already be visited in index order walk; detect cycles by ancestor walk
    for k in range(J):
        seen = set()
        j = k
        while j >= 0:
            if j in seen:
                raise ValueError("kinematic tree contains a cycle")
            seen.add(j)
            j = int(model.kinematic_tree[j])

    if model.skin_weights.shape != (V, J):
        raise ValueError("skin_weights must be (V, J)")
    if (model.skin_weights < -tol).any():
        raise ValueError("skin weights must be non-negative")
    if np.abs(model.skin_weights.sum(axis=1) - 1.0).max() > tol:
        raise ValueError("skin weight rows must sum to 1")

    if model.joint_regressor.shape != (J, V):
        raise ValueError("joint_regressor must be (J, V)")
    if np.abs(model.joint_regressor.sum(axis=1) - 1.0).max() > tol:
        raise ValueError("joint regressor rows must sum to 1")
    if (np.count_nonzero(model.joint_regressor, axis=1) < 1).any():
        raise ValueError("every joint regressor row must touch at least one vertex")

    if model.joint_limits.shape != (3 * J, 2):
        raise ValueError("joint_limits must be (3J, 2)")
    if (model.joint_limits[:, 0] > model.joint_limits[:, 1]).any():
        raise ValueError("joint limits must satisfy min <= max")

    ms = model.marker_set
    if ms.vertex_indices.shape != (len(ms), 3) or ms.weights.shape != (len(ms), 3):
        raise ValueError("marker set arrays must be (M, 3)")
    if (ms.weights < -tol).any() or np.abs(ms.weights.sum(axis=1) - 1.0).max() > tol:
        raise ValueError("marker barycentric weights must be non-negative and sum to 1")
    if ms.vertex_indices.size and (ms.vertex_indices.min() < 0 or ms.vertex_indices.max() >= V):
        raise ValueError("marker vertex index out of range")
    face_set = {tuple(sorted(f)) for f in model.faces.tolist()}
    for m, tri in enumerate(ms.vertex_indices.tolist()):
        if tuple(sorted(tri)) not in face_set:
            raise ValueError(f"marker {ms.names[m]} does not lie on a mesh face")

    if len(model.joint_names) != J:
        raise ValueError("joint_names length must equal joint count")
    if model.segment_of_vertex.shape != (V,):
        raise ValueError("segment_of_vertex must be (V,)")


# ---------------------------------------------------------------------------
# rotations


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Axis-angle vectors (..., 3) to rotation matrices (..., 3, 3).

    Uses the series expansion of sin(t)/t and (1-cos t)/t^2 below 1e-8 so the
    zero rotation maps to the exact identity.
    """
    aa = np.asarray(axis_angle, dtype=np.float64)
    shape = aa.shape[:-1]
    aa = aa.reshape(-1, 3)
    theta2 = (aa * aa).sum(axis=1)
    theta = np.sqrt(theta2)

    K = np.zeros((aa.shape[0], 3, 3))
    K[:, 0, 1] = -aa[:, 2]
    K[:, 0, 2] = aa[:, 1]
    K[:, 1, 0] = aa[:, 2]
    K[:, 1, 2] = -aa[:, 0]
    K[:, 2, 0] = -aa[:, 1]
    K[:, 2, 1] = aa[:, 0]

    small = theta < 1e-8
    with np.errstate(invalid="ignore", divide="ignore"):
        c1 = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / np.where(small, 1.0, theta))
        c2 = np.where(
            small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / np.where(small, 1.0, theta2)
        )
    R = np.eye(3)[None] + c1[:, None, None] * K + c2[:, None, None] * (K @ K)
    return R.reshape(*shape, 3, 3)


# ---------------------------------------------------------------------------
# forward geometry


def shape_blend(model: ArticulatedModel, beta: np.ndarray) -> np.ndarray:
    """Template plus the linear shape offset ``shape_basis @ beta``, as (V, 3)."""
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (model.shape_dim,):
        raise ValueError(f"beta has length {beta.shape}, expected ({model.shape_dim},)")
    offsets = (model.shape_basis @ beta).reshape(-1, 3)
    return model.template_vertices + offsets


def regress_joints(model: ArticulatedModel, shaped_vertices: np.ndarray) -> np.ndarray:
    """Rest joint positions as convex combinations of mesh vertices, (J, 3)."""
    shaped_vertices = np.asarray(shaped_vertices, dtype=np.float64)
    return model.joint_regressor @ shaped_vertices


def forward_kinematics(
    model: ArticulatedModel,
    theta: np.ndarray,
    gamma: np.ndarray,
    rest_joints: np.ndarray | None = None,
) -> np.ndarray:
    """World rigid transform per joint as a (J, 4, 4) stack.

    Joint k's transform is its parent's composed with a rotation about joint
    k's rest position; the root additionally carries the global rotation and
    the translation ``gamma``.  At ``theta = 0`` the translation column of
    every transform equals the joint's rest position exactly (translations are
    accumulated as offsets from the rest joints, so the rest pose does not
    pick up rounding error).
    """
    theta = np.asarray(theta, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    J = model.joint_count
    if theta.shape != (3 * J,):
        raise ValueError(f"theta has length {theta.shape}, expected ({3 * J},)")
    if rest_joints is None:
        rest_joints = regress_joints(model, model.template_vertices)
    rest_joints = np.asarray(rest_joints, dtype=np.float64)

    R_local = rodrigues(theta.reshape(J, 3))
    parents = model.kinematic_tree
    order = topological_order(parents)

    R_world = np.empty((J, 3, 3))
    drift = np.empty((J, 3))  # world translation minus rest position
    eye = np.eye(3)
    for k in order:
        p = int(parents[k])
        if p < 0:
            R_world[k] = R_local[k]
            drift[k] = gamma
        else:
            R_world[k] = R_world[p] @ R_local[k]
            drift[k] = drift[p] + (R_world[p] - eye) @ (rest_joints[k] - rest_joints[p])

    G = np.zeros((J, 4, 4))
    G[:, :3, :3] = R_world
    G[:, :3, 3] = rest_joints + drift
    G[:, 3, 3] = 1.0
    return G


def topological_order(parents: np.ndarray) -> list[int]:
    """Joint indices ordered so every parent precedes its children."""
    J = len(parents)
    order, placed = [], np.zeros(J, dtype=bool)
    pending = list(range(J))
    while pending:
        progressed = False
        rest = []
        for k in pending:
            p = int(parents[k])
            if p < 0 or placed[p]:
                order.append(k)
                placed[k] = True
                progressed = True
            else:
                rest.append(k)
        if not progressed:
            raise ValueError("kinematic tree is malformed (cycle or missing root)")
        pending = rest
    return order


def skin_vertices(
    model: ArticulatedModel,
    shaped_vertices: np.ndarray,
    joint_transforms: np.ndarray,
) -> np.ndarray:
    """Linear blend skinning of the shaped vertices, (V, 3).

    Each vertex is moved by the skin-weighted blend of its joints' transforms
    measured relative to the rest pose, so rest-pose transforms reproduce the
    input vertices exactly.
    """
    shaped_vertices = np.asarray(shaped_vertices, dtype=np.float64)
    joint_transforms = np.asarray(joint_transforms, dtype=np.float64)
    J = model.joint_count
    if joint_transforms.shape != (J, 4, 4):
        raise ValueError(f"joint_transforms must be ({J}, 4, 4)")
    if shaped_vertices.shape != (model.vertex_count, 3):
        raise ValueError("shaped_vertices must be (V, 3)")

    rest = regress_joints(model, shaped_vertices)
    R = joint_transforms[:, :3, :3]
    # translation of the rest-relative transform: t - R j, written so the rest
    # pose yields exact zeros
    drift = joint_transforms[:, :3, 3] - rest
    a_trans = drift + (rest - np.einsum("jab,jb->ja", R, rest))

    W = model.skin_weights
    blended_R = np.einsum("vj,jab->vab", W, R)
    blended_t = W @ a_trans
    return np.einsum("vab,vb->va", blended_R, shaped_vertices) + blended_t


def marker_positions(model: ArticulatedModel, posed_vertices: np.ndarray) -> np.ndarray:
    """Marker points from posed vertices via barycentric interpolation, (M, 3)."""
    posed_vertices = np.asarray(posed_vertices, dtype=np.float64)
    ms = model.marker_set
    if ms.vertex_indices.size and ms.vertex_indices.max() >= posed_vertices.shape[0]:
        raise ValueError("marker vertex index out of range for given vertices")
    tri = posed_vertices[ms.vertex_indices]  # (M, 3, 3)
    return (tri * ms.weights[:, :, None]).sum(axis=1)


def pose_mesh(model: ArticulatedModel, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Full pipeline: returns (posed_vertices, joint_transforms)."""
    params.validate_for(model)
    shaped = shape_blend(model, params.beta)
    rest = regress_joints(model, shaped)
    G = forward_kinematics(model, params.theta, params.gamma, rest_joints=rest)
    return skin_vertices(model, shaped, G), G


def model_markers(model: ArticulatedModel, params: ModelParams) -> np.ndarray:
    """Posed marker positions for one parameter frame, (M, 3)."""
    posed, _ = pose_mesh(model, params)
    return marker_positions(model, posed)


def model_joint_positions(model: ArticulatedModel, params: ModelParams) -> np.ndarray:
    """Posed world joint positions, (J, 3)."""
    params.validate_for(model)
    shaped = shape_blend(model, params.beta)
    rest = regress_joints(model, shaped)
    G = forward_kinematics(model, params.theta, params.gamma, rest_joints=rest)
    return G[:, :3, 3]


# ---------------------------------------------------------------------------
# mirroring

_MIRROR_AA = np.array([1.0, -1.0, -1.0])  # conjugation of axis-angle by x -> -x
_MIRROR_PT = np.array([-1.0, 1.0, 1.0])


def mirror_pose(model: ArticulatedModel, params: ModelParams) -> ModelParams:
    """Reflect a pose in the sagittal plane x = 0.

    Left/right joint rotations are swapped and conjugated by the reflection,
    midline joints (including the root) are conjugated in place, and the
    translation is reflected.  For a bilaterally symmetric model the posed
    marker cloud of the result is the reflection of the original cloud (with
    left/right marker identities swapped).
    """
    if not model.joint_left_right_pairs:
        raise ValueError("model declares no left/right joint pairing; cannot mirror")
    params.validate_for(model)
    J = model.joint_count
    theta = params.theta.reshape(J, 3).copy()
    theta *= _MIRROR_AA
    for left, right in model.joint_left_right_pairs:
        theta[[left, right]] = theta[[right, left]]
    return ModelParams(
        beta=params.beta.copy(),
        theta=theta.reshape(-1),
        gamma=params.gamma * _MIRROR_PT,
    )


def mirror_points(points: np.ndarray) -> np.ndarray:
    """Reflect 3D points in the sagittal plane x = 0."""
    return np.asarray(points, dtype=np.float64) * _MIRROR_PT


# ---------------------------------------------------------------------------
# serialization

_COO_FIELDS = ("rows", "cols", "values")


def _dense_to_coo(a: np.ndarray) -> dict:
    rows, cols = np.nonzero(a)
    return {
        "shape": list(a.shape),
        "rows": rows.tolist(),
        "cols": cols.tolist(),
        "values": a[rows, cols].tolist(),
    }


def _coo_to_dense(d: dict) -> np.ndarray:
    a = np.zeros(tuple(d["shape"]))
    a[np.asarray(d["rows"], dtype=int), np.asarray(d["cols"], dtype=int)] = d["values"]
    return a


def model_to_json(model: ArticulatedModel) -> str:
    """Serialize a model to a single JSON document (sparse COO for weights)."""
    doc = {
        "format": "quadfit-model",
        "version": 1,
        "units": "meters",
        "template_vertices": model.template_vertices.tolist(),
        "faces": model.faces.tolist(),
        "shape_basis": model.shape_basis.tolist(),
        "shape_mean": model.shape_mean.tolist(),
        "shape_precision": model.shape_precision.tolist(),
        "pose_mean": model.pose_mean.tolist(),
        "pose_precision": model.pose_precision.tolist(),
        "kinematic_tree": model.kinematic_tree.tolist(),
        "segment_of_vertex": model.segment_of_vertex.tolist(),
        "skin_weights": _dense_to_coo(model.skin_weights),
        "joint_regressor": _dense_to_coo(model.joint_regressor),
        "joint_limits": [
            [None if not np.isfinite(lo) else lo, None if not np.isfinite(hi) else hi]
            for lo, hi in model.joint_limits.tolist()
        ],
        "marker_set": {
            "names": list(model.marker_set.names),
            "vertex_indices": model.marker_set.vertex_indices.tolist(),
            "weights": model.marker_set.weights.tolist(),
        },
        "joint_names": list(model.joint_names),
        "joint_left_right_pairs": [list(p) for p in model.joint_left_right_pairs],
        "marker_left_right_pairs": [list(p) for p in model.marker_left_right_pairs],
        "build_config": model.build_config,
    }
    return json.dumps(doc, separators=(",", ":"), sort_keys=True)


def model_from_json(text: str) -> ArticulatedModel:
    doc = json.loads(text)
    if doc.get("format") != "quadfit-model":
        raise ValueError("not a quadfit model document")
    limits = np.array(
        [
            [-np.inf if lo is None else lo, np.inf if hi is None else hi]
            for lo, hi in doc["joint_limits"]
        ]
    )
    return ArticulatedModel(
        template_vertices=np.asarray(doc["template_vertices"]),
        faces=np.asarray(doc["faces"], dtype=np.int64),
        shape_basis=np.asarray(doc["shape_basis"]),
        shape_mean=np.asarray(doc["shape_mean"]),
        shape_precision=np.asarray(doc["shape_precision"]),
        pose_mean=np.asarray(doc["pose_mean"]),
        pose_precision=np.asarray(doc["pose_precision"]),
        kinematic_tree=np.asarray(doc["kinematic_tree"], dtype=np.int64),
        segment_of_vertex=np.asarray(doc["segment_of_vertex"], dtype=np.int64),
        skin_weights=_coo_to_dense(doc["skin_weights"]),
        joint_regressor=_coo_to_dense(doc["joint_regressor"]),
        joint_limits=limits,
        marker_set=MarkerSet(
            names=tuple(doc["marker_set"]["names"]),
            vertex_indices=np.asarray(doc["marker_set"]["vertex_indices"], dtype=np.int64),
            weights=np.asarray(doc["marker_set"]["weights"]),
        ),
        joint_names=tuple(doc["joint_names"]),
        joint_left_right_pairs=tuple(tuple(p) for p in doc["joint_left_right_pairs"]),
        marker_left_right_pairs=tuple(tuple(p) for p in doc["marker_left_right_pairs"]),
        build_config=doc.get("build_config", {}),
    )


def save_model(model: ArticulatedModel, path: str | Path) -> None:
    Path(path).write_text(model_to_json(model))


def load_model(path: str | Path) -> ArticulatedModel:
    return model_from_json(Path(path).read_text())


def save_obj(vertices: np.ndarray, faces: np.ndarray, path: str | Path) -> None:
    """Write an ASCII OBJ with v/f records only (1-based face indices)."""
    lines = []
    for v in np.asarray(vertices, dtype=np.float64):
        lines.append(f"v {v[0]!r} {v[1]!r} {v[2]!r}")
    for f in np.asarray(faces, dtype=np.int64):
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    Path(path).write_text("\n".join(lines) + "\n")
