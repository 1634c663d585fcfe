"""Procedural synthetic quadruped.

Builds a deterministic :class:`~quadfit.body_model.ArticulatedModel`: an
ellipsoidal three-section torso, neck and head with ear/mouth leaf joints,
a two-link tail and four three-link legs (22 joints).  The shape space is a
set of smooth deterministic deformation fields (overall size, torso length,
leg length, girth, neck reach, head size, tail reach, back arch),
orthonormalized.  Anatomical surface markers sit at the limb joints plus the
head/spine/pelvis midline.

The right half of the body is a float-exact mirror of the left half
(vertices, weights, regressor rows and marker faces correspond pairwise), so
pose mirroring holds to machine precision.  Construction uses no randomness;
``seed`` is recorded in the build config for provenance only.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .body_model import ArticulatedModel, MarkerSet

_MIRROR = np.array([-1.0, 1.0, 1.0])


@dataclass(frozen=True)
class SyntheticModelConfig:
    torso_rings: int = 3  # rings per torso section
    ring_vertices: int = 10  # midline ring resolution, even
    leg_rings: int = 3  # rings per leg link
    leg_ring_vertices: int = 6
    n_shape: int = 8  # 1..8 deformation fields
    seed: int = 0

    def validate(self) -> None:
        if self.torso_rings < 2 or self.leg_rings < 2:
            raise ValueError("need at least 2 rings per segment")
        if self.ring_vertices < 6 or self.ring_vertices % 2:
            raise ValueError("ring_vertices must be even and >= 6")
        if self.leg_ring_vertices < 4:
            raise ValueError("leg_ring_vertices must be >= 4")
        if not 1 <= self.n_shape <= 8:
            raise ValueError("n_shape must be in 1..8")


JOINT_NAMES = (
    "root",
    "spine",
    "chest",
    "neck",
    "head",
    "ear_l",
    "ear_r",
    "mouth",
    "tail_base",
    "tail_tip",
    "hip_l",
    "stifle_l",
    "hock_l",
    "hip_r",
    "stifle_r",
    "hock_r",
    "shoulder_l",
    "elbow_l",
    "carpus_l",
    "shoulder_r",
    "elbow_r",
    "carpus_r",
)

PARENTS = (-1, 0, 1, 2, 3, 4, 4, 4, 0, 8, 0, 10, 11, 0, 13, 14, 2, 16, 17, 2, 19, 20)

JOINT_PAIRS = ((5, 6), (10, 13), (11, 14), (12, 15), (16, 19), (17, 20), (18, 21))

MARKER_NAMES = (
    "croup",
    "withers",
    "head_top",
    "nose",
    "hip_l",
    "stifle_l",
    "hock_l",
    "hip_r",
    "stifle_r",
    "hock_r",
    "shoulder_l",
    "elbow_l",
    "carpus_l",
    "shoulder_r",
    "elbow_r",
    "carpus_r",
)

MARKER_PAIRS = ((4, 7), (5, 8), (6, 9), (10, 13), (11, 14), (12, 15))


def _sym_ring(center: np.ndarray, rx: float, rz: float, m: int, w_dir=(0.0, 0.0, 1.0)):
    """Ring of m points around `center`, exactly symmetric in x.

    The ring lies in the plane spanned by the lateral axis and ``w_dir``
    (a unit vector in the y-z plane).  Points on the sagittal plane have
    x = 0.0 exactly; the -x half mirrors the +x half bitwise.
    """
    assert m % 2 == 0
    w_dir = np.asarray(w_dir, dtype=np.float64)
    pts = np.empty((m, 3))
    half = m // 2
    for j in range(half + 1):
        psi = 2.0 * np.pi * j / m
        x = rx * np.sin(psi)
        if j in (0, half):
            x = 0.0
        pts[j] = center + np.array([x, 0.0, 0.0]) + rz * np.cos(psi) * w_dir
        pts[j, 0] = x  # center is on the sagittal plane
    for j in range(half + 1, m):
        src = m - j
        pts[j] = pts[src]
        pts[j, 0] = -pts[src, 0]
    return pts


def _flat_ring(center: np.ndarray, r: float, m: int):
    """Horizontal ring (for leg links); no internal symmetry required."""
    phis = 2.0 * np.pi * np.arange(m) / m
    pts = np.tile(np.asarray(center, dtype=np.float64), (m, 1))
    pts[:, 0] += r * np.cos(phis)
    pts[:, 1] += r * np.sin(phis)
    return pts


class _Part:
    def __init__(self, name, vstart, vcount, fstart, fcount, joint_ring, ring_index):
        self.name = name
        self.vstart = vstart
        self.vcount = vcount
        self.fstart = fstart
        self.fcount = fcount
        self.joint_ring = joint_ring  # local vertex indices regressing the joint
        self.ring_index = ring_index  # per-vertex ring ordinal, -1 for cap apexes


class _Builder:
    def __init__(self):
        self.vertices: list[np.ndarray] = []
        self.faces: list[tuple[int, int, int]] = []
        self.parts: dict[str, _Part] = {}

    def add_part(self, name, rings, joint_ring_of=0, cap_end=None, cap_start=None):
        """Add a tube part from a list of rings (equal length), optional cap apexes."""
        vstart, fstart = len(self.vertices), len(self.faces)
        m = len(rings[0])
        ring_index = []
        for ri, ring in enumerate(rings):
            for p in ring:
                self.vertices.append(np.asarray(p, dtype=np.float64))
                ring_index.append(ri)
        for ri in range(len(rings) - 1):
            a = vstart + ri * m
            b = a + m
            for j in range(m):
                jn = (j + 1) % m
                self.faces.append((a + j, b + j, a + jn))
                self.faces.append((a + jn, b + j, b + jn))
        if cap_start is not None:
            apex = len(self.vertices)
            self.vertices.append(np.asarray(cap_start, dtype=np.float64))
            ring_index.append(-1)
            for j in range(m):
                self.faces.append((vstart + (j + 1) % m, vstart + j, apex))
        if cap_end is not None:
            apex = len(self.vertices)
            self.vertices.append(np.asarray(cap_end, dtype=np.float64))
            ring_index.append(-1)
            last = vstart + (len(rings) - 1) * m
            for j in range(m):
                self.faces.append((last + j, last + (j + 1) % m, apex))
        part = _Part(
            name,
            vstart,
            len(self.vertices) - vstart,
            fstart,
            len(self.faces) - fstart,
            joint_ring=[joint_ring_of * m + j for j in range(m)],
            ring_index=ring_index,
        )
        self.parts[name] = part
        return part

    def add_mirrored_part(self, name, source: str):
        """Add the bitwise x-mirror of an existing part (same local ordering)."""
        src = self.parts[source]
        vstart, fstart = len(self.vertices), len(self.faces)
        for i in range(src.vcount):
            self.vertices.append(self.vertices[src.vstart + i] * _MIRROR)
        for fi in range(src.fcount):
            fa, fb, fc = self.faces[src.fstart + fi]
            off = vstart - src.vstart
            self.faces.append((fa + off, fb + off, fc + off))
        part = _Part(
            name,
            vstart,
            src.vcount,
            fstart,
            src.fcount,
            joint_ring=list(src.joint_ring),
            ring_index=list(src.ring_index),
        )
        self.parts[name] = part
        return part


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _window(y, lo, hi):
    return _smoothstep((y - lo) / (hi - lo))


def _leg_link(builder, name, top, bottom, r_top, r_bot, n_rings, m, cap_end=False):
    top = np.asarray(top, dtype=np.float64)
    bottom = np.asarray(bottom, dtype=np.float64)
    fracs = np.linspace(0.0, 1.0, n_rings)
    fracs[-1] = 1.0 if cap_end else 0.96
    rings = []
    for t in fracs:
        c = top + t * (bottom - top)
        rings.append(_flat_ring(c, r_top + t * (r_bot - r_top), m))
    cap = bottom + np.array([0.0, 0.0, -0.015]) if cap_end else None
    return builder.add_part(name, rings, joint_ring_of=0, cap_end=cap)


def _axis_rings(top, bottom, radii, m, fracs):
    """Symmetric rings along a midline axis lying in the y-z plane."""
    top = np.asarray(top, dtype=np.float64)
    bottom = np.asarray(bottom, dtype=np.float64)
    axis = bottom - top
    n = axis / np.linalg.norm(axis)
    w_dir = np.array([0.0, -n[2], n[1]])  # perpendicular to axis, in y-z plane
    rings = []
    for t, (rx, rz) in zip(fracs, radii):
        rings.append(_sym_ring(top + t * axis, rx, rz, m, w_dir=w_dir))
    return rings


def build_synthetic_model(config: SyntheticModelConfig | None = None) -> ArticulatedModel:
    """Construct the deterministic synthetic quadruped."""
    cfg = config or SyntheticModelConfig()
    cfg.validate()
    m = cfg.ring_vertices
    b = _Builder()

    # joint rest positions; each joint is realized as the centroid of a ring
    jp = {
        "root": np.array([0.0, -0.33, 0.64]),
        "spine": np.array([0.0, -0.16, 0.65]),
        "chest": np.array([0.0, 0.14, 0.66]),
        "neck": np.array([0.0, 0.40, 0.74]),
        "head": np.array([0.0, 0.56, 0.94]),
        "ear_l": np.array([0.045, 0.58, 1.00]),
        "mouth": np.array([0.0, 0.70, 0.90]),
        "tail_base": np.array([0.0, -0.50, 0.66]),
        "tail_tip": np.array([0.0, -0.62, 0.60]),
        "hip_l": np.array([0.10, -0.33, 0.56]),
        "stifle_l": np.array([0.105, -0.35, 0.36]),
        "hock_l": np.array([0.11, -0.37, 0.18]),
        "hoof_hind_l": np.array([0.115, -0.38, 0.02]),
        "shoulder_l": np.array([0.10, 0.30, 0.58]),
        "elbow_l": np.array([0.105, 0.32, 0.37]),
        "carpus_l": np.array([0.11, 0.33, 0.18]),
        "hoof_front_l": np.array([0.115, 0.335, 0.02]),
    }

    def torso_section(name, y_stations, radii, z_centers, joint_ring_of, cap_start=None, cap_end=None):
        rings = [
            _sym_ring(np.array([0.0, y, z]), rx, rz, m)
            for y, (rx, rz), z in zip(y_stations, radii, z_centers)
        ]
        return b.add_part(name, rings, joint_ring_of=joint_ring_of, cap_start=cap_start, cap_end=cap_end)

    nt = cfg.torso_rings

    def stations(lo, hi):
        return np.linspace(lo, hi, nt)

    def interp(vals):
        t = np.linspace(0.0, 1.0, nt)
        return [tuple(np.interp(ti, np.linspace(0, 1, len(vals)), np.array(vals)[:, i]) for i in (0, 1)) for ti in t]

    def interp2(vals):
        t = np.linspace(0.0, 1.0, nt)
        return [float(np.interp(ti, np.linspace(0, 1, len(vals)), vals)) for ti in t]

    # torso: pelvis (root) | spine | chest, interfaces at y = -0.16 and 0.14
    torso_section(
        "root",
        stations(-0.50, -0.16),
        interp([(0.11, 0.13), (0.15, 0.18), (0.16, 0.19)]),
        interp2([0.63, 0.64, 0.645]),
        joint_ring_of=(nt - 1) // 2,
        cap_start=np.array([0.0, -0.55, 0.64]),
    )
    # root joint ring sits mid-pelvis; override its designed position with the
    # actual station the ring landed on
    mid_y = stations(-0.50, -0.16)[(nt - 1) // 2]
    mid_z = interp2([0.63, 0.64, 0.645])[(nt - 1) // 2]
    jp["root"] = np.array([0.0, mid_y, mid_z])

    torso_section(
        "spine",
        stations(-0.16, 0.14),
        interp([(0.16, 0.19), (0.165, 0.20), (0.155, 0.19)]),
        interp2([0.645, 0.655, 0.66]),
        joint_ring_of=0,
    )
    jp["spine"] = np.array([0.0, -0.16, 0.645])
    torso_section(
        "chest",
        stations(0.14, 0.44),
        interp([(0.155, 0.19), (0.14, 0.175), (0.11, 0.13)]),
        interp2([0.66, 0.66, 0.65]),
        joint_ring_of=0,
        cap_end=np.array([0.0, 0.50, 0.65]),
    )
    jp["chest"] = np.array([0.0, 0.14, 0.66])

    b.add_part(
        "neck",
        _axis_rings(jp["neck"], jp["head"], [(0.085, 0.095), (0.075, 0.085), (0.065, 0.075)], m, [0.0, 0.5, 0.96]),
        joint_ring_of=0,
    )
    b.add_part(
        "head",
        _axis_rings(jp["head"], np.array([0.0, 0.72, 0.99]), [(0.075, 0.08), (0.07, 0.075), (0.05, 0.055)], m, [0.0, 0.5, 1.0]),
        joint_ring_of=0,
        cap_end=np.array([0.0, 0.76, 0.99]),
    )
    # ears: small cones; 4-vertex base ring + tip
    ear_base = _flat_ring(jp["ear_l"], 0.022, 4)
    b.add_part("ear_l", [ear_base], joint_ring_of=0, cap_end=np.array([0.055, 0.56, 1.09]))
    b.add_mirrored_part("ear_r", "ear_l")
    b.add_part(
        "mouth",
        _axis_rings(jp["mouth"], np.array([0.0, 0.82, 0.87]), [(0.045, 0.05), (0.03, 0.033)], 6, [0.0, 1.0]),
        joint_ring_of=0,
        cap_end=np.array([0.0, 0.85, 0.865]),
    )
    b.add_part(
        "tail_base",
        _axis_rings(jp["tail_base"], jp["tail_tip"], [(0.035, 0.035), (0.03, 0.03)], 6, [0.0, 0.96]),
        joint_ring_of=0,
    )
    b.add_part(
        "tail_tip",
        _axis_rings(jp["tail_tip"], np.array([0.0, -0.74, 0.52]), [(0.03, 0.03), (0.018, 0.018)], 6, [0.0, 1.0]),
        joint_ring_of=0,
        cap_end=np.array([0.0, -0.77, 0.50]),
    )

    ml, nl = cfg.leg_ring_vertices, cfg.leg_rings
    _leg_link(b, "hip_l", jp["hip_l"], jp["stifle_l"], 0.055, 0.042, nl, ml)
    _leg_link(b, "stifle_l", jp["stifle_l"], jp["hock_l"], 0.038, 0.030, nl, ml)
    _leg_link(b, "hock_l", jp["hock_l"], jp["hoof_hind_l"], 0.028, 0.026, nl, ml, cap_end=True)
    for nm in ("hip", "stifle", "hock"):
        b.add_mirrored_part(f"{nm}_r", f"{nm}_l")
    _leg_link(b, "shoulder_l", jp["shoulder_l"], jp["elbow_l"], 0.055, 0.042, nl, ml)
    _leg_link(b, "elbow_l", jp["elbow_l"], jp["carpus_l"], 0.038, 0.030, nl, ml)
    _leg_link(b, "carpus_l", jp["carpus_l"], jp["hoof_front_l"], 0.028, 0.026, nl, ml, cap_end=True)
    for nm in ("shoulder", "elbow", "carpus"):
        b.add_mirrored_part(f"{nm}_r", f"{nm}_l")

    vertices = np.array(b.vertices)
    faces = np.array(b.faces, dtype=np.int64)
    V = len(vertices)
    J = len(JOINT_NAMES)

    segment_of_vertex = np.empty(V, dtype=np.int64)
    for jid, name in enumerate(JOINT_NAMES):
        p = b.parts[name]
        segment_of_vertex[p.vstart : p.vstart + p.vcount] = jid

    # skin weights: rigid per part, except the ring at the joint which blends
    # half-and-half with the parent joint; the complement is computed as
    # 1 - w so every row sums to 1.0 exactly
    skin = np.zeros((V, J))
    for jid, name in enumerate(JOINT_NAMES):
        p = b.parts[name]
        parent = PARENTS[jid]
        for i in range(p.vcount):
            v = p.vstart + i
            if parent >= 0 and p.ring_index[i] == 0:
                w_parent = 0.5
                skin[v, parent] = w_parent
                skin[v, jid] = 1.0 - w_parent
            else:
                skin[v, jid] = 1.0

    regressor = np.zeros((J, V))
    for jid, name in enumerate(JOINT_NAMES):
        p = b.parts[name]
        idx = [p.vstart + i for i in p.joint_ring]
        w = 1.0 / len(idx)
        regressor[jid, idx[:-1]] = w
        regressor[jid, idx[-1]] = 1.0 - w * (len(idx) - 1)

    shape_basis = _shape_fields(vertices, segment_of_vertex, cfg.n_shape)

    limits = np.tile(np.array([-1.2, 1.2]), (3 * J, 1))
    limits[0:3] = [-np.inf, np.inf]  # root rotation unbounded

    marker_set, marker_pairs = _build_markers(b, vertices, faces)

    return ArticulatedModel(
        template_vertices=vertices,
        faces=faces,
        shape_basis=shape_basis,
        shape_mean=np.zeros(cfg.n_shape),
        shape_precision=np.eye(cfg.n_shape),
        pose_mean=np.zeros(3 * J),
        pose_precision=np.eye(3 * J),
        kinematic_tree=np.array(PARENTS, dtype=np.int64),
        segment_of_vertex=segment_of_vertex,
        skin_weights=skin,
        joint_regressor=regressor,
        joint_limits=limits,
        marker_set=marker_set,
        joint_names=JOINT_NAMES,
        joint_left_right_pairs=JOINT_PAIRS,
        marker_left_right_pairs=MARKER_PAIRS,
        build_config=asdict(cfg),
    )


def _shape_fields(verts: np.ndarray, segment: np.ndarray, n: int) -> np.ndarray:
    """Smooth deformation fields, orthonormalized by modified Gram-Schmidt.

    Every field uses the lateral coordinate only through odd terms (x * even
    function), so mirrored vertices receive exactly mirrored displacements and
    the orthonormalization preserves that (negation commutes with rounding).
    """
    x, y, z = verts[:, 0], verts[:, 1], verts[:, 2]
    zeros = np.zeros_like(x)
    fields = []

    # 1 overall size: scale about the body center
    fields.append(np.stack([x, y, z - 0.60], axis=1))
    # 2 torso length: stretch along y, faded beyond the torso
    wy = 1.0 - _window(np.abs(y), 0.45, 0.80)
    fields.append(np.stack([zeros, y * wy, zeros], axis=1))
    # 3 leg length: stretch below hip height
    wl = 1.0 - _window(z, 0.30, 0.55)
    fields.append(np.stack([zeros, zeros, (z - 0.55) * wl], axis=1))
    # 4 girth: radial about the torso axis
    wt = (1.0 - _window(np.abs(y - 0.0), 0.30, 0.55)) * _window(z, 0.30, 0.50)
    fields.append(np.stack([x * wt, zeros, (z - 0.65) * wt], axis=1))
    # 5 neck reach: translate neck/head along the neck axis
    wn = _window(y, 0.28, 0.45) * _window(z, 0.55, 0.75)
    fields.append(np.stack([zeros, 0.6 * wn, 0.8 * wn], axis=1))
    # 6 head size: scale about the head center
    wh = _window(y, 0.46, 0.58) * _window(z, 0.70, 0.85)
    fields.append(np.stack([x * wh, (y - 0.62) * wh, (z - 0.94) * wh], axis=1))
    # 7 tail reach
    wtl = _window(-y, 0.42, 0.52)
    fields.append(np.stack([zeros, -0.8 * wtl, -0.4 * wtl], axis=1))
    # 8 back arch: vertical bump over the mid torso
    wa = (1.0 - _window(np.abs(y), 0.10, 0.45)) * _window(z, 0.35, 0.55)
    fields.append(np.stack([zeros, zeros, wa], axis=1))

    A = np.stack([f.reshape(-1) for f in fields[:n]], axis=1)  # (3V, n)
    # modified Gram-Schmidt with reorthogonalization
    Q = A.copy()
    for j in range(n):
        for _ in range(2):
            for i in range(j):
                Q[:, j] = Q[:, j] - (Q[:, i] @ Q[:, j]) * Q[:, i]
        nrm = np.linalg.norm(Q[:, j])
        if nrm < 1e-12:
            raise ValueError("shape fields are linearly dependent")
        Q[:, j] = Q[:, j] / nrm
    return Q


_MARKER_TARGETS = {
    # midline and left-side markers: (part, target point near the part surface)
    "croup": ("root", (0.0, -0.33, 0.83)),
    "withers": ("chest", (0.0, 0.28, 0.85)),
    "head_top": ("head", (0.0, 0.64, 1.02)),
    "nose": ("mouth", (0.0, 0.84, 0.87)),
    "hip_l": ("hip_l", (0.16, -0.34, 0.48)),
    "stifle_l": ("stifle_l", (0.15, -0.36, 0.30)),
    "hock_l": ("hock_l", (0.15, -0.375, 0.12)),
    "shoulder_l": ("shoulder_l", (0.16, 0.31, 0.49)),
    "elbow_l": ("elbow_l", (0.15, 0.325, 0.30)),
    "carpus_l": ("carpus_l", (0.15, 0.335, 0.12)),
}

_BARY = (0.4, 0.35, 0.25)  # sums to 1.0 exactly in float64
_MIDLINE_MARKERS = ("croup", "withers", "head_top", "nose")


def _build_markers(b: _Builder, vertices, faces):
    name_to_face: dict[str, int] = {}
    for name, (part_name, target) in _MARKER_TARGETS.items():
        p = b.parts[part_name]
        cand = np.arange(p.fstart, p.fstart + p.fcount)
        if name in _MIDLINE_MARKERS:
            # keep such markers exactly on the sagittal plane: only faces with
            # two exactly-midline vertices qualify, and the barycentric mass
            # goes on those two vertices
            on_plane = (vertices[faces[cand], 0] == 0.0).sum(axis=1)
            cand = cand[on_plane >= 2]
        cent = vertices[faces[cand]].mean(axis=1)
        d = np.linalg.norm(cent - np.asarray(target), axis=1)
        name_to_face[name] = int(cand[int(np.argmin(d))])
    # right-side markers reuse the mirrored face of their left twin
    for lname in ("hip_l", "stifle_l", "hock_l", "shoulder_l", "elbow_l", "carpus_l"):
        rname = lname[:-2] + "_r"
        lpart = b.parts[lname]
        rpart = b.parts[rname]
        name_to_face[rname] = name_to_face[lname] - lpart.fstart + rpart.fstart

    idx = np.array([faces[name_to_face[n]] for n in MARKER_NAMES], dtype=np.int64)
    w = np.tile(np.array(_BARY), (len(MARKER_NAMES), 1))
    for mi, name in enumerate(MARKER_NAMES):
        if name in _MIDLINE_MARKERS:
            slots = np.flatnonzero(vertices[idx[mi], 0] == 0.0)[:2]
            w[mi] = 0.0
            w[mi, slots] = 0.5  # two midline vertices carry the marker
    return MarkerSet(names=MARKER_NAMES, vertex_indices=idx, weights=w), MARKER_PAIRS
