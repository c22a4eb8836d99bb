"""Kinematic human skeleton built from Denavit-Hartenberg link parameters.

The skeleton is five chains (torso-head, both legs, both arms) that share
their leading rows: every branch starts with the three pelvis rows, and the
arm branches additionally share the spine and thorax rows with the torso.
Each row is one degree of freedom (a variable joint angle); 15 of the rows
also carry a variable link length, one per bone of the 16-keypoint tree.
Forward kinematics composes the per-row homogeneous transforms, reads the
keypoint positions off the cumulative translation columns and applies a
global rigid transform.

Angles are radians and lengths are meters everywhere in memory; the
serialized table files use degrees for human editing.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources
from typing import Sequence

import numpy as np

N_PARAMS = 48
N_ANGLE_PARAMS = 33
N_LENGTH_PARAMS = 15
N_KEYPOINTS = 16
N_BRANCHES = 5

KEYPOINT_NAMES = (
    "pelvis", "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
    "spine", "thorax", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
)

BRANCH_NAMES = ("torso", "left_leg", "right_leg", "left_arm", "right_arm")

ROOT_KEYPOINT = 0

# (parent keypoint, child keypoint) for the 15 bones of the tree.
BONE_LIST = (
    (0, 1), (1, 2), (2, 3),
    (0, 4), (4, 5), (5, 6),
    (0, 7), (7, 8), (8, 9),
    (8, 10), (10, 11), (11, 12),
    (8, 13), (13, 14), (14, 15),
)


@dataclass(frozen=True)
class DhRow:
    """One link: rest DH values plus flags for the generator-controlled fields."""

    name: str
    a: float = 0.0
    d: float = 0.0
    alpha: float = 0.0
    theta: float = 0.0
    var_a: bool = False
    var_d: bool = False
    var_alpha: bool = False
    var_theta: bool = False

    def __post_init__(self):
        vals = (self.a, self.d, self.alpha, self.theta)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"row {self.name!r}: non-finite DH value {vals}")
        if self.a < 0.0:
            raise ValueError(f"row {self.name!r}: link length a must be >= 0, got {self.a}")
        if self.var_a and self.var_d:
            raise ValueError(f"row {self.name!r}: a bone length lives in exactly one of a, d")
        if self.var_alpha:
            raise ValueError(f"row {self.name!r}: variable twist angles are not supported")


@dataclass(frozen=True)
class KinematicBranch:
    """An ordered DH chain with its shared-prefix length and emitted keypoints."""

    name: str
    rows: tuple[DhRow, ...]
    keypoint_map: tuple[tuple[int, int], ...]  # (row index, keypoint id)
    shared_prefix_len: int = 0

    def __post_init__(self):
        idx = [r for r, _ in self.keypoint_map]
        if idx != sorted(idx) or len(set(idx)) != len(idx):
            raise ValueError(f"branch {self.name!r}: keypoint rows must be strictly increasing")
        if idx and idx[-1] >= len(self.rows):
            raise ValueError(f"branch {self.name!r}: keypoint row index out of range")
        if self.shared_prefix_len > len(self.rows):
            raise ValueError(f"branch {self.name!r}: shared prefix longer than the chain")


@dataclass(frozen=True)
class GlobalTransform:
    """Whole-body rotation (x, then y, then z axis) and translation, meters."""

    rx: float = 0.0
    ry: float = 0.0
    rz: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0

    @classmethod
    def identity(cls) -> "GlobalTransform":
        return cls()

    @classmethod
    def from_array(cls, values) -> "GlobalTransform":
        rx, ry, rz, tx, ty, tz = np.asarray(values, dtype=float)
        return cls(rx, ry, rz, tx, ty, tz)

    def as_array(self) -> np.ndarray:
        return np.array([self.rx, self.ry, self.rz, self.tx, self.ty, self.tz], dtype=float)


@dataclass(frozen=True)
class SkeletonTopology:
    """The five-branch skeleton plus the canonical variable-parameter map.

    ``param_index`` maps every variable (branch, row, field) slot to one of
    the 48 canonical parameter ids; slots shared between branches map to the
    same id.  Ids 0..32 are joint-angle deltas, 33..47 are bone-length deltas.
    """

    branches: tuple[KinematicBranch, ...]
    param_index: dict[tuple[int, int, str], int]
    param_names: tuple[str, ...]
    param_kinds: tuple[str, ...]  # "angle" | "length"
    keypoint_names: tuple[str, ...] = KEYPOINT_NAMES
    bone_list: tuple[tuple[int, int], ...] = BONE_LIST
    _compiled: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def keypoint_count(self) -> int:
        return len(self.keypoint_names)

    def angle_ids(self) -> np.ndarray:
        return np.array([i for i, k in enumerate(self.param_kinds) if k == "angle"])

    def length_ids(self) -> np.ndarray:
        return np.array([i for i, k in enumerate(self.param_kinds) if k == "length"])

    def param_rest(self) -> np.ndarray:
        """Rest value per canonical id: 0 for angles, rest bone length for lengths."""
        rest = np.zeros(len(self.param_names))
        for (b, r, fld), pid in self.param_index.items():
            if self.param_kinds[pid] == "length":
                rest[pid] = getattr(self.branches[b].rows[r], fld)
        return rest

    def validate(self) -> None:
        if len(self.branches) != N_BRANCHES:
            raise ValueError(f"expected {N_BRANCHES} branches, got {len(self.branches)}")
        ids = sorted(set(self.param_index.values()))
        if ids != list(range(N_PARAMS)):
            raise ValueError("canonical parameter ids must be exactly 0..47")
        kinds = list(self.param_kinds)
        if kinds.count("angle") != N_ANGLE_PARAMS or kinds.count("length") != N_LENGTH_PARAMS:
            raise ValueError("expected 33 angle-type and 15 length-type parameters")
        for pid, kind in enumerate(kinds):
            expected = "angle" if pid < N_ANGLE_PARAMS else "length"
            if kind != expected:
                raise ValueError("canonical id layout is angle ids 0..32, length ids 33..47")
        n_dof = sum(len(b.rows) - b.shared_prefix_len for b in self.branches) \
            + self.branches[0].shared_prefix_len
        if self.branches[0].shared_prefix_len != 0:
            raise ValueError("the first branch owns the shared store; its prefix must be 0")
        if n_dof != N_ANGLE_PARAMS:
            raise ValueError(f"expected 33 unique DOF rows, got {n_dof}")
        root = self.branches[0]
        for bi, br in enumerate(self.branches):
            for r, row in enumerate(br.rows):
                if row.var_theta and (bi, r, "theta") not in self.param_index:
                    raise ValueError(f"unmapped variable theta at branch {bi} row {r}")
                for fld in ("a", "d"):
                    if getattr(row, "var_" + fld) and (bi, r, fld) not in self.param_index:
                        raise ValueError(f"unmapped variable {fld} at branch {bi} row {r}")
            if bi == 0:
                continue
            p = br.shared_prefix_len
            if br.rows[:p] != root.rows[:p]:
                raise ValueError(f"branch {br.name!r}: shared prefix rows differ from the root store")
            for r in range(p):
                for fld in ("a", "d", "theta"):
                    if self.param_index.get((bi, r, fld)) != self.param_index.get((0, r, fld)):
                        raise ValueError(
                            f"branch {br.name!r} row {r}: shared slot maps to a different id")
        seen_kp = sorted(kp for br in self.branches for _, kp in br.keypoint_map)
        if seen_kp != list(range(self.keypoint_count)):
            raise ValueError("every keypoint must be emitted by exactly one branch")
        if len(self.bone_list) != self.keypoint_count - 1:
            raise ValueError("bone list must span the keypoint tree")
        reached = {ROOT_KEYPOINT}
        for parent, child in self.bone_list:
            if parent not in reached or child in reached:
                raise ValueError("bone list is not a tree rooted at the pelvis")
            reached.add(child)


def check_params(params) -> np.ndarray:
    """Validate and return a 48-vector of parameter deltas."""
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (N_PARAMS,):
        raise ValueError(f"expected {N_PARAMS} parameters, got shape {params.shape}")
    if not np.all(np.isfinite(params)):
        raise ValueError("parameters must be finite")
    return params


def dh_matrix(a: float, d: float, alpha: float, theta: float) -> np.ndarray:
    """Homogeneous transform of one DH link.

    Rotation about x by the twist ``alpha`` and translation ``a`` along x,
    followed by rotation ``theta`` about z and offset ``d`` along z.
    """
    vals = np.array([a, d, alpha, theta], dtype=np.float64)
    if not np.all(np.isfinite(vals)):
        raise ValueError(f"dh_matrix needs finite inputs, got {vals}")
    ca, sa = np.cos(alpha), np.sin(alpha)
    ct, st = np.cos(theta), np.sin(theta)
    return np.array([
        [ct, -st, 0.0, a],
        [st * ca, ct * ca, -sa, -d * sa],
        [st * sa, ct * sa, ca, d * ca],
        [0.0, 0.0, 0.0, 1.0],
    ])


def compose_chain(rows: Sequence[DhRow]) -> list[np.ndarray]:
    """Cumulative transforms of a resolved chain: M'_0, M'_0 M_1, ..."""
    rows = list(rows)
    if not rows:
        raise ValueError("compose_chain needs at least one row")
    out = []
    cur = np.eye(4)
    for row in rows:
        cur = cur @ dh_matrix(row.a, row.d, row.alpha, row.theta)
        out.append(cur)
    return out


def _compiled_branch(topology: SkeletonTopology, bi: int) -> dict:
    """Per-branch constant arrays and parameter gather indices for fast FK."""
    br = topology.branches[bi]
    n = len(br.rows)
    comp = {
        "a": np.array([r.a for r in br.rows]),
        "d": np.array([r.d for r in br.rows]),
        "cos_alpha": np.array([np.cos(r.alpha) for r in br.rows]),
        "sin_alpha": np.array([np.sin(r.alpha) for r in br.rows]),
        "theta": np.array([r.theta for r in br.rows]),
        "theta_id": np.array([topology.param_index.get((bi, r, "theta"), -1) for r in range(n)]),
        "a_id": np.array([topology.param_index.get((bi, r, "a"), -1) for r in range(n)]),
        "d_id": np.array([topology.param_index.get((bi, r, "d"), -1) for r in range(n)]),
        "keypoint_map": br.keypoint_map,
        "prefix": br.shared_prefix_len,
    }
    return comp


def _compiled(topology: SkeletonTopology) -> list[dict]:
    cache = topology._compiled
    if "branches" not in cache:
        cache["branches"] = [_compiled_branch(topology, bi) for bi in range(len(topology.branches))]
    return cache["branches"]


def _dh_matrices_batch(a, d, cos_alpha, sin_alpha, theta) -> np.ndarray:
    """Stack of DH transforms for per-sample (a, d, theta); alpha is fixed."""
    b = theta.shape[0]
    ct, st = np.cos(theta), np.sin(theta)
    m = np.zeros((b, 4, 4))
    m[:, 0, 0] = ct
    m[:, 0, 1] = -st
    m[:, 0, 3] = a
    m[:, 1, 0] = st * cos_alpha
    m[:, 1, 1] = ct * cos_alpha
    m[:, 1, 2] = -sin_alpha
    m[:, 1, 3] = -d * sin_alpha
    m[:, 2, 0] = st * sin_alpha
    m[:, 2, 1] = ct * sin_alpha
    m[:, 2, 2] = cos_alpha
    m[:, 2, 3] = d * cos_alpha
    m[:, 3, 3] = 1.0
    return m


def rotation_xyz(rx, ry, rz) -> np.ndarray:
    """Global rotation Rx @ Ry @ Rz for scalar or batched angle arrays."""
    rx, ry, rz = np.broadcast_arrays(np.asarray(rx, dtype=float),
                                     np.asarray(ry, dtype=float),
                                     np.asarray(rz, dtype=float))
    shape = rx.shape
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    one = np.ones(shape)
    zero = np.zeros(shape)
    mx = np.stack([one, zero, zero, zero, cx, -sx, zero, sx, cx], -1).reshape(shape + (3, 3))
    my = np.stack([cy, zero, sy, zero, one, zero, -sy, zero, cy], -1).reshape(shape + (3, 3))
    mz = np.stack([cz, -sz, zero, sz, cz, zero, zero, zero, one], -1).reshape(shape + (3, 3))
    return mx @ my @ mz


def forward_kinematics_batch(topology: SkeletonTopology, params, globals_) -> np.ndarray:
    """Vectorized FK: (B, 48) deltas and (B, 6) global values to (B, 16, 3).

    Serial evaluation is the batch-of-one case of this routine, so batched
    and per-sample results are bitwise identical.
    """
    params = np.asarray(params, dtype=np.float64)
    globals_ = np.asarray(globals_, dtype=np.float64)
    if params.ndim != 2 or params.shape[1] != N_PARAMS:
        raise ValueError(f"expected (batch, {N_PARAMS}) parameters, got {params.shape}")
    if globals_.shape != (params.shape[0], 6):
        raise ValueError(f"expected (batch, 6) global values, got {globals_.shape}")
    if not (np.all(np.isfinite(params)) and np.all(np.isfinite(globals_))):
        raise ValueError("parameters and global values must be finite")

    nb = params.shape[0]
    kps = np.empty((nb, topology.keypoint_count, 3))
    compiled = _compiled(topology)
    root_cum: list[np.ndarray] = []
    for bi, comp in enumerate(compiled):
        prefix = comp["prefix"]
        cur = root_cum[prefix - 1] if prefix > 0 else np.broadcast_to(np.eye(4), (nb, 4, 4))
        cum = list(root_cum[:prefix]) if bi > 0 else []
        for k in range(prefix, len(comp["theta"])):
            theta = np.full(nb, comp["theta"][k])
            if comp["theta_id"][k] >= 0:
                theta = theta + params[:, comp["theta_id"][k]]
            a = np.full(nb, comp["a"][k])
            if comp["a_id"][k] >= 0:
                a = a + params[:, comp["a_id"][k]]
            d = np.full(nb, comp["d"][k])
            if comp["d_id"][k] >= 0:
                d = d + params[:, comp["d_id"][k]]
            cur = cur @ _dh_matrices_batch(a, d, comp["cos_alpha"][k], comp["sin_alpha"][k], theta)
            cum.append(cur)
        if bi == 0:
            root_cum = cum
        for row_idx, kp in comp["keypoint_map"]:
            kps[:, kp] = cum[row_idx][:, :3, 3]

    rot = rotation_xyz(globals_[:, 0], globals_[:, 1], globals_[:, 2])
    return kps @ np.swapaxes(rot, -1, -2) + globals_[:, None, 3:6]


def forward_kinematics(topology: SkeletonTopology, params, g: GlobalTransform) -> np.ndarray:
    """3D pose (16, 3) for one parameter vector and global transform."""
    params = check_params(params)
    return forward_kinematics_batch(topology, params[None], g.as_array()[None])[0]


def apply_global_transform(pose, g: GlobalTransform) -> np.ndarray:
    """Rigidly rotate (x, then y, then z) and translate a pose."""
    pose = np.asarray(pose, dtype=np.float64)
    if not np.all(np.isfinite(pose)):
        raise ValueError("pose must be finite")
    rot = rotation_xyz(g.rx, g.ry, g.rz)
    return pose @ rot.T + np.array([g.tx, g.ty, g.tz])


def bone_lengths(topology: SkeletonTopology, pose) -> np.ndarray:
    """Euclidean length of each bone of a pose (or batch of poses)."""
    pose = np.asarray(pose, dtype=np.float64)
    bones = np.asarray(topology.bone_list)
    vec = pose[..., bones[:, 1], :] - pose[..., bones[:, 0], :]
    return np.linalg.norm(vec, axis=-1)


# --------------------------------------------------------------------------
# Canonical table
#
# Rest configuration: a T-pose facing +z with y up and x to the subject's
# left; the pelvis sits at the origin.  Twist and rest joint angles are
# multiples of 90 degrees chosen so that each 3-DOF cluster exposes three
# mutually orthogonal rotation axes and every bone leaves its joint along a
# coordinate direction.  Knee flexion is negative (heel swings backward),
# elbow flexion positive (forearm swings forward): the signs the constraint
# table relies on.

_ROW = lambda name, a, d, alpha, theta, tid, lfield, lid, kp: (
    name, a, d, alpha, theta, tid, lfield, lid, kp)

_TORSO_ROWS = [
    _ROW("pelvis_roll", 0.0, 0.0, 0, 0, 0, None, None, None),
    _ROW("pelvis_yaw", 0.0, 0.0, 90, 90, 1, None, None, None),
    _ROW("pelvis_pitch", 0.0, 0.0, 90, -90, 2, None, None, 0),
    _ROW("spine_pitch", 0.25, 0.0, 0, 0, 3, "a", 33, None),
    _ROW("spine_roll", 0.0, 0.0, -90, 90, 4, None, None, None),
    _ROW("spine_yaw", 0.0, 0.0, 90, 0, 5, None, None, 7),
    _ROW("thorax_yaw", 0.0, 0.25, 0, 90, 6, "d", 34, None),
    _ROW("thorax_pitch", 0.0, 0.0, -90, -90, 7, None, None, None),
    _ROW("thorax_roll", 0.0, 0.0, -90, 0, 8, None, None, 8),
    _ROW("neck_pitch", 0.0, 0.0, 90, 0, 9, None, None, None),
    _ROW("neck_roll", 0.0, 0.0, -90, 90, 10, None, None, None),
    _ROW("neck_yaw", 0.0, 0.0, 90, 0, 11, None, None, None),
    _ROW("head_nod", 0.0, 0.18, 0, 0, 12, "d", 35, 9),
]

_LEFT_LEG_ROWS = [
    _ROW("l_hip_pitch", 0.0, 0.13, 0, -90, 13, "d", 36, None),
    _ROW("l_hip_twist", 0.0, 0.0, -90, 90, 14, None, None, None),
    _ROW("l_hip_abduct", 0.0, 0.0, -90, 90, 15, None, None, 4),
    _ROW("l_knee_flex", 0.45, 0.0, 90, 0, 16, "a", 37, 5),
    _ROW("l_ankle_flex", 0.44, 0.0, 0, 0, 17, "a", 38, 6),
]

_RIGHT_LEG_ROWS = [
    _ROW("r_hip_pitch", 0.0, 0.13, 180, -90, 18, "d", 39, None),
    _ROW("r_hip_twist", 0.0, 0.0, 90, -90, 19, None, None, None),
    _ROW("r_hip_abduct", 0.0, 0.0, -90, -90, 20, None, None, 1),
    _ROW("r_knee_flex", 0.45, 0.0, 90, 0, 21, "a", 40, 2),
    _ROW("r_ankle_flex", 0.44, 0.0, 0, 0, 22, "a", 41, 3),
]

_LEFT_ARM_ROWS = [
    _ROW("l_shoulder_twist", 0.0, 0.20, 90, 0, 23, "d", 42, None),
    _ROW("l_shoulder_abduct", 0.0, 0.0, -90, 90, 24, None, None, None),
    _ROW("l_shoulder_swing", 0.0, 0.0, 90, 180, 25, None, None, 10),
    _ROW("l_elbow_flex", 0.28, 0.0, 180, 0, 26, "a", 43, 11),
    _ROW("l_wrist_flex", 0.25, 0.0, 0, 0, 27, "a", 44, 12),
]

_RIGHT_ARM_ROWS = [
    _ROW("r_shoulder_twist", 0.0, 0.20, -90, 0, 28, "d", 45, None),
    _ROW("r_shoulder_abduct", 0.0, 0.0, 90, -90, 29, None, None, None),
    _ROW("r_shoulder_swing", 0.0, 0.0, -90, 180, 30, None, None, 13),
    _ROW("r_elbow_flex", 0.28, 0.0, 0, 0, 31, "a", 46, 14),
    _ROW("r_wrist_flex", 0.25, 0.0, 0, 0, 32, "a", 47, 15),
]

_LENGTH_NAMES = {
    33: "spine_len", 34: "thorax_len", 35: "head_len",
    36: "l_hip_len", 37: "l_femur_len", 38: "l_tibia_len",
    39: "r_hip_len", 40: "r_femur_len", 41: "r_tibia_len",
    42: "l_shoulder_len", 43: "l_upper_arm_len", 44: "l_forearm_len",
    45: "r_shoulder_len", 46: "r_upper_arm_len", 47: "r_forearm_len",
}


def _builtin_topology() -> SkeletonTopology:
    """Construct the canonical table in code; the shipped file mirrors this."""
    specs = [
        ("torso", _TORSO_ROWS, 0),
        ("left_leg", _TORSO_ROWS[:3] + _LEFT_LEG_ROWS, 3),
        ("right_leg", _TORSO_ROWS[:3] + _RIGHT_LEG_ROWS, 3),
        ("left_arm", _TORSO_ROWS[:9] + _LEFT_ARM_ROWS, 9),
        ("right_arm", _TORSO_ROWS[:9] + _RIGHT_ARM_ROWS, 9),
    ]
    branches = []
    param_index: dict[tuple[int, int, str], int] = {}
    names = [""] * N_PARAMS
    kinds = [""] * N_PARAMS
    for bi, (bname, rowspecs, prefix) in enumerate(specs):
        rows = []
        kp_map = []
        for r, (name, a, d, alpha, theta, tid, lfield, lid, kp) in enumerate(rowspecs):
            rows.append(DhRow(name=name, a=a, d=d,
                              alpha=np.deg2rad(float(alpha)), theta=np.deg2rad(float(theta)),
                              var_a=(lfield == "a"), var_d=(lfield == "d"), var_theta=True))
            param_index[(bi, r, "theta")] = tid
            names[tid] = name
            kinds[tid] = "angle"
            if lfield is not None:
                param_index[(bi, r, lfield)] = lid
                names[lid] = _LENGTH_NAMES[lid]
                kinds[lid] = "length"
            if kp is not None and (bi == 0 or r >= prefix):
                kp_map.append((r, kp))
        branches.append(KinematicBranch(name=bname, rows=tuple(rows),
                                        keypoint_map=tuple(kp_map), shared_prefix_len=prefix))
    topo = SkeletonTopology(branches=tuple(branches), param_index=param_index,
                            param_names=tuple(names), param_kinds=tuple(kinds))
    topo.validate()
    return topo


# --------------------------------------------------------------------------
# Serialization (degrees/meters, one row per line)

def topology_to_text(topology: SkeletonTopology) -> str:
    lines = ["# dhpose topology v1",
             "# angles in degrees, lengths in meters",
             "# row <branch> <idx> <name> <a> <d> <alpha> <theta>"
             " <var_a> <var_d> <var_alpha> <var_theta> <theta_id> <len_id> <keypoint>"]
    for bi, br in enumerate(topology.branches):
        lines.append(f"branch {bi} {br.name} shared_prefix {br.shared_prefix_len}")
        kp_of = dict(br.keypoint_map)
        for r, row in enumerate(br.rows):
            tid = topology.param_index.get((bi, r, "theta"), -1)
            lid = topology.param_index.get((bi, r, "a"),
                                           topology.param_index.get((bi, r, "d"), -1))
            lines.append(
                "row {} {} {} {:.9g} {:.9g} {:.9g} {:.9g} {:d} {:d} {:d} {:d} {} {} {}".format(
                    bi, r, row.name, row.a, row.d,
                    np.rad2deg(row.alpha), np.rad2deg(row.theta),
                    row.var_a, row.var_d, row.var_alpha, row.var_theta,
                    tid, lid, kp_of.get(r, -1)))
    for pid in range(len(topology.param_names)):
        lines.append(f"param {pid} {topology.param_names[pid]} {topology.param_kinds[pid]}")
    for parent, child in topology.bone_list:
        lines.append(f"bone {parent} {child}")
    for kp, name in enumerate(topology.keypoint_names):
        lines.append(f"keypoint {kp} {name}")
    return "\n".join(lines) + "\n"


def topology_from_text(text: str) -> SkeletonTopology:
    branch_meta: dict[int, tuple[str, int]] = {}
    rows: dict[int, list] = {}
    kp_maps: dict[int, list] = {}
    param_index: dict[tuple[int, int, str], int] = {}
    names: dict[int, str] = {}
    kinds: dict[int, str] = {}
    bones: list[tuple[int, int]] = []
    kp_names: dict[int, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        try:
            if tok[0] == "branch":
                branch_meta[int(tok[1])] = (tok[2], int(tok[4]))
            elif tok[0] == "row":
                bi, r = int(tok[1]), int(tok[2])
                name = tok[3]
                a, d, alpha, theta = (float(t) for t in tok[4:8])
                var_a, var_d, var_alpha, var_theta = (bool(int(t)) for t in tok[8:12])
                tid, lid, kp = int(tok[12]), int(tok[13]), int(tok[14])
                rows.setdefault(bi, []).append(DhRow(
                    name=name, a=a, d=d, alpha=np.deg2rad(alpha), theta=np.deg2rad(theta),
                    var_a=var_a, var_d=var_d, var_alpha=var_alpha, var_theta=var_theta))
                if var_theta:
                    param_index[(bi, r, "theta")] = tid
                if var_a:
                    param_index[(bi, r, "a")] = lid
                if var_d:
                    param_index[(bi, r, "d")] = lid
                if kp >= 0:
                    kp_maps.setdefault(bi, []).append((r, kp))
            elif tok[0] == "param":
                names[int(tok[1])] = tok[2]
                kinds[int(tok[1])] = tok[3]
            elif tok[0] == "bone":
                bones.append((int(tok[1]), int(tok[2])))
            elif tok[0] == "keypoint":
                kp_names[int(tok[1])] = tok[2]
            else:
                raise ValueError(f"unknown record {tok[0]!r}")
        except (IndexError, ValueError) as exc:
            raise ValueError(f"topology parse error at line {lineno}: {exc}") from exc
    branches = tuple(
        KinematicBranch(name=branch_meta[bi][0], rows=tuple(rows[bi]),
                        keypoint_map=tuple(kp_maps.get(bi, [])),
                        shared_prefix_len=branch_meta[bi][1])
        for bi in sorted(branch_meta))
    n = max(names) + 1
    topo = SkeletonTopology(
        branches=branches, param_index=param_index,
        param_names=tuple(names[i] for i in range(n)),
        param_kinds=tuple(kinds[i] for i in range(n)),
        bone_list=tuple(bones),
        keypoint_names=tuple(kp_names[i] for i in range(len(kp_names))))
    topo.validate()
    return topo


def save_topology(topology: SkeletonTopology, path) -> None:
    with open(path, "w") as fh:
        fh.write(topology_to_text(topology))


def load_topology(path) -> SkeletonTopology:
    with open(path) as fh:
        return topology_from_text(fh.read())


def topology_hash(topology: SkeletonTopology) -> str:
    """Stable 12-hex digest of the serialized table; stamped into data files."""
    return hashlib.sha256(topology_to_text(topology).encode()).hexdigest()[:12]


_DEFAULT: dict[str, SkeletonTopology] = {}


def default_topology() -> SkeletonTopology:
    """The shipped canonical topology (parsed from the packaged data file)."""
    if "topology" not in _DEFAULT:
        text = resources.files("dhpose").joinpath("data/topology.txt").read_text()
        _DEFAULT["topology"] = topology_from_text(text)
    return _DEFAULT["topology"]


def rest_pose(topology: SkeletonTopology) -> np.ndarray:
    """FK of the all-zero parameter vector under the identity transform."""
    return forward_kinematics(topology, np.zeros(N_PARAMS), GlobalTransform.identity())


def save_rest_pose(pose, topology: SkeletonTopology, path) -> None:
    lines = [f"# dhpose rest pose v1 topology={topology_hash(topology)}"]
    for kp, name in enumerate(topology.keypoint_names):
        x, y, z = pose[kp]
        lines.append(f"keypoint {kp} {name} {x:.9g} {y:.9g} {z:.9g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_rest_pose(path) -> np.ndarray:
    pose = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            pose[int(tok[1])] = [float(tok[3]), float(tok[4]), float(tok[5])]
    return np.array([pose[i] for i in range(len(pose))])


def default_rest_pose() -> np.ndarray:
    text = resources.files("dhpose").joinpath("data/rest_pose.txt").read_text()
    pose = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        pose[int(tok[1])] = [float(tok[3]), float(tok[4]), float(tok[5])]
    return np.array([pose[i] for i in range(len(pose))])
