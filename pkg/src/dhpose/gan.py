"""Constraint-bounded pose generator, the two Wasserstein critics, and the
gradient-penalty training loop.

The generator maps a 128-d normal latent through a fully connected net to
48 raw parameter values plus 6 global pose values, squashes them into the
constraint ranges, and runs forward kinematics and pinhole projection.  In
video mode one latent emits a whole sequence: the 15 bone lengths are
produced once and shared across frames, the 33 joint angles and 6 global
values per frame.

The frame critic scores single poses from three streams (3D pose, bone
cosines, normalized 2D pose).  The motion critic has three two-stream
branches (sequence plus its first differences of the same three signals);
its score is the sum of the branch heads.  Both train with the
gradient-penalty objective; the motion terms are gated on by a step
schedule over epochs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ShapeError, Tape, Tensor
from .camera import CameraIntrinsics, default_camera
from .constraints import ConstraintTable, count_violations, default_constraint_table, squash_params
from .features import AdjacentBonePairs, adjacent_bone_pairs, joint_cosines
from .skeleton import (N_ANGLE_PARAMS, N_LENGTH_PARAMS, N_PARAMS, SkeletonTopology, _compiled,
                       default_topology, forward_kinematics_batch)

N_GLOBAL = 6


class TrainingDivergedError(RuntimeError):
    """Non-finite loss; carries a diagnostic snapshot dict."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class GlobalBounds:
    """Squash ranges for the global rotation (radians) and translation (m)."""

    lo: tuple = (-np.pi, -np.pi, -np.pi, -2.0, -1.0, 3.0)
    hi: tuple = (np.pi, np.pi, np.pi, 2.0, 1.0, 6.0)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.lo, dtype=float), np.asarray(self.hi, dtype=float)


def squash_globals(raw, bounds: GlobalBounds) -> np.ndarray:
    lo, hi = bounds.arrays()
    return lo + (1.0 + np.tanh(np.asarray(raw, dtype=np.float64))) * (hi - lo) / 2.0


def gamma_schedule(epoch: int, beta_epoch: int) -> int:
    """Motion-critic gate: 1 once the epoch counter reaches the threshold."""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    return 1 if epoch >= beta_epoch else 0


def sample_latent(count: int, z_dim: int, rng: np.random.Generator) -> np.ndarray:
    """Independent standard-normal latents, deterministic under the rng seed."""
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    return rng.standard_normal((count, z_dim))


@dataclass
class TrainConfig:
    mode: str = "single"            # "single" | "video"
    frames: int = 1                 # sequence length in video mode (9 or 27 typical)
    alpha: float = 10.0             # gradient-penalty weight
    beta_epoch: int = 4             # epoch at which the motion critic turns on
    z_dim: int = 128
    batch_size: Optional[int] = None  # default 1024 single / 512 video
    critic_steps: int = 5           # critic updates per generator update
    lr: float = 1e-4
    epochs: int = 10
    seed: int = 0
    gen_hidden: tuple = (512, 512)
    enc_hidden: tuple = (256, 256)
    head_hidden: tuple = (128,)
    bounds: GlobalBounds = field(default_factory=GlobalBounds)
    out_dir: Optional[str] = None

    def resolved_batch(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 1024 if self.mode == "single" else 512

    def validate(self) -> None:
        if self.mode not in ("single", "video"):
            raise ValueError(f"mode must be 'single' or 'video', got {self.mode!r}")
        if self.mode == "video" and self.frames < 2:
            raise ValueError("video mode needs at least 2 frames")
        if self.mode == "single" and self.frames != 1:
            raise ValueError("single mode uses exactly 1 frame")
        positives = dict(alpha=self.alpha, z_dim=self.z_dim, critic_steps=self.critic_steps,
                         lr=self.lr, epochs=self.epochs, batch=self.resolved_batch(),
                         beta_epoch=self.beta_epoch)
        for name, value in positives.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.beta_epoch > self.epochs:
            raise ValueError(f"beta_epoch {self.beta_epoch} exceeds epochs {self.epochs}")

    def to_json(self) -> str:
        d = self.__dict__.copy()
        d["bounds"] = {"lo": list(self.bounds.lo), "hi": list(self.bounds.hi)}
        for k in ("gen_hidden", "enc_hidden", "head_hidden"):
            d[k] = list(d[k])
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        d = json.loads(text)
        if "bounds" in d:
            d["bounds"] = GlobalBounds(lo=tuple(d["bounds"]["lo"]), hi=tuple(d["bounds"]["hi"]))
        for k in ("gen_hidden", "enc_hidden", "head_hidden"):
            if k in d:
                d[k] = tuple(d[k])
        cfg = cls(**d)
        cfg.validate()
        return cfg


# --------------------------------------------------------------------------
# Generator

@dataclass
class DhGenerator:
    net: nn.Mlp
    topology: SkeletonTopology
    table: ConstraintTable
    camera: CameraIntrinsics
    mode: str = "single"
    frames: int = 1
    bounds: GlobalBounds = field(default_factory=GlobalBounds)

    def expected_out(self) -> int:
        if self.mode == "single":
            return N_PARAMS + N_GLOBAL
        return N_LENGTH_PARAMS + self.frames * (N_ANGLE_PARAMS + N_GLOBAL)

    def __post_init__(self):
        if self.net.out_dim != self.expected_out():
            raise ValueError(f"generator net emits {self.net.out_dim} values; "
                             f"{self.mode} mode with {self.frames} frames needs {self.expected_out()}")


def build_generator(cfg: TrainConfig, rng: np.random.Generator,
                    topology: Optional[SkeletonTopology] = None,
                    table: Optional[ConstraintTable] = None,
                    camera: Optional[CameraIntrinsics] = None) -> DhGenerator:
    topology = topology or default_topology()
    table = table or default_constraint_table()
    camera = camera or default_camera()
    frames = cfg.frames if cfg.mode == "video" else 1
    out = N_PARAMS + N_GLOBAL if cfg.mode == "single" \
        else N_LENGTH_PARAMS + frames * (N_ANGLE_PARAMS + N_GLOBAL)
    sizes = [cfg.z_dim, *cfg.gen_hidden, out]
    acts = ["tanh"] * len(cfg.gen_hidden) + ["linear"]
    net = nn.mlp_init(sizes, acts, rng)
    return DhGenerator(net=net, topology=topology, table=table, camera=camera,
                       mode=cfg.mode, frames=frames, bounds=cfg.bounds)


@dataclass
class GenOutput:
    """Squashed parameters, global values, and the resulting pose pair.

    Shapes are (B, ...) in single mode and (B, T, ...) in video mode.
    """

    params: np.ndarray
    globals_: np.ndarray
    pose3d: np.ndarray
    pose2d: np.ndarray


def _split_raw(gen: DhGenerator, raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Raw net output to squashed (params, globals); video shares lengths."""
    b = raw.shape[0]
    if gen.mode == "single":
        params = squash_params(raw[:, :N_PARAMS], gen.table)
        globals_ = squash_globals(raw[:, N_PARAMS:], gen.bounds)
        return params, globals_
    t = gen.frames
    lengths = gen.table.lo[N_ANGLE_PARAMS:] + (1.0 + np.tanh(raw[:, :N_LENGTH_PARAMS])) \
        * (gen.table.hi[N_ANGLE_PARAMS:] - gen.table.lo[N_ANGLE_PARAMS:]) / 2.0
    per_frame = raw[:, N_LENGTH_PARAMS:].reshape(b, t, N_ANGLE_PARAMS + N_GLOBAL)
    angles = gen.table.lo[:N_ANGLE_PARAMS] + (1.0 + np.tanh(per_frame[:, :, :N_ANGLE_PARAMS])) \
        * (gen.table.hi[:N_ANGLE_PARAMS] - gen.table.lo[:N_ANGLE_PARAMS]) / 2.0
    globals_ = squash_globals(per_frame[:, :, N_ANGLE_PARAMS:], gen.bounds)
    params = np.concatenate([angles, np.broadcast_to(lengths[:, None, :], (b, t, N_LENGTH_PARAMS))],
                            axis=2)
    return params, globals_


def generate_poses(gen: DhGenerator, z) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Latents to squashed (params, globals, pose3d), no projection yet."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != gen.net.in_dim:
        raise ShapeError(f"latent shape {z.shape} does not match z_dim {gen.net.in_dim}")
    raw = nn.mlp_eval(gen.net, z)
    params, globals_ = _split_raw(gen, raw)
    pose3d = forward_kinematics_batch(gen.topology, params.reshape(-1, N_PARAMS),
                                      globals_.reshape(-1, N_GLOBAL))
    if gen.mode == "video":
        pose3d = pose3d.reshape(z.shape[0], gen.frames, -1, 3)
    return params, globals_, pose3d


def generate(gen: DhGenerator, z) -> GenOutput:
    """Latents to constraint-valid 2D-3D pose pairs (inference path).

    A joint in front of the camera's near plane raises DepthViolationError;
    bulk synthesis filters and redraws such samples instead (see
    ``dataset.synthesize_dataset``).
    """
    from .camera import project_pose

    params, globals_, pose3d = generate_poses(gen, z)
    pose2d = project_pose(pose3d, gen.camera)
    return GenOutput(params=params, globals_=globals_, pose3d=pose3d, pose2d=pose2d)


# --------------------------------------------------------------------------
# Differentiable generator path (autodiff tape)

def _assemble_from_masks(parts: list[tuple[Tensor, np.ndarray]], base: np.ndarray,
                         tape: Tape, n: int) -> Tensor:
    """base + sum_i coeff_i (n,) * mask_i, as an (n, k, k) tape tensor."""
    out = tape.const(np.broadcast_to(base, (n,) + base.shape).copy())
    for coeff, mask in parts:
        c3 = ad.reshape(coeff, (n, 1, 1))
        out = ad.add(out, ad.mul(c3, tape.const(mask)))
    return out


def _fk_tape(topology: SkeletonTopology, params: Tensor, globals_: Tensor, tape: Tape) -> Tensor:
    """Forward kinematics as tape ops: (N, 48) and (N, 6) to (N, 16, 3)."""
    n = params.values.shape[0]
    compiled = _compiled(topology)
    kp_slots: list[Optional[Tensor]] = [None] * topology.keypoint_count
    root_cum: list[Tensor] = []
    for bi, comp in enumerate(compiled):
        prefix = comp["prefix"]
        cum = list(root_cum[:prefix])
        cur = cum[-1] if cum else None
        for k in range(prefix, len(comp["theta"])):
            ca, sa = comp["cos_alpha"][k], comp["sin_alpha"][k]
            base = np.array([[0, 0, 0, 0], [0, 0, -sa, 0], [0, 0, ca, 0], [0, 0, 0, 1.0]])
            c_mask = np.array([[1, 0, 0, 0], [0, ca, 0, 0], [0, sa, 0, 0], [0, 0, 0, 0.0]])
            s_mask = np.array([[0, -1, 0, 0], [ca, 0, 0, 0], [sa, 0, 0, 0], [0, 0, 0, 0.0]])
            a_mask = np.array([[0, 0, 0, 1], [0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0.0]])
            d_mask = np.array([[0, 0, 0, 0], [0, 0, 0, -sa], [0, 0, 0, ca], [0, 0, 0, 0.0]])
            parts = []
            theta = tape.const(np.full(n, comp["theta"][k]))
            if comp["theta_id"][k] >= 0:
                theta = ad.add(theta, params[:, int(comp["theta_id"][k])])
            parts.append((ad.cos(theta), c_mask))
            parts.append((ad.sin(theta), s_mask))
            if comp["a_id"][k] >= 0:
                a = ad.add(tape.const(np.full(n, comp["a"][k])), params[:, int(comp["a_id"][k])])
                parts.append((a, a_mask))
            else:
                base = base + comp["a"][k] * a_mask
            if comp["d_id"][k] >= 0:
                d = ad.add(tape.const(np.full(n, comp["d"][k])), params[:, int(comp["d_id"][k])])
                parts.append((d, d_mask))
            else:
                base = base + comp["d"][k] * d_mask
            mat = _assemble_from_masks(parts, base, tape, n)
            cur = mat if cur is None else ad.matmul(cur, mat)
            cum.append(cur)
        if bi == 0:
            root_cum = cum
        for row_idx, kp in comp["keypoint_map"]:
            kp_slots[kp] = ad.reshape(cum[row_idx][:, :3, 3], (n, 1, 3))
    kps = ad.concat(kp_slots, axis=1)

    def axis_rot(angle: Tensor, base, c_mask, s_mask) -> Tensor:
        return _assemble_from_masks([(ad.cos(angle), np.asarray(c_mask, dtype=float)),
                                     (ad.sin(angle), np.asarray(s_mask, dtype=float))],
                                    np.asarray(base, dtype=float), tape, n)

    rx = axis_rot(globals_[:, 0], [[1, 0, 0], [0, 0, 0], [0, 0, 0]],
                  [[0, 0, 0], [0, 1, 0], [0, 0, 1]], [[0, 0, 0], [0, 0, -1], [0, 1, 0]])
    ry = axis_rot(globals_[:, 1], [[0, 0, 0], [0, 1, 0], [0, 0, 0]],
                  [[1, 0, 0], [0, 0, 0], [0, 0, 1]], [[0, 0, 1], [0, 0, 0], [-1, 0, 0]])
    rz = axis_rot(globals_[:, 2], [[0, 0, 0], [0, 0, 0], [0, 0, 1]],
                  [[1, 0, 0], [0, 1, 0], [0, 0, 0]], [[0, -1, 0], [1, 0, 0], [0, 0, 0]])
    rot = ad.matmul(ad.matmul(rx, ry), rz)
    t = ad.reshape(globals_[:, 3:6], (n, 1, 3))
    return ad.add(ad.matmul(kps, ad.swapaxes(rot, 1, 2)), t)


def _squash_tape(raw: Tensor, lo: np.ndarray, hi: np.ndarray, tape: Tape) -> Tensor:
    half = (np.asarray(hi) - np.asarray(lo)) / 2.0
    return ad.add(tape.const(np.asarray(lo)), ad.mul(ad.add(ad.tanh(raw), 1.0), tape.const(half)))


def _project_tape(pose: Tensor, cam: CameraIntrinsics, tape: Tape) -> Tensor:
    z = pose[:, :, 2]
    u = ad.add(ad.div(ad.mul(pose[:, :, 0], cam.fx), z), cam.cx)
    v = ad.add(ad.div(ad.mul(pose[:, :, 1], cam.fy), z), cam.cy)
    return ad.stack([u, v], axis=2)


def _cosines_tape(pose: Tensor, pairs: AdjacentBonePairs, tape: Tape) -> Tensor:
    bones = np.asarray(pairs.bones)
    idx = np.asarray(pairs.pairs)
    vec = ad.sub(ad.take(pose, bones[:, 1], axis=1), ad.take(pose, bones[:, 0], axis=1))
    va = ad.take(vec, idx[:, 0], axis=1)
    vb = ad.take(vec, idx[:, 1], axis=1)
    dot = ad.sum_(ad.mul(va, vb), axis=2)
    la = ad.sqrt(ad.sum_(ad.square(va), axis=2))
    lb = ad.sqrt(ad.sum_(ad.square(vb), axis=2))
    return ad.clamp(ad.div(dot, ad.mul(la, lb)), -1.0, 1.0)


def normalize_2d(pose2d, cam) -> np.ndarray:
    """Dimensionless image coordinates (uv - principal point) / focal."""
    pose2d = np.asarray(pose2d, dtype=np.float64)
    if isinstance(cam, CameraIntrinsics):
        c = np.array([cam.cx, cam.cy])
        f = np.array([cam.fx, cam.fy])
        return (pose2d - c) / f
    cam = np.asarray(cam, dtype=np.float64)  # leading dims + (5,): fx fy cx cy z_min
    lead = cam.shape[:-1]
    if pose2d.shape[:len(lead)] != lead:
        raise ShapeError(f"camera batch {cam.shape} does not match poses {pose2d.shape}")
    shape = lead + (1,) * (pose2d.ndim - len(lead) - 1) + (2,)
    f = cam[..., 0:2].reshape(shape)
    c = cam[..., 2:4].reshape(shape)
    return (pose2d - c) / f


@dataclass
class TapeGenOutput:
    """Generator pipeline on the tape, down to the critic input streams."""

    params: Tensor       # (N, 48) squashed deltas (N = B or B*T)
    globals_: Tensor     # (N, 6)
    pose3d: Tensor       # (N, 16, 3)
    x3d: Tensor          # (N, 48) flattened pose
    xcos: Tensor         # (N, n_pairs)
    x2d: Tensor          # (N, 32) normalized pixels
    motion: Optional[dict] = None  # video mode: the six sequence streams


def generate_on_tape(gen: DhGenerator, z, tape: Tape, gen_params: dict,
                     pairs: AdjacentBonePairs) -> TapeGenOutput:
    z = np.asarray(z, dtype=np.float64)
    b = z.shape[0]
    raw, _ = nn.mlp_apply(gen.net, tape.const(z), tape, gen_params, "gen.")
    glo_lo, glo_hi = gen.bounds.arrays()
    if gen.mode == "single":
        params = _squash_tape(raw[:, :N_PARAMS], gen.table.lo, gen.table.hi, tape)
        globals_ = _squash_tape(raw[:, N_PARAMS:], glo_lo, glo_hi, tape)
        n = b
    else:
        t = gen.frames
        lengths = _squash_tape(raw[:, :N_LENGTH_PARAMS],
                               gen.table.lo[N_ANGLE_PARAMS:], gen.table.hi[N_ANGLE_PARAMS:], tape)
        per = ad.reshape(raw[:, N_LENGTH_PARAMS:], (b, t, N_ANGLE_PARAMS + N_GLOBAL))
        angles = _squash_tape(ad.reshape(per[:, :, :N_ANGLE_PARAMS], (b * t, N_ANGLE_PARAMS)),
                              gen.table.lo[:N_ANGLE_PARAMS], gen.table.hi[:N_ANGLE_PARAMS], tape)
        globals_ = _squash_tape(ad.reshape(per[:, :, N_ANGLE_PARAMS:], (b * t, N_GLOBAL)),
                                glo_lo, glo_hi, tape)
        lengths_rep = ad.reshape(ad.mul(ad.reshape(lengths, (b, 1, N_LENGTH_PARAMS)),
                                        tape.const(np.ones((b, t, 1)))),
                                 (b * t, N_LENGTH_PARAMS))
        params = ad.concat([angles, lengths_rep], axis=1)
        n = b * t
    pose3d = _fk_tape(gen.topology, params, globals_, tape)
    if np.any(pose3d.values[:, :, 2] < gen.camera.z_min):
        raise TrainingDivergedError(
            "generated joint in front of the near plane; widen the translation bounds",
            {"min_depth": float(pose3d.values[:, :, 2].min()), "z_min": gen.camera.z_min})
    pose2d = _project_tape(pose3d, gen.camera, tape)
    xcos = _cosines_tape(pose3d, pairs, tape)
    x3d = ad.reshape(pose3d, (n, 48))
    c = np.array([gen.camera.cx, gen.camera.cy])
    f = np.array([gen.camera.fx, gen.camera.fy])
    x2d = ad.reshape(ad.div(ad.sub(pose2d, tape.const(c)), tape.const(f)), (n, 32))
    motion = None
    if gen.mode == "video":
        t = gen.frames
        npairs = xcos.values.shape[1]
        seq3d = ad.reshape(x3d, (b, t, 48))
        cosseq = ad.reshape(xcos, (b, t, npairs))
        seq2d = ad.reshape(x2d, (b, t, 32))
        root2d = ad.reshape(ad.reshape(pose2d, (b, t, 32))[:, :, 0:2], (b, t, 2))
        motion = {
            "seq3d": ad.reshape(seq3d, (b, t * 48)),
            "diff3d": ad.reshape(ad.sub(seq3d[:, 1:], seq3d[:, :-1]), (b, (t - 1) * 48)),
            "cosseq": ad.reshape(cosseq, (b, t * npairs)),
            "cosdiff": ad.reshape(ad.sub(cosseq[:, 1:], cosseq[:, :-1]), (b, (t - 1) * npairs)),
            "seq2d": ad.reshape(seq2d, (b, t * 32)),
            "root2d": ad.reshape(ad.sub(root2d[:, 1:], root2d[:, :-1]), (b, (t - 1) * 2)),
        }
    return TapeGenOutput(params=params, globals_=globals_, pose3d=pose3d,
                         x3d=x3d, xcos=xcos, x2d=x2d, motion=motion)


# --------------------------------------------------------------------------
# Critics

@dataclass
class FrameCritic:
    """Three stream encoders (3D pose, cosines, 2D pose) + fusion head."""

    enc3d: nn.Mlp
    enc_cos: nn.Mlp
    enc2d: nn.Mlp
    head: nn.Mlp

    def nets(self) -> dict[str, nn.Mlp]:
        return {"enc3d": self.enc3d, "enc_cos": self.enc_cos, "enc2d": self.enc2d,
                "head": self.head}


@dataclass
class MotionCritic:
    """Three two-stream branches; the score is the sum of the branch heads."""

    enc3d_seq: nn.Mlp
    enc3d_diff: nn.Mlp
    head3d: nn.Mlp
    enc_cos_seq: nn.Mlp
    enc_cos_diff: nn.Mlp
    head_cos: nn.Mlp
    enc2d_seq: nn.Mlp
    enc2d_diff: nn.Mlp
    head2d: nn.Mlp

    def nets(self) -> dict[str, nn.Mlp]:
        return {"enc3d_seq": self.enc3d_seq, "enc3d_diff": self.enc3d_diff, "head3d": self.head3d,
                "enc_cos_seq": self.enc_cos_seq, "enc_cos_diff": self.enc_cos_diff,
                "head_cos": self.head_cos,
                "enc2d_seq": self.enc2d_seq, "enc2d_diff": self.enc2d_diff, "head2d": self.head2d}

    def branches(self):
        return (("3d", self.enc3d_seq, self.enc3d_diff, self.head3d),
                ("cos", self.enc_cos_seq, self.enc_cos_diff, self.head_cos),
                ("2d", self.enc2d_seq, self.enc2d_diff, self.head2d))


def _encoder(in_dim: int, hidden: tuple, rng) -> nn.Mlp:
    return nn.mlp_init([in_dim, *hidden], ["lrelu"] * len(hidden), rng)


def _head(in_dim: int, hidden: tuple, rng) -> nn.Mlp:
    return nn.mlp_init([in_dim, *hidden, 1], ["lrelu"] * len(hidden) + ["linear"], rng)


def build_frame_critic(cfg: TrainConfig, n_pairs: int, rng) -> FrameCritic:
    e = cfg.enc_hidden[-1]
    return FrameCritic(
        enc3d=_encoder(48, cfg.enc_hidden, rng),
        enc_cos=_encoder(n_pairs, cfg.enc_hidden, rng),
        enc2d=_encoder(32, cfg.enc_hidden, rng),
        head=_head(3 * e, cfg.head_hidden, rng))


def build_motion_critic(cfg: TrainConfig, n_pairs: int, rng) -> MotionCritic:
    t = cfg.frames
    e = cfg.enc_hidden[-1]
    return MotionCritic(
        enc3d_seq=_encoder(t * 48, cfg.enc_hidden, rng),
        enc3d_diff=_encoder((t - 1) * 48, cfg.enc_hidden, rng),
        head3d=_head(2 * e, cfg.head_hidden, rng),
        enc_cos_seq=_encoder(t * n_pairs, cfg.enc_hidden, rng),
        enc_cos_diff=_encoder((t - 1) * n_pairs, cfg.enc_hidden, rng),
        head_cos=_head(2 * e, cfg.head_hidden, rng),
        enc2d_seq=_encoder(t * 32, cfg.enc_hidden, rng),
        enc2d_diff=_encoder((t - 1) * 2, cfg.enc_hidden, rng),
        head2d=_head(2 * e, cfg.head_hidden, rng))


def critic_params(critic, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for name, net in critic.nets().items():
        out.update(nn.mlp_params(net, f"{prefix}{name}."))
    return out


def critic_leaves(tape: Tape, critic, prefix: str) -> dict[str, Tensor]:
    return {k: tape.var(v, name=k) for k, v in critic_params(critic, prefix).items()}


def critic_set_params(critic, values: dict[str, np.ndarray], prefix: str) -> None:
    for name, net in critic.nets().items():
        nn.mlp_set_params(net, values, f"{prefix}{name}.")


def _as_tensor(x, tape: Tape) -> Tensor:
    return x if isinstance(x, Tensor) else tape.const(np.asarray(x, dtype=np.float64))


def frame_score(critic: FrameCritic, x3d, xcos, x2d, tape: Tape,
                params: Optional[dict] = None, prefix: str = "ds.") -> tuple[Tensor, dict]:
    """Per-sample score (B, 1) plus the traces needed for input gradients."""
    x3d, xcos, x2d = (_as_tensor(v, tape) for v in (x3d, xcos, x2d))
    e1, t1 = nn.mlp_apply(critic.enc3d, x3d, tape, params, f"{prefix}enc3d.")
    e2, t2 = nn.mlp_apply(critic.enc_cos, xcos, tape, params, f"{prefix}enc_cos.")
    e3, t3 = nn.mlp_apply(critic.enc2d, x2d, tape, params, f"{prefix}enc2d.")
    h = ad.concat([e1, e2, e3], axis=1)
    score, th = nn.mlp_apply(critic.head, h, tape, params, f"{prefix}head.")
    widths = (e1.values.shape[1], e2.values.shape[1], e3.values.shape[1])
    return score, {"traces": (t1, t2, t3), "head_trace": th, "widths": widths}


def frame_penalty(critic: FrameCritic, x3d, xcos, x2d, alpha: float, tape: Tape,
                  params: Optional[dict] = None, prefix: str = "ds.") -> Tensor:
    """Gradient penalty of the frame critic at the given (interpolated) input."""
    score, info = frame_score(critic, x3d, xcos, x2d, tape, params, prefix)
    ones = tape.const(np.ones_like(score.values))
    g_h = nn.mlp_vjp(info["head_trace"], ones)
    w1, w2, w3 = info["widths"]
    grads = []
    for trace, sl in zip(info["traces"],
                         (slice(0, w1), slice(w1, w1 + w2), slice(w1 + w2, w1 + w2 + w3))):
        grads.append(nn.mlp_vjp(trace, g_h[:, sl]))
    norm = nn.gradient_norms(grads)
    return ad.mul(ad.mean(ad.square(ad.sub(norm, 1.0))), alpha)


_MOTION_KEYS = ("seq3d", "diff3d", "cosseq", "cosdiff", "seq2d", "root2d")


def motion_score(critic: MotionCritic, streams: dict, tape: Tape,
                 params: Optional[dict] = None, prefix: str = "dm.") -> tuple[Tensor, dict]:
    """Sum of the three branch-head scores, (B, 1)."""
    info = {}
    total = None
    for (tag, enc_seq, enc_diff, head), (k_seq, k_diff) in zip(
            critic.branches(), (("seq3d", "diff3d"), ("cosseq", "cosdiff"), ("seq2d", "root2d"))):
        xs = _as_tensor(streams[k_seq], tape)
        xd = _as_tensor(streams[k_diff], tape)
        names = {"3d": ("enc3d_seq", "enc3d_diff", "head3d"),
                 "cos": ("enc_cos_seq", "enc_cos_diff", "head_cos"),
                 "2d": ("enc2d_seq", "enc2d_diff", "head2d")}[tag]
        es, ts = nn.mlp_apply(enc_seq, xs, tape, params, f"{prefix}{names[0]}.")
        ed, td = nn.mlp_apply(enc_diff, xd, tape, params, f"{prefix}{names[1]}.")
        h = ad.concat([es, ed], axis=1)
        s, th = nn.mlp_apply(head, h, tape, params, f"{prefix}{names[2]}.")
        info[tag] = {"traces": (ts, td), "head_trace": th,
                     "widths": (es.values.shape[1], ed.values.shape[1]), "score": s}
        total = s if total is None else ad.add(total, s)
    return total, info


def motion_penalty(critic: MotionCritic, streams: dict, alpha: float, tape: Tape,
                   params: Optional[dict] = None, prefix: str = "dm.") -> Tensor:
    score, info = motion_score(critic, streams, tape, params, prefix)
    grads = []
    for tag in ("3d", "cos", "2d"):
        branch = info[tag]
        ones = tape.const(np.ones_like(branch["score"].values))
        g_h = nn.mlp_vjp(branch["head_trace"], ones)
        ws, wd = branch["widths"]
        grads.append(nn.mlp_vjp(branch["traces"][0], g_h[:, :ws]))
        grads.append(nn.mlp_vjp(branch["traces"][1], g_h[:, ws:ws + wd]))
    norm = nn.gradient_norms(grads)
    return ad.mul(ad.mean(ad.square(ad.sub(norm, 1.0))), alpha)


def discriminate_single(critic: FrameCritic, pose3d, pose2d_norm, cosines) -> np.ndarray:
    """Deterministic frame-critic scores, (B,), numpy in and out."""
    tape = Tape()
    b = np.asarray(pose3d).reshape(len(np.asarray(pose3d)), -1)
    score, _ = frame_score(critic, b, cosines, np.asarray(pose2d_norm).reshape(b.shape[0], -1), tape)
    return score.values[:, 0]


def discriminate_motion(critic: MotionCritic, streams: dict) -> np.ndarray:
    """Deterministic motion-critic scores, (B,)."""
    tape = Tape()
    score, _ = motion_score(critic, streams, tape)
    return score.values[:, 0]


# --------------------------------------------------------------------------
# Batches and losses

@dataclass
class FeatureBatch:
    """Numpy critic inputs: frame streams, plus motion streams in video mode."""

    x3d: np.ndarray
    xcos: np.ndarray
    x2d: np.ndarray
    motion: Optional[dict] = None


def frame_streams(pose3d, pose2d, cam, pairs: AdjacentBonePairs) -> tuple[np.ndarray, ...]:
    """(x3d, xcos, x2d) for (..., 16, 2/3) arrays; leading dims are flattened."""
    pose3d = np.asarray(pose3d, dtype=np.float64)
    x3d = pose3d.reshape(-1, 48)
    xcos = joint_cosines(pose3d, pairs).reshape(x3d.shape[0], -1)
    x2d = normalize_2d(pose2d, cam).reshape(-1, 32)
    return x3d, xcos, x2d


def motion_streams(seq3d, seq2d, cam, pairs: AdjacentBonePairs) -> dict:
    """The six two-stream inputs for (B, T, 16, 2/3) sequences."""
    seq3d = np.asarray(seq3d, dtype=np.float64)
    b, t = seq3d.shape[0], seq3d.shape[1]
    cos = joint_cosines(seq3d, pairs)
    uv = normalize_2d(seq2d, cam)
    root = uv[:, :, 0, :]
    return {
        "seq3d": seq3d.reshape(b, t * 48),
        "diff3d": (seq3d[:, 1:] - seq3d[:, :-1]).reshape(b, (t - 1) * 48),
        "cosseq": cos.reshape(b, -1),
        "cosdiff": (cos[:, 1:] - cos[:, :-1]).reshape(b, -1),
        "seq2d": uv.reshape(b, t * 32),
        "root2d": (root[:, 1:] - root[:, :-1]).reshape(b, (t - 1) * 2),
    }


def feature_batch(pose3d, pose2d, cam, pairs: AdjacentBonePairs,
                  video: bool = False) -> FeatureBatch:
    x3d, xcos, x2d = frame_streams(pose3d, pose2d, cam, pairs)
    motion = motion_streams(pose3d, pose2d, cam, pairs) if video else None
    return FeatureBatch(x3d=x3d, xcos=xcos, x2d=x2d, motion=motion)


def _check_matching(real: FeatureBatch, fake: FeatureBatch) -> None:
    for name in ("x3d", "xcos", "x2d"):
        a, b = getattr(real, name), getattr(fake, name)
        if a.shape != b.shape:
            raise ShapeError(f"real/fake {name} shapes differ: {a.shape} vs {b.shape}")
    if (real.motion is None) != (fake.motion is None):
        raise ShapeError("real/fake batches disagree on motion streams")
    if real.motion is not None:
        for k in _MOTION_KEYS:
            if real.motion[k].shape != fake.motion[k].shape:
                raise ShapeError(f"real/fake motion {k} shapes differ")


def _interpolate(real: np.ndarray, fake: np.ndarray, eps: np.ndarray) -> np.ndarray:
    return eps * real + (1.0 - eps) * fake


def critic_loss(ds: FrameCritic, dm: Optional[MotionCritic], real: FeatureBatch,
                fake: FeatureBatch, alpha: float, gamma: int, rng: np.random.Generator,
                tape: Tape, ds_params: Optional[dict] = None,
                dm_params: Optional[dict] = None) -> Tensor:
    """Critic objective: E[D(fake)] - E[D(real)] + alpha * penalty, with the
    motion-critic terms gated by ``gamma``.

    Interpolates real and fake per sample with uniform weights for the
    penalty inputs.
    """
    _check_matching(real, fake)
    s_fake, _ = frame_score(ds, fake.x3d, fake.xcos, fake.x2d, tape, ds_params)
    s_real, _ = frame_score(ds, real.x3d, real.xcos, real.x2d, tape, ds_params)
    eps = rng.uniform(size=(real.x3d.shape[0], 1))
    pen = frame_penalty(ds, _interpolate(real.x3d, fake.x3d, eps),
                        _interpolate(real.xcos, fake.xcos, eps),
                        _interpolate(real.x2d, fake.x2d, eps), alpha, tape, ds_params)
    loss = ad.add(ad.sub(ad.mean(s_fake), ad.mean(s_real)), pen)
    if gamma and dm is not None:
        if real.motion is None:
            raise ShapeError("motion terms are on but the batches carry no motion streams")
        m_fake, _ = motion_score(dm, fake.motion, tape, dm_params)
        m_real, _ = motion_score(dm, real.motion, tape, dm_params)
        eps_m = rng.uniform(size=(real.motion["seq3d"].shape[0], 1))
        hat = {k: _interpolate(real.motion[k], fake.motion[k], eps_m) for k in _MOTION_KEYS}
        m_pen = motion_penalty(dm, hat, alpha, tape, dm_params)
        loss = ad.add(loss, ad.add(ad.sub(ad.mean(m_fake), ad.mean(m_real)), m_pen))
    return loss


def generator_loss(ds: FrameCritic, dm: Optional[MotionCritic], fake: TapeGenOutput,
                   gamma: int, tape: Tape) -> Tensor:
    """Adversarial complement: -E[D_s(fake)] - gamma * E[D_m(fake)]."""
    s, _ = frame_score(ds, fake.x3d, fake.xcos, fake.x2d, tape)
    loss = ad.neg(ad.mean(s))
    if gamma and dm is not None:
        if fake.motion is None:
            raise ShapeError("motion terms are on but the generator emitted no sequences")
        m, _ = motion_score(dm, fake.motion, tape)
        loss = ad.sub(loss, ad.mean(m))
    return loss


# --------------------------------------------------------------------------
# Training loop

@dataclass
class RealData:
    """Training corpus: single frames (N, 16, ...) or sequences (N, T, 16, ...)."""

    pose3d: np.ndarray
    pose2d: np.ndarray
    cams: np.ndarray  # (N, 5) fx fy cx cy z_min rows

    def __len__(self) -> int:
        return self.pose3d.shape[0]

    @property
    def video(self) -> bool:
        return self.pose3d.ndim == 4


@dataclass
class TrainState:
    config: TrainConfig
    gen: DhGenerator
    ds: FrameCritic
    dm: Optional[MotionCritic]
    pairs: AdjacentBonePairs
    adam_gen: nn.AdamState
    adam_ds: nn.AdamState
    adam_dm: Optional[nn.AdamState]
    rng: np.random.Generator
    epoch: int = 0


def init_train_state(config: TrainConfig,
                     topology: Optional[SkeletonTopology] = None,
                     table: Optional[ConstraintTable] = None,
                     camera: Optional[CameraIntrinsics] = None) -> TrainState:
    config.validate()
    rng = np.random.default_rng(config.seed)
    gen = build_generator(config, rng, topology, table, camera)
    pairs = adjacent_bone_pairs(gen.topology)
    n_pairs = len(pairs.pairs)
    ds = build_frame_critic(config, n_pairs, rng)
    dm = build_motion_critic(config, n_pairs, rng) if config.mode == "video" else None
    return TrainState(config=config, gen=gen, ds=ds, dm=dm, pairs=pairs,
                      adam_gen=nn.AdamState(lr=config.lr),
                      adam_ds=nn.AdamState(lr=config.lr),
                      adam_dm=nn.AdamState(lr=config.lr) if dm else None,
                      rng=rng)


def _abort_if_bad(value: float, what: str, state: TrainState, extra: dict):
    if not np.isfinite(value):
        snapshot = {"what": what, "value": float(value), "epoch": state.epoch, **extra}
        if state.config.out_dir:
            import os
            path = os.path.join(state.config.out_dir, "diverged.json")
            with open(path, "w") as fh:
                json.dump(snapshot, fh, indent=2)
        raise TrainingDivergedError(f"non-finite {what} at epoch {state.epoch}", snapshot)


def _real_minibatch(data: RealData, idx: np.ndarray, pairs: AdjacentBonePairs,
                    video: bool) -> FeatureBatch:
    p3 = data.pose3d[idx]
    p2 = data.pose2d[idx]
    cams = data.cams[idx]
    x3d, xcos, x2d = frame_streams(p3, p2, cams, pairs)
    motion = motion_streams(p3, p2, cams, pairs) if video else None
    return FeatureBatch(x3d=x3d, xcos=xcos, x2d=x2d, motion=motion)


def _fake_minibatch(state: TrainState, batch: int, pairs: AdjacentBonePairs,
                    video: bool) -> tuple[FeatureBatch, int]:
    z = sample_latent(batch, state.config.z_dim, state.rng)
    out = generate(state.gen, z)
    bad = count_violations(out.params.reshape(-1, N_PARAMS), state.gen.table)
    fb = feature_batch(out.pose3d, out.pose2d, state.gen.camera, pairs, video=video)
    return fb, bad


def critic_update(state: TrainState, real: FeatureBatch, fake: FeatureBatch,
                  gamma: int) -> dict:
    tape = Tape()
    ds_leaves = critic_leaves(tape, state.ds, "ds.")
    dm_leaves = critic_leaves(tape, state.dm, "dm.") if (gamma and state.dm) else None
    loss = critic_loss(state.ds, state.dm if gamma else None, real, fake,
                       state.config.alpha, gamma, state.rng, tape, ds_leaves, dm_leaves)
    _abort_if_bad(float(loss.values), "critic loss", state, {})
    ad.backward(tape, loss)
    new_ds, _ = nn.adam_step(state.adam_ds, {k: v.values for k, v in ds_leaves.items()},
                             nn.collect_grads(ds_leaves))
    critic_set_params(state.ds, new_ds, "ds.")
    if dm_leaves is not None:
        new_dm, _ = nn.adam_step(state.adam_dm, {k: v.values for k, v in dm_leaves.items()},
                                 nn.collect_grads(dm_leaves))
        critic_set_params(state.dm, new_dm, "dm.")
    # separation of the just-updated critic, for the epoch log
    tape2 = Tape()
    s_real, _ = frame_score(state.ds, real.x3d, real.xcos, real.x2d, tape2)
    s_fake, _ = frame_score(state.ds, fake.x3d, fake.xcos, fake.x2d, tape2)
    metrics = {"loss": float(loss.values),
               "d_gap": float(s_real.values.mean() - s_fake.values.mean())}
    return metrics


def generator_update(state: TrainState, batch: int, gamma: int) -> dict:
    tape = Tape()
    gen_leaves = nn.mlp_leaves(tape, state.gen.net, "gen.")
    z = sample_latent(batch, state.config.z_dim, state.rng)
    fake = generate_on_tape(state.gen, z, tape, gen_leaves, state.pairs)
    loss = generator_loss(state.ds, state.dm if gamma else None, fake, gamma, tape)
    _abort_if_bad(float(loss.values), "generator loss", state, {})
    ad.backward(tape, loss)
    new_params, _ = nn.adam_step(state.adam_gen,
                                 {k: v.values for k, v in gen_leaves.items()},
                                 nn.collect_grads(gen_leaves))
    nn.mlp_set_params(state.gen.net, new_params, "gen.")
    violations = count_violations(fake.params.values, state.gen.table)
    return {"gen_loss": float(loss.values), "violations": violations}


def train_epoch(state: TrainState, data: RealData, synth_dir: Optional[str] = None) -> dict:
    """One epoch: alternating critic/generator updates plus end-of-epoch synthesis.

    Synthesizes exactly as many pairs as the training corpus holds and writes
    them as a dataset file when ``synth_dir`` (or config.out_dir) is set.
    """
    if len(data) == 0:
        raise ValueError("training data is empty")
    cfg = state.config
    video = cfg.mode == "video"
    if video != data.video:
        raise ValueError(f"config mode {cfg.mode!r} does not match the data layout")
    gamma = gamma_schedule(state.epoch, cfg.beta_epoch) if video else 0
    batch = min(cfg.resolved_batch(), len(data))
    steps = max(1, len(data) // batch)
    d_gaps, pens, gen_losses = [], [], []
    violations = 0
    for _ in range(steps):
        for _ in range(cfg.critic_steps):
            idx = state.rng.integers(0, len(data), size=batch)
            real = _real_minibatch(data, idx, state.pairs, video)
            fake, bad = _fake_minibatch(state, batch, state.pairs, video)
            violations += bad
            m = critic_update(state, real, fake, gamma)
            d_gaps.append(m["d_gap"])
        g = generator_update(state, batch, gamma)
        violations += g["violations"]
        gen_losses.append(g["gen_loss"])
    # penalty magnitude at the end of the epoch, for the log
    idx = state.rng.integers(0, len(data), size=batch)
    real = _real_minibatch(data, idx, state.pairs, video)
    fake, _ = _fake_minibatch(state, batch, state.pairs, video)
    tape = Tape()
    eps = state.rng.uniform(size=(real.x3d.shape[0], 1))
    pen = frame_penalty(state.ds, _interpolate(real.x3d, fake.x3d, eps),
                        _interpolate(real.xcos, fake.xcos, eps),
                        _interpolate(real.x2d, fake.x2d, eps), cfg.alpha, tape)
    pens.append(float(pen.values))
    if gamma and state.dm is not None:
        eps_m = state.rng.uniform(size=(len(real.motion["seq3d"]), 1))
        hat = {k: _interpolate(real.motion[k], fake.motion[k], eps_m) for k in _MOTION_KEYS}
        motion_pen = float(motion_penalty(state.dm, hat, cfg.alpha, Tape()).values)
        tape3 = Tape()
        m_real, _ = motion_score(state.dm, real.motion, tape3)
        m_fake, _ = motion_score(state.dm, fake.motion, tape3)
        motion_gap = float(m_real.values.mean() - m_fake.values.mean())
    else:
        motion_pen = 0.0
        motion_gap = 0.0

    metrics = {
        "epoch": state.epoch,
        "gamma": gamma,
        "d_gap": float(np.mean(d_gaps)),
        "penalty": float(np.mean(pens)),
        "motion_gap": motion_gap,
        "motion_penalty": motion_pen,
        "gen_loss": float(np.mean(gen_losses)),
        "violations": int(violations),
        "steps": steps,
    }
    out_dir = synth_dir or cfg.out_dir
    if out_dir:
        from .dataset import synthesize_dataset

        import os
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, f"epoch_{state.epoch:03d}.txt")
        seed = int(state.rng.integers(0, 2 ** 31))
        summary = synthesize_dataset(state.gen, len(data), cfg.mode, seed, path)
        metrics["synth_count"] = summary.records
        metrics["synth_path"] = path
    state.epoch += 1
    return metrics


def save_generator(gen: DhGenerator, path, seed: int) -> None:
    from .skeleton import topology_hash

    nn.save_checkpoint(path, {"gen": gen.net}, seed,
                       extra={"mode": gen.mode, "frames": str(gen.frames),
                              "topology": topology_hash(gen.topology)})


def load_generator(path, topology: Optional[SkeletonTopology] = None,
                   table: Optional[ConstraintTable] = None,
                   camera: Optional[CameraIntrinsics] = None,
                   bounds: Optional[GlobalBounds] = None) -> DhGenerator:
    from .skeleton import topology_hash

    nets, _, extra = nn.load_checkpoint(path)
    topology = topology or default_topology()
    if "topology" in extra and extra["topology"] != topology_hash(topology):
        raise ValueError(f"checkpoint was trained against topology {extra['topology']}, "
                         f"not {topology_hash(topology)}")
    return DhGenerator(net=nets["gen"], topology=topology,
                       table=table or default_constraint_table(),
                       camera=camera or default_camera(),
                       mode=extra.get("mode", "single"), frames=int(extra.get("frames", "1")),
                       bounds=bounds or GlobalBounds())
