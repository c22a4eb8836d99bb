"""Persistence for pose-pair datasets, bulk synthesis, and skeleton-video export.

The native format is line-delimited text: one header line carrying the
format version and topology hash, then one record per line with a fixed
field order and reals printed to 13 significant digits.  A flat binary
variant (little-endian float32) exists for bulk synthesis.  Synthesis
streams batches to disk, so memory stays bounded no matter the count.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from .camera import CameraIntrinsics, project_pose
from .constraints import ConstraintTable, count_violations, default_constraint_table
from .skeleton import (N_PARAMS, SkeletonTopology, default_topology,
                       forward_kinematics_batch, topology_hash)

FORMAT_VERSION = "v1"
_HEADER_PREFIX = "# dhpose dataset"
_FLOATS_PER_RECORD = 1 + 2 + 5 + 48 + 32  # provenance code, ids, camera, pose3d, pose2d
_PROVENANCE_CODES = {"real": 0.0, "synthetic": 1.0}
_PROVENANCE_NAMES = {v: k for k, v in _PROVENANCE_CODES.items()}


class DatasetParseError(ValueError):
    def __init__(self, path, line_no: int, reason: str):
        self.line_no = line_no
        super().__init__(f"{path}: parse error at line {line_no}: {reason}")


@dataclass
class DatasetRecord:
    pose3d: np.ndarray  # (16, 3) meters, camera space
    pose2d: np.ndarray  # (16, 2) pixels
    camera: CameraIntrinsics
    sequence_id: int = 0
    frame_index: int = 0
    provenance: str = "synthetic"

    def __post_init__(self):
        if self.provenance not in _PROVENANCE_CODES:
            raise ValueError(f"provenance must be 'real' or 'synthetic', got {self.provenance!r}")


def _fmt(values) -> str:
    return " ".join(f"{v:.13g}" for v in values)


def _record_line(provenance: str, seq: int, frame: int, cam: CameraIntrinsics,
                 pose3d: np.ndarray, pose2d: np.ndarray) -> str:
    return (f"{provenance} {seq} {frame} {_fmt(cam.as_array())} "
            f"{_fmt(pose3d.ravel())} {_fmt(pose2d.ravel())}")


def _header(topology: Optional[SkeletonTopology]) -> str:
    h = topology_hash(topology or default_topology())
    return f"{_HEADER_PREFIX} {FORMAT_VERSION} topology={h}"


def save_dataset(records: Sequence[DatasetRecord], path,
                 topology: Optional[SkeletonTopology] = None) -> None:
    """Write records as line-delimited text; lossless to 13 significant digits."""
    with open(path, "w") as fh:
        fh.write(_header(topology) + "\n")
        for rec in records:
            fh.write(_record_line(rec.provenance, rec.sequence_id, rec.frame_index,
                                  rec.camera, np.asarray(rec.pose3d), np.asarray(rec.pose2d)) + "\n")


def _parse_header(path, line: str) -> str:
    if not line.startswith(_HEADER_PREFIX):
        raise DatasetParseError(path, 1, "missing dataset header")
    tok = line.split()
    if tok[3] != FORMAT_VERSION or not tok[4].startswith("topology="):
        raise DatasetParseError(path, 1, f"unsupported header {line!r}")
    return tok[4].split("=", 1)[1]


def _check_topology(path, file_hash: str, topology: Optional[SkeletonTopology]) -> None:
    if topology is None:
        return
    expected = topology_hash(topology)
    if file_hash != expected:
        warnings.warn(f"{path}: dataset topology {file_hash} differs from expected {expected}")


def iter_dataset(path, topology: Optional[SkeletonTopology] = None) -> Iterator[DatasetRecord]:
    """Stream records from a text dataset file."""
    with open(path) as fh:
        first = fh.readline().rstrip("\n")
        _check_topology(path, _parse_header(path, first), topology)
        for line_no, raw in enumerate(fh, start=2):
            line = raw.strip()
            if not line:
                continue
            tok = line.split()
            if len(tok) != 3 + 5 + 48 + 32:
                raise DatasetParseError(path, line_no, f"expected 88 fields, got {len(tok)}")
            if tok[0] not in _PROVENANCE_CODES:
                raise DatasetParseError(path, line_no, f"bad provenance {tok[0]!r}")
            try:
                seq, frame = int(tok[1]), int(tok[2])
                values = np.array([float(t) for t in tok[3:]])
            except ValueError as exc:
                raise DatasetParseError(path, line_no, str(exc)) from exc
            yield DatasetRecord(pose3d=values[5:53].reshape(16, 3),
                                pose2d=values[53:85].reshape(16, 2),
                                camera=CameraIntrinsics.from_array(values[0:5]),
                                sequence_id=seq, frame_index=frame, provenance=tok[0])


def load_dataset(path, topology: Optional[SkeletonTopology] = None) -> list[DatasetRecord]:
    return list(iter_dataset(path, topology))


def save_dataset_binary(records: Sequence[DatasetRecord], path,
                        topology: Optional[SkeletonTopology] = None) -> None:
    rows = np.empty((len(records), _FLOATS_PER_RECORD), dtype="<f4")
    for i, rec in enumerate(records):
        rows[i] = _record_row(rec.provenance, rec.sequence_id, rec.frame_index,
                              rec.camera, rec.pose3d, rec.pose2d)
    with open(path, "wb") as fh:
        fh.write((_header(topology) + "\n").encode())
        fh.write(f"binary {len(records)} {_FLOATS_PER_RECORD}\n".encode())
        fh.write(rows.tobytes())


def _record_row(provenance, seq, frame, cam, pose3d, pose2d) -> np.ndarray:
    row = np.empty(_FLOATS_PER_RECORD, dtype="<f4")
    row[0] = _PROVENANCE_CODES[provenance]
    row[1], row[2] = seq, frame
    row[3:8] = cam.as_array()
    row[8:56] = np.asarray(pose3d).ravel()
    row[56:88] = np.asarray(pose2d).ravel()
    return row


def load_dataset_binary(path, topology: Optional[SkeletonTopology] = None) -> list[DatasetRecord]:
    records = []
    with open(path, "rb") as fh:
        first = fh.readline().decode().rstrip("\n")
        _check_topology(path, _parse_header(path, first), topology)
        meta = fh.readline().decode().split()
        if meta[0] != "binary":
            raise DatasetParseError(path, 2, "missing binary marker")
        count, width = int(meta[1]), int(meta[2])
        blob = fh.read(count * width * 4)
        if len(blob) != count * width * 4:
            raise DatasetParseError(path, 2, f"binary payload truncated: expected "
                                             f"{count * width * 4} bytes, got {len(blob)}")
        rows = np.frombuffer(blob, dtype="<f4").reshape(count, width)
    for row in rows.astype(np.float64):
        records.append(DatasetRecord(
            pose3d=row[8:56].reshape(16, 3), pose2d=row[56:88].reshape(16, 2),
            camera=CameraIntrinsics.from_array(row[3:8]),
            sequence_id=int(row[1]), frame_index=int(row[2]),
            provenance=_PROVENANCE_NAMES[float(row[0])]))
    return records


# --------------------------------------------------------------------------
# Synthesis

@dataclass
class SynthSummary:
    records: int
    sequences: int
    violations: int
    resampled: int
    seconds: float
    path: str


def synthesize_dataset(gen, count: int, mode: str, seed: int, path,
                       fmt: str = "text", batch: int = 2048) -> SynthSummary:
    """Generate ``count`` pose pairs (or sequences in video mode) to disk.

    Batches stream straight to the file, so memory use is bounded by the
    batch size.  Samples whose projection would cross the near plane are
    dropped and redrawn from the same latent stream, which keeps runs with
    equal seeds bitwise identical.  Every written record is checked against
    the constraint table and for 2D/3D projection consistency.
    """
    from .gan import generate_poses, sample_latent

    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if mode != gen.mode:
        raise ValueError(f"generator is a {gen.mode!r} model; requested {mode!r}")
    if fmt not in ("text", "binary"):
        raise ValueError(f"format must be 'text' or 'binary', got {fmt!r}")
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    frames = gen.frames if mode == "video" else 1
    cam_row = gen.camera.as_array()
    violations = 0
    resampled = 0
    written = 0  # sequences in video mode, records otherwise
    binary = fmt == "binary"
    with open(path, "wb" if binary else "w") as fh:
        header = _header(gen.topology)
        if binary:
            fh.write((header + "\n").encode())
            fh.write(f"binary {count * frames} {_FLOATS_PER_RECORD}\n".encode())
        else:
            fh.write(header + "\n")
        empty_rounds = 0
        while written < count:
            n = min(batch, count - written)
            z = sample_latent(n, gen.net.in_dim, rng)
            all_params, _, all_pose3d = generate_poses(gen, z)
            flat3d = all_pose3d.reshape(n, -1, 3)
            ok = np.all(flat3d[:, :, 2] >= gen.camera.z_min, axis=1)
            keep = np.flatnonzero(ok)
            resampled += n - keep.size
            empty_rounds = empty_rounds + 1 if keep.size == 0 else 0
            if empty_rounds >= 50:
                raise RuntimeError(
                    f"no sample cleared the near plane in {empty_rounds} consecutive "
                    f"batches; the translation bounds cannot reach z_min={gen.camera.z_min}")
            params = all_params.reshape(n, -1, N_PARAMS)[keep]
            pose3d = all_pose3d[keep]
            pose2d = project_pose(pose3d, gen.camera)
            violations += count_violations(params.reshape(-1, N_PARAMS), gen.table)
            k = keep.size
            if k == 0:
                continue
            if mode == "video":
                seq_ids = np.repeat(np.arange(written, written + k), frames)
                frame_ids = np.tile(np.arange(frames), k)
                p3 = pose3d.reshape(k * frames, 16, 3)
                p2 = pose2d.reshape(k * frames, 16, 2)
            else:
                seq_ids = np.arange(written, written + k)
                frame_ids = np.zeros(k, dtype=int)
                p3 = pose3d
                p2 = pose2d
            if binary:
                rows = np.empty((len(p3), _FLOATS_PER_RECORD), dtype="<f4")
                rows[:, 0] = _PROVENANCE_CODES["synthetic"]
                rows[:, 1] = seq_ids
                rows[:, 2] = frame_ids
                rows[:, 3:8] = cam_row
                rows[:, 8:56] = p3.reshape(len(p3), 48)
                rows[:, 56:88] = p2.reshape(len(p3), 32)
                fh.write(rows.tobytes())
            else:
                lines = []
                for i in range(len(p3)):
                    lines.append(_record_line("synthetic", int(seq_ids[i]), int(frame_ids[i]),
                                              gen.camera, p3[i], p2[i]))
                fh.write("\n".join(lines) + "\n")
            written += k
    return SynthSummary(records=count * frames, sequences=count if mode == "video" else 0,
                        violations=violations, resampled=resampled,
                        seconds=time.perf_counter() - t0, path=str(path))


# --------------------------------------------------------------------------
# Skeleton-video export

def export_skeleton_video(sequence, path, topology: Optional[SkeletonTopology] = None) -> None:
    """Frame-by-frame keypoints plus the bone edges, for external plotting."""
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.ndim != 3 or seq.shape[0] < 1:
        raise ValueError(f"expected a non-empty (T, K, 3) sequence, got {seq.shape}")
    topo = topology or default_topology()
    lines = [f"# dhpose skeleton-video v1 topology={topology_hash(topo)} "
             f"frames={seq.shape[0]} keypoints={seq.shape[1]}"]
    for parent, child in topo.bone_list:
        lines.append(f"edge {parent} {child}")
    for t, frame in enumerate(seq):
        lines.append(f"frame {t}")
        for kp, (x, y, z) in enumerate(frame):
            lines.append(f"kp {kp} {x:.13g} {y:.13g} {z:.13g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_skeleton_video(path) -> tuple[np.ndarray, list[tuple[int, int]]]:
    edges = []
    frames: list[list] = []
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            if tok[0] == "edge":
                edges.append((int(tok[1]), int(tok[2])))
            elif tok[0] == "frame":
                frames.append([])
            elif tok[0] == "kp":
                frames[-1].append([float(tok[2]), float(tok[3]), float(tok[4])])
    return np.asarray(frames), edges


# --------------------------------------------------------------------------
# Stand-in training corpus (no mocap dependency)

def make_band_corpus(count: int, seed: int,
                     topology: Optional[SkeletonTopology] = None,
                     table: Optional[ConstraintTable] = None,
                     camera: Optional[CameraIntrinsics] = None,
                     mode: str = "single", frames: int = 1, band: float = 0.05):
    """Poses drawn from a narrow band around the mid-range configuration.

    Serves as a stand-in "real" distribution for smoke training: plausible,
    low-variance, and entirely synthetic.  Returns a ``gan.RealData``.
    """
    from .gan import RealData

    topology = topology or default_topology()
    table = table or default_constraint_table()
    camera = camera or CameraIntrinsics()
    rng = np.random.default_rng(seed)
    mid = (table.lo + table.hi) / 2.0
    width = (table.hi - table.lo) * band
    n_frames = frames if mode == "video" else 1
    n = count * n_frames
    params = mid + width * rng.uniform(-0.5, 0.5, size=(n, N_PARAMS))
    globals_ = np.zeros((n, 6))
    globals_[:, 1] = rng.uniform(-0.3, 0.3, n)       # mild turn
    globals_[:, 3] = rng.uniform(-0.2, 0.2, n)
    globals_[:, 4] = rng.uniform(-0.2, 0.2, n)
    globals_[:, 5] = 4.5 + rng.uniform(-0.2, 0.2, n)  # comfortably past the near plane
    pose3d = forward_kinematics_batch(topology, params, globals_)
    pose2d = project_pose(pose3d, camera)
    cams = np.tile(camera.as_array(), (count, 1))
    if mode == "video":
        pose3d = pose3d.reshape(count, n_frames, 16, 3)
        pose2d = pose2d.reshape(count, n_frames, 16, 2)
    return RealData(pose3d=pose3d, pose2d=pose2d, cams=cams)


def real_data_to_records(data, provenance: str = "real") -> list[DatasetRecord]:
    """Flatten a ``gan.RealData`` into dataset records."""
    records = []
    if data.video:
        for s in range(len(data)):
            cam = CameraIntrinsics.from_array(data.cams[s])
            for t in range(data.pose3d.shape[1]):
                records.append(DatasetRecord(pose3d=data.pose3d[s, t], pose2d=data.pose2d[s, t],
                                             camera=cam, sequence_id=s, frame_index=t,
                                             provenance=provenance))
    else:
        for s in range(len(data)):
            records.append(DatasetRecord(pose3d=data.pose3d[s], pose2d=data.pose2d[s],
                                         camera=CameraIntrinsics.from_array(data.cams[s]),
                                         sequence_id=s, frame_index=0, provenance=provenance))
    return records


def real_data_from_dataset(path, mode: str = "single", frames: int = 1):
    """Load a dataset file into training arrays (grouping frames by sequence)."""
    from .gan import RealData

    records = load_dataset(path)
    if not records:
        raise ValueError(f"{path}: dataset is empty")
    if mode == "single":
        pose3d = np.stack([r.pose3d for r in records])
        pose2d = np.stack([r.pose2d for r in records])
        cams = np.stack([r.camera.as_array() for r in records])
        return RealData(pose3d=pose3d, pose2d=pose2d, cams=cams)
    by_seq: dict[int, list[DatasetRecord]] = {}
    for r in records:
        by_seq.setdefault(r.sequence_id, []).append(r)
    seqs3, seqs2, cams = [], [], []
    for seq_id in sorted(by_seq):
        group = sorted(by_seq[seq_id], key=lambda r: r.frame_index)
        if len(group) < frames:
            continue
        group = group[:frames]
        seqs3.append(np.stack([r.pose3d for r in group]))
        seqs2.append(np.stack([r.pose2d for r in group]))
        cams.append(group[0].camera.as_array())
    if not seqs3:
        raise ValueError(f"{path}: no sequences of length {frames} found")
    return RealData(pose3d=np.stack(seqs3), pose2d=np.stack(seqs2), cams=np.stack(cams))
