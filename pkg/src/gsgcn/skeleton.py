"""Pose-track ingestion and assembly of the per-person model inputs.

Pose files are UTF-8 JSON lines. An optional first line
``{"type": "header", "image_width": W, "image_height": H, "num_keypoints": K}``
is followed by one object per (video, frame, person)::

    {"video_id": str, "frame": int, "track_id": int, "bbox": [x, y, w, h],
     "keypoints": [[x, y, c], ...K], "action": int | null, "score": float?}
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPEED_INTERVAL = 3
SATURATION_DISTANCE = 10.0
# centers are snapped to this dyadic grid so that integer pixel shifts cancel exactly
_CENTER_GRID = 1024.0


class PoseFormatError(ValueError):
    """Malformed pose file; the message names the offending line."""


@dataclass
class FramePose:
    frame_index: int
    bbox: tuple[float, float, float, float]
    keypoints: np.ndarray  # (K, 3): x, y, confidence
    action_label: int | None = None
    score: float | None = None


@dataclass
class PersonTrack:
    track_id: int
    frames: list[FramePose] = field(default_factory=list)
    video_id: str = ""

    @property
    def frame_indices(self) -> list[int]:
        return [f.frame_index for f in self.frames]


@dataclass
class PoseHeader:
    image_width: int | None = None
    image_height: int | None = None
    num_keypoints: int | None = None


@dataclass
class PoseDocument:
    header: PoseHeader
    tracks: list[PersonTrack]

    def videos(self) -> dict[str, list[PersonTrack]]:
        out: dict[str, list[PersonTrack]] = {}
        for t in self.tracks:
            out.setdefault(t.video_id, []).append(t)
        return out


@dataclass
class GroupSample:
    persons: np.ndarray  # (M, T, K, 3) raw pixel keypoints, zero-filled when absent
    present_mask: np.ndarray  # (M,) bool
    window: tuple[int, int]  # (start_frame, T)
    label: int | None
    track_ids: list[int | None] = field(default_factory=list)
    distances: list[float] = field(default_factory=list)


# ---------------------------------------------------------------- parsing


def read_pose_document(data: bytes | str, num_keypoints: int | None = None) -> PoseDocument:
    """Parse a pose file into its header and tracks grouped by (video_id, track_id)."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    header = PoseHeader()
    tracks: dict[tuple[str, int], PersonTrack] = {}
    seen: set[tuple[str, int, int]] = set()
    K = num_keypoints
    first = True
    for lineno, line in enumerate(data.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise PoseFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
        if first and rec.get("type") == "header":
            header = PoseHeader(
                rec.get("image_width"), rec.get("image_height"), rec.get("num_keypoints")
            )
            if K is None:
                K = header.num_keypoints
            elif header.num_keypoints is not None and header.num_keypoints != K:
                raise PoseFormatError(
                    f"line {lineno}: header declares {header.num_keypoints} keypoints, expected {K}"
                )
            first = False
            continue
        first = False
        try:
            vid = str(rec.get("video_id", ""))
            frame = int(rec["frame"])
            tid = int(rec["track_id"])
            kps = np.asarray(rec["keypoints"], dtype=np.float64)
            bbox = tuple(float(v) for v in rec["bbox"])
        except (KeyError, TypeError, ValueError) as exc:
            raise PoseFormatError(f"line {lineno}: malformed record ({exc})") from None
        if kps.ndim != 2 or kps.shape[1] != 3:
            raise PoseFormatError(f"line {lineno}: keypoints must be [x, y, c] triples")
        if K is None:
            K = kps.shape[0]
        if kps.shape[0] != K:
            raise PoseFormatError(f"line {lineno}: expected {K} keypoints, got {kps.shape[0]}")
        if len(bbox) != 4 or bbox[2] <= 0 or bbox[3] <= 0:
            raise PoseFormatError(f"line {lineno}: bbox must be [x, y, w, h] with w, h > 0")
        if np.any((kps[:, 2] < 0) | (kps[:, 2] > 1)):
            raise PoseFormatError(f"line {lineno}: confidence outside [0, 1]")
        key = (vid, tid, frame)
        if key in seen:
            raise PoseFormatError(f"line {lineno}: duplicate frame {frame} for track {tid}")
        seen.add(key)
        action = rec.get("action")
        score = rec.get("score")
        tracks.setdefault((vid, tid), PersonTrack(tid, [], vid)).frames.append(
            FramePose(frame, bbox, kps, None if action is None else int(action),
                      None if score is None else float(score))
        )
    for t in tracks.values():
        t.frames.sort(key=lambda f: f.frame_index)
    ordered = sorted(tracks.values(), key=lambda t: (t.video_id, t.track_id))
    return PoseDocument(header, ordered)


def parse_pose_file(data: bytes | str, num_keypoints: int | None = None) -> list[PersonTrack]:
    return read_pose_document(data, num_keypoints).tracks


def load_pose_file(path, num_keypoints: int | None = None) -> PoseDocument:
    return read_pose_document(Path(path).read_bytes(), num_keypoints)


def write_pose_file(path, tracks: Iterable[PersonTrack], header: PoseHeader | None = None) -> None:
    lines = []
    if header is not None:
        lines.append(json.dumps({
            "type": "header", "image_width": header.image_width,
            "image_height": header.image_height, "num_keypoints": header.num_keypoints,
        }))
    records = []
    for t in tracks:
        for f in t.frames:
            rec = {
                "video_id": t.video_id,
                "frame": f.frame_index,
                "track_id": t.track_id,
                "bbox": [round(v, 2) for v in f.bbox],
                "keypoints": [[round(float(x), 2), round(float(y), 2), round(float(c), 3)]
                              for x, y, c in f.keypoints],
                "action": f.action_label,
            }
            if f.score is not None:
                rec["score"] = f.score
            records.append(((t.video_id, f.frame_index, t.track_id), rec))
    records.sort(key=lambda r: r[0])
    lines.extend(json.dumps(r, separators=(",", ":")) for _, r in records)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- boxes


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two ``(x, y, w, h)`` boxes."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def match_detections_to_gt(detections, ground_truths, threshold: float = 0.3) -> list[tuple[int, int]]:
    """Greedy one-to-one matching in descending IoU order, dropping pairs below ``threshold``."""
    pairs = []
    for i, d in enumerate(detections):
        for j, g in enumerate(ground_truths):
            v = iou(d, g)
            if v >= threshold:
                pairs.append((-v, i, j))
    pairs.sort()
    used_d, used_g, out = set(), set(), []
    for _, i, j in pairs:
        if i in used_d or j in used_g:
            continue
        used_d.add(i)
        used_g.add(j)
        out.append((i, j))
    return out


# ---------------------------------------------------------------- grouping


def align_track(track: PersonTrack, start: int, T: int, K: int) -> np.ndarray:
    """(T, K, 3) keypoints for frames ``start .. start+T-1``; absent frames are zeros."""
    out = np.zeros((T, K, 3))
    for f in track.frames:
        t = f.frame_index - start
        if 0 <= t < T:
            out[t] = f.keypoints
    return out


def pose_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean keypoint distance over (frame, joint) pairs valid in both poses; ``inf`` if none."""
    valid = (a[..., 2] > 0) & (b[..., 2] > 0)
    if not valid.any():
        return math.inf
    diff = a[..., :2][valid] - b[..., :2][valid]
    return float(np.sqrt((diff**2).sum(axis=-1)).mean())


def _window_label(track: PersonTrack, start: int, T: int) -> int | None:
    labels = [f.action_label for f in track.frames
              if start <= f.frame_index < start + T and f.action_label is not None]
    if not labels:
        return None
    counts = Counter(labels)
    best = max(counts.values())
    return min(l for l, c in counts.items() if c == best)


def select_group(
    reference: PersonTrack,
    all_tracks: Sequence[PersonTrack],
    window: tuple[int, int],
    M: int,
    K: int | None = None,
) -> GroupSample:
    """Reference person plus its ``M - 1`` nearest neighbours over ``window = (start, T)``."""
    if M < 1:
        raise ValueError("M must be >= 1")
    start, T = window
    if K is None:
        K = reference.frames[0].keypoints.shape[0]
    ref = align_track(reference, start, T, K)
    if not (ref[..., 2] > 0).any():
        raise ValueError(
            f"reference track {reference.track_id} is absent from frames {start}..{start + T - 1}"
        )
    cands = []
    for t in all_tracks:
        if t is reference or (t.track_id == reference.track_id and t.video_id == reference.video_id):
            continue
        if t.video_id != reference.video_id:
            continue
        arr = align_track(t, start, T, K)
        d = pose_distance(ref, arr)
        if math.isfinite(d):
            cands.append((d, t.track_id, arr))
    cands.sort(key=lambda c: (c[0], c[1]))
    chosen = cands[: M - 1]
    persons = np.zeros((M, T, K, 3))
    persons[0] = ref
    present = np.zeros(M, dtype=bool)
    present[0] = True
    ids: list[int | None] = [reference.track_id] + [None] * (M - 1)
    dists = [0.0] + [math.inf] * (M - 1)
    for slot, (d, tid, arr) in enumerate(chosen, start=1):
        persons[slot] = arr
        present[slot] = True
        ids[slot] = tid
        dists[slot] = d
    return GroupSample(persons, present, (start, T), _window_label(reference, start, T), ids, dists)


# ---------------------------------------------------------------- tensors


def scene_scale(doc: PoseDocument, tracks: Sequence[PersonTrack] | None = None) -> float:
    """Image diagonal from the header, else the 95th percentile of bbox diagonals."""
    h = doc.header
    if h.image_width and h.image_height:
        return math.hypot(h.image_width, h.image_height)
    diags = [math.hypot(f.bbox[2], f.bbox[3]) for t in (tracks or doc.tracks) for f in t.frames]
    if not diags:
        raise ValueError("cannot infer scene scale without header or boxes")
    return float(np.percentile(diags, 95))


def compute_speed(coords: np.ndarray, d: int = SPEED_INTERVAL, confidence: np.ndarray | None = None) -> np.ndarray:
    """``v(t) = p(t) - p(t - d)`` on a (2, T, K) array; zero for ``t < d`` or missing endpoints."""
    if d < 1:
        raise ValueError("frame interval must be >= 1")
    v = np.zeros_like(coords)
    if coords.shape[1] > d:
        v[:, d:] = coords[:, d:] - coords[:, :-d]
        if confidence is not None:
            ok = (confidence[d:] > 0) & (confidence[:-d] > 0)
            v[:, d:] *= ok
    return v


def _reference_center(ref: np.ndarray) -> np.ndarray:
    valid = ref[..., 2] > 0
    c = ref[..., :2][valid].mean(axis=0)
    return np.round(c * _CENTER_GRID) / _CENTER_GRID


def assemble_input(sample: GroupSample, scale: float, with_speed: bool = True,
                   d: int = SPEED_INTERVAL) -> np.ndarray:
    """(M, C_in, T, K) float32 input; channels are x, y, c and (optionally) vx, vy.

    Coordinates are centered on the reference's mean valid keypoint and divided
    by ``scale``; missing keypoints and absent persons are zero.
    """
    M, T, K, _ = sample.persons.shape
    center = _reference_center(sample.persons[0])
    C = 5 if with_speed else 3
    out = np.zeros((M, C, T, K))
    for m in range(M):
        if not sample.present_mask[m]:
            continue
        p = sample.persons[m]
        conf = p[..., 2]
        valid = conf > 0
        xy = ((p[..., :2] - center) / scale).transpose(2, 0, 1) * valid
        out[m, 0:2] = xy
        out[m, 2] = conf
        if with_speed:
            out[m, 3:5] = compute_speed(xy, d, conf)
    return out.astype(np.float32)


def compute_distance_tensor(reference: np.ndarray, other: np.ndarray,
                            d_max: float = SATURATION_DISTANCE) -> np.ndarray:
    """(1, T/2, K) keypoint distances at even frames from (>=3, T, K) assembled inputs."""
    T = reference.shape[1]
    if T % 2:
        raise ValueError("T must be even")
    r = reference[:, 0:T:2].astype(np.float64)
    o = other[:, 0:T:2].astype(np.float64)
    dist = np.sqrt((r[0] - o[0]) ** 2 + (r[1] - o[1]) ** 2)
    dist[(r[2] <= 0) | (o[2] <= 0)] = d_max
    return dist[None].astype(np.float32)


def distance_tensors(z: np.ndarray, d_max: float = SATURATION_DISTANCE) -> np.ndarray:
    """(M, 1, T/2, K) distance tensors of every slot to slot 0 (slot 0 itself is all zeros)."""
    M, _, T, K = z.shape
    out = np.empty((M, 1, T // 2, K), dtype=np.float32)
    out[0] = 0.0
    for m in range(1, M):
        out[m] = compute_distance_tensor(z[0], z[m], d_max)
    return out


@dataclass
class SampleSet:
    """Stacked model inputs for a list of samples."""

    inputs: np.ndarray  # (N, M, C_in, T, K)
    distances: np.ndarray  # (N, M, 1, T/2, K)
    present: np.ndarray  # (N, M) bool
    labels: np.ndarray  # (N,) int, -1 when unlabeled
    refs: list[tuple[str, int, int]] = field(default_factory=list)  # (video, track, start)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx)
        return SampleSet(self.inputs[idx], self.distances[idx], self.present[idx],
                         self.labels[idx], [self.refs[i] for i in idx])


def build_sample_set(
    doc: PoseDocument,
    T: int,
    M: int,
    with_speed: bool = True,
    references: str = "first",
    K: int | None = None,
) -> SampleSet:
    """One sample per (video, reference track, T-frame window starting at the video's first frame).

    ``references="first"`` uses the lowest labelled track id per video, ``"all"``
    every labelled track.
    """
    inputs, dists, present, labels, refs = [], [], [], [], []
    for vid, tracks in doc.videos().items():
        scale = scene_scale(doc, tracks)
        start = min(t.frames[0].frame_index for t in tracks)
        labelled = [t for t in tracks if _window_label(t, start, T) is not None]
        if references == "first":
            labelled = labelled[:1]
        for ref in labelled:
            if not any(start <= f.frame_index < start + T for f in ref.frames):
                continue
            g = select_group(ref, tracks, (start, T), M, K)
            z = assemble_input(g, scale, with_speed)
            inputs.append(z)
            dists.append(distance_tensors(z))
            present.append(g.present_mask)
            labels.append(g.label)
            refs.append((vid, ref.track_id, start))
    if not inputs:
        raise ValueError("no labelled samples found")
    return SampleSet(np.stack(inputs), np.stack(dists), np.stack(present), np.asarray(labels), refs)
