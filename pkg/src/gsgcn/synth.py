"""Deterministic multi-person skeleton scenes whose labels depend on group geometry.

Six classes: stand, walk and run are decidable from the reference person
alone; gather, queue and fight reuse the reference motion of walk, stand and
(fast, oscillatory) movement respectively, so only the other persons reveal
the label.
"""

from __future__ import annotations

import configparser
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .skeleton import FramePose, PersonTrack, PoseHeader, write_pose_file

CLASS_NAMES = ("stand", "walk", "run", "gather", "queue", "fight")
GROUP_CLASSES = frozenset({3, 4, 5})
CANVAS = (1920, 1080)
NUM_KEYPOINTS = 14

# crowdpose14 joint order, pelvis at the origin, y pointing down (pixels)
TEMPLATE = np.array([
    (-22, -60), (22, -60), (-26, -30), (26, -30), (-28, 0), (28, 0),
    (-12, 0), (12, 0), (-13, 45), (13, 45), (-14, 90), (14, 90),
    (0, -95), (0, -65),
], dtype=np.float64)

# per-joint weight of the limb swing: wrists/ankles full, elbows/knees half, sign by side
_SWING = np.zeros(NUM_KEYPOINTS)
_SWING[[2, 4]] = [0.5, 1.0]
_SWING[[3, 5]] = [-0.5, -1.0]
_SWING[[8, 10]] = [-0.5, -1.0]
_SWING[[9, 11]] = [0.5, 1.0]

WALK_SPEED = (1.5, 3.0)
RUN_SPEED = (6.0, 9.0)


@dataclass
class _Actor:
    root: np.ndarray  # (T, 2) pelvis trajectory
    swing_amp: float = 0.0
    swing_freq: float = 0.0
    swing_axis: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0]))
    punch_amp: float = 0.0
    punch_freq: float = 0.0
    label: int | None = None


def _unit(angle: float) -> np.ndarray:
    return np.array([math.cos(angle), math.sin(angle)])


def _center(rng) -> np.ndarray:
    return np.array([rng.uniform(560, 1360), rng.uniform(400, 680)])


def _linear(start, velocity, T) -> np.ndarray:
    return start + np.arange(T)[:, None] * velocity


def _walker(rng, start, direction, speed, T, label, fast=False) -> _Actor:
    return _Actor(
        _linear(start, direction * speed, T),
        swing_amp=rng.uniform(14, 20) if fast else rng.uniform(7, 11),
        swing_freq=rng.uniform(0.45, 0.6) if fast else rng.uniform(0.2, 0.3),
        swing_axis=np.array([math.copysign(1.0, direction[0] or 1.0), 0.0]),
        label=label,
    )


def _standing(start, T, label) -> _Actor:
    return _Actor(np.repeat(start[None], T, axis=0), label=label)


def _around(rng, origin, lo, hi) -> np.ndarray:
    return origin + _unit(rng.uniform(0, 2 * math.pi)) * rng.uniform(lo, hi)


def _scene_actors(class_id: int, P: int, T: int, rng) -> list[_Actor]:
    c = _center(rng)
    if class_id == 0:  # stand: everyone still, neighbours well apart
        return [_standing(c, T, 0)] + [_standing(_around(rng, c, 200, 500), T, 0) for _ in range(P - 1)]
    if class_id in (1, 2):  # walk / run: independent directions
        fast = class_id == 2
        speed = RUN_SPEED if fast else WALK_SPEED
        actors = []
        for k in range(P):
            start = c if k == 0 else _around(rng, c, 200, 500)
            actors.append(_walker(rng, start, _unit(rng.uniform(0, 2 * math.pi)),
                                  rng.uniform(*speed), T, class_id, fast))
        return actors
    if class_id == 3:  # gather: converge on a common point at walking speed
        actors = []
        base = rng.uniform(0, 2 * math.pi)
        for k in range(P):
            ang = base + 2 * math.pi * k / P + rng.uniform(-0.3, 0.3)
            radius = rng.uniform(220, 350)
            start = c + _unit(ang) * radius
            speed = min(rng.uniform(*WALK_SPEED), 0.6 * radius / max(T - 1, 1))
            actors.append(_walker(rng, start, -_unit(ang), speed, T, 3))
        # the reference walks like any walker; re-centre so its start is the scene centre
        shift = c - actors[0].root[0]
        for a in actors:
            a.root = a.root + shift
        return actors
    if class_id == 4:  # queue: still persons on a line at near-constant gaps
        axis = _unit(rng.uniform(-0.35, 0.35))
        gap = rng.uniform(60, 90)
        ref_slot = int(rng.integers(P))
        offsets = np.cumsum([0.0] + [gap + rng.uniform(-5, 5) for _ in range(P - 1)])
        offsets -= offsets[ref_slot]
        starts = [c + axis * o for o in offsets]
        order = [ref_slot] + [i for i in range(P) if i != ref_slot]
        return [_standing(starts[i], T, 4) for i in order]
    if class_id == 5:  # fight: a pair lunging toward/away in antiphase, bystanders still
        axis = _unit(rng.uniform(0, 2 * math.pi))
        gap = rng.uniform(70, 110)
        amp = rng.uniform(12, 20)
        freq = rng.uniform(0.5, 0.8)
        phase = rng.uniform(0, 2 * math.pi)
        osc = amp * np.sin(freq * np.arange(T) + phase)[:, None]
        a = _Actor(c + osc * axis, punch_amp=rng.uniform(10, 16), punch_freq=freq,
                   swing_axis=axis, label=5)
        b = _Actor(c + gap * axis - osc * axis, punch_amp=rng.uniform(10, 16), punch_freq=freq,
                   swing_axis=-axis, label=5)
        rest = [_standing(_around(rng, c, 250, 450), T, None) for _ in range(P - 2)]
        return [a, b] + rest
    raise ValueError(f"unknown class id {class_id}; expected 0..{len(CLASS_NAMES) - 1}")


def _render(actor: _Actor, T: int, rng, noise_sigma: float, drop_rate: float) -> np.ndarray:
    scale = rng.uniform(0.9, 1.1)
    phase = rng.uniform(0, 2 * math.pi)
    t = np.arange(T)
    kp = actor.root[:, None, :] + scale * TEMPLATE[None]
    if actor.swing_amp:
        s = actor.swing_amp * np.sin(actor.swing_freq * t + phase)
        kp += s[:, None, None] * _SWING[None, :, None] * actor.swing_axis
    if actor.punch_amp:
        s = actor.punch_amp * np.maximum(np.sin(actor.punch_freq * t + phase), 0)
        kp[:, [4, 5]] += s[:, None, None] * actor.swing_axis
        kp[:, [2, 3]] += 0.5 * s[:, None, None] * actor.swing_axis
    if noise_sigma:
        kp += rng.normal(0, noise_sigma, size=kp.shape)
    conf = np.repeat(rng.uniform(0.7, 1.0, size=(1, NUM_KEYPOINTS)), T, axis=0)
    if drop_rate:
        conf[rng.random((T, NUM_KEYPOINTS)) < drop_rate] = 0.0
    kp[conf == 0] = 0.0
    return np.concatenate([kp, conf[..., None]], axis=-1)


def _bbox(kp: np.ndarray) -> tuple[float, float, float, float]:
    valid = kp[:, 2] > 0
    pts = kp[valid, :2] if valid.any() else np.zeros((1, 2))
    lo, hi = pts.min(axis=0) - 10, pts.max(axis=0) + 10
    return (float(lo[0]), float(lo[1]), float(hi[0] - lo[0]), float(hi[1] - lo[1]))


def generate_scene(class_id: int, num_persons: int = 3, T: int = 64, K: int = NUM_KEYPOINTS,
                   noise_sigma: float = 1.5, seed: int | np.random.SeedSequence = 0,
                   drop_rate: float = 0.02, video_id: str = "") -> list[PersonTrack]:
    """Render one labelled scene as pixel-space tracks; track 0 is the reference."""
    if not 0 <= class_id < len(CLASS_NAMES):
        raise ValueError(f"unknown class id {class_id}; expected 0..{len(CLASS_NAMES) - 1}")
    if K != NUM_KEYPOINTS:
        raise ValueError(f"the synthetic template has {NUM_KEYPOINTS} keypoints, not {K}")
    min_p = 2 if class_id in GROUP_CLASSES else 1
    if num_persons < min_p:
        raise ValueError(f"class {CLASS_NAMES[class_id]} needs at least {min_p} persons")
    rng = np.random.default_rng(seed)
    actors = _scene_actors(class_id, num_persons, T, rng)
    tracks = []
    for tid, actor in enumerate(actors):
        kp = _render(actor, T, rng, noise_sigma, drop_rate)
        frames = [FramePose(t, _bbox(kp[t]), kp[t], actor.label) for t in range(T)]
        tracks.append(PersonTrack(tid, frames, video_id))
    return tracks


# ---------------------------------------------------------------- datasets


@dataclass
class DatasetSpec:
    counts: dict[str, int] = field(default_factory=lambda: {n: 10 for n in CLASS_NAMES})
    train_fraction: float = 0.8
    seed: int = 0
    num_frames: int = 64
    num_persons: int = 3
    noise_sigma: float = 1.5
    drop_rate: float = 0.02

    def __post_init__(self):
        for name, n in self.counts.items():
            if name not in CLASS_NAMES:
                raise ValueError(f"unknown class {name!r}; known: {', '.join(CLASS_NAMES)}")
            if n < 1:
                raise ValueError(f"count for {name!r} must be >= 1")

    @classmethod
    def from_file(cls, path) -> "DatasetSpec":
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise FileNotFoundError(f"spec not found: {path}")
        kw = {}
        if cp.has_section("dataset"):
            s = cp["dataset"]
            for key, conv in (("train_fraction", float), ("seed", int), ("num_frames", int),
                              ("num_persons", int), ("noise_sigma", float), ("drop_rate", float)):
                if key in s:
                    kw[key] = conv(s[key])
        if cp.has_section("counts"):
            kw["counts"] = {k: int(v) for k, v in cp["counts"].items()}
        return cls(**kw)


def generate_dataset(spec: DatasetSpec, out_dir, seed: int | None = None) -> dict:
    """Write ``train.jsonl``, ``eval.jsonl`` and ``manifest.json``; returns the manifest.

    Each class is split separately, ``round(n * train_fraction)`` scenes to train.
    """
    seed = spec.seed if seed is None else seed
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = PoseHeader(CANVAS[0], CANVAS[1], NUM_KEYPOINTS)
    splits: dict[str, list[PersonTrack]] = {"train": [], "eval": []}
    scenes: dict[str, list[str]] = {"train": [], "eval": []}
    hist = {"train": {}, "eval": {}}
    idx = 0
    for class_id, name in enumerate(CLASS_NAMES):
        n = spec.counts.get(name, 0)
        if n == 0:
            continue
        n_train = int(round(n * spec.train_fraction))
        is_train = np.zeros(n, dtype=bool)
        is_train[np.random.default_rng([seed, class_id]).permutation(n)[:n_train]] = True
        for i in range(n):
            vid = f"scene_{idx:05d}"
            idx += 1
            tracks = generate_scene(class_id, spec.num_persons, spec.num_frames, NUM_KEYPOINTS,
                                    spec.noise_sigma, np.random.SeedSequence([seed, class_id, i]),
                                    spec.drop_rate, vid)
            split = "train" if is_train[i] else "eval"
            splits[split].extend(tracks)
            scenes[split].append(vid)
            hist[split][name] = hist[split].get(name, 0) + 1
    for split, tracks in splits.items():
        write_pose_file(out / f"{split}.jsonl", tracks, header)
    manifest = {
        "spec": asdict(spec) | {"seed": seed},
        "class_names": list(CLASS_NAMES),
        "counts": {s: len(v) for s, v in scenes.items()},
        "class_histogram": hist,
        "scenes": scenes,
        "files": {s: f"{s}.jsonl" for s in splits},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
