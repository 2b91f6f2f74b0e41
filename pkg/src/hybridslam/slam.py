"""Tracking, windowed mapping, the keyframe database and active global BA.

The tracking and mapping threads of a real-time system are replaced by a
fixed interleaving: every frame is tracked; every ``map_every`` frames a
mapping window runs; every ``gba_every`` frames the global BA runs. Only
mapping and global BA write scene parameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .camera import Frame, Pose, RayBatch, constant_velocity, generate_rays
from .config import Config
from .field import SceneField
from .losses import TERMS, NonFiniteLoss
from .objective import draw_samples, evaluate, per_frame_losses
from .params import AdamHyper, AdamState, adam_step
from .renderer import PoseSet

log = logging.getLogger(__name__)

SCENE_GROUPS = ("geometry", "appearance", "decoder")


# ---- keyframes ------------------------------------------------------------------


def admit_keyframe(loss: float, frame_index: int, t_l: float, fallback_every: int) -> str | None:
    """Admission reason for a frame, or None.

    ``threshold`` when the loss strictly exceeds ``t_l``; otherwise
    ``fallback`` on every ``fallback_every``-th frame (frame 0 included).
    """
    if loss > t_l:
        return "threshold"
    if fallback_every > 0 and frame_index % fallback_every == 0:
        return "fallback"
    return None


@dataclass
class KeyframeEntry:
    frame: Frame
    pose: Pose
    last_global_loss: float
    reason: str

    @property
    def frame_id(self) -> int:
        return self.frame.frame_id


class KeyframeDatabase:
    def __init__(self):
        self.entries: dict[int, KeyframeEntry] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, frame_id: int) -> bool:
        return frame_id in self.entries

    def add(self, frame: Frame, pose: Pose, loss: float, reason: str) -> KeyframeEntry:
        entry = KeyframeEntry(frame, pose, float(loss), reason)
        self.entries[frame.frame_id] = entry
        return entry

    def update(self, frame_id: int, pose: Pose | None = None, loss: float | None = None) -> None:
        e = self.entries.get(frame_id)
        if e is None:
            return
        if pose is not None:
            e.pose = pose
        if loss is not None:
            e.last_global_loss = float(loss)

    def ranked(self) -> list[KeyframeEntry]:
        """Descending loss; ties go to the more recent frame."""
        return sorted(self.entries.values(), key=lambda e: (-e.last_global_loss, -e.frame_id))

    def top(self, n: int) -> list[KeyframeEntry]:
        return self.ranked()[:n]


def allocation_shares(losses, total: int, floor: int) -> np.ndarray:
    """Expected ray count per frame: proportional to loss, at least ``floor``.

    Shares are water-filled: frames whose proportional share falls below
    the floor are pinned to it and the remainder is split over the rest in
    proportion to their losses.
    """
    losses = np.maximum(np.asarray(losses, dtype=np.float64), 0.0)
    k = losses.size
    if k == 0:
        return np.zeros(0)
    if floor * k >= total:
        return np.full(k, total / k)
    if losses.sum() <= 0:
        return np.full(k, total / k)
    pinned = np.zeros(k, dtype=bool)
    while True:
        free = ~pinned
        budget = total - floor * pinned.sum()
        w = losses[free]
        share = np.zeros(k)
        share[pinned] = floor
        if w.sum() <= 0:
            share[free] = budget / free.sum()
            return share
        share[free] = budget * w / w.sum()
        low = free & (share < floor)
        if not low.any():
            return share
        pinned |= low


def allocate_rays(losses, total: int, floor: int, rng: np.random.Generator) -> np.ndarray:
    """Integer ray counts summing to ``total`` whose expectation is :func:`allocation_shares`."""
    shares = allocation_shares(losses, total, floor)
    k = shares.size
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    base = np.minimum(np.floor(shares), floor if floor * k < total else np.floor(total / k)).astype(np.int64)
    rest = total - int(base.sum())
    extra = shares - base
    p = extra / extra.sum() if extra.sum() > 0 else np.full(k, 1.0 / k)
    return base + rng.multinomial(rest, p)


# ---- pipeline ---------------------------------------------------------------------


@dataclass
class FrameRecord:
    frame_id: int
    timestamp: float
    pose: Pose
    track_loss: float = float("nan")
    diverged: bool = False
    keyframe: str | None = None


@dataclass
class LossRow:
    phase: str
    frame_id: int
    iteration: int
    terms: dict
    total: float


class DivergenceError(RuntimeError):
    pass


@dataclass
class PipelineStats:
    rows: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)


class SlamPipeline:
    """Run the interleaved tracking / mapping / global BA schedule over frames."""

    def _hyper(self, lr: float) -> AdamHyper:
        o = self.cfg.optim
        return AdamHyper(lr, o.adam_beta1, o.adam_beta2, o.adam_eps)

    def __init__(self, cfg: Config, seed: int | None = None):
        self.cfg = cfg
        self.seed = cfg.pipeline.seed if seed is None else seed
        self.rng = np.random.default_rng(self.seed)
        self.scene = SceneField(cfg, seed=self.seed)
        o = cfg.optim
        hyper = self._hyper
        self.scene_state = AdamState.for_store(
            self.scene.store,
            {"geometry": hyper(o.lr_geometry), "appearance": hyper(o.lr_appearance), "decoder": hyper(o.lr_decoder)},
        )
        self.keyframes = KeyframeDatabase()
        self.frames: dict[int, Frame] = {}
        self.records: list[FrameRecord] = []
        self.poses: dict[int, Pose] = {}
        self.rows: list[LossRow] = []
        self.gauge_id: int | None = None
        self.on_iteration = None  # optional callback(LossRow)

    # -- helpers

    def _log(self, phase: str, fid: int, it: int, parts) -> None:
        row = LossRow(phase, fid, it, parts.terms(), parts.total)
        self.rows.append(row)
        if self.on_iteration is not None:
            self.on_iteration(row)

    def _pixels(self, frame: Frame, n: int) -> np.ndarray:
        K = frame.intrinsics
        total = K.width * K.height
        return np.sort(self.rng.choice(total, size=min(n, total), replace=False))

    def _batch(self, frame_counts: list[tuple[Frame, int]]) -> RayBatch:
        mx = self.cfg.render.max_depth
        parts = [generate_rays(f, self._pixels(f, n), max_depth=mx) for f, n in frame_counts if n > 0]
        return RayBatch.concat(parts)

    def _scene_snapshot(self):
        st = self.scene_state
        return (self.scene.store.values.copy(), st.m.copy(), st.v.copy(), st.step_count, dict(st.group_steps))

    def _restore(self, snap) -> None:
        values, m, v, steps, gsteps = snap
        self.scene.store.values[...] = values
        st = self.scene_state
        st.m, st.v, st.step_count, st.group_steps = m, v, steps, gsteps

    # -- operations

    def initialize(self, frame: Frame) -> FrameRecord:
        """Map the first frame with its pose fixed (the gauge anchor)."""
        pose = frame.gt_pose if frame.gt_pose is not None else Pose.identity()
        self.gauge_id = frame.frame_id
        self.frames[frame.frame_id] = frame
        self.poses[frame.frame_id] = pose
        loss = self._optimize([frame.frame_id], "init", self.cfg.pipeline.iters_init, frame.frame_id,
                              lambda ids: [(self.frames[ids[0]], self.cfg.pipeline.pixels_map)])
        rec = FrameRecord(frame.frame_id, frame.timestamp, pose, track_loss=loss.get(frame.frame_id, np.nan))
        rec.keyframe = "bootstrap"
        self.keyframes.add(frame, pose, rec.track_loss, "bootstrap")
        self.records.append(rec)
        return rec

    def initial_pose(self) -> Pose:
        ids = [r.frame_id for r in self.records]
        if len(ids) >= 2:
            return constant_velocity(self.poses[ids[-2]], self.poses[ids[-1]])
        return self.poses[ids[-1]]

    def track_frame(self, frame: Frame, init: Pose | None = None) -> FrameRecord:
        """Optimize only this frame's pose against the frozen scene."""
        p = self.cfg.pipeline
        init = self.initial_pose() if init is None else init
        poses = PoseSet([frame.frame_id], [init])
        state = AdamState.for_store(poses.store, {"pose": self._hyper(self.cfg.optim.lr_pose_track)})
        first = None
        last = np.nan
        diverged = False
        for it in range(p.iters_track):
            batch = self._batch([(frame, p.pixels_track)])
            samples = draw_samples(batch, self.cfg, self.scene, self.rng, smooth=False)
            poses.store.zero_grads()
            try:
                parts, _ = evaluate(self.scene, poses, batch, samples, self.cfg, backward=True,
                                    scene_grads=False, pose_grads=True)
            except NonFiniteLoss:
                diverged = True
                break
            self._log("track", frame.frame_id, it, parts)
            first = parts.total if first is None else first
            last = parts.total
            if last > p.divergence_factor * first:
                diverged = True
                break
            if adam_step(poses.store, state):
                diverged = True
                break
        pose = init if diverged else poses.pose(frame.frame_id)
        if diverged:
            log.warning("tracking diverged on frame %d, keeping the initial pose", frame.frame_id)
        self.frames[frame.frame_id] = frame
        self.poses[frame.frame_id] = pose
        rec = FrameRecord(frame.frame_id, frame.timestamp, pose, last, diverged)
        self.records.append(rec)
        return rec

    def _optimize(self, frame_ids: list[int], phase: str, iters: int, tag: int, counts_fn) -> dict[int, float]:
        """Joint scene + pose optimization over ``frame_ids`` (gauge frame frozen).

        ``counts_fn(frame_ids)`` returns ``[(frame, n_rays), ...]`` for one
        iteration. Returns each frame's weighted loss from the last iteration.
        """
        cfg = self.cfg
        trainable = [fid != self.gauge_id for fid in frame_ids]
        poses = PoseSet(frame_ids, [self.poses[f] for f in frame_ids], trainable)
        pose_state = AdamState.for_store(poses.store, {"pose": self._hyper(cfg.optim.lr_pose_ba)})
        snap = self._scene_snapshot()
        first = None
        per_frame: dict[int, float] = {}
        for it in range(iters):
            batch = self._batch(counts_fn(frame_ids))
            samples = draw_samples(batch, cfg, self.scene, self.rng, smooth=True)
            self.scene.store.zero_grads()
            poses.store.zero_grads()
            pose_grads = any(trainable)
            try:
                parts, out = evaluate(self.scene, poses, batch, samples, cfg, backward=True,
                                      scene_grads=True, pose_grads=pose_grads)
            except NonFiniteLoss as exc:
                log.warning("%s: %s, iteration skipped", phase, exc)
                continue
            self._log(phase, tag, it, parts)
            first = parts.total if first is None else first
            if it == iters - 1:
                per_frame = per_frame_losses(out, batch, samples, cfg, self.rng)
            adam_step(self.scene.store, self.scene_state)
            if pose_grads:
                adam_step(poses.store, pose_state)
        if first is not None and self.rows and self.rows[-1].total > cfg.pipeline.divergence_factor * first:
            log.warning("%s at frame %d diverged; scene restored", phase, tag)
            self._restore(snap)
            return {}
        for fid in frame_ids:
            if fid != self.gauge_id:
                self.poses[fid] = poses.pose(fid)
                self.keyframes.update(fid, pose=self.poses[fid])
            if fid in per_frame:
                self.keyframes.update(fid, loss=per_frame[fid])
        for rec in self.records:
            if rec.frame_id in self.poses:
                rec.pose = self.poses[rec.frame_id]
        return per_frame

    def window_frames(self, frame_id: int) -> list[int]:
        """Current frame, the previous frame and up to K random keyframes."""
        ids = [r.frame_id for r in self.records]
        pos = ids.index(frame_id)
        window = [frame_id]
        if pos > 0:
            window.append(ids[pos - 1])
        pool = [k for k in self.keyframes.entries if k not in window]
        k = min(self.cfg.pipeline.window_keyframes, len(pool))
        if k:
            window += [int(x) for x in self.rng.choice(pool, size=k, replace=False)]
        return window

    def map_window(self, frame_id: int) -> dict[int, float]:
        window = self.window_frames(frame_id)
        n = self.cfg.pipeline.pixels_map

        def counts(ids):
            share = [n // len(ids) + (1 if i < n % len(ids) else 0) for i in range(len(ids))]
            return [(self.frames[f], c) for f, c in zip(ids, share)]

        return self._optimize(window, "map", self.cfg.pipeline.iters_map, frame_id, counts)

    def active_global_ba(self, frame_id: int) -> dict[int, float]:
        p = self.cfg.pipeline
        top = self.keyframes.top(p.top_n)
        if not top:
            return {}
        ids = [e.frame_id for e in top]
        losses = [e.last_global_loss for e in top]

        def counts(ids_):
            alloc = allocate_rays(losses, p.pixels_map, p.ray_floor, self.rng)
            return [(self.frames[f], int(c)) for f, c in zip(ids_, alloc)]

        return self._optimize(ids, "gba", p.iters_gba, frame_id, counts)

    def process(self, frame: Frame, index: int) -> FrameRecord:
        p = self.cfg.pipeline
        if not self.records:
            return self.initialize(frame)
        rec = self.track_frame(frame)
        losses = {}
        if index % p.map_every == 0:
            losses = self.map_window(frame.frame_id)
        if p.gba and index % p.gba_every == 0:
            self.active_global_ba(frame.frame_id)
        loss = losses.get(frame.frame_id, rec.track_loss)
        if frame.frame_id not in self.keyframes:
            reason = admit_keyframe(loss, index, p.t_l, p.kf_fallback_every)
            if reason is not None:
                self.keyframes.add(frame, self.poses[frame.frame_id], loss, reason)
                rec.keyframe = reason
        return rec

    def run(self, frames) -> list[FrameRecord]:
        for i, frame in enumerate(frames):
            rec = self.process(frame, i)
            log.info("frame %d: loss %.4f%s%s", rec.frame_id, rec.track_loss,
                     " [diverged]" if rec.diverged else "", f" [kf:{rec.keyframe}]" if rec.keyframe else "")
        return self.records

    def trajectory(self) -> tuple[np.ndarray, list[Pose]]:
        return np.array([r.timestamp for r in self.records]), [self.poses[r.frame_id] for r in self.records]

    @staticmethod
    def loss_header() -> list[str]:
        return ["phase", "frame", "iteration", *TERMS, "total"]
