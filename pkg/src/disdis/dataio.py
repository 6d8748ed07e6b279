"""Trajectory ingestion, windowing, normalization, and synthetic data.

Scene files are plain text, one record per line: `frame ped_id x y`,
whitespace separated, positions in meters, frames 0.4 s apart. Windowing
slides a 20-step window (8 observed + 12 future) with stride 1 over each
gap-free track segment.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

log = logging.getLogger(__name__)

OBS_LEN = 8
FUT_LEN = 12
WINDOW_LEN = OBS_LEN + FUT_LEN


class DataFormatError(ValueError):
    """Malformed scene or label file."""


@dataclass(frozen=True)
class RawRecord:
    frame: int
    ped_id: int
    x: float
    y: float


@dataclass
class TrajectorySample:
    """One pedestrian window: 8 observed and 12 future positions (meters)."""

    obs: np.ndarray  # (8, 2)
    fut: np.ndarray  # (12, 2)
    ped_id: int
    scene_id: str = ""
    pattern_label: int | None = None
    start_frame: int = 0
    origin: np.ndarray | None = None  # translation removed by normalize()

    def key(self):
        return (self.scene_id, self.ped_id, self.start_frame)


@dataclass(frozen=True)
class SyntheticPersona:
    """A motion pattern: constant turn rate and speed plus position noise."""

    pattern_id: int
    turn_rate: float  # radians per step
    speed: float  # meters per step
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.speed <= 0:
            raise ValueError(f"persona {self.pattern_id}: speed must be > 0")
        if self.noise_sigma < 0:
            raise ValueError(f"persona {self.pattern_id}: noise_sigma must be >= 0")


def _parse_int_field(token, path, lineno, what):
    try:
        v = float(token)
    except ValueError:
        raise DataFormatError(f"{path}:{lineno}: non-numeric {what} {token!r}") from None
    if not v.is_integer():
        raise DataFormatError(f"{path}:{lineno}: {what} {token!r} is not an integer")
    return int(v)


def load_scene(path):
    """Parse a scene file into records sorted by (ped_id, frame)."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != 4:
                raise DataFormatError(
                    f"{path}:{lineno}: expected 4 fields 'frame ped_id x y', got {len(tokens)}"
                )
            frame = _parse_int_field(tokens[0], path, lineno, "frame")
            ped = _parse_int_field(tokens[1], path, lineno, "ped_id")
            try:
                x, y = float(tokens[2]), float(tokens[3])
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-numeric coordinate") from None
            records.append(RawRecord(frame, ped, x, y))
    records.sort(key=lambda r: (r.ped_id, r.frame))
    for prev, cur in zip(records, records[1:]):
        if cur.ped_id == prev.ped_id and cur.frame == prev.frame:
            raise DataFormatError(
                f"{path}: duplicate frame {cur.frame} for pedestrian {cur.ped_id}"
            )
    return records


def _track_segments(track):
    """Split one pedestrian's sorted records at frame gaps.

    The track's stride is its smallest frame difference; any larger jump
    starts a new segment (no interpolation of missing frames).
    """
    if len(track) < 2:
        return [track]
    diffs = [b.frame - a.frame for a, b in zip(track, track[1:])]
    stride = min(diffs)
    segments, current = [], [track[0]]
    for rec, d in zip(track[1:], diffs):
        if d == stride:
            current.append(rec)
        else:
            segments.append(current)
            current = [rec]
    segments.append(current)
    return segments


def window_scene(records, scene_id=""):
    """Slide 20-step windows (stride 1) over each gap-free track segment.

    Segments shorter than 20 steps contribute nothing; a tally of skipped
    segments is logged. A segment of length L yields max(0, L - 19) windows.
    """
    by_ped = {}
    for rec in records:
        by_ped.setdefault(rec.ped_id, []).append(rec)
    samples = []
    skipped = 0
    for ped_id in sorted(by_ped):
        for segment in _track_segments(by_ped[ped_id]):
            if len(segment) < WINDOW_LEN:
                skipped += 1
                continue
            pts = np.array([[r.x, r.y] for r in segment])
            for start in range(len(segment) - WINDOW_LEN + 1):
                window = pts[start:start + WINDOW_LEN].copy()
                samples.append(TrajectorySample(
                    obs=window[:OBS_LEN],
                    fut=window[OBS_LEN:],
                    ped_id=ped_id,
                    scene_id=scene_id,
                    start_frame=segment[start].frame,
                ))
    if skipped:
        log.info("window_scene(%s): skipped %d segments shorter than %d steps",
                 scene_id or "scene", skipped, WINDOW_LEN)
    samples.sort(key=TrajectorySample.key)
    return samples


def normalize(sample):
    """Translate so the last observed position sits at the origin.

    Idempotent; the cumulative translation is kept on the sample so
    denormalize() can restore absolute coordinates.
    """
    shift = sample.obs[-1].copy()
    origin = shift if sample.origin is None else sample.origin + shift
    return replace(sample, obs=sample.obs - shift, fut=sample.fut - shift, origin=origin)


def denormalize(sample):
    """Undo normalize(); samples without a stored origin are returned as-is."""
    if sample.origin is None:
        return sample
    return replace(sample, obs=sample.obs + sample.origin,
                   fut=sample.fut + sample.origin, origin=None)


def rotate_augment(sample, angle_step_deg=15.0):
    """All rotations of a normalized sample about the origin, step 15 degrees."""
    if not np.allclose(sample.obs[-1], 0.0, atol=1e-9):
        raise ValueError("rotate_augment expects a normalized sample")
    n_rot = int(round(360.0 / angle_step_deg))
    out = []
    for k in range(n_rot):
        a = math.radians(k * angle_step_deg)
        rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        out.append(replace(sample, obs=sample.obs @ rot.T, fut=sample.fut @ rot.T))
    return out


def synth_generate(personas, n_per_persona, history_len=OBS_LEN, future_len=FUT_LEN,
                   seed=0, shared_prefix_len=5, shared_speed=0.6):
    """Generate pattern-labeled trajectories from constant-curvature personas.

    Every trajectory starts with the same kind of straight prefix (shared
    speed, random heading) for `shared_prefix_len` steps, then follows its
    persona's turn rate and speed. The persona therefore shows up only in
    the tail of the observation window and in the future, so the history
    narrows the pattern down without fully determining it. Gaussian position
    noise with the persona's sigma is added to every point.
    """
    if n_per_persona <= 0:
        raise ValueError("n_per_persona must be positive")
    if len(personas) < 2:
        raise ValueError("need at least 2 personas")
    seen = {(p.turn_rate, p.speed) for p in personas}
    if len(seen) < 2:
        raise ValueError("personas must not all share (turn_rate, speed)")

    total_len = history_len + future_len
    rng = np.random.default_rng(seed)
    samples = []
    ped_id = 0
    for persona in sorted(personas, key=lambda p: p.pattern_id):
        for _ in range(n_per_persona):
            heading = rng.uniform(0.0, 2.0 * math.pi)
            pts = np.zeros((total_len, 2))
            for t in range(1, total_len):
                if t <= shared_prefix_len:
                    speed = shared_speed
                else:
                    heading += persona.turn_rate
                    speed = persona.speed
                pts[t] = pts[t - 1] + speed * np.array([math.cos(heading), math.sin(heading)])
            if persona.noise_sigma > 0:
                pts = pts + rng.normal(0.0, persona.noise_sigma, size=pts.shape)
            samples.append(TrajectorySample(
                obs=pts[:history_len],
                fut=pts[history_len:],
                ped_id=ped_id,
                scene_id="synth",
                pattern_label=persona.pattern_id,
            ))
            ped_id += 1
    return samples


def dump_scene(samples, scene_path, labels_path=None):
    """Write samples in scene-file format, one pedestrian per sample.

    Frames run 0..19 within each sample; coordinates are written with repr
    so a reload reproduces them bit-exactly. The optional sidecar holds one
    `ped_id pattern_id` line per labeled sample.
    """
    with open(scene_path, "w", encoding="utf-8") as fh:
        for s in samples:
            pts = np.concatenate([s.obs, s.fut], axis=0)
            for t, (x, y) in enumerate(pts):
                fh.write(f"{t} {s.ped_id} {float(x)!r} {float(y)!r}\n")
    if labels_path is not None:
        with open(labels_path, "w", encoding="utf-8") as fh:
            for s in samples:
                if s.pattern_label is not None:
                    fh.write(f"{s.ped_id} {s.pattern_label}\n")


def load_labels(path):
    """Read a `ped_id pattern_id` sidecar into a dict."""
    labels = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != 2:
                raise DataFormatError(f"{path}:{lineno}: expected 'ped_id pattern_id'")
            labels[_parse_int_field(tokens[0], path, lineno, "ped_id")] = \
                _parse_int_field(tokens[1], path, lineno, "pattern_id")
    return labels
