"""Highway scenario ingestion, slicing, labeling, balancing, and synthesis.

A scenario sample is an observation window of 3 s over a fixed 3x3 neighbor
grid (9 vehicles, 4 features each) plus the 5 s future trajectory of the
target vehicle and its maneuver label (lane change left / keep lane / lane
change right). All samples are expressed in a target-centric frame: translated
to the target's position at the last observed step and rotated so its heading
points along +x.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arrayio import load_arrays, save_arrays
from .errors import ConfigError, DataError, SchemaError

N_VEHICLES = 9
N_FEATURES = 4  # (x, y, v_x, v_y)
N_CLASSES = 3  # (lcl, kl, lcr)
T_OBS_SECONDS = 3.0
T_PRED_SECONDS = 5.0
TARGET_SLOT = 4  # ego lane, alongside: the middle of the 3x3 grid

LCL, KL, LCR = 0, 1, 2
CLASS_NAMES = ("lcl", "kl", "lcr")

# Longitudinal gap (m) below which a neighbor counts as alongside rather than
# ahead/behind.
ALONGSIDE_GAP = 6.0


@dataclass(frozen=True)
class LaneGeometry:
    """Straight multi-lane road: ordered lane center y-coordinates plus width."""

    centers: tuple
    width: float = 4.0

    def __post_init__(self):
        if len(self.centers) < 1:
            raise ConfigError("lane geometry needs at least one lane")
        if any(b <= a for a, b in zip(self.centers, self.centers[1:])):
            raise ConfigError("lane centers must be strictly increasing")

    def lane_index(self, y: float) -> int:
        centers = np.asarray(self.centers)
        idx = int(np.argmin(np.abs(centers - y)))
        if abs(centers[idx] - y) > self.width / 2.0:
            raise DataError(f"position y={y:.2f} m lies outside all lanes")
        return idx


@dataclass
class Track:
    vehicle_id: int
    frame: np.ndarray
    x: np.ndarray
    y: np.ndarray
    v_x: np.ndarray
    v_y: np.ndarray
    lane_id: np.ndarray


@dataclass
class SceneRecording:
    tracks: dict  # vehicle_id -> Track
    lanes: LaneGeometry
    rate_hz: float


@dataclass(frozen=True)
class ScenarioSample:
    observation: np.ndarray  # [N x F x T_o], target-centric
    future: np.ndarray  # [2 x T_p], target-centric
    maneuver: np.ndarray  # one-hot length 3: (lcl, kl, lcr)
    target_index: int
    frame_origin: tuple  # (x, y, heading) of the target at t0 in recording frame
    sample_rate_hz: float

    @property
    def maneuver_class(self) -> int:
        return int(np.argmax(self.maneuver))


@dataclass
class DatasetSplit:
    train: list
    test: list
    split_seed: int
    lanes: LaneGeometry | None = None


def to_target_frame(points: np.ndarray, origin) -> np.ndarray:
    """Map recording-frame points [2 x T] into the target-centric frame."""
    ox, oy, heading = origin
    c, s = math.cos(heading), math.sin(heading)
    rot = np.array([[c, s], [-s, c]])
    return rot @ (np.asarray(points, dtype=float) - np.array([[ox], [oy]]))


def to_recording_frame(points: np.ndarray, origin) -> np.ndarray:
    """Inverse of to_target_frame."""
    ox, oy, heading = origin
    c, s = math.cos(heading), math.sin(heading)
    rot = np.array([[c, -s], [s, c]])
    return rot @ np.asarray(points, dtype=float) + np.array([[ox], [oy]])


def rotate_to_target_frame(vectors: np.ndarray, origin) -> np.ndarray:
    """Rotate direction vectors (velocities) without translation."""
    heading = origin[2]
    c, s = math.cos(heading), math.sin(heading)
    rot = np.array([[c, s], [-s, c]])
    return rot @ np.asarray(vectors, dtype=float)


# ---------------------------------------------------------------------------
# Ingestion


def ingest_tracks(path, column_map: dict, rate_hz: float,
                  lanes: LaneGeometry | None = None) -> SceneRecording:
    """Read a delimited track file (highD-style layout) into a SceneRecording.

    column_map maps the logical names {id, frame, x, y, vx, vy, lane} to the
    file's header names; vx/vy/lane are optional. Missing velocities are
    finite-differenced from positions; a missing lane column infers lane
    centers from the per-lane median lateral position (or a single lane).
    """
    if rate_hz <= 0:
        raise ConfigError(f"rate_hz must be positive, got {rate_hz}")
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"track file not found: {path}")
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]

    for logical in ("id", "frame", "x", "y"):
        if logical not in column_map:
            raise SchemaError(f"column_map is missing required key '{logical}'")
    cols = {}
    for logical, name in column_map.items():
        if name not in header:
            raise SchemaError(f"mapped column '{name}' (for '{logical}') not in header")
        cols[logical] = header.index(name)

    by_vehicle: dict = {}
    for row in rows:
        vid = int(float(row[cols["id"]]))
        by_vehicle.setdefault(vid, []).append(row)

    tracks = {}
    for vid, vrows in by_vehicle.items():
        frame = np.array([float(r[cols["frame"]]) for r in vrows])
        if np.any(np.diff(frame) <= 0):
            raise DataError(f"non-monotone frames for vehicle {vid}")
        x = np.array([float(r[cols["x"]]) for r in vrows])
        y = np.array([float(r[cols["y"]]) for r in vrows])
        tau = 1.0 / rate_hz
        if "vx" in cols:
            vx = np.array([float(r[cols["vx"]]) for r in vrows])
        else:
            vx = np.gradient(x, tau)
        if "vy" in cols:
            vy = np.array([float(r[cols["vy"]]) for r in vrows])
        else:
            vy = np.gradient(y, tau)
        if "lane" in cols:
            lane = np.array([float(r[cols["lane"]]) for r in vrows])
        else:
            lane = np.full(len(vrows), -1.0)
        tracks[vid] = Track(vid, frame, x, y, vx, vy, lane)

    if lanes is None:
        lanes = _infer_lanes(tracks)
    return SceneRecording(tracks=tracks, lanes=lanes, rate_hz=rate_hz)


def _infer_lanes(tracks: dict) -> LaneGeometry:
    lane_ids = sorted({int(l) for t in tracks.values() for l in t.lane_id if l >= 0})
    if not lane_ids:
        ys = np.concatenate([t.y for t in tracks.values()])
        return LaneGeometry(centers=(float(np.median(ys)),), width=4.0)
    centers = []
    for lid in lane_ids:
        ys = np.concatenate(
            [t.y[t.lane_id == lid] for t in tracks.values() if np.any(t.lane_id == lid)]
        )
        centers.append(float(np.median(ys)))
    centers = tuple(sorted(centers))
    width = 4.0
    if len(centers) > 1:
        width = float(min(b - a for a, b in zip(centers, centers[1:])))
    return LaneGeometry(centers=centers, width=width)


# ---------------------------------------------------------------------------
# Labeling and balancing


def label_maneuver(future: np.ndarray, lanes: LaneGeometry) -> np.ndarray:
    """One-hot (lcl, kl, lcr) from the lane indices of first vs last position.

    The future trajectory must be in the recording frame the lane geometry is
    defined in. Raises DataError if either endpoint is outside all lanes.
    """
    future = np.asarray(future, dtype=float)
    first = lanes.lane_index(float(future[1, 0]))
    last = lanes.lane_index(float(future[1, -1]))
    onehot = np.zeros(N_CLASSES)
    if last > first:
        onehot[LCL] = 1.0
    elif last < first:
        onehot[LCR] = 1.0
    else:
        onehot[KL] = 1.0
    return onehot


def balance_dataset(samples: list, seed: int = 0) -> list:
    """Subsample every maneuver class down to the minimum class count."""
    by_class: dict = {c: [] for c in range(N_CLASSES)}
    for s in samples:
        by_class[s.maneuver_class].append(s)
    for c, members in by_class.items():
        if not members:
            raise DataError(f"cannot balance: class '{CLASS_NAMES[c]}' is empty")
    n_min = min(len(m) for m in by_class.values())
    rng = np.random.default_rng(seed)
    out = []
    for c in range(N_CLASSES):
        members = by_class[c]
        idx = rng.choice(len(members), size=n_min, replace=False)
        out.extend(members[i] for i in sorted(idx))
    return out


# ---------------------------------------------------------------------------
# Sample extraction


def window_lengths(rate_out_hz: float) -> tuple:
    t_o = round(T_OBS_SECONDS * rate_out_hz)
    t_p = round(T_PRED_SECONDS * rate_out_hz)
    return t_o, t_p


def extract_samples(rec: SceneRecording, stride: int, rate_out_hz: float) -> list:
    """Slice a recording into target-centric scenario samples.

    For every vehicle and every window start on the stride grid, the vehicle
    becomes the target of one sample provided its track covers the full
    3 s + 5 s window and its future can be labeled. Windows that overrun the
    track are skipped silently.
    """
    if rate_out_hz <= 0 or rec.rate_hz % rate_out_hz != 0:
        raise ConfigError(
            f"rate_out_hz ({rate_out_hz}) must divide the recording rate ({rec.rate_hz})"
        )
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    step = int(rec.rate_hz // rate_out_hz)
    t_o, t_p = window_lengths(rate_out_hz)
    window = (t_o - 1) * step + t_p * step + 1

    samples = []
    for vid in sorted(rec.tracks):
        track = rec.tracks[vid]
        n = len(track.frame)
        for start in range(0, n - window + 1, stride):
            try:
                sample = _build_sample(rec, vid, start, step, t_o, t_p, rate_out_hz)
            except DataError:
                continue
            samples.append(sample)
    return samples


def _slice_track(track: Track, idx: np.ndarray) -> np.ndarray:
    return np.stack([track.x[idx], track.y[idx], track.v_x[idx], track.v_y[idx]])


def _covers(track: Track, frames: np.ndarray) -> np.ndarray | None:
    """Indices into the track for the requested frame numbers, or None."""
    pos = np.searchsorted(track.frame, frames)
    if np.any(pos >= len(track.frame)) or np.any(track.frame[pos] != frames):
        return None
    return pos


def _build_sample(rec: SceneRecording, target_id: int, start: int, step: int,
                  t_o: int, t_p: int, rate_out_hz: float) -> ScenarioSample:
    target = rec.tracks[target_id]
    t0_idx = start + (t_o - 1) * step
    obs_frames = target.frame[start:t0_idx + 1:step]
    pred_idx = np.arange(t0_idx + step, t0_idx + t_p * step + 1, step)
    if pred_idx[-1] >= len(target.frame):
        raise DataError("window overruns track")
    pred_frames = target.frame[pred_idx]

    future_rec = np.stack([target.x[pred_idx], target.y[pred_idx]])
    maneuver = label_maneuver(
        np.stack([
            np.concatenate([[target.x[t0_idx]], target.x[pred_idx]]),
            np.concatenate([[target.y[t0_idx]], target.y[pred_idx]]),
        ]),
        rec.lanes,
    )

    ox, oy = target.x[t0_idx], target.y[t0_idx]
    vx0, vy0 = target.v_x[t0_idx], target.v_y[t0_idx]
    heading = math.atan2(vy0, vx0) if math.hypot(vx0, vy0) > 1e-9 else 0.0
    origin = (float(ox), float(oy), float(heading))

    target_lane = rec.lanes.lane_index(float(oy))
    neighbors = _neighbor_grid(rec, target_id, target_lane, t0_idx, obs_frames)

    observation = np.zeros((N_VEHICLES, N_FEATURES, t_o))
    for slot, vid in enumerate(neighbors):
        if vid is None:
            continue
        track = rec.tracks[vid]
        idx = _covers(track, obs_frames)
        feats = _slice_track(track, idx)
        observation[slot, :2] = to_target_frame(feats[:2], origin)
        observation[slot, 2:] = rotate_to_target_frame(feats[2:], origin)

    return ScenarioSample(
        observation=observation,
        future=to_target_frame(future_rec, origin),
        maneuver=maneuver,
        target_index=TARGET_SLOT,
        frame_origin=origin,
        sample_rate_hz=rate_out_hz,
    )


def _neighbor_grid(rec: SceneRecording, target_id: int, target_lane: int,
                   t0_idx: int, obs_frames: np.ndarray) -> list:
    """Fixed 3x3 slot assignment: (lane-left, ego, lane-right) x (ahead,
    alongside, behind), with the target in the center slot.

    A candidate must cover the full observation window. Per slot the nearest
    vehicle by longitudinal gap wins; ties break toward the lower vehicle id.
    """
    target = rec.tracks[target_id]
    t0_frame = target.frame[t0_idx]
    x0, y0 = target.x[t0_idx], target.y[t0_idx]

    candidates = []  # (lane_offset, gap, vehicle_id)
    for vid in sorted(rec.tracks):
        if vid == target_id:
            continue
        track = rec.tracks[vid]
        idx = _covers(track, obs_frames)
        if idx is None:
            continue
        at0 = np.searchsorted(track.frame, t0_frame)
        try:
            lane = rec.lanes.lane_index(float(track.y[at0]))
        except DataError:
            continue
        offset = lane - target_lane
        if abs(offset) > 1:
            continue
        candidates.append((offset, float(track.x[at0] - x0), vid))

    slots = [None] * N_VEHICLES
    # slot layout: row = lane offset (+1 left, 0 ego, -1 right), col = position
    slot_of = {
        (1, "ahead"): 0, (1, "alongside"): 1, (1, "behind"): 2,
        (0, "ahead"): 3, (0, "alongside"): TARGET_SLOT, (0, "behind"): 5,
        (-1, "ahead"): 6, (-1, "alongside"): 7, (-1, "behind"): 8,
    }
    slots[TARGET_SLOT] = target_id
    for offset in (1, 0, -1):
        pool = [(gap, vid) for off, gap, vid in candidates if off == offset]
        ahead = [(gap, vid) for gap, vid in pool if gap > ALONGSIDE_GAP]
        behind = [(gap, vid) for gap, vid in pool if gap < -ALONGSIDE_GAP]
        beside = [(gap, vid) for gap, vid in pool if abs(gap) <= ALONGSIDE_GAP]
        if ahead:
            slots[slot_of[(offset, "ahead")]] = min(ahead, key=lambda g: (g[0], g[1]))[1]
        if behind:
            slots[slot_of[(offset, "behind")]] = max(behind, key=lambda g: (g[0], -g[1]))[1]
        if beside and offset != 0:
            slots[slot_of[(offset, "alongside")]] = min(
                beside, key=lambda g: (abs(g[0]), g[1])
            )[1]
    return slots


# ---------------------------------------------------------------------------
# Synthetic generation


@dataclass
class SynthConfig:
    n_lanes: int = 3
    lane_width: float = 4.0
    speed_range: tuple = (22.0, 33.0)
    samples_per_class: int = 60
    rate_hz: float = 25.0
    rate_out_hz: float = 5.0
    train_fraction: float = 0.75
    max_neighbors: int = 6


def _quintic(u: np.ndarray) -> np.ndarray:
    """Minimum-jerk 0 -> 1 profile with zero endpoint velocity/acceleration."""
    return 10 * u**3 - 15 * u**4 + 6 * u**5


def synth_generate(config: SynthConfig, seed: int) -> DatasetSplit:
    """Generate a class-balanced synthetic dataset of straight-highway scenes.

    Targets follow one of three longitudinal regimes (brake, coast or
    accelerate, onset inside the observation window) and either keep their
    lane (small smooth lateral sway) or execute a quintic-profile lane change
    that begins shortly before the observation window ends, so the maneuver
    leaves a trace in the observed features. Neighbor vehicles drive at constant
    velocity. Fully deterministic for a given seed.
    """
    if config.n_lanes < 2:
        raise ConfigError("lane changes need at least 2 lanes")
    if config.rate_hz % config.rate_out_hz != 0:
        raise ConfigError("rate_out_hz must divide rate_hz")
    rng = np.random.default_rng(seed)
    lanes = LaneGeometry(
        centers=tuple(i * config.lane_width for i in range(config.n_lanes)),
        width=config.lane_width,
    )
    samples = []
    for cls in (LCL, KL, LCR):
        for _ in range(config.samples_per_class):
            samples.append(_synth_one(config, lanes, cls, rng))

    rng_split = np.random.default_rng(seed + 1)
    train, test = [], []
    for cls in range(N_CLASSES):
        members = [s for s in samples if s.maneuver_class == cls]
        order = rng_split.permutation(len(members))
        n_train = int(round(config.train_fraction * len(members)))
        train.extend(members[i] for i in order[:n_train])
        test.extend(members[i] for i in order[n_train:])
    return DatasetSplit(train=train, test=test, split_seed=seed, lanes=lanes)


def _synth_one(config: SynthConfig, lanes: LaneGeometry, cls: int,
               rng: np.random.Generator) -> ScenarioSample:
    rate = config.rate_hz
    tau = 1.0 / rate
    horizon = T_OBS_SECONDS + T_PRED_SECONDS
    n_steps = int(round(horizon * rate)) + 1
    t = np.arange(n_steps) * tau

    if cls == LCL:
        lane0 = rng.integers(0, config.n_lanes - 1)
        delta = config.lane_width
    elif cls == LCR:
        lane0 = rng.integers(1, config.n_lanes)
        delta = -config.lane_width
    else:
        lane0 = rng.integers(0, config.n_lanes)
        delta = 0.0
    y0 = lanes.centers[lane0]
    speed = rng.uniform(*config.speed_range)

    # Discrete longitudinal regime (brake / coast / accelerate) that begins
    # inside the observation window, so the observed speed trend identifies
    # the regime and the future speed profile is genuinely multimodal.
    accel = rng.choice([-1.5, 0.0, 1.5])
    t_accel = 0.5
    v = np.clip(speed + accel * np.maximum(t - t_accel, 0.0), 5.0, 45.0)
    x = np.concatenate([[0.0], np.cumsum((v[1:] + v[:-1]) * 0.5 * tau)])
    if cls == KL:
        amp = rng.uniform(0.0, 0.10)
        freq = rng.uniform(0.05, 0.12)
        phase = rng.uniform(0, 2 * np.pi)
        y = y0 + amp * np.sin(2 * np.pi * freq * t + phase) - amp * np.sin(phase)
    else:
        duration = rng.uniform(4.5, min(6.0, horizon - 2.2))
        # Start the change inside the observation window, early enough that
        # the observed lateral drift identifies the maneuver but late enough
        # that the vehicle is still in its original lane at the last observed
        # step (quintic offset < half a lane width).
        lo = max(1.2, 3.15 - 0.45 * duration)
        hi = min(2.2, horizon - duration - 0.1)
        t_start = rng.uniform(lo, hi)
        u = np.clip((t - t_start) / duration, 0.0, 1.0)
        y = y0 + delta * _quintic(u)

    tracks = {0: Track(0, np.arange(n_steps, dtype=float), x, y,
                       np.gradient(x, tau), np.gradient(y, tau),
                       np.full(n_steps, float(lane0)))}

    # constant-velocity neighbors in nearby lanes
    n_nb = rng.integers(2, config.max_neighbors + 1)
    vid = 1
    used_offsets = set()
    for _ in range(n_nb):
        lane = int(rng.integers(0, config.n_lanes))
        gap = rng.uniform(8.0, 60.0) * rng.choice([-1.0, 1.0])
        key = (lane, round(gap / 15.0))
        if key in used_offsets:
            continue
        used_offsets.add(key)
        nb_speed = rng.uniform(*config.speed_range)
        nx = gap + nb_speed * t
        ny = np.full(n_steps, lanes.centers[lane])
        tracks[vid] = Track(vid, np.arange(n_steps, dtype=float), nx, ny,
                            np.full(n_steps, nb_speed), np.zeros(n_steps),
                            np.full(n_steps, float(lane)))
        vid += 1

    rec = SceneRecording(tracks=tracks, lanes=lanes, rate_hz=rate)
    step = int(rate // config.rate_out_hz)
    t_o, t_p = window_lengths(config.rate_out_hz)
    return _build_sample(rec, 0, 0, step, t_o, t_p, config.rate_out_hz)


# ---------------------------------------------------------------------------
# Persistence


def save_dataset(split: DatasetSplit, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "n_vehicles": N_VEHICLES,
        "n_features": N_FEATURES,
        "split_seed": split.split_seed,
        "lane_centers": list(split.lanes.centers) if split.lanes else None,
        "lane_width": split.lanes.width if split.lanes else None,
        "splits": {},
    }
    for name, samples in (("train", split.train), ("test", split.test)):
        files = []
        for i, s in enumerate(samples):
            fname = f"{name}_{i:05d}.bin"
            misc = np.array([
                float(s.target_index), *s.frame_origin, s.sample_rate_hz,
            ])
            save_arrays(directory / fname, [s.observation, s.future, s.maneuver, misc])
            files.append(fname)
        manifest["splits"][name] = files
        if samples:
            manifest["t_obs"] = int(samples[0].observation.shape[2])
            manifest["t_pred"] = int(samples[0].future.shape[1])
            manifest["rate_hz"] = samples[0].sample_rate_hz
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_dataset(directory) -> DatasetSplit:
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    lanes = None
    if manifest.get("lane_centers"):
        lanes = LaneGeometry(centers=tuple(manifest["lane_centers"]),
                             width=manifest["lane_width"])
    splits = {}
    for name in ("train", "test"):
        samples = []
        for fname in manifest["splits"][name]:
            obs, future, maneuver, misc = load_arrays(directory / fname, 4)
            samples.append(ScenarioSample(
                observation=obs,
                future=future,
                maneuver=maneuver,
                target_index=int(misc[0]),
                frame_origin=(misc[1], misc[2], misc[3]),
                sample_rate_hz=float(misc[4]),
            ))
        splits[name] = samples
    return DatasetSplit(train=splits["train"], test=splits["test"],
                        split_seed=manifest["split_seed"], lanes=lanes)
