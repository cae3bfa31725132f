"""REDD low-frequency ingestion, windowing and a synthetic house generator.

Channel files hold one ``<unix_timestamp> <watts>`` pair per line. A dataset
is described by a JSON manifest::

    {
      "format": "redd_low_freq",
      "houses": [
        {"house": 1, "split": "test",
         "channels": {"mains": ["house_1/channel_1.dat", "house_1/channel_2.dat"],
                      "fridge": ["house_1/channel_5.dat"]}},
        ...
      ],
      "appliances": {"fridge": {"cutoff_watts": 400, ...}}
    }

``split`` is ``train``, ``test`` or ``time``; the last splits one house
chronologically at ``train_fraction``. Paths are relative to the manifest.
"""

import hashlib
import json
import logging
import math
import os
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DataError
from .tensor import SeededRng

log = logging.getLogger(__name__)

MAX_FILL_SEC = 180
DEFAULT_WINDOW = 480


@dataclass(frozen=True)
class ChannelSeries:
    timestamps: np.ndarray
    watts: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64)
        w = np.asarray(self.watts, dtype=np.float64)
        if ts.shape != w.shape or ts.ndim != 1:
            raise DataError(f"timestamps {ts.shape} and watts {w.shape} must be equal-length vectors")
        if ts.size > 1 and not np.all(np.diff(ts) > 0):
            bad = int(np.argmin(np.diff(ts) > 0)) + 1
            raise DataError(f"timestamps not strictly increasing at index {bad}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise DataError("watts must be finite and non-negative")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "watts", w)

    def __len__(self):
        return self.timestamps.size


@dataclass(frozen=True)
class ApplianceSpec:
    name: str
    cutoff_watts: float
    on_threshold_watts: float
    min_on_sec: float
    min_off_sec: float

    def __post_init__(self):
        if not 0 < self.on_threshold_watts < self.cutoff_watts:
            raise DataError(f"{self.name}: need 0 < on_threshold < cutoff")


# Preprocessing-lineage defaults: cutoff W, on threshold W, min on s, min off s.
APPLIANCES = {
    "fridge": ApplianceSpec("fridge", 400, 50, 60, 12),
    "washer": ApplianceSpec("washer", 3998, 20, 300, 26),
    "microwave": ApplianceSpec("microwave", 1800, 200, 12, 30),
    "dishwasher": ApplianceSpec("dishwasher", 1200, 10, 1800, 1800),
}

REDD_LABELS = {
    "fridge": ("refrigerator",),
    "washer": ("washer_dryer",),
    "microwave": ("microwave",),
    "dishwasher": ("dishwaser", "dishwasher"),
}

REDD_TEST_HOUSE = 1


# -- channel files ----------------------------------------------------------

def load_redd_channel(path):
    ts, w = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected '<timestamp> <watts>', got {line.strip()!r}")
            try:
                ts.append(float(parts[0]))
                w.append(float(parts[1]))
            except ValueError:
                raise DataError(f"{path}:{lineno}: cannot parse {line.strip()!r}") from None
    if not ts:
        raise DataError(f"{path}: empty channel file")
    try:
        return ChannelSeries(np.array(ts), np.array(w))
    except DataError as e:
        raise DataError(f"{path}: {e}") from None


def _fmt_ts(t):
    return str(int(t)) if float(t).is_integer() else repr(float(t))


def write_redd_channel(path, series):
    with open(path, "w") as fh:
        for t, w in zip(series.timestamps, series.watts):
            fh.write(f"{_fmt_ts(t)} {float(w)!r}\n")


# -- alignment --------------------------------------------------------------

def _on_grid(series, grid, max_gap):
    ts = series.timestamps
    idx = np.searchsorted(ts, grid, side="right") - 1
    ok = idx >= 0
    idx = np.clip(idx, 0, None)
    nxt = np.clip(idx + 1, None, ts.size - 1)
    exact = ts[idx] == grid
    bridged = (idx + 1 < ts.size) & (ts[nxt] - ts[idx] <= max_gap)
    return series.watts[idx], ok & (exact | bridged)


def _common_grid(series_list):
    start = math.ceil(max(s.timestamps[0] for s in series_list))
    end = math.floor(min(s.timestamps[-1] for s in series_list))
    if end < start:
        raise DataError("channels do not overlap in time")
    return np.arange(start, end + 1, dtype=np.float64)


def sum_channels(series_list, max_gap=MAX_FILL_SEC):
    """Sum several channels on a shared 1 Hz grid (e.g. REDD's two mains legs)."""
    if len(series_list) == 1:
        return series_list[0]
    grid = _common_grid(series_list)
    total = np.zeros(grid.size)
    valid = np.ones(grid.size, dtype=bool)
    for s in series_list:
        v, ok = _on_grid(s, grid, max_gap)
        total += v
        valid &= ok
    return ChannelSeries(grid[valid], total[valid])


@dataclass
class Segment:
    timestamps: np.ndarray
    mains: np.ndarray
    appliance: np.ndarray


@dataclass
class AlignedPair:
    segments: list
    house: int = 0


def align_resample(mains, appliance, max_gap=MAX_FILL_SEC, min_len=1, house=0):
    """Resample both channels onto a common 1 Hz grid.

    Gaps up to ``max_gap`` seconds are forward-filled; longer gaps split the
    data into segments, and segments shorter than ``min_len`` are dropped.
    """
    grid = _common_grid([mains, appliance])
    m, mok = _on_grid(mains, grid, max_gap)
    a, aok = _on_grid(appliance, grid, max_gap)
    ok = mok & aok
    segments = []
    edges = np.flatnonzero(np.diff(np.concatenate([[0], ok.astype(np.int8), [0]])))
    for lo, hi in zip(edges[::2], edges[1::2]):
        if hi - lo >= min_len:
            segments.append(Segment(grid[lo:hi], m[lo:hi], a[lo:hi]))
    return AlignedPair(segments, house)


# -- status labels ----------------------------------------------------------

def _runs(flags):
    """(start, stop) index pairs of True runs."""
    edges = np.flatnonzero(np.diff(np.concatenate([[0], flags.astype(np.int8), [0]])))
    return list(zip(edges[::2], edges[1::2]))


def apply_hold_times(on, min_on, min_off):
    """Merge on-events separated by fewer than ``min_off`` samples, then
    drop on-events shorter than ``min_on`` samples."""
    on = np.asarray(on, dtype=bool)
    events = _runs(on)
    merged = []
    for start, stop in events:
        if merged and start - merged[-1][1] < min_off:
            merged[-1] = (merged[-1][0], stop)
        else:
            merged.append((start, stop))
    out = np.zeros_like(on)
    for start, stop in merged:
        if stop - start >= min_on:
            out[start:stop] = True
    return out


def on_off_status(power, spec, sample_period=1.0):
    on = np.asarray(power) >= spec.on_threshold_watts
    return apply_hold_times(on, math.ceil(spec.min_on_sec / sample_period),
                            math.ceil(spec.min_off_sec / sample_period))


# -- windowing --------------------------------------------------------------

@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float
    cutoff: float

    def normalize_aggregate(self, x):
        return (np.asarray(x) - self.mean) / self.std

    def denormalize_aggregate(self, z):
        return np.asarray(z) * self.std + self.mean

    def normalize_power(self, w):
        return np.clip(np.asarray(w), 0.0, self.cutoff) / self.cutoff

    def denormalize_power(self, y):
        return np.asarray(y) * self.cutoff


@dataclass
class WindowedDataset:
    aggregate: np.ndarray  # [N, L] standardised
    target: np.ndarray     # [N, L] in [0, 1]
    status: np.ndarray     # [N, L] in {0, 1}
    stats: NormStats
    appliance: ApplianceSpec
    houses: np.ndarray = field(default=None)

    def __len__(self):
        return self.aggregate.shape[0]

    @property
    def window_len(self):
        return self.aggregate.shape[1]

    def subset(self, idx):
        return WindowedDataset(self.aggregate[idx], self.target[idx], self.status[idx],
                               self.stats, self.appliance, self.houses[idx])

    def data_hash(self):
        h = hashlib.sha256()
        for arr in (self.aggregate, self.target, self.status, self.houses):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(json.dumps(asdict(self.stats), sort_keys=True).encode())
        return h.hexdigest()[:16]


def window_count(length, L, stride):
    return 0 if length < L else (length - L) // stride + 1


def _windows(x, L, stride):
    return np.lib.stride_tricks.sliding_window_view(x, L)[::stride]


def make_windows(pairs, spec, L, stride=None, norm_stats=None, split="train"):
    """Slice aligned pairs into normalised windows.

    Training splits compute aggregate mean/std from their own data and
    default to stride ``L/2``; evaluation splits must be given the training
    ``norm_stats`` and default to stride ``L``.
    """
    if isinstance(pairs, AlignedPair):
        pairs = [pairs]
    if split not in ("train", "eval"):
        raise DataError(f"split must be 'train' or 'eval', got {split!r}")
    if split == "eval" and norm_stats is None:
        raise DataError("evaluation windows need training normalisation stats")
    if stride is None:
        stride = L // 2 if split == "train" else L
    segs = [(s, p.house) for p in pairs for s in p.segments if s.mains.size >= L]
    if not segs:
        raise DataError(f"no segment is at least {L} samples long")
    if norm_stats is None:
        allm = np.concatenate([s.mains for s, _ in segs])
        std = float(allm.std())
        norm_stats = NormStats(float(allm.mean()), std if std > 0 else 1.0, float(spec.cutoff_watts))
    agg, tgt, sts, houses = [], [], [], []
    for seg, house in segs:
        status = on_off_status(seg.appliance, spec).astype(np.float64)
        agg.append(_windows(norm_stats.normalize_aggregate(seg.mains), L, stride))
        tgt.append(_windows(norm_stats.normalize_power(seg.appliance), L, stride))
        sts.append(_windows(status, L, stride))
        houses.append(np.full(agg[-1].shape[0], house, dtype=np.int64))
    return WindowedDataset(np.concatenate(agg), np.concatenate(tgt), np.concatenate(sts),
                           norm_stats, spec, np.concatenate(houses))


# -- synthetic houses -------------------------------------------------------

@dataclass(frozen=True)
class Archetype:
    """Appliance simulated as alternating on/off periods.

    Period lengths are uniform in [0.5, 1.5] x their mean; the mean off time
    follows from ``duty_cycle``. ``cycler`` appliances add a start-up surge of
    ``surge`` x power for ``surge_sec`` seconds at every switch-on.
    """

    name: str
    power: float
    mean_on_sec: float
    duty_cycle: float
    noise_std: float = 0.0
    kind: str = "two_state"
    surge: float = 2.0
    surge_sec: int = 5


@dataclass(frozen=True)
class SyntheticSpec:
    duration_sec: int = 50_000
    archetypes: tuple = (
        Archetype("heater", 1500.0, 600.0, 0.35, noise_std=15.0),
        # short motor cycles, so a 32 s window regularly holds a transition
        Archetype("pump", 250.0, 20.0, 0.2, noise_std=5.0, kind="cycler", surge_sec=3),
    )
    baseline_watts: float = 60.0
    noise_std: float = 10.0
    seed: int = 0
    start_time: int = 1_303_132_929


SYNTH_APPLIANCES = {
    "heater": ApplianceSpec("heater", 2000, 300, 30, 30),
    "pump": ApplianceSpec("pump", 600, 100, 5, 3),
}


def _on_flags(arch, duration, rng):
    d = arch.duty_cycle
    if not 0 < d < 1:
        raise DataError(f"{arch.name}: duty cycle must be in (0, 1)")
    mean_off = arch.mean_on_sec * (1 - d) / d
    flags = np.zeros(duration, dtype=bool)
    state = bool(rng.random(1)[0] < d)
    # random phase into the first period
    t = -int(rng.random(1)[0] * (arch.mean_on_sec if state else mean_off))
    starts = []
    while t < duration:
        mean = arch.mean_on_sec if state else mean_off
        length = max(1, int(round(mean * rng.uniform(0.5, 1.5, 1)[0])))
        if state:
            flags[max(t, 0):max(t + length, 0)] = True
            if t >= 0:
                starts.append(t)
        t += length
        state = not state
    return flags, starts


def synth_generate(spec):
    """Returns ``(mains, {name: ChannelSeries})``; fully determined by ``spec.seed``."""
    rng = SeededRng(spec.seed)
    n = int(spec.duration_sec)
    ts = spec.start_time + np.arange(n, dtype=np.float64)
    channels = {}
    total = np.full(n, float(spec.baseline_watts))
    for i, arch in enumerate(spec.archetypes):
        r = rng.substream(i)
        flags, starts = _on_flags(arch, n, r)
        p = np.where(flags, arch.power, 0.0)
        if arch.kind == "cycler":
            for s in starts:
                p[s:s + arch.surge_sec] = arch.power * arch.surge
        if arch.noise_std > 0:
            p = np.where(flags, p + r.normal(0.0, arch.noise_std, n), 0.0)
        p = np.maximum(p, 0.0)
        channels[arch.name] = ChannelSeries(ts, p)
        total += p
    if spec.noise_std > 0:
        total = total + rng.substream(len(spec.archetypes)).normal(0.0, spec.noise_std, n)
    return ChannelSeries(ts, np.maximum(total, 0.0)), channels


def write_synthetic_dataset(spec, outdir, house=1, train_fraction=0.8):
    """Write one synthetic house in REDD layout plus ``manifest.json``."""
    mains, channels = synth_generate(spec)
    hdir = os.path.join(outdir, f"house_{house}")
    os.makedirs(hdir, exist_ok=True)
    files = {"mains": [f"house_{house}/channel_1.dat"]}
    write_redd_channel(os.path.join(outdir, files["mains"][0]), mains)
    for i, (name, series) in enumerate(channels.items(), start=2):
        rel = f"house_{house}/channel_{i}.dat"
        write_redd_channel(os.path.join(outdir, rel), series)
        files[name] = [rel]
    manifest = {
        "format": "redd_low_freq",
        "houses": [{"house": house, "split": "time", "train_fraction": train_fraction, "channels": files}],
        "appliances": {name: asdict(SYNTH_APPLIANCES[name]) for name in channels if name in SYNTH_APPLIANCES},
    }
    path = os.path.join(outdir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# -- manifests --------------------------------------------------------------

def redd_manifest(root, appliances=tuple(APPLIANCES), test_house=REDD_TEST_HOUSE):
    """Manifest for an unpacked REDD ``low_freq`` directory (``house_N/labels.dat``)."""
    houses = []
    for entry in sorted(os.listdir(root)):
        m = re.fullmatch(r"house_(\d+)", entry)
        if not m:
            continue
        house = int(m.group(1))
        labels_path = os.path.join(root, entry, "labels.dat")
        if not os.path.exists(labels_path):
            continue
        by_label = {}
        with open(labels_path) as fh:
            for line in fh:
                parts = line.split()
                if len(parts) == 2:
                    by_label.setdefault(parts[1], []).append(f"{entry}/channel_{parts[0]}.dat")
        channels = {"mains": by_label.get("mains", [])}
        for app in appliances:
            files = [f for lab in REDD_LABELS.get(app, (app,)) for f in by_label.get(lab, [])]
            if files:
                channels[app] = files
        houses.append({"house": house, "split": "test" if house == test_house else "train",
                       "channels": channels})
    return {"format": "redd_low_freq", "houses": houses,
            "appliances": {a: asdict(APPLIANCES[a]) for a in appliances if a in APPLIANCES}}


def load_manifest(path):
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read manifest {path}: {e}") from None
    manifest["_root"] = os.path.dirname(os.path.abspath(path))
    return manifest


def appliance_spec(manifest, name):
    specs = manifest.get("appliances", {})
    if name in specs:
        return ApplianceSpec(**specs[name])
    if name in APPLIANCES:
        return APPLIANCES[name]
    raise DataError(f"no appliance spec for {name!r}")


def _time_split(pair, fraction, part):
    starts = [s.timestamps[0] for s in pair.segments]
    stops = [s.timestamps[-1] for s in pair.segments]
    cut = min(starts) + fraction * (max(stops) - min(starts))
    out = []
    for s in pair.segments:
        keep = s.timestamps < cut if part == "train" else s.timestamps >= cut
        if keep.any():
            out.append(Segment(s.timestamps[keep], s.mains[keep], s.appliance[keep]))
    return AlignedPair(out, pair.house)


def split_pairs(manifest, appliance, part, min_len=1):
    """Aligned pairs of ``appliance`` for ``part`` (``train`` or ``test``)."""
    root = manifest.get("_root", ".")
    pairs = []
    for h in manifest["houses"]:
        split = h.get("split", "train")
        if split not in ("train", "test", "time"):
            raise DataError(f"house {h.get('house')}: unknown split {split!r}")
        if split != "time" and split != part:
            continue
        ch = h["channels"]
        if appliance not in ch or not ch.get("mains"):
            continue
        mains = sum_channels([load_redd_channel(os.path.join(root, f)) for f in ch["mains"]])
        app = sum_channels([load_redd_channel(os.path.join(root, f)) for f in ch[appliance]])
        pair = align_resample(mains, app, house=int(h["house"]))
        if split == "time":
            pair = _time_split(pair, float(h.get("train_fraction", 0.8)), part)
        pair.segments = [s for s in pair.segments if s.mains.size >= min_len]
        if pair.segments:
            pairs.append(pair)
    if not pairs:
        raise DataError(f"no {part} data for appliance {appliance!r}")
    return pairs


def build_datasets(manifest, appliance, L=DEFAULT_WINDOW):
    """Training and held-out windows for one appliance, sharing training stats."""
    if isinstance(manifest, str):
        manifest = load_manifest(manifest)
    spec = appliance_spec(manifest, appliance)
    train = make_windows(split_pairs(manifest, appliance, "train", L), spec, L, split="train")
    test = make_windows(split_pairs(manifest, appliance, "test", L), spec, L,
                        norm_stats=train.stats, split="eval")
    return train, test


def synthetic_split(spec, appliance, part, train_fraction=0.8):
    """``(ApplianceSpec, AlignedPair)`` for one chronological part of a synthetic house."""
    mains, channels = synth_generate(spec)
    if appliance not in channels:
        raise DataError(f"synthetic spec has no appliance {appliance!r}")
    app_spec = SYNTH_APPLIANCES.get(appliance) or APPLIANCES.get(appliance)
    if app_spec is None:
        raise DataError(f"no appliance spec for {appliance!r}")
    pair = align_resample(mains, channels[appliance], house=1)
    return app_spec, _time_split(pair, train_fraction, part)


def build_synthetic_datasets(spec, appliance, L, train_fraction=0.8):
    """In-memory counterpart of writing a synthetic house and reading it back."""
    app_spec, train_pair = synthetic_split(spec, appliance, "train", train_fraction)
    _, test_pair = synthetic_split(spec, appliance, "test", train_fraction)
    train = make_windows(train_pair, app_spec, L, split="train")
    test = make_windows(test_pair, app_spec, L, norm_stats=train.stats, split="eval")
    return train, test
