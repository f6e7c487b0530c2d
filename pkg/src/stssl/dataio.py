"""Grid flow datasets: on-disk format, adjacency, windowing, scaling, synthesis."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FLOW_DTYPE = "<f4"


class DatasetError(ValueError):
    """Raised when a dataset directory cannot be loaded."""


@dataclass
class FlowDataset:
    rows: int
    cols: int
    interval_minutes: int
    flow: np.ndarray  # [S_total, N, 2]; channel 0 inflow, 1 outflow
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=np.float64)
        if self.flow.ndim != 3 or self.flow.shape[2] != 2:
            raise DatasetError(f"flow must be [steps, regions, 2], got {self.flow.shape}")
        if self.flow.shape[1] != self.rows * self.cols:
            raise DatasetError(
                f"{self.rows}x{self.cols} grid needs {self.rows * self.cols} regions, "
                f"flow has {self.flow.shape[1]}")
        if not np.isfinite(self.flow).all():
            raise DatasetError("flow contains non-finite values")
        if (self.flow < 0).any():
            raise DatasetError("flow contains negative values")

    @property
    def num_regions(self) -> int:
        return self.rows * self.cols

    @property
    def num_steps(self) -> int:
        return self.flow.shape[0]

    @property
    def steps_per_day(self) -> int:
        return max(1, 1440 // self.interval_minutes)


@dataclass
class Sample:
    inputs: np.ndarray  # [T, N, 2]
    target: np.ndarray  # [N, 2]
    target_step_index: int


def load_dataset(path) -> FlowDataset:
    path = Path(path)
    meta_path, blob_path = path / "meta.json", path / "flow.bin"
    for p in (meta_path, blob_path):
        if not p.is_file():
            raise DatasetError(f"missing dataset file: {p}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed {meta_path}: {exc}") from exc
    for key in ("rows", "cols", "interval_minutes", "num_steps"):
        if key not in meta:
            raise DatasetError(f"{meta_path} lacks key '{key}'")
    if meta.get("flow_dtype", "f32le") != "f32le":
        raise DatasetError(f"unsupported flow_dtype {meta['flow_dtype']!r}")
    if meta.get("layout", "step,region,channel") != "step,region,channel":
        raise DatasetError(f"unsupported layout {meta['layout']!r}")

    rows, cols, steps = int(meta["rows"]), int(meta["cols"]), int(meta["num_steps"])
    raw = blob_path.read_bytes()
    expected = steps * rows * cols * 2 * 4
    if len(raw) != expected:
        raise DatasetError(f"flow.bin holds {len(raw)} bytes, expected {expected} "
                           f"for {steps} steps x {rows * cols} regions x 2 channels")
    flow = np.frombuffer(raw, dtype=FLOW_DTYPE).reshape(steps, rows * cols, 2)

    labels = None
    labels_path = path / "labels.json"
    if labels_path.is_file():
        labels = np.asarray(json.loads(labels_path.read_text()), dtype=np.int64)
        if labels.shape != (rows * cols,):
            raise DatasetError(f"labels.json has {labels.size} entries, expected {rows * cols}")
    return FlowDataset(rows, cols, int(meta["interval_minutes"]), flow, labels)


def write_dataset(dataset: FlowDataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "rows": dataset.rows,
        "cols": dataset.cols,
        "interval_minutes": dataset.interval_minutes,
        "num_steps": dataset.num_steps,
        "flow_dtype": "f32le",
        "layout": "step,region,channel",
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    (path / "flow.bin").write_bytes(dataset.flow.astype(FLOW_DTYPE).tobytes())
    if dataset.labels is not None:
        (path / "labels.json").write_text(json.dumps([int(x) for x in dataset.labels]))


def build_grid_adjacency(rows: int, cols: int, neighborhood: int | str = 4) -> np.ndarray:
    """0/1 adjacency of a row-major grid, 4- or 8-connected."""
    if rows < 1 or cols < 1:
        raise ValueError("grid dimensions must be positive")
    neighborhood = int(str(neighborhood).split("-")[0])
    if neighborhood == 4:
        offsets = [(0, 1), (1, 0)]
    elif neighborhood == 8:
        offsets = [(0, 1), (1, 0), (1, 1), (1, -1)]
    else:
        raise ValueError(f"neighborhood must be 4 or 8, got {neighborhood}")
    n = rows * cols
    adj = np.zeros((n, n))
    for i in range(rows):
        for j in range(cols):
            for di, dj in offsets:
                ii, jj = i + di, j + dj
                if 0 <= ii < rows and 0 <= jj < cols:
                    a, b = i * cols + j, ii * cols + jj
                    adj[a, b] = adj[b, a] = 1.0
    return adj


def window_indices(num_steps: int, recent_steps: int, daily_steps: int,
                   steps_per_day: int) -> tuple[np.ndarray, np.ndarray]:
    """(input step indices [S, T], target indices [S]) for every valid target.

    Daily steps sit at the target's clock time on previous days, oldest first,
    and precede the recent steps.
    """
    if recent_steps < 1 or daily_steps < 0 or steps_per_day < 1:
        raise ValueError("need recent_steps >= 1, daily_steps >= 0, steps_per_day >= 1")
    first = max(recent_steps, daily_steps * steps_per_day)
    targets = np.arange(first, num_steps)
    offsets = np.array([-d * steps_per_day for d in range(daily_steps, 0, -1)]
                       + list(range(-recent_steps, 0)), dtype=np.int64)
    return targets[:, None] + offsets[None, :], targets


def make_windows(dataset: FlowDataset, recent_steps: int = 4, daily_steps: int = 3,
                 steps_per_day: int | None = None) -> list[Sample]:
    spd = steps_per_day or dataset.steps_per_day
    idx, targets = window_indices(dataset.num_steps, recent_steps, daily_steps, spd)
    return [Sample(dataset.flow[row], dataset.flow[t], int(t)) for row, t in zip(idx, targets)]


def chronological_split(n: int, ratios=(7, 1, 2)) -> tuple[range, range, range]:
    total = sum(ratios)
    n_train = n * ratios[0] // total
    n_val = n * ratios[1] // total
    return range(0, n_train), range(n_train, n_train + n_val), range(n_train + n_val, n)


def stack_samples(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([s.inputs for s in samples]), np.stack([s.target for s in samples]))


@dataclass
class Scaler:
    """Per-channel min-max map onto [-1, 1]."""

    min: np.ndarray
    max: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        return 2.0 * (x - self.min) / (self.max - self.min) - 1.0

    def inverse_transform(self, x: np.ndarray) -> np.ndarray:
        return (x + 1.0) * 0.5 * (self.max - self.min) + self.min

    def to_dict(self) -> dict:
        return {"min": self.min.tolist(), "max": self.max.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(np.asarray(d["min"], dtype=np.float64), np.asarray(d["max"], dtype=np.float64))


def fit_scaler(train_samples) -> Scaler:
    """Fit on training inputs and targets; accepts Samples or a raw [..., 2] array."""
    if isinstance(train_samples, np.ndarray):
        values = train_samples.reshape(-1, 2)
    else:
        if not train_samples:
            raise ValueError("cannot fit a scaler on zero samples")
        values = np.concatenate([np.concatenate([s.inputs.reshape(-1, 2), s.target])
                                 for s in train_samples])
    lo, hi = values.min(axis=0), values.max(axis=0)
    if np.any(hi <= lo):
        raise ValueError(f"degenerate channel range: min={lo}, max={hi}")
    return Scaler(lo.astype(np.float64), hi.astype(np.float64))


def transform(x: np.ndarray, scaler: Scaler) -> np.ndarray:
    return scaler.transform(x)


def inverse_transform(x: np.ndarray, scaler: Scaler) -> np.ndarray:
    return scaler.inverse_transform(x)


# ------------------------------------------------------------------ synthetic

@dataclass
class SynthSpec:
    rows: int = 8
    cols: int = 8
    num_steps: int = 2000
    interval_minutes: int = 30
    regimes: int = 2
    noise: float = 1.0
    # amplitude multiplier applied on days 5 and 6 of each week
    weekend_factor: float = 0.5
    base_range: tuple = (5.0, 40.0)
    amp_range: tuple = (20.0, 80.0)

    @property
    def steps_per_day(self) -> int:
        return 1440 // self.interval_minutes


def regime_labels(rows: int, cols: int, regimes: int) -> np.ndarray:
    """Contiguous vertical bands of columns, row-major region order."""
    n = rows * cols
    if regimes < 1 or regimes > n:
        raise ValueError(f"regime count must be in [1, {n}], got {regimes}")
    r, c = np.divmod(np.arange(n), cols)
    # rank in column-major order, cut into equal runs
    rank = c * rows + r
    return (rank * regimes) // n


def synth_mean(spec: SynthSpec, params: dict, labels: np.ndarray) -> np.ndarray:
    """Noise-free expected flow [S, N, 2]."""
    spd = spec.steps_per_day
    t = np.arange(spec.num_steps)
    phase = 2 * np.pi * (t % spd) / spd
    day = t // spd
    day_scale = np.where(day % 7 >= 5, spec.weekend_factor, 1.0)
    out = np.empty((spec.num_steps, labels.size, 2))
    for ch, lag in enumerate((0.0, params["outflow_lag"])):
        wave = np.maximum(0.0, np.sin(phase[:, None] + params["phase"][None, :] - lag))
        out[:, :, ch] = (params["base"][None, :]
                         + params["amp"][None, :] * day_scale[:, None] * wave)[:, labels]
    return out


def synth_generate(spec: SynthSpec | None = None, seed: int = 0) -> FlowDataset:
    """Grid flows with contiguous regimes of distinct daily profiles.

    Regime c has base level base_c, amplitude amp_c and phase 2πc/C; outflow
    lags inflow by a fixed π/6.  ``noise`` in [0, 1] blends the mean with a
    Poisson draw around it.
    """
    spec = spec or SynthSpec()
    if spec.regimes < 2:
        raise ValueError("need at least 2 regimes")
    labels = regime_labels(spec.rows, spec.cols, spec.regimes)
    rng = np.random.default_rng(seed)
    params = {
        "base": rng.uniform(*spec.base_range, size=spec.regimes),
        "amp": rng.uniform(*spec.amp_range, size=spec.regimes),
        "phase": 2 * np.pi * np.arange(spec.regimes) / spec.regimes,
        "outflow_lag": np.pi / 6,
    }
    mean_flow = synth_mean(spec, params, labels)
    if spec.noise > 0:
        draws = rng.poisson(mean_flow).astype(np.float64)
        flow = mean_flow + spec.noise * (draws - mean_flow)
    else:
        flow = mean_flow
    flow = np.maximum(flow, 0.0)
    return FlowDataset(spec.rows, spec.cols, spec.interval_minutes, flow, labels)
