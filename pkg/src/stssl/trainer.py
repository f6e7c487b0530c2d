"""Joint training of the prediction head with both self-supervised tasks."""
from __future__ import annotations

import copy
import dataclasses
import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import augment, dataio
from . import diffcore as dc
from .diffcore import Tensor
from .encoder import EncoderConfig, init_encoder_params, mlp_predict, normalize_adjacency, st_encode
from .spatial_ssl import cluster_purity, cluster_scores, sinkhorn_project, spatial_loss
from .temporal_ssl import city_summary, fuse_views, shifted_negatives, temporal_loss

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    D: int = 64
    kernel_size: int = 3
    num_blocks: int = 1
    K: int = 4
    gamma: float = 0.5
    epsilon: float = 0.05
    sinkhorn_iters: int = 100
    sinkhorn_tol: float = 1e-3
    lam: float = 0.5
    perturbation_ratio: float = 0.1
    recent_steps: int = 4
    daily_steps: int = 3
    steps_per_day: int | None = None
    neighborhood: int = 4
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 10
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    use_L_s: bool = True
    use_L_t: bool = True
    adaptive_mask: bool = True
    adaptive_rewire: bool = True

    def validate(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam must lie in [0, 1]")
        if not 0.0 <= self.perturbation_ratio <= 1.0:
            raise ConfigError("perturbation_ratio must lie in [0, 1]")
        for name in ("D", "kernel_size", "num_blocks", "batch_size", "recent_steps",
                     "sinkhorn_iters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.K < 2:
            raise ConfigError("K must be at least 2")
        if self.gamma <= 0 or self.epsilon <= 0 or self.lr <= 0:
            raise ConfigError("gamma, epsilon and lr must be positive")
        if self.daily_steps < 0 or self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("daily_steps and max_epochs must be >= 0, patience >= 1")
        if self.neighborhood not in (4, 8):
            raise ConfigError("neighborhood must be 4 or 8")
        self.encoder_config().validate(self.window_length)

    @property
    def window_length(self) -> int:
        return self.recent_steps + self.daily_steps

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(D=self.D, kernel_size=self.kernel_size, num_blocks=self.num_blocks)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**d)
        for name, f in known.items():
            value = getattr(cfg, name)
            expected = f.type if isinstance(f.type, str) else f.type.__name__
            if value is None:
                if "None" not in expected:
                    raise ConfigError(f"{name} may not be null")
            elif expected.startswith("bool") and not isinstance(value, bool):
                raise ConfigError(f"{name} must be a boolean")
            elif expected.startswith("int") and (isinstance(value, bool)
                                                 or not isinstance(value, int)):
                raise ConfigError(f"{name} must be an integer")
            elif expected.startswith("float") and (isinstance(value, bool)
                                                   or not isinstance(value, (int, float))):
                raise ConfigError(f"{name} must be a number")
        return cfg


# ---------------------------------------------------------------- parameters

def init_params(cfg: RunConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params = init_encoder_params(cfg.encoder_config(), rng)
    D = cfg.D
    extra = {
        "w0": rng.uniform(-1, 1, size=D) / math.sqrt(D),
        "prototypes": rng.standard_normal((cfg.K, D)) / math.sqrt(D),
        "w1": np.ones(D),
        "w2": np.ones(D),
        "W3": rng.uniform(-1, 1, size=(D, D)) / math.sqrt(D),
    }
    for name, value in extra.items():
        params[name] = Tensor(value, requires_grad=True, name=name)
    return params


def param_arrays(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def as_params(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}


# -------------------------------------------------------------------- losses

def prediction_loss(pred, true, lam: float) -> Tensor:
    """Σ_n λ|inflow err| + (1-λ)|outflow err|, averaged over a leading batch axis."""
    err = dc.abs(dc._as_tensor(pred) - np.asarray(true))
    weighted = err * np.array([lam, 1.0 - lam])
    per_sample = weighted.sum(axis=(-2, -1))
    return per_sample.mean() if per_sample.ndim else per_sample


def joint_loss(L_p, L_s, L_t, use_L_s: bool = True, use_L_t: bool = True):
    total = L_p
    if use_L_s:
        total = total + L_s
    if use_L_t:
        total = total + L_t
    return total


@dataclass
class AugmentedBatch:
    x: np.ndarray
    adj: np.ndarray  # [B, N, N]
    a_norm: np.ndarray
    mask: np.ndarray


def augment_batch(first_tc: np.ndarray, x: np.ndarray, adj: np.ndarray, w0: np.ndarray,
                  cfg: RunConfig, rng: np.random.Generator) -> AugmentedBatch:
    """Per-sample traffic masking and topology rewiring of a batch."""
    r = cfg.perturbation_ratio
    rel = augment.region_relevance(first_tc, w0)
    x_aug, mask = augment.traffic_mask(x, rel if cfg.adaptive_mask else None, r, rng)
    q = augment.heterogeneity(augment.region_summary(first_tc, rel))
    adjs = np.stack([augment.topology_rewire(adj, q[b] if cfg.adaptive_rewire else None, r, rng)
                     for b in range(x.shape[0])])
    return AugmentedBatch(x_aug, adjs, normalize_adjacency(adjs), mask)


@dataclass
class LossTerms:
    L_p: Tensor
    L_s: Tensor
    L_t: Tensor
    joint: Tensor
    aug: AugmentedBatch | None = None
    targets: np.ndarray | None = None
    H: Tensor | None = None
    H_aug: Tensor | None = None


def compute_losses(params: dict[str, Tensor], cfg: RunConfig, x: np.ndarray, y: np.ndarray,
                   adj: np.ndarray, a_norm: np.ndarray, rng: np.random.Generator | None = None,
                   aug: AugmentedBatch | None = None,
                   targets: np.ndarray | None = None) -> LossTerms:
    """One batch: encode G, augment and encode G̃, compute the three losses.

    Passing ``aug`` and ``targets`` freezes the random draws and the
    cluster targets, which makes the loss a deterministic function of params.
    """
    enc = cfg.encoder_config()
    first, H = st_encode(x, a_norm, params, enc)
    L_p = prediction_loss(mlp_predict(H, params), y, cfg.lam)
    zero = Tensor(0.0)
    if not (cfg.use_L_s or cfg.use_L_t):
        return LossTerms(L_p, zero, zero, L_p, H=H)

    if aug is None:
        aug = augment_batch(first.data, x, adj, params["w0"].data, cfg, rng)
    _, H_aug = st_encode(aug.x, aug.a_norm, params, enc)

    L_s = zero
    if cfg.use_L_s:
        if targets is None:
            aug_logits = cluster_scores(H_aug.data, params["prototypes"].data)
            res = sinkhorn_project(aug_logits, cfg.epsilon, cfg.sinkhorn_iters, cfg.sinkhorn_tol)
            targets = res.assignment
        L_s = spatial_loss(cluster_scores(H, params["prototypes"]), targets, cfg.gamma)

    L_t = zero
    if cfg.use_L_t and x.shape[0] > 1:
        V = fuse_views(H, H_aug, params["w1"], params["w2"])
        L_t = temporal_loss(V, shifted_negatives(V), city_summary(V), params["W3"])

    joint = joint_loss(L_p, L_s, L_t, cfg.use_L_s, cfg.use_L_t)
    return LossTerms(L_p, L_s, L_t, joint, aug, targets, H, H_aug)


# ------------------------------------------------------------------ metrics

MAPE_THRESHOLD = 1.0


def flow_metrics(pred: np.ndarray, true: np.ndarray, threshold: float = MAPE_THRESHOLD) -> dict:
    """MAE and MAPE (percent) per channel on de-normalized flows [..., 2]."""
    out = {}
    for ch, tag in ((0, "in"), (1, "out")):
        p, t = pred[..., ch].ravel(), true[..., ch].ravel()
        out[f"MAE_{tag}"] = float(np.abs(p - t).mean())
        keep = t >= threshold
        out[f"MAPE_{tag}"] = (float(np.mean(np.abs(p[keep] - t[keep]) / t[keep]) * 100.0)
                              if keep.any() else None)
        out[f"MAPE_{tag}_excluded"] = int((~keep).sum())
    return out


class HistoricalAverage:
    """Per-region mean flow of each time-of-day slot over training steps."""

    def __init__(self, train_flow: np.ndarray, steps_per_day: int, start_step: int = 0):
        self.steps_per_day = steps_per_day
        slots = (start_step + np.arange(train_flow.shape[0])) % steps_per_day
        self.table = np.full((steps_per_day,) + train_flow.shape[1:], np.nan)
        for s in range(steps_per_day):
            rows = train_flow[slots == s]
            if len(rows):
                self.table[s] = rows.mean(axis=0)

    def predict(self, target_step: int) -> np.ndarray:
        out = self.table[target_step % self.steps_per_day]
        if np.isnan(out).any():
            raise ValueError(f"no training observation at slot {target_step % self.steps_per_day}")
        return out.copy()


def historical_average_predict(train_flow: np.ndarray, target_clock_index: int,
                               steps_per_day: int) -> np.ndarray:
    return HistoricalAverage(train_flow, steps_per_day).predict(target_clock_index)


# ----------------------------------------------------------------- pipeline

@dataclass
class PreparedData:
    samples: list
    train: list
    val: list
    test: list
    scaler: dataio.Scaler
    adj: np.ndarray
    a_norm: np.ndarray
    steps_per_day: int
    train_end_step: int  # exclusive bound of steps visible to training


def prepare_data(cfg: RunConfig, dataset: dataio.FlowDataset) -> PreparedData:
    spd = cfg.steps_per_day or dataset.steps_per_day
    samples = dataio.make_windows(dataset, cfg.recent_steps, cfg.daily_steps, spd)
    tr, va, te = dataio.chronological_split(len(samples))
    train = [samples[i] for i in tr]
    if not train:
        raise ConfigError(f"dataset of {dataset.num_steps} steps yields no training samples")
    scaler = dataio.fit_scaler(train)
    adj = dataio.build_grid_adjacency(dataset.rows, dataset.cols, cfg.neighborhood)
    return PreparedData(samples, train, [samples[i] for i in va], [samples[i] for i in te],
                        scaler, adj, normalize_adjacency(adj), spd,
                        train[-1].target_step_index + 1)


def predict(params: dict[str, Tensor], cfg: RunConfig, samples: list, scaler: dataio.Scaler,
            a_norm: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """De-normalized predictions [S, N, 2] on the original graph."""
    enc = cfg.encoder_config()
    out = []
    with dc.no_grad():
        for i in range(0, len(samples), batch_size):
            x, _ = dataio.stack_samples(samples[i:i + batch_size])
            _, H = st_encode(scaler.transform(x), a_norm, params, enc)
            out.append(scaler.inverse_transform(mlp_predict(H, params).data))
    return np.concatenate(out)


@dataclass
class EpochRecord:
    epoch: int
    L_p: float
    L_s: float
    L_t: float
    L_joint: float
    val_MAE_in: float
    val_MAE_out: float


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: RunConfig
    scaler: dataio.Scaler
    rows: int
    cols: int
    interval_minutes: int
    best_epoch: int = 0
    extra: dict = field(default_factory=dict)

    def tensors(self) -> dict[str, Tensor]:
        return as_params(self.params)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[EpochRecord]
    data: PreparedData
    stopped_early: bool = False


def _rng_streams(seed: int):
    init, shuffle, aug = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init), np.random.default_rng(shuffle),
            np.random.default_rng(aug))


def train(cfg: RunConfig, dataset: dataio.FlowDataset, progress=None) -> TrainResult:
    cfg.validate()
    data = prepare_data(cfg, dataset)
    init_rng, shuffle_rng, aug_rng = _rng_streams(cfg.seed)
    params = init_params(cfg, init_rng)
    opt = dc.Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)

    x_all, y_all = dataio.stack_samples(data.train)
    x_all, y_all = data.scaler.transform(x_all), data.scaler.transform(y_all)
    val_true = dataio.stack_samples(data.val)[1] if data.val else None

    best = (math.inf, param_arrays(params), 0)
    history: list[EpochRecord] = []
    stopped = False
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(x_all))
        sums = np.zeros(4)
        n_batches = 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            terms = compute_losses(params, cfg, x_all[idx], y_all[idx], data.adj, data.a_norm,
                                   rng=aug_rng)
            opt.zero_grad()
            dc.backward(terms.joint)
            opt.step()
            sums += [terms.L_p.item(), terms.L_s.item(), terms.L_t.item(), terms.joint.item()]
            n_batches += 1
        means = sums / n_batches

        if val_true is not None:
            val_pred = predict(params, cfg, data.val, data.scaler, data.a_norm)
            m = flow_metrics(val_pred, val_true)
            val_in, val_out = m["MAE_in"], m["MAE_out"]
        else:
            val_in = val_out = float(means[0])
        rec = EpochRecord(epoch, *map(float, means), val_in, val_out)
        history.append(rec)
        if progress:
            progress(rec)
        log.info("epoch %d  L_p %.4f  L_s %.4f  L_t %.4f  joint %.4f  val MAE %.3f/%.3f",
                 epoch, *means, val_in, val_out)

        score = (val_in + val_out) / 2
        if score < best[0]:
            best = (score, param_arrays(params), epoch)
        elif epoch - best[2] >= cfg.patience:
            stopped = True
            log.info("early stop at epoch %d (best %d)", epoch, best[2])
            break

    ckpt = Checkpoint(best[1], copy.deepcopy(cfg), data.scaler, dataset.rows, dataset.cols,
                      dataset.interval_minutes, best_epoch=best[2])
    return TrainResult(ckpt, history, data, stopped)


def evaluate(checkpoint: Checkpoint, samples: list, a_norm: np.ndarray | None = None) -> dict:
    if not samples:
        raise ValueError("evaluate needs at least one sample")
    if a_norm is None:
        adj = dataio.build_grid_adjacency(checkpoint.rows, checkpoint.cols,
                                          checkpoint.config.neighborhood)
        a_norm = normalize_adjacency(adj)
    pred = predict(checkpoint.tensors(), checkpoint.config, samples, checkpoint.scaler, a_norm)
    return flow_metrics(pred, dataio.stack_samples(samples)[1])


def historical_average_metrics(dataset: dataio.FlowDataset, data: PreparedData,
                               samples: list) -> dict:
    ha = HistoricalAverage(dataset.flow[:data.train_end_step], data.steps_per_day)
    pred = np.stack([ha.predict(s.target_step_index) for s in samples])
    return flow_metrics(pred, dataio.stack_samples(samples)[1])


def region_assignments(checkpoint: Checkpoint, samples: list, a_norm: np.ndarray) -> np.ndarray:
    """Balanced soft assignment snapshots [S, N, K], one per sample (original graph)."""
    cfg = checkpoint.config
    params = checkpoint.tensors()
    out = []
    with dc.no_grad():
        for i in range(0, len(samples), 64):
            x, _ = dataio.stack_samples(samples[i:i + 64])
            _, H = st_encode(checkpoint.scaler.transform(x), a_norm, params, cfg.encoder_config())
            logits = cluster_scores(H.data, params["prototypes"].data)
            out.append(sinkhorn_project(logits, cfg.epsilon, cfg.sinkhorn_iters,
                                        cfg.sinkhorn_tol).assignment)
    return np.concatenate(out)


def snapshot_purity(snapshots: np.ndarray, labels: np.ndarray) -> float:
    """Mean purity of the per-snapshot argmax clusters."""
    return float(np.mean([cluster_purity(z.argmax(axis=1), labels) for z in snapshots]))


def write_history_csv(path, history: list[EpochRecord]) -> None:
    cols = [f.name for f in fields(EpochRecord)]
    lines = [",".join(cols)]
    for rec in history:
        lines.append(",".join(repr(getattr(rec, c)) for c in cols))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def mini_gradient_check(seed: int = 0, eps: float = 1e-6) -> float:
    """Finite-difference check of the joint loss on a 2x3 grid, T=7, D=8, K=3.

    The augmentation draws and the cluster targets are frozen after one
    forward pass so the loss is a deterministic function of the parameters.
    At initialization the hidden ReLU inputs are ~1e-3 in size, so steps much
    above 1e-6 regularly straddle a kink and report a spurious mismatch.
    """
    cfg = RunConfig(D=8, K=3, batch_size=2, seed=seed)
    init_rng, _, aug_rng = _rng_streams(seed)
    params = init_params(cfg, init_rng)
    adj = dataio.build_grid_adjacency(2, 3)
    a_norm = normalize_adjacency(adj)
    x = init_rng.uniform(0, 1, size=(2, cfg.window_length, 6, 2))
    y = init_rng.uniform(0, 1, size=(2, 6, 2))
    with dc.no_grad():
        first = compute_losses(params, cfg, x, y, adj, a_norm, rng=aug_rng)

    def f(p):
        return compute_losses(p, cfg, x, y, adj, a_norm, aug=first.aug,
                              targets=first.targets).joint

    return dc.finite_difference_check(f, params, eps)
