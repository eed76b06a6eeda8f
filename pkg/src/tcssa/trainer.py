"""Synthetic bag data, Adam, and the training / evaluation loop."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .gradients import GradientSet, backward, forward
from .losses import LossBreakdown, LossConstants
from .numerics import InvalidConfigError, InvalidInputError, NumericalError, RngState
from .params import ModelParams, init_params
from .router import RoutingStats


@dataclass
class SyntheticBagConfig:
    """Bags of patch features drawn from Gaussian tissue-pattern clusters.

    Cluster centres sit on scaled orthonormal directions so every pair is
    `separation` noise-stddevs apart.  Every patch also carries a common
    `offset` vector, as pretrained patch embeddings do.  Negative bags hold
    background clusters only; positive bags replace `evidence_fraction` of
    their patches with draws from the evidence cluster.
    """

    n_patches: int = 1024
    dim: int = 16
    n_clusters: int = 6
    evidence_cluster: int = 0
    evidence_fraction: float = 0.02
    separation: float = 4.0
    stddev: float = 1.0
    offset: float = 0.0
    label_noise: float = 0.0
    n_train: int = 64
    n_val: int = 32
    n_test: int = 64

    def validate(self):
        if not 0.0 < self.evidence_fraction < 1.0:
            raise InvalidConfigError("evidence_fraction must lie in (0, 1)")
        if self.n_clusters < 2 or self.n_clusters > self.dim:
            raise InvalidConfigError("need 2 <= n_clusters <= dim")
        if not 0 <= self.evidence_cluster < self.n_clusters:
            raise InvalidConfigError("evidence_cluster out of range")
        if self.evidence_fraction * self.n_patches < 1.0:
            raise InvalidConfigError("evidence_fraction * n_patches < 1: positive bags would hold no evidence")
        if not 0.0 <= self.label_noise < 0.5:
            raise InvalidConfigError("label_noise must lie in [0, 0.5)")
        if self.separation < 0 or self.stddev <= 0:
            raise InvalidConfigError("separation must be >= 0 and stddev > 0")


@dataclass
class Dataset:
    features: np.ndarray  # bags x N x D
    labels: np.ndarray  # observed labels (after label noise)
    evidence: np.ndarray  # bags x N bool, true evidence patches

    def __len__(self):
        return self.features.shape[0]


@dataclass
class SyntheticData:
    train: Dataset
    val: Dataset
    test: Dataset
    centers: np.ndarray
    config: SyntheticBagConfig


def cluster_centers(config: SyntheticBagConfig, rng: RngState) -> np.ndarray:
    g = rng.generator.standard_normal((config.dim, config.dim))
    q, _ = np.linalg.qr(g)
    centers = q[:, : config.n_clusters].T * (config.separation * config.stddev / np.sqrt(2.0))
    shared = q[:, -1] if config.n_clusters < config.dim else np.ones(config.dim) / np.sqrt(config.dim)
    return centers + config.offset * config.stddev * shared


def _make_split(config, centers, n_bags, rng: RngState) -> Dataset:
    gen = rng.generator
    n, d = config.n_patches, config.dim
    background = [c for c in range(config.n_clusters) if c != config.evidence_cluster]
    n_ev = int(round(config.evidence_fraction * n))
    truth = np.zeros(n_bags, dtype=np.int64)
    truth[: n_bags // 2] = 1
    truth = gen.permutation(truth)
    feats = np.empty((n_bags, n, d))
    evid = np.zeros((n_bags, n), dtype=bool)
    for b in range(n_bags):
        mix = gen.dirichlet(np.full(len(background), 2.0))
        assign = np.asarray(background)[gen.choice(len(background), size=n, p=mix)]
        if truth[b]:
            pos = gen.choice(n, size=n_ev, replace=False)
            assign[pos] = config.evidence_cluster
            evid[b, pos] = True
        feats[b] = centers[assign] + config.stddev * gen.standard_normal((n, d))
    flip = gen.random(n_bags) < config.label_noise
    return Dataset(feats, np.where(flip, 1 - truth, truth), evid)


def generate_synthetic_bags(config: SyntheticBagConfig, seed: int) -> SyntheticData:
    config.validate()
    rng_c, rng_tr, rng_va, rng_te = RngState(seed).split(4)
    centers = cluster_centers(config, rng_c)
    return SyntheticData(
        train=_make_split(config, centers, config.n_train, rng_tr),
        val=_make_split(config, centers, config.n_val, rng_va),
        test=_make_split(config, centers, config.n_test, rng_te),
        centers=centers,
        config=config,
    )


def nearest_centroid_accuracy(data: SyntheticData, split: Dataset) -> float:
    """Solvability ceiling: label each patch by its nearest true centre, call a
    bag positive when its evidence count is above the midpoint between the
    mean counts of negative and positive training bags."""

    def counts(ds):
        d2 = ((ds.features[:, :, None, :] - data.centers[None, None]) ** 2).sum(-1)
        return (d2.argmin(-1) == data.config.evidence_cluster).sum(axis=1)

    tr = counts(data.train)
    lab = data.train.labels
    threshold = 0.5 * (tr[lab == 0].mean() + tr[lab == 1].mean())
    pred = (counts(split) > threshold).astype(np.int64)
    return float(np.mean(pred == split.labels))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **hyper) -> "AdamState":
        size = params.size if isinstance(params, ModelParams) else np.size(params)
        return cls(np.zeros(size), np.zeros(size), **hyper)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update.  Returns new params and state."""
    g = grads.flat() if isinstance(grads, GradientSet) else np.asarray(grads, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NumericalError("optimizer", "non-finite gradient")
    theta = params.flat() if isinstance(params, ModelParams) else np.asarray(params, dtype=np.float64)
    if g.shape != theta.shape:
        raise InvalidInputError(f"gradient size {g.size} vs parameter size {theta.size}")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_theta = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)
    if isinstance(params, ModelParams):
        return params.with_flat(new_theta), new_state
    return new_theta, new_state


@dataclass
class EpochRecord:
    epoch: int
    loss: LossBreakdown
    stats: RoutingStats
    val_accuracy: float


@dataclass
class TrainReport:
    init: EpochRecord
    epochs: list[EpochRecord]
    test_accuracy: float
    seed: int
    config: dict
    diverged: bool = False
    params: ModelParams | None = field(default=None, repr=False)

    @property
    def max_load_trajectory(self) -> list[float]:
        return [self.init.stats.max_load] + [r.stats.max_load for r in self.epochs]

    @property
    def final(self) -> EpochRecord:
        return self.epochs[-1] if self.epochs else self.init

    def to_text(self) -> str:
        """Line-oriented key=value records; floats in shortest round-trip form."""

        def rec(tag, r: EpochRecord):
            fields = [tag, f"epoch={r.epoch}"]
            fields += [f"{k}={v!r}" for k, v in r.loss.as_dict().items()]
            fields.append(f"val_accuracy={r.val_accuracy!r}")
            fields.append(f"max_load={r.stats.max_load!r}")
            fields.append("load=" + ",".join(repr(float(f)) for f in r.stats.load_fraction))
            fields.append("mean_prob=" + ",".join(repr(float(p)) for p in r.stats.mean_prob))
            return " ".join(fields)

        lines = ["# tcssa train report v1"]
        lines.append("config " + " ".join(f"{k}={v!r}" for k, v in sorted(self.config.items())))
        lines.append(rec("init", self.init))
        lines += [rec("epoch", r) for r in self.epochs]
        lines.append(
            f"final seed={self.seed} epochs={len(self.epochs)} diverged={self.diverged} "
            f"max_load={self.final.stats.max_load!r} test_accuracy={self.test_accuracy!r}"
        )
        return "\n".join(lines) + "\n"


def _batch_iter(n, batch_size, gen):
    order = gen.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def evaluate(params: ModelParams, dataset: Dataset, constants: LossConstants = LossConstants(),
             top_k: int = 2, batch_size: int = 64):
    """Accuracy, pooled routing stats and the item-weighted mean loss breakdown."""
    if len(dataset) == 0:
        raise InvalidInputError("empty dataset")
    correct, sums = 0, np.zeros(5)
    probs_sum, counts = 0.0, 0.0
    n_total = 0
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        tape = forward(params, dataset.features[sl], dataset.labels[sl], constants, top_k)
        nb = tape.n_items
        correct += int(np.sum(tape.class_logits.argmax(axis=1) == dataset.labels[sl]))
        lb = tape.loss
        sums += nb * np.array([lb.task, lb.switch, lb.entropy, lb.z, lb.total])
        probs_sum = probs_sum + tape.probs.sum(axis=0)
        counts = counts + np.bincount(tape.table.slots.ravel(), minlength=params.n_slots)
        n_total += tape.x.shape[0]
    n_items = len(dataset)
    stats = RoutingStats(probs_sum / n_total, counts / (n_total * top_k), n_total)
    task, sw, ent, z, total = sums / n_items
    return correct / n_items, stats, LossBreakdown(task, sw, ent, z, total, constants.lam)


def _record(epoch, params, data, constants, top_k) -> EpochRecord:
    _, stats, loss = evaluate(params, data.train, constants, top_k)
    val_acc = evaluate(params, data.val, constants, top_k)[0] if len(data.val) else float("nan")
    return EpochRecord(epoch, loss, stats, val_acc)


def train(
    data: SyntheticData,
    n_slots: int = 8,
    constants: LossConstants = LossConstants(),
    epochs: int = 40,
    batch_size: int = 8,
    lr: float = 1e-3,
    seed: int = 0,
    top_k: int = 2,
    params: ModelParams | None = None,
    **model_kw,
) -> TrainReport:
    if len(data.train) == 0:
        raise InvalidInputError("empty training set")
    rng_init, rng_order = RngState(seed).split(2)
    n_classes = int(max(data.train.labels.max(), 1)) + 1
    if params is None:
        params = init_params(rng_init, data.train.features.shape[2], n_slots, n_classes, **model_kw)
    config = {
        "slots": params.n_slots, "top_k": top_k, "lambda": constants.lam, "epochs": epochs,
        "batch": batch_size, "lr": lr, "seed": seed,
    }
    config.update({f"data.{k}": v for k, v in asdict(data.config).items()})
    state = AdamState.zeros_like(params, lr=lr)
    init = _record(0, params, data, constants, top_k)
    records: list[EpochRecord] = []
    diverged = False
    gen = rng_order.generator
    for epoch in range(1, epochs + 1):
        try:
            candidate, cstate = params, state
            with np.errstate(over="ignore", invalid="ignore"):
                for idx in _batch_iter(len(data.train), batch_size, gen):
                    tape = forward(candidate, data.train.features[idx], data.train.labels[idx], constants, top_k)
                    if not np.isfinite(tape.loss.total):
                        raise NumericalError("loss")
                    candidate, cstate = adam_step(candidate, backward(tape), cstate)
                rec = _record(epoch, candidate, data, constants, top_k)
            if not np.isfinite(rec.loss.total):
                raise NumericalError("loss")
        except (NumericalError, FloatingPointError):
            diverged = True
            break
        params, state = candidate, cstate
        records.append(rec)
    test_acc = evaluate(params, data.test, constants, top_k)[0] if len(data.test) else float("nan")
    return TrainReport(init, records, test_acc, seed, config, diverged, params)


def sampling_baseline(data: SyntheticData, n_samples: int, seed: int = 0, epochs: int = 200, lr: float = 1e-2) -> float:
    """Test accuracy of a linear head on the mean of `n_samples` random patches per bag."""
    gen = RngState(seed).generator

    def pooled(ds):
        n = ds.features.shape[1]
        picks = np.stack([gen.choice(n, size=n_samples, replace=False) for _ in range(len(ds))])
        return np.take_along_axis(ds.features, picks[:, :, None], axis=1).mean(axis=1)

    xtr, xte = pooled(data.train), pooled(data.test)
    ytr = data.train.labels
    n_classes = int(max(ytr.max(), 1)) + 1
    d = xtr.shape[1]
    theta = np.zeros(d * n_classes + n_classes)
    state = AdamState.zeros_like(theta, lr=lr)
    onehot = np.eye(n_classes)[ytr]
    for _ in range(epochs):
        w, b = theta[: d * n_classes].reshape(d, n_classes), theta[d * n_classes:]
        z = xtr @ w + b
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        dz = (p - onehot) / len(ytr)
        theta, state = adam_step(theta, np.concatenate([(xtr.T @ dz).ravel(), dz.sum(axis=0)]), state)
    w, b = theta[: d * n_classes].reshape(d, n_classes), theta[d * n_classes:]
    return float(np.mean((xte @ w + b).argmax(axis=1) == data.test.labels))


def slot_budget_sweep(data: SyntheticData, budgets=(8, 16, 32, 64), **train_kw) -> list[tuple[int, float, float]]:
    """(K, test accuracy, final max load) for each slot budget."""
    rows = []
    for k in budgets:
        rep = train(data, n_slots=k, **train_kw)
        rows.append((k, rep.test_accuracy, rep.final.stats.max_load))
    return rows
