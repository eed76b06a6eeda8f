"""Batched forward pass with cached intermediates, hand-derived backward pass,
and a central-difference oracle to check it against.

Gradient conventions: the Top-k mask and the load fractions f_k are treated
as constants; gradients reach the gate through the selected probabilities,
the mean probabilities P_k and the z-loss.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .aggregator import mlp_hidden, mlp_output
from .losses import LossBreakdown, LossConstants, combine
from .numerics import ACTIVATIONS, InvalidInputError, NumericalError, ShapeError, as_matrix
from .params import ModelParams
from .router import RoutingStats, RoutingTable


@dataclass
class ForwardTape:
    x: np.ndarray  # all patches of the batch, stacked (Ntot x D)
    item: np.ndarray  # batch item of every patch
    labels: np.ndarray | None
    logits: np.ndarray
    probs: np.ndarray
    lse: np.ndarray
    table: RoutingTable
    denom: np.ndarray  # B x K, sum of weights + delta
    raw: np.ndarray  # B x K x D
    hidden: np.ndarray  # B x K x H pre-activations
    act: np.ndarray
    tokens: np.ndarray  # B x K x D'
    pooled: np.ndarray  # B x D'
    class_logits: np.ndarray  # B x C
    stats: RoutingStats
    loss: LossBreakdown | None
    params: ModelParams = field(repr=False)
    constants: LossConstants = field(repr=False)

    @property
    def n_items(self) -> int:
        return self.class_logits.shape[0]


@dataclass
class GradientSet:
    grads: dict[str, np.ndarray]

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads.values()])

    def __getitem__(self, name):
        return self.grads[name]


def _check(layer, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError(layer)


def stack_batch(batch) -> tuple[np.ndarray, np.ndarray]:
    xs = [as_matrix(x, "features") for x in batch]
    if not xs:
        raise InvalidInputError("empty batch")
    if any(x.shape[0] == 0 for x in xs):
        raise InvalidInputError("batch item with no patches")
    item = np.repeat(np.arange(len(xs), dtype=np.int64), [x.shape[0] for x in xs])
    return np.concatenate(xs, axis=0), item


def forward(
    params: ModelParams,
    batch,
    labels=None,
    constants: LossConstants = LossConstants(),
    top_k: int = 2,
) -> ForwardTape:
    """Run the whole pipeline on a list of N_i x D arrays.

    Routing statistics and the auxiliary losses are pooled over every patch of
    the batch; the task loss is the mean cross-entropy over items.
    """
    if isinstance(batch, np.ndarray) and batch.ndim == 3:
        batch = list(batch)
    x, item = stack_batch(batch)
    w = params.gate.weight
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"feature dim {x.shape[1]} vs gate dim {w.shape[1]}")
    n_items, n_slots = int(item[-1]) + 1, w.shape[0]
    if not 1 <= top_k <= n_slots:
        raise ShapeError(f"top_k={top_k} with {n_slots} slots")

    logits = x @ w.T
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    se = e.sum(axis=1, keepdims=True)
    probs = e / se
    lse = (m + np.log(se))[:, 0]
    _check("gate", logits, probs)

    idx, val = _kernels.topk(probs, top_k)
    table = RoutingTable(idx, val, n_slots)
    num, den = _kernels.scatter_slots(x, idx, val, item, n_items, n_slots)
    denom = den + constants.delta
    raw = num / denom[:, :, None]
    _check("pooling", raw)

    mlp = params.slot_mlp
    fn, _ = ACTIVATIONS[mlp.activation]
    hidden = mlp_hidden(raw, mlp)
    act = fn(hidden)
    tokens = mlp_output(act, mlp)
    if mlp.residual:
        tokens = tokens + raw
    _check("slot_mlp", tokens)

    pooled = tokens.mean(axis=1)
    class_logits = pooled @ params.head_w + params.head_b
    _check("head", class_logits)

    n = x.shape[0]
    stats = RoutingStats(
        mean_prob=probs.mean(axis=0),
        load_fraction=np.bincount(idx.ravel(), minlength=n_slots) / (n * top_k),
        n_patches=n,
    )

    loss = None
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64).ravel()
        if labels.size != n_items:
            raise ShapeError(f"{labels.size} labels for {n_items} items")
        if labels.min() < 0 or labels.max() >= class_logits.shape[1]:
            raise InvalidInputError("label out of range")
        cm = class_logits.max(axis=1)
        clse = cm + np.log(np.exp(class_logits - cm[:, None]).sum(axis=1))
        task = float(np.mean(clse - class_logits[np.arange(n_items), labels]))
        p = stats.mean_prob
        sw = n_slots * float(p @ stats.load_fraction)
        ent = 1.0 + float(np.sum(p * np.log(p + constants.epsilon))) / np.log(n_slots)
        zl = constants.alpha * float(np.mean(lse * lse))
        loss = combine(task, sw, ent, zl, constants)

    return ForwardTape(
        x=x, item=item, labels=labels, logits=logits, probs=probs, lse=lse,
        table=table, denom=denom, raw=raw, hidden=hidden, act=act, tokens=tokens,
        pooled=pooled, class_logits=class_logits, stats=stats, loss=loss,
        params=params, constants=constants,
    )


def backward(tape: ForwardTape, constants: LossConstants | None = None) -> GradientSet:
    """Gradient of the total loss with respect to every parameter."""
    if tape.labels is None:
        raise InvalidInputError("backward needs a tape computed with labels")
    c = constants or tape.constants
    params = tape.params
    mlp = params.slot_mlp
    b, n_slots = tape.n_items, params.n_slots
    n = tape.x.shape[0]
    lam = c.lam

    # head: mean cross-entropy over items
    y = tape.class_logits
    sy = np.exp(y - y.max(axis=1, keepdims=True))
    sy /= sy.sum(axis=1, keepdims=True)
    sy[np.arange(b), tape.labels] -= 1.0
    dy = sy / b
    g_head_w = tape.pooled.T @ dy
    g_head_b = dy.sum(axis=0)
    dpooled = dy @ params.head_w.T
    dtok = np.broadcast_to(dpooled[:, None, :] / n_slots, tape.tokens.shape)
    _check("head", g_head_w, dpooled)

    # slot MLP
    _, dfn = ACTIVATIONS[mlp.activation]
    if mlp.per_slot:
        g_w2 = np.einsum("bkh,bke->khe", tape.act, dtok)
        g_b2 = dtok.sum(axis=0)
        dact = np.einsum("bke,khe->bkh", dtok, mlp.w2)
        dhid = dact * dfn(tape.hidden)
        g_w1 = np.einsum("bkd,bkh->kdh", tape.raw, dhid)
        g_b1 = dhid.sum(axis=0)
        draw = np.einsum("bkh,kdh->bkd", dhid, mlp.w1)
    else:
        g_w2 = np.einsum("bkh,bke->he", tape.act, dtok)
        g_b2 = dtok.sum(axis=(0, 1))
        dact = dtok @ mlp.w2.T
        dhid = dact * dfn(tape.hidden)
        g_w1 = np.einsum("bkd,bkh->dh", tape.raw, dhid)
        g_b1 = dhid.sum(axis=(0, 1))
        draw = dhid @ mlp.w1.T
    if mlp.residual:
        draw = draw + dtok
    _check("slot_mlp", g_w1, g_w2, draw)

    # pooling quotient: d/dw_jk of (sum w x)/(sum w + delta)
    draw = np.ascontiguousarray(draw)
    dsel = _kernels.gather_pooling_grad(tape.x, tape.table.slots, tape.item, draw, tape.raw, tape.denom)
    dprobs = np.zeros_like(tape.probs)
    np.put_along_axis(dprobs, tape.table.slots, dsel, axis=1)

    # switch and entropy terms through the mean probabilities
    p = tape.stats.mean_prob
    dmean = lam * n_slots * tape.stats.load_fraction
    dmean = dmean + lam * c.entropy_coeff * (np.log(p + c.epsilon) + p / (p + c.epsilon)) / np.log(n_slots)
    dprobs += dmean / n

    probs = tape.probs
    dlogits = probs * (dprobs - np.sum(probs * dprobs, axis=1, keepdims=True))
    dlogits += (lam * c.alpha * 2.0 / n) * tape.lse[:, None] * probs
    g_gate = dlogits.T @ tape.x
    _check("gate", g_gate)

    return GradientSet({
        "gate": g_gate,
        "w1": g_w1,
        "b1": g_b1,
        "w2": g_w2,
        "b2": g_b2,
        "head_w": g_head_w,
        "head_b": g_head_b,
    })


def loss_and_grad(params, batch, labels, constants=LossConstants(), top_k=2):
    tape = forward(params, batch, labels, constants, top_k)
    return tape.loss, backward(tape)


def finite_difference_grad(loss_fn, params, h: float = 1e-5) -> np.ndarray:
    theta = np.array(params, dtype=np.float64)
    out = np.empty_like(theta)
    for i in range(theta.size):
        keep = theta[i]
        theta[i] = keep + h
        fp = loss_fn(theta)
        theta[i] = keep - h
        fm = loss_fn(theta)
        theta[i] = keep
        out[i] = (fp - fm) / (2.0 * h)
    return out


def boundary_flags(params: ModelParams, batch, h: float = 1e-5, top_k: int = 2) -> np.ndarray:
    """Flat mask of gate coordinates whose +-h perturbation may flip a Top-k choice.

    A patch is near a boundary when its k-th and (k+1)-th probabilities differ
    by less than 10h; gate entry (k, d) is flagged when such a patch has a
    non-zero feature d.  Non-gate parameters never change the routing.
    """
    flags = np.zeros(params.size, dtype=bool)
    n_slots = params.n_slots
    if top_k >= n_slots:
        return flags
    x, _ = stack_batch(batch)
    tape = forward(params, batch, None, top_k=top_k)
    srt = -np.sort(-tape.probs, axis=1)
    margin = srt[:, top_k - 1] - srt[:, top_k]
    scale = np.maximum(1.0, np.abs(x).max(axis=1))
    near = margin < 10.0 * h * scale
    if near.any():
        cols = np.any(x[near] != 0.0, axis=0)
        gate = np.zeros((n_slots, x.shape[1]), dtype=bool)
        gate[:, cols] = True
        flags[: gate.size] = gate.ravel()
    return flags


@dataclass
class CheckReport:
    passed: bool
    max_rel_error: float
    rel_errors: np.ndarray
    worst: list[tuple[int, str, float, float, float]]
    n_checked: int
    n_flagged: int
    rel_tol: float

    def lines(self) -> list[str]:
        out = [
            f"checked={self.n_checked} flagged={self.n_flagged} "
            f"max_rel_error={self.max_rel_error:.3e} tol={self.rel_tol:.1e} "
            f"{'PASS' if self.passed else 'FAIL'}"
        ]
        for i, name, a, num, r in self.worst:
            out.append(f"  [{i}] {name}: analytic={a:.9e} numeric={num:.9e} rel={r:.3e}")
        return out


def _coordinate_names(params: ModelParams | None, size: int) -> list[str]:
    if params is None:
        return [f"theta[{i}]" for i in range(size)]
    names = []
    for name, arr in params.arrays().items():
        for pos in np.ndindex(arr.shape):
            names.append(f"{name}{list(pos)}")
    return names


def grad_check(
    analytic,
    numeric,
    rel_tol: float = 1e-4,
    abs_tol: float = 1e-6,
    flags=None,
    params: ModelParams | None = None,
    n_worst: int = 5,
) -> CheckReport:
    a = analytic.flat() if isinstance(analytic, GradientSet) else np.asarray(analytic, float).ravel()
    num = np.asarray(numeric, dtype=np.float64).ravel()
    if a.shape != num.shape:
        raise ShapeError(f"analytic {a.shape} vs numeric {num.shape}")
    flags = np.zeros(a.size, dtype=bool) if flags is None else np.asarray(flags, bool)
    rel = np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), abs_tol)
    checked = np.where(~flags, rel, 0.0)
    max_rel = float(checked.max()) if a.size else 0.0
    names = _coordinate_names(params, a.size)
    order = np.argsort(-checked, kind="stable")[:n_worst]
    worst = [(int(i), names[i], float(a[i]), float(num[i]), float(checked[i])) for i in order if checked[i] > 0]
    return CheckReport(
        passed=bool(max_rel <= rel_tol),
        max_rel_error=max_rel,
        rel_errors=rel,
        worst=worst,
        n_checked=int((~flags).sum()),
        n_flagged=int(flags.sum()),
        rel_tol=rel_tol,
    )


def check_instance(params, batch, labels, constants=LossConstants(), top_k=2, h=1e-5, rel_tol=1e-4, abs_tol=1e-6):
    """Analytic vs central-difference comparison for one instance."""
    tape = forward(params, batch, labels, constants, top_k)
    analytic = backward(tape)

    def loss_fn(theta):
        return forward(params.with_flat(theta), batch, labels, constants, top_k).loss.total

    numeric = finite_difference_grad(loss_fn, params.flat(), h)
    flags = boundary_flags(params, batch, h, top_k)
    return grad_check(analytic, numeric, rel_tol, abs_tol, flags, params)
