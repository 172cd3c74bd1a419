"""Two-phase iterative multitask training.

Each epoch in ``fac`` mode runs phase A (per-task diagonal updates on a small
data subset, one task loss at a time) followed by phase B (everything except
the diagonals, on the weighted joint loss plus Frobenius penalties).  The
ablation modes ``fac-no-iter``, ``uvshare`` and ``mshare`` are single-phase
variants; ``baseline`` trains a plain unfactorized model.

Task diagonals are never subject to optimizer weight decay.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError
from .layers import FACTORIZED_KINDS, MtlModel, Param, task_block_slices

MODES = ("fac", "fac-no-iter", "uvshare", "mshare", "baseline")
INITS = ("spectral", "identity-diag")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    lr_diag: float | None = None  # phase A learning rate; defaults to lr
    optimizer: str = "adam"  # sgd-momentum | adam
    weight_decay: float = 0.0
    frobenius_decay: float = 1e-4
    frobenius_form: str = "product"  # product | per-factor
    subset_fraction: float = 0.03
    loss_weights: str | tuple = "equal"
    mode: str = "fac"
    init: str = "spectral"
    seed: int = 0
    lr_halve_epoch: int | None = None
    alternation: str = "per-epoch"  # per-epoch (§-prose default) | per-batch

    def validate(self, t: int) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.init not in INITS:
            raise ConfigError(f"unknown init {self.init!r}")
        if self.optimizer not in ("sgd-momentum", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not (0.0 < self.subset_fraction <= 1.0):
            raise ConfigError("subset_fraction must lie in (0, 1]")
        if self.frobenius_decay < 0:
            raise ConfigError("frobenius_decay must be >= 0")
        if self.alternation not in ("per-epoch", "per-batch"):
            raise ConfigError(f"unknown alternation {self.alternation!r}")
        alphas = self.alphas(t)
        if len(alphas) != t or any(a < 0 for a in alphas):
            raise ConfigError("loss_weights must be t nonnegative scalars")

    def alphas(self, t: int) -> list[float]:
        if self.loss_weights == "equal":
            return [1.0 / t] * t
        return [float(a) for a in self.loss_weights]

    def lr_at(self, epoch: int) -> float:
        if self.lr_halve_epoch is not None and epoch >= self.lr_halve_epoch:
            return self.lr / 2.0
        return self.lr


# -- task losses -----------------------------------------------------------

LOSS_KINDS = ("softmax-cross-entropy", "l1", "cosine")


@dataclass(frozen=True)
class TaskLoss:
    task_id: int
    kind: str

    def __call__(self, pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
        if self.kind == "softmax-cross-entropy":
            return softmax_cross_entropy(pred, target)
        if self.kind == "l1":
            return l1_loss(pred, target)
        if self.kind == "cosine":
            return cosine_loss(pred, target)
        raise ConfigError(f"unknown loss kind {self.kind!r}")


def softmax_cross_entropy(logits: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over all positions; logits (b, C, ...), target int (b, ...)."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    count = target.size
    onehot_p = np.take_along_axis(probs, target[:, None].astype(np.int64), axis=1)[:, 0]
    loss = float(-np.log(np.maximum(onehot_p, 1e-12)).sum() / count)
    dlogits = probs.copy()
    np.put_along_axis(dlogits, target[:, None].astype(np.int64),
                      np.take_along_axis(dlogits, target[:, None].astype(np.int64), axis=1) - 1.0,
                      axis=1)
    return loss, (dlogits / count).astype(logits.dtype)


def l1_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = pred - target
    count = diff.size
    return float(np.abs(diff).sum() / count), (np.sign(diff) / count).astype(pred.dtype)


def cosine_loss(pred: np.ndarray, target: np.ndarray, eps: float = 1e-8) -> tuple[float, np.ndarray]:
    """Mean (1 - cosine) between predicted vectors (channel axis 1) and unit targets."""
    norm = np.sqrt((pred * pred).sum(axis=1, keepdims=True))
    norm = np.maximum(norm, eps)
    unit = pred / norm
    cos = (unit * target).sum(axis=1, keepdims=True)
    count = cos.size
    loss = float((1.0 - cos).sum() / count)
    dpred = -(target - cos * unit) / norm / count
    return loss, dpred.astype(pred.dtype)


# -- optimizers ------------------------------------------------------------


class Optimizer:
    """Per-parameter state; decoupled weight decay, skipped for no_decay params."""

    def __init__(self, lr: float, weight_decay: float = 0.0):
        self.lr = lr
        self.weight_decay = weight_decay
        self.state: dict[int, dict] = {}

    def step(self, params: list[Param], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p in params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            w = p.data
            if self.weight_decay > 0.0 and not p.no_decay:
                w = w * (1.0 - lr * self.weight_decay)
            p.assign(self._update(p, w, g, lr))

    def _update(self, p: Param, w: np.ndarray, g: np.ndarray, lr: float) -> np.ndarray:
        raise NotImplementedError


class SgdMomentum(Optimizer):
    def __init__(self, lr: float, weight_decay: float = 0.0, momentum: float = 0.9):
        super().__init__(lr, weight_decay)
        self.momentum = momentum

    def _update(self, p, w, g, lr):
        st = self.state.setdefault(id(p), {"v": np.zeros_like(w)})
        st["v"] = self.momentum * st["v"] + g
        return w - lr * st["v"]


class Adam(Optimizer):
    def __init__(self, lr: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(lr, weight_decay)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def _update(self, p, w, g, lr):
        st = self.state.setdefault(id(p), {"m": np.zeros_like(w), "v": np.zeros_like(w), "k": 0})
        st["k"] += 1
        st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
        st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * g * g
        mhat = st["m"] / (1.0 - self.beta1 ** st["k"])
        vhat = st["v"] / (1.0 - self.beta2 ** st["k"])
        return w - lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(cfg: TrainConfig) -> Optimizer:
    if cfg.optimizer == "sgd-momentum":
        return SgdMomentum(cfg.lr, cfg.weight_decay)
    return Adam(cfg.lr, cfg.weight_decay)


# -- regularization --------------------------------------------------------


def frobenius_penalty(layer, lam: float, form: str = "product") -> tuple[float, dict[int, np.ndarray]]:
    """Frobenius penalty value and gradients keyed by id(param).

    Product form: (lam/2) * ||contract(layer)||_F^2, differentiated through
    the factors.  Per-factor form penalizes U, V and the composed diagonal
    separately.
    """
    from .layers import FactorizedConv2d, FactorizedLinear, _factor_grads, compose_diag

    if lam == 0.0:
        return 0.0, {}
    if isinstance(layer, FactorizedLinear):
        u2, v2 = layer.u.data, layer.v.data
        reshape_u, reshape_v = None, None
    elif isinstance(layer, FactorizedConv2d):
        co, ci, k, r = layer.out_ch, layer.in_ch, layer.k, layer.r
        u2 = layer.u.data.reshape(co * k, r)
        v2 = layer.v.data.reshape(r, k * ci)
        reshape_u, reshape_v = (co, k, r), (r, k, ci)
    else:
        return 0.0, {}

    diags = [p.data for p in layer.task_diags]
    d = compose_diag([p.tensor for p in layer.task_diags]).data
    grads: dict[int, np.ndarray] = {}
    if form == "product":
        w = (u2 * d[None, :]) @ v2
        value = 0.5 * lam * float((w.astype(np.float64) ** 2).sum())
        du, dv, ddiags = _factor_grads(u2, v2, diags, lam * w)
    elif form == "per-factor":
        value = 0.5 * lam * float(
            (u2.astype(np.float64) ** 2).sum()
            + (v2.astype(np.float64) ** 2).sum()
            + (d.astype(np.float64) ** 2).sum()
        )
        du, dv = lam * u2, lam * v2
        dm = lam * d
        ddiags = []
        for j in range(len(diags)):
            others = np.ones_like(d)
            for i, di in enumerate(diags):
                if i != j:
                    others = others * di
            ddiags.append(dm * others)
    else:
        raise ConfigError(f"unknown frobenius form {form!r}")
    grads[id(layer.u)] = du if reshape_u is None else du.reshape(reshape_u)
    grads[id(layer.v)] = dv if reshape_v is None else dv.reshape(reshape_v)
    for p, dd in zip(layer.task_diags, ddiags):
        grads[id(p)] = dd
    return value, grads


# -- sampling --------------------------------------------------------------


def subset_sample(n_items: int, rho: float, seed: int, epoch: int = 0) -> np.ndarray:
    """Deterministic sample without replacement of ceil(rho * n) indices."""
    if n_items < 1:
        raise ValueError("empty dataset")
    if not (0.0 < rho <= 1.0):
        raise ValueError("subset fraction must lie in (0, 1]")
    count = int(math.ceil(rho * n_items))
    rng = np.random.default_rng([seed, epoch, 0xA])
    return rng.permutation(n_items)[:count]


def _shuffled_batches(n_items: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    rng = np.random.default_rng([seed, epoch, 0xB])
    order = rng.permutation(n_items)
    return [order[i : i + batch_size] for i in range(0, n_items, batch_size)]


# -- reports ---------------------------------------------------------------


@dataclass
class EpochReport:
    epoch: int
    task_losses: list[float]
    penalty: float
    lr: float
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps({
            "epoch": self.epoch,
            "task_losses": [round(v, 8) for v in self.task_losses],
            "penalty": round(self.penalty, 10),
            "lr": self.lr,
            "wall_ms": round(self.wall_ms, 3),
        })


# -- trainer ---------------------------------------------------------------


class Trainer:
    """Drives one model through the configured training mode.

    ``dataset`` must expose ``inputs`` (N, ...) and ``targets`` (list of t
    arrays, each N-first).
    """

    def __init__(self, model: MtlModel, dataset, losses: list[TaskLoss], cfg: TrainConfig,
                 metrics_stream=None):
        cfg.validate(model.t)
        if len(losses) != model.t:
            raise ConfigError(f"need {model.t} task losses, got {len(losses)}")
        self.model = model
        self.dataset = dataset
        self.losses = losses
        self.cfg = cfg
        self.metrics_stream = metrics_stream
        self.optimizer = make_optimizer(cfg)
        self._split_params()

    def _split_params(self) -> None:
        self.diag_params: list[list[Param]] = [[] for _ in range(self.model.t)]
        self.shared_params: list[Param] = []
        for name, p in self.model.named_params():
            if p.task is not None:
                if p.task < self.model.t:
                    self.diag_params[p.task].append(p)
                else:
                    self.shared_params.append(p)
            else:
                self.shared_params.append(p)

    # -- loss plumbing --

    def _task_loss_grad(self, j: int, feat: np.ndarray, targets,
                        weight: float = 1.0) -> tuple[float, np.ndarray]:
        pred = self.model.forward_head(j, feat)
        loss, dpred = self.losses[j](pred, targets[j])
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss for task {j}")
        # Scale before the head backward so head parameters see the weighted loss.
        dfeat = self.model.backward_head(j, weight * dpred)
        return loss, dfeat

    def _penalties(self, lam: float) -> tuple[float, dict[int, np.ndarray]]:
        total, grads = 0.0, {}
        for layer in self.model.factorized_layers():
            value, g = frobenius_penalty(layer, lam, self.cfg.frobenius_form)
            total += value
            for key, arr in g.items():
                grads[key] = grads.get(key, 0.0) + arr
        return total, grads

    def _apply_penalty_grads(self, grads: dict[int, np.ndarray], params: list[Param]) -> None:
        for p in params:
            if id(p) in grads:
                p.add_grad(grads[id(p)])

    # -- phase steps --

    def phase_a_step(self, batch_x: np.ndarray, batch_targets, j: int, lr: float) -> list[float]:
        """Update only task j's diagonals by task j's loss (heads frozen)."""
        if not (0 <= j < self.model.t):
            raise ValueError(f"invalid task id {j}")
        if not self.diag_params[j]:
            return []
        self.model.zero_grad()
        feat = self.model.forward_trunk(batch_x)
        loss, dfeat = self._task_loss_grad(j, feat, batch_targets)
        self.model.backward_trunk(dfeat)
        _, pgrads = self._penalties(self.cfg.frobenius_decay)
        self._apply_penalty_grads(pgrads, self.diag_params[j])
        self.optimizer.step(self.diag_params[j], lr=lr)
        return [loss]

    def phase_b_step(self, batch_x: np.ndarray, batch_targets, alphas: list[float],
                     lr: float) -> tuple[list[float], float]:
        """Update everything except task diagonals by the weighted joint loss."""
        self.model.zero_grad()
        feat = self.model.forward_trunk(batch_x)
        task_losses, dfeat = [], np.zeros_like(feat)
        for j in range(self.model.t):
            loss, df = self._task_loss_grad(j, feat, batch_targets, weight=alphas[j])
            task_losses.append(loss)
            dfeat = dfeat + df
        self.model.backward_trunk(dfeat)
        penalty, pgrads = self._penalties(self.cfg.frobenius_decay)
        self._apply_penalty_grads(pgrads, self.shared_params)
        self.optimizer.step(self.shared_params, lr=lr)
        return task_losses, penalty

    def joint_step(self, batch_x: np.ndarray, batch_targets, alphas: list[float],
                   lr: float) -> tuple[list[float], float]:
        """Single-phase step updating all parameters (fac-no-iter, baseline)."""
        self.model.zero_grad()
        feat = self.model.forward_trunk(batch_x)
        task_losses, dfeat = [], np.zeros_like(feat)
        for j in range(self.model.t):
            loss, df = self._task_loss_grad(j, feat, batch_targets, weight=alphas[j])
            task_losses.append(loss)
            dfeat = dfeat + df
        self.model.backward_trunk(dfeat)
        penalty, pgrads = self._penalties(self.cfg.frobenius_decay)
        every = self.shared_params + [p for group in self.diag_params for p in group]
        self._apply_penalty_grads(pgrads, every)
        self.optimizer.step(every, lr=lr)
        return task_losses, penalty

    def masked_step(self, batch_x: np.ndarray, batch_targets, alphas: list[float],
                    lr: float) -> tuple[list[float], float]:
        """uvshare/mshare: combined loss with per-task block routing of U/V or M."""
        mode = self.cfg.mode
        self.model.zero_grad()
        feat = self.model.forward_trunk(batch_x)
        fac_layers = self.model.factorized_layers()
        masked: dict[int, tuple] = {}
        for layer in fac_layers:
            blocks = task_block_slices(layer.r, self.model.t)
            if mode == "uvshare":
                masked[id(layer.u)] = ("last", blocks)
                masked[id(layer.v)] = ("first", blocks)
            else:  # mshare
                for p in layer.task_diags:
                    masked[id(p)] = ("first", blocks)

        every = self.shared_params + [p for group in self.diag_params for p in group]
        accum = {id(p): np.zeros_like(p.data) for p in every}
        task_losses = []
        for j in range(self.model.t):
            self.model.zero_grad()
            loss, dfeat = self._task_loss_grad(j, feat, batch_targets, weight=alphas[j])
            task_losses.append(loss)
            self.model.backward_trunk(dfeat)
            for p in every:
                if p.grad is None:
                    continue
                if id(p) in masked:
                    axis, blocks = masked[id(p)]
                    sl = blocks[j]
                    if axis == "last":
                        accum[id(p)][..., sl] += p.grad[..., sl]
                    else:
                        accum[id(p)][sl] += p.grad[sl]
                else:
                    accum[id(p)] += p.grad

        penalty, pgrads = self._penalties(self.cfg.frobenius_decay)
        for p in every:
            p.grad = accum[id(p)]
        self._apply_penalty_grads(pgrads, every)
        self.optimizer.step(every, lr=lr)
        return task_losses, penalty

    # -- epochs --

    def train_epoch(self, epoch: int) -> EpochReport:
        cfg = self.cfg
        start = time.perf_counter()
        n = len(self.dataset.inputs)
        alphas = cfg.alphas(self.model.t)
        lr = cfg.lr_at(epoch)
        lr_diag = cfg.lr_diag if cfg.lr_diag is not None else lr
        xs, targets = self.dataset.inputs, self.dataset.targets

        def batch_of(idx):
            return xs[idx], [tg[idx] for tg in targets]

        sums = np.zeros(self.model.t)
        penalty_sum, steps = 0.0, 0
        try:
            if cfg.mode == "fac" and cfg.alternation == "per-batch":
                for idx in _shuffled_batches(n, cfg.batch_size, cfg.seed, epoch):
                    bx, bt = batch_of(idx)
                    for j in range(self.model.t):
                        self.phase_a_step(bx, bt, j, lr_diag)
                    losses, pen = self.phase_b_step(bx, bt, alphas, lr)
                    sums += losses
                    penalty_sum += pen
                    steps += 1
            elif cfg.mode == "fac":
                sub = subset_sample(n, cfg.subset_fraction, cfg.seed, epoch)
                for i in range(0, len(sub), cfg.batch_size):
                    bx, bt = batch_of(sub[i : i + cfg.batch_size])
                    for j in range(self.model.t):
                        self.phase_a_step(bx, bt, j, lr_diag)
                for idx in _shuffled_batches(n, cfg.batch_size, cfg.seed, epoch):
                    bx, bt = batch_of(idx)
                    losses, pen = self.phase_b_step(bx, bt, alphas, lr)
                    sums += losses
                    penalty_sum += pen
                    steps += 1
            elif cfg.mode in ("fac-no-iter", "baseline"):
                for idx in _shuffled_batches(n, cfg.batch_size, cfg.seed, epoch):
                    bx, bt = batch_of(idx)
                    losses, pen = self.joint_step(bx, bt, alphas, lr)
                    sums += losses
                    penalty_sum += pen
                    steps += 1
            else:  # uvshare / mshare
                for idx in _shuffled_batches(n, cfg.batch_size, cfg.seed, epoch):
                    bx, bt = batch_of(idx)
                    losses, pen = self.masked_step(bx, bt, alphas, lr)
                    sums += losses
                    penalty_sum += pen
                    steps += 1
        except DivergenceError as exc:
            raise DivergenceError(f"{exc} (epoch {epoch})") from None

        wall_ms = (time.perf_counter() - start) * 1e3
        report = EpochReport(
            epoch=epoch,
            task_losses=list(sums / max(steps, 1)),
            penalty=penalty_sum / max(steps, 1),
            lr=lr,
            wall_ms=wall_ms,
        )
        if self.metrics_stream is not None:
            self.metrics_stream.write(report.to_json() + "\n")
            self.metrics_stream.flush()
        return report

    def train(self) -> list[EpochReport]:
        return [self.train_epoch(e) for e in range(self.cfg.epochs)]
