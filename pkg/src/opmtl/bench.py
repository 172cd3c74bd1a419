"""Desk-scale multitask datasets, metrics and the experiment runner.

The shapes dataset is a procedurally generated stand-in for a dense-prediction
task triple: per-pixel class labels, a synthetic depth map and surface normals
derived from that depth map.  The linear-teacher dataset gives tasks a shared
low-rank structure for quick trainer sanity checks.
"""

from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TopologyError
from .layers import Conv2d, FactorizedConv2d, Layer, Linear, MaxPool2d, MtlModel, ReLU, Upsample2d
from .model_io import (
    contract_model,
    count_flops,
    count_params,
    save_model,
    verify_equivalence,
)
from .trainer import LOSS_KINDS, TaskLoss, TrainConfig, Trainer


@dataclass
class MultitaskSample:
    input: np.ndarray
    targets: list


@dataclass
class MultitaskDataset:
    inputs: np.ndarray          # (N, ...) float32
    targets: list[np.ndarray]   # one N-first array per task
    task_kinds: list[str]       # loss kind per task
    num_classes: int | None = None

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def t(self) -> int:
        return len(self.targets)

    def sample(self, i: int) -> MultitaskSample:
        return MultitaskSample(self.inputs[i], [tg[i] for tg in self.targets])

    def losses(self) -> list[TaskLoss]:
        return [TaskLoss(j, kind) for j, kind in enumerate(self.task_kinds)]


# -- shapes dataset --------------------------------------------------------


def _render_sample(rng: np.random.Generator, size: int, num_classes: int, palette: np.ndarray):
    seg = np.zeros((size, size), dtype=np.int64)
    depth = np.zeros((size, size), dtype=np.float64)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(rng.integers(2, 5)):
        cls = int(rng.integers(1, num_classes))
        cy, cx = rng.uniform(0.2, 0.8, 2) * size
        rad = rng.uniform(0.1, 0.25) * size
        base = rng.uniform(0.3, 0.9)
        if rng.integers(0, 2) == 0:
            # Dome: spherical cap of height ~rad.
            d2 = (yy - cy) ** 2 + (xx - cx) ** 2
            inside = d2 <= rad * rad
            h = base * np.sqrt(np.maximum(rad * rad - d2, 0.0)) / rad
        else:
            # Tilted square patch.
            inside = (np.abs(yy - cy) <= rad) & (np.abs(xx - cx) <= rad)
            gx, gy = rng.uniform(-0.5, 0.5, 2) / size
            h = base + gx * (xx - cx) + gy * (yy - cy)
        seg[inside] = cls
        depth[inside] = h[inside]
    # Unit surface normals from depth finite differences.
    gy, gx = np.gradient(depth)
    normal = np.stack([-gx, -gy, np.ones_like(depth)])
    normal /= np.sqrt((normal ** 2).sum(axis=0, keepdims=True))
    # Image: class colour shaded by depth plus mild noise.
    img = palette[seg].transpose(2, 0, 1) * (0.4 + 0.6 * depth[None])
    img = img + 0.02 * rng.standard_normal(img.shape)
    return (img.astype(np.float32), seg,
            depth[None].astype(np.float32), normal.astype(np.float32))


def _gen_shapes_split(n: int, size: int, num_classes: int, rng: np.random.Generator):
    palette = rng.uniform(0.2, 1.0, size=(num_classes, 3))
    palette[0] = 0.05
    imgs, segs, depths, normals = [], [], [], []
    for _ in range(n):
        img, seg, depth, normal = _render_sample(rng, size, num_classes, palette)
        imgs.append(img)
        segs.append(seg)
        depths.append(depth)
        normals.append(normal)
    return MultitaskDataset(
        inputs=np.stack(imgs),
        targets=[np.stack(segs), np.stack(depths), np.stack(normals)],
        task_kinds=["softmax-cross-entropy", "l1", "cosine"],
        num_classes=num_classes,
    )


def gen_shapes_dataset(n: int, image_size: int, num_classes: int, seed: int,
                       n_val: int | None = None) -> tuple[MultitaskDataset, MultitaskDataset]:
    """Procedural shapes with aligned segmentation/depth/normal targets."""
    if image_size < 16:
        raise ValueError("image_size must be >= 16")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if n_val is None:
        n_val = max(1, n // 5)
    rng = np.random.default_rng([seed, 0x5])
    train = _gen_shapes_split(n, image_size, num_classes, rng)
    val = _gen_shapes_split(n_val, image_size, num_classes, rng)
    return train, val


def gen_linear_teacher(n: int, input_dim: int, t: int, rank: int, noise: float,
                       seed: int, out_dim: int | None = None) -> MultitaskDataset:
    """Per-task linear teachers sharing a rank-limited common factor."""
    if rank > input_dim:
        raise ValueError("rank must not exceed input_dim")
    if out_dim is None:
        out_dim = input_dim
    rng = np.random.default_rng([seed, 0x7])
    shared = rng.standard_normal((rank, input_dim)) / math.sqrt(input_dim)
    xs = rng.standard_normal((n, input_dim)).astype(np.float32)
    targets = []
    for _ in range(t):
        mix = rng.standard_normal((out_dim, rank)) / math.sqrt(rank)
        y = xs @ (mix @ shared).T.astype(np.float32)
        if noise > 0:
            y = y + noise * rng.standard_normal(y.shape).astype(np.float32)
        targets.append(y.astype(np.float32))
    return MultitaskDataset(inputs=xs, targets=targets, task_kinds=["l1"] * t)


# -- metrics ---------------------------------------------------------------


@dataclass
class MetricReport:
    tasks: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"tasks": self.tasks})


def segmentation_metrics(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> dict:
    """pred and gt are integer class maps of identical shape."""
    correct = float((pred == gt).mean())
    ious = []
    for c in range(num_classes):
        p, g = pred == c, gt == c
        union = (p | g).sum()
        if union == 0:
            continue  # class absent from both: skipped
        ious.append(float((p & g).sum() / union))
    return {"miou": float(np.mean(ious)) if ious else 0.0, "pixel_accuracy": correct}


def depth_metrics(pred: np.ndarray, gt: np.ndarray) -> dict:
    err = np.abs(pred - gt)
    rel = err / np.maximum(np.abs(gt), 1e-3)
    return {"abs_err": float(err.mean()), "rel_err": float(rel.mean())}


def normal_metrics(pred: np.ndarray, gt: np.ndarray) -> dict:
    """pred (b, 3, H, W) arbitrary vectors, gt unit vectors."""
    norm = np.maximum(np.sqrt((pred ** 2).sum(axis=1)), 1e-8)
    cos = (pred * gt).sum(axis=1) / norm
    ang = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))).ravel()
    return {
        "mean_angle": float(ang.mean()),
        "median_angle": float(np.median(ang)),
        "within_11.25": float((ang < 11.25).mean()),
        "within_22.5": float((ang < 22.5).mean()),
        "within_30": float((ang < 30.0).mean()),
    }


def evaluate(model: MtlModel, dataset: MultitaskDataset, batch_size: int = 16) -> MetricReport:
    """Dataset-order-invariant evaluation of every task head."""
    if model.t != dataset.t:
        raise TopologyError(f"model has {model.t} heads, dataset has {dataset.t} tasks")
    n = len(dataset)
    preds: list[list[np.ndarray]] = [[] for _ in range(model.t)]
    for i in range(0, n, batch_size):
        outs = model.forward_all(dataset.inputs[i : i + batch_size])
        for j, y in enumerate(outs):
            preds[j].append(y)
    report = MetricReport()
    for j, kind in enumerate(dataset.task_kinds):
        pred = np.concatenate(preds[j])
        gt = dataset.targets[j]
        if kind == "softmax-cross-entropy":
            stats = segmentation_metrics(pred.argmax(axis=1), gt, dataset.num_classes)
        elif kind == "l1":
            stats = depth_metrics(pred, gt)
        elif kind == "cosine":
            stats = normal_metrics(pred, gt)
        else:
            raise ConfigError(f"unknown task kind {kind!r}")
        report.tasks.append({"task": j, "kind": kind, **stats})
    return report


# -- model builders --------------------------------------------------------


def head_out_channels(kind: str, num_classes: int | None) -> int:
    if kind == "softmax-cross-entropy":
        return int(num_classes)
    if kind == "l1":
        return 1
    if kind == "cosine":
        return 3
    raise ConfigError(f"unknown task kind {kind!r}")


def build_mini_segnet(task_kinds: list[str], num_classes: int | None, mode: str,
                      in_ch: int = 3, width: int = 16, init: str = "spectral",
                      seed: int = 0, dtype: str = "float32") -> MtlModel:
    """4 conv blocks (w, 2w, 2w, 2w) with 2x down/upsampling and 1x1-conv heads.

    Every trunk conv except the last is overparameterised in the factorized
    modes; ablation modes uvshare/mshare use a single shared diagonal.
    """
    t = len(task_kinds)
    chans = [(in_ch, width), (width, 2 * width), (2 * width, 2 * width), (2 * width, 2 * width)]
    factorize = mode != "baseline"
    layer_t = t if mode in ("fac", "fac-no-iter") else 1
    trunk: list[Layer] = []
    for i, (ci, co) in enumerate(chans):
        last = i == len(chans) - 1
        if factorize and not last:
            trunk.append(FactorizedConv2d(ci, co, 3, t=layer_t, padding=1, init=init,
                                          dtype=dtype, seed=seed + 10 * i))
        else:
            trunk.append(Conv2d(ci, co, 3, padding=1, dtype=dtype, seed=seed + 10 * i))
        trunk.append(ReLU())
        if i < 2:
            trunk.append(MaxPool2d())
    trunk.append(Upsample2d())
    trunk.append(Upsample2d())
    heads = []
    for j, kind in enumerate(task_kinds):
        co = head_out_channels(kind, num_classes)
        heads.append([Conv2d(2 * width, co, 1, dtype=dtype, seed=seed + 1000 + j)])
    return MtlModel(trunk, heads)


def build_mlp(task_kinds: list[str], in_dim: int, out_dim: int, mode: str,
              hidden: int = 32, init: str = "spectral", seed: int = 0,
              dtype: str = "float32") -> MtlModel:
    """Factorized two-layer MLP trunk with per-task linear heads."""
    t = len(task_kinds)
    factorize = mode != "baseline"
    layer_t = t if mode in ("fac", "fac-no-iter") else 1
    if factorize:
        from .layers import FactorizedLinear
        trunk: list[Layer] = [
            FactorizedLinear(in_dim, hidden, t=layer_t, init=init, dtype=dtype, seed=seed),
            ReLU(),
            FactorizedLinear(hidden, hidden, t=layer_t, init=init, dtype=dtype, seed=seed + 10),
            ReLU(),
        ]
    else:
        trunk = [Linear(in_dim, hidden, dtype=dtype, seed=seed), ReLU(),
                 Linear(hidden, hidden, dtype=dtype, seed=seed + 10), ReLU()]
    heads = [[Linear(hidden, out_dim, dtype=dtype, seed=seed + 1000 + j)] for j in range(t)]
    return MtlModel(trunk, heads)


# -- config files ----------------------------------------------------------

_TRAIN_KEYS = set(TrainConfig.__dataclass_fields__)
_EXTRA_KEYS = {"dataset", "model", "out_dir"}
_INT_KEYS = {"epochs", "batch_size", "seed", "lr_halve_epoch"}
_FLOAT_KEYS = {"lr", "lr_diag", "weight_decay", "frobenius_decay", "subset_fraction"}

_CALL_RE = re.compile(r"^([\w-]+)(?:\((.*)\))?$")


def _parse_value_call(text: str, key: str, line_no: int) -> tuple[str, dict]:
    m = _CALL_RE.match(text.strip())
    if not m:
        raise ConfigError(f"line {line_no}: cannot parse value for {key!r}: {text!r}")
    name, args_text = m.group(1), m.group(2)
    args: dict = {}
    if args_text:
        for part in args_text.split(","):
            if "=" not in part:
                raise ConfigError(f"line {line_no}: bad argument {part!r} in {key!r}")
            k, v = (s.strip() for s in part.split("=", 1))
            try:
                args[k] = int(v)
            except ValueError:
                try:
                    args[k] = float(v)
                except ValueError:
                    args[k] = v
    return name, args


def parse_config(path: str) -> dict:
    """Flat `key = value` config; unknown keys are errors reporting key and line."""
    raw: dict[str, tuple[str, int]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"line {line_no}: expected 'key = value', got {stripped!r}")
            key, value = (s.strip() for s in stripped.split("=", 1))
            if key not in _TRAIN_KEYS | _EXTRA_KEYS:
                raise ConfigError(f"line {line_no}: unknown key {key!r}")
            if key in raw:
                raise ConfigError(f"line {line_no}: duplicate key {key!r}")
            raw[key] = (value, line_no)

    cfg_kwargs, extras = {}, {}
    for key, (value, line_no) in raw.items():
        try:
            if key in _EXTRA_KEYS:
                extras[key] = (value, line_no)
            elif key in _INT_KEYS:
                cfg_kwargs[key] = int(value)
            elif key in _FLOAT_KEYS:
                cfg_kwargs[key] = float(value)
            elif key == "loss_weights" and value != "equal":
                cfg_kwargs[key] = tuple(float(v) for v in value.split(","))
            else:
                cfg_kwargs[key] = value
        except ValueError:
            raise ConfigError(f"line {line_no}: bad value for {key!r}: {value!r}") from None
    return {"train": TrainConfig(**cfg_kwargs), "extras": extras}


def build_dataset(spec: str, line_no: int = 0, seed: int = 0):
    name, args = _parse_value_call(spec, "dataset", line_no)
    if name == "shapes":
        return gen_shapes_dataset(
            n=int(args.pop("n", 500)),
            image_size=int(args.pop("image_size", 64)),
            num_classes=int(args.pop("num_classes", 6)),
            seed=int(args.pop("seed", seed)),
            n_val=int(args["n_val"]) if "n_val" in args else None,
        )
    if name == "linear-teacher":
        ds = gen_linear_teacher(
            n=int(args.pop("n", 256)),
            input_dim=int(args.pop("input_dim", 16)),
            t=int(args.pop("t", 2)),
            rank=int(args.pop("rank", 4)),
            noise=float(args.pop("noise", 0.01)),
            seed=int(args.pop("seed", seed)),
        )
        val = gen_linear_teacher(
            n=max(1, len(ds) // 5), input_dim=ds.inputs.shape[1], t=ds.t,
            rank=4, noise=0.01, seed=seed + 1,
        )
        return ds, val
    raise ConfigError(f"line {line_no}: unknown dataset {name!r}")


def build_model(spec: str, dataset: MultitaskDataset, train_cfg: TrainConfig,
                line_no: int = 0) -> MtlModel:
    name, args = _parse_value_call(spec, "model", line_no)
    if name == "mini-segnet":
        return build_mini_segnet(
            dataset.task_kinds, dataset.num_classes, train_cfg.mode,
            in_ch=dataset.inputs.shape[1], width=int(args.pop("width", 16)),
            init=train_cfg.init, seed=train_cfg.seed,
        )
    if name == "mlp":
        return build_mlp(
            dataset.task_kinds, dataset.inputs.shape[1], dataset.targets[0].shape[1],
            train_cfg.mode, hidden=int(args.pop("hidden", 32)),
            init=train_cfg.init, seed=train_cfg.seed,
        )
    raise ConfigError(f"line {line_no}: unknown model {name!r}")


# -- experiment runner -----------------------------------------------------


def run_experiment(config_path: str, overrides: dict | None = None) -> dict:
    """Train, evaluate and export one configured run; returns the result table."""
    parsed = parse_config(config_path)
    cfg: TrainConfig = parsed["train"]
    for key, value in (overrides or {}).items():
        if value is not None:
            setattr(cfg, key, value)
    extras = parsed["extras"]
    dataset_spec, ds_line = extras.get("dataset", ("shapes", 0))
    model_spec, model_line = extras.get("model", ("mini-segnet", 0))
    out_dir = extras.get("out_dir", ("results", 0))[0]
    os.makedirs(out_dir, exist_ok=True)

    train_ds, val_ds = build_dataset(dataset_spec, ds_line, seed=cfg.seed)
    model = build_model(model_spec, train_ds, cfg, model_line)
    cfg.validate(model.t)

    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    with open(metrics_path, "w", encoding="utf-8") as stream:
        trainer = Trainer(model, train_ds, train_ds.losses(), cfg)
        for epoch in range(cfg.epochs):
            report = trainer.train_epoch(epoch)
            val_metrics = evaluate(model, val_ds)
            line = json.loads(report.to_json())
            line["val"] = val_metrics.tasks
            stream.write(json.dumps(line) + "\n")
            stream.flush()

    final_metrics = evaluate(model, val_ds)
    save_model(os.path.join(out_dir, "model.opmt"), model)
    compact = contract_model(model)
    save_model(os.path.join(out_dir, "contracted.opmt"), compact)
    input_shape = train_ds.inputs.shape[1:]
    equiv = verify_equivalence(model, compact, input_shape, n_samples=16, tol=1e-5,
                               seed=cfg.seed)
    result = {
        "mode": cfg.mode,
        "seed": cfg.seed,
        "val_metrics": final_metrics.tasks,
        "train_params": count_params(model).param_count,
        "inference_params": count_params(compact).param_count,
        "inference_flops": count_flops(compact, (1,) + tuple(input_shape)).flops,
        "equivalence": json.loads(equiv.to_json()),
    }
    with open(os.path.join(out_dir, "results.json"), "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=2)
    return result
