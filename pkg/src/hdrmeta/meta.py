"""Per-scene adaptation and episodic meta-training.

A *task* is one scene with one exposure held out: the two remaining
exposures, paired with labels, form the support set; the held-out exposure
paired with the normalized ground truth forms the query.  Adaptation takes
a few gradient steps on the support loss starting from the shared
initialization; meta-training optimizes that initialization so the
post-adaptation query loss is small across tasks.

Gradients of the outer objective flow through the inner updates.  In
``second_order`` mode the inner gradients are recorded on the graph
(`create_graph=True`), so the meta-gradient includes the curvature terms;
in ``first_order`` mode they are treated as constants and the meta-gradient
is the query gradient evaluated at the adapted parameters.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data, unet
from . import loss as loss_mod
from .tensor import core
from .tensor.core import Tensor, backward

__all__ = [
    "AdaptConfig",
    "MetaConfig",
    "Task",
    "LabelError",
    "TrainingError",
    "TrueHdrLabels",
    "IdentityLabels",
    "FileLabels",
    "make_label_provider",
    "make_task",
    "episode_loss",
    "adapt",
    "meta_objective",
    "meta_step",
    "SGD",
    "Adam",
    "make_optimizer",
    "TrainResult",
    "train",
    "validation_ssim",
    "MODES",
    "MetricItem",
    "MetricReport",
    "evaluate",
]

MODES = ("ldr_no_recon", "single_shot", "adapt_true_hdr", "adapt_pseudo")


class LabelError(RuntimeError):
    """A label provider could not produce labels for a scene."""


class TrainingError(RuntimeError):
    """Meta-training failed (non-finite loss, empty dataset...)."""


@dataclass(frozen=True)
class AdaptConfig:
    """Inner-loop settings: step size, step count, differentiation mode."""

    inner_lr: float = 0.01
    steps: int = 3
    mode: str = "second_order"

    def __post_init__(self):
        if self.mode not in ("first_order", "second_order"):
            raise ValueError(f"mode must be 'first_order' or 'second_order', got {self.mode!r}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.inner_lr < 0:
            raise ValueError(f"inner_lr must be >= 0, got {self.inner_lr}")


@dataclass(frozen=True)
class MetaConfig:
    """Outer-loop settings: optimizer, batch of tasks per step, duration."""

    outer_lr: float = 0.005
    meta_batch: int = 5
    iterations: int = 200
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    val_interval: int = 25

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.meta_batch < 1:
            raise ValueError(f"meta_batch must be >= 1, got {self.meta_batch}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")


@dataclass
class Task:
    scene_id: str
    support: list  # [(ldr, label)] as (3, H, W) float arrays
    query: tuple  # (ldr, target)
    query_ev: int


# ---------------------------------------------------------------------------
# label providers


class TrueHdrLabels:
    """Support labels are the normalized ground-truth radiance map."""

    name = "true_hdr"

    def labels(self, scene: data.Scene, evs) -> dict:
        return {ev: scene.hdr_norm for ev in evs}


class IdentityLabels:
    """Support labels are the LDR inputs themselves (a sanity-check scheme)."""

    name = "identity"

    def labels(self, scene: data.Scene, evs) -> dict:
        return {ev: scene.ldr[ev] for ev in evs}


class FileLabels:
    """Support labels read from a sidecar tree mirroring the dataset layout:
    <root>/<scene_id>/ev*.hdr (normalized on load) or ev*.png (taken as-is)."""

    name = "file_pseudo"

    def __init__(self, root):
        self.root = Path(root)

    def labels(self, scene: data.Scene, evs) -> dict:
        out = {}
        for ev in evs:
            stem = data.LDR_NAMES[ev].rsplit(".", 1)[0]
            base = self.root / scene.scene_id
            hdr_p, png_p = base / f"{stem}.hdr", base / f"{stem}.png"
            if hdr_p.is_file():
                try:
                    label, _ = data.normalize_hdr(data.read_hdr(hdr_p))
                except (data.ParseError, data.DataError) as e:
                    raise LabelError(f"scene {scene.scene_id!r}: bad label {hdr_p}: {e}") from e
            elif png_p.is_file():
                label = data.read_png(png_p)
            else:
                raise LabelError(f"scene {scene.scene_id!r}: no label file for ev {ev:+d} under {base}")
            if label.shape != scene.ldr[ev].shape:
                raise LabelError(
                    f"scene {scene.scene_id!r}: label shape {label.shape} != image shape {scene.ldr[ev].shape}"
                )
            out[ev] = label
        return out


def make_label_provider(scheme: str, labels_dir=None):
    if scheme == "true_hdr":
        return TrueHdrLabels()
    if scheme == "identity":
        return IdentityLabels()
    if scheme == "file_pseudo":
        if labels_dir is None:
            raise ValueError("file_pseudo labels need a labels directory")
        return FileLabels(labels_dir)
    raise ValueError(f"unknown label scheme {scheme!r} (true_hdr, identity, file_pseudo)")


def make_task(scene: data.Scene, query_ev: int, provider=None) -> Task:
    """One episode: query on `query_ev`, support on the two other exposures."""
    if query_ev not in data.EXPOSURE_EVS:
        raise ValueError(f"query_ev must be one of {data.EXPOSURE_EVS}, got {query_ev}")
    provider = provider or TrueHdrLabels()
    support_evs = [ev for ev in data.EXPOSURE_EVS if ev != query_ev]
    labels = provider.labels(scene, support_evs)
    support = [(scene.ldr[ev], labels[ev]) for ev in support_evs]
    return Task(scene.scene_id, support, (scene.ldr[query_ev], scene.hdr_norm), query_ev)


# ---------------------------------------------------------------------------
# inner loop


def episode_loss(params, pairs, loss_cfg=None, forward_fn=None) -> Tensor:
    """Reconstruction loss of a parameter set over (input, label) pairs.

    The pairs are stacked into one batch, so batchnorm statistics are
    shared across the episode's images.
    """
    fwd = forward_fn or unet.forward
    inputs = Tensor(np.stack([np.asarray(p[0]) for p in pairs]))
    labels = Tensor(np.stack([np.asarray(p[1]) for p in pairs]))
    return loss_mod.expandnet_loss(fwd(params, inputs), labels, loss_cfg)


def adapt(theta, support, cfg: AdaptConfig, *, loss_fn=None, loss_cfg=None, forward_fn=None):
    """Gradient-descent adaptation of `theta` on the support set.

    Returns the adapted ParamSet.  With ``mode='second_order'`` the result
    is differentiable w.r.t. `theta`; with ``'first_order'`` the inner
    gradients are constants and only the direct dependence remains.  With
    inner_lr == 0 or steps == 0 the result equals `theta` numerically.

    `loss_fn(params, support)` can replace the default episode loss; tests
    use this to adapt toy problems with hand-computable solutions.
    """
    if loss_fn is None:
        def loss_fn(p, pairs):
            return episode_loss(p, pairs, loss_cfg, forward_fn)

    # untracked parameters could not produce inner gradients; re-leaf them
    phi = theta.map(lambda t: t if t.requires_grad else Tensor(t.data, requires_grad=True))
    names = list(phi)
    track = cfg.mode == "second_order"
    for _ in range(cfg.steps):
        inner = loss_fn(phi, support)
        grads = backward(inner, [phi[n] for n in names], create_graph=track)
        updates = {n: core.sub(phi[n], core.mul(g, cfg.inner_lr)) for n, g in zip(names, grads)}
        phi = phi.replace(updates)
    return phi


def meta_objective(theta, task: Task, acfg: AdaptConfig, loss_cfg=None, forward_fn=None) -> Tensor:
    """Query loss after adapting on the task's support set."""
    phi = adapt(theta, task.support, acfg, loss_cfg=loss_cfg, forward_fn=forward_fn)
    return episode_loss(phi, [task.query], loss_cfg, forward_fn)


# ---------------------------------------------------------------------------
# outer loop


class SGD:
    """Plain gradient descent on the meta-parameters."""

    def __init__(self, lr: float):
        self.lr = float(lr)

    def step(self, theta, grads: dict):
        new = {n: Tensor(theta[n].data - self.lr * grads[n], requires_grad=True) for n in theta}
        return theta.replace(new)


class Adam:
    """Adam with bias correction; moment state is float64 keyed by name."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = float(beta1), float(beta2), float(eps)
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, theta, grads: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        new = {}
        for n in theta:
            g = np.asarray(grads[n], dtype=np.float64)
            m = self.m.get(n)
            v = self.v.get(n)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[n], self.v[n] = m, v
            mh = m / (1 - b1**self.t)
            vh = v / (1 - b2**self.t)
            upd = theta[n].data - (self.lr * mh / (np.sqrt(vh) + self.eps)).astype(theta[n].dtype)
            new[n] = Tensor(upd, requires_grad=True)
        return theta.replace(new)


def make_optimizer(cfg: MetaConfig):
    if cfg.optimizer == "sgd":
        return SGD(cfg.outer_lr)
    return Adam(cfg.outer_lr, cfg.beta1, cfg.beta2, cfg.adam_eps)


def meta_step(
    theta,
    tasks,
    acfg: AdaptConfig,
    optimizer,
    *,
    loss_cfg=None,
    forward_fn=None,
    threads: int = 1,
):
    """One outer update over a batch of tasks.

    Per-task meta-gradients are averaged (in float64, in task order, so the
    reduction is deterministic) and handed to the optimizer.  Returns the
    new parameters and the mean query loss.
    """
    names = list(theta)
    tensors = [theta[n] for n in names]

    def one(task):
        obj = meta_objective(theta, task, acfg, loss_cfg, forward_fn)
        gs = backward(obj, tensors)
        return obj.item(), [g.data for g in gs]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(one, tasks))
    else:
        results = [one(t) for t in tasks]

    acc = {n: np.zeros(theta[n].shape, dtype=np.float64) for n in names}
    total = 0.0
    for loss_val, gs in results:
        total += loss_val
        for n, g in zip(names, gs):
            acc[n] += g
    b = float(len(results))
    grads = {n: (acc[n] / b).astype(theta[n].dtype) for n in names}
    return optimizer.step(theta, grads), total / b


@dataclass
class TrainResult:
    params: "unet.ParamSet"
    best_params: "unet.ParamSet"
    history: list = field(default_factory=list)  # mean query loss per iteration
    val_history: list = field(default_factory=list)  # (iteration, mean adapted ssim)
    best_val_ssim: float | None = None


def validation_ssim(theta, scenes, acfg: AdaptConfig, *, provider=None, loss_cfg=None, forward_fn=None) -> float:
    """Mean post-adaptation SSIM over scenes, holdout exposure rotating i % 3."""
    fwd = forward_fn or unet.forward
    eval_cfg = replace(acfg, mode="first_order")  # same updates, no meta-graph
    scores = []
    for i, scene in enumerate(scenes):
        task = make_task(scene, data.EXPOSURE_EVS[i % 3], provider)
        phi = adapt(theta, task.support, eval_cfg, loss_cfg=loss_cfg, forward_fn=forward_fn)
        with core.no_grad():
            pred = fwd(phi, Tensor(task.query[0][None]))
        scores.append(loss_mod.ssim(pred.data[0], task.query[1]))
    return float(np.mean(scores))


def train(
    train_scenes,
    val_scenes,
    net_cfg: "unet.UNetConfig",
    meta_cfg: MetaConfig,
    adapt_cfg: AdaptConfig,
    *,
    provider=None,
    loss_cfg=None,
    forward_fn=None,
    threads: int = 1,
    progress=None,
) -> TrainResult:
    """Meta-train an initialization from scratch.

    Every iteration samples `meta_batch` tasks (scene and held-out exposure
    drawn from a generator seeded with meta_cfg.seed), takes one outer
    step, and records the mean query loss.  Every `val_interval` iterations
    the current parameters are scored by :func:`validation_ssim`; the best
    scoring snapshot is kept.  `progress(iteration, loss)` is called after
    each step when given.
    """
    if not train_scenes:
        raise TrainingError("no training scenes")
    provider = provider or TrueHdrLabels()
    rng = np.random.default_rng(meta_cfg.seed)
    theta = unet.init_params(net_cfg, seed=meta_cfg.seed)
    optimizer = make_optimizer(meta_cfg)
    result = TrainResult(params=theta, best_params=theta)

    for it in range(meta_cfg.iterations):
        tasks = []
        for _ in range(meta_cfg.meta_batch):
            scene = train_scenes[int(rng.integers(len(train_scenes)))]
            ev = data.EXPOSURE_EVS[int(rng.integers(3))]
            tasks.append(make_task(scene, ev, provider))
        try:
            theta, mean_loss = meta_step(
                theta, tasks, adapt_cfg, optimizer, loss_cfg=loss_cfg, forward_fn=forward_fn, threads=threads
            )
        except core.NonFiniteError as e:
            raise TrainingError(
                f"iteration {it + 1}: non-finite loss on tasks {[t.scene_id for t in tasks]}: {e}"
            ) from e
        result.history.append(mean_loss)
        if progress is not None:
            progress(it + 1, mean_loss)

        due = meta_cfg.val_interval > 0 and ((it + 1) % meta_cfg.val_interval == 0 or it + 1 == meta_cfg.iterations)
        if due and val_scenes:
            score = validation_ssim(theta, val_scenes, adapt_cfg, provider=provider, loss_cfg=loss_cfg, forward_fn=forward_fn)
            result.val_history.append((it + 1, score))
            if result.best_val_ssim is None or score > result.best_val_ssim:
                result.best_val_ssim = score
                result.best_params = theta.map(lambda t: Tensor(t.data.copy(), requires_grad=True))

    result.params = theta
    if result.best_val_ssim is None:
        result.best_params = theta
    return result


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MetricItem:
    scene_id: str
    holdout_ev: int
    mode: str
    ssim: float
    psnr_db: float


@dataclass
class MetricReport:
    """Per-(scene, holdout, mode) metrics plus aggregation and CSV output."""

    items: list = field(default_factory=list)
    skipped: list = field(default_factory=list)  # (scene_id, reason)

    PSNR_CAP = 100.0  # stands in for +inf (identical images) in aggregates

    def rows(self, mode: str) -> list:
        return [it for it in self.items if it.mode == mode]

    def modes(self) -> list:
        present = {it.mode for it in self.items}
        return [m for m in MODES if m in present]

    def mean_ssim(self, mode: str) -> float:
        rows = self.rows(mode)
        return float(np.mean([r.ssim for r in rows])) if rows else math.nan

    def mean_psnr_db(self, mode: str) -> float:
        rows = self.rows(mode)
        if not rows:
            return math.nan
        return float(np.mean([min(r.psnr_db, self.PSNR_CAP) for r in rows]))

    def summary(self) -> list:
        return [
            {
                "mode": m,
                "mean_ssim": self.mean_ssim(m),
                "mean_psnr_db": self.mean_psnr_db(m),
                "count": len(self.rows(m)),
            }
            for m in self.modes()
        ]

    def write_summary_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mode", "mean_ssim", "mean_psnr_db", "count"])
            for row in self.summary():
                w.writerow([row["mode"], repr(row["mean_ssim"]), repr(row["mean_psnr_db"]), row["count"]])

    def write_details_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scene_id", "holdout_ev", "mode", "ssim", "psnr_db"])
            for it in self.items:
                w.writerow([it.scene_id, it.holdout_ev, it.mode, repr(it.ssim), repr(it.psnr_db)])


def evaluate(
    theta,
    scenes,
    acfg: AdaptConfig,
    *,
    eval_mode: str = "all",
    pseudo_provider=None,
    loss_cfg=None,
    forward_fn=None,
) -> MetricReport:
    """Score parameters over scenes, rotating every exposure as the holdout.

    Modes: `ldr_no_recon` scores the input exposure itself against the
    target (always included); `single_shot` the unadapted network;
    `adapt_true_hdr` adaptation on ground-truth labels; `adapt_pseudo`
    adaptation on provider labels (needs `pseudo_provider`).  A scene the
    pseudo provider cannot label is recorded in `skipped` and loses only
    its adapt_pseudo rows.  Adaptation runs in first-order mode: the
    updates are identical and no meta-graph is needed.
    """
    wanted = MODES if eval_mode == "all" else ("ldr_no_recon", eval_mode)
    if eval_mode != "all" and eval_mode not in MODES:
        raise ValueError(f"eval_mode must be 'all' or one of {MODES}, got {eval_mode!r}")
    fwd = forward_fn or unet.forward
    eval_cfg = replace(acfg, mode="first_order")
    true_provider = TrueHdrLabels()
    report = MetricReport()

    def score(pred: np.ndarray, target: np.ndarray) -> tuple:
        return loss_mod.ssim(pred, target), loss_mod.psnr(pred, target)

    for scene in scenes:
        pseudo_labels = None
        if "adapt_pseudo" in wanted and pseudo_provider is not None:
            try:
                pseudo_labels = pseudo_provider.labels(scene, data.EXPOSURE_EVS)
            except LabelError as e:
                report.skipped.append((scene.scene_id, str(e)))
        for ev in data.EXPOSURE_EVS:
            target = scene.hdr_norm
            ldr = scene.ldr[ev]
            s, p = score(ldr, target)
            report.items.append(MetricItem(scene.scene_id, ev, "ldr_no_recon", s, p))
            if "single_shot" in wanted:
                with core.no_grad():
                    pred = fwd(theta, Tensor(ldr[None])).data[0]
                s, p = score(pred, target)
                report.items.append(MetricItem(scene.scene_id, ev, "single_shot", s, p))
            if "adapt_true_hdr" in wanted:
                task = make_task(scene, ev, true_provider)
                phi = adapt(theta, task.support, eval_cfg, loss_cfg=loss_cfg, forward_fn=forward_fn)
                with core.no_grad():
                    pred = fwd(phi, Tensor(ldr[None])).data[0]
                s, p = score(pred, target)
                report.items.append(MetricItem(scene.scene_id, ev, "adapt_true_hdr", s, p))
            if "adapt_pseudo" in wanted and pseudo_labels is not None:
                support_evs = [e for e in data.EXPOSURE_EVS if e != ev]
                support = [(scene.ldr[e], pseudo_labels[e]) for e in support_evs]
                phi = adapt(theta, support, eval_cfg, loss_cfg=loss_cfg, forward_fn=forward_fn)
                with core.no_grad():
                    pred = fwd(phi, Tensor(ldr[None])).data[0]
                s, p = score(pred, target)
                report.items.append(MetricItem(scene.scene_id, ev, "adapt_pseudo", s, p))
    return report
