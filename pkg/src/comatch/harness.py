"""Training loop, CAM seed evaluation and the ablation / sweep runners."""

import csv
import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass

import numpy as np

from .data import augment, sample_group, write_pgm
from .errors import DataError, NumericAbort, ParameterError
from .inter_match import time_group_match
from .intra_match import METRICS
from .network import (ModelConfig, ModelParams, backward, compute_cam, forward_group,
                      save_checkpoint)
from .tensor_core import rng_stream

log = logging.getLogger(__name__)

THRESHOLDS = tuple(round(0.05 * i, 2) for i in range(1, 13))

INIT_STREAM = 0
DATA_STREAM = 1


@dataclass
class TrainConfig:
    lr_init: float = 0.1
    rho: float = 0.9
    batch_pairs: int = 8
    max_iters: int = 2000
    seed: int = 0
    alpha: float = 1.5
    k: int = 8
    group_n: int = 2
    use_inter: bool = True
    use_intra: bool = True
    channels: int = 32
    power_iters_max: int = 500
    tol: float = 1e-8
    metric: str = "inner"

    def __post_init__(self):
        if not self.lr_init > 0:
            raise ParameterError(f"lr_init must be > 0, got {self.lr_init}")
        if not 0 < self.rho <= 1:
            raise ParameterError(f"rho must lie in (0, 1], got {self.rho}")
        if self.max_iters < 0 or self.batch_pairs < 1:
            raise ParameterError("max_iters must be >= 0 and batch_pairs >= 1")
        if self.group_n < 2:
            raise ParameterError("group_n must be >= 2")
        if self.metric not in METRICS:
            raise ParameterError(f"metric must be one of {METRICS}, got {self.metric!r}")

    def model_cfg(self):
        return ModelConfig(alpha=self.alpha, k=self.k, use_inter=self.use_inter,
                           use_intra=self.use_intra, power_iters_max=self.power_iters_max,
                           tol=self.tol, metric=self.metric)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def lr_schedule(itr, cfg):
    """Polynomial decay ``lr_init * (1 - itr / max_iters) ** rho``."""
    if not 0 <= itr < cfg.max_iters:
        raise ParameterError(f"iteration {itr} outside [0, {cfg.max_iters})")
    return cfg.lr_init * (1.0 - itr / cfg.max_iters) ** cfg.rho


def run_id(cfg):
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True).encode()
    return hashlib.sha1(blob).hexdigest()[:12]


@dataclass
class RunReport:
    config: dict
    run_id: str
    losses: list
    miou: dict = dataclasses.field(default_factory=dict)
    best_threshold: float | None = None
    optimizer: str = "sgd (no momentum, no weight decay)"
    # wall-clock figures vary run to run; kept out of to_json()
    wall_times: dict = dataclasses.field(default_factory=dict)

    def to_json(self):
        body = {
            "run_id": self.run_id,
            "config": self.config,
            "optimizer": self.optimizer,
            "losses": [float(v) for v in self.losses],
            "miou": {f"{k:.2f}": float(v) for k, v in self.miou.items()},
            "best_threshold": self.best_threshold,
        }
        return json.dumps(body, indent=1, sort_keys=True)


def _training_group(corpus, n, rng, tries=8):
    """Sample and augment a class-sharing group; retry if cropping broke sharing."""
    scenes, _ = sample_group(corpus, n, rng)
    for _ in range(tries):
        aug = [augment(s, rng) for s in scenes]
        labels = np.stack([s.labels for s in aug])
        if np.any(np.all(labels > 0, axis=0)):
            return aug
    return scenes


def train(corpus, cfg, checkpoint_path=None):
    """Plain SGD over batches of class-sharing groups.

    Returns ``(params, report)``; the batch loss is the mean over groups of
    the per-group loss. Raises :class:`NumericAbort` on a non-finite loss.
    """
    t0 = time.perf_counter()
    params = ModelParams.init(rng_stream(cfg.seed, INIT_STREAM), c=cfg.channels,
                              n_classes=corpus.n_classes)
    data_rng = rng_stream(cfg.seed, DATA_STREAM)
    mcfg = cfg.model_cfg()
    report = RunReport(dataclasses.asdict(cfg), run_id(cfg), [])
    scale = 1.0 / cfg.batch_pairs
    for itr in range(cfg.max_iters):
        lr = lr_schedule(itr, cfg)
        total = None
        batch_loss = 0.0
        for _ in range(cfg.batch_pairs):
            group = _training_group(corpus, cfg.group_n, data_rng)
            images = np.stack([s.image for s in group])
            labels = np.stack([s.labels for s in group])
            try:
                _, value, cache = forward_group(images, labels, params, mcfg)
            except NumericAbort as exc:
                report.wall_times["train"] = time.perf_counter() - t0
                raise NumericAbort(f"iteration {itr}: {exc}", report) from None
            grads = backward(cache, params, scale=scale)
            batch_loss += value * scale
            if total is None:
                total = grads
            else:
                for name in total:
                    total[name] += grads[name]
        report.losses.append(batch_loss)
        if not np.isfinite(batch_loss):
            report.wall_times["train"] = time.perf_counter() - t0
            raise NumericAbort(f"non-finite loss at iteration {itr}", report)
        params.apply_update(total, lr)
        if itr % 100 == 0:
            log.info("iter %d lr %.4f loss %.4f", itr, lr, batch_loss)
    report.wall_times["train"] = time.perf_counter() - t0
    if checkpoint_path:
        save_checkpoint(checkpoint_path, params, checkpoint_meta(cfg))
    return params, report


def checkpoint_meta(cfg):
    """Scalar model settings stored alongside the weights (metric as its index)."""
    return {"alpha": cfg.alpha, "k": cfg.k, "group_n": cfg.group_n,
            "use_inter": int(cfg.use_inter), "use_intra": int(cfg.use_intra),
            "power_iters_max": cfg.power_iters_max, "tol": cfg.tol,
            "metric": METRICS.index(cfg.metric), "seed": cfg.seed,
            "max_iters": cfg.max_iters}


def model_cfg_from_meta(meta):
    defaults = ModelConfig()
    return ModelConfig(alpha=meta.get("alpha", defaults.alpha),
                       k=int(meta.get("k", defaults.k)),
                       use_inter=bool(meta.get("use_inter", defaults.use_inter)),
                       use_intra=bool(meta.get("use_intra", defaults.use_intra)),
                       power_iters_max=int(meta.get("power_iters_max", defaults.power_iters_max)),
                       tol=meta.get("tol", defaults.tol),
                       metric=METRICS[int(meta.get("metric", METRICS.index(defaults.metric)))])


# ---------------------------------------------------------------- evaluation

def _content_key(scene):
    return hashlib.sha1(np.ascontiguousarray(scene.image).tobytes()).hexdigest()


def eval_partners(corpus):
    """Inter-matching partner for every scene, independent of corpus order.

    The partner of a scene is, among the other scenes sharing a labelled
    class with it, the one with the smallest content hash. Scenes without
    any such scene get ``None``.
    """
    keys = [_content_key(s) for s in corpus.scenes]
    labels = np.stack([s.labels for s in corpus.scenes]) > 0
    partners = []
    for i in range(len(corpus.scenes)):
        shares = np.any(labels & labels[i], axis=1)
        shares[i] = False
        cand = np.flatnonzero(shares)
        partners.append(int(min(cand, key=lambda j: keys[j])) if cand.size else None)
    return partners


def scene_features(params, corpus, cfg):
    """Final (GAP-input) feature map of every scene under ``cfg``'s flags."""
    partners = eval_partners(corpus) if cfg.use_inter else [None] * len(corpus)
    feats = []
    for i, scene in enumerate(corpus.scenes):
        j = partners[i]
        if j is None:
            solo = dataclasses.replace(cfg, use_inter=False)
            _, _, cache = forward_group(scene.image[None], None, params, solo)
        else:
            images = np.stack([scene.image, corpus.scenes[j].image])
            _, _, cache = forward_group(images, None, params, cfg)
        feats.append(cache.final[0])
    return feats


def upsample(cam, H, W):
    """Bilinear resize with half-pixel centres (edge-clamped)."""
    rows, cols = cam.shape

    def axis(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(H, rows)
    c0, c1, fc = axis(W, cols)
    top = cam[r0][:, c0] * (1 - fc) + cam[r0][:, c1] * fc
    bot = cam[r1][:, c0] * (1 - fc) + cam[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def scene_cams(feature, params, labels, H, W):
    """Upsampled CAM for every labelled class; absent classes are None."""
    return [upsample(compute_cam(feature, params.head_w, c), H, W) if labels[c] else None
            for c in range(len(labels))]


def seed_prediction(cams, threshold):
    """Pixel labels: the strongest labelled class whose CAM reaches ``threshold``."""
    present = [(c, cam) for c, cam in enumerate(cams) if cam is not None]
    if not present:
        raise DataError("scene has no labelled class")
    H, W = present[0][1].shape
    stack = np.stack([np.where(cam >= threshold, cam, -1.0) for _, cam in present])
    best = stack.argmax(axis=0)
    ids = np.array([c + 1 for c, _ in present])
    return np.where(stack.max(axis=0) >= 0.0, ids[best], 0).reshape(H, W)


def confusion(pred, gt, n_labels):
    idx = gt.astype(np.int64).ravel() * n_labels + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=n_labels * n_labels).reshape(n_labels, n_labels)


def miou_from_confusion(conf):
    """Mean IoU over labels that occur in the ground truth."""
    tp = np.diag(conf).astype(np.float64)
    gt_count = conf.sum(axis=1)
    pred_count = conf.sum(axis=0)
    present = gt_count > 0
    if not present.any():
        raise DataError("no ground-truth pixels to evaluate")
    iou = tp[present] / (gt_count[present] + pred_count[present] - tp[present])
    return float(iou.mean())


def miou(preds, gts, n_classes):
    """Dataset mIoU over background + ``n_classes`` classes."""
    n_labels = n_classes + 1
    conf = np.zeros((n_labels, n_labels), dtype=np.int64)
    for p, g in zip(preds, gts):
        conf += confusion(p, g, n_labels)
    return miou_from_confusion(conf)


def eval_seed_miou(params, corpus, cfg, thresholds=THRESHOLDS):
    """Seed mIoU per threshold; returns ``(dict threshold -> mIoU, best threshold)``."""
    if isinstance(cfg, TrainConfig):
        cfg = cfg.model_cfg()
    keep = [i for i, s in enumerate(corpus.scenes) if s.has_mask]
    if not keep:
        raise DataError("evaluation set has no scenes with pixel masks")
    feats = scene_features(params, corpus, cfg)
    n_labels = corpus.n_classes + 1
    confs = {t: np.zeros((n_labels, n_labels), dtype=np.int64) for t in thresholds}
    for i in keep:
        scene = corpus.scenes[i]
        H, W = scene.mask.shape
        cams = scene_cams(feats[i], params, scene.labels, H, W)
        for t in thresholds:
            confs[t] += confusion(seed_prediction(cams, t), scene.mask, n_labels)
    scores = {t: miou_from_confusion(confs[t]) for t in thresholds}
    best = max(thresholds, key=lambda t: (scores[t], -t))
    return scores, best


# ---------------------------------------------------------------- experiments

ABLATIONS = (
    ("baseline", False, False),
    ("inter", True, False),
    ("intra", False, True),
    ("both", True, True),
)


def ablate(train_corpus, eval_set, base_cfg, out_dir=None):
    """Four runs differing only in the matching flags; returns a list of row dicts."""
    rows = []
    for name, use_inter, use_intra in ABLATIONS:
        cfg = base_cfg.replace(use_inter=use_inter, use_intra=use_intra)
        t0 = time.perf_counter()
        params, report = train(train_corpus, cfg)
        scores, best = eval_seed_miou(params, eval_set, cfg)
        report.miou, report.best_threshold = scores, best
        rows.append({"variant": name, "use_inter": int(use_inter), "use_intra": int(use_intra),
                     "best_threshold": best, "miou": scores[best],
                     "final_loss": report.losses[-1] if report.losses else float("nan"),
                     "seconds": time.perf_counter() - t0})
        log.info("ablation %s: mIoU %.4f at %.2f", name, scores[best], best)
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            save_checkpoint(os.path.join(out_dir, f"{name}.ckpt"), params, checkpoint_meta(cfg))
            with open(os.path.join(out_dir, f"{name}.report.json"), "w") as fh:
                fh.write(report.to_json())
    if out_dir:
        write_csv(os.path.join(out_dir, "ablation.csv"), rows)
    return rows


SWEEP_PARAMS = ("alpha", "k", "group_n")


def sweep(train_corpus, eval_set, base_cfg, param, values, out_dir=None, time_trials=5):
    """One training run per value of ``param``; group_n rows also carry matching time."""
    if param not in SWEEP_PARAMS:
        raise ParameterError(f"sweep parameter must be one of {SWEEP_PARAMS}, got {param!r}")
    if not values:
        raise ParameterError("sweep needs at least one value")
    rows = []
    for v in values:
        v = int(v) if param in ("k", "group_n") else float(v)
        cfg = base_cfg.replace(**{param: v})
        params, report = train(train_corpus, cfg)
        scores, best = eval_seed_miou(params, eval_set, cfg)
        row = {"param": param, "value": v, "best_threshold": best, "miou": scores[best]}
        if param == "group_n":
            H, W = train_corpus.scenes[0].mask.shape
            row["match_seconds"] = time_group_match(H // 4, W // 4, cfg.channels, v, time_trials)
        rows.append(row)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_csv(os.path.join(out_dir, f"sweep_{param}.csv"), rows)
    return rows


def bench_group(sizes, rows=8, cols=8, c=32, trials=5, seed=0):
    return [{"group_n": n, "seconds": time_group_match(rows, cols, c, n, trials, seed)}
            for n in sizes]


def write_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def emit_masks(params, corpus, cfg, out_dir, threshold=0.3):
    """Seed mask (class id * 32) and per-class CAM heat maps as PGM files."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out_dir}: {exc}") from exc
    feats = scene_features(params, corpus, cfg)
    written = []
    for scene, feat in zip(corpus.scenes, feats):
        H, W = scene.mask.shape
        stem = scene.name or "scene"
        all_cams = [upsample(compute_cam(feat, params.head_w, c), H, W)
                    for c in range(corpus.n_classes)]
        labelled = [cam if scene.labels[c] else None for c, cam in enumerate(all_cams)]
        seed = (seed_prediction(labelled, threshold) if scene.labels.any()
                else np.zeros((H, W), dtype=np.int64))
        path = os.path.join(out_dir, f"{stem}.seed.pgm")
        write_pgm(path, seed * 32)
        written.append(path)
        for c, cam in enumerate(all_cams):
            path = os.path.join(out_dir, f"{stem}.cam{c}.pgm")
            write_pgm(path, np.clip(np.rint(cam * 255.0), 0, 255).astype(np.uint8))
            written.append(path)
    return written
