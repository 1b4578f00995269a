"""Toy share-weight encoder + classifier wrapping both matching modules.

Pipeline per group of images::

    encode -> [inter-match reweight] -> [intra-match update] -> GAP -> head

Everything is hand-differentiated. The co-occurrence masks and the top-k
match tables are constants for the reverse pass.
"""

import dataclasses
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, ParameterError, ParseError
from .inter_match import InterMatchConfig, co_masks, reweight_scale
from .intra_match import PointUpdateParams, backward_update, intra_forward

CHECKPOINT_MAGIC = b"COMN"
CHECKPOINT_VERSION = 1
HIDDEN_CHANNELS = 16


@dataclass
class ModelConfig:
    alpha: float = 1.5
    k: int = 8
    use_inter: bool = True
    use_intra: bool = True
    power_iters_max: int = 500
    tol: float = 1e-8
    metric: str = "inner"

    def inter_cfg(self, group_n=2):
        return InterMatchConfig(alpha=self.alpha, group_n=group_n,
                                power_iters_max=self.power_iters_max, tol=self.tol)


@dataclass
class ModelParams:
    conv1_w: np.ndarray  # (out, in, ky, kx)
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    intra: PointUpdateParams
    head_w: np.ndarray   # n_classes x c
    head_b: np.ndarray
    version: int = field(default=0, compare=False)

    NAMES = ("conv1.w", "conv1.b", "conv2.w", "conv2.b",
             "intra.w1", "intra.b1", "intra.w2", "intra.b2", "head.w", "head.b")

    @classmethod
    def init(cls, rng, c=32, n_classes=4, in_channels=3, hidden=HIDDEN_CHANNELS):
        """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, zero head."""
        def conv(cout, cin):
            s = 1.0 / np.sqrt(cin * 9)
            return rng.uniform(-s, s, (cout, cin, 3, 3))

        w1 = conv(hidden, in_channels)
        w2 = conv(c, hidden)
        s = 1.0 / np.sqrt(c)
        intra = PointUpdateParams(rng.uniform(-s, s, (c, c)), np.zeros(c),
                                  rng.uniform(-s, s, (c, c)), np.zeros(c))
        return cls(w1, np.zeros(hidden), w2, np.zeros(c), intra,
                   np.zeros((n_classes, c)), np.zeros(n_classes))

    @property
    def channels(self):
        return self.conv2_w.shape[0]

    @property
    def n_classes(self):
        return self.head_w.shape[0]

    def tensors(self):
        """Name -> array (live references, not copies)."""
        return {
            "conv1.w": self.conv1_w, "conv1.b": self.conv1_b,
            "conv2.w": self.conv2_w, "conv2.b": self.conv2_b,
            "intra.w1": self.intra.w1, "intra.b1": self.intra.b1,
            "intra.w2": self.intra.w2, "intra.b2": self.intra.b2,
            "head.w": self.head_w, "head.b": self.head_b,
        }

    @classmethod
    def from_tensors(cls, t):
        missing = [n for n in cls.NAMES if n not in t]
        if missing:
            raise ContractError(f"missing parameter tensors: {missing}")
        a = {n: np.array(t[n], dtype=np.float64) for n in cls.NAMES}
        return cls(a["conv1.w"], a["conv1.b"], a["conv2.w"], a["conv2.b"],
                   PointUpdateParams(a["intra.w1"], a["intra.b1"], a["intra.w2"], a["intra.b2"]),
                   a["head.w"], a["head.b"])

    def copy(self):
        return ModelParams.from_tensors(self.tensors())

    def apply_update(self, grads, lr):
        """In-place ``p -= lr * g``; invalidates outstanding forward caches."""
        for name, arr in self.tensors().items():
            arr -= lr * grads[name]
        self.version += 1

    def touch(self):
        self.version += 1


# ---------------------------------------------------------------- conv layers

def _conv_forward(x, w, b):
    """3x3 conv, stride 2, zero pad 1 on a channels-last batch ``B x H x W x Ci``."""
    bsz, hgt, wid, cin = x.shape
    ho, wo = hgt // 2, wid // 2
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.stack([xp[:, ky:ky + 2 * ho:2, kx:kx + 2 * wo:2, :]
                     for ky in range(3) for kx in range(3)], axis=3)
    cols = cols.reshape(bsz * ho * wo, 9 * cin)
    wmat = w.transpose(2, 3, 1, 0).reshape(9 * cin, -1)
    out = cols @ wmat + b
    return out.reshape(bsz, ho, wo, -1), cols


def _conv_backward(gout, cols, x_shape, w):
    bsz, hgt, wid, cin = x_shape
    ho, wo = hgt // 2, wid // 2
    cout = w.shape[0]
    g2 = gout.reshape(-1, cout)
    gw = (cols.T @ g2).reshape(3, 3, cin, cout).transpose(3, 2, 0, 1)
    gb = g2.sum(axis=0)
    wmat = w.transpose(2, 3, 1, 0).reshape(9 * cin, cout)
    gcols = (g2 @ wmat.T).reshape(bsz, ho, wo, 3, 3, cin)
    gxp = np.zeros((bsz, hgt + 2, wid + 2, cin))
    for ky in range(3):
        for kx in range(3):
            gxp[:, ky:ky + 2 * ho:2, kx:kx + 2 * wo:2, :] += gcols[:, :, :, ky, kx, :]
    return gxp[:, 1:-1, 1:-1, :], gw, gb


def _check_images(images):
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[3] != 3:
        raise DimensionError(f"images must be H x W x 3, got {images.shape}")
    if images.shape[1] % 4 or images.shape[2] % 4:
        raise DimensionError(f"image extents {images.shape[1:3]} not divisible by 4")
    return images


def _encode(images, p):
    z1, cols1 = _conv_forward(images, p.conv1_w, p.conv1_b)
    a1 = np.maximum(z1, 0.0)
    z2, cols2 = _conv_forward(a1, p.conv2_w, p.conv2_b)
    feat = np.maximum(z2, 0.0)
    return feat, (images.shape, cols1, z1, a1.shape, cols2, z2)


def _encode_backward(gfeat, cache, p):
    x_shape, cols1, z1, a1_shape, cols2, z2 = cache
    gz2 = gfeat * (z2 > 0)
    ga1, gw2, gb2 = _conv_backward(gz2, cols2, a1_shape, p.conv2_w)
    gz1 = ga1 * (z1 > 0)
    _, gw1, gb1 = _conv_backward(gz1, cols1, x_shape, p.conv1_w)
    return {"conv1.w": gw1, "conv1.b": gb1, "conv2.w": gw2, "conv2.b": gb2}


def encode(image, p):
    """``H x W x 3`` image -> ``H/4 x W/4 x c`` feature map."""
    feat, _ = _encode(_check_images(image), p)
    return feat[0]


# ---------------------------------------------------------------- loss

def loss(logits, y):
    """Multi-label logistic loss summed over classes, overflow-free for large |x|."""
    x = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"logits {x.shape} and labels {y.shape} differ")
    # -log sigma(x) = softplus(-x); -log(1 - sigma(x)) = softplus(x)
    return float(np.sum(y * np.logaddexp(0.0, -x) + (1.0 - y) * np.logaddexp(0.0, x)))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def loss_grad(logits, y):
    return _sigmoid(np.asarray(logits, dtype=np.float64)) - np.asarray(y, dtype=np.float64)


# ---------------------------------------------------------------- forward / backward

@dataclass
class GroupCache:
    params: ModelParams
    version: int
    cfg: ModelConfig
    enc: tuple
    feat: np.ndarray          # N x rows x cols x c encoder output
    masks: list | None        # per-image co-occurrence masks (stop-gradient)
    scales: np.ndarray | None  # N x rows x cols multipliers
    intra: list | None        # per-image IntraCache
    final: np.ndarray         # N x rows x cols x c features fed to GAP
    pooled: np.ndarray        # N x c
    logits: np.ndarray        # N x n_classes
    labels: np.ndarray | None
    indicator: object = None
    match_idx: list | None = None


def _shares_class(labels):
    labels = np.asarray(labels) > 0
    return bool(np.any(np.all(labels, axis=0)))


def forward_group(images, labels, p, cfg=None, freeze=None):
    """Forward a group of images that share at least one class.

    ``labels`` may be None for inference (no loss, no class check).
    ``freeze`` is a previous :class:`GroupCache` whose masks and match tables
    are reused instead of recomputed, so the result is a smooth function of
    the parameters; finite-difference checks use this.

    Returns ``(logits, loss_value, cache)``.
    """
    cfg = cfg or ModelConfig()
    images = _check_images(images)
    n_img = images.shape[0]
    if labels is not None:
        labels = np.asarray(labels, dtype=np.float64).reshape(n_img, -1)
        if n_img > 1 and not _shares_class(labels):
            raise ContractError("images in a group must share at least one positive class")

    feat, enc = _encode(images, p)
    _, rows, cols, c = feat.shape
    cur = feat
    masks = scales = indicator = None
    if cfg.use_inter:
        if n_img < 2:
            raise ContractError("inter-matching needs a group of at least two images")
        if freeze is not None and freeze.masks is not None:
            masks = freeze.masks
        else:
            masks, indicator = co_masks(list(feat), cfg.inter_cfg(n_img))
        scales = np.stack([reweight_scale(m, cfg.alpha) for m in masks])
        cur = cur * scales[..., None]

    intra_caches = idx_list = None
    if cfg.use_intra:
        outs, intra_caches, idx_list = [], [], []
        for i in range(n_img):
            pts = cur[i].reshape(rows * cols, c).T
            idx = freeze.match_idx[i] if freeze is not None and freeze.match_idx else None
            out, ic = intra_forward(pts, p.intra, k=cfg.k, idx=idx, metric=cfg.metric)
            outs.append(out.T.reshape(rows, cols, c))
            intra_caches.append(ic)
            idx_list.append(ic.idx)
        cur = np.stack(outs)

    pooled = cur.mean(axis=(1, 2))
    logits = pooled @ p.head_w.T + p.head_b
    value = None
    if labels is not None:
        value = sum(loss(logits[i], labels[i]) for i in range(n_img))
    cache = GroupCache(p, p.version, cfg, enc, feat, masks, scales, intra_caches,
                       cur, pooled, logits, labels, indicator, idx_list)
    return logits, value, cache


def forward_pair(pair, labels, p, cfg=None, use_inter=None, use_intra=None, freeze=None):
    """Two-image case of :func:`forward_group`; flags override ``cfg``."""
    cfg = cfg or ModelConfig()
    if use_inter is not None or use_intra is not None:
        cfg = dataclasses.replace(
            cfg,
            use_inter=cfg.use_inter if use_inter is None else use_inter,
            use_intra=cfg.use_intra if use_intra is None else use_intra,
        )
    if len(pair) != 2:
        raise DimensionError(f"a pair holds two images, got {len(pair)}")
    return forward_group(pair, labels, p, cfg, freeze=freeze)


def backward(cache, p, scale=1.0):
    """Gradients of ``scale * loss`` w.r.t. every tensor in ``p.tensors()``."""
    if cache is None or cache.labels is None:
        raise ContractError("backward needs a training forward cache")
    if cache.params is not p or cache.version != p.version:
        raise ContractError("stale cache: parameters changed since the forward pass")
    n_img, rows, cols, c = cache.final.shape
    glogits = loss_grad(cache.logits, cache.labels) * scale   # N x C
    grads = {"head.w": glogits.T @ cache.pooled, "head.b": glogits.sum(axis=0)}
    gpooled = glogits @ p.head_w                               # N x c
    gcur = np.broadcast_to(gpooled[:, None, None, :] / (rows * cols), cache.final.shape).copy()

    gint = {k: np.zeros_like(v) for k, v in
            {"w1": p.intra.w1, "b1": p.intra.b1, "w2": p.intra.w2, "b2": p.intra.b2}.items()}
    if cache.intra is not None:
        gin = np.empty_like(gcur)
        for i in range(n_img):
            gout = gcur[i].reshape(rows * cols, c).T
            gf, gi = backward_update(gout, cache.intra[i], p.intra)
            gin[i] = gf.T.reshape(rows, cols, c)
            for k in gint:
                gint[k] += gi[k]
        gcur = gin
    for k, v in gint.items():
        grads["intra." + k] = v

    if cache.scales is not None:
        gcur = gcur * cache.scales[..., None]
    grads.update(_encode_backward(gcur, cache.enc, p))
    return grads


# ---------------------------------------------------------------- CAM

def compute_cam(feature, head_w, class_id):
    """Rectified, min-max normalized class activation map of a ``rows x cols x c`` map."""
    head_w = np.asarray(head_w, dtype=np.float64)
    if not 0 <= class_id < head_w.shape[0]:
        raise ParameterError(f"class_id {class_id} outside [0, {head_w.shape[0]})")
    resp = np.maximum(np.asarray(feature, dtype=np.float64) @ head_w[class_id], 0.0)
    lo, hi = resp.min(), resp.max()
    if hi <= 0.0:
        return np.zeros_like(resp)
    if hi - lo <= 0.0:
        return np.ones_like(resp)
    return (resp - lo) / (hi - lo)


# ---------------------------------------------------------------- checkpoint

def save_checkpoint(path, p, meta=None):
    """Write ``p`` (plus scalar ``meta`` entries as rank-0 tensors) in COMN format."""
    items = list(p.tensors().items())
    for key in sorted(meta or {}):
        items.append(("meta." + key, np.asarray(float(meta[key]))))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, arr in items:
            arr = np.ascontiguousarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Read a COMN file; returns ``(ModelParams, meta dict)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: not a COMN checkpoint")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ParseError(f"{path}: truncated checkpoint")
        out = buf[pos:pos + n]
        pos += n
        return out

    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    tensors, meta = {}, {}
    while pos < len(buf):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        if name.startswith("meta."):
            meta[name[5:]] = float(arr.reshape(-1)[0])
        else:
            tensors[name] = arr
    return ModelParams.from_tensors(tensors), meta
