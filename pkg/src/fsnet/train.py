"""Minibatch construction, SGD-with-momentum training and checkpoints."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import RoiBatch, sample_rois
from .model import DetectorConfig, FSNet, count_params, param_shapes
from .ops import smooth_l1, smooth_l1_backward, softmax_cross_entropy
from .synth import Scene, generate_proposals
from .tensor import load_tensors, save_tensors

log = logging.getLogger(__name__)


def scene_proposals(scene: Scene, cfg: DetectorConfig) -> np.ndarray:
    return generate_proposals(scene, cfg.proposals_per_image, seed=cfg.seed)


def make_batch(scenes: list[Scene], cfg: DetectorConfig, rng: np.random.Generator):
    """[(image (1, 3, H, W), RoiBatch)] for each scene, gt boxes added to proposals."""
    batch = []
    for sc in scenes:
        props = np.concatenate([scene_proposals(sc, cfg), sc.boxes], axis=0)
        rois = sample_rois(props, sc.boxes, sc.classes, rng, cfg.rois_per_image, cfg.fg_fraction, cfg.fg_iou)
        batch.append((sc.image[None].astype(cfg.dtype), rois))
    return batch


def batch_loss(net: FSNet, batch: list[tuple[np.ndarray, RoiBatch]], with_grads: bool = True):
    """(cls_loss, reg_loss, grads) averaged over every RoI in the batch.

    Classification is mean softmax cross-entropy; regression is the smooth
    L1 sum over foreground RoIs divided by the RoI count (zero when there is
    no foreground).
    """
    total = sum(len(r.boxes) for _, r in batch)
    cls_loss = reg_loss = 0.0
    grads: dict[str, np.ndarray] = {}
    for image, rois in batch:
        n = len(rois.boxes)
        if n == 0:
            continue
        logits, deltas, cache = net.forward(image, rois.boxes)
        loss_i, dlogits = softmax_cross_entropy(logits, rois.labels)
        scale = n / total
        cls_loss += loss_i * scale
        dlogits = dlogits * scale
        ddeltas = np.zeros_like(deltas)
        fg = rois.labels > 0
        if fg.any():
            target = rois.targets[fg].astype(deltas.dtype)
            reg_loss += smooth_l1(deltas[fg], target) / total
            ddeltas[fg] = smooth_l1_backward(deltas[fg], target) / total
        if with_grads:
            g = net.backward(cache, dlogits.astype(deltas.dtype), ddeltas)
            for k, v in g.items():
                grads[k] = grads[k] + v if k in grads else v
    return cls_loss, reg_loss, grads


class SGD:
    """Plain SGD with heavy-ball momentum: v <- m v - lr (g + wd p); p <- p + v."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            g = grads[name]
            if self.weight_decay and name.endswith(".weight"):
                g = g + self.weight_decay * p
            v = self.velocity[name]
            v *= self.momentum
            v -= self.lr * g.astype(p.dtype)
            p += v


@dataclass
class TrainLog:
    cls_loss: list[float] = field(default_factory=list)
    reg_loss: list[float] = field(default_factory=list)
    seconds: float = 0.0

    def lines(self) -> list[str]:
        return [f"{i + 1}\t{c:.6f}\t{r:.6f}" for i, (c, r) in enumerate(zip(self.cls_loss, self.reg_loss))]


class Trainer:
    def __init__(self, cfg: DetectorConfig, net: FSNet | None = None):
        self.cfg = cfg
        self.net = FSNet(cfg) if net is None else net
        self.opt = SGD(self.net.params, cfg.lr, cfg.momentum, cfg.weight_decay)
        self.rng = np.random.default_rng([cfg.seed, 1])

    def train_step(self, batch) -> tuple[float, float]:
        cls_loss, reg_loss, grads = batch_loss(self.net, batch)
        self.opt.step(grads)
        return cls_loss, reg_loss

    def fit(self, scenes: list[Scene], iterations: int | None = None, log_every: int = 0) -> TrainLog:
        cfg = self.cfg
        iterations = cfg.iterations if iterations is None else iterations
        out = TrainLog()
        order = np.empty(0, dtype=np.int64)
        start = time.perf_counter()
        for it in range(iterations):
            if len(order) < cfg.images_per_batch:
                order = np.concatenate([order, self.rng.permutation(len(scenes))])
            idx, order = order[:cfg.images_per_batch], order[cfg.images_per_batch:]
            batch = make_batch([scenes[i] for i in idx], cfg, self.rng)
            c, r = self.train_step(batch)
            out.cls_loss.append(c)
            out.reg_loss.append(r)
            if log_every and (it + 1) % log_every == 0:
                log.info("iter %d cls %.4f reg %.4f", it + 1, c, r)
        out.seconds = time.perf_counter() - start
        return out


# --- checkpoints ------------------------------------------------------------

PARAMS_FILE = "params.fsnt"
MANIFEST_FILE = "manifest.json"


def save_checkpoint(path, net: FSNet) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    names = list(param_shapes(net.cfg))
    save_tensors(root / PARAMS_FILE, [net.params[n] for n in names])
    manifest = {
        "format": "fsnet-checkpoint-v1",
        "params_file": PARAMS_FILE,
        "parameters": [{"name": n, "shape": list(net.params[n].shape)} for n in names],
        "param_count": int(sum(net.params[n].size for n in names)),
        "config": net.cfg.to_dict(),
        "config_hash": net.cfg.model_hash(),
    }
    (root / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2) + "\n")


def read_manifest(path) -> dict:
    mf = Path(path) / MANIFEST_FILE
    if not mf.exists():
        raise FileNotFoundError(f"no checkpoint at {path} (missing {MANIFEST_FILE})")
    return json.loads(mf.read_text())


def load_checkpoint(path) -> FSNet:
    manifest = read_manifest(path)
    cfg_dict = dict(manifest["config"])
    cfg_dict["backbone_widths"] = tuple(cfg_dict["backbone_widths"])
    cfg = DetectorConfig(**cfg_dict)
    if cfg.model_hash() != manifest["config_hash"]:
        raise ValueError("checkpoint config hash mismatch")
    arrays = load_tensors(Path(path) / manifest["params_file"])
    entries = manifest["parameters"]
    if len(arrays) != len(entries):
        raise ValueError(f"manifest lists {len(entries)} tensors, file has {len(arrays)}")
    params = {e["name"]: a.reshape(e["shape"]) for e, a in zip(entries, arrays)}
    if sum(a.size for a in params.values()) != count_params(cfg):
        raise ValueError("checkpoint parameter count disagrees with config")
    return FSNet(cfg, params)
