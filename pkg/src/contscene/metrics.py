"""Desk-scale evaluation.

Image quality is scored in the feature space of a fixed random conv net
(seeded once, never trained) as the distance between diagonal Gaussian
fits; layout fidelity is scored as mean IoU of a small segmenter trained
on real renders and applied to generated images.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Tensor
from .checkpoint import Checkpoint, pack_params, unpack_params
from .labels import SemanticMap, ValidationError, class_frequencies, one_hot
from .network import Discriminator, ModelConfig
from .training import Adam

FEATURE_SEED = 0xC5900
FEATURE_DIM = 64


class FeatureExtractor:
    """Two fixed random conv layers, ReLU and global average pooling.

    Weights come from one documented seed, so feature values (and hence
    every distance built on them) are identical across runs and machines.
    """

    def __init__(self, seed=FEATURE_SEED):
        rng = np.random.RandomState(seed)
        self.w1 = rng.standard_normal((16, 3, 3, 3)) * np.sqrt(2.0 / (3 * 9))
        self.b1 = np.zeros(16)
        self.w2 = rng.standard_normal((FEATURE_DIM, 16, 3, 3)) * np.sqrt(2.0 / (16 * 9))
        self.b2 = np.zeros(FEATURE_DIM)

    def features(self, image):
        """[N, 64] feature matrix of an [N,3,H,W] image batch in [-1,1]."""
        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        with ad.no_grad():
            h = ad.relu(ad.conv2d(Tensor(arr), Tensor(self.w1), Tensor(self.b1), 1))
            h = ad.avg_pool2(h)
            h = ad.relu(ad.conv2d(h, Tensor(self.w2), Tensor(self.b2), 1))
        return h.data.mean(axis=(2, 3))


@dataclass(frozen=True)
class GaussianSummary:
    mean: np.ndarray
    var: np.ndarray  # per-dimension, population convention
    count: int


def summarize(images, extractor):
    """Diagonal Gaussian fit of the extractor's features over >= 2 images.

    Moments use exactly-rounded summation, so the result is bit-identical
    under any permutation of the input list.
    """
    if len(images) < 2:
        raise ValidationError(f"need at least 2 images to summarize, got {len(images)}")
    feats = np.concatenate([extractor.features(img) for img in images], axis=0)
    n = feats.shape[0]
    mean = np.array([math.fsum(feats[:, d]) / n for d in range(feats.shape[1])])
    var = np.array([math.fsum((feats[:, d] - mean[d]) ** 2) / n
                    for d in range(feats.shape[1])])
    return GaussianSummary(mean=mean, var=var, count=n)


def proxy_fid(a, b):
    """Frechet distance between diagonal Gaussian summaries.

    ||mu_a - mu_b||^2 + sum_i (va_i + vb_i - 2*sqrt(va_i*vb_i));
    symmetric, non-negative, zero on identical summaries.
    """
    if a.mean.shape != b.mean.shape:
        raise ValidationError(
            f"summary dimensions differ: {a.mean.shape} vs {b.mean.shape}")
    dm = a.mean - b.mean
    return float(dm @ dm + np.sum(a.var + b.var - 2.0 * np.sqrt(a.var * b.var)))


def miou(pred, gt, n_classes):
    """Mean IoU over the classes present in the ground truth."""
    if pred.labels.shape != gt.labels.shape:
        raise ValidationError(
            f"map sizes differ: {pred.labels.shape} vs {gt.labels.shape}")
    ious = []
    for c in range(n_classes):
        gt_c = gt.labels == c
        if not gt_c.any():
            continue
        pred_c = pred.labels == c
        inter = np.logical_and(pred_c, gt_c).sum()
        union = np.logical_or(pred_c, gt_c).sum()
        ious.append(inter / union)
    if not ious:
        raise ValidationError("ground truth contains no valid classes")
    return float(np.mean(ious))


# ---------------------------------------------------------------------------
# layout segmenter ("reality check" network for generated images)
# ---------------------------------------------------------------------------

class Segmenter:
    """Per-pixel classifier over the continual class space."""

    def __init__(self, n_classes, config, seed=0):
        self.n_classes = n_classes
        self.config = config
        self.net = Discriminator(n_classes, config, seed=seed, prefix="s")
        self.trained_iters = 0

    def segment(self, image):
        with ad.no_grad():
            logits = self.net.forward(Tensor(np.asarray(image, dtype=np.float64)))
        return SemanticMap(labels=np.argmax(logits.data[0], axis=0))


def train_segmenter(dataset, n_classes, config, iterations=3000, batch_size=4,
                    lr=1e-3, seed=0):
    """Fit a segmenter to real (image, mask) pairs with weighted pixel NLL."""
    if not dataset:
        raise ValidationError("segmenter needs a non-empty dataset")
    seg = Segmenter(n_classes, config, seed=seed)
    alpha = class_frequencies([s.mask for s in dataset], n_classes)
    rng = np.random.RandomState(seed)
    opt = Adam(seg.net.parameters(), lr=lr)
    for _ in range(iterations):
        idx = rng.randint(0, len(dataset), size=batch_size)
        batch = [dataset[i] for i in idx]
        images = np.concatenate([s.image for s in batch], axis=0)
        onehot = np.concatenate([one_hot(s.mask, n_classes) for s in batch], axis=0)
        logits = seg.net.forward(Tensor(images))
        loss = losses.weighted_pixel_nll(logits, onehot, alpha)
        opt.zero_grad()
        loss.backward()
        opt.step()
    seg.trained_iters = iterations
    return seg


def segmenter_to_checkpoint(seg):
    meta = {"n_classes": seg.n_classes, "trained_iters": seg.trained_iters,
            "config": seg.config.to_dict()}
    return Checkpoint([
        ("segmenter-meta", json.dumps(meta, sort_keys=True).encode("utf-8")),
        ("segmenter-params", pack_params(seg.net.parameters())),
    ])


def segmenter_from_checkpoint(ckpt):
    meta = json.loads(ckpt.section("segmenter-meta"))
    seg = Segmenter(int(meta["n_classes"]), ModelConfig.from_dict(meta["config"]))
    stored = unpack_params(ckpt.section("segmenter-params"))
    for p in seg.net.parameters():
        p.data = stored[p.name]
    seg.trained_iters = int(meta["trained_iters"])
    return seg


def gan_test(generator, domain, segmenter, spec, n_probes, seed):
    """Mean IoU of the segmenter on generated images vs their input maps."""
    from .scenes import generate_scene
    if segmenter.trained_iters == 0:
        raise ValidationError("segmenter has not been trained")
    step = generator.registry.step_of_domain(domain)
    n_classes = generator.registry.c_total(step)
    if segmenter.n_classes < n_classes:
        raise ValidationError(
            f"segmenter covers {segmenter.n_classes} classes, maps use {n_classes}")
    rng = np.random.RandomState(seed)
    scores = []
    for i in range(n_probes):
        scene = generate_scene(spec, seed * 7919 + i)
        z = rng.standard_normal(generator.config.z_dim)
        image = generator.generate(z, scene.mask, domain)
        pred = segmenter.segment(image)
        scores.append(miou(pred, scene.mask, n_classes))
    return float(np.mean(scores))


def dataset_summary(scenes, extractor):
    return summarize([s.image for s in scenes], extractor)


def generated_summary(generator, domain, spec, n, seed, extractor):
    """Summary over n generations conditioned on held-out maps."""
    from .scenes import generate_scene
    rng = np.random.RandomState(seed)
    images = []
    for i in range(n):
        scene = generate_scene(spec, seed * 104729 + i)
        z = rng.standard_normal(generator.config.z_dim)
        images.append(generator.generate(z, scene.mask, domain))
    return summarize(images, extractor)
