"""Training objectives on unit-norm embeddings: contrastive, triplet (with
mining), and additive-angular-margin softmax. All gradients are analytic."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, MiningError


# --- contrastive -------------------------------------------------------------

def contrastive_loss(z1, z2, y: int, margin: float):
    """loss = y*D^2 + (1-y)*max(0, margin - D)^2 with D = ||z1 - z2||.

    Returns (loss, dz1, dz2). The impostor D=0 case uses a zero subgradient.
    """
    z1 = np.asarray(z1, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    diff = z1 - z2
    d = float(np.linalg.norm(diff))
    if y == 1:
        return d * d, 2.0 * diff, -2.0 * diff
    if d >= margin or d == 0.0:
        return 0.0, np.zeros_like(z1), np.zeros_like(z2)
    gap = margin - d
    g = -2.0 * gap * diff / d
    return gap * gap, g, -g


# --- triplet -----------------------------------------------------------------

def triplet_loss(z_a, z_p, z_n, alpha: float):
    """loss = max(0, D_ap - D_an + alpha); returns (loss, dz_a, dz_p, dz_n)."""
    z_a = np.asarray(z_a, dtype=float)
    z_p = np.asarray(z_p, dtype=float)
    z_n = np.asarray(z_n, dtype=float)
    dap_vec, dan_vec = z_a - z_p, z_a - z_n
    dap = float(np.linalg.norm(dap_vec))
    dan = float(np.linalg.norm(dan_vec))
    loss = dap - dan + alpha
    if loss <= 0.0:
        zero = np.zeros_like(z_a)
        return 0.0, zero, zero.copy(), zero.copy()
    gp = dap_vec / dap if dap > 0 else np.zeros_like(z_a)
    gn = dan_vec / dan if dan > 0 else np.zeros_like(z_a)
    return loss, gp - gn, -gp, gn


def mine_triplets(
    embeddings: np.ndarray,
    labels,
    strategy: str,
    alpha: float,
    seed: int,
) -> list[tuple[int, int, int]]:
    """Select (anchor, positive, negative) index triples within a batch.

    random: seeded uniform positive and negative per anchor.
    semi-hard: per (a, p), hardest negative inside (D_ap, D_ap + alpha);
    falls back to the globally hardest negative when the band is empty.
    hard: per anchor, hardest positive and hardest negative.
    """
    z = np.asarray(embeddings, dtype=float)
    labels = np.asarray(labels)
    if strategy not in ("random", "semi-hard", "hard"):
        raise ConfigError(f"unknown mining strategy {strategy!r}")
    n = z.shape[0]
    d2 = np.maximum(
        np.sum(z * z, axis=1)[:, None] + np.sum(z * z, axis=1)[None, :] - 2.0 * z @ z.T,
        0.0,
    )
    dist = np.sqrt(d2)
    same = labels[:, None] == labels[None, :]
    has_pos = np.array([np.any(same[i]) and same[i].sum() > 1 for i in range(n)])
    has_neg = np.array([np.any(~same[i]) for i in range(n)])
    anchors = [i for i in range(n) if has_pos[i] and has_neg[i]]
    if not anchors:
        raise MiningError("no anchor with both a positive and a negative in batch")

    rng = np.random.default_rng(seed)
    triplets: list[tuple[int, int, int]] = []
    for a in anchors:
        pos_idx = np.flatnonzero(same[a] & (np.arange(n) != a))
        neg_idx = np.flatnonzero(~same[a])
        if strategy == "random":
            p = int(rng.choice(pos_idx))
            ng = int(rng.choice(neg_idx))
            triplets.append((a, p, ng))
        elif strategy == "hard":
            p = int(pos_idx[np.argmax(dist[a, pos_idx])])
            ng = int(neg_idx[np.argmin(dist[a, neg_idx])])
            triplets.append((a, p, ng))
        else:  # semi-hard, one triplet per (a, p)
            for p in pos_idx:
                dap = dist[a, p]
                band = neg_idx[(dist[a, neg_idx] > dap) & (dist[a, neg_idx] < dap + alpha)]
                if band.size:
                    ng = int(band[np.argmin(dist[a, band])])
                else:
                    ng = int(neg_idx[np.argmin(dist[a, neg_idx])])
                triplets.append((a, int(p), ng))
    return triplets


# --- arcface -----------------------------------------------------------------

@dataclass
class ArcFaceHead:
    """Per-identity class weights plus scale and angular margin."""

    W: np.ndarray  # (n_classes, dim); normalized on use
    scale: float = 30.0
    margin: float = 0.5

    def __post_init__(self):
        if self.scale <= 0:
            raise ConfigError("scale must be > 0")
        if not 0.0 <= self.margin < math.pi:
            raise ConfigError("margin must be in [0, pi)")

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]


def init_arcface_head(n_classes: int, dim: int, seed: int,
                      scale: float = 30.0, margin: float = 0.5) -> ArcFaceHead:
    rng = np.random.default_rng(seed)
    w = rng.normal(scale=0.01, size=(n_classes, dim))
    return ArcFaceHead(w, scale, margin)


def _margin_logit(cos_y: np.ndarray, m: float):
    """cos(theta + m) with the stable fallback cos(theta) - m*sin(m) for
    theta > pi - m. Returns (value, d value / d cos_y)."""
    cos_m, sin_m = math.cos(m), math.sin(m)
    sin_y = np.sqrt(np.maximum(1.0 - cos_y * cos_y, 0.0))
    main = cos_y * cos_m - sin_y * sin_m
    fallback = cos_y - m * sin_m
    use_main = cos_y > math.cos(math.pi - m)
    value = np.where(use_main, main, fallback)
    with np.errstate(divide="ignore", invalid="ignore"):
        dmain = cos_m + np.where(sin_y > 0, sin_m * cos_y / sin_y, 0.0)
    grad = np.where(use_main, dmain, 1.0)
    return value, grad


def arcface_logits(z: np.ndarray, head: ArcFaceHead, label: int) -> np.ndarray:
    """Scaled cosine logits with the additive angular margin on `label`."""
    z = np.asarray(z, dtype=float)
    w_norm = np.linalg.norm(head.W, axis=1, keepdims=True)
    what = head.W / w_norm
    cos = np.clip(what @ z, -1.0, 1.0)
    logits = head.scale * cos
    phi, _ = _margin_logit(np.array([cos[label]]), head.margin)
    logits[label] = head.scale * float(phi[0])
    return logits


def arcface_loss(z: np.ndarray, head: ArcFaceHead, label: int):
    """Softmax cross-entropy on margin-modified logits.

    Returns (loss, dz, dW) with gradients through the weight normalization,
    margin, and scale.
    """
    zb = np.asarray(z, dtype=float)[None, :]
    loss, dz, dw = arcface_batch_loss(zb, np.array([label]), head)
    return loss, dz[0], dw


def arcface_batch_loss(Z: np.ndarray, labels: np.ndarray, head: ArcFaceHead):
    """Mean loss over a batch; returns (loss, dZ, dW)."""
    Z = np.asarray(Z, dtype=float)
    labels = np.asarray(labels, dtype=int)
    bsz = Z.shape[0]
    w_norm = np.linalg.norm(head.W, axis=1, keepdims=True)
    what = head.W / w_norm
    cos = np.clip(Z @ what.T, -1.0, 1.0)  # (B, C)
    rows = np.arange(bsz)
    cos_y = cos[rows, labels]
    phi, dphi = _margin_logit(cos_y, head.margin)

    logits = head.scale * cos
    logits[rows, labels] = head.scale * phi

    shifted = logits - logits.max(axis=1, keepdims=True)
    expl = np.exp(shifted)
    probs = expl / expl.sum(axis=1, keepdims=True)
    loss = float(np.mean(-shifted[rows, labels] + np.log(expl.sum(axis=1))))

    dlogits = probs.copy()
    dlogits[rows, labels] -= 1.0
    dlogits /= bsz

    dcos = head.scale * dlogits
    dcos[rows, labels] *= dphi

    dZ = dcos @ what
    dwhat = dcos.T @ Z  # (C, dim)
    # through row normalization of W
    dW = (dwhat - what * np.sum(what * dwhat, axis=1, keepdims=True)) / w_norm
    return loss, dZ, dW
