"""Deterministic mini-batch training of the embedding backbone under the
contrastive, triplet, or angular-margin objective, plus embedding extraction
and checkpoint I/O."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .cohort import ExamTable
from .embeddings import EmbeddingSet
from .errors import ConfigError, MiningError, TrainingFault, VerideError
from .identify import GallerySpec, build_gallery, cmc
from .losses import (
    ArcFaceHead,
    arcface_batch_loss,
    contrastive_loss,
    init_arcface_head,
    mine_triplets,
    triplet_loss,
)
from .mlp import MlpParams, NormStats, init_mlp, mlp_backward, mlp_forward, normalize

CHECKPOINT_MAGIC = b"VERIDE-CKPT v1\n"


@dataclass
class TrainConfig:
    loss: str = "arcface"  # contrastive | triplet | arcface
    margin: float = 1.0            # contrastive margin
    alpha: float = 0.2             # triplet margin
    scale: float = 30.0            # arcface s
    arc_margin: float = 0.5        # arcface m
    batch_size: int = 128
    learning_rate: float = 0.05
    epochs: int = 30
    mining: str = "semi-hard"      # triplet sampling
    seed: int = 0

    def __post_init__(self):
        if self.loss not in ("contrastive", "triplet", "arcface"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.batch_size < 2:
            raise ConfigError("batch size must be >= 2")
        if self.margin < 0 or self.alpha < 0 or self.arc_margin < 0:
            raise ConfigError("margins must be >= 0")


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_rank1: float
    wall_seconds: float


@dataclass
class TrainResult:
    params: MlpParams
    head: ArcFaceHead | None
    log: list[EpochLog]
    classes: list[str] = field(default_factory=list)  # arcface identity order


def _sgd_step(params: MlpParams, grads, lr: float) -> None:
    tensors = params.trainable()
    for name, g in grads.trainable().items():
        tensors[name] -= lr * g


def _val_rank1(params: MlpParams, val_table: ExamTable, norm: NormStats, seed: int) -> float:
    if len(val_table) == 0:
        return float("nan")
    es = embed_table(params, val_table, norm)
    try:
        split = build_gallery(es, GallerySpec("random_single", seed))
    except VerideError:
        return float("nan")
    if len(split.probes) == 0:
        return float("nan")
    return cmc(split.probes, split.gallery).rank_at(1)


def _contrastive_batch(z, labels, margin, rng):
    """All within-batch genuine pairs plus an equal number of seeded
    impostor pairs; returns (mean loss, dZ) or None when no genuine pair."""
    n = z.shape[0]
    labels = np.asarray(labels)
    genuine = [
        (i, j) for i in range(n) for j in range(i + 1, n) if labels[i] == labels[j]
    ]
    if not genuine:
        return None
    impostor = []
    guard = 0
    while len(impostor) < len(genuine) and guard < 100 * len(genuine):
        i, j = rng.integers(0, n, size=2)
        if i != j and labels[i] != labels[j]:
            impostor.append((int(i), int(j)))
        guard += 1
    pairs = [(i, j, 1) for i, j in genuine] + [(i, j, 0) for i, j in impostor]
    dz = np.zeros_like(z)
    total = 0.0
    for i, j, y in pairs:
        loss, g1, g2 = contrastive_loss(z[i], z[j], y, margin)
        total += loss
        dz[i] += g1 / len(pairs)
        dz[j] += g2 / len(pairs)
    return total / len(pairs), dz


def _triplet_batch(z, labels, alpha, mining, seed):
    try:
        triplets = mine_triplets(z, labels, mining, alpha, seed)
    except MiningError:
        return None
    dz = np.zeros_like(z)
    total = 0.0
    for a, p, ng in triplets:
        loss, ga, gp, gn = triplet_loss(z[a], z[p], z[ng], alpha)
        total += loss
        dz[a] += ga / len(triplets)
        dz[p] += gp / len(triplets)
        dz[ng] += gn / len(triplets)
    return total / len(triplets), dz


def train(
    config: TrainConfig,
    train_table: ExamTable,
    val_table: ExamTable,
    norm: NormStats,
) -> TrainResult:
    """Seeded SGD; returns the parameters at the best validation Rank@1.
    Single-threaded numpy reductions keep the run bit-reproducible."""
    if len(train_table) == 0:
        raise ConfigError("empty train table")
    rng = np.random.default_rng(config.seed)
    params = init_mlp(config.seed)
    features = normalize(train_table.feature_matrix(), norm)
    pids = train_table.patient_ids()

    head = None
    class_ids: list[str] = []
    class_codes = None
    if config.loss == "arcface":
        class_ids = sorted(set(pids))
        lookup = {p: i for i, p in enumerate(class_ids)}
        class_codes = np.array([lookup[p] for p in pids], dtype=int)
        head = init_arcface_head(
            len(class_ids), params.embedding_dim, config.seed,
            scale=config.scale, margin=config.arc_margin,
        )

    log: list[EpochLog] = []
    best = (float("-inf"), params.copy(), None if head is None else ArcFaceHead(head.W.copy(), head.scale, head.margin))
    n = len(train_table)

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if idx.size < 2:
                continue
            x = features[idx]
            z, cache = mlp_forward(params, x, mode="train", dropout_rng=rng)
            if config.loss == "arcface":
                loss, dz, dw = arcface_batch_loss(z, class_codes[idx], head)
            else:
                batch_labels = [pids[i] for i in idx]
                if config.loss == "contrastive":
                    res = _contrastive_batch(z, batch_labels, config.margin, rng)
                else:
                    res = _triplet_batch(
                        z, batch_labels, config.alpha, config.mining,
                        int(rng.integers(0, 2**31)),
                    )
                if res is None:
                    continue
                loss, dz = res
                dw = None
            if not np.isfinite(loss):
                raise TrainingFault(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}"
                )
            grads = mlp_backward(params, cache, dz)
            _sgd_step(params, grads, config.learning_rate)
            if dw is not None:
                head.W -= config.learning_rate * dw
            losses.append(loss)

        rank1 = _val_rank1(params, val_table, norm, config.seed)
        log.append(
            EpochLog(epoch, float(np.mean(losses)) if losses else float("nan"),
                     rank1, time.perf_counter() - t0)
        )
        score = rank1 if np.isfinite(rank1) else float("-inf")
        if score > best[0]:
            best = (
                score,
                params.copy(),
                None if head is None else ArcFaceHead(head.W.copy(), head.scale, head.margin),
            )

    if config.epochs == 0 or best[0] == float("-inf"):
        return TrainResult(params, head, log, class_ids)
    return TrainResult(best[1], best[2], log, class_ids)


def embed_table(
    params: MlpParams, table: ExamTable, norm: NormStats, batch: int = 256
) -> EmbeddingSet:
    """Eval-mode embeddings, one unit-norm vector per exam; the classifier
    head is never consulted."""
    if len(table) == 0:
        return EmbeddingSet(np.empty((0, params.embedding_dim)), [], [], [])
    features = normalize(table.feature_matrix(), norm)
    chunks = [
        mlp_forward(params, features[i : i + batch], mode="eval")[0]
        for i in range(0, features.shape[0], batch)
    ]
    return EmbeddingSet(
        np.concatenate(chunks, axis=0),
        table.patient_ids(),
        [r.exam_id for r in table.records],
        [r.acquired_at for r in table.records],
    )


# --- checkpoint I/O ----------------------------------------------------------

def save_checkpoint(
    path,
    params: MlpParams,
    norm: NormStats,
    config: TrainConfig,
    head: ArcFaceHead | None = None,
    classes: list[str] | None = None,
) -> None:
    """Self-describing checkpoint: json header plus raw float64 blocks,
    written in a fixed order so identical runs give identical bytes."""
    arrays: dict[str, np.ndarray] = {}
    for i in range(params.n_hidden()):
        arrays[f"W{i}"] = params.Ws[i]
        arrays[f"b{i}"] = params.bs[i]
        arrays[f"gamma{i}"] = params.gammas[i]
        arrays[f"beta{i}"] = params.betas[i]
        arrays[f"rmean{i}"] = params.run_mean[i]
        arrays[f"rvar{i}"] = params.run_var[i]
    arrays["Wp"] = params.Wp
    arrays["bp"] = params.bp
    if norm.mode == "train_global":
        arrays["norm_mean"] = norm.mean
        arrays["norm_std"] = norm.std
    if head is not None:
        arrays["head_W"] = head.W

    meta = {
        "version": 1,
        "widths": list(params.widths),
        "embedding_dim": params.embedding_dim,
        "dropout": params.dropout,
        "norm_mode": norm.mode,
        "config": asdict(config),
        "classes": classes or [],
        "arrays": {k: list(v.shape) for k, v in arrays.items()},
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write((json.dumps(meta, sort_keys=True) + "\n").encode())
        for name in sorted(meta["arrays"]):
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (params, norm, config, head, classes)."""
    with open(path, "rb") as fh:
        if fh.readline() != CHECKPOINT_MAGIC:
            raise VerideError(f"{path}: not a veride checkpoint")
        meta = json.loads(fh.readline().decode())
        arrays: dict[str, np.ndarray] = {}
        for name in sorted(meta["arrays"]):
            shape = meta["arrays"][name]
            count = int(np.prod(shape)) if shape else 1
            buf = np.frombuffer(fh.read(count * 8), dtype="<f8")
            arrays[name] = buf.reshape(shape).copy()

    widths = tuple(meta["widths"])
    n_hidden = len(widths) - 1
    params = MlpParams(
        widths=widths,
        embedding_dim=meta["embedding_dim"],
        dropout=meta["dropout"],
        Ws=[arrays[f"W{i}"] for i in range(n_hidden)],
        bs=[arrays[f"b{i}"] for i in range(n_hidden)],
        gammas=[arrays[f"gamma{i}"] for i in range(n_hidden)],
        betas=[arrays[f"beta{i}"] for i in range(n_hidden)],
        run_mean=[arrays[f"rmean{i}"] for i in range(n_hidden)],
        run_var=[arrays[f"rvar{i}"] for i in range(n_hidden)],
        Wp=arrays["Wp"],
        bp=arrays["bp"],
    )
    norm = NormStats(
        mode=meta["norm_mode"],
        mean=arrays.get("norm_mean"),
        std=arrays.get("norm_std"),
    )
    config = TrainConfig(**meta["config"])
    head = None
    if "head_W" in arrays:
        head = ArcFaceHead(arrays["head_W"], config.scale, config.arc_margin)
    return params, norm, config, head, meta["classes"]
