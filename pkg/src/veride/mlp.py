"""Embedding backbone: MLP with batch norm, ReLU, dropout, and a final
L2-normalized linear projection. Forward and backward passes are written
out explicitly so every gradient can be checked against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NormalizationError, NumericFault
from .features import FEATURE_NAMES, N_FEATURES

DEFAULT_WIDTHS = (N_FEATURES, 32, 64, 256)
DEFAULT_EMBEDDING_DIM = 128
DEFAULT_DROPOUT = 0.10
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# --- feature normalization ---------------------------------------------------

@dataclass
class NormStats:
    """Feature normalization: global train statistics or per-row scaling."""

    mode: str  # "per_sample" | "train_global"
    mean: np.ndarray | None = None
    std: np.ndarray | None = None


def fit_norm_stats(feature_matrix: np.ndarray, mode: str) -> NormStats:
    if mode == "per_sample":
        return NormStats(mode="per_sample")
    if mode != "train_global":
        raise ConfigError(f"unknown normalization mode {mode!r}")
    x = np.asarray(feature_matrix, dtype=float)
    if x.size == 0:
        raise NormalizationError("cannot fit normalization on an empty table")
    mean = x.mean(axis=0)
    std = x.std(axis=0, ddof=1) if x.shape[0] > 1 else np.zeros(x.shape[1])
    zero = np.flatnonzero(std <= 0)
    if zero.size:
        names = [FEATURE_NAMES[i] if i < N_FEATURES else str(i) for i in zero]
        raise NormalizationError(f"zero train variance for feature(s): {names}")
    return NormStats(mode="train_global", mean=mean, std=std)


def normalize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    """Normalize a feature vector or a (n, d) matrix of rows."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    rows = x[None, :] if single else x
    if stats.mode == "train_global":
        out = (rows - stats.mean) / stats.std
    else:
        mu = rows.mean(axis=1, keepdims=True)
        sd = rows.std(axis=1, ddof=1, keepdims=True)
        if np.any(sd <= 0):
            raise NormalizationError("per_sample normalization on a constant row")
        out = (rows - mu) / sd
    return out[0] if single else out


# --- parameters --------------------------------------------------------------

@dataclass
class MlpParams:
    widths: tuple[int, ...]
    embedding_dim: int
    dropout: float
    Ws: list[np.ndarray]          # hidden affine weights, (out, in)
    bs: list[np.ndarray]
    gammas: list[np.ndarray]      # batch-norm scale
    betas: list[np.ndarray]       # batch-norm shift
    run_mean: list[np.ndarray] = field(repr=False, default_factory=list)
    run_var: list[np.ndarray] = field(repr=False, default_factory=list)
    Wp: np.ndarray = None         # projection
    bp: np.ndarray = None

    def n_hidden(self) -> int:
        return len(self.Ws)

    def trainable(self) -> dict[str, np.ndarray]:
        """Name -> array view of every trainable tensor (fixed order)."""
        out: dict[str, np.ndarray] = {}
        for i in range(self.n_hidden()):
            out[f"W{i}"] = self.Ws[i]
            out[f"b{i}"] = self.bs[i]
            out[f"gamma{i}"] = self.gammas[i]
            out[f"beta{i}"] = self.betas[i]
        out["Wp"] = self.Wp
        out["bp"] = self.bp
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(
            widths=self.widths,
            embedding_dim=self.embedding_dim,
            dropout=self.dropout,
            Ws=[w.copy() for w in self.Ws],
            bs=[b.copy() for b in self.bs],
            gammas=[g.copy() for g in self.gammas],
            betas=[b.copy() for b in self.betas],
            run_mean=[m.copy() for m in self.run_mean],
            run_var=[v.copy() for v in self.run_var],
            Wp=self.Wp.copy(),
            bp=self.bp.copy(),
        )


def init_mlp(
    seed: int,
    widths: tuple[int, ...] = DEFAULT_WIDTHS,
    embedding_dim: int = DEFAULT_EMBEDDING_DIM,
    dropout: float = DEFAULT_DROPOUT,
) -> MlpParams:
    """Fan-in-scaled uniform init; batch-norm scale 1, shift 0."""
    rng = np.random.default_rng(seed)
    Ws, bs, gammas, betas, rmean, rvar = [], [], [], [], [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        Ws.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        bs.append(rng.uniform(-bound, bound, size=fan_out))
        gammas.append(np.ones(fan_out))
        betas.append(np.zeros(fan_out))
        rmean.append(np.zeros(fan_out))
        rvar.append(np.ones(fan_out))
    bound = 1.0 / np.sqrt(widths[-1])
    Wp = rng.uniform(-bound, bound, size=(embedding_dim, widths[-1]))
    bp = rng.uniform(-bound, bound, size=embedding_dim)
    return MlpParams(tuple(widths), embedding_dim, dropout, Ws, bs, gammas, betas,
                     rmean, rvar, Wp, bp)


# --- forward / backward ------------------------------------------------------

def mlp_forward(
    params: MlpParams,
    x: np.ndarray,
    mode: str = "eval",
    dropout_rng: np.random.Generator | None = None,
    dropout_mask: np.ndarray | None = None,
    update_running: bool = True,
):
    """Run the backbone on a (B, in) batch; returns (embeddings, cache).

    Train mode uses batch statistics (B >= 2 required) and applies inverted
    dropout after the hidden stack; eval mode uses running statistics and no
    dropout. The cache holds everything `mlp_backward` needs, including the
    dropout mask, so a repeated forward with the same mask is reproducible.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"unknown mode {mode!r}")
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != params.widths[0]:
        raise ConfigError(f"expected batch of shape (B, {params.widths[0]})")
    train = mode == "train"
    if train and x.shape[0] < 2:
        raise ConfigError("train mode needs batch size >= 2 for batch statistics")

    cache = {"x": x, "mode": mode, "layers": []}
    h = x
    for i in range(params.n_hidden()):
        a = h @ params.Ws[i].T + params.bs[i]
        if train:
            mu = a.mean(axis=0)
            var = a.var(axis=0)  # biased, matches the backward pass
            if update_running:
                params.run_mean[i] *= 1 - BN_MOMENTUM
                params.run_mean[i] += BN_MOMENTUM * mu
                params.run_var[i] *= 1 - BN_MOMENTUM
                params.run_var[i] += BN_MOMENTUM * var
        else:
            mu, var = params.run_mean[i], params.run_var[i]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (a - mu) * inv_std
        bn = params.gammas[i] * xhat + params.betas[i]
        relu = np.maximum(bn, 0.0)
        if not np.all(np.isfinite(relu)):
            raise NumericFault(f"non-finite activation at hidden layer {i}")
        cache["layers"].append(
            {"h_in": h, "a": a, "xhat": xhat, "inv_std": inv_std, "bn": bn}
        )
        h = relu

    if train and params.dropout > 0.0:
        if dropout_mask is None:
            if dropout_rng is None:
                raise ConfigError("train-mode dropout needs a generator or mask")
            dropout_mask = (dropout_rng.random(h.shape) >= params.dropout) / (
                1.0 - params.dropout
            )
        h = h * dropout_mask
    else:
        dropout_mask = None
    cache["dropout_mask"] = dropout_mask
    cache["h_drop"] = h

    raw = h @ params.Wp.T + params.bp
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    if not np.all(np.isfinite(raw)) or np.any(norms == 0.0):
        raise NumericFault("non-finite or zero-norm projection output")
    z = raw / norms
    cache["raw"] = raw
    cache["norms"] = norms
    cache["z"] = z
    return z, cache


@dataclass
class MlpGrads:
    dWs: list[np.ndarray]
    dbs: list[np.ndarray]
    dgammas: list[np.ndarray]
    dbetas: list[np.ndarray]
    dWp: np.ndarray
    dbp: np.ndarray
    dx: np.ndarray

    def trainable(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i in range(len(self.dWs)):
            out[f"W{i}"] = self.dWs[i]
            out[f"b{i}"] = self.dbs[i]
            out[f"gamma{i}"] = self.dgammas[i]
            out[f"beta{i}"] = self.dbetas[i]
        out["Wp"] = self.dWp
        out["bp"] = self.dbp
        return out


def mlp_backward(params: MlpParams, cache: dict, dz: np.ndarray) -> MlpGrads:
    """Backpropagate dL/dz through normalization, projection, dropout,
    and the hidden stack (batch-statistics path included in train mode)."""
    z, norms, raw = cache["z"], cache["norms"], cache["raw"]
    train = cache["mode"] == "train"

    # z = raw / ||raw||
    draw = (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / norms

    dWp = draw.T @ cache["h_drop"]
    dbp = draw.sum(axis=0)
    dh = draw @ params.Wp

    if cache["dropout_mask"] is not None:
        dh = dh * cache["dropout_mask"]

    dWs, dbs, dgammas, dbetas = [], [], [], []
    for i in reversed(range(params.n_hidden())):
        lc = cache["layers"][i]
        drelu = dh * (lc["bn"] > 0.0)
        dgamma = np.sum(drelu * lc["xhat"], axis=0)
        dbeta = drelu.sum(axis=0)
        dxhat = drelu * params.gammas[i]
        if train:
            bsz = lc["a"].shape[0]
            da = (
                lc["inv_std"]
                / bsz
                * (
                    bsz * dxhat
                    - dxhat.sum(axis=0)
                    - lc["xhat"] * np.sum(dxhat * lc["xhat"], axis=0)
                )
            )
        else:
            da = dxhat * lc["inv_std"]
        dWs.append(da.T @ lc["h_in"])
        dbs.append(da.sum(axis=0))
        dgammas.append(dgamma)
        dbetas.append(dbeta)
        dh = da @ params.Ws[i]

    return MlpGrads(dWs[::-1], dbs[::-1], dgammas[::-1], dbetas[::-1], dWp, dbp, dh)
