"""Unit-norm embedding sets with aligned labels, plus their on-disk format
(text header + label block + raw 32-bit float rows)."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field

import numpy as np

from .errors import VerideError

_MAGIC = b"VERIDE-EMB v1\n"


@dataclass
class EmbeddingSet:
    vectors: np.ndarray              # (n, d)
    patient_ids: list[str]
    exam_ids: list[str]
    dates: list[dt.date | None] = field(default_factory=list)

    def __post_init__(self):
        n = self.vectors.shape[0]
        if len(self.patient_ids) != n or len(self.exam_ids) != n:
            raise VerideError("labels not aligned with embedding matrix")
        if not self.dates:
            self.dates = [None] * n

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def subset(self, idx) -> "EmbeddingSet":
        idx = np.asarray(idx, dtype=int)
        return EmbeddingSet(
            self.vectors[idx],
            [self.patient_ids[i] for i in idx],
            [self.exam_ids[i] for i in idx],
            [self.dates[i] for i in idx],
        )

    def patient_codes(self) -> np.ndarray:
        """Integer identity codes aligned with rows (stable across orderings
        of the same id set: codes follow sorted patient id order)."""
        uniq = sorted(set(self.patient_ids))
        lookup = {p: i for i, p in enumerate(uniq)}
        return np.array([lookup[p] for p in self.patient_ids], dtype=np.int64)


def save_embeddings(es: EmbeddingSet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(f"count={len(es)} dim={es.dim} labels=patient_id,exam_id,date\n".encode())
        for pid, eid, date in zip(es.patient_ids, es.exam_ids, es.dates):
            ds = date.isoformat() if date is not None else ""
            fh.write(f"{pid}\t{eid}\t{ds}\n".encode())
        fh.write(np.ascontiguousarray(es.vectors, dtype="<f4").tobytes())


def load_embeddings(path) -> EmbeddingSet:
    with open(path, "rb") as fh:
        if fh.readline() != _MAGIC:
            raise VerideError(f"{path}: not a veride embedding file")
        header = dict(kv.split("=", 1) for kv in fh.readline().decode().split())
        count, dim = int(header["count"]), int(header["dim"])
        pids, eids, dates = [], [], []
        for _ in range(count):
            pid, eid, ds = fh.readline().decode().rstrip("\n").split("\t")
            pids.append(pid)
            eids.append(eid)
            dates.append(dt.date.fromisoformat(ds) if ds else None)
        data = np.frombuffer(fh.read(count * dim * 4), dtype="<f4")
        vectors = data.reshape(count, dim).astype(float)
    return EmbeddingSet(vectors, pids, eids, dates)
