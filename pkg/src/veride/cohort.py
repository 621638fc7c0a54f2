"""Exam-table ingestion, cohort refinement, splits, and INTRA/INTER pairs."""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyTableError, SchemaError, VerideError
from .features import DAYS_PER_MONTH, FEATURE_NAMES, N_FEATURES, RangeTable

REQUIRED_COLUMNS = ("PatientID", "ExamID", "AcquisitionDate") + FEATURE_NAMES
OPTIONAL_COLUMNS = ("Gender", "PatientAge")


@dataclass(frozen=True)
class ExamRecord:
    """One ECG exam: identifiers, acquisition date, 13 fiducial features."""

    patient_id: str
    exam_id: str
    acquired_at: dt.date
    features: np.ndarray  # shape (13,), order FEATURE_NAMES
    gender: str | None = None
    age: float | None = None
    extra: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.features.shape != (N_FEATURES,):
            raise VerideError(
                f"exam {self.exam_id}: expected {N_FEATURES} features, "
                f"got shape {self.features.shape}"
            )


@dataclass
class ExamTable:
    """Immutable-by-convention collection of exam records."""

    records: list[ExamRecord]

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def feature_matrix(self) -> np.ndarray:
        return np.stack([r.features for r in self.records]) if self.records else np.empty((0, N_FEATURES))

    def patient_ids(self) -> list[str]:
        return [r.patient_id for r in self.records]

    def by_patient(self) -> dict[str, list[ExamRecord]]:
        """Exams grouped by patient, chronologically sorted (ties by exam id)."""
        groups: dict[str, list[ExamRecord]] = {}
        for r in self.records:
            groups.setdefault(r.patient_id, []).append(r)
        for pid in groups:
            groups[pid].sort(key=lambda r: (r.acquired_at, r.exam_id))
        return groups

    def n_patients(self) -> int:
        return len(set(self.patient_ids()))

    def subset(self, exam_ids: set[str]) -> "ExamTable":
        return ExamTable([r for r in self.records if r.exam_id in exam_ids])


@dataclass
class LoadResult:
    table: ExamTable
    rejected: list[tuple[int, str]]  # (0-based data row index, reason)


@dataclass
class SplitManifest:
    """Patient-disjoint assignment of patients to train/val/test."""

    assignment: dict[str, str]  # patient_id -> {"train","val","test"}
    fractions: tuple[float, float, float]
    min_train_exams: int
    seed: int

    def patients(self, split: str) -> list[str]:
        return sorted(p for p, s in self.assignment.items() if s == split)

    def select(self, table: ExamTable, split: str) -> ExamTable:
        return ExamTable([r for r in table.records if self.assignment.get(r.patient_id) == split])


@dataclass
class PairSet:
    """Exam pairs labelled intra (same patient) or inter (cross patient)."""

    pairs: list[tuple[str, str, str]]  # (exam_id_a, exam_id_b, "intra"|"inter")
    seed: int | None
    window_months: tuple[float, float] | None

    def __len__(self) -> int:
        return len(self.pairs)

    def labels(self) -> list[str]:
        return [lbl for _, _, lbl in self.pairs]


def _detect_delimiter(header_line: str) -> str:
    return "\t" if "\t" in header_line else ","


def load_exams(path, schema: dict[str, str] | None = None) -> LoadResult:
    """Parse a delimited exam table.

    `schema` optionally remaps file column names to canonical ones
    (file_name -> canonical_name). Rows with an unparseable patient id,
    exam id, date, or feature are rejected individually; structural
    problems raise.
    """
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.strip():
            raise EmptyTableError(f"{path}: empty file")
        delim = _detect_delimiter(first)
        fh.seek(0)
        reader = csv.DictReader(fh, delimiter=delim)
        columns = reader.fieldnames or []
        if schema:
            columns = [schema.get(c, c) for c in columns]
            reader.fieldnames = columns
        for col in REQUIRED_COLUMNS:
            if col not in columns:
                raise SchemaError(f"{path}: missing required column {col!r}")
        extra_cols = [c for c in columns if c not in REQUIRED_COLUMNS and c not in OPTIONAL_COLUMNS]

        records: list[ExamRecord] = []
        rejected: list[tuple[int, str]] = []
        for idx, row in enumerate(reader):
            pid = (row.get("PatientID") or "").strip()
            eid = (row.get("ExamID") or "").strip()
            if not pid or not eid:
                rejected.append((idx, "missing patient/exam id"))
                continue
            try:
                date = dt.date.fromisoformat((row.get("AcquisitionDate") or "").strip())
            except ValueError:
                rejected.append((idx, f"bad date {row.get('AcquisitionDate')!r}"))
                continue
            try:
                feats = np.array([float(row[f]) for f in FEATURE_NAMES], dtype=float)
            except (TypeError, ValueError):
                bad = next(
                    (f for f in FEATURE_NAMES if not _is_number(row.get(f))), "?"
                )
                rejected.append((idx, f"non-numeric feature {bad}"))
                continue
            gender = (row.get("Gender") or "").strip() or None
            age_raw = (row.get("PatientAge") or "").strip()
            age = float(age_raw) if _is_number(age_raw) else None
            extra = {c: (row.get(c) or "").strip() for c in extra_cols}
            records.append(ExamRecord(pid, eid, date, feats, gender, age, extra))

    if not records and not rejected:
        raise EmptyTableError(f"{path}: no data rows")
    return LoadResult(ExamTable(records), rejected)


def _is_number(s) -> bool:
    if s is None:
        return False
    try:
        float(s)
        return True
    except (TypeError, ValueError):
        return False


def write_exams(table: ExamTable, path, delimiter: str = ",") -> None:
    """Emit a table in the same format `load_exams` ingests."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        header = ["PatientID", "ExamID", "AcquisitionDate", "Gender", "PatientAge"]
        extra_cols = sorted({k for r in table.records for k in r.extra})
        w.writerow(header + list(FEATURE_NAMES) + extra_cols)
        for r in table.records:
            row = [
                r.patient_id,
                r.exam_id,
                r.acquired_at.isoformat(),
                r.gender or "",
                "" if r.age is None else f"{r.age:g}",
            ]
            row += [repr(float(v)) for v in r.features]
            row += [r.extra.get(c, "") for c in extra_cols]
            w.writerow(row)


def apply_range_filter(table: ExamTable, ranges: RangeTable) -> ExamTable:
    """Keep records with every feature inside its inclusive [min, max]."""
    lows, highs = ranges.lows(), ranges.highs()
    kept = [
        r
        for r in table.records
        if np.all(r.features >= lows) and np.all(r.features <= highs)
    ]
    return ExamTable(kept)


def refine_multi_exam(table: ExamTable, min_exams: int, min_gap_days: int) -> ExamTable:
    """Greedy earliest-first selection of exams strictly more than
    `min_gap_days` apart; patients keeping fewer than `min_exams` are dropped.
    """
    kept: list[ExamRecord] = []
    groups = table.by_patient()
    for pid in sorted(groups):
        exams = groups[pid]
        chosen = [exams[0]]
        for r in exams[1:]:
            if (r.acquired_at - chosen[-1].acquired_at).days > min_gap_days:
                chosen.append(r)
        if len(chosen) >= min_exams:
            kept.extend(chosen)
    return ExamTable(kept)


def cap_exams_per_patient(table: ExamTable, cap: int, seed: int) -> ExamTable:
    """Reduce patients with more than `cap` exams via seeded uniform
    sampling without replacement; deterministic for a fixed seed."""
    if cap < 1:
        raise ConfigError("cap must be >= 1")
    rng = np.random.default_rng(seed)
    kept_ids: set[str] = set()
    groups = table.by_patient()
    for pid in sorted(groups):
        exams = groups[pid]
        if len(exams) <= cap:
            kept_ids.update(r.exam_id for r in exams)
        else:
            picked = rng.choice(len(exams), size=cap, replace=False)
            kept_ids.update(exams[i].exam_id for i in sorted(picked))
    return ExamTable([r for r in table.records if r.exam_id in kept_ids])


def filter_categorical(table: ExamTable, column: str, allowed: set[str]) -> ExamTable:
    """Generic categorical filter (e.g. device homogenization)."""
    def value(r: ExamRecord) -> str | None:
        if column == "Gender":
            return r.gender
        return r.extra.get(column)

    return ExamTable([r for r in table.records if value(r) in allowed])


def split_by_patient(
    table: ExamTable,
    fractions: tuple[float, float, float],
    min_train_exams: int,
    seed: int,
) -> SplitManifest:
    """Seeded patient-level partition into train/val/test.

    Rounding rule: train gets floor(n*f_train + .5) patients off the shuffled
    list, val the next floor(n*(f_train+f_val) + .5) - n_train, test the rest.
    Train patients with fewer than `min_train_exams` exams are reassigned to
    val/test alternately.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {fractions}")
    groups = table.by_patient()
    patients = sorted(groups)
    if not patients:
        raise EmptyTableError("no patients to split")
    rng = np.random.default_rng(seed)
    order = list(np.array(patients)[rng.permutation(len(patients))])
    n = len(order)
    n_train = int(np.floor(n * fractions[0] + 0.5))
    n_val = int(np.floor(n * (fractions[0] + fractions[1]) + 0.5)) - n_train
    assignment = {}
    for i, pid in enumerate(order):
        assignment[pid] = "train" if i < n_train else ("val" if i < n_train + n_val else "test")

    flip = 0
    for pid in sorted(p for p in assignment if assignment[p] == "train"):
        if len(groups[pid]) < min_train_exams:
            assignment[pid] = "val" if flip == 0 else "test"
            flip ^= 1

    counts = {s: sum(1 for v in assignment.values() if v == s) for s in ("train", "val", "test")}
    for s, c in counts.items():
        if c == 0:
            raise ConfigError(f"split {s!r} is empty (fractions {fractions}, "
                              f"min_train_exams {min_train_exams})")
    return SplitManifest(assignment, tuple(fractions), min_train_exams, seed)


def build_intra_pairs(table: ExamTable, window_months: tuple[float, float]) -> PairSet:
    """One intra pair per patient: the earliest exam pair whose date distance
    falls inside [low, high] months (month = 30.4375 days). Patients with no
    qualifying pair are skipped."""
    low, high = window_months
    pairs: list[tuple[str, str, str]] = []
    groups = table.by_patient()
    for pid in sorted(groups):
        exams = groups[pid]
        found = None
        for i in range(len(exams)):
            for j in range(i + 1, len(exams)):
                gap = (exams[j].acquired_at - exams[i].acquired_at).days / DAYS_PER_MONTH
                if low <= gap <= high:
                    found = (exams[i].exam_id, exams[j].exam_id, "intra")
                    break
            if found:
                break
        if found:
            pairs.append(found)
    return PairSet(pairs, seed=None, window_months=(low, high))


def build_inter_pairs(intra: PairSet, table: ExamTable, seed: int) -> PairSet:
    """Exactly |intra| cross-patient pairs drawn by seeded sampling from the
    full exam pool."""
    if len(intra) < 1:
        raise ConfigError("intra pair set is empty")
    if table.n_patients() < 2:
        raise ConfigError("need at least 2 patients for inter pairs")
    rng = np.random.default_rng(seed)
    exams = sorted(table.records, key=lambda r: r.exam_id)
    pairs: list[tuple[str, str, str]] = []
    while len(pairs) < len(intra):
        i, j = rng.integers(0, len(exams), size=2)
        a, b = exams[int(i)], exams[int(j)]
        if a.patient_id != b.patient_id:
            pairs.append((a.exam_id, b.exam_id, "inter"))
    return PairSet(pairs, seed=seed, window_months=None)


# --- structured-text serialization ------------------------------------------

def write_manifest(manifest: SplitManifest, path) -> None:
    with open(path, "w") as fh:
        fh.write("# veride split-manifest v1\n")
        fh.write(f"# fractions={manifest.fractions[0]:g},{manifest.fractions[1]:g},{manifest.fractions[2]:g}\n")
        fh.write(f"# min_train_exams={manifest.min_train_exams}\n")
        fh.write(f"# seed={manifest.seed}\n")
        for pid in sorted(manifest.assignment):
            fh.write(f"{pid}\t{manifest.assignment[pid]}\n")


def read_manifest(path) -> SplitManifest:
    header: dict[str, str] = {}
    assignment: dict[str, str] = {}
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                if "=" in line:
                    k, v = line[1:].strip().split("=", 1)
                    header[k] = v
                continue
            if line:
                pid, split = line.split("\t")
                assignment[pid] = split
    fracs = tuple(float(x) for x in header["fractions"].split(","))
    return SplitManifest(assignment, fracs, int(header["min_train_exams"]), int(header["seed"]))


def write_pairs(pairs: PairSet, path) -> None:
    with open(path, "w") as fh:
        fh.write("# veride pair-set v1\n")
        fh.write(f"# seed={'' if pairs.seed is None else pairs.seed}\n")
        if pairs.window_months is not None:
            fh.write(f"# window_months={pairs.window_months[0]:g},{pairs.window_months[1]:g}\n")
        for a, b, lbl in pairs.pairs:
            fh.write(f"{a}\t{b}\t{lbl}\n")


def read_pairs(path) -> PairSet:
    header: dict[str, str] = {}
    pairs: list[tuple[str, str, str]] = []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                if "=" in line:
                    k, v = line[1:].strip().split("=", 1)
                    header[k] = v
                continue
            if line:
                a, b, lbl = line.split("\t")
                pairs.append((a, b, lbl))
    seed = int(header["seed"]) if header.get("seed") else None
    window = None
    if "window_months" in header:
        lo, hi = header["window_months"].split(",")
        window = (float(lo), float(hi))
    return PairSet(pairs, seed, window)
