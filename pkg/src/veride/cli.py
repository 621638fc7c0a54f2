"""Pipeline orchestration: subcommands over an INI config file.

Subcommands compose through files only. Every report embeds the resolved
config hash and seed so a run can be reproduced bit for bit.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import os
import sys
from pathlib import Path

import numpy as np

from . import cohort, plotting, synthgen
from .embeddings import load_embeddings, save_embeddings
from .errors import (
    ConfigError,
    EmptyTableError,
    PipelineError,
    SchemaError,
    VerideError,
)
from .identify import GallerySpec, identification_report
from .mlp import fit_norm_stats
from .openset import ProtocolSizes, build_protocol, dir_at_far, make_strategy
from .stats import pearson, spearman, two_sample_report
from .training import TrainConfig, embed_table, load_checkpoint, save_checkpoint, train
from .verify import accumulate_all_pairs, verification_report

PATH_KEYS = {"input", "out", "outdir", "checkpoint", "embeddings", "cohort", "manifest",
             "intra_pairs", "inter_pairs"}


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.12g}"
    return str(v)


class Run:
    """Resolved config section plus report plumbing."""

    def __init__(self, section: str, cfg: dict[str, str], deterministic: bool):
        self.section = section
        self.cfg = cfg
        self.deterministic = deterministic
        blob = "\n".join(f"{k}={cfg[k]}" for k in sorted(cfg))
        self.config_hash = hashlib.sha256(blob.encode()).hexdigest()

    def get(self, key, default=None, cast=str):
        if key not in self.cfg or self.cfg[key] == "":
            if default is None and cast is not bool:
                return None
            return default
        raw = self.cfg[key]
        if cast is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return cast(raw)

    def require(self, key, cast=str):
        if key not in self.cfg or self.cfg[key] == "":
            raise ConfigError(f"[{self.section}] missing required key {key!r}")
        return cast(self.cfg[key])

    def floats(self, key, default: str) -> list[float]:
        raw = self.cfg.get(key, default)
        return [float(x) for x in raw.split(",") if x.strip()]

    def header(self, extra: dict | None = None) -> dict:
        h = {"config_sha256": self.config_hash,
             "deterministic": int(self.deterministic)}
        if "seed" in self.cfg:
            h["seed"] = self.cfg["seed"]
        if extra:
            h.update(extra)
        return h

    def write_report(self, path, kind: str, rows, extra_header: dict | None = None):
        with open(path, "w") as fh:
            fh.write(f"# veride {kind} v1\n")
            hdr = self.header(extra_header)
            for k in sorted(hdr):
                fh.write(f"# {k}={hdr[k]}\n")
            for name, val in rows:
                fh.write(f"{name}\t{_fmt(val)}\n")

    def figures_enabled(self) -> bool:
        return self.get("figures", default=True, cast=bool)


def load_config(path, section: str, overrides: list[str]) -> dict[str, str]:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    if not parser.has_section(section):
        raise ConfigError(f"config has no [{section}] section")
    cfg = dict(parser.items(section))
    for ov in overrides:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value: {ov!r}")
        target, value = ov.split("=", 1)
        sec, key = target.split(".", 1)
        if sec == section:
            cfg[key] = value
    for key in list(cfg):
        if key in PATH_KEYS:
            env = os.environ.get(f"VERIDE_{section.upper()}_{key.upper()}")
            if env:
                cfg[key] = env
    return cfg


def _load_table(run: Run, key: str = "input") -> cohort.ExamTable:
    path = run.require(key)
    if not Path(path).exists():
        raise ConfigError(f"[{run.section}] {key} path does not exist: {path}")
    return cohort.load_exams(path).table


# --- subcommands -------------------------------------------------------------

def cmd_synth(run: Run) -> None:
    params = synthgen.SynthParams(
        n_patients=run.require("n_patients", int),
        exams_per_patient=(run.get("exams_min", 2, int), run.get("exams_max", 4, int)),
        latent_dim=run.get("latent_dim", 8, int),
        within_noise=run.get("within_noise", 0.1, float),
        between_spread=run.get("between_spread", 1.0, float),
        drift_per_month=run.get("drift_per_month", 0.0, float),
        seed=run.get("seed", 0, int),
    )
    out = run.require("out")
    result = synthgen.generate_cohort(params)
    cohort.write_exams(result.table, out)
    run.write_report(
        str(out) + ".meta", "synth-meta",
        [
            ("n_patients", result.table.n_patients()),
            ("n_exams", len(result.table)),
            ("clip_events", result.clip_events),
        ],
    )


def cmd_prepare(run: Run) -> None:
    table = _load_table(run)
    outdir = Path(run.require("outdir"))
    outdir.mkdir(parents=True, exist_ok=True)
    seed = run.get("seed", 0, int)

    steps: list[tuple[str, int, int]] = [("input", len(table), table.n_patients())]

    table = cohort.refine_multi_exam(
        table, run.get("min_exams", 2, int), run.get("min_gap_days", 30, int)
    )
    steps.append(("step1_multi_exam", len(table), table.n_patients()))
    if len(table) == 0:
        raise PipelineError("step1_multi_exam produced an empty table")

    table = cohort.apply_range_filter(table, _default_ranges())
    table = cohort.cap_exams_per_patient(table, run.get("cap", 10, int), seed)
    steps.append(("step2_range_and_cap", len(table), table.n_patients()))
    if len(table) == 0:
        raise PipelineError("step2_range_and_cap produced an empty table")

    device_column = run.get("device_column")
    if device_column:
        allowed = set((run.get("device_allowed", "") or "").split(","))
        table = cohort.filter_categorical(table, device_column, allowed)
        steps.append(("step3_categorical", len(table), table.n_patients()))
        if len(table) == 0:
            raise PipelineError("step3_categorical produced an empty table")

    fracs = run.floats("fractions", "0.5,0.25,0.25")
    manifest = cohort.split_by_patient(
        table, tuple(fracs), run.get("min_train_exams", 1, int), seed
    )
    window = run.floats("window_months", "6,18")
    intra = cohort.build_intra_pairs(table, (window[0], window[1]))
    rows: list[tuple[str, object]] = []
    for name, n_exams, n_patients in steps:
        rows.append((f"{name}.exams", n_exams))
        rows.append((f"{name}.patients", n_patients))
    if len(intra):
        inter = cohort.build_inter_pairs(intra, table, seed)
        cohort.write_pairs(intra, outdir / "intra_pairs.txt")
        cohort.write_pairs(inter, outdir / "inter_pairs.txt")
        rows.append(("intra_pairs", len(intra)))
        rows.append(("inter_pairs", len(inter)))
    else:
        rows.append(("intra_pairs", 0))
        rows.append(("warning", "no patient has an exam pair in the window"))

    cohort.write_exams(table, outdir / "refined.csv")
    cohort.write_manifest(manifest, outdir / "split.txt")
    for split in ("train", "val", "test"):
        rows.append((f"split.{split}.patients", len(manifest.patients(split))))
    run.write_report(outdir / "prepare_report.txt", "prepare-report", rows)


def _default_ranges():
    from .features import DEFAULT_RANGES

    return DEFAULT_RANGES


def cmd_stats(run: Run) -> None:
    out = run.require("out")
    rows: list[tuple[str, object]] = []
    fig_data = {}

    intra_path, inter_path = run.get("intra_pairs"), run.get("inter_pairs")
    if intra_path and inter_path:
        table = _load_table(run)
        feats = {r.exam_id: r.features for r in table}
        intra = cohort.read_pairs(intra_path)
        inter = cohort.read_pairs(inter_path)

        def corr_samples(pairs):
            pe = [pearson(feats[a], feats[b]) for a, b, _ in pairs.pairs]
            sp = [spearman(feats[a], feats[b]) for a, b, _ in pairs.pairs]
            return np.array(pe), np.array(sp)

        intra_pe, intra_sp = corr_samples(intra)
        inter_pe, inter_sp = corr_samples(inter)
        rows += [
            ("intra.pearson_mean", float(intra_pe.mean())),
            ("inter.pearson_mean", float(inter_pe.mean())),
            ("intra.spearman_mean", float(intra_sp.mean())),
            ("inter.spearman_mean", float(inter_sp.mean())),
        ]
        rep = two_sample_report(intra_pe, inter_pe)
        rows += [(f"pearson_sep.{k}", v) for k, v in rep.rows()]
        fig_data["corr"] = (intra_pe, inter_pe)

    emb_path = run.get("embeddings")
    if emb_path:
        es = load_embeddings(emb_path)
        codes = es.patient_codes()
        rng = np.random.default_rng(run.get("seed", 0, int))
        max_inter = run.get("max_inter", 200000, int)
        z = es.vectors
        n = len(es)
        gen_d, imp_pairs = [], []
        for i in range(n):
            same = np.flatnonzero((codes[i + 1 :] == codes[i])) + i + 1
            for j in same:
                gen_d.append(float(np.linalg.norm(z[i] - z[j])))
        total_imp = n * (n - 1) // 2 - len(gen_d)
        take = min(max_inter, total_imp)
        imp_d = []
        guard = 0
        while len(imp_d) < take and guard < 50 * take:
            i, j = rng.integers(0, n, size=2)
            if i < j and codes[i] != codes[j]:
                imp_d.append(float(np.linalg.norm(z[i] - z[j])))
            guard += 1
        gen_d, imp_d = np.array(gen_d), np.array(imp_d)
        if gen_d.size and imp_d.size:
            rep = two_sample_report(gen_d, imp_d)
            rows += [(f"distance_sep.{k}", v) for k, v in rep.rows()]
            rows += [
                ("distance_sep.n_intra", gen_d.size),
                ("distance_sep.n_inter", imp_d.size),
            ]

    if not rows:
        raise ConfigError("[stats] needs pair files and/or an embeddings file")
    run.write_report(out, "stats-report", rows)

    if run.figures_enabled() and "corr" in fig_data:
        import matplotlib.pyplot as plt

        intra_pe, inter_pe = fig_data["corr"]
        fig, ax = plt.subplots(figsize=(5, 4))
        bins = np.linspace(
            min(intra_pe.min(), inter_pe.min()), 1.0, 40
        )
        ax.hist(intra_pe, bins=bins, alpha=0.6, label="intra", density=True)
        ax.hist(inter_pe, bins=bins, alpha=0.6, label="inter", density=True)
        ax.set_xlabel("pairwise Pearson correlation")
        ax.set_ylabel("density")
        ax.legend()
        fig.tight_layout()
        fig.savefig(str(out) + ".png", dpi=120, metadata={"Date": None})
        plt.close(fig)


def _split_table(run: Run, table: cohort.ExamTable, split_key: str = "split"):
    manifest_path = run.get("manifest")
    split = run.get(split_key)
    if manifest_path is None:
        return table
    manifest = cohort.read_manifest(manifest_path)
    if split is None:
        return table
    return manifest.select(table, split)


def cmd_train(run: Run) -> None:
    table = _load_table(run)
    manifest = cohort.read_manifest(run.require("manifest"))
    train_table = manifest.select(table, "train")
    val_table = manifest.select(table, "val")
    if len(train_table) == 0:
        raise ConfigError("train split is empty")
    norm = fit_norm_stats(
        train_table.feature_matrix(), run.get("norm", "train_global")
    )
    config = TrainConfig(
        loss=run.get("loss", "arcface"),
        margin=run.get("margin", 1.0, float),
        alpha=run.get("alpha", 0.2, float),
        scale=run.get("scale", 30.0, float),
        arc_margin=run.get("arc_margin", 0.5, float),
        batch_size=run.get("batch_size", 128, int),
        learning_rate=run.get("learning_rate", 0.05, float),
        epochs=run.get("epochs", 30, int),
        mining=run.get("mining", "semi-hard"),
        seed=run.get("seed", 0, int),
    )
    result = train(config, train_table, val_table, norm)
    ckpt = run.require("checkpoint")
    save_checkpoint(ckpt, result.params, norm, config, result.head, result.classes)
    rows = []
    for e in result.log:
        rows.append((f"epoch{e.epoch}.loss", e.train_loss))
        rows.append((f"epoch{e.epoch}.val_rank1", e.val_rank1))
    run.write_report(str(ckpt) + ".log", "train-log", rows)
    if run.figures_enabled() and result.log:
        plotting.save_training_log(result.log, str(ckpt) + ".png")


def cmd_embed(run: Run) -> None:
    params, norm, _config, _head, _classes = load_checkpoint(run.require("checkpoint"))
    table = _split_table(run, _load_table(run))
    if len(table) == 0:
        raise ConfigError("no exams to embed after split selection")
    es = embed_table(params, table, norm)
    save_embeddings(es, run.require("out"))


def cmd_verify(run: Run) -> None:
    es = load_embeddings(run.require("embeddings"))
    bins = run.get("bins", 1 << 20, int)
    block = run.get("block", 2048, int)
    targets = tuple(run.floats("far_targets", "0.001,0.0001"))
    hist = accumulate_all_pairs(es, bins, block)
    report = verification_report(hist, targets)
    out = run.require("out")
    rows: list[tuple[str, object]] = [
        ("eer", report.eer),
        ("eer_threshold", report.eer_threshold),
    ]
    for t in report.tar_at_far:
        rows.append((f"tar@far{t.far_target:g}", t.tar))
        rows.append((f"tar@far{t.far_target:g}.threshold", t.threshold))
        if t.unreliable:
            rows.append((f"tar@far{t.far_target:g}.warning", "impostor count below 1/far"))
    rows += [("n_genuine", report.n_genuine), ("n_impostor", report.n_impostor),
             ("bins", report.bins)]
    run.write_report(out, "verify-report", rows)
    with open(str(out) + ".curve", "w") as fh:
        fh.write("threshold\tfar\ttar\tfrr\n")
        for c in report.curve:
            fh.write(f"{c.threshold:.9g}\t{c.far:.9g}\t{c.tar:.9g}\t{c.frr:.9g}\n")
    if run.figures_enabled():
        plotting.save_roc(report.curve, str(out) + ".roc.png")
        plotting.save_det(report.curve, str(out) + ".det.png")
        plotting.save_score_hist(hist, str(out) + ".scores.png")


def cmd_identify(run: Run) -> None:
    es = load_embeddings(run.require("embeddings"))
    spec = GallerySpec(run.get("gallery_strategy", "random_single"),
                       run.get("seed", 0, int))
    report = identification_report(es, spec)
    out = run.require("out")
    rows = [
        ("rank@1", report.rank1),
        ("rank@5", report.rank5),
        ("rank@10", report.rank10),
        ("rank_k_95", report.rank_k_95),
        ("gallery_size", report.gallery_size),
        ("n_probes", report.n_probes),
        ("excluded_identities", len(report.excluded_identities)),
    ]
    run.write_report(out, "identify-report", rows)
    with open(str(out) + ".cmc", "w") as fh:
        fh.write("K\tCMC\n")
        for k in range(1, report.curve.gallery_size + 1):
            fh.write(f"{k}\t{report.curve[k]:.9g}\n")
    if run.figures_enabled():
        plotting.save_cmc(report.curve, str(out) + ".png")


def cmd_openset(run: Run) -> None:
    es = load_embeddings(run.require("embeddings"))
    cohort_path = run.get("cohort")
    cohort_set = load_embeddings(cohort_path) if cohort_path else None
    sizes_raw = run.floats("sizes", "200,100,300")
    sizes = ProtocolSizes(int(sizes_raw[0]), int(sizes_raw[1]), int(sizes_raw[2]))
    protocol = build_protocol(
        es,
        shortlist_k=run.get("k", 10, int),
        seed=run.get("seed", 0, int),
        sizes=sizes,
        cohort_source=cohort_set,
        cohort_size=run.get("cohort_size", 300, int),
    )
    strategies = [s.strip() for s in run.get("strategies", "bestofk,topkmean,snorm").split(",")]
    targets = run.floats("far_targets", "0.001,0.0001")
    results = []
    rows: list[tuple[str, object]] = [
        ("gallery_size", len(protocol.gallery)),
        ("n_known_probes", len(protocol.known_probes)),
        ("n_impostor_probes", len(protocol.impostor_probes)),
        ("shortlist_k", protocol.shortlist_k),
    ]
    for kind in strategies:
        strategy = make_strategy(kind, protocol)
        for far in targets:
            r = dir_at_far(protocol, strategy, far)
            results.append(r)
            rows.append((f"dir@far{far:g}.{kind}", r.dir))
            rows.append((f"dir@far{far:g}.{kind}.threshold", r.threshold))
            if r.unreliable:
                rows.append((f"dir@far{far:g}.{kind}.warning", "impostor count below 1/far"))
    out = run.require("out")
    run.write_report(out, "openset-report", rows)
    if run.figures_enabled():
        plotting.save_dir_bars(results, str(out) + ".png")


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "stats": cmd_stats,
    "train": cmd_train,
    "embed": cmd_embed,
    "verify": cmd_verify,
    "identify": cmd_identify,
    "openset": cmd_openset,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="veride",
                                     description="ECG tabular biometric pipeline")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="INI config file")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value")
    parser.add_argument("--deterministic", action="store_true",
                        help="force single-threaded reductions")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config, args.command, args.set)
        run = Run(args.command, cfg, args.deterministic)
        COMMANDS[args.command](run)
        return 0
    except (ConfigError, SchemaError, EmptyTableError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except VerideError as exc:
        print(f"fault: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
