"""File-based pipeline stages: split, train, recommend, audit, report.

Every stage reads and writes only documented files under the output
directory, so any stage can be re-run alone or fed third-party files::

    out/split/{train.csv, test.csv, manifest.json}
    out/models/<algo>.pkl, out/models/<algo>.json
    out/recs/<algo>.tsv
    out/audit/<algo>.csv
    out/report/{cohort_report.csv, significance.csv, genre_frequency.csv,
                genre_amplification.csv}
    out/run_manifest.json
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import pickle
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .analysis import (
    CohortReport,
    amplification_profile,
    cohort_report,
    form_cohorts,
    genre_frequency,
    genre_frequency_csv,
)
from .config import PipelineConfig
from .dataset import (
    DataError,
    ParseError,
    RatingsTable,
    parse_catalog,
    parse_ratings,
    popularity,
    split_ratings,
)
from .metrics import audit_users, audits_to_csv, read_audits
from .recommenders import ConfigError, SchemaError, fit, read_recommendations, recommend_top_n

_log = logging.getLogger(__name__)

STAGES = ("split", "train", "recommend", "audit", "report")


class MissingInputError(FileNotFoundError):
    pass


VALIDATION_ERRORS = (MissingInputError, ConfigError, SchemaError, ParseError, DataError)


class StageError(RuntimeError):
    """A stage failed; ``validation`` tells bad input apart from a runtime fault."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        self.validation = isinstance(cause, VALIDATION_ERRORS)
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")


@dataclass(frozen=True)
class Layout:
    root: Path

    @property
    def train(self) -> Path:
        return self.root / "split" / "train.csv"

    @property
    def test(self) -> Path:
        return self.root / "split" / "test.csv"

    @property
    def split_manifest(self) -> Path:
        return self.root / "split" / "manifest.json"

    def model(self, algo: str) -> Path:
        return self.root / "models" / f"{algo}.pkl"

    def model_summary(self, algo: str) -> Path:
        return self.root / "models" / f"{algo}.json"

    def recs(self, algo: str) -> Path:
        return self.root / "recs" / f"{algo}.tsv"

    def audit(self, algo: str) -> Path:
        return self.root / "audit" / f"{algo}.csv"

    @property
    def report_dir(self) -> Path:
        return self.root / "report"

    @property
    def run_manifest(self) -> Path:
        return self.root / "run_manifest.json"


def _require(path: Path, produced_by: str) -> Path:
    if not path.exists():
        raise MissingInputError(f"missing input {path} (run `{produced_by}` first)")
    return path


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_split_table(path: Path) -> RatingsTable:
    return parse_ratings(_require(path, "split"), format="csv", scale=None)


def _load_catalog(cfg: PipelineConfig):
    return parse_catalog(cfg.catalog, format=cfg.catalog_format)


def _ordered_names(cfg: PipelineConfig, folder: Path, suffix: str) -> list[str]:
    """Configured algorithms first, then any extra (third-party) files in name order."""
    names = [a for a in cfg.algorithms if (folder / f"{a}{suffix}").exists()]
    if folder.exists():
        extra = sorted(p.name[: -len(suffix)] for p in folder.glob(f"*{suffix}"))
        names += [n for n in extra if n not in names]
    return names


def _fan_out(fn, cfg: PipelineConfig, names: list[str], jobs: int) -> None:
    if jobs > 1 and len(names) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(names))) as pool:
            list(pool.map(fn, [cfg] * len(names), names))
    else:
        for name in names:
            fn(cfg, name)


def stage_split(cfg: PipelineConfig) -> dict:
    cfg.check_inputs()
    table = parse_ratings(cfg.ratings, format=cfg.format, scale=cfg.rating_scale)
    split = split_ratings(table, cfg.fraction, cfg.seed)
    lay = Layout(cfg.out_dir)
    _write(lay.train, split.train.to_csv())
    _write(lay.test, split.test.to_csv())
    manifest = split.manifest()
    manifest["input_file"] = str(cfg.ratings)
    manifest["input_file_sha256"] = file_sha256(cfg.ratings)
    _write(lay.split_manifest, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _train_one(cfg: PipelineConfig, algo: str) -> None:
    lay = Layout(cfg.out_dir)
    train = _load_split_table(lay.train)
    model = fit(train, cfg.algorithms[algo])
    lay.model(algo).parent.mkdir(parents=True, exist_ok=True)
    with open(lay.model(algo), "wb") as f:
        pickle.dump(model, f, protocol=pickle.HIGHEST_PROTOCOL)
    _write(lay.model_summary(algo), json.dumps(model.summary(), indent=2, sort_keys=True) + "\n")


def stage_train(cfg: PipelineConfig, jobs: int = 1) -> None:
    _require(Layout(cfg.out_dir).train, "split")
    _fan_out(_train_one, cfg, list(cfg.algorithms), jobs)


def _recommend_one(cfg: PipelineConfig, algo: str) -> None:
    lay = Layout(cfg.out_dir)
    with open(_require(lay.model(algo), "train"), "rb") as f:
        model = pickle.load(f)
    recs = recommend_top_n(model, cfg.list_size)
    _write(lay.recs(algo), recs.to_tsv())


def stage_recommend(cfg: PipelineConfig, jobs: int = 1) -> None:
    lay = Layout(cfg.out_dir)
    for algo in cfg.algorithms:
        _require(lay.model(algo), "train")
    _fan_out(_recommend_one, cfg, list(cfg.algorithms), jobs)


def _audit_one(cfg: PipelineConfig, algo: str) -> None:
    lay = Layout(cfg.out_dir)
    train = _load_split_table(lay.train)
    test = _load_split_table(lay.test)
    recs = read_recommendations(lay.recs(algo), n=cfg.list_size)
    result = audit_users(
        train, test, recs, _load_catalog(cfg), popularity(train), cfg.relevance_threshold
    )
    for user, reason in result.skipped.items():
        _log.info("%s: skipped user %s (%s)", algo, user, reason)
    _write(lay.audit(algo), audits_to_csv(result.audits))


def stage_audit(cfg: PipelineConfig, jobs: int = 1) -> list[str]:
    lay = Layout(cfg.out_dir)
    _require(lay.train, "split")
    names = _ordered_names(cfg, lay.root / "recs", ".tsv")
    if not names:
        raise MissingInputError(f"no recommendation files under {lay.root / 'recs'} (run `recommend` first)")
    _fan_out(_audit_one, cfg, names, jobs)
    return names


def stage_report(cfg: PipelineConfig) -> list[str]:
    lay = Layout(cfg.out_dir)
    names = _ordered_names(cfg, lay.root / "audit", ".csv")
    if not names:
        raise MissingInputError(f"no audit files under {lay.root / 'audit'} (run `audit` first)")
    rows, sig = [], []
    for algo in names:
        audits = read_audits(lay.audit(algo))
        cohorts = form_cohorts({a.user: a.profile_gap for a in audits}, cfg.cohorts)
        part = cohort_report(cohorts, {algo: audits})
        rows += part.rows
        sig += part.significance
    report = CohortReport(rows, sig)
    out = lay.report_dir
    _write(out / "cohort_report.csv", report.to_csv())
    _write(out / "significance.csv", report.significance_csv())

    catalog = _load_catalog(cfg)
    profiles = [genre_frequency(_load_split_table(lay.train), catalog, "ratings")]
    for algo in names:
        if lay.recs(algo).exists():
            profiles.append(genre_frequency(read_recommendations(lay.recs(algo)), catalog, algo))
    _write(out / "genre_frequency.csv", genre_frequency_csv(profiles))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["source", "genre", "lift"])
    for p in profiles[1:]:
        for genre, lift in amplification_profile(profiles[0], p).items():
            w.writerow([p.source, genre, "" if lift is None else repr(lift)])
    _write(out / "genre_amplification.csv", buf.getvalue())
    return names


def run_stage(name: str, cfg: PipelineConfig, jobs: int = 1):
    try:
        if name == "split":
            return stage_split(cfg)
        if name == "train":
            return stage_train(cfg, jobs)
        if name == "recommend":
            return stage_recommend(cfg, jobs)
        if name == "audit":
            return stage_audit(cfg, jobs)
        if name == "report":
            return stage_report(cfg)
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e
    raise ValueError(f"unknown stage {name!r}")


def run_pipeline(cfg: PipelineConfig, jobs: int = 1) -> dict:
    """Run every stage in order and write the run manifest."""
    started = time.time()
    durations = {}
    for stage in STAGES:
        t0 = time.perf_counter()
        run_stage(stage, cfg, jobs)
        durations[stage] = round(time.perf_counter() - t0, 3)
        _log.info("stage %s done in %.1fs", stage, durations[stage])
    manifest = {
        "tool": "popcal",
        "version": __version__,
        "config_sha256": cfg.config_hash,
        "inputs": {
            str(cfg.ratings): file_sha256(cfg.ratings),
            str(cfg.catalog): file_sha256(cfg.catalog),
        },
        "split": {"fraction": cfg.fraction, "seed": cfg.seed},
        "list_size": cfg.list_size,
        "cohorts": cfg.cohorts,
        "algorithms": {name: m.relevant() for name, m in cfg.algorithms.items()},
        "jobs": jobs,
        "started_unix": round(started, 3),
        "stage_seconds": durations,
        "wall_seconds": round(time.time() - started, 3),
    }
    _write(Layout(cfg.out_dir).run_manifest, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
