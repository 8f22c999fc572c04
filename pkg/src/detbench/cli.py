"""Declarative experiment pipeline.

One JSON config drives every stage: build (ingest reals), generate (plan and
run the six fake variants), augment (optional eval-time post-processing),
train (fit the toy probe), score, evaluate, robustness, spectra, and audit.
Stage outputs land in per-stage directories under the output root, each with
a receipt carrying the config hash; re-running a finished stage with an
unchanged config is a no-op, and one lock file serializes pipelines per
output directory.

Exit codes: 0 success, 2 config error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__, imgio, rng
from .augment import AugPolicy, PerturbationSpec, apply_perturbation, social_network_sim
from .audit import format_bias_report, rebalance_compression
from .detector import (
    DetectorHandle,
    FeatureSpec,
    TrainSchedule,
    make_backend,
    score_image,
    train_probe,
)
from .genclient import records_from_jobs, run_jobs
from .manifest import DatasetManifest, ingest_reals, plan_fake_variants
from .metrics import ScoreEntry, ScoreSet, build_report
from .spectral import diff_power_spectrum, emit_spectrum

log = logging.getLogger(__name__)

STAGE_ORDER = ("build", "generate", "augment", "train", "score", "evaluate", "robustness", "spectra", "audit")

STAGE_DEPS = {
    "build": (),
    "generate": ("build",),
    "augment": ("generate",),
    "train": ("generate",),
    "score": ("generate",),
    "evaluate": ("score",),
    "robustness": ("generate",),
    "spectra": ("generate",),
    "audit": ("generate",),
}

SUBCOMMANDS = {
    "build-dataset": ("build",),
    "generate": ("generate",),
    "augment": ("augment",),
    "train-probe": ("train",),
    "score": ("score",),
    "evaluate": ("evaluate",),
    "robustness": ("robustness",),
    "spectra": ("spectra",),
    "audit": ("audit",),
    "all": STAGE_ORDER,
}


class ConfigError(Exception):
    pass


class StageError(Exception):
    pass


DEFAULT_CONFIG: dict = {
    "seed": 0,
    "out": "runs/exp",
    "dataset": {
        "listing": None,
        "annotations": None,
        "source_tag": "local",
        "min_objects": 1,
        "split": {"train": 0.5, "val": 0.25, "eval": 0.25},
    },
    "generation": {
        "endpoint": "mock",
        "generator_tag": "mock-fingerprint",
        "steps": 50,
        "guidance": 7.5,
        "max_in_flight": 4,
        "retries": 2,
    },
    "augment": {
        "policy": {"name": "standard"},
        "eval_post": "none",  # none | social_sim
    },
    "detector": {"kind": "toy_probe", "location": None, "crop_size": 504},
    "train": {
        "learning_rate": 0.05,
        "weight_decay": 1e-6,
        "batch_size": 24,
        "eval_interval": 3435,
        "min_delta": 0.001,
        "patience": 5,
        "max_iterations": 50000,
        "feature_bands": 32,
    },
    "metrics": {"bins": 15, "threshold": 0.5, "epsilon": 1e-7},
    "robustness": {"grid": []},
    "spectra": {"size": 256, "pair_variant": "self_cond"},
    "audit": {"ks_threshold": 0.25, "container_mass_threshold": 0.25, "rebalance": False},
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | Path, sets: list[str] | None = None, seed: int | None = None, out: str | None = None) -> dict:
    try:
        with open(path) as fh:
            user = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    config = _merge(DEFAULT_CONFIG, user)
    for item in sets or []:
        if "=" not in item:
            raise ConfigError(f"--set needs key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set path {key!r} crosses a non-object")
        node[parts[-1]] = value
    if seed is not None:
        config["seed"] = seed
    if out is not None:
        config["out"] = out
    return config


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Stage plumbing
# ---------------------------------------------------------------------------


def _stage_dir(config: dict, stage: str) -> Path:
    names = {
        "build": "dataset",
        "generate": "generated",
        "augment": "augmented",
        "train": "probe",
        "score": "scores",
        "evaluate": "report",
        "robustness": "robustness",
        "spectra": "spectra",
        "audit": "audit",
    }
    return Path(config["out"]) / names[stage]


def _receipt_path(config: dict, stage: str) -> Path:
    return _stage_dir(config, stage) / "stage.json"


def _stage_done(config: dict, stage: str) -> bool:
    receipt = _receipt_path(config, stage)
    if not receipt.exists():
        return False
    try:
        with open(receipt) as fh:
            data = json.load(fh)
    except json.JSONDecodeError:
        return False
    return data.get("config_hash") == config_hash(config)


def _write_receipt(config: dict, stage: str) -> None:
    path = _receipt_path(config, stage)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump({"stage": stage, "config_hash": config_hash(config), "version": __version__}, fh, indent=2)
        fh.write("\n")


class _Lock:
    def __init__(self, out_dir: Path) -> None:
        self.path = out_dir / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StageError(f"output directory is locked by another pipeline ({self.path})")
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def _stage_build(config: dict) -> None:
    ds = config["dataset"]
    if not ds.get("listing") or not ds.get("annotations"):
        raise ConfigError("dataset.listing and dataset.annotations are required for the build stage")
    out = _stage_dir(config, "build")
    manifest = ingest_reals(
        ds["listing"],
        ds["annotations"],
        out,
        min_objects=ds.get("min_objects", 1),
        source_tag=ds.get("source_tag", "local"),
    )
    manifest.provenance["config_hash"] = config_hash(config)
    manifest.provenance["version"] = __version__
    manifest.save(out)
    log.info("build: %d real records", len(manifest.records))


def _split_manifest(manifest: DatasetManifest, split: dict, seed: int) -> dict[str, DatasetManifest]:
    reals = manifest.reals()
    gen = rng.stream(seed, "split")
    order = gen.permutation(len(reals))
    n_train = int(round(split.get("train", 0.5) * len(reals)))
    n_val = int(round(split.get("val", 0.25) * len(reals)))
    assignment: dict[str, str] = {}
    for position, index in enumerate(order):
        if position < n_train:
            part = "train"
        elif position < n_train + n_val:
            part = "val"
        else:
            part = "eval"
        assignment[reals[index].id] = part
    parts = {}
    for part in ("train", "val", "eval"):
        ids = {rid for rid, p in assignment.items() if p == part}
        records = [r for r in manifest.records if (r.id in ids) or (r.label == "fake" and r.pair_id in ids)]
        parts[part] = DatasetManifest(
            records=records,
            annotations=[a for a in manifest.annotations if a.record_id in {r.id for r in records}],
            taxonomy=manifest.taxonomy,
            provenance={**manifest.provenance, "split": part},
        )
    return parts


def _stage_generate(config: dict) -> None:
    build_dir = _stage_dir(config, "build")
    manifest = DatasetManifest.load(build_dir)
    out = _stage_dir(config, "generate")
    out.mkdir(parents=True, exist_ok=True)
    gen_cfg = config["generation"]
    jobs = plan_fake_variants(
        manifest, config["seed"], steps=gen_cfg.get("steps"), guidance=gen_cfg.get("guidance")
    )
    jobs = run_jobs(
        jobs,
        gen_cfg["endpoint"],
        manifest,
        out / "images",
        max_in_flight=gen_cfg.get("max_in_flight", 4),
        retries=gen_cfg.get("retries", 2),
    )
    failed = [j.job_id for j in jobs if j.status != "done"]
    if failed:
        log.warning("generate: %d jobs failed (%s...)", len(failed), failed[:3])
    fakes = records_from_jobs(jobs, manifest, gen_cfg.get("generator_tag", "unknown"))
    full = DatasetManifest(
        records=[*manifest.records, *fakes],
        annotations=manifest.annotations,
        taxonomy=manifest.taxonomy,
        provenance={
            **manifest.provenance,
            "generator_tag": gen_cfg.get("generator_tag", "unknown"),
            "steps": jobs[0].steps if jobs else None,
            "guidance": jobs[0].guidance if jobs else None,
        },
    )
    full.validate()
    full.save(out / "full")
    for part, sub in _split_manifest(full, config["dataset"]["split"], config["seed"]).items():
        sub.save(out / part)
    log.info("generate: %d fakes for %d reals", len(fakes), len(manifest.records))


def _eval_manifest(config: dict) -> DatasetManifest:
    augmented = _stage_dir(config, "augment") / "manifest.jsonl"
    if config["augment"].get("eval_post", "none") != "none" and augmented.exists():
        return DatasetManifest.load(_stage_dir(config, "augment"))
    return DatasetManifest.load(_stage_dir(config, "generate") / "eval")


def _stage_augment(config: dict) -> None:
    mode = config["augment"].get("eval_post", "none")
    out = _stage_dir(config, "augment")
    out.mkdir(parents=True, exist_ok=True)
    if mode == "none":
        log.info("augment: no eval-time post-processing configured")
        return
    if mode != "social_sim":
        raise ConfigError(f"unknown augment.eval_post mode {mode!r}")
    manifest = DatasetManifest.load(_stage_dir(config, "generate") / "eval")
    images_dir = out / "images"
    images_dir.mkdir(exist_ok=True)
    new_records = []
    with open(out / "social_params.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "scale", "jpeg_qf"])
        for record in manifest.records:
            image = imgio.load_rgb(record.path)
            processed, params = social_network_sim(image, rng.derive_seed(config["seed"], record.id, "social"))
            path = images_dir / f"{record.id}.png"
            imgio.save_png(processed, path)
            writer.writerow([record.id, f"{params['scale']:.6f}", params["jpeg_qf"]])
            new_records.append(
                dataclasses.replace(
                    record,
                    path=str(path),
                    width=processed.shape[1],
                    height=processed.shape[0],
                    container="png",
                    jpeg_qf=None,
                )
            )
    DatasetManifest(new_records, manifest.annotations, manifest.taxonomy, manifest.provenance).save(out)
    log.info("augment: social-network simulation over %d eval images", len(new_records))


def _probe_path(config: dict) -> Path:
    location = config["detector"].get("location")
    return Path(location) if location else _stage_dir(config, "train") / "probe.json"


def _stage_train(config: dict) -> None:
    if config["detector"]["kind"] != "toy_probe":
        log.info("train: external detector configured; nothing to train")
        return
    gen_dir = _stage_dir(config, "generate")
    train_manifest = DatasetManifest.load(gen_dir / "train")
    val_manifest = DatasetManifest.load(gen_dir / "val")
    tr = config["train"]
    schedule = TrainSchedule(
        learning_rate=tr["learning_rate"],
        weight_decay=tr["weight_decay"],
        batch_size=tr["batch_size"],
        eval_interval=tr["eval_interval"],
        min_delta=tr["min_delta"],
        patience=tr["patience"],
        max_iterations=tr["max_iterations"],
        seed=config["seed"],
    )
    policy = AugPolicy.from_dict({**config["augment"]["policy"], "seed": config["seed"]})
    spec = FeatureSpec(bands=tr.get("feature_bands", 32), crop_size=config["detector"].get("crop_size", 504))
    probe = train_probe(train_manifest, val_manifest, policy, schedule, feature_spec=spec)
    out = _stage_dir(config, "train")
    out.mkdir(parents=True, exist_ok=True)
    probe.save(_probe_path(config))
    log.info("train: %d evaluations, best val bAcc %.3f", len(probe.training_log), max((e["val_bacc"] for e in probe.training_log), default=float("nan")))


def _detector_backend(config: dict):
    det = config["detector"]
    location = str(_probe_path(config)) if det["kind"] == "toy_probe" else det["location"]
    if det["kind"] == "toy_probe" and not Path(location).exists():
        raise StageError("toy probe file missing: run the train stage first")
    handle = DetectorHandle(kind=det["kind"], location=location, crop_size=det.get("crop_size", 504))
    return make_backend(handle), handle


def _score_manifest(config: dict, manifest: DatasetManifest, perturb: PerturbationSpec | None = None) -> ScoreSet:
    backend, handle = _detector_backend(config)
    entries = []
    for record in manifest.records:
        image = imgio.load_rgb(record.path)
        if perturb is not None:
            image = apply_perturbation(
                image, perturb, rng.derive_seed(config["seed"], record.id, "robust", perturb.kind, repr(perturb.param()))
            )
        result = score_image(backend, image, handle.crop_size)
        group = record.generator_tag if record.label == "fake" else "__real__"
        entries.append(ScoreEntry(record.id, group, result.prob, 1 if record.label == "fake" else 0))
    # reals are shared across generator groups, mirroring per-generator
    # evaluation against a common real pool
    groups = sorted({e.group for e in entries if e.group != "__real__"})
    final = []
    for e in entries:
        if e.group == "__real__":
            final.extend(ScoreEntry(e.id, g, e.prob, e.label) for g in groups)
        else:
            final.append(e)
    return ScoreSet(final, threshold=config["metrics"]["threshold"])


def _stage_score(config: dict) -> None:
    scores = _score_manifest(config, _eval_manifest(config))
    out = _stage_dir(config, "score")
    out.mkdir(parents=True, exist_ok=True)
    scores.to_csv(out / "scores.csv")
    log.info("score: %d entries", len(scores.entries))


def _stage_evaluate(config: dict) -> None:
    scores_path = _stage_dir(config, "score") / "scores.csv"
    if not scores_path.exists():
        raise StageError("scores.csv missing: run the score stage first")
    scores = ScoreSet.from_csv(scores_path, threshold=config["metrics"]["threshold"])
    report = build_report(scores, bins=config["metrics"]["bins"], epsilon=config["metrics"]["epsilon"])
    report.write(_stage_dir(config, "evaluate"))
    log.info("evaluate: aggregate bAcc %.3f", report.aggregate.bacc or float("nan"))


def _stage_robustness(config: dict) -> None:
    grid = [PerturbationSpec.from_dict(g) for g in config["robustness"]["grid"]]
    if not grid:
        log.info("robustness: empty grid, nothing to sweep")
        _stage_dir(config, "robustness").mkdir(parents=True, exist_ok=True)
        return
    manifest = _eval_manifest(config)
    out = _stage_dir(config, "robustness")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for spec in grid:
        try:
            scores = _score_manifest(config, manifest, perturb=spec)
        except ValueError as exc:
            log.warning("robustness: point %s skipped: %s", spec.to_dict(), exc)
            continue
        report = build_report(scores, bins=config["metrics"]["bins"], epsilon=config["metrics"]["epsilon"])
        agg = report.aggregate
        rows.append([spec.kind, spec.param(), agg.bacc, agg.auc, agg.ece, agg.nll])
    with open(out / "robustness.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "param", "bacc", "auc", "ece", "nll"])
        for row in rows:
            writer.writerow([row[0], *(f"{v:.12g}" if isinstance(v, float) else v for v in row[1:])])
    log.info("robustness: %d grid points", len(rows))


def _stage_spectra(config: dict) -> None:
    full = DatasetManifest.load(_stage_dir(config, "generate") / "full")
    variant = config["spectra"].get("pair_variant", "self_cond")
    records = full.by_id()
    pairs = []
    for fake in full.fakes():
        if fake.variant != variant:
            continue
        real = records[fake.pair_id]
        pairs.append((imgio.load_rgb(real.path), imgio.load_rgb(fake.path)))
    if not pairs:
        raise StageError(f"no aligned pairs with variant {variant!r}")
    size = min(config["spectra"]["size"], min(min(p[0].shape[:2]) for p in pairs))
    spectrum = diff_power_spectrum(pairs, size=size, pair_kind="real_vs_selfcond")
    emit_spectrum(spectrum, _stage_dir(config, "spectra"))
    log.info("spectra: averaged %d pairs at size %d", spectrum.count, size)


def _stage_audit(config: dict) -> None:
    full = DatasetManifest.load(_stage_dir(config, "generate") / "full")
    out = _stage_dir(config, "audit")
    out.mkdir(parents=True, exist_ok=True)
    report = format_bias_report(
        full,
        ks_threshold=config["audit"]["ks_threshold"],
        container_mass_threshold=config["audit"]["container_mass_threshold"],
    )
    with open(out / "audit.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    lines = [f"{'attribute':<12} {'ks':>8}  flag"]
    for key in ("container", "qf", "resolution"):
        ks = report.ks[key]
        lines.append(f"{key:<12} {'-' if ks is None else f'{ks:8.3f}'}  {report.flags.get(key, False)}")
    (out / "audit.txt").write_text("\n".join(lines) + "\n")
    if config["audit"].get("rebalance") and report.flags.get("qf", False):
        rebalanced = rebalance_compression(full, out / "unbiased", config["seed"])
        rebalanced.save(out / "unbiased")
        log.info("audit: rebalanced manifest written")
    log.info("audit: flags %s", report.flags)


_STAGE_FUNCS = {
    "build": _stage_build,
    "generate": _stage_generate,
    "augment": _stage_augment,
    "train": _stage_train,
    "score": _stage_score,
    "evaluate": _stage_evaluate,
    "robustness": _stage_robustness,
    "spectra": _stage_spectra,
    "audit": _stage_audit,
}


def run_pipeline(config: dict, stages: tuple[str, ...]) -> None:
    """Execute the requested stages in the fixed order, skipping stages whose
    receipt already matches the config hash."""
    unknown = [s for s in stages if s not in STAGE_ORDER]
    if unknown:
        raise ConfigError(f"unknown stages: {unknown}")
    ordered = [s for s in STAGE_ORDER if s in stages]
    with _Lock(Path(config["out"])):
        for stage in ordered:
            for dep in STAGE_DEPS[stage]:
                if dep not in ordered and not _stage_done(config, dep):
                    raise StageError(f"stage {stage!r} needs {dep!r}: run that stage first")
            if _stage_done(config, stage):
                log.info("%s: already complete for this config, skipping", stage)
                continue
            log.info("running stage %s", stage)
            _STAGE_FUNCS[stage](config)
            _write_receipt(config, stage)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="detbench", description=__doc__)
    parser.add_argument("command", choices=sorted(SUBCOMMANDS))
    parser.add_argument("--config", required=True, help="experiment config JSON")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("--stages", default=None, help="comma-separated stage subset (with `all`)")
    parser.add_argument("--set", dest="sets", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )

    try:
        config = load_config(args.config, sets=args.sets, seed=args.seed, out=args.out)
        stages = SUBCOMMANDS[args.command]
        if args.stages:
            requested = tuple(s.strip() for s in args.stages.split(","))
            unknown = [s for s in requested if s not in STAGE_ORDER]
            if unknown:
                raise ConfigError(f"unknown stages: {unknown}")
            stages = tuple(s for s in stages if s in requested)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        run_pipeline(config, stages)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"stage failed: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # any stage crash maps to exit 3
        log.exception("stage failed")
        print(f"stage failed: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
