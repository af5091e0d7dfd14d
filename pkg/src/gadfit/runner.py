"""Experiment orchestration: pipelines behind the service and CLI.

A "cell" is one (variant, category, fold) evaluation: load the shared
pretrained weights, split that category's normal images with the fold
seed, fit the Gaussians on frozen features, optionally fine-tune, then
score the category's test set and compute the three metrics.  Cells are
independent, seed-deterministic jobs, dispatched to a process pool.

Every entry point writes a ``manifest.json`` (config hash, seeds,
package and library versions) that pins the run's inputs.
"""

from __future__ import annotations

import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, data, extractor, gaussian, metrics, scoring, training
from .config import RunConfig, TrainSettings
from .errors import ConfigurationError

_PROCESS_CACHE: dict = {}

KNOWN_VARIANTS = ("frozen", "finetuned", "mahalanobis", "svdd", "hsc", "valloss", "fixed")


def resolve_variant(name: str, cfg: RunConfig):
    """Map a variant name to a TrainSettings override (None = no training)."""
    if name == "frozen":
        return None
    train = cfg.train.model_copy(deep=True)
    if name in ("finetuned", "mahalanobis"):
        train.objective = "mahalanobis" if name == "mahalanobis" else train.objective
    elif name in ("svdd", "hsc"):
        train.objective = name
    elif name == "valloss":
        train.stopping = "val_loss"
    elif name == "fixed":
        train.stopping = "fixed_epochs"
    else:
        raise ConfigurationError(f"unknown variant {name!r}; known: {KNOWN_VARIANTS}")
    return train


def fold_seed(base_seed: int, category_index: int, fold: int) -> int:
    return int(np.random.SeedSequence([base_seed, category_index, fold]).generate_state(1)[0] % (2**31))


def write_manifest(out_dir: Path, cfg: RunConfig, command: str, extra: dict = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": cfg.model_dump(),
        "config_hash": cfg.config_hash(),
        "versions": {
            "gadfit": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
    }
    import scipy

    manifest["versions"]["scipy"] = scipy.__version__
    if extra:
        manifest.update(extra)
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# pipeline stages


def corpus_dir(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir) / "corpus"


def weights_path(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir) / "weights" / "pretrained.gadw"


def prepare_corpus(cfg: RunConfig) -> dict:
    """Generate (or ingest) the corpus and export it to the run directory."""
    out = corpus_dir(cfg)
    cs = cfg.corpus
    if cs.kind == "synthetic":
        corpus = data.generate_corpus(
            num_categories=cs.categories,
            train_per_category=cs.train_per_category,
            test_per_category=cs.test_per_category,
            size=cs.size,
            defect_kinds=tuple(cs.defects),
            seed=cs.seed,
        )
    else:
        if not cs.root:
            raise ConfigurationError("corpus.kind='mvtec' requires corpus.root")
        corpus = data.load_mvtec_layout(cs.root, size=cs.size)
        if cs.category_filter:
            corpus.categories = {k: v for k, v in corpus.categories.items() if k in cs.category_filter}
            if not corpus.categories:
                raise ConfigurationError(f"no categories left after filter {cs.category_filter}")
    data.export_mvtec_layout(corpus, out)
    write_manifest(Path(cfg.output_dir), cfg, "gen-data")
    return {
        "corpus_dir": str(out),
        "categories": corpus.names(),
        "image_size": corpus.image_size,
        "train_images": {n: int(corpus.categories[n].train.shape[0]) for n in corpus.names()},
        "test_images": {n: int(corpus.categories[n].test.shape[0]) for n in corpus.names()},
    }


def run_pretrain(cfg: RunConfig) -> dict:
    """Pretrain the extractor on a freshly generated multi-texture corpus."""
    ps = cfg.pretrain
    pre_corpus = data.generate_corpus(
        num_categories=ps.classes,
        train_per_category=ps.images_per_class,
        test_per_category=2,
        size=cfg.corpus.size,
        seed=ps.corpus_seed,
    )
    images, labels = data.stack_labeled(pre_corpus)
    model = extractor.build_extractor(
        channels=cfg.extractor.channels,
        tap_levels=cfg.extractor.tap_levels,
        activation=cfg.extractor.activation,
        seed=cfg.extractor.init_seed,
    )
    model, report = extractor.pretrain_classifier(
        model, images, labels, epochs=ps.epochs, lr=ps.lr, seed=ps.seed, batch_size=ps.batch_size
    )
    wpath = weights_path(cfg)
    wpath.parent.mkdir(parents=True, exist_ok=True)
    extractor.save_weights(model, wpath)
    result = {
        "weights": str(wpath),
        "holdout_accuracy": report.holdout_accuracy,
        "epochs": report.epochs,
        "classes": ps.classes,
    }
    write_manifest(Path(cfg.output_dir), cfg, "pretrain", {"pretrain_result": result})
    with open(Path(cfg.output_dir) / "weights" / "pretrain_report.json", "w") as fh:
        json.dump({**result, "train_losses": report.train_losses}, fh, indent=2)
    return result


def _worker_init():
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=1)
    except Exception:
        pass


def _load_cached_corpus(path: str) -> data.Corpus:
    key = ("corpus", path)
    if key not in _PROCESS_CACHE:
        _PROCESS_CACHE[key] = data.load_mvtec_layout(path)
    return _PROCESS_CACHE[key]


def run_cell(job: dict) -> dict:
    """Evaluate one (variant, category, fold) cell; worker entry point."""
    import time

    t0 = time.perf_counter()
    corpus = _load_cached_corpus(job["corpus_dir"])
    cat = corpus.categories[job["category"]]
    model, _ = extractor.load_weights(job["weights"])
    seed = job["seed"]
    train_settings = job["train"]
    save_path = job.get("save_model")

    if train_settings is None:
        # frozen baseline: fit on the fold's training split, no updates
        ts = TrainSettings.model_validate(job["base_train"])
        train_imgs, _ = training.split_dataset(cat.train, ts.train_fraction, seed)
        feats = model.forward_levels(train_imgs)
        scorer = gaussian.fit_gaussian(feats, ts.gaussian_mode)
        aggregation = ts.aggregation
        report = None
    else:
        ts = TrainSettings.model_validate(train_settings)
        config = ts.to_train_config(seed=seed)
        model, scorer, report = training.finetune(model, config, cat.train)
        aggregation = config.aggregation

    if save_path:
        Path(save_path).parent.mkdir(parents=True, exist_ok=True)
        extractor.save_weights(model, save_path, gaussians=scorer)

    results = scoring.score_dataset(model, scorer, cat.test, aggregation)
    scores = np.array([r.score for r in results])
    heatmaps = [r.heatmap for r in results]
    masks = [m.astype(bool) for m in cat.masks]
    image_auc = metrics.auroc(scores, np.array([m.any() for m in masks]))
    pix_auc = metrics.pixel_auroc(heatmaps, masks)
    _, _, pro = metrics.pro_curve(heatmaps, masks, fpr_limit=0.3)
    return {
        "variant": job["variant"],
        "category": job["category"],
        "fold": job["fold"],
        "image_auroc": image_auc,
        "pixel_auroc": pix_auc,
        "pro_30": pro,
        "train_report": report.to_json() if report is not None else None,
        "seconds": time.perf_counter() - t0,
    }


def build_jobs(cfg: RunConfig, variants, save_models: bool = False) -> list:
    cdir = str(corpus_dir(cfg))
    wpath = str(weights_path(cfg))
    if not Path(cdir).is_dir():
        raise ConfigurationError(f"corpus directory {cdir} missing; run gen-data first")
    if not Path(wpath).is_file():
        raise ConfigurationError(f"weights file {wpath} missing; run pretrain first")
    names = data.load_mvtec_layout(cdir).names()
    jobs = []
    for variant in variants:
        train = resolve_variant(variant, cfg)
        for ci, name in enumerate(names):
            for fold in range(cfg.folds):
                job = {
                    "variant": variant,
                    "category": name,
                    "fold": fold,
                    "seed": fold_seed(cfg.seed, ci, fold),
                    "corpus_dir": cdir,
                    "weights": wpath,
                    "train": train.model_dump() if train is not None else None,
                    "base_train": cfg.train.model_dump(),
                }
                if save_models:
                    job["save_model"] = str(
                        Path(cfg.output_dir) / "models" / variant / f"{name}_fold{fold}.gadw"
                    )
                jobs.append(job)
    return jobs


def run_jobs(jobs: list, workers: int = 0) -> list:
    """Run cells, in processes when more than one worker is useful."""
    if workers <= 0:
        workers = min(os.cpu_count() or 1, len(jobs))
    if workers <= 1 or len(jobs) <= 1:
        _worker_init()
        results = [run_cell(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init) as pool:
            results = list(pool.map(run_cell, jobs))
    return sorted(results, key=lambda r: (r["variant"], r["category"], r["fold"]))


def rows_to_report(rows: list) -> metrics.EvalReport:
    report = metrics.EvalReport()
    for r in rows:
        report.add(
            metrics.EvalRow(
                category=r["category"],
                fold=r["fold"],
                image_auroc=r["image_auroc"],
                pixel_auroc=r["pixel_auroc"],
                pro_30=r["pro_30"],
                variant=r["variant"],
            )
        )
    return report


def run_evaluate(cfg: RunConfig, variants=None, report_name: str = "evaluation", save_models: bool = False) -> dict:
    variants = list(cfg.variants if variants is None else variants)
    jobs = build_jobs(cfg, variants, save_models=save_models)
    rows = run_jobs(jobs, cfg.workers)
    report = rows_to_report(rows)
    rdir = Path(cfg.output_dir) / "reports"
    rdir.mkdir(parents=True, exist_ok=True)
    (rdir / f"{report_name}.csv").write_text(report.to_csv())
    with open(rdir / f"{report_name}.json", "w") as fh:
        json.dump(report.to_json(), fh, indent=2)
    write_manifest(Path(cfg.output_dir), cfg, "evaluate", {"variants": variants})
    out = report.to_json()
    out["csv"] = str(rdir / f"{report_name}.csv")
    out["train_reports"] = {
        f"{r['variant']}/{r['category']}/fold{r['fold']}": r["train_report"]
        for r in rows
        if r["train_report"] is not None
    }
    return out


def run_fit(cfg: RunConfig) -> dict:
    """Frozen baseline models (weights + Gaussian block) for every category."""
    out = run_evaluate(cfg, variants=["frozen"], report_name="fit", save_models=True)
    return out


def run_finetune(cfg: RunConfig) -> dict:
    out = run_evaluate(cfg, variants=["finetuned"], report_name="finetune", save_models=True)
    return out


def run_segment(cfg: RunConfig, variant: str = "frozen") -> dict:
    """Emit fused heatmaps for every test image as PNG plus raw float32."""
    cdir = corpus_dir(cfg)
    if not cdir.is_dir():
        raise ConfigurationError(f"corpus directory {cdir} missing; run gen-data first")
    corpus = data.load_mvtec_layout(str(cdir))
    train = resolve_variant(variant, cfg)
    written = {}
    for ci, name in enumerate(corpus.names()):
        cat = corpus.categories[name]
        model, _ = extractor.load_weights(str(weights_path(cfg)))
        seed = fold_seed(cfg.seed, ci, 0)
        if train is None:
            train_imgs, _ = training.split_dataset(cat.train, cfg.train.train_fraction, seed)
            scorer = gaussian.fit_gaussian(model.forward_levels(train_imgs), cfg.train.gaussian_mode)
            aggregation = cfg.train.aggregation
        else:
            config = TrainSettings.model_validate(train.model_dump()).to_train_config(seed=seed)
            model, scorer, _ = training.finetune(model, config, cat.train)
            aggregation = config.aggregation
        results = scoring.score_dataset(model, scorer, cat.test, aggregation)
        hdir = Path(cfg.output_dir) / "heatmaps" / variant / name
        hdir.mkdir(parents=True, exist_ok=True)
        paths = [hdir / f"{i:03d}.png" for i in range(len(results))]
        scoring.export_heatmap_pngs(results, paths)
        for i, r in enumerate(results):
            scoring.write_heatmap_raw(r.heatmap, hdir / f"{i:03d}.raw")
        written[name] = len(results)
    write_manifest(Path(cfg.output_dir), cfg, "segment", {"variant": variant})
    return {"variant": variant, "heatmaps": written, "dir": str(Path(cfg.output_dir) / "heatmaps" / variant)}


ABLATION_AXES = ("criterion", "augment", "gaussian")


def run_ablate(cfg: RunConfig, axis: str) -> dict:
    """Grid runs mirroring the stopping/augmentation/distribution studies."""
    if axis == "criterion":
        grid = [("vrm_auroc", {"stopping": "vrm_auroc"}), ("val_loss", {"stopping": "val_loss"}),
                ("fixed_epochs", {"stopping": "fixed_epochs"}), ("no_training", None)]
    elif axis == "augment":
        grid = [(f"augmix_sev{s}", {"augment": {"kind": "augmix", "severity": s}}) for s in (3, 4, 5, 6, 7)]
        grid += [("cutout", {"augment": {"kind": "cutout"}}), ("confetti", {"augment": {"kind": "confetti"}}),
                 ("all", {"augment": {"kind": "all"}})]
    elif axis == "gaussian":
        grid = [
            (f"{mode}_{agg}", {"gaussian_mode": mode, "aggregation": agg})
            for mode in ("global", "tied", "local")
            for agg in ("mean", "max")
        ]
    else:
        raise ConfigurationError(f"unknown ablation axis {axis!r}; known: {ABLATION_AXES}")

    jobs = []
    cdir = str(corpus_dir(cfg))
    wpath = str(weights_path(cfg))
    if not Path(cdir).is_dir() or not Path(wpath).is_file():
        raise ConfigurationError("run gen-data and pretrain before ablate")
    names = data.load_mvtec_layout(cdir).names()
    for label, overrides in grid:
        train = None
        if overrides is not None:
            payload = cfg.train.model_dump()
            for key, val in overrides.items():
                if key == "augment":
                    payload["augment"] = {**payload["augment"], **val}
                else:
                    payload[key] = val
            train = TrainSettings.model_validate(payload)
        for ci, name in enumerate(names):
            for fold in range(cfg.folds):
                jobs.append(
                    {
                        "variant": label,
                        "category": name,
                        "fold": fold,
                        "seed": fold_seed(cfg.seed, ci, fold),
                        "corpus_dir": cdir,
                        "weights": wpath,
                        "train": train.model_dump() if train is not None else None,
                        "base_train": cfg.train.model_dump(),
                    }
                )
    rows = run_jobs(jobs, cfg.workers)
    report = rows_to_report(rows)
    rdir = Path(cfg.output_dir) / "reports"
    rdir.mkdir(parents=True, exist_ok=True)
    (rdir / f"ablate_{axis}.csv").write_text(report.to_csv())
    with open(rdir / f"ablate_{axis}.json", "w") as fh:
        json.dump(report.to_json(), fh, indent=2)
    write_manifest(Path(cfg.output_dir), cfg, "ablate", {"axis": axis})
    return {**report.to_json(), "csv": str(rdir / f"ablate_{axis}.csv")}
