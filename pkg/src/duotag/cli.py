"""Command-line entry point wiring the modules into reproducible runs.

One JSON config file per run, holding a section named after the
subcommand; unknown keys are rejected and every input path is validated
before any work starts. ``--seed`` and ``--out`` override the section's
seed and output directory, so a config plus a command line is a complete,
replayable record of an experiment. No output file contains timestamps:
re-running a command with the same config yields byte-identical
artifacts.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import data as datamod
from . import inference, synth, trainer
from .metrics import evaluate
from .model import ModelConfig, Tokenizer, load_checkpoint, save_checkpoint


class ConfigError(ValueError):
    pass


def _strict(cls, doc: dict, where: str):
    """Build a dataclass from a dict, rejecting unknown keys."""
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    converted = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()}
    return cls(**converted)


def _section(config: dict, name: str, known_keys: set[str]) -> dict:
    if name not in config:
        raise ConfigError(f"config has no {name!r} section")
    section = config[name]
    unknown = set(section) - known_keys
    if unknown:
        raise ConfigError(f"{name}: unknown keys {sorted(unknown)}")
    return section


def _need_paths(*paths):
    for path in paths:
        if not Path(path).exists():
            raise ConfigError(f"input path does not exist: {path}")


def _out_dir(section: dict, args) -> Path:
    out = Path(args.out if args.out else section.get("out_dir", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed_override(section: dict, args, key: str = "seed") -> dict:
    if args.seed is not None:
        section = dict(section)
        section[key] = args.seed
    return section


def _model_config(section: dict, d_in: int, vocab_size: int) -> ModelConfig:
    doc = dict(section.get("model", {}))
    doc["d_in"] = d_in
    doc["vocab_size"] = vocab_size
    return _strict(ModelConfig, doc, "model")


def _train_config(section: dict) -> trainer.TrainConfig:
    return _strict(trainer.TrainConfig, section.get("train", {}), "train")


def _load_split_part(dataset, split_path, part: str):
    _need_paths(split_path)
    doc = json.loads(Path(split_path).read_text())
    if part not in doc:
        raise ConfigError(f"split file has no {part!r} part")
    index = {image_id: i for i, image_id in enumerate(dataset.image_ids)}
    rows = [index[image_id] for image_id in doc[part]]
    return dataset.subset(np.asarray(rows, dtype=np.intp))


def cmd_synth(config: dict, args) -> int:
    section = _seed_override(_section(config, "synth", {"out_dir", "generator"}), args)
    gen_doc = dict(section.get("generator", {}))
    if args.seed is not None:
        gen_doc["seed"] = args.seed
    gen = _strict(synth.SynthConfig, gen_doc, "generator")
    out = _out_dir(section, args)
    result = synth.synth_generate(gen)
    synth.save_synth(result, out)
    print(f"wrote dataset ({result.dataset.n_images} images, "
          f"{len(result.dataset.labels)} classes) to {out}")
    return 0


def cmd_consolidate(config: dict, args) -> int:
    section = _section(config, "consolidate",
                       {"out_dir", "labels", "annotations", "features"})
    _need_paths(section["labels"], section["annotations"], section["features"])
    labels = datamod.read_labels(section["labels"])
    records = datamod.read_annotations(section["annotations"])
    image_ids, _features = datamod.read_features(section["features"])
    truth = datamod.consolidate(records, labels, image_ids)
    truth = datamod.propagate_hierarchy(truth, labels)
    out = _out_dir(section, args)
    datamod.write_ground_truth(image_ids, truth, labels, out / "ground_truth.jsonl")
    print(f"consolidated {len(records)} records into {out / 'ground_truth.jsonl'}")
    return 0


def cmd_split(config: dict, args) -> int:
    section = _seed_override(_section(config, "split",
                                      {"out_dir", "data_dir", "ratios", "seed"}), args)
    _need_paths(section["data_dir"])
    dataset = datamod.load_dataset(section["data_dir"])
    spec = datamod.SplitSpec(ratios=tuple(section.get("ratios", (0.8, 0.1, 0.1))),
                             seed=section.get("seed", 0))
    train_idx, val_idx, test_idx = datamod.stratified_indices(
        dataset.truth, dataset.labels.class_ids, spec.ratios, spec.seed)
    out = _out_dir(section, args)
    doc = {
        "train": [dataset.image_ids[i] for i in train_idx],
        "val": [dataset.image_ids[i] for i in val_idx],
        "test": [dataset.image_ids[i] for i in test_idx],
    }
    (out / "split.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    print(f"split {dataset.n_images} images into "
          f"{len(doc['train'])}/{len(doc['val'])}/{len(doc['test'])}")
    return 0


def cmd_train(config: dict, args) -> int:
    section = _seed_override(_section(config, "train_run",
                                      {"out_dir", "data_dir", "split", "model",
                                       "train", "seed"}), args)
    _need_paths(section["data_dir"])
    dataset = datamod.load_dataset(section["data_dir"])
    train_ds = _load_split_part(dataset, section["split"], "train")
    val_ds = _load_split_part(dataset, section["split"], "val")
    data = trainer.train_data_from_datasets(train_ds, val_ds)
    tokenizer = Tokenizer.from_texts(data.prompts)
    model_config = _model_config(section, dataset.features.shape[1],
                                 tokenizer.vocab_size)
    train_config = _train_config(section)
    if "seed" in section:
        train_config = dataclasses.replace(train_config, seed=section["seed"])
    result = trainer.train(data, model_config, train_config, tokenizer=tokenizer)
    out = _out_dir(section, args)
    save_checkpoint(result.model, out / "model.json")
    trainer.write_history(result.history, out / "history.jsonl", data.class_ids)
    best = result.best_epoch
    report = result.history[best].val_metrics if best is not None else None
    print(f"trained {train_config.epochs} epochs; best epoch {best}"
          + (f" (val macro mAP {report.macro_map:.4f})" if report else ""))
    return 0


def cmd_sweep(config: dict, args) -> int:
    section = _seed_override(_section(config, "sweep",
                                      {"out_dir", "data_dir", "split", "model",
                                       "train", "grid", "seed"}), args)
    _need_paths(section["data_dir"])
    if not section.get("grid"):
        raise ConfigError("sweep: empty grid")
    dataset = datamod.load_dataset(section["data_dir"])
    train_ds = _load_split_part(dataset, section["split"], "train")
    val_ds = _load_split_part(dataset, section["split"], "val")
    data = trainer.train_data_from_datasets(train_ds, val_ds)
    tokenizer = Tokenizer.from_texts(data.prompts)
    model_config = _model_config(section, dataset.features.shape[1],
                                 tokenizer.vocab_size)
    train_config = _train_config(section)
    if "seed" in section:
        train_config = dataclasses.replace(train_config, seed=section["seed"])
    cells = trainer.temperature_sweep(section["grid"], data, model_config,
                                      train_config)
    out = _out_dir(section, args)
    trainer.write_sweep_csv(cells, out / "sweep.csv")
    for cell in cells:
        status = f"macro mAP {cell.macro_map:.4f}" if cell.error is None \
            else f"error: {cell.error}"
        print(f"logit_scale_init {cell.logit_scale_init:6.3f}: {status}")
    return 0


def cmd_eval(config: dict, args) -> int:
    section = _section(config, "eval",
                       {"out_dir", "data_dir", "split", "part", "checkpoint", "ks"})
    _need_paths(section["data_dir"], section["checkpoint"])
    dataset = datamod.load_dataset(section["data_dir"])
    part = section.get("part", "test")
    subset = _load_split_part(dataset, section["split"], part) \
        if "split" in section else dataset
    model = load_checkpoint(section["checkpoint"])
    prompts = datamod.label_prompts(dataset.labels)
    probs = inference.predict(model, subset.features, prompts)
    n_classes = len(dataset.labels)
    ks = tuple(section.get("ks", [min(10, n_classes)]))
    report = evaluate(probs, subset.truth, ks=ks)
    out = _out_dir(section, args)
    report.write_json(out / "metrics.json", dataset.labels.class_ids)
    print(json.dumps(report.to_dict(dataset.labels.class_ids), sort_keys=True,
                     indent=1))
    return 0


def cmd_predict(config: dict, args) -> int:
    section = _section(config, "predict",
                       {"out_dir", "checkpoint", "features", "labels",
                        "thresholds", "histogram"})
    _need_paths(section["checkpoint"], section["features"], section["labels"])
    model = load_checkpoint(section["checkpoint"])
    labels = datamod.read_labels(section["labels"])
    image_ids, features = datamod.read_features(section["features"])
    prompts = datamod.label_prompts(labels)
    probs = inference.predict(model, features, prompts)
    thresholds = None
    if "thresholds" in section:
        _need_paths(section["thresholds"])
        thresholds = inference.read_threshold_csv(section["thresholds"])
    out = _out_dir(section, args)
    inference.write_predictions(image_ids, probs, labels.class_ids,
                                out / "predictions.jsonl", thresholds)
    if section.get("histogram"):
        inference.export_logit_histogram(model, features, prompts,
                                         out / "logit_histogram.json")
    print(f"scored {len(image_ids)} images x {len(labels)} classes")
    return 0


def cmd_zeroshot(config: dict, args) -> int:
    section = _section(config, "zeroshot",
                       {"out_dir", "checkpoint", "features", "prompts"})
    _need_paths(section["checkpoint"], section["features"])
    prompts = section.get("prompts", [])
    if not prompts:
        raise ConfigError("zeroshot: no prompts given")
    model = load_checkpoint(section["checkpoint"])
    image_ids, features = datamod.read_features(section["features"])
    probs = inference.zero_shot(model, features, prompts)
    out = _out_dir(section, args)
    inference.write_predictions(image_ids, probs,
                                [f"zs{i:02d}" for i in range(len(prompts))],
                                out / "predictions.jsonl")
    print(f"zero-shot scored {len(image_ids)} images on {len(prompts)} prompts")
    return 0


def cmd_thresholds(config: dict, args) -> int:
    section = _section(config, "thresholds",
                       {"out_dir", "data_dir", "split", "part", "checkpoint",
                        "target_recall"})
    _need_paths(section["data_dir"], section["checkpoint"])
    dataset = datamod.load_dataset(section["data_dir"])
    part = section.get("part", "val")
    subset = _load_split_part(dataset, section["split"], part) \
        if "split" in section else dataset
    model = load_checkpoint(section["checkpoint"])
    prompts = datamod.label_prompts(dataset.labels)
    probs = inference.predict(model, subset.features, prompts)
    table = inference.select_thresholds(probs, subset.truth,
                                        float(section.get("target_recall", 0.99)),
                                        dataset.labels.class_ids)
    out = _out_dir(section, args)
    table.write_csv(out / "thresholds.csv")
    print(f"overall drop fraction {table.overall_drop_fraction:.4f} "
          f"at target recall {section.get('target_recall', 0.99)}")
    return 0


def cmd_export_embeddings(config: dict, args) -> int:
    section = _section(config, "export_embeddings",
                       {"out_dir", "checkpoint", "features"})
    _need_paths(section["checkpoint"], section["features"])
    model = load_checkpoint(section["checkpoint"])
    image_ids, features = datamod.read_features(section["features"])
    out = _out_dir(section, args)
    inference.export_embeddings(model, features, image_ids,
                                out / "embeddings.csv")
    print(f"exported {len(image_ids)} embeddings")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "consolidate": cmd_consolidate,
    "split": cmd_split,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "zeroshot": cmd_zeroshot,
    "thresholds": cmd_thresholds,
    "export-embeddings": cmd_export_embeddings,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="duotag",
        description="dual-encoder multi-label tagging experiments")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="JSON run config")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the command's seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    args = parser.parse_args(argv)

    try:
        config_path = Path(args.config)
        if not config_path.exists():
            raise ConfigError(f"config file not found: {config_path}")
        config = json.loads(config_path.read_text())
        return _COMMANDS[args.command](config, args)
    except (ConfigError, ValueError, KeyError, OSError,
            trainer.TrainingDiverged, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
