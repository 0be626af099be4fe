"""Operator entry points: one executable with config-driven subcommands.

Every subcommand reads the same config format, validates it completely
before doing any work, derives all randomness from the single configured
seed, and writes a provenance record next to its outputs. Exit codes: 0 on
success, 1 on validation errors, 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import evaluation, training
from .checkpoint import load_checkpoint, restore_module
from .conditioning import ConditioningAugmenter, EmbeddingCompressor
from .config import HarnessConfig, load_config
from .data import (
    assert_disjoint_splits,
    load_dataset,
    make_synthetic_dataset,
    save_dataset,
)
from .networks import InvalidConfigError, build_generator
from .progressive import format_schedule, schedule_table
from .training import CA_FAMILIES, write_provenance

SUBCOMMANDS = (
    "make-synthetic",
    "train",
    "evaluate",
    "sample",
    "interpolate",
    "nn",
    "inspect-schedule",
)


def _parse_args(argv):
    parser = argparse.ArgumentParser(
        prog="condgan",
        description="Conditional adversarial training and evaluation harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="path to the experiment config file")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="SECTION.KEY=VALUE",
            help="override a config entry (repeatable)",
        )
        p.add_argument("--seed", type=int, default=None, help="override the seed")
        p.add_argument("--out", default=None, help="override the output directory")
    return parser.parse_args(argv)


def _load_sampler(cfg: HarnessConfig, checkpoint_path):
    """Rebuild a generate-from-raw-embeddings function from a checkpoint."""
    if not checkpoint_path:
        raise InvalidConfigError("this subcommand requires a checkpoint path")
    arrays, meta = load_checkpoint(checkpoint_path)
    arch = meta["architecture"]
    generator = build_generator(arch)
    restore_module(generator, arrays, "generator")
    if arch.family in CA_FAMILIES:
        conditioner = ConditioningAugmenter(arch.embedding_dim, arch.compressed_embed_dim)
    else:
        conditioner = EmbeddingCompressor(arch.embedding_dim, arch.compressed_embed_dim)
    restore_module(conditioner, arrays, "conditioner")
    generator.eval()
    conditioner.eval()

    stage1 = stage1_conditioner = None
    if arch.family == "stackgan-stage2":
        s1_path = cfg.experiment.stage1_checkpoint
        if not s1_path:
            raise InvalidConfigError("stackgan-stage2 sampling needs stackgan.stage1_checkpoint")
        s1_arrays, s1_meta = load_checkpoint(s1_path)
        s1_arch = s1_meta["architecture"]
        stage1 = build_generator(s1_arch)
        restore_module(stage1, s1_arrays, "generator")
        stage1_conditioner = ConditioningAugmenter(
            s1_arch.embedding_dim, s1_arch.compressed_embed_dim
        )
        restore_module(stage1_conditioner, s1_arrays, "conditioner")
        stage1.eval()
        stage1_conditioner.eval()

    noise_dim = arch.noise_dim

    def generate(noise, raw_embeddings, sample=False):
        with torch.no_grad():
            cond = evaluation.condition_for_eval(
                conditioner, raw_embeddings, sample=sample
            )
            if arch.family == "stackgan-stage2":
                low_cond = evaluation.condition_for_eval(
                    stage1_conditioner, raw_embeddings, sample=sample
                )
                low = stage1(noise, low_cond)
                return generator(low, cond)
            return generator(noise, cond)

    generate.noise_dim = noise_dim
    generate.conditioner = conditioner
    generate.generator = generator
    return generate


def _draw_embeddings(dataset, n, rng):
    raw = np.empty((n, dataset.embedding_dim), dtype=np.float32)
    class_ids = np.empty(n, dtype=np.int64)
    caption_ids = np.empty(n, dtype=np.int64)
    for i in range(n):
        im = dataset[int(rng.integers(len(dataset)))]
        j = int(rng.integers(len(im.embeddings)))
        raw[i] = im.embeddings[j]
        class_ids[i] = im.class_id
        caption_ids[i] = j
    return raw, class_ids, caption_ids


def _cmd_make_synthetic(cfg: HarnessConfig) -> int:
    synth = cfg.tools["synthetic"]
    seed = cfg.experiment.seed
    out = Path(cfg.experiment.out_dir) / "data"
    train = make_synthetic_dataset(
        synth["num_classes"],
        synth["images_per_class"],
        synth["image_size"],
        synth["embedding_dim"],
        seed,
        captions_per_image=synth["captions_per_image"],
        split="train",
    )
    test = make_synthetic_dataset(
        synth["test_num_classes"],
        synth["test_images_per_class"],
        synth["image_size"],
        synth["embedding_dim"],
        seed,
        captions_per_image=synth["captions_per_image"],
        class_id_offset=synth["num_classes"],
        split="test",
    )
    assert_disjoint_splits(train.manifest, test.manifest)
    train_manifest = save_dataset(train, out / "train")
    test_manifest = save_dataset(test, out / "test")
    write_provenance(out, cfg.experiment, _prov_extra(cfg, "make-synthetic"))
    print(train_manifest)
    print(test_manifest)
    return 0


def _prov_extra(cfg: HarnessConfig, subcommand: str) -> dict:
    return {
        "subcommand": subcommand,
        "config_path": str(cfg.config_path),
        "overrides": list(cfg.overrides),
    }


def _cmd_train(cfg: HarnessConfig) -> int:
    result = training.train(cfg.experiment, provenance_extra=_prov_extra(cfg, "train"))
    print(result.run_dir)
    print(result.metrics_path)
    return 0


def _cmd_inspect_schedule(cfg: HarnessConfig) -> int:
    exp = cfg.experiment
    if exp.family != "cpggan":
        raise InvalidConfigError("inspect-schedule applies to the cpggan family")
    rows = schedule_table(
        exp.architecture.num_stages,
        exp.images_per_phase,
        base_resolution=exp.architecture.base_resolution,
        batch_low=exp.batch_size,
        batch_high=exp.progressive_batch_high or 8,
    )
    sys.stdout.write(format_schedule(rows))
    return 0


def _eval_dataset(cfg: HarnessConfig):
    manifest = cfg.experiment.manifest
    if not manifest:
        raise InvalidConfigError("data.manifest is required for this subcommand")
    return load_dataset(manifest)


def _cmd_evaluate(cfg: HarnessConfig) -> int:
    tool = cfg.tools["evaluate"]
    exp = cfg.experiment
    rng = np.random.default_rng(exp.seed)
    torch.manual_seed(exp.seed)
    dataset = _eval_dataset(cfg)
    sampler = _load_sampler(cfg, tool["checkpoint"])
    classifier = evaluation.train_eval_classifier(
        dataset, epochs=tool["classifier_epochs"], seed=exp.seed
    )

    n = tool["n_samples"]
    raw, _, _ = _draw_embeddings(dataset, n, rng)
    chunks = []
    for start in range(0, n, 64):
        stop = min(start + 64, n)
        noise = torch.as_tensor(
            rng.standard_normal((stop - start, sampler.noise_dim)).astype(np.float32)
        )
        chunks.append(
            sampler(noise, torch.as_tensor(raw[start:stop]),
                    sample=tool["sample_conditioning"])
        )
    images = torch.cat(chunks)
    probs = classifier.predict_proba(images)
    report = evaluation.inception_score(probs, n_splits=tool["n_splits"], rng=rng)
    report = replace(
        report, classifier_accuracy=classifier.accuracy, reliable=classifier.reliable
    )
    out = Path(exp.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = evaluation.format_score_report(report)
    (out / "evaluation_report.txt").write_text(text)
    write_provenance(out, exp, _prov_extra(cfg, "evaluate"))
    sys.stdout.write(text)
    return 0


def _cmd_sample(cfg: HarnessConfig) -> int:
    tool = cfg.tools["sample"]
    exp = cfg.experiment
    rng = np.random.default_rng(exp.seed)
    torch.manual_seed(exp.seed)
    dataset = _eval_dataset(cfg)
    sampler = _load_sampler(cfg, tool["checkpoint"])
    n = tool["n_images"]
    raw, class_ids, caption_ids = _draw_embeddings(dataset, n, rng)
    noise = torch.as_tensor(
        rng.standard_normal((n, sampler.noise_dim)).astype(np.float32)
    )
    images = sampler(noise, torch.as_tensor(raw))
    out = Path(exp.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metadata = [
        f"image_{i:03d}: class={class_ids[i]} caption={caption_ids[i]}"
        for i in range(n)
    ]
    evaluation.save_image_mosaic(
        images, out / "samples.png", tool["columns"], metadata
    )
    write_provenance(out, exp, _prov_extra(cfg, "sample"))
    print(out / "samples.png")
    return 0


def _cmd_interpolate(cfg: HarnessConfig) -> int:
    tool = cfg.tools["interpolate"]
    exp = cfg.experiment
    rng = np.random.default_rng(exp.seed)
    torch.manual_seed(exp.seed)
    dataset = _eval_dataset(cfg)
    sampler = _load_sampler(cfg, tool["checkpoint"])
    steps = tool["steps"]
    pairs = tool["pairs"]
    rows = []
    metadata = []
    if steps < 2:
        raise InvalidConfigError("interpolate.steps must be >= 2")
    for p in range(pairs):
        raw, class_ids, _ = _draw_embeddings(dataset, 2, rng)
        z = torch.as_tensor(
            rng.standard_normal((1, sampler.noise_dim)).astype(np.float32)
        )
        e1, e2 = torch.as_tensor(raw[0]), torch.as_tensor(raw[1])
        for i in range(steps):
            t = i / (steps - 1)
            swept = sampler(z, ((1.0 - t) * e1 + t * e2)[None, :])
            rows.append(swept)
        metadata.append(
            f"pair_{p:02d}: class_left={class_ids[0]} class_right={class_ids[1]}"
        )
    images = torch.cat(rows)
    out = Path(exp.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    evaluation.save_image_mosaic(images, out / "interpolations.png", steps, metadata)
    write_provenance(out, exp, _prov_extra(cfg, "interpolate"))
    print(out / "interpolations.png")
    return 0


def _cmd_nn(cfg: HarnessConfig) -> int:
    tool = cfg.tools["nn"]
    exp = cfg.experiment
    rng = np.random.default_rng(exp.seed)
    torch.manual_seed(exp.seed)
    dataset = _eval_dataset(cfg)
    sampler = _load_sampler(cfg, tool["checkpoint"])
    n = tool["n_samples"]
    raw, _, _ = _draw_embeddings(dataset, n, rng)
    noise = torch.as_tensor(
        rng.standard_normal((n, sampler.noise_dim)).astype(np.float32)
    )
    samples = sampler(noise, torch.as_tensor(raw)).numpy()
    train_images = np.stack([im.pixels for im in dataset])
    if train_images.shape[1] != samples.shape[1]:
        raise InvalidConfigError(
            "checkpoint resolution does not match the dataset images"
        )
    result = evaluation.nearest_neighbor_analysis(samples, train_images)
    mosaic = np.concatenate([samples, train_images[result.indices]])
    metadata = [
        f"sample_{i:03d}: neighbor={result.indices[i]} "
        f"distance={result.distances[i]:.6g}"
        for i in range(n)
    ]
    out = Path(exp.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    evaluation.save_image_mosaic(mosaic, out / "nearest_neighbors.png", n, metadata)
    write_provenance(out, exp, _prov_extra(cfg, "nn"))
    print(out / "nearest_neighbors.png")
    return 0


_DISPATCH = {
    "make-synthetic": _cmd_make_synthetic,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "sample": _cmd_sample,
    "interpolate": _cmd_interpolate,
    "nn": _cmd_nn,
    "inspect-schedule": _cmd_inspect_schedule,
}


def run(command: str, config_path, overrides=(), seed=None, out_dir=None) -> int:
    """Programmatic entry point mirroring the command line."""
    try:
        cfg = load_config(config_path, overrides, seed=seed, out_dir=out_dir)
    except InvalidConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        return _DISPATCH[command](cfg)
    except InvalidConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main(argv=None) -> int:
    args = _parse_args(argv)
    return run(
        args.command, args.config, tuple(args.overrides), args.seed, args.out
    )


if __name__ == "__main__":
    sys.exit(main())
