"""Training loops for all model families: alternating critic/generator
updates with optional multi-step critic schedules, two time-scale learning
rates, progressive growing, checkpointing, and a line-per-step metrics log.

One training thread owns all parameters; evaluation callbacks receive
read-only snapshots. Runs are fully reproducible given the config seed.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import load_checkpoint, restore_module, save_checkpoint
from .conditioning import (
    KL_DIRECTIONS,
    KL_STANDARD_TO_MODEL,
    ConditioningAugmenter,
    EmbeddingCompressor,
    ca_kl_regularizer,
)
from .data import CaptionDataset, MatchingBatch, load_dataset, sample_batch
from .losses import (
    CriticOutputs,
    PenaltyInputs,
    critic_gradient_norms,
    gan_cls_discriminator_loss,
    gan_generator_loss_nonsaturating,
    gradient_penalty_gp,
    interpolate_real_fake,
    lipschitz_penalty_lp,
    lsgan_losses,
    wgan_cls_critic_loss,
    wgan_cls_generator_loss,
)
from .networks import (
    ArchitectureConfig,
    InvalidConfigError,
    build_discriminator,
    build_generator,
)
from .progressive import (
    PHASE_STABILIZATION,
    GrowthState,
    advance,
    downscale_average,
    fade_alpha,
)

FAMILY_LOSSES = {
    "gan-cls": ("gan-cls",),
    "stackgan-stage1": ("gan-cls",),
    "stackgan-stage2": ("gan-cls",),
    "wgan-cls": ("wgan-cls",),
    "cpggan": ("wgan-cls", "lsgan"),
}
# Families whose generator conditions on an augmented (sampled) embedding.
CA_FAMILIES = ("stackgan-stage1", "stackgan-stage2", "wgan-cls", "cpggan")

METRIC_COLUMNS = (
    "step",
    "wall_time",
    "stage",
    "phase",
    "alpha",
    "resolution",
    "batch_size",
    "critic_loss",
    "generator_loss",
    "penalty",
    "kl_term",
    "d_real_matched",
    "d_fake",
    "d_real_mismatched",
    "wasserstein_estimate",
    "matching_gap",
    "grad_norm_x",
    "grad_norm_e",
    "lr_generator",
    "lr_critic",
)


class TrainingDivergedError(RuntimeError):
    """A loss component became non-finite."""

    def __init__(self, component: str, step: int):
        super().__init__(f"non-finite {component} at step {step}")
        self.component = component
        self.step = step


@dataclass(frozen=True)
class OptimizerConfig:
    """Adam settings; generator and critic rates may differ (two time-scale
    update rule)."""

    learning_rate_generator: float = 0.0001
    learning_rate_critic: float = 0.0003
    beta1: float = 0.0
    beta2: float = 0.99

    def __post_init__(self):
        if self.learning_rate_generator < 0 or self.learning_rate_critic < 0:
            raise InvalidConfigError("learning rates must be nonnegative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidConfigError("betas must lie in [0, 1)")


@dataclass(frozen=True)
class LossConfig:
    name: str = "wgan-cls"
    alpha_match: float = 1.0
    lambda_lp: float = 150.0
    lambda_gp: float = 10.0
    penalty: str = "lp"
    rho_kl: float = 10.0
    kl_direction: str = KL_STANDARD_TO_MODEL
    ls_label_fake: float = -1.0
    ls_label_real: float = 1.0
    ls_label_generator: float = 0.0

    def __post_init__(self):
        if self.name not in ("gan-cls", "wgan-cls", "lsgan"):
            raise InvalidConfigError(f"unknown loss {self.name!r}")
        if self.penalty not in ("lp", "gp"):
            raise InvalidConfigError("penalty must be 'lp' or 'gp'")
        if min(self.alpha_match, self.lambda_lp, self.lambda_gp, self.rho_kl) < 0:
            raise InvalidConfigError("loss weights must be nonnegative")
        if self.kl_direction not in KL_DIRECTIONS:
            raise InvalidConfigError(f"unknown kl_direction {self.kl_direction!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one training run."""

    family: str
    architecture: ArchitectureConfig
    loss: LossConfig = LossConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    n_critic: int = 1
    batch_size: int = 64
    total_steps: int | None = None
    epochs: int | None = None
    lr_halving_period: int | None = None
    seed: int = 0
    manifest: str | None = None
    out_dir: str = "runs/experiment"
    images_per_phase: int = 20_000
    progressive_batch_high: int | None = None
    stage1_checkpoint: str | None = None
    checkpoint_every: int = 500
    log_every: int = 1

    def __post_init__(self):
        problems = []
        if self.family not in FAMILY_LOSSES:
            problems.append(f"unknown family {self.family!r}")
        elif self.loss.name not in FAMILY_LOSSES[self.family]:
            allowed = ", ".join(FAMILY_LOSSES[self.family])
            problems.append(
                f"family {self.family!r} requires one of the losses [{allowed}], "
                f"got {self.loss.name!r}"
            )
        if self.family != self.architecture.family:
            problems.append(
                f"architecture family {self.architecture.family!r} disagrees with "
                f"experiment family {self.family!r}"
            )
        if self.n_critic < 1:
            problems.append("n_critic must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.total_steps is None and self.epochs is None:
            problems.append("either total_steps or epochs must be set")
        if self.family == "stackgan-stage2" and not self.stage1_checkpoint:
            problems.append("stackgan-stage2 requires stage1_checkpoint")
        if self.images_per_phase <= 0:
            problems.append("images_per_phase must be positive")
        if problems:
            raise InvalidConfigError("; ".join(problems))


def family_defaults(family: str) -> dict:
    """Published hyperparameters per family, mirrored by the config parser."""
    if family == "gan-cls":
        return {
            "loss": LossConfig(name="gan-cls"),
            "optimizer": OptimizerConfig(0.0002, 0.0002, 0.5, 0.9),
            "n_critic": 1,
            "batch_size": 64,
            "epochs": 600,
        }
    if family in ("stackgan-stage1", "stackgan-stage2"):
        return {
            "loss": LossConfig(name="gan-cls", rho_kl=10.0),
            "optimizer": OptimizerConfig(0.0002, 0.0002, 0.5, 0.9),
            "n_critic": 1,
            "batch_size": 64 if family == "stackgan-stage1" else 32,
            "epochs": 600,
        }
    if family == "wgan-cls":
        return {
            "loss": LossConfig(name="wgan-cls", alpha_match=1.0, lambda_lp=150.0,
                               rho_kl=10.0),
            "optimizer": OptimizerConfig(0.0001, 0.0003, 0.0, 0.99),
            "n_critic": 1,
            "batch_size": 64,
            "total_steps": 120_000,
        }
    if family == "cpggan":
        return {
            "loss": LossConfig(name="wgan-cls", alpha_match=1.0, lambda_lp=150.0,
                               rho_kl=8.0),
            "optimizer": OptimizerConfig(0.0001, 0.0001, 0.0, 0.99),
            "n_critic": 1,
            "batch_size": 16,
            "images_per_phase": 600_000,
        }
    raise InvalidConfigError(f"unknown family {family!r}")


@dataclass
class ModelBundle:
    """All trainable pieces of one experiment plus their optimizers."""

    generator: torch.nn.Module
    critic: torch.nn.Module
    conditioner: torch.nn.Module
    optimizer_generator: torch.optim.Optimizer
    optimizer_critic: torch.optim.Optimizer
    stage1_generator: torch.nn.Module | None = None
    stage1_conditioner: torch.nn.Module | None = None


def build_models(cfg: ExperimentConfig) -> ModelBundle:
    arch = cfg.architecture
    generator = build_generator(arch)
    critic = build_discriminator(arch, cfg.loss.name)
    if cfg.family in CA_FAMILIES:
        conditioner = ConditioningAugmenter(arch.embedding_dim, arch.compressed_embed_dim)
    else:
        conditioner = EmbeddingCompressor(arch.embedding_dim, arch.compressed_embed_dim)

    stage1_generator = stage1_conditioner = None
    if cfg.family == "stackgan-stage2":
        arrays, meta = load_checkpoint(cfg.stage1_checkpoint)
        stage1_arch = meta["architecture"]
        stage1_generator = build_generator(stage1_arch)
        restore_module(stage1_generator, arrays, "generator")
        stage1_conditioner = ConditioningAugmenter(
            stage1_arch.embedding_dim, stage1_arch.compressed_embed_dim
        )
        restore_module(stage1_conditioner, arrays, "conditioner")
        for module in (stage1_generator, stage1_conditioner):
            module.eval()
            for p in module.parameters():
                p.requires_grad_(False)

    opt = cfg.optimizer
    optimizer_generator = torch.optim.Adam(
        list(generator.parameters()) + list(conditioner.parameters()),
        lr=opt.learning_rate_generator,
        betas=(opt.beta1, opt.beta2),
    )
    optimizer_critic = torch.optim.Adam(
        critic.parameters(), lr=opt.learning_rate_critic, betas=(opt.beta1, opt.beta2)
    )
    return ModelBundle(
        generator=generator,
        critic=critic,
        conditioner=conditioner,
        optimizer_generator=optimizer_generator,
        optimizer_critic=optimizer_critic,
        stage1_generator=stage1_generator,
        stage1_conditioner=stage1_conditioner,
    )


def _condition_sample(models: ModelBundle, cfg: ExperimentConfig, raw: torch.Tensor):
    """Generator-side conditioning vector plus the KL term it incurs."""
    if cfg.family in CA_FAMILIES:
        augmented = models.conditioner(raw)
        kl = ca_kl_regularizer(
            augmented.mu, augmented.sigma, direction=cfg.loss.kl_direction
        )
        return augmented.sample, kl
    return models.conditioner(raw), torch.zeros(())


def _generate_stage2(models: ModelBundle, noise, raw_embedding, conditioning):
    """Stage-2 image: frozen stage-1 generator output refined by stage 2."""
    with torch.no_grad():
        low_cond = models.stage1_conditioner(raw_embedding).sample
        low_res = models.stage1_generator(noise, low_cond)
    return models.generator(low_res, conditioning)


def _fake_images(models, cfg, noise, raw_embedding, conditioning, stage, alpha):
    if cfg.family == "stackgan-stage2":
        return _generate_stage2(models, noise, raw_embedding, conditioning)
    if cfg.family == "cpggan":
        return models.generator(noise, conditioning, stage=stage, alpha=alpha)
    return models.generator(noise, conditioning)


def _critic_scores(models, cfg, images, compressed, stage, alpha):
    if cfg.family == "cpggan":
        return models.critic(images, compressed, stage=stage, alpha=alpha)
    return models.critic(images, compressed)


def _check_finite(value: torch.Tensor, component: str, step: int):
    if not torch.isfinite(value).all():
        raise TrainingDivergedError(component, step)
    return value


# float32 sigmoids saturate to exact 0/1 around |logit| > 17; the probability
# losses reject those, so the training path nudges scores inward the same way
# logit-space binary cross entropies do.
_PROB_EPS = 1e-7


def _clamp_probabilities(outputs: CriticOutputs) -> CriticOutputs:
    return CriticOutputs(
        on_real_matched=outputs.on_real_matched.clamp(_PROB_EPS, 1 - _PROB_EPS),
        on_fake=outputs.on_fake.clamp(_PROB_EPS, 1 - _PROB_EPS),
        on_real_mismatched=outputs.on_real_mismatched.clamp(
            _PROB_EPS, 1 - _PROB_EPS
        ),
    )


def train_step(
    models: ModelBundle,
    batch: MatchingBatch,
    cfg: ExperimentConfig,
    growth: GrowthState | None = None,
    step: int = 0,
) -> dict:
    """Run n_critic critic updates followed by one generator update.

    Returns every loss component, gradient-norm statistics and the matching
    gap mean(D on matched) - mean(D on mismatched). Raises
    TrainingDivergedError before applying an update whose loss is non-finite.
    """
    stage = growth.stage if growth else None
    alpha = fade_alpha(growth) if growth else 1.0

    images = torch.as_tensor(batch.images)
    matched_raw = torch.as_tensor(batch.matched_embeddings)
    mismatched_raw = torch.as_tensor(batch.mismatched_embeddings)
    noise = torch.as_tensor(batch.noise)

    loss_cfg = cfg.loss
    metrics: dict = {}
    penalty_value = torch.zeros(())
    norms_x_mean = norms_e_mean = 0.0

    for _ in range(cfg.n_critic):
        models.optimizer_critic.zero_grad(set_to_none=True)
        with torch.no_grad():
            cond, _ = _condition_sample(models, cfg, matched_raw)
            fake = _fake_images(
                models, cfg, noise, matched_raw, cond, stage, alpha
            )
        e_mat = models.critic.compress(matched_raw)
        e_mis = models.critic.compress(mismatched_raw)
        outputs = CriticOutputs(
            on_real_matched=_critic_scores(models, cfg, images, e_mat, stage, alpha),
            on_fake=_critic_scores(models, cfg, fake, e_mat, stage, alpha),
            on_real_mismatched=_critic_scores(
                models, cfg, images, e_mis, stage, alpha
            ),
        )
        if loss_cfg.name == "gan-cls":
            critic_loss = gan_cls_discriminator_loss(_clamp_probabilities(outputs))
        elif loss_cfg.name == "lsgan":
            critic_loss, _ = lsgan_losses(
                outputs,
                loss_cfg.ls_label_fake,
                loss_cfg.ls_label_real,
                loss_cfg.ls_label_generator,
                conditional=True,
            )
        else:
            t = torch.rand(images.shape[0])
            interpolated = interpolate_real_fake(images, fake, t)
            norms_x, norms_e = critic_gradient_norms(
                lambda xi, ei: _critic_scores(models, cfg, xi, ei, stage, alpha),
                interpolated,
                e_mat.detach(),
            )
            penalty_inputs = PenaltyInputs(
                interpolated_points=interpolated,
                embeddings=e_mat.detach(),
                gradient_norms_x=norms_x,
                gradient_norms_e=norms_e,
            )
            if loss_cfg.penalty == "lp":
                penalty_value = lipschitz_penalty_lp(
                    penalty_inputs.gradient_norms_x, penalty_inputs.gradient_norms_e
                )
                lam = loss_cfg.lambda_lp
            else:
                penalty_value = gradient_penalty_gp(penalty_inputs.gradient_norms_x)
                lam = loss_cfg.lambda_gp
            norms_x_mean = float(norms_x.detach().mean())
            norms_e_mean = float(norms_e.detach().mean())
            critic_loss = wgan_cls_critic_loss(
                outputs, loss_cfg.alpha_match, lam, penalty_value
            )
        _check_finite(critic_loss, "critic_loss", step)
        critic_loss.backward()
        models.optimizer_critic.step()

    d_mat = float(outputs.on_real_matched.detach().mean())
    d_fake = float(outputs.on_fake.detach().mean())
    d_mis = float(outputs.on_real_mismatched.detach().mean())

    models.optimizer_generator.zero_grad(set_to_none=True)
    models.optimizer_critic.zero_grad(set_to_none=True)
    cond, kl_term = _condition_sample(models, cfg, matched_raw)
    fake = _fake_images(models, cfg, noise, matched_raw, cond, stage, alpha)
    gen_scores = _critic_scores(
        models, cfg, fake, models.critic.compress(matched_raw), stage, alpha
    )
    if loss_cfg.name == "gan-cls":
        generator_loss = (
            gan_generator_loss_nonsaturating(
                gen_scores.clamp(_PROB_EPS, 1 - _PROB_EPS)
            )
            + loss_cfg.rho_kl * kl_term
        )
    elif loss_cfg.name == "lsgan":
        outputs_g = CriticOutputs(gen_scores, gen_scores, gen_scores)
        _, ls_gen = lsgan_losses(
            outputs_g,
            loss_cfg.ls_label_fake,
            loss_cfg.ls_label_real,
            loss_cfg.ls_label_generator,
            conditional=True,
        )
        generator_loss = ls_gen + loss_cfg.rho_kl * kl_term
    else:
        generator_loss = wgan_cls_generator_loss(gen_scores, kl_term, loss_cfg.rho_kl)
    _check_finite(generator_loss, "generator_loss", step)
    generator_loss.backward()
    models.optimizer_generator.step()
    models.optimizer_critic.zero_grad(set_to_none=True)

    resolution = (
        cfg.architecture.stage_resolution(stage)
        if growth
        else cfg.architecture.max_resolution
    )
    metrics.update(
        step=step,
        stage=growth.stage if growth else 1,
        phase=growth.phase if growth else PHASE_STABILIZATION,
        alpha=alpha,
        resolution=resolution,
        batch_size=images.shape[0],
        critic_loss=float(critic_loss.detach()),
        generator_loss=float(generator_loss.detach()),
        penalty=float(penalty_value.detach()),
        kl_term=float(kl_term.detach()),
        d_real_matched=d_mat,
        d_fake=d_fake,
        d_real_mismatched=d_mis,
        wasserstein_estimate=d_mat - d_fake,
        matching_gap=d_mat - d_mis,
        grad_norm_x=norms_x_mean,
        grad_norm_e=norms_e_mean,
        lr_generator=models.optimizer_generator.param_groups[0]["lr"],
        lr_critic=models.optimizer_critic.param_groups[0]["lr"],
    )
    return metrics


def format_metric_line(metrics: dict) -> str:
    parts = []
    for key in METRIC_COLUMNS:
        value = metrics[key]
        if isinstance(value, float):
            parts.append(f"{key}={value:.9g}")
        else:
            parts.append(f"{key}={value}")
    return " ".join(parts)


def strip_wall_time(text: str) -> str:
    """Metrics text with the wall_time field removed, for determinism
    comparisons (wall time is the one legitimately run-dependent field)."""
    lines = []
    for line in text.splitlines():
        lines.append(
            " ".join(p for p in line.split(" ") if not p.startswith("wall_time="))
        )
    return "\n".join(lines) + ("\n" if text.endswith("\n") else "")


@dataclass
class TrainResult:
    run_dir: Path
    metrics_path: Path
    checkpoint_paths: list
    models: ModelBundle
    history: list


class BatchPipeline:
    """Dataset-to-batch stage of a run; rebuilt whenever the progressive
    schedule changes resolution so sampled images always match the stage."""

    def __init__(self, dataset: CaptionDataset, cfg: ExperimentConfig,
                 target_resolution: int, rng):
        if dataset.image_size < target_resolution:
            raise InvalidConfigError(
                f"dataset images ({dataset.image_size}) are smaller than the "
                f"target resolution ({target_resolution})"
            )
        factor = dataset.image_size // target_resolution
        if factor * target_resolution != dataset.image_size or (
            factor & (factor - 1)
        ):
            raise InvalidConfigError(
                "dataset size must be a power-of-two multiple of the resolution"
            )
        self.dataset = dataset
        self.cfg = cfg
        self.target_resolution = target_resolution
        self.factor = factor
        self.rng = rng

    def next_batch(self, batch_size: int) -> MatchingBatch:
        batch = sample_batch(
            self.dataset, batch_size, self.cfg.architecture.noise_dim, self.rng
        )
        if self.factor == 1:
            return batch
        images = downscale_average(
            torch.as_tensor(batch.images), self.factor
        ).numpy()
        return MatchingBatch(
            images=images,
            matched_embeddings=batch.matched_embeddings,
            mismatched_embeddings=batch.mismatched_embeddings,
            noise=batch.noise,
            class_ids=batch.class_ids,
        )


def resolve_total_steps(cfg: ExperimentConfig, dataset_size: int) -> int:
    if cfg.total_steps is not None:
        return cfg.total_steps
    steps_per_epoch = max(1, math.ceil(dataset_size / cfg.batch_size))
    return cfg.epochs * steps_per_epoch


def write_provenance(run_dir: Path, cfg: ExperimentConfig, extra=None) -> Path:
    record = {
        "config": dataclasses.asdict(cfg),
        "seed": cfg.seed,
        "code_version": __version__,
    }
    if extra:
        record.update(extra)
    path = run_dir / "provenance.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")
    return path


def train(
    cfg: ExperimentConfig,
    dataset: CaptionDataset | None = None,
    provenance_extra: dict | None = None,
) -> TrainResult:
    """Run the configured schedule end to end.

    Writes a metrics log (one structured line per step), periodic checkpoints
    (every ``checkpoint_every`` steps, at progressive phase boundaries, and at
    the end), and a provenance record. Aborts with TrainingDivergedError when
    losses stay non-finite for three consecutive steps.
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if dataset is None:
        if cfg.manifest is None:
            raise InvalidConfigError("no dataset given and no manifest configured")
        dataset = load_dataset(cfg.manifest)

    run_dir = Path(cfg.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_provenance(run_dir, cfg, provenance_extra)
    metrics_path = run_dir / "metrics.log"
    checkpoint_dir = run_dir / "checkpoints"

    models = build_models(cfg)
    total_steps = resolve_total_steps(cfg, len(dataset))

    progressive_run = cfg.family == "cpggan"
    growth = (
        GrowthState(images_per_phase=cfg.images_per_phase) if progressive_run else None
    )
    max_stage = cfg.architecture.num_stages

    def batch_size_now() -> int:
        if not progressive_run or cfg.progressive_batch_high is None:
            return cfg.batch_size
        res = cfg.architecture.stage_resolution(growth.stage)
        return cfg.batch_size if res <= 64 else cfg.progressive_batch_high

    def make_pipeline() -> BatchPipeline:
        target = (
            cfg.architecture.stage_resolution(growth.stage)
            if progressive_run
            else cfg.architecture.max_resolution
        )
        return BatchPipeline(dataset, cfg, target, rng)

    pipeline = make_pipeline()
    checkpoints: list = []
    history: list = []
    consecutive_failures = 0
    start_time = time.perf_counter()

    def save(step: int, tag: str = "") -> None:
        modules = {
            "generator": models.generator,
            "critic": models.critic,
            "conditioner": models.conditioner,
        }
        name = f"ckpt_step{step:06d}{tag}.npz"
        checkpoints.append(
            save_checkpoint(
                checkpoint_dir / name,
                modules,
                cfg.architecture,
                extra={"step": step, "family": cfg.family},
            )
        )

    with open(metrics_path, "w") as log:
        for step in range(1, total_steps + 1):
            if cfg.lr_halving_period and step > 1 and (
                (step - 1) % cfg.lr_halving_period == 0
            ):
                for optimizer in (
                    models.optimizer_generator,
                    models.optimizer_critic,
                ):
                    for group in optimizer.param_groups:
                        group["lr"] *= 0.5

            batch = pipeline.next_batch(batch_size_now())
            try:
                metrics = train_step(models, batch, cfg, growth, step)
                consecutive_failures = 0
            except TrainingDivergedError:
                consecutive_failures += 1
                if consecutive_failures >= 3:
                    raise
                continue

            metrics["wall_time"] = time.perf_counter() - start_time
            history.append(metrics)
            if step % cfg.log_every == 0:
                log.write(format_metric_line(metrics) + "\n")

            phase_boundary = False
            if progressive_run:
                seen = batch.images.shape[0] * cfg.n_critic
                new_growth = advance(growth, seen, max_stage)
                phase_boundary = (new_growth.stage, new_growth.phase) != (
                    growth.stage,
                    growth.phase,
                )
                resolution_changed = new_growth.stage != growth.stage
                growth = new_growth
                if resolution_changed:
                    pipeline = make_pipeline()

            if step % cfg.checkpoint_every == 0:
                save(step)
            elif phase_boundary:
                save(step, tag="_phase")

    save(total_steps, tag="_final")
    return TrainResult(
        run_dir=run_dir,
        metrics_path=metrics_path,
        checkpoint_paths=checkpoints,
        models=models,
        history=history,
    )
