"""Progressive-growing schedule: stage/phase state machine, linear fade-in
weights, and output/input blending between consecutive resolution stages.

The growth state is a value object and ``advance`` is pure, so one owner can
mutate a canonical cursor while readers hold immutable snapshots.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch

PHASE_TRANSITION = "transition"
PHASE_STABILIZATION = "stabilization"

BASE_RESOLUTION = 4
# Full-scale batch sizes: 16 up to and including 64x64 output, 8 above.
BATCH_SWITCH_RESOLUTION = 64
BATCH_SIZE_LOW = 16
BATCH_SIZE_HIGH = 8


def stage_resolution(stage: int, base_resolution: int = BASE_RESOLUTION) -> int:
    """Output resolution of a stage: base doubled once per later stage."""
    if stage < 1:
        raise ValueError("stage index starts at 1")
    return base_resolution * 2 ** (stage - 1)


def batch_size_for_stage(
    stage: int,
    base_resolution: int = BASE_RESOLUTION,
    low: int = BATCH_SIZE_LOW,
    high: int = BATCH_SIZE_HIGH,
) -> int:
    """Batch size switches exactly at the stage whose output exceeds 64."""
    if stage_resolution(stage, base_resolution) > BATCH_SWITCH_RESOLUTION:
        return high
    return low


@dataclass(frozen=True)
class GrowthState:
    """Cursor over the progressive schedule.

    Stage 1 is trained from scratch and therefore has no transition phase;
    every later stage runs a transition phase (fade-in) followed by a
    stabilization phase of the same length.
    """

    stage: int = 1
    phase: str = PHASE_STABILIZATION
    images_seen_in_phase: int = 0
    images_per_phase: int = 600_000

    def __post_init__(self):
        if self.stage < 1:
            raise ValueError("stage must be >= 1")
        if self.phase not in (PHASE_TRANSITION, PHASE_STABILIZATION):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.stage == 1 and self.phase == PHASE_TRANSITION:
            raise ValueError("stage 1 is trained from scratch and never fades in")
        if self.images_per_phase <= 0:
            raise ValueError("images_per_phase must be positive")
        if not 0 <= self.images_seen_in_phase <= self.images_per_phase:
            raise ValueError("images_seen_in_phase out of range")


def fade_alpha(state: GrowthState) -> float:
    """Fade-in weight: linear in images seen during a transition, 1 otherwise."""
    if state.phase == PHASE_TRANSITION:
        return state.images_seen_in_phase / state.images_per_phase
    return 1.0


def advance(state: GrowthState, n_images: int, max_stage: int) -> GrowthState:
    """Accumulate images into the schedule, rolling over phase boundaries.

    Excess images carry into the next phase. The final stage saturates in
    stabilization with the counter capped at the phase length.
    """
    if n_images < 0:
        raise ValueError("n_images must be nonnegative")
    if state.stage > max_stage:
        raise ValueError("state is beyond max_stage")
    remaining = n_images
    current = state
    while remaining > 0:
        at_final = (
            current.stage == max_stage and current.phase == PHASE_STABILIZATION
        )
        room = current.images_per_phase - current.images_seen_in_phase
        if remaining < room or (at_final and remaining <= room):
            return replace(
                current,
                images_seen_in_phase=current.images_seen_in_phase
                + min(remaining, room),
            )
        if at_final:
            return replace(current, images_seen_in_phase=current.images_per_phase)
        remaining -= room
        if current.phase == PHASE_TRANSITION:
            current = replace(
                current, phase=PHASE_STABILIZATION, images_seen_in_phase=0
            )
        else:
            current = replace(
                current,
                stage=current.stage + 1,
                phase=PHASE_TRANSITION,
                images_seen_in_phase=0,
            )
    return current


def phase_count(max_stage: int) -> int:
    """From scratch to a fully stabilized stage k there are 2k - 1 phases."""
    if max_stage < 1:
        raise ValueError("max_stage must be >= 1")
    return 2 * max_stage - 1


def schedule_table(
    max_stage: int,
    images_per_phase: int,
    base_resolution: int = BASE_RESOLUTION,
    batch_low: int = BATCH_SIZE_LOW,
    batch_high: int = BATCH_SIZE_HIGH,
):
    """Full phase table as dict rows, one per phase, in training order.

    Each row reports the global image range [first_image, last_image), the
    fade weight at the range's start, midpoint and end, and the batch size
    in force during the phase.
    """
    rows = []
    first = 0
    for stage in range(1, max_stage + 1):
        phases = (
            (PHASE_STABILIZATION,)
            if stage == 1
            else (PHASE_TRANSITION, PHASE_STABILIZATION)
        )
        for phase in phases:
            if phase == PHASE_TRANSITION:
                alpha_start, alpha_mid, alpha_end = 0.0, 0.5, 1.0
            else:
                alpha_start = alpha_mid = alpha_end = 1.0
            rows.append(
                {
                    "stage": stage,
                    "phase": phase,
                    "resolution": stage_resolution(stage, base_resolution),
                    "first_image": first,
                    "last_image": first + images_per_phase,
                    "mid_image": first + images_per_phase // 2,
                    "alpha_start": alpha_start,
                    "alpha_mid": alpha_mid,
                    "alpha_end": alpha_end,
                    "batch_size": batch_size_for_stage(
                        stage, base_resolution, batch_low, batch_high
                    ),
                }
            )
            first += images_per_phase
    return rows


SCHEDULE_COLUMNS = (
    "stage",
    "phase",
    "resolution",
    "first_image",
    "last_image",
    "mid_image",
    "alpha_start",
    "alpha_mid",
    "alpha_end",
    "batch_size",
)


def format_schedule(rows) -> str:
    """Render schedule rows as tab-separated lines for golden-file testing."""
    lines = ["\t".join(SCHEDULE_COLUMNS)]
    for row in rows:
        lines.append("\t".join(_format_cell(row[c]) for c in SCHEDULE_COLUMNS))
    return "\n".join(lines) + "\n"


def _format_cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.2f}"
    return str(value)


def upscale_nearest(images: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Nearest-neighbor upscaling of channels-last image batches."""
    return images.repeat_interleave(factor, dim=1).repeat_interleave(factor, dim=2)


def downscale_average(images: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Average-pool downscaling of channels-last image batches."""
    b, h, w, c = images.shape
    if h % factor or w % factor:
        raise ValueError("image size must be divisible by the downscale factor")
    return images.reshape(b, h // factor, factor, w // factor, factor, c).mean(
        dim=(2, 4)
    )


def blend_generator_output(
    prev_rgb: torch.Tensor, new_rgb: torch.Tensor, alpha: float
) -> torch.Tensor:
    """Fade between the upscaled previous-stage image and the new stage's
    image: (1 - alpha) * upscale(prev) + alpha * new."""
    b, h, w, c = new_rgb.shape
    if prev_rgb.shape != (b, h // 2, w // 2, c):
        raise ValueError(
            f"previous stage must be half resolution: got {tuple(prev_rgb.shape)} "
            f"against {tuple(new_rgb.shape)}"
        )
    upscaled = upscale_nearest(prev_rgb)
    return (1.0 - alpha) * upscaled + alpha * new_rgb


def blend_discriminator_input(image: torch.Tensor, alpha: float):
    """Prepare the two critic entry paths during a fade.

    Returns ``(full_res, downscaled, alpha)``: the image as seen by the
    newest stage's input conversion, the average-pooled image for the
    previous stage's input conversion, and the weight of the new path. The
    critic combines the two feature streams as
    ``alpha * new_path + (1 - alpha) * old_path`` at the junction between the
    newest stage and the rest of the stack.
    """
    return image, downscale_average(image), alpha
