"""Run configuration: scale presets, seeds, and thread budget.

Environment: PRIMLIGHT_THREADS caps worker threads (numba), PRIMLIGHT_SEED
sets the default seed when a command does not pass --seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

MEMORY_CEILING_BYTES = 4 << 30  # desk preset must stay under 4 GiB of payloads


@dataclass(frozen=True)
class ScalePreset:
    name: str
    w: int                   # primitives per UV side, N = w^2
    S: int                   # voxel resolution
    env_rows: int
    env_cols: int
    atlas_res: int
    feature_res: int
    stage_lights: int
    image_size: tuple[int, int]

    @property
    def N(self) -> int:
        return self.w * self.w

    @property
    def M(self) -> int:
        return self.env_rows * self.env_cols

    def payload_bytes_estimate(self) -> int:
        """Rough ceiling on resident payload memory: stacked teacher inputs
        and outputs for one light group plus render-operator records."""
        voxels = self.N * self.S ** 3
        per_light = (7 + 4) * self.S * (self.w * self.S) ** 2 * 4  # in+out stacks
        operators = 64 * voxels  # recorded compositing entries, generous
        return 8 * per_light + 16 * voxels * 4 + operators


PRESETS = {
    "desk": ScalePreset("desk", w=8, S=8, env_rows=16, env_cols=32, atlas_res=64,
                        feature_res=32, stage_lights=64, image_size=(64, 64)),
    # full-scale constants for reference; training at this scale needs GPUs
    "paper": ScalePreset("paper", w=64, S=16, env_rows=16, env_cols=32,
                         atlas_res=1024, feature_res=128, stage_lights=460,
                         image_size=(667, 1024)),
}


@dataclass
class RunConfig:
    capture_dir: Path
    out_dir: Path
    scale: ScalePreset
    seed: int
    threads: int

    def __post_init__(self):
        if not Path(self.capture_dir).exists():
            raise FileNotFoundError(f"capture directory {self.capture_dir} does not exist")


def default_seed() -> int:
    return int(os.environ.get("PRIMLIGHT_SEED", "0"))


def configure_threads(requested: int | None = None) -> int:
    n = requested or int(os.environ.get("PRIMLIGHT_THREADS", "0")) or os.cpu_count() or 1
    try:
        import numba
        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
    except ImportError:
        pass
    return n
