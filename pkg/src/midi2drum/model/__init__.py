from .diffusion import cfg_combine, forward_diffusion, noise_schedule, sample, v_loss, v_to_x0_eps
from .network import (
    PRESETS,
    ConditionBundle,
    DiTConfig,
    DrumDiT,
    build_global_tokens,
    content_encode,
    dit_forward,
)

__all__ = [
    "PRESETS",
    "ConditionBundle",
    "DiTConfig",
    "DrumDiT",
    "build_global_tokens",
    "cfg_combine",
    "content_encode",
    "dit_forward",
    "forward_diffusion",
    "noise_schedule",
    "sample",
    "v_loss",
    "v_to_x0_eps",
]
