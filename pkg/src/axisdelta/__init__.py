"""axisdelta: 1-bit sign-mask weight deltas with learned per-axis FP16 scales.

Compresses a fine-tuned model into a packed sign mask plus one scale vector
per layer (row or column mode, chosen per layer by end-to-end loss) and
reapplies it as a compact fast-loading patch over the shared base model.
"""

from .codec import AxisScaleVector, PackedSignMask, reconstruct, sign_mask
from .model import DeltaProfile, ModelSpec, init_base, synth_finetune
from .fitting import FitConfig, PipelineConfig, run_pipeline
from .artifact import load_and_apply, save_artifact

__all__ = [
    "AxisScaleVector",
    "PackedSignMask",
    "reconstruct",
    "sign_mask",
    "DeltaProfile",
    "ModelSpec",
    "init_base",
    "synth_finetune",
    "FitConfig",
    "PipelineConfig",
    "run_pipeline",
    "load_and_apply",
    "save_artifact",
]

__version__ = "0.1.0"
