"""Self-supervised denoising of low-dose CT images.

Training pairs are built by corrupting already-noisy images with zero-mean
mixed Poisson-Gaussian noise, treating the noisy image as if it were clean;
a single shared-parameter backbone applied T times forms the denoiser.
"""

from .config import RootConfig, load_config
from .errors import (
    CheckpointError,
    ConfigError,
    DomainError,
    FormatError,
    NacError,
    RangeError,
    ReservedBackboneError,
    ShapeError,
    TrainingError,
    UnknownBackboneError,
)
from .experiments import (
    REFERENCE_RESULTS,
    DataConfig,
    Dataset,
    ExperimentPlan,
    build_dataset,
    run_ablations,
    run_plan,
    sweep_backbones,
    sweep_module_count,
    sweep_noise_variance,
    tabulate_methods,
)
from .imaging import (
    ImageGrid,
    clip_for_display,
    denormalize,
    load_image,
    normalize,
    save_image,
)
from .metrics import MetricReport, evaluate, psnr, score_images, ssim
from .models import (
    BackboneConfig,
    ChainModel,
    apply_chain,
    build_backbone,
    build_chain,
    compose_chain,
    load_chain,
    parameter_count,
    save_chain,
)
from .noise import (
    NoiseSpec,
    corrupt,
    noise_stats,
    sample_mixed,
    stream_for,
    verify_additivity,
)
from .pairs import Pair, PairSet, build_pairs, extract_patches, split
from .phantoms import make_phantom, make_phantoms
from .training import (
    TrainConfig,
    TrainResult,
    checkpoint_load,
    checkpoint_save,
    loss,
    lr_schedule,
    resume_training,
    train,
)

__version__ = "0.1.0"
