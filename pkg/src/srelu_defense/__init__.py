"""Test-time activation-slope defense for small rectifier CNNs.

The package trains plain-ReLU convolutional networks, then evaluates them
with a raised rectifier slope (or a substitute activation) against a suite
of gradient-based and degradation adversarial attacks, producing
deterministic CSV reports.
"""

__version__ = "0.1.0"

from .autodiff import (
    GradientMap,
    Tape,
    Tensor,
    backward,
    default_dtype,
    finite_difference_oracle,
    set_default_dtype,
    using_dtype,
)
from .data import (
    BatchIterator,
    DataFormatError,
    LabeledImageSet,
    load_cifar10_bin,
    load_mnist_idx,
    scale_pixels,
    take_first,
)
from .models import (
    ARCHITECTURES,
    ArchitectureSpec,
    Model,
    ParamsFormatError,
    SlopeConfig,
    build_model,
    forward_logits,
    load_params,
    penultimate_features,
    predict_classes,
    save_params,
)
from .attacks import (
    AdversarialBatch,
    AttackConfig,
    bim,
    deepfool,
    fgsm,
    fgsm_targeted,
    gaussian_noise_attack,
    pgd,
    rfgsm,
    run_attack,
    salt_pepper_attack,
    stepll,
)
from .experiments import (
    EvalRecord,
    Report,
    SweepGrid,
    activation_swap,
    bpda_train_substitute,
    bpda_transfer_eval,
    eval_clean,
    eval_under_attack,
    export_features,
    scaling_experiment,
    slope_sweep,
    targeted_sweep,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_")]
