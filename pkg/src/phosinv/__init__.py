"""phosinv: phosphene forward model for epiretinal prostheses with
analytic gradients, and stimulus inversion via a trained encoder, a naive
baseline, direct gradient descent, and a surrogate-network pipeline."""

from . import config
from .data import (
    AnnotationObject,
    AnnotationRecord,
    PhiSampler,
    TargetSet,
    digit_targets,
    filter_annotations,
    fixed_phi,
    load_manifest,
    preprocess_image,
    sample_patient,
    save_manifest,
    segment_targets,
    split_target_set,
    synth_digits,
)
from .encoders import (
    DigitClassifier,
    DirectInverter,
    EncoderNet,
    LossSetup,
    NaiveEncoder,
    NeuralEncoder,
    encode,
    invert_direct,
    invert_direct_batch,
    load_encoder,
    naive_encode,
    recognition_accuracy,
    renderer_forward,
    save_encoder,
    train_encoder,
)
from .errors import (
    ContractError,
    DataFormatError,
    DimensionError,
    DivergenceError,
    GeometryError,
    ParameterError,
)
from .forward import (
    PatientParams,
    PhospheneModel,
    RenderCache,
    effects,
    render,
    render_batch,
    render_kernel,
    render_reference,
    render_with_grad,
)
from .losses import (
    FeatureExtractor,
    LossSchedule,
    LossWeights,
    feature_loss,
    joint,
    joint_components,
    laplacian_kernel,
    laplacian_smooth,
    mae,
    schedule_step,
)
from .retina import (
    AxonMapGrid,
    AxonTrajectory,
    ImplantLayout,
    RetinalPoint,
    SpiralParams,
    axon_trajectory,
    build_axon_map,
    build_implant,
    load_axon_map,
    path_length,
    save_axon_map,
)
from .surrogate import (
    GapReport,
    SurrogateDatasetSpec,
    SurrogateModel,
    SurrogateNet,
    exploit_gap,
    gen_surrogate_dataset,
    load_surrogate,
    save_surrogate,
    surrogate_forward,
    surrogate_render,
    train_surrogate,
)

__version__ = "0.1.0"
