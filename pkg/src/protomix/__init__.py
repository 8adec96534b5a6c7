"""protomix: fixed-length, prototype-decomposable embeddings for sets of
feature vectors, with mixture-based and baseline aggregators, prediction
heads, evaluation metrics, and interpretability exports."""

__version__ = "0.1.0"

from .baselines import deepsets_embed, h2t_embed, protocounts_embed
from .compose import (
    EMBED_METHODS,
    compose_all,
    compose_bottom,
    compose_top,
    compose_wa,
    embed_cohort,
    read_params_block,
)
from .data import (
    Cohort,
    EmbeddingSet,
    SyntheticSpec,
    Target,
    generate_synthetic_cohort,
    load_cohort,
    save_cohort,
)
from .embedding import (
    SetEmbedding,
    expected_length,
    export_embeddings_csv,
    load_embeddings,
    save_embeddings,
)
from .errors import NumericalError, ParseError, ValidationError
from .interpret import (
    AssignmentMap,
    PiTable,
    assignment_map,
    assignment_raster,
    cohort_pi_table,
    heatmap_raster,
    prototype_heatmap,
)
from .metrics import (
    EvalReport,
    balanced_accuracy,
    cohen_kappa_quadratic,
    concordance_index,
    evaluate_classification,
    evaluate_survival,
    weighted_f1,
)
from .mixture import (
    EmConfig,
    MixtureParams,
    PosteriorMatrix,
    e_step,
    fit_set,
    init_params,
    log_likelihood,
    m_step,
)
from .predictor import (
    HeadSpec,
    PredictorHead,
    TrainConfig,
    build_head,
    forward,
    grad_check,
    load_head,
    loss_cox,
    loss_cross_entropy,
    predict,
    save_head,
    train,
)
from .prototypes import (
    KMeansConfig,
    PrototypeBank,
    assign_nearest,
    fit_prototypes,
    load_bank,
    save_bank,
)
from .transport import SinkhornConfig, TransportPlan, ot_embedding, sinkhorn
