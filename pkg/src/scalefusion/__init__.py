"""scalefusion: log-linear AM/LM combination with learnable scales.

Combines two probabilistic sequence models via renormalized log-linear fusion
and learns the combination scales (one global pair, or one pair per subword
unit) by gradient descent under cross-entropy or minimum-expected-word-error
objectives, with exact enumeration oracles at desk scale.
"""

from .core import (
    CapacityError,
    DegenerateInputError,
    GradientVector,
    Hypothesis,
    InfiniteLossError,
    NBestList,
    ScaleSet,
    StepScores,
    UsageError,
    Vocabulary,
    load_scales,
    log_softmax,
    log_sum_exp,
    save_scales,
    validate_hypothesis,
    validate_step_scores,
)
from .providers import (
    GeneratorConfig,
    NGramLM,
    PositionwiseToyAM,
    ScoreSource,
    TrainableToyAM,
    Utterance,
    build_am_row,
    generate_synthetic_corpus,
    load_corpus,
    save_corpus,
    split_noise,
    train_ngram,
    uniform_noise,
)
from .fusion import (
    combined_logits,
    exact_sentence_posterior,
    exact_sequence_scores,
    nbest_posterior,
    nbest_scores,
    sequence_at,
    sequence_score,
    token_posterior,
    token_sequence_logprob,
)
from .decode import (
    BeamConfig,
    beam_search,
    exhaustive_argmax,
    load_nbest,
    rescore_nbest,
    save_nbest,
    strip_trailing_eos,
)
from .objectives import (
    CETrainingItem,
    ObjectiveValue,
    ce_objective,
    finite_difference_gradient,
    gradient_check,
    minwer_objective,
)
from .train import (
    Adam,
    GridSearchResult,
    TrainConfig,
    TrainReport,
    grid_search_scales,
    init_scales,
    joint_train,
    train_scales,
)
from .metrics import WerReport, accuracy, corpus_wer, edit_distance, edit_ops
from .analysis import build_scale_report, length_profile, pearson, scale_histogram

__version__ = "0.1.0"
