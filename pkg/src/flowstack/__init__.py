"""flowstack: stacked-ensemble flow classifier with model shrinking and C emission."""

from .errors import DataError, EmitError, FlowStackError, ModelFormatError, TrainingError
from .flowdata import (
    Dataset,
    Encoder,
    FeatureVector,
    FlowRecord,
    FoldPlan,
    encode,
    encode_dataset,
    fit_encoder,
    parse_zeek_log,
    stratified_kfold,
    stratified_split,
    synth_generate,
)
from .stacker import StackConfig, SuperLearnerModel, load_model, save_model, train_super_learner

__version__ = "0.1.0"
