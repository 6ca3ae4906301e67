"""EEG visual-imagery decoding with CNN backbones and a subepoch-wise feature encoder (SEFE)."""
from importlib.metadata import PackageNotFoundError, version as _version

try:
    __version__ = _version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .dataset import (
    CLASS_NAMES,
    EpochSet,
    LeakageError,
    Recording,
    SynthConfig,
    make_loso_folds,
    read_recording,
    split_train_val,
    synth_generate,
    write_recording,
)
from .decoders import ArchitectureConfig, SefeConfig, audit_parameters, build
from .estimators import BandpassFilter, ChannelStandardizer, Decimator, SefeNetClassifier
from .preprocessing import PreprocessConfig, preprocess_recording
from .signal import FilterSpec, SignalBlock, apply_zero_phase, design_butterworth_bandpass
from .stats import compare_models, reproduce_paper_stats
from .training import LosoReport, TrainConfig, evaluate, run_loso, summarize_models, train
