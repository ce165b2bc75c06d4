"""Video description with a 3-D CNN motion encoder and an attention LSTM decoder."""
from .diffcore import (ContractError, DimensionError, Graph, NumericError, ParamStore,
                       backward, grad_check, precision, set_precision)
from .encoder import AlignmentError, Conv3DConfig, Conv3DNet, FeatureSet, ModeError, encode
from .data import SynthConfig, Vocab, synth_generate, tokenize
from .decoder import CaptionModel, DecoderConfig
from .trainer import Example, TrainConfig, train
from .inference import beam_search, capture_attention, greedy_decode, sample_decode
from .metrics import bleu, cider, perplexity
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"
