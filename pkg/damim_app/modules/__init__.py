"""
DAMIM 桌面级实验模块包
"""

from .errors import (
    DamimError,
    ShapeError,
    ConfigError,
    ContractError,
    NumericError,
    NumericAbort,
    DataError,
    PPMParseError,
    CheckpointCorruptionError,
    CheckpointVersionError,
)
from .tensor_core import DiffTensor, no_grad, precision, set_default_dtype, default_dtype
from .layers import Module, Linear, LayerNorm, FeedForward
from .optim import SGD, AdamW, build_optimizer
from .gradcheck import gradcheck, run_gradcheck_suite, GradcheckResult
from .patch_mask import patchify, unpatchify, sample_mask, sample_batch_masks, split_by_mask, restore_order
from .vit_encoder import VitEncoder, AuxiliaryEncoder, build_encoder_config, AUX_MODES
from .afr_target import AFRTarget, ProjectionBank, AlphaHead, align_layer, layer_losses, compute_alpha, aggregate
from .light_decoder import LightDecoder, build_decoder_config, expected_num_parameters, CORRELATIONS
from .presets import get_optimizer_preset, build_decoder_preset, get_preset_description, get_all_presets
from .checkpoint import save_checkpoint, load_checkpoint, write_checkpoint, read_checkpoint
from .config_loader import parse_flat_config, load_config, build_config
from .dataset import LabeledDataset
from .trainer import TrainConfig, Trainer, PretrainModel, TrainResult, TrainLogRecord, train
from .fewshot_eval import EvalConfig, EvalReport, sample_episode, classify_prototype, classify_features, finetune_episode, evaluate, evaluate_with_config
from .rep_analysis import (
    cka,
    domain_similarity,
    disruption_probe,
    disruption_sweep,
    layer_target_probe,
    ablation_study,
    aux_encoder_study,
    ProbeReport,
    ComparisonRow,
)
from .synthetic_data import SyntheticSpec, generate_synthetic
from .image_loader import parse_ppm, load_images, save_dataset
from .model_manager import ModelManager, get_model_manager
from .result_processor import ResultProcessor, format_table

__all__ = [
    'DamimError',
    'ShapeError',
    'ConfigError',
    'ContractError',
    'NumericError',
    'NumericAbort',
    'DataError',
    'PPMParseError',
    'CheckpointCorruptionError',
    'CheckpointVersionError',
    'DiffTensor',
    'no_grad',
    'precision',
    'set_default_dtype',
    'default_dtype',
    'Module',
    'Linear',
    'LayerNorm',
    'FeedForward',
    'SGD',
    'AdamW',
    'build_optimizer',
    'gradcheck',
    'run_gradcheck_suite',
    'GradcheckResult',
    'patchify',
    'unpatchify',
    'sample_mask',
    'sample_batch_masks',
    'split_by_mask',
    'restore_order',
    'VitEncoder',
    'AuxiliaryEncoder',
    'build_encoder_config',
    'AUX_MODES',
    'AFRTarget',
    'ProjectionBank',
    'AlphaHead',
    'align_layer',
    'layer_losses',
    'compute_alpha',
    'aggregate',
    'LightDecoder',
    'build_decoder_config',
    'expected_num_parameters',
    'CORRELATIONS',
    'get_optimizer_preset',
    'build_decoder_preset',
    'get_preset_description',
    'get_all_presets',
    'save_checkpoint',
    'load_checkpoint',
    'write_checkpoint',
    'read_checkpoint',
    'parse_flat_config',
    'load_config',
    'build_config',
    'LabeledDataset',
    'TrainConfig',
    'Trainer',
    'PretrainModel',
    'TrainResult',
    'TrainLogRecord',
    'train',
    'EvalConfig',
    'EvalReport',
    'sample_episode',
    'classify_prototype',
    'classify_features',
    'finetune_episode',
    'evaluate',
    'evaluate_with_config',
    'cka',
    'domain_similarity',
    'disruption_probe',
    'disruption_sweep',
    'layer_target_probe',
    'ablation_study',
    'aux_encoder_study',
    'ProbeReport',
    'ComparisonRow',
    'SyntheticSpec',
    'generate_synthetic',
    'parse_ppm',
    'load_images',
    'save_dataset',
    'ModelManager',
    'get_model_manager',
    'ResultProcessor',
    'format_table',
]
