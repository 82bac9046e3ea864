"""Prompt-conditioned deep joint source-channel coding for images."""
from .channel import (ChannelSpec, DegenerateInputError, Distribution, ReceivedCode,
                      SemanticCode, normalize_power, sample_channel, snr_to_noise_power,
                      transmit, transmit_awgn, transmit_rayleigh)
from .codec import (PJSCC, CheckpointVersionError, ModelConfig, cbr_to_symbol_count, decode,
                    encode, load_model, save_checkpoint)
from .csp import AdapterKind, PromptBank, Role, init_prompt_bank, select_prompts, snr_level
from .metrics import count_params, estimate_flops, log_lpips, psnr
from .trainer import TrainSpec, Trainer, mse_loss, run_ablation, train, train_step

__version__ = "0.1.0"
