"""The standard synthetic benchmark: fixed data/model/training recipes used
by the ablation and activation trade-off experiments.

A benchmark seed fully determines the train and held-out corpora (which
share a phoneme codebook and lexicon), the model init, and the data order.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from .linguistics import default_inventory
from .losses import LossConfig
from .model import CHAR_OFFSET, ActivationConfig, ModelConfig
from .synth import SynthConfig, generate_corpus, make_lexicon
from .training import TrainConfig, evaluate, train

__all__ = [
    "benchmark_synth_config",
    "benchmark_model_config",
    "benchmark_train_config",
    "make_benchmark_data",
    "run_benchmark",
    "VARIANTS",
]

VARIANTS = ("full", "no_align", "no_branches")

_TRAIN_UTTERANCES = 144
_TEST_UTTERANCES = 48
_CHAR_VOCAB = 40
_TEST_SEED_OFFSET = 90_000


def benchmark_synth_config(seed, num_utterances=_TRAIN_UTTERANCES):
    return SynthConfig(
        seed=seed,
        codebook_seed=seed,
        num_utterances=num_utterances,
        char_vocab_size=_CHAR_VOCAB,
        sentence_len=(1, 4),
        frames_per_phoneme=(3, 7),
        feature_dim=16,
        noise_std=0.6,
        viseme_prior=True,
        viseme_scale=1.0,
        phoneme_scale=0.35,
    )


def benchmark_model_config(lexicon_size):
    return ModelConfig(
        char_vocab=lexicon_size + CHAR_OFFSET,
        input_dim=16,
        model_dim=64,
        trunk_layers=2,
        branch_layers=1,
        char_encoder_layers=2,
        char_decoder_layers=1,
        attention_heads=4,
        p_drop=0.1,
        max_decode_len=8,
        max_frames=120,
    )


def benchmark_train_config(seed, variant="full"):
    if variant not in VARIANTS:
        raise ValueError(f"unknown benchmark variant {variant!r}")
    return TrainConfig(
        epochs_phase1=6,
        epochs_phase2=6,
        phase1_max_frames=28,
        batch_size=8,
        lr_phase1=1e-3,
        lr_phase2=1e-4,
        warmup_steps=8,
        seed=seed,
        loss=LossConfig(),
        disable_align=variant != "full",
        disable_branches=variant == "no_branches",
        time_mask_prob=0.3,
        time_mask_max_width=3,
    )


def make_benchmark_data(seed):
    """Train and held-out corpora sharing one codebook and lexicon."""
    inv = default_inventory()
    lexicon = make_lexicon(inv, _CHAR_VOCAB, seed=seed)
    train_cfg = benchmark_synth_config(seed)
    test_cfg = replace(train_cfg, seed=seed + _TEST_SEED_OFFSET,
                       num_utterances=_TEST_UTTERANCES)
    return (generate_corpus(train_cfg, inv, lexicon),
            generate_corpus(test_cfg, inv, lexicon),
            inv, lexicon)


def run_benchmark(seed, variant="full", activations=None, log_fn=None):
    """Train one benchmark variant and evaluate it on the held-out set.

    The branch-less variant can only run the plain-features activation; the
    others default to the fully activated model.
    """
    train_corpus, test_corpus, inv, lexicon = make_benchmark_data(seed)
    tcfg = benchmark_train_config(seed, variant)
    mcfg = benchmark_model_config(len(lexicon))
    state = train(tcfg, train_corpus, inv, mcfg, log_fn=log_fn)
    if activations is None:
        activations = [ActivationConfig(False, False)] if \
            variant == "no_branches" else [ActivationConfig(True, True)]
    results = evaluate(state.model, test_corpus, activations, lexicon=lexicon)
    return state, results
