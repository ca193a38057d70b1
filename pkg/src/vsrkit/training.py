"""Deterministic training loop: two-phase length curriculum, decoupled
weight-decay adaptive-moment optimizer, cosine schedule with warmup,
ablation switches, and per-activation evaluation with timing."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .linguistics import LinguisticInventory
from .losses import (
    LossConfig,
    align_loss,
    attention_ce_loss,
    ctc_loss,
    total_loss,
)
from .metrics import cer, report_record
from .model import CHAR_OFFSET, EOS_ID, SOS_ID, ActivationConfig, Model, \
    ModelConfig
from .synth import filter_by_length, time_mask

__all__ = [
    "TrainConfig",
    "TrainState",
    "TrainingError",
    "lr_schedule",
    "train",
    "evaluate",
    "read_metrics_log",
]

_TRAIN_STREAM = 55_001


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs_phase1: int = 4
    epochs_phase2: int = 4
    phase1_max_frames: int = 24
    batch_size: int = 8
    lr_phase1: float = 1e-3
    lr_phase2: float = 1e-4
    warmup_steps: int = 8
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.98
    clip_norm: float = 5.0
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    disable_align: bool = False
    disable_branches: bool = False
    align_on_frame_labels: bool = False
    time_mask_prob: float = 0.3
    time_mask_max_width: int = 3

    def __post_init__(self):
        if self.batch_size < 1 or self.phase1_max_frames < 1:
            raise ValueError("batch size and phase-1 threshold must be positive")
        if self.lr_phase1 <= 0 or self.lr_phase2 <= 0:
            raise ValueError("learning rates must be positive")


def lr_schedule(step, total_steps, peak, warmup):
    """Linear 0 -> peak over ``warmup`` steps, then cosine peak -> 0 at
    ``total_steps``."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    warmup = min(warmup, total_steps)
    if step <= warmup:
        return peak * step / warmup if warmup > 0 else peak
    if step >= total_steps:
        return 0.0
    frac = (step - warmup) / (total_steps - warmup)
    return peak * 0.5 * (1.0 + np.cos(np.pi * frac))


@dataclass
class TrainState:
    model: Model
    cfg: TrainConfig
    step: int = 0
    phase_idx: int = 0
    epoch_idx: int = 0
    opt_m: dict = field(default_factory=dict)
    opt_v: dict = field(default_factory=dict)
    rng: np.random.Generator = None

    @classmethod
    def new(cls, cfg: TrainConfig, model_cfg: ModelConfig):
        model = Model(model_cfg, seed=cfg.seed,
                      with_branches=not cfg.disable_branches)
        rng = np.random.default_rng([cfg.seed, _TRAIN_STREAM])
        return cls(model=model, cfg=cfg, rng=rng)

    def save(self, path):
        arrays = {f"param::{k}": p.data for k, p in self.model.params.items()}
        arrays.update({f"m::{k}": v for k, v in self.opt_m.items()})
        arrays.update({f"v::{k}": v for k, v in self.opt_v.items()})
        meta = {
            "step": self.step,
            "phase_idx": self.phase_idx,
            "epoch_idx": self.epoch_idx,
            "rng_state": self.rng.bit_generator.state,
            "train_cfg": {**self.cfg.__dict__, "loss": self.cfg.loss.__dict__},
            "model_cfg": json.loads(self.model.cfg.to_json()),
        }
        np.savez(path, __meta__=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as z:
            if "__meta__" not in z:
                raise TrainingError(f"{path} is not a training state file")
            meta = json.loads(str(z["__meta__"]))
            params, m, v = {}, {}, {}
            for k in z.files:
                if k.startswith("param::"):
                    params[k[7:]] = Tensor(z[k])
                elif k.startswith("m::"):
                    m[k[3:]] = z[k].copy()
                elif k.startswith("v::"):
                    v[k[3:]] = z[k].copy()
        loss_cfg = LossConfig(**meta["train_cfg"].pop("loss"))
        cfg = TrainConfig(loss=loss_cfg, **meta["train_cfg"])
        model = Model(ModelConfig(**meta["model_cfg"]), params=params)
        rng = np.random.default_rng(0)
        rng.bit_generator.state = meta["rng_state"]
        return cls(model=model, cfg=cfg, step=meta["step"],
                   phase_idx=meta["phase_idx"], epoch_idx=meta["epoch_idx"],
                   opt_m=m, opt_v=v, rng=rng)


def _char_tokens(utt):
    return [c + CHAR_OFFSET for c in utt.labels.chars]


def _pad_batch(utts, augment_rng=None, mask_prob=0.0, mask_width=0):
    feats = []
    for u in utts:
        f = u.features
        if augment_rng is not None and mask_prob > 0 and mask_width < f.shape[0]:
            f = time_mask(f, augment_rng, mask_prob, mask_width)
        feats.append(f)
    lengths = [f.shape[0] for f in feats]
    T = max(lengths)
    C = feats[0].shape[1]
    batch = np.zeros((len(feats), T, C))
    for i, f in enumerate(feats):
        batch[i, :lengths[i]] = f
    return batch, lengths


def _decoder_batch(utts, max_decode_len):
    tok = [_char_tokens(u) for u in utts]
    if any(len(t) > max_decode_len for t in tok):
        raise TrainingError("an utterance exceeds max_decode_len characters")
    L = max(len(t) for t in tok) + 1
    dec_in = np.full((len(tok), L), EOS_ID, dtype=np.int64)
    target = np.full((len(tok), L), EOS_ID, dtype=np.int64)
    tok_valid = np.zeros((len(tok), L), dtype=bool)
    for i, t in enumerate(tok):
        dec_in[i, 0] = SOS_ID
        dec_in[i, 1:len(t) + 1] = t
        target[i, :len(t)] = t
        tok_valid[i, :len(t) + 1] = True
    return dec_in, target, tok_valid


def _mean_loss(parts):
    total = parts[0]
    for p in parts[1:]:
        total = ad.add(total, p)
    return ad.mul(total, 1.0 / len(parts))


def _batch_losses(state: TrainState, utts, inv, augment_rng=None,
                  augment=False):
    cfg = state.cfg
    model = state.model
    feats, lengths = _pad_batch(
        utts,
        augment_rng if augment else None,
        cfg.time_mask_prob,
        cfg.time_mask_max_width,
    )
    dec_in, target, tok_valid = _decoder_batch(utts, model.cfg.max_decode_len)
    out = model.forward_train(feats, lengths, dec_in, state.rng,
                              use_branches=not cfg.disable_branches)

    char_ctc = _mean_loss([
        ctc_loss(out.char_ctc_logits[b, :lengths[b]], _char_tokens(u))
        for b, u in enumerate(utts)
    ])
    char_attn = _mean_loss([
        attention_ce_loss(
            out.char_attn_logits[b, :len(u.labels.chars) + 1],
            target[b, :len(u.labels.chars) + 1],
        )
        for b, u in enumerate(utts)
    ])

    phoneme_ctc = viseme_ctc = align = None
    if not cfg.disable_branches:
        phoneme_ctc = _mean_loss([
            ctc_loss(out.phoneme_logits[b, :lengths[b]], u.labels.phonemes)
            for b, u in enumerate(utts)
        ])
        viseme_ctc = _mean_loss([
            ctc_loss(out.viseme_logits[b, :lengths[b]], u.labels.visemes)
            for b, u in enumerate(utts)
        ])
        if not cfg.disable_align:
            B, T = len(utts), feats.shape[1]
            if cfg.align_on_frame_labels:
                vis_cls = np.zeros((B, T), dtype=np.int64)
                pho_cls = np.zeros((B, T), dtype=np.int64)
                for b, u in enumerate(utts):
                    vis_cls[b, :lengths[b]] = u.frame_visemes
                    pho_cls[b, :lengths[b]] = u.frame_phonemes
            else:
                vis_cls = out.viseme_logits.data.argmax(axis=-1)
                pho_cls = out.phoneme_logits.data.argmax(axis=-1)
            align = align_loss(out.V, out.P, vis_cls, pho_cls, inv,
                               cfg.loss, lengths=lengths)

    return total_loss(char_ctc, char_attn, cfg.loss,
                      phoneme_ctc=phoneme_ctc, viseme_ctc=viseme_ctc,
                      align=align)


def _verify_combination(bundle, cfg: LossConfig, step):
    vals = bundle.floats()
    expect = vals["char_hybrid"]
    if "align" in vals:
        expect = expect + cfg.lambda1 * vals["align"]
    if "phoneme_ctc" in vals:
        expect = expect + cfg.lambda2 * (vals["phoneme_ctc"] + vals["viseme_ctc"])
    if abs(vals["total"] - expect) > 1e-12:
        raise TrainingError(
            f"loss combination check failed at step {step}: "
            f"{vals['total']} vs {expect}"
        )
    for name, v in vals.items():
        if not np.isfinite(v):
            raise TrainingError(f"non-finite loss component {name!r} at step {step}")


def _adamw_step(state: TrainState, lr):
    cfg = state.cfg
    grads = {}
    sq = 0.0
    for name, p in state.model.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        grads[name] = g
        sq += float((g * g).sum())
    norm = np.sqrt(sq)
    scale = cfg.clip_norm / norm if norm > cfg.clip_norm else 1.0

    t = state.step + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in state.model.params.items():
        g = grads[name] * scale
        m = state.opt_m.get(name)
        v = state.opt_v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        state.opt_m[name] = m
        state.opt_v[name] = v
        update = (m / bc1) / (np.sqrt(v / bc2) + 1e-8)
        if p.data.ndim >= 2:  # decoupled decay on weight matrices only
            update = update + cfg.weight_decay * p.data
        p.data = p.data - lr * update
        p.grad = None


def train(cfg: TrainConfig, corpus, inv: LinguisticInventory,
          model_cfg: ModelConfig, log_path=None, checkpoint_dir=None,
          resume=None, log_fn=None):
    """Run the two-phase curriculum and return the final TrainState.

    Phase 1 sees only utterances of at most ``phase1_max_frames`` frames;
    phase 2 sees the full corpus with time-mask augmentation. Every step
    logs all loss components and re-verifies their combination.
    """
    if not corpus:
        raise TrainingError("corpus is empty")
    if resume is not None:
        # parameters, moments, rng and position come from the checkpoint;
        # the schedule being continued is the caller's
        state = TrainState.load(resume)
        state.cfg = cfg
    else:
        state = TrainState.new(cfg, model_cfg)

    phase1 = filter_by_length(corpus, cfg.phase1_max_frames)
    phases = [
        (phase1, cfg.lr_phase1, cfg.epochs_phase1, False),
        (list(corpus), cfg.lr_phase2, cfg.epochs_phase2, True),
    ]

    log_file = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for phase_idx, (data, peak, epochs, augment) in enumerate(phases):
            if phase_idx < state.phase_idx or not data or not epochs:
                if phase_idx >= state.phase_idx:
                    state.phase_idx = phase_idx + 1
                    state.epoch_idx = 0
                continue
            steps_per_epoch = (len(data) + cfg.batch_size - 1) // cfg.batch_size
            total_steps = steps_per_epoch * epochs
            start_epoch = state.epoch_idx if phase_idx == state.phase_idx else 0
            for epoch in range(start_epoch, epochs):
                order = state.rng.permutation(len(data))
                for lo in range(0, len(data), cfg.batch_size):
                    utts = [data[i] for i in order[lo:lo + cfg.batch_size]]
                    step_in_phase = epoch * steps_per_epoch + lo // cfg.batch_size
                    lr = lr_schedule(step_in_phase, total_steps, peak,
                                     cfg.warmup_steps)
                    bundle = _batch_losses(state, utts, inv,
                                           augment_rng=state.rng,
                                           augment=augment)
                    _verify_combination(bundle, cfg.loss, state.step)
                    backward(bundle.total)
                    _adamw_step(state, lr)
                    record = {
                        "step": state.step,
                        "phase": phase_idx + 1,
                        "lr": lr,
                        **bundle.floats(),
                    }
                    if log_file:
                        log_file.write(json.dumps(record) + "\n")
                    if log_fn:
                        log_fn(record)
                    state.step += 1
                state.epoch_idx = epoch + 1
                if checkpoint_dir:
                    ckdir = Path(checkpoint_dir)
                    ckdir.mkdir(parents=True, exist_ok=True)
                    state.save(ckdir / f"epoch_p{phase_idx + 1}e{epoch + 1}.npz")
            state.phase_idx = phase_idx + 1
            state.epoch_idx = 0
    finally:
        if log_file:
            log_file.close()
    return state


def evaluate(model: Model, corpus, activations, lexicon=None,
             decode="ctc_greedy", beam_width=8):
    """Per-activation decoding of a corpus.

    Returns one result per activation config: utterance records, a summary
    (corpus and median CER, active parameter count), and the wall-clock
    seconds the pass took.
    """
    results = []
    for act in activations:
        if isinstance(act, str):
            act = ActivationConfig.from_name(act)
        t0 = time.perf_counter()
        records = []
        cers = []
        S = D = I = N = 0
        for u in corpus:
            hyp = model.forward_infer(u.features, act, decode=decode,
                                      beam_width=beam_width)
            ref_ids = _char_tokens(u)
            rep = cer(ref_ids, hyp.tokens)
            cers.append(rep.cer)
            S += rep.substitutions
            D += rep.deletions
            I += rep.insertions
            N += rep.ref_len
            records.append(report_record(
                u.id, act.name,
                _readable(ref_ids, lexicon),
                _readable(hyp.tokens, lexicon),
                rep,
                branch_frames=hyp.branch_frames or None,
            ))
        wall = time.perf_counter() - t0
        summary = {
            "activation": act.name,
            "utterances": len(corpus),
            "substitutions": S,
            "deletions": D,
            "insertions": I,
            "ref_len": N,
            "corpus_cer": (S + D + I) / N if N else 0.0,
            "median_cer": float(np.median(cers)) if cers else 0.0,
            "active_params": model.count_active_params(act),
        }
        results.append({"records": records, "summary": summary,
                        "wall_clock_s": wall})
    return results


def _readable(token_ids, lexicon):
    out = []
    for t in token_ids:
        if lexicon is not None and t >= CHAR_OFFSET and \
                t - CHAR_OFFSET < len(lexicon):
            out.append(lexicon.entries[t - CHAR_OFFSET].character)
        else:
            out.append(f"<{t}>")
    return out


def read_metrics_log(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
