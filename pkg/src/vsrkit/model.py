"""Toy-scale cascade-free network: shared trunk, phoneme/viseme branch
encoders with class heads, stochastic branch-drop fusion, and a character
encoder/decoder pair producing CTC and attention logits from one memory.

All compute runs on the autodiff Tensor graph; parameters are named with
group prefixes (trunk/phoneme/viseme/fusion/char_encoder/char_decoder/heads)
so checkpoints can verify which branches exist.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .decoding import Hypothesis, attention_greedy_decode, ctc_beam_decode, \
    ctc_greedy_decode

__all__ = [
    "ModelConfig",
    "ActivationConfig",
    "ALL_ACTIVATIONS",
    "ForwardOutputs",
    "Model",
    "CheckpointError",
    "BLANK_ID",
    "SOS_ID",
    "EOS_ID",
    "CHAR_OFFSET",
]

CHECKPOINT_VERSION = "vsrkit-checkpoint v1"

# character token layout shared by both char heads
BLANK_ID = 0
SOS_ID = 1
EOS_ID = 2
CHAR_OFFSET = 3

_LN_EPS = 1e-5


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    char_vocab: int
    phoneme_vocab: int = 38
    viseme_vocab: int = 16
    input_dim: int = 16
    model_dim: int = 64
    trunk_layers: int = 2
    branch_layers: int = 1
    char_encoder_layers: int = 2
    char_decoder_layers: int = 1
    attention_heads: int = 4
    p_drop: float = 0.1
    max_decode_len: int = 16
    max_frames: int = 256
    conv_kernel: int = 3
    ffn_mult: int = 4
    head_hidden_mult: int = 4  # head hidden width = mult * vocab size

    def __post_init__(self):
        counts = (self.char_vocab, self.phoneme_vocab, self.viseme_vocab,
                  self.input_dim, self.model_dim, self.trunk_layers,
                  self.branch_layers, self.char_encoder_layers,
                  self.char_decoder_layers, self.attention_heads,
                  self.max_decode_len, self.max_frames)
        if any(c < 1 for c in counts):
            raise ValueError("all sizes and layer counts must be positive")
        if not 0.0 <= self.p_drop < 1.0:
            raise ValueError(f"p_drop must be in [0, 1), got {self.p_drop}")
        if self.model_dim % self.attention_heads:
            raise ValueError("model_dim must be divisible by attention_heads")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")

    def to_json(self):
        return json.dumps(self.__dict__, sort_keys=True)

    @classmethod
    def from_json(cls, s):
        return cls(**json.loads(s))


@dataclass(frozen=True)
class ActivationConfig:
    """Which intermediate-representation branches run at inference."""

    use_phoneme: bool = True
    use_viseme: bool = True

    @property
    def name(self):
        return "f" + ("+p" if self.use_phoneme else "") + \
            ("+v" if self.use_viseme else "")

    @classmethod
    def from_name(cls, name):
        parts = set(name.lower().replace(" ", "").split("+"))
        if "f" not in parts or not parts <= {"f", "p", "v"}:
            raise ValueError(f"unknown activation config {name!r}")
        return cls(use_phoneme="p" in parts, use_viseme="v" in parts)


ALL_ACTIVATIONS = (
    ActivationConfig(False, False),
    ActivationConfig(True, False),
    ActivationConfig(False, True),
    ActivationConfig(True, True),
)


@dataclass
class ForwardOutputs:
    F: Tensor = None
    P: Tensor = None
    V: Tensor = None
    fused: Tensor = None
    F_mem: Tensor = None
    phoneme_logits: Tensor = None
    viseme_logits: Tensor = None
    char_ctc_logits: Tensor = None
    char_attn_logits: Tensor = None
    drop_masks: tuple = None


def _layer_norm(x, scale, bias):
    mu = ad.reduce_mean(x, axis=-1, keepdims=True)
    xc = ad.sub(x, mu)
    var = ad.reduce_mean(ad.mul(xc, xc), axis=-1, keepdims=True)
    inv = ad.div(Tensor(1.0), ad.sqrt(ad.add(var, _LN_EPS)))
    return ad.add(ad.mul(ad.mul(xc, inv), scale), bias)


def droppath_sum(F, P, V, mask_p, mask_v, p_drop, training):
    """Pre-activation fused sum.

    Training: each surviving branch is rescaled by 1/(1-p_drop) so the sum
    is unbiased; inference: supplied masks are 0/1 activation switches with
    no rescale.
    """
    out = F
    scale = 1.0 / (1.0 - p_drop) if training else 1.0
    if P is not None:
        out = ad.add(out, ad.mul(P, mask_p * scale))
    if V is not None:
        out = ad.add(out, ad.mul(V, mask_v * scale))
    return out


class Model:
    def __init__(self, cfg: ModelConfig, seed=0, params=None,
                 with_branches=True):
        self.cfg = cfg
        self.with_branches = with_branches
        self.params = params if params is not None else \
            self._init_params(seed, with_branches)
        if params is not None:
            self.with_branches = any(k.startswith("phoneme/") for k in params)

    # ------------------------------------------------------------------
    # parameters

    def _init_params(self, seed, with_branches):
        cfg = self.cfg
        rng = np.random.default_rng([seed, 7_000_001])
        params = {}

        def w(name, *shape, std=None):
            if std is None:
                std = 1.0 / np.sqrt(shape[0])
            params[name] = Tensor(rng.normal(scale=std, size=shape))

        def b(name, n):
            params[name] = Tensor(np.zeros(n))

        def norm(prefix):
            params[f"{prefix}_scale"] = Tensor(np.ones(cfg.model_dim))
            params[f"{prefix}_bias"] = Tensor(np.zeros(cfg.model_dim))

        def ffn(prefix):
            norm(f"{prefix}_norm")
            w(f"{prefix}_w1", cfg.model_dim, cfg.ffn_mult * cfg.model_dim)
            b(f"{prefix}_b1", cfg.ffn_mult * cfg.model_dim)
            w(f"{prefix}_w2", cfg.ffn_mult * cfg.model_dim, cfg.model_dim)
            b(f"{prefix}_b2", cfg.model_dim)

        def attn(prefix):
            norm(f"{prefix}_norm")
            for part in ("q", "k", "v", "o"):
                w(f"{prefix}_w{part}", cfg.model_dim, cfg.model_dim)
                if part != "k":  # a key bias shifts every score of a query
                    b(f"{prefix}_b{part}", cfg.model_dim)  # equally: useless

        def head(prefix, vocab):
            hidden = cfg.head_hidden_mult * vocab
            w(f"{prefix}_w1", cfg.model_dim, hidden)
            b(f"{prefix}_b1", hidden)
            w(f"{prefix}_w2", hidden, vocab)
            b(f"{prefix}_b2", vocab)

        w("trunk/in_proj_w", cfg.input_dim, cfg.model_dim)
        b("trunk/in_proj_b", cfg.model_dim)
        params["trunk/pos"] = Tensor(
            0.02 * rng.normal(size=(cfg.max_frames, cfg.model_dim)))
        for i in range(cfg.trunk_layers):
            ffn(f"trunk/ffn{i}")
        attn("trunk/attn")

        if with_branches:
            for branch in ("phoneme", "viseme"):
                for i in range(cfg.branch_layers):
                    attn(f"{branch}/layer{i}_attn")
                    ffn(f"{branch}/layer{i}_ffn")
            head("heads/phoneme", cfg.phoneme_vocab)
            head("heads/viseme", cfg.viseme_vocab)

        norm("fusion/norm")

        for i in range(cfg.char_encoder_layers):
            ffn(f"char_encoder/layer{i}_ffn1")
            attn(f"char_encoder/layer{i}_attn")
            norm(f"char_encoder/layer{i}_conv_norm")
            params[f"char_encoder/layer{i}_conv_w"] = Tensor(
                rng.normal(scale=1.0 / np.sqrt(cfg.conv_kernel),
                           size=(cfg.conv_kernel, cfg.model_dim)))
            b(f"char_encoder/layer{i}_conv_b", cfg.model_dim)
            ffn(f"char_encoder/layer{i}_ffn2")
        norm("char_encoder/out_norm")

        w("char_decoder/embed", cfg.char_vocab, cfg.model_dim,
          std=1.0 / np.sqrt(cfg.model_dim))
        params["char_decoder/pos"] = Tensor(
            0.02 * rng.normal(size=(cfg.max_decode_len + 1, cfg.model_dim)))
        for i in range(cfg.char_decoder_layers):
            attn(f"char_decoder/layer{i}_self")
            attn(f"char_decoder/layer{i}_cross")
            ffn(f"char_decoder/layer{i}_ffn")
        norm("char_decoder/out_norm")

        head("heads/char_ctc", cfg.char_vocab)
        head("heads/char_attn", cfg.char_vocab)
        return params

    def parameter_count(self, groups=None):
        total = 0
        for name, p in self.params.items():
            if groups is None or any(name.startswith(g) for g in groups):
                total += p.data.size
        return total

    def count_active_params(self, act: ActivationConfig) -> int:
        """Parameters on the executed path for one activation setting."""
        groups = ["trunk/", "fusion/", "char_encoder/", "char_decoder/",
                  "heads/char_ctc", "heads/char_attn"]
        if act.use_phoneme:
            groups += ["phoneme/", "heads/phoneme"]
        if act.use_viseme:
            groups += ["viseme/", "heads/viseme"]
        return self.parameter_count(groups)

    # ------------------------------------------------------------------
    # building blocks

    def _p(self, name):
        try:
            return self.params[name]
        except KeyError:
            raise CheckpointError(f"parameter group missing: {name}") from None

    def _ffn(self, x, prefix):
        h = _layer_norm(x, self._p(f"{prefix}_norm_scale"),
                        self._p(f"{prefix}_norm_bias"))
        h = ad.add(ad.matmul(h, self._p(f"{prefix}_w1")), self._p(f"{prefix}_b1"))
        h = ad.silu(h)
        h = ad.add(ad.matmul(h, self._p(f"{prefix}_w2")), self._p(f"{prefix}_b2"))
        return ad.add(x, h)

    def _attention(self, x_q, x_kv, prefix, key_valid=None, causal=False):
        cfg = self.cfg
        h = cfg.attention_heads
        dh = cfg.model_dim // h
        xq = _layer_norm(x_q, self._p(f"{prefix}_norm_scale"),
                         self._p(f"{prefix}_norm_bias"))
        xkv = xq if x_kv is None else x_kv
        q = ad.add(ad.matmul(xq, self._p(f"{prefix}_wq")), self._p(f"{prefix}_bq"))
        k = ad.matmul(xkv, self._p(f"{prefix}_wk"))
        v = ad.add(ad.matmul(xkv, self._p(f"{prefix}_wv")), self._p(f"{prefix}_bv"))

        Tq = q.data.shape[-2]
        Tk = k.data.shape[-2]
        disallow = np.zeros((1, Tq, Tk), dtype=bool)
        if key_valid is not None:
            disallow = disallow | ~key_valid[:, None, :]
        if causal:
            disallow = disallow | np.triu(np.ones((Tq, Tk), dtype=bool), k=1)

        outs = []
        for i in range(h):
            sl = (Ellipsis, slice(i * dh, (i + 1) * dh))
            qh, kh, vh = q[sl], k[sl], v[sl]
            scores = ad.mul(ad.matmul(qh, ad.transpose(kh, (0, 2, 1))),
                            1.0 / np.sqrt(dh))
            scores = ad.masked_fill(scores, disallow)
            outs.append(ad.matmul(ad.softmax(scores, axis=-1), vh))
        concat = ad.concat(outs, axis=-1)
        out = ad.add(ad.matmul(concat, self._p(f"{prefix}_wo")),
                     self._p(f"{prefix}_bo"))
        return ad.add(x_q, out)

    def _depthwise_conv(self, x, prefix, valid):
        # zero out padding so the kernel never reads garbage across the edge
        cfg = self.cfg
        h = _layer_norm(x, self._p(f"{prefix}_norm_scale"),
                        self._p(f"{prefix}_norm_bias"))
        h = ad.mul(h, valid[:, :, None].astype(np.float64))
        B, T, C = h.data.shape
        k = cfg.conv_kernel
        r = k // 2
        zeros = Tensor(np.zeros((B, r, C)))
        padded = ad.concat([zeros, h, zeros], axis=1)
        wk = self._p(f"{prefix}_w")
        acc = None
        for i in range(k):
            tap = ad.mul(padded[:, i:i + T, :], wk[(i,)])
            acc = tap if acc is None else ad.add(acc, tap)
        acc = ad.silu(ad.add(acc, self._p(f"{prefix}_b")))
        return ad.add(x, acc)

    # ------------------------------------------------------------------
    # forward passes

    def trunk_forward(self, features, valid=None):
        """Shared feature trunk: projection + positions + per-frame
        feed-forward stack with one self-attention layer."""
        cfg = self.cfg
        if not isinstance(features, Tensor):
            features = Tensor(features)
        if features.data.ndim != 3 or features.data.shape[-1] != cfg.input_dim:
            raise ValueError(
                f"features must be B x T x {cfg.input_dim}, "
                f"got {features.data.shape}"
            )
        B, T, _ = features.data.shape
        if T > cfg.max_frames:
            raise ValueError(f"sequence of {T} frames exceeds max_frames")
        if valid is None:
            valid = np.ones((B, T), dtype=bool)
        x = ad.add(ad.matmul(features, self._p("trunk/in_proj_w")),
                   self._p("trunk/in_proj_b"))
        x = ad.add(x, self._p("trunk/pos")[:T])
        x = ad.mul(x, valid[:, :, None].astype(np.float64))
        for i in range(cfg.trunk_layers):
            x = self._ffn(x, f"trunk/ffn{i}")
        x = self._attention(x, None, "trunk/attn", key_valid=valid)
        return x

    def branch_forward(self, F, which, valid=None):
        """One intermediate-representation branch: encoder layers plus the
        class head. Returns (representation, framewise logits)."""
        if which not in ("phoneme", "viseme"):
            raise ValueError(f"unknown branch {which!r}")
        if valid is None:
            valid = np.ones(F.data.shape[:2], dtype=bool)
        x = F
        for i in range(self.cfg.branch_layers):
            x = self._attention(x, None, f"{which}/layer{i}_attn", key_valid=valid)
            x = self._ffn(x, f"{which}/layer{i}_ffn")
        logits = self._head(x, f"heads/{which}")
        return x, logits

    def _head(self, x, prefix):
        h = ad.add(ad.matmul(x, self._p(f"{prefix}_w1")), self._p(f"{prefix}_b1"))
        h = ad.silu(h)
        return ad.add(ad.matmul(h, self._p(f"{prefix}_w2")), self._p(f"{prefix}_b2"))

    def fuse(self, F, P, V, drop_masks=None, training=False):
        """Stochastic branch-drop fusion: nonlinearity over the sum of the
        trunk features and the (masked, rescaled) branch features."""
        mask_p = mask_v = 1.0
        if drop_masks is not None:
            mask_p, mask_v = drop_masks
        return ad.silu(droppath_sum(F, P, V, mask_p, mask_v,
                                    self.cfg.p_drop, training))

    def sample_drop_masks(self, rng, batch_size):
        keep = 1.0 - self.cfg.p_drop
        mp = (rng.random((batch_size, 1, 1)) < keep).astype(np.float64)
        mv = (rng.random((batch_size, 1, 1)) < keep).astype(np.float64)
        return mp, mv

    def char_forward(self, fused, valid=None, decoder_inputs=None):
        """Character encoder over fused features; returns the memory, CTC
        logits, and (when teacher-forced inputs are given) attention logits."""
        cfg = self.cfg
        if valid is None:
            valid = np.ones(fused.data.shape[:2], dtype=bool)
        x = _layer_norm(fused, self._p("fusion/norm_scale"),
                        self._p("fusion/norm_bias"))
        for i in range(cfg.char_encoder_layers):
            x = self._ffn(x, f"char_encoder/layer{i}_ffn1")
            x = self._attention(x, None, f"char_encoder/layer{i}_attn",
                                key_valid=valid)
            x = self._depthwise_conv(x, f"char_encoder/layer{i}_conv", valid)
            x = self._ffn(x, f"char_encoder/layer{i}_ffn2")
        F_mem = _layer_norm(x, self._p("char_encoder/out_norm_scale"),
                            self._p("char_encoder/out_norm_bias"))
        ctc_logits = self._head(F_mem, "heads/char_ctc")
        attn_logits = None
        if decoder_inputs is not None:
            attn_logits = self.decoder_forward(F_mem, decoder_inputs,
                                               memory_valid=valid)
        return F_mem, ctc_logits, attn_logits

    def decoder_forward(self, F_mem, tokens, memory_valid=None,
                        token_valid=None):
        """Teacher-forced decoder: causal self-attention over the token
        prefix and cross-attention into the encoder memory."""
        cfg = self.cfg
        tokens = np.asarray(tokens, dtype=np.int64)
        B, L = tokens.shape
        if L > cfg.max_decode_len + 1:
            raise ValueError("decoder input longer than max_decode_len")
        onehot = np.zeros((B, L, cfg.char_vocab))
        onehot[np.arange(B)[:, None], np.arange(L)[None, :], tokens] = 1.0
        x = ad.matmul(Tensor(onehot), self._p("char_decoder/embed"))
        x = ad.add(x, self._p("char_decoder/pos")[:L])
        if token_valid is not None:
            x = ad.mul(x, token_valid[:, :, None].astype(np.float64))
        for i in range(cfg.char_decoder_layers):
            x = self._attention(x, None, f"char_decoder/layer{i}_self",
                                key_valid=token_valid, causal=True)
            x = self._attention(x, F_mem, f"char_decoder/layer{i}_cross",
                                key_valid=memory_valid)
            x = self._ffn(x, f"char_decoder/layer{i}_ffn")
        x = _layer_norm(x, self._p("char_decoder/out_norm_scale"),
                        self._p("char_decoder/out_norm_bias"))
        return self._head(x, "heads/char_attn")

    def forward_train(self, features, lengths, decoder_inputs, rng,
                      use_branches=True) -> ForwardOutputs:
        """Full training-mode forward pass with sampled branch-drop masks."""
        if not isinstance(features, Tensor):
            features = Tensor(features)
        B, T, _ = features.data.shape
        valid = np.arange(T)[None, :] < np.asarray(lengths)[:, None]
        out = ForwardOutputs()
        out.F = self.trunk_forward(features, valid)
        if use_branches:
            if not self.with_branches:
                raise CheckpointError("model was built without branches")
            out.P, out.phoneme_logits = self.branch_forward(out.F, "phoneme", valid)
            out.V, out.viseme_logits = self.branch_forward(out.F, "viseme", valid)
            out.drop_masks = self.sample_drop_masks(rng, B)
            out.fused = self.fuse(out.F, out.P, out.V, out.drop_masks,
                                  training=True)
        else:
            out.fused = self.fuse(out.F, None, None)
        out.F_mem, out.char_ctc_logits, out.char_attn_logits = \
            self.char_forward(out.fused, valid, decoder_inputs)
        return out

    def forward_infer(self, features, act: ActivationConfig,
                      decode="ctc_greedy", beam_width=8) -> Hypothesis:
        """Inference with on-demand branch activation.

        Only the branches enabled by ``act`` execute; their framewise argmax
        classes ride along on the hypothesis for interpretability.
        """
        if not isinstance(features, Tensor):
            features = Tensor(features)
        if features.data.ndim == 2:
            features = Tensor(features.data[None])
        if (act.use_phoneme or act.use_viseme) and not self.with_branches:
            raise CheckpointError(
                f"activation {act.name!r} requests a branch absent from "
                f"the checkpoint"
            )
        F = self.trunk_forward(features)
        P = V = None
        branch_frames = {}
        if act.use_phoneme:
            P, p_logits = self.branch_forward(F, "phoneme")
            branch_frames["phoneme"] = p_logits.data[0].argmax(axis=-1).tolist()
        if act.use_viseme:
            V, v_logits = self.branch_forward(F, "viseme")
            branch_frames["viseme"] = v_logits.data[0].argmax(axis=-1).tolist()
        fused = self.fuse(F, P, V)
        F_mem, ctc_logits, _ = self.char_forward(fused)

        if decode == "ctc_greedy":
            tokens = ctc_greedy_decode(ctc_logits.data[0])
            lp = ctc_logits.data[0]
            lp = lp - np.log(np.exp(lp - lp.max(-1, keepdims=True))
                             .sum(-1, keepdims=True)) - lp.max(-1, keepdims=True)
            score = float(lp.max(axis=-1).sum())
        elif decode == "ctc_beam":
            hyps = ctc_beam_decode(ctc_logits.data[0], beam_width=beam_width)
            tokens, score = (list(hyps[0].tokens), hyps[0].score) if hyps \
                else ([], 0.0)
        elif decode == "attention":
            tokens = attention_greedy_decode(
                self._decode_step(F_mem), self.cfg.max_decode_len, EOS_ID)
            score = 0.0
        else:
            raise ValueError(f"unknown decode mode {decode!r}")
        return Hypothesis(tokens=tuple(tokens), score=score,
                          branch_frames=branch_frames, activation=act)

    def _decode_step(self, F_mem):
        def step(prefix):
            tokens = np.asarray([[SOS_ID, *prefix]], dtype=np.int64)
            logits = self.decoder_forward(F_mem, tokens)
            return logits.data[0, -1]
        return step

    # ------------------------------------------------------------------
    # checkpoints

    def save(self, path):
        arrays = {name: p.data for name, p in self.params.items()}
        np.savez(path,
                 __version__=np.array(CHECKPOINT_VERSION),
                 __config__=np.array(self.cfg.to_json()),
                 **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as z:
            if "__version__" not in z or str(z["__version__"]) != CHECKPOINT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version in {path}")
            cfg = ModelConfig.from_json(str(z["__config__"]))
            params = {k: Tensor(z[k]) for k in z.files
                      if not k.startswith("__")}
        return cls(cfg, params=params)
