"""Synthetic corpus generation: characters -> phonemes -> visemes -> noisy
frame features, plus manifest persistence.

Frame features are a fixed random per-phoneme codebook row repeated for a
sampled duration with isotropic noise. The codebook is structured so that
viseme identity is a strong signal and within-viseme phoneme detail a weak
one, mirroring what a visual channel exposes. Ground-truth frame labels
exist only because the data is synthetic; training never consumes them.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import nnls

from .linguistics import (
    Lexicon,
    LexiconEntry,
    LabelTriple,
    LinguisticInventory,
    load_inventory,
    load_lexicon,
    save_inventory,
    save_lexicon,
)

__all__ = [
    "SynthConfig",
    "Utterance",
    "ManifestError",
    "make_lexicon",
    "char_sampling_weights",
    "phoneme_codebook",
    "generate_corpus",
    "time_mask",
    "write_manifest",
    "read_manifest",
    "filter_by_length",
    "viseme_frequencies",
]

MANIFEST_VERSION = "vsrkit-manifest v1"

_CODEBOOK_STREAM = 101
_LEXICON_STREAM = 202
_CORPUS_STREAM = 303
_SPEAKER_STREAM = 404


class ManifestError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    num_utterances: int = 64
    char_vocab_size: int = 48
    sentence_len: tuple = (1, 4)
    frames_per_phoneme: tuple = (3, 7)
    feature_dim: int = 16
    noise_std: float = 0.5
    viseme_prior: bool = True
    time_mask_prob: float = 0.3
    time_mask_max_width: int = 3
    viseme_scale: float = 1.0
    phoneme_scale: float = 0.35
    speaker_perturb_std: float = 0.0
    # a held-out corpus shares the codebook of its training corpus by
    # pinning this while varying `seed`
    codebook_seed: int = None

    def __post_init__(self):
        if self.sentence_len[0] < 1 or self.sentence_len[0] > self.sentence_len[1]:
            raise ValueError(f"bad sentence_len range {self.sentence_len}")
        if (self.frames_per_phoneme[0] < 1
                or self.frames_per_phoneme[0] > self.frames_per_phoneme[1]):
            raise ValueError(f"bad frames_per_phoneme range {self.frames_per_phoneme}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # T x C
    labels: LabelTriple
    frame_phonemes: np.ndarray  # T, ground-truth alignment
    frame_visemes: np.ndarray  # T

    def num_frames(self):
        return self.features.shape[0]

    def __eq__(self, other):
        return (
            self.id == other.id
            and np.array_equal(self.features, other.features)
            and self.labels == other.labels
            and np.array_equal(self.frame_phonemes, other.frame_phonemes)
            and np.array_equal(self.frame_visemes, other.frame_visemes)
        )


def make_lexicon(inv: LinguisticInventory, num_chars: int, seed: int,
                 length_range=(1, 3), num_homophone_pairs: int = 3) -> Lexicon:
    """Build an artificial lexicon whose pooled phoneme composition matches
    the inventory's viseme priors by quota.

    Characters are synthetic single code points. The last
    ``num_homophone_pairs`` characters alias the pronunciations of the first
    ones, reproducing homophone ambiguity; aliased pronunciations count
    double in the quota so uniform character sampling still matches the
    prior.
    """
    if num_homophone_pairs * 2 > num_chars:
        raise ValueError("too many homophone pairs for the vocabulary size")
    rng = np.random.default_rng([seed, _LEXICON_STREAM])
    n_base = num_chars - num_homophone_pairs
    lengths = rng.integers(length_range[0], length_range[1] + 1, size=n_base)
    mult = np.ones(n_base, dtype=np.int64)
    mult[:num_homophone_pairs] = 2

    prior = np.asarray(inv.viseme_frequency)
    total_slots = int((lengths * mult).sum())
    quota = np.floor(prior * total_slots).astype(np.int64)
    remainder = prior * total_slots - quota
    short = total_slots - quota.sum()
    for v in np.argsort(-remainder)[:short]:
        quota[v] += 1

    remaining = quota.astype(np.float64)
    pronunciations = []
    for c in range(n_base):
        idxs = []
        for _ in range(int(lengths[c])):
            w = np.where(remaining >= mult[c], remaining, 0.0)
            if w.sum() == 0:
                w = remaining.copy()
            if w.sum() == 0:
                w = prior.copy()
            v = int(rng.choice(len(w), p=w / w.sum()))
            remaining[v] = max(0.0, remaining[v] - mult[c])
            choices = inv.phonemes_of_viseme(v)
            idxs.append(int(choices[rng.integers(len(choices))]))
        pronunciations.append(tuple(idxs))

    # synthetic characters from a private-use plane so they never collide
    # with real text
    chars = [chr(0xE000 + i) for i in range(num_chars)]
    entries = [
        LexiconEntry(chars[c], pronunciations[c]) for c in range(n_base)
    ]
    for h in range(num_homophone_pairs):
        entries.append(LexiconEntry(chars[n_base + h], pronunciations[h]))
    return Lexicon(entries)


def char_sampling_weights(lexicon: Lexicon, inv: LinguisticInventory,
                          vocab_size: int) -> np.ndarray:
    """Character weights whose induced long-run viseme frequency matches the
    inventory prior as closely as the lexicon allows (nonnegative least
    squares on the composition deficit)."""
    prior = np.asarray(inv.viseme_frequency)
    counts = np.zeros((inv.num_visemes, vocab_size))
    lens = np.zeros(vocab_size)
    for c in range(vocab_size):
        for p in lexicon.entries[c].phonemes:
            counts[inv.viseme_of(p), c] += 1
        lens[c] = len(lexicon.entries[c].phonemes)
    deficit = counts - prior[:, None] * lens[None, :]
    system = np.vstack([deficit, np.ones((1, vocab_size))])
    rhs = np.zeros(inv.num_visemes + 1)
    rhs[-1] = 1.0
    w, _ = nnls(system, rhs)
    if w.sum() <= 0:
        return np.full(vocab_size, 1.0 / vocab_size)
    return w / w.sum()


def phoneme_codebook(cfg: SynthConfig, inv: LinguisticInventory) -> np.ndarray:
    """Fixed random per-phoneme embedding: a shared anchor per viseme class
    plus a smaller per-phoneme detail component."""
    base = cfg.codebook_seed if cfg.codebook_seed is not None else cfg.seed
    rng = np.random.default_rng([base, _CODEBOOK_STREAM])
    anchors = rng.normal(size=(inv.num_visemes, cfg.feature_dim))
    details = rng.normal(size=(inv.num_phonemes, cfg.feature_dim))
    p2v = np.asarray(inv.phoneme_to_viseme)
    book = cfg.viseme_scale * anchors[p2v] + cfg.phoneme_scale * details
    if cfg.speaker_perturb_std > 0:
        pr = np.random.default_rng([cfg.seed, _SPEAKER_STREAM])
        book = book + cfg.speaker_perturb_std * pr.normal(size=book.shape)
    return book


def generate_corpus(cfg: SynthConfig, inv: LinguisticInventory,
                    lexicon: Lexicon) -> list:
    """Sample a deterministic corpus of utterances.

    Characters are drawn from the first ``char_vocab_size`` lexicon entries,
    weighted to match the viseme prior when ``viseme_prior`` is set.
    """
    if len(lexicon) < cfg.char_vocab_size:
        raise ValueError(
            f"lexicon has {len(lexicon)} characters, need {cfg.char_vocab_size}"
        )
    rng = np.random.default_rng([cfg.seed, _CORPUS_STREAM])
    book = phoneme_codebook(cfg, inv)
    if cfg.viseme_prior:
        weights = char_sampling_weights(lexicon, inv, cfg.char_vocab_size)
    else:
        weights = np.full(cfg.char_vocab_size, 1.0 / cfg.char_vocab_size)

    utterances = []
    for u in range(cfg.num_utterances):
        n_chars = int(rng.integers(cfg.sentence_len[0], cfg.sentence_len[1] + 1))
        char_idxs = rng.choice(cfg.char_vocab_size, size=n_chars, p=weights)
        phonemes = []
        for c in char_idxs:
            phonemes.extend(lexicon.entries[int(c)].phonemes)
        phonemes = np.asarray(phonemes, dtype=np.int64)
        visemes = np.asarray(inv.map_phonemes(phonemes), dtype=np.int64)
        durations = rng.integers(cfg.frames_per_phoneme[0],
                                 cfg.frames_per_phoneme[1] + 1,
                                 size=len(phonemes))
        frame_ph = np.repeat(phonemes, durations)
        frame_vis = np.repeat(visemes, durations)
        feats = book[frame_ph]
        if cfg.noise_std > 0:
            feats = feats + cfg.noise_std * rng.normal(size=feats.shape)
        utterances.append(Utterance(
            id=f"utt{u:05d}",
            features=np.ascontiguousarray(feats, dtype=np.float64),
            labels=LabelTriple(
                chars=tuple(int(c) for c in char_idxs),
                phonemes=tuple(int(p) for p in phonemes),
                visemes=tuple(int(v) for v in visemes),
            ),
            frame_phonemes=frame_ph,
            frame_visemes=frame_vis,
        ))
    return utterances


def time_mask(features, rng, prob, max_width):
    """With probability ``prob`` zero one contiguous span of at most
    ``max_width`` frames; returns a copy either way."""
    features = np.array(features, copy=True)
    T = features.shape[0]
    if max_width >= T:
        raise ValueError(f"max_width {max_width} must be < sequence length {T}")
    if prob > 0 and rng.random() < prob:
        width = int(rng.integers(1, max_width + 1))
        start = int(rng.integers(0, T - width + 1))
        features[start:start + width] = 0.0
    return features


def filter_by_length(utterances, max_frames):
    """Curriculum subset: utterances no longer than ``max_frames``."""
    return [u for u in utterances if u.num_frames() <= max_frames]


def viseme_frequencies(utterances, inv: LinguisticInventory) -> np.ndarray:
    """Empirical per-phoneme-token viseme distribution over a corpus."""
    counts = np.zeros(inv.num_visemes)
    for u in utterances:
        for v in u.labels.visemes:
            counts[v] += 1
    total = counts.sum()
    return counts / total if total > 0 else counts


def write_manifest(path, utterances, inv=None, lexicon=None):
    """Persist a corpus: index.tsv + packed little-endian feature blob.

    When the inventory and lexicon objects are given they are serialized
    alongside so the directory is self-contained.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    offset = 0
    lines = [f"#{MANIFEST_VERSION}"]
    with open(path / "features.bin", "wb") as blob:
        for u in utterances:
            feats = np.ascontiguousarray(u.features, dtype="<f8")
            T, C = feats.shape
            durations = _run_lengths(u.frame_phonemes, u.labels.phonemes)
            lines.append("\t".join([
                u.id,
                str(T),
                str(C),
                str(offset),
                ",".join(map(str, u.labels.chars)),
                ",".join(map(str, u.labels.phonemes)),
                ",".join(map(str, durations)),
            ]))
            blob.write(feats.tobytes())
            offset += T * C * 8
    with open(path / "index.tsv", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    if inv is not None:
        save_inventory(path / "visemes.tsv", inv)
        if lexicon is not None:
            save_lexicon(path / "lexicon.tsv", lexicon, inv)


def _group_runs(seq):
    runs = []
    for x in seq:
        if runs and runs[-1][0] == x:
            runs[-1][1] += 1
        else:
            runs.append([x, 1])
    return runs


def _run_lengths(frame_labels, token_labels):
    """Recover per-token durations from a run-length-expanded frame
    sequence. A frame run spanning several adjacent equal tokens has an
    ambiguous split; any positive split reproduces the frames exactly."""
    frame_runs = _group_runs(np.asarray(frame_labels).tolist())
    token_runs = _group_runs(list(token_labels))
    if len(frame_runs) != len(token_runs) or any(
            f[0] != t[0] or f[1] < t[1] for f, t in zip(frame_runs, token_runs)):
        raise ManifestError("frame labels are not a run-length expansion of tokens")
    durations = []
    for (_, n_frames), (_, n_tokens) in zip(frame_runs, token_runs):
        durations.extend([1] * (n_tokens - 1))
        durations.append(n_frames - n_tokens + 1)
    return durations


def read_manifest(path):
    """Load a corpus written by ``write_manifest``; returns (utterances,
    inventory, lexicon), the latter two None when not bundled."""
    path = Path(path)
    index = path / "index.tsv"
    if not index.exists():
        raise ManifestError(f"no index.tsv under {path}")
    with open(index, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != f"#{MANIFEST_VERSION}":
        raise ManifestError(
            f"unsupported manifest version header: {lines[0] if lines else '<empty>'!r}"
        )

    inv = lexicon = None
    if (path / "visemes.tsv").exists():
        inv = load_inventory(path / "visemes.tsv")
        if (path / "lexicon.tsv").exists():
            lexicon = load_lexicon(path / "lexicon.tsv", inv)

    blob_size = (path / "features.bin").stat().st_size
    blob = open(path / "features.bin", "rb")
    try:
        utterances = []
        for ln in lines[1:]:
            fields = ln.split("\t")
            if len(fields) != 7:
                raise ManifestError(f"malformed index record: {ln!r}")
            uid, T_s, C_s, off_s, chars_s, ph_s, dur_s = fields
            T, C, off = int(T_s), int(C_s), int(off_s)
            nbytes = T * C * 8
            if off + nbytes > blob_size:
                raise ManifestError(
                    f"feature blob truncated: record {uid} wants bytes "
                    f"[{off}, {off + nbytes}) of {blob_size}"
                )
            blob.seek(off)
            raw = blob.read(nbytes)
            if len(raw) != nbytes:
                raise ManifestError(f"short read for record {uid}")
            feats = np.frombuffer(raw, dtype="<f8").reshape(T, C).copy()
            chars = _parse_ints(chars_s)
            phonemes = _parse_ints(ph_s)
            durations = _parse_ints(dur_s)
            if len(durations) != len(phonemes) or sum(durations) != T:
                raise ManifestError(f"inconsistent durations for record {uid}")
            if inv is not None:
                visemes = inv.map_phonemes(phonemes)
            else:
                raise ManifestError(
                    "manifest lacks visemes.tsv; cannot rebuild viseme labels"
                )
            frame_ph = np.repeat(np.asarray(phonemes, dtype=np.int64), durations)
            frame_vis = np.repeat(np.asarray(visemes, dtype=np.int64), durations)
            utterances.append(Utterance(
                id=uid,
                features=feats,
                labels=LabelTriple(chars=chars, phonemes=phonemes,
                                   visemes=tuple(visemes)),
                frame_phonemes=frame_ph,
                frame_visemes=frame_vis,
            ))
    finally:
        blob.close()
    return utterances, inv, lexicon


def _parse_ints(s):
    if not s:
        return tuple()
    try:
        return tuple(int(x) for x in s.split(","))
    except ValueError:
        raise ManifestError(f"malformed integer list {s!r}") from None
