"""Synthetic paired corpus, ROI file ingestion, masking and batch assembly.

Every latent class owns a set of template subwords and an ROI cluster
centre. A sample additionally draws an attribute (a text token placed in
each caption half plus a shared offset added to its ROIs) and a style token
that opens both halves of its caption. Class and attribute are recoverable from either modality, so
text-image alignment is learnable; the style token makes next-sentence
prediction learnable without changing a caption's class.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BatchTooSmall, ConfigError, EmptyAfterFilter, MalformedFile, NoMaskablePositions,
    TooManyRois,
)
from .model import ROI_CAP, ModelInputs
from .tensorio import read_tensor, write_tensor

PAD, CLS, SEP, MASK = 0, 1, 2, 3
SPECIALS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]")
N_SPECIAL = len(SPECIALS)

ROI_INDEX_MAGIC = b"CAVLROIS"
ROI_INDEX_VERSION = 1

REPLACE_MASK, REPLACE_RANDOM, REPLACE_KEEP = "mask", "random", "keep"


class Vocabulary:
    """Synthetic subword vocabulary; specials occupy ids 0-3."""

    def __init__(self, size: int):
        if size <= N_SPECIAL:
            raise ConfigError(f"vocabulary needs more than {N_SPECIAL} entries")
        self.size = size
        self.id_to_token = list(SPECIALS) + [f"w{i}" for i in range(N_SPECIAL, size)]
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self) -> int:
        return self.size

    def encode(self, words) -> list[int]:
        return [self.token_to_id[w] for w in words]

    def decode(self, ids) -> list[str]:
        return [self.id_to_token[i] for i in ids]


@dataclass(frozen=True)
class CorpusConfig:
    vocab_size: int = 1000
    roi_feature_dim: int = 32
    half_len: int = 6
    template_size: int = 12
    n_styles: int = 8
    n_attributes: int = 16
    token_noise: float = 0.2
    roi_noise: float = 0.5
    min_rois: int = 4
    max_rois: int = 8

    def __post_init__(self):
        if self.half_len < 2:
            raise ConfigError("half_len must be >= 2 (style and attribute tokens)")
        if not 1 <= self.min_rois <= self.max_rois <= ROI_CAP:
            raise ConfigError(f"need 1 <= min_rois <= max_rois <= {ROI_CAP}")
        if not 0 <= self.token_noise < 1:
            raise ConfigError("token_noise must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MultimodalSample:
    id: int
    tokens: np.ndarray              # caption subwords, no specials
    rois: np.ndarray                # [K, d_v]
    latent_class: int
    caption_is_match: bool = True
    nsp_is_consecutive: bool = True

    @property
    def half_len(self) -> int:
        return len(self.tokens) // 2

    @property
    def style(self) -> int:
        return int(self.tokens[0])


@dataclass
class Corpus:
    samples: list[MultimodalSample]
    n_classes: int
    config: CorpusConfig = field(default_factory=CorpusConfig)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> MultimodalSample:
        return self.samples[i]

    @property
    def classes(self) -> np.ndarray:
        return np.array([s.latent_class for s in self.samples])


@dataclass(frozen=True)
class SyntheticWorld:
    """Class templates, ROI centres and attribute offsets shared by every split."""
    templates: np.ndarray       # [C, template_size] token ids
    centers: np.ndarray         # [C, d_v]
    attr_offsets: np.ndarray    # [A, d_v]
    style_ids: np.ndarray       # [S]
    attr_ids: np.ndarray        # [A]
    noise_pool: np.ndarray      # ids used for token noise


def build_world(seed: int, n_classes: int, cfg: CorpusConfig) -> SyntheticWorld:
    if n_classes < 2:
        raise ConfigError("n_classes must be >= 2")
    rng = np.random.default_rng([seed, 0])
    regular = np.arange(N_SPECIAL, cfg.vocab_size)
    style_ids = regular[:cfg.n_styles]
    attr_ids = regular[cfg.n_styles:cfg.n_styles + cfg.n_attributes]
    rest = regular[cfg.n_styles + cfg.n_attributes:]
    need = n_classes * cfg.template_size
    if need > rest.size:
        raise ConfigError(f"vocabulary too small for {n_classes} disjoint templates")
    picked = rng.choice(rest, size=need, replace=False)
    templates = np.sort(picked.reshape(n_classes, cfg.template_size), axis=1)
    noise_pool = np.setdiff1d(rest, picked)
    if noise_pool.size == 0:
        noise_pool = rest
    d = cfg.roi_feature_dim
    centers = rng.normal(0.0, 1.0, size=(n_classes, d))
    attr_offsets = rng.normal(0.0, 1.0, size=(cfg.n_attributes, d))
    return SyntheticWorld(templates, centers, attr_offsets, style_ids, attr_ids, noise_pool)


def _draw_half(rng, world: SyntheticWorld, cfg: CorpusConfig, c: int, style: int,
               lead: list[int]) -> list[int]:
    out = [style, *lead]
    while len(out) < cfg.half_len:
        if rng.random() < cfg.token_noise:
            out.append(int(rng.choice(world.noise_pool)))
        else:
            out.append(int(rng.choice(world.templates[c])))
    return out


_SPLIT_STREAMS = {"train": 1, "test": 2, "val": 3, "finetune": 4}


def generate_synthetic_corpus(seed: int, n_classes: int, n_samples: int,
                              config: CorpusConfig | None = None,
                              split: str = "train") -> Corpus:
    """Deterministic corpus for ``(seed, split)``; splits share one world."""
    cfg = config or CorpusConfig()
    world = build_world(seed, n_classes, cfg)
    rng = np.random.default_rng([seed, _SPLIT_STREAMS.get(split, 99)])
    samples = []
    for i in range(n_samples):
        c = int(rng.integers(n_classes))
        a = int(rng.integers(cfg.n_attributes))
        style = int(rng.choice(world.style_ids))
        first = _draw_half(rng, world, cfg, c, style, [int(world.attr_ids[a])])
        second = _draw_half(rng, world, cfg, c, style, [int(world.attr_ids[a])])
        k = int(rng.integers(cfg.min_rois, cfg.max_rois + 1))
        rois = (world.centers[c] + world.attr_offsets[a]
                + cfg.roi_noise * rng.normal(size=(k, cfg.roi_feature_dim)))
        samples.append(MultimodalSample(i, np.array(first + second, dtype=np.int64),
                                        rois, c))
    return Corpus(samples, n_classes, cfg)


# ---------------------------------------------------------------- corpus files

def write_corpus(corpus: Corpus, directory, split: str) -> tuple[Path, Path]:
    """Write ``{split}.jsonl`` plus the ``{split}.rois`` sidecar.

    Sidecar layout: magic ``CAVLROIS``, version u32, count u64, then ``count``
    u64 byte offsets (from file start), then one tensor record per sample.
    Each JSON line's ``pair_file_offset`` is its record's offset.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n = len(corpus)
    header = 8 + 4 + 8 + 8 * n
    records, offsets, pos = [], [], header
    for s in corpus.samples:
        buf = io.BytesIO()
        write_tensor(buf, s.rois)
        offsets.append(pos)
        records.append(buf.getvalue())
        pos += len(records[-1])
    rois_path = directory / f"{split}.rois"
    with open(rois_path, "wb") as fh:
        fh.write(ROI_INDEX_MAGIC + struct.pack("<IQ", ROI_INDEX_VERSION, n))
        fh.write(struct.pack(f"<{n}Q", *offsets))
        for r in records:
            fh.write(r)
    jsonl_path = directory / f"{split}.jsonl"
    with open(jsonl_path, "w", encoding="utf-8") as fh:
        for s, off in zip(corpus.samples, offsets):
            fh.write(json.dumps({"id": s.id, "latent_class": s.latent_class,
                                 "pair_file_offset": off,
                                 "tokens": [int(t) for t in s.tokens]},
                                sort_keys=True) + "\n")
    return jsonl_path, rois_path


def read_corpus(directory, split: str, n_classes: int | None = None,
                config: CorpusConfig | None = None) -> Corpus:
    directory = Path(directory)
    rows = [json.loads(line) for line in
            (directory / f"{split}.jsonl").read_text(encoding="utf-8").splitlines() if line]
    with open(directory / f"{split}.rois", "rb") as fh:
        head = fh.read(20)
        if len(head) != 20 or head[:8] != ROI_INDEX_MAGIC:
            raise MalformedFile("bad ROI sidecar header")
        version, n = struct.unpack("<IQ", head[8:])
        if version != ROI_INDEX_VERSION:
            raise MalformedFile(f"unsupported ROI sidecar version {version}")
        raw = fh.read(8 * n)
        if len(raw) != 8 * n:
            raise MalformedFile("truncated ROI index table")
        offsets = struct.unpack(f"<{n}Q", raw)
        samples = []
        for row in rows:
            off = row["pair_file_offset"]
            if off not in offsets:
                raise MalformedFile(f"offset {off} not in the ROI index table")
            fh.seek(off)
            samples.append(MultimodalSample(row["id"], np.array(row["tokens"], dtype=np.int64),
                                            read_tensor(fh), row["latent_class"]))
    if n != len(samples):
        raise MalformedFile(f"index table lists {n} records, jsonl has {len(samples)}")
    classes = n_classes or (max(s.latent_class for s in samples) + 1)
    return Corpus(samples, classes, config or CorpusConfig())


# ---------------------------------------------------------------- ROI ingestion

def write_roi_file(path, features, scores) -> None:
    """Detector output file: a feature tensor record followed by a score record."""
    features = np.asarray(features, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if features.ndim != 2 or features.shape[0] != scores.shape[0]:
        raise ValueError(f"features {features.shape} vs scores {scores.shape}")
    with open(path, "wb") as fh:
        write_tensor(fh, features)
        write_tensor(fh, scores)


def select_rois(scores, score_threshold: float = 0.5, max_rois: int = ROI_CAP) -> np.ndarray:
    """Indices of ROIs scoring strictly above the threshold, best first, at most ``max_rois``."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    keep = np.flatnonzero(scores > score_threshold)
    order = keep[np.argsort(-scores[keep], kind="stable")]
    return order[:max_rois]


def ingest_roi_features(path, score_threshold: float = 0.5,
                        max_rois: int = ROI_CAP) -> np.ndarray:
    if max_rois > ROI_CAP:
        raise TooManyRois(f"max_rois={max_rois} exceeds the cap of {ROI_CAP}")
    with open(path, "rb") as fh:
        features = read_tensor(fh)
        scores = read_tensor(fh)
        if fh.read(1):
            raise MalformedFile("trailing bytes after score record")
    if features.ndim != 2 or scores.ndim != 1 or features.shape[0] != scores.shape[0]:
        raise MalformedFile(f"features {features.shape} do not match scores {scores.shape}")
    idx = select_rois(scores, score_threshold, max_rois)
    if idx.size == 0:
        raise EmptyAfterFilter(f"no ROI scores above {score_threshold}")
    return features[idx]


# ---------------------------------------------------------------- masking

@dataclass
class MaskingPlan:
    positions: np.ndarray       # indices into the token sequence
    targets: np.ndarray         # original ids at those positions
    replacement: list[str]


def apply_masking(tokens, rng: np.random.Generator, vocab_size: int, rate: float = 0.15,
                  split=(0.8, 0.1, 0.1)) -> tuple[np.ndarray, MaskingPlan]:
    """BERT-style corruption of the non-special positions of ``tokens``."""
    if not 0 < rate < 1:
        raise ValueError(f"rate must lie in (0, 1), got {rate}")
    tokens = np.asarray(tokens, dtype=np.int64)
    maskable = np.flatnonzero(tokens >= N_SPECIAL)
    if maskable.size == 0:
        raise NoMaskablePositions("sequence has no maskable positions")
    chosen = maskable[rng.random(maskable.size) < rate]
    if chosen.size == 0:
        chosen = np.array([rng.choice(maskable)])
    out = tokens.copy()
    p_mask, p_rand, _ = split
    kinds = []
    for pos in chosen:
        u = rng.random()
        if u < p_mask:
            out[pos] = MASK
            kinds.append(REPLACE_MASK)
        elif u < p_mask + p_rand:
            out[pos] = int(rng.integers(N_SPECIAL, vocab_size))
            kinds.append(REPLACE_RANDOM)
        else:
            kinds.append(REPLACE_KEEP)
    return out, MaskingPlan(chosen, tokens[chosen].copy(), kinds)


# ---------------------------------------------------------------- batching

def pack_inputs(texts, rois) -> ModelInputs:
    """Pad caption subwords (specials added here) and ROI sets into model inputs."""
    B = len(texts)
    seqs = [np.concatenate([[CLS], np.asarray(t, dtype=np.int64), [SEP]]) for t in texts]
    nt = max(len(s) for s in seqs)
    k = max(r.shape[0] for r in rois)
    d = rois[0].shape[1]
    ids = np.full((B, nt), PAD, dtype=np.int64)
    tmask = np.zeros((B, nt), dtype=bool)
    tpool = np.zeros((B, nt), dtype=bool)
    feats = np.zeros((B, k, d))
    rmask = np.zeros((B, k), dtype=bool)
    for b, (s, r) in enumerate(zip(seqs, rois)):
        ids[b, :len(s)] = s
        tmask[b, :len(s)] = True
        tpool[b, 1:len(s) - 1] = True
        feats[b, :r.shape[0]] = r
        rmask[b, :r.shape[0]] = True
    return ModelInputs(ids, tmask, tpool, feats, rmask)


def clean_inputs(corpus: Corpus, indices) -> ModelInputs:
    """Ground-truth pairs, no corruption: what evaluation runs on."""
    ss = [corpus[int(i)] for i in indices]
    return pack_inputs([s.tokens for s in ss], [s.rois for s in ss])


def cross_inputs(corpus: Corpus, text_idx, image_idx) -> ModelInputs:
    """Sequences pairing caption ``text_idx[n]`` with image ``image_idx[n]``."""
    return pack_inputs([corpus[int(i)].tokens for i in text_idx],
                       [corpus[int(j)].rois for j in image_idx])


@dataclass
class Batch:
    inputs: ModelInputs
    mlm_positions: np.ndarray   # [M, 2] (row, sequence index)
    mlm_targets: np.ndarray     # [M]
    nsp_labels: np.ndarray      # [B] 1 = consecutive halves
    caption_labels: np.ndarray  # [B] 1 = ground-truth caption
    sample_ids: np.ndarray      # [B]

    @property
    def size(self) -> int:
        return self.inputs.batch_size

    @property
    def matched_rows(self) -> np.ndarray:
        """Rows whose text and image form a true pair (used by the contrastive term)."""
        return np.flatnonzero(self.caption_labels == 1)


def _pick(rng, candidates: np.ndarray, fallback: np.ndarray) -> int:
    pool = candidates if candidates.size else fallback
    return int(pool[rng.integers(pool.size)])


def make_batch(corpus: Corpus, indices, rng: np.random.Generator, vocab_size: int,
               mask_rate: float = 0.15, caption_prob: float = 0.5,
               nsp_prob: float = 0.5) -> Batch:
    """Assemble one pre-training batch from ``corpus[indices]``.

    Per slot: with probability ``nsp_prob`` the caption's second half comes from
    another same-class sample with a different style token; independently, with
    probability ``caption_prob`` the image is swapped for one of a different
    latent class. Captions are then masked and everything padded.
    """
    indices = np.asarray(indices, dtype=np.int64)
    B = indices.size
    if B < 2:
        raise BatchTooSmall(f"batch size must be >= 2, got {B}")
    classes = corpus.classes
    styles = np.array([s.style for s in corpus.samples])
    all_idx = np.arange(len(corpus))

    texts, images, nsp, cap = [], [], [], []
    m_pos, m_tgt = [], []
    for b, i in enumerate(indices):
        s = corpus[int(i)]
        h = s.half_len
        tokens = s.tokens
        consecutive = rng.random() >= nsp_prob
        if not consecutive:
            same = all_idx[(classes == s.latent_class) & (all_idx != i)]
            donor = _pick(rng, same[styles[same] != s.style], same if same.size else all_idx)
            tokens = np.concatenate([s.tokens[:h], corpus[donor].tokens[h:]])
        match = rng.random() >= caption_prob
        if match:
            rois = s.rois
        else:
            other = all_idx[classes != s.latent_class]
            rois = corpus[_pick(rng, other, all_idx)].rois
        seq = np.concatenate([[CLS], tokens, [SEP]])
        masked, plan = apply_masking(seq, rng, vocab_size, mask_rate)
        texts.append(masked[1:-1])
        images.append(rois)
        nsp.append(int(consecutive))
        cap.append(int(match))
        m_pos.extend((b, int(p)) for p in plan.positions)
        m_tgt.extend(int(t) for t in plan.targets)

    return Batch(pack_inputs(texts, images), np.array(m_pos, dtype=np.int64).reshape(-1, 2),
                 np.array(m_tgt, dtype=np.int64), np.array(nsp), np.array(cap), indices.copy())
