"""Retrieval scoring, Recall@K, similarity heatmaps and the metrics stream.

Retrieval scores a caption against a candidate image by encoding the pair as
one sequence (caption ``i`` with image ``j``) and taking the cosine between the
pooled text and image vectors of that sequence. The caption is never encoded
together with its ground-truth image unless that image is the candidate.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .adapters import TaskSpec, finetune_forward
from .data import Corpus, clean_inputs, cross_inputs
from .errors import MalformedFile, ShapeMismatch, SplitTooSmall
from .model import ModelConfig, ModelInputs, ModelParams, model_forward
from .objectives import aps, mean_offdiag

RECALL_KS = (1, 5, 10)
STEP_KEYS = ("step", "epoch", "lr", "mlm", "nsp", "caption", "pwcl", "total", "aps")

PairEncoder = Callable[[ModelInputs], tuple[np.ndarray, np.ndarray]]


def zero_shot_encoder(params: ModelParams, cfg: ModelConfig) -> PairEncoder:
    """Pooled pre-trained vectors, no task head."""
    def encode(inputs: ModelInputs):
        out = model_forward(params, cfg, inputs)
        return out.E_prime.data, out.F_prime.data
    return encode


def finetuned_encoder(params: ModelParams, cfg: ModelConfig, mode: str,
                      task: TaskSpec) -> PairEncoder:
    def encode(inputs: ModelInputs):
        out = finetune_forward(params, cfg, mode, task, inputs)
        return out.E.data, out.F.data
    return encode


def pair_score_matrix(encode: PairEncoder, corpus: Corpus, text_idx: Iterable[int],
                      image_idx: Iterable[int], chunk: int = 1024) -> np.ndarray:
    """``S[a, b]`` = in-sequence cosine for caption ``text_idx[a]`` with image ``image_idx[b]``."""
    ti = np.asarray(list(text_idx), dtype=np.int64)
    ii = np.asarray(list(image_idx), dtype=np.int64)
    tt, jj = np.meshgrid(ti, ii, indexing="ij")
    tt, jj = tt.ravel(), jj.ravel()
    scores = np.empty(tt.size)
    for lo in range(0, tt.size, chunk):
        hi = min(lo + chunk, tt.size)
        E, F = encode(cross_inputs(corpus, tt[lo:hi], jj[lo:hi]))
        scores[lo:hi] = np.einsum("nd,nd->n", E, F)
    return scores.reshape(ti.size, ii.size)


def gold_ranks(S: np.ndarray, gold=None) -> np.ndarray:
    """0-based rank of each row's gold candidate; ties go to the lower candidate index."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2:
        raise ShapeMismatch(f"score matrix must be 2-D, got {S.shape}")
    n, m = S.shape
    gold = np.arange(n) if gold is None else np.asarray(gold, dtype=np.int64)
    if gold.shape != (n,) or (gold >= m).any() or (gold < 0).any():
        raise ShapeMismatch(f"gold indices {gold.shape} invalid for scores {S.shape}")
    g = S[np.arange(n), gold][:, None]
    cols = np.arange(m)[None, :]
    ahead = (S > g) | ((S == g) & (cols < gold[:, None]))
    return ahead.sum(axis=1)


def recall_at_k(S: np.ndarray, ks=RECALL_KS, gold=None) -> dict[str, float]:
    ranks = gold_ranks(S, gold)
    return {f"recall@{k}": float((ranks < k).mean()) for k in ks}


def evaluate_retrieval(encode: PairEncoder, corpus: Corpus, n: int | None = None,
                       ks=RECALL_KS) -> dict[str, float]:
    """Caption-to-image Recall@K over the first ``n`` samples of ``corpus``."""
    n = len(corpus) if n is None else n
    if n > len(corpus):
        raise SplitTooSmall(f"requested {n} candidates from a split of {len(corpus)}")
    S = pair_score_matrix(encode, corpus, range(n), range(n))
    return recall_at_k(S, ks)


def clean_embeddings(params: ModelParams, cfg: ModelConfig, corpus: Corpus,
                     n: int) -> tuple[np.ndarray, np.ndarray]:
    if n > len(corpus):
        raise SplitTooSmall(f"requested {n} samples from a split of {len(corpus)}")
    out = model_forward(params, cfg, clean_inputs(corpus, range(n)))
    return out.E_prime.data, out.F_prime.data


def similarity_matrix(params: ModelParams, cfg: ModelConfig, corpus: Corpus,
                      n: int) -> np.ndarray:
    """``n x n`` cosines between each sample's text vector (rows) and image vector (columns)."""
    E, F = clean_embeddings(params, cfg, corpus, n)
    return E @ F.T


def alignment_stats(params: ModelParams, cfg: ModelConfig, corpus: Corpus,
                    n: int | None = None) -> dict[str, float]:
    n = len(corpus) if n is None else n
    E, F = clean_embeddings(params, cfg, corpus, n)
    return {"aps": aps(E, F), "off_diag": mean_offdiag(E, F)}


# ---------------------------------------------------------------- heatmap files

def write_heatmap_csv(S: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.asarray(S):
            w.writerow([f"{v:.6f}" for v in row])


def read_heatmap_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    if not rows or any(len(r) != len(rows[0]) for r in rows):
        raise MalformedFile(f"{path}: ragged or empty heatmap")
    return np.array(rows)


def to_gray(S: np.ndarray) -> np.ndarray:
    """Map cosines in [-1, 1] linearly onto 0..255."""
    return np.clip(np.rint((np.asarray(S) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def write_pgm(S: np.ndarray, path) -> None:
    g = to_gray(S)
    h, w = g.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(g.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5":
        raise MalformedFile(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    if parts[2] != b"255" or len(parts[3]) != w * h:
        raise MalformedFile(f"{path}: bad PGM header or payload size")
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def export_heatmap(params: ModelParams, cfg: ModelConfig, corpus: Corpus, n: int,
                   out_dir) -> tuple[np.ndarray, Path, Path]:
    """Write ``heatmap.csv`` and ``heatmap.pgm`` for the first ``n`` samples."""
    S = similarity_matrix(params, cfg, corpus, n)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, pgm_path = out_dir / "heatmap.csv", out_dir / "heatmap.pgm"
    write_heatmap_csv(S, csv_path)
    write_pgm(S, pgm_path)
    return S, csv_path, pgm_path


def heatmap_summary(S: np.ndarray) -> dict[str, float]:
    S = np.asarray(S)
    n = S.shape[0]
    off = ~np.eye(n, dtype=bool)
    return {"diag_mean": float(np.trace(S) / n), "off_mean": float(S[off].mean()),
            "rows_argmax_on_diag": int((S.argmax(axis=1) == np.arange(n)).sum())}


# ---------------------------------------------------------------- metrics stream

def normalize_record(rec: dict, keys=STEP_KEYS) -> dict:
    """Fill every base key (``None`` when absent) so all lines share one key set."""
    out = {k: rec.get(k) for k in keys}
    out.update(rec)
    return out


def emit_metrics(records: Iterable[dict], path, keys=STEP_KEYS) -> int:
    """Write one sorted-key JSON object per record; returns the line count.

    The file is flushed after every eval record, i.e. once per epoch.
    """
    n = 0
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(normalize_record(rec, keys), sort_keys=True) + "\n")
            n += 1
            if rec.get("kind") == "eval":
                fh.flush()
    return n


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
