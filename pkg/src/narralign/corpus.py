"""Narrated-video data model, JSONL persistence, and a synthetic corpus.

The generator reproduces the three noise sources of real narrated video at
desk scale: sentences that nothing on screen depicts, spoken timestamps
offset from the moment the action happens, and narration order that
violates visual order. Every video carries hidden ground truth so the
denoising pipeline can be scored against what actually happened.

The synthetic world is built from a global bank of "topic" vectors. Each
alignable sentence names one topic through a dedicated token; the frames
of its true segment carry that topic vector plus Gaussian noise.
Unalignable sentences use chatter tokens that are never painted into any
frame.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "GtSpan",
    "SentenceRecord",
    "NarratedVideo",
    "NoiseModelParams",
    "CorpusDims",
    "WindowSample",
    "CorpusError",
    "ParseError",
    "mask_from_interval",
    "generate_corpus",
    "window_sample",
    "save_jsonl",
    "load_jsonl",
    "corpus_stats",
]

MAX_TOKENS_PER_SENTENCE = 32


class CorpusError(ValueError):
    """A corpus-level contract was violated (e.g. sampling an empty video)."""


class ParseError(ValueError):
    """A corpus file line could not be parsed."""


@dataclass(frozen=True)
class GtSpan:
    """Hidden ground truth for one sentence."""

    alignable: bool
    start: float | None = None
    end: float | None = None


@dataclass(eq=False)
class SentenceRecord:
    text: str
    tokens: list[int]
    start: float
    end: float
    gt: GtSpan | None = None

    def __eq__(self, other):
        if not isinstance(other, SentenceRecord):
            return NotImplemented
        return (
            self.text == other.text
            and self.tokens == other.tokens
            and self.start == other.start
            and self.end == other.end
            and self.gt == other.gt
        )


@dataclass(eq=False)
class NarratedVideo:
    id: str
    features: np.ndarray  # (T, C) float64, one row per second
    sentences: list[SentenceRecord]

    @property
    def duration(self) -> int:
        return self.features.shape[0]

    def __eq__(self, other):
        if not isinstance(other, NarratedVideo):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.features, other.features)
            and self.sentences == other.sentences
        )


@dataclass(frozen=True)
class NoiseModelParams:
    frac_alignable: float = 0.30
    frac_well_aligned: float = 0.15
    max_offset_sec: float = 8.0
    order_shuffle_prob: float = 0.15
    feature_noise: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if not (0.0 <= self.frac_well_aligned <= self.frac_alignable <= 1.0):
            raise ValueError(
                "need 0 <= frac_well_aligned <= frac_alignable <= 1, got "
                f"{self.frac_well_aligned} / {self.frac_alignable}"
            )
        if self.max_offset_sec < 0 or not (0.0 <= self.order_shuffle_prob <= 1.0):
            raise ValueError("invalid offset or shuffle probability")


@dataclass(frozen=True)
class CorpusDims:
    duration_sec: int = 120
    feature_dim: int = 64
    text_dim: int = 32  # hint for the token-embedding width of models trained on this corpus
    vocab_size: int = 256

    def validate(self) -> None:
        if min(self.duration_sec, self.feature_dim, self.text_dim, self.vocab_size) <= 0:
            raise ValueError("corpus dims must be positive")
        if self.vocab_size < 32:
            raise ValueError("vocab too small to hold topic/chatter/filler pools")


# vocabulary layout: first half topics, next quarter chatter, rest filler
def _vocab_pools(vocab_size: int) -> tuple[range, range, range]:
    n_topics = vocab_size // 2
    n_chatter = vocab_size // 4
    topics = range(0, n_topics)
    chatter = range(n_topics, n_topics + n_chatter)
    filler = range(n_topics + n_chatter, vocab_size)
    return topics, chatter, filler


def _token_text(tid: int, pools: tuple[range, range, range]) -> str:
    topics, chatter, _ = pools
    if tid in topics:
        return f"step{tid}"
    if tid in chatter:
        return f"aside{tid}"
    return f"word{tid}"


def mask_from_interval(start: float, end: float, length: int) -> np.ndarray:
    """Binary mask with ones on the second grid covered by [start, end)."""
    if end <= start:
        raise CorpusError(f"empty interval [{start}, {end})")
    lo = max(int(math.floor(start)), 0)
    hi = min(int(math.ceil(end)), length)
    if hi <= lo:
        raise CorpusError(f"interval [{start}, {end}) does not touch [0, {length})")
    mask = np.zeros(length, dtype=np.int8)
    mask[lo:hi] = 1
    return mask


def _narration_intervals(duration: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Back-to-back spoken intervals with occasional short pauses."""
    intervals = []
    t = int(rng.integers(0, 3))
    while t < duration - 3:
        length = int(rng.integers(4, 11))
        end = min(t + length, duration)
        intervals.append((t, end))
        t = end + int(rng.integers(0, 4))
    if not intervals:
        intervals.append((0, duration))
    return intervals


def _feasible_offsets(a: int, b: int, duration: int, max_offset: int) -> list[int]:
    lo = -min(a, max_offset)
    hi = min(duration - b, max_offset)
    return [d for d in range(lo, hi + 1) if d != 0]


def _generate_video(
    index: int,
    params: NoiseModelParams,
    dims: CorpusDims,
    topic_vectors: np.ndarray,
) -> NarratedVideo:
    rng = np.random.default_rng([params.seed, 7 * index + 1])
    pools = _vocab_pools(dims.vocab_size)
    topics, chatter, filler = pools
    duration = dims.duration_sec

    spoken = _narration_intervals(duration, rng)
    k = len(spoken)
    n_align = int(round(params.frac_alignable * k))
    n_well = min(int(round(params.frac_well_aligned * k)), n_align)
    align_idx = sorted(rng.choice(k, size=n_align, replace=False).tolist()) if n_align else []
    well_set = set(rng.choice(n_align, size=n_well, replace=False).tolist()) if n_well else set()

    max_offset = int(params.max_offset_sec)
    gt_spans: dict[int, tuple[int, int]] = {}
    misaligned: list[int] = []
    for pos, k_i in enumerate(align_idx):
        a, b = spoken[k_i]
        if pos in well_set:
            gt_spans[k_i] = (a, b)
            continue
        options = _feasible_offsets(a, b, duration, max_offset)
        delta = int(rng.choice(options)) if options else 0
        gt_spans[k_i] = (a + delta, b + delta)
        misaligned.append(k_i)

    # order violations: adjacent misaligned sentences swap true segments
    i = 0
    while i + 1 < len(misaligned):
        if rng.random() < params.order_shuffle_prob:
            ka, kb = misaligned[i], misaligned[i + 1]
            gt_spans[ka], gt_spans[kb] = gt_spans[kb], gt_spans[ka]
            i += 2
        else:
            i += 1

    features = rng.normal(scale=params.feature_noise, size=(duration, dims.feature_dim))
    topic_ids = rng.choice(len(topics), size=n_align, replace=False) if n_align else []
    sentence_topic = dict(zip(align_idx, [int(t) for t in topic_ids]))
    for k_i, topic in sentence_topic.items():
        gs, ge = gt_spans[k_i]
        features[gs:ge] += topic_vectors[topic]

    sentences = []
    for k_i, (a, b) in enumerate(spoken):
        if k_i in sentence_topic:
            tokens = [int(topics[sentence_topic[k_i]])]
            tokens += [int(rng.choice(filler)) for _ in range(int(rng.integers(2, 7)))]
            gs, ge = gt_spans[k_i]
            gt = GtSpan(True, float(gs), float(ge))
        else:
            tokens = [int(rng.choice(chatter)) for _ in range(int(rng.integers(1, 4)))]
            tokens += [int(rng.choice(filler)) for _ in range(int(rng.integers(1, 5)))]
            gt = GtSpan(False)
        rng.shuffle(tokens)
        text = " ".join(_token_text(t, pools) for t in tokens)
        sentences.append(SentenceRecord(text, tokens, float(a), float(b), gt))

    return NarratedVideo(id=f"synth{index:05d}", features=features, sentences=sentences)


def generate_corpus(
    n_videos: int,
    params: NoiseModelParams = NoiseModelParams(),
    dims: CorpusDims = CorpusDims(),
) -> list[NarratedVideo]:
    """Deterministic synthetic corpus; same (params, dims) give identical output."""
    if n_videos < 0:
        raise ValueError("n_videos must be >= 0")
    params.validate()
    dims.validate()
    bank_rng = np.random.default_rng([params.seed, 0])
    topics, _, _ = _vocab_pools(dims.vocab_size)
    vecs = bank_rng.normal(size=(len(topics), dims.feature_dim))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    return [_generate_video(i, params, dims, vecs) for i in range(n_videos)]


@dataclass
class WindowSample:
    """A contiguous crop of one video plus the sentences it touches.

    Masks live in window coordinates; `sentences` keeps the original
    records so tokens and hidden ground truth stay available.
    """

    video_id: str
    start: int
    features: np.ndarray
    sentences: list[SentenceRecord]
    masks: list[np.ndarray]
    orig_indices: list[int]

    @property
    def width(self) -> int:
        return self.features.shape[0]


def window_sample(video: NarratedVideo, window_sec: int, rng: np.random.Generator) -> WindowSample:
    """Uniformly pick a window start among those whose crop contains a sentence."""
    if not video.sentences:
        raise CorpusError(f"video {video.id} has no sentences to sample")
    t_total = video.duration
    w = int(window_sec)
    if w > t_total:
        raise CorpusError(f"window {w}s exceeds video duration {t_total}s")
    starts = []
    for s in range(t_total - w + 1):
        if any(rec.start < s + w and rec.end > s for rec in video.sentences):
            starts.append(s)
    if not starts:
        raise CorpusError(f"video {video.id} has no window containing a sentence")
    s = int(rng.choice(starts))
    kept, masks, idxs = [], [], []
    for i, rec in enumerate(video.sentences):
        rel_a = max(rec.start - s, 0.0)
        rel_b = min(rec.end - s, float(w))
        if rel_b <= rel_a:
            continue
        kept.append(rec)
        masks.append(mask_from_interval(rel_a, rel_b, w))
        idxs.append(i)
    return WindowSample(video.id, s, video.features[s : s + w], kept, masks, idxs)


# ---------------------------------------------------------------------------
# JSON Lines persistence


def _sentence_to_obj(rec: SentenceRecord) -> dict:
    obj = {"text": rec.text, "tokens": rec.tokens, "start": rec.start, "end": rec.end}
    if rec.gt is not None:
        gt = {"alignable": rec.gt.alignable}
        if rec.gt.alignable:
            gt["start"] = rec.gt.start
            gt["end"] = rec.gt.end
        obj["gt"] = gt
    return obj


def sentence_from_obj(obj: dict) -> SentenceRecord:
    gt = None
    if "gt" in obj:
        g = obj["gt"]
        if g["alignable"]:
            gt = GtSpan(True, float(g["start"]), float(g["end"]))
        else:
            gt = GtSpan(False)
    tokens = [int(t) for t in obj["tokens"]]
    if not tokens:
        raise ValueError("sentence has an empty token list")
    return SentenceRecord(str(obj["text"]), tokens, float(obj["start"]), float(obj["end"]), gt)


def save_jsonl(videos: Iterable[NarratedVideo], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in videos:
            obj = {
                "id": v.id,
                "features": v.features.tolist(),
                "sentences": [_sentence_to_obj(r) for r in v.sentences],
            }
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def load_jsonl(path: str | os.PathLike) -> list[NarratedVideo]:
    videos = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                features = np.array(obj["features"], dtype=np.float64)
                if features.ndim != 2:
                    raise ValueError("features must be a T x C matrix")
                sentences = [sentence_from_obj(s) for s in obj["sentences"]]
                videos.append(NarratedVideo(str(obj["id"]), features, sentences))
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from exc
    return videos


def corpus_stats(videos: Sequence[NarratedVideo]) -> dict:
    n_sent = sum(len(v.sentences) for v in videos)
    n_align = 0
    n_well = 0
    for v in videos:
        for rec in v.sentences:
            if rec.gt is not None and rec.gt.alignable:
                n_align += 1
                if rec.gt.start == rec.start and rec.gt.end == rec.end:
                    n_well += 1
    return {
        "n_videos": len(videos),
        "n_sentences": n_sent,
        "frac_alignable": n_align / n_sent if n_sent else 0.0,
        "frac_well_aligned": n_well / n_sent if n_sent else 0.0,
    }
