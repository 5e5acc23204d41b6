"""Corpus BLEU and the diagnostic measurements logged during and after
training: teacher-forced loss, output entropy, word accuracy, gradient norms
at the embedding and classification layers, and beam diversity per position.

All functions are pure in (model snapshot, dataset): repeated calls return
identical values, and everything teacher-forced runs with dropout off.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from captionkit import autodiff as ad
from captionkit.data import END_ID, TokenSeq

BLEU_EPSILON = 1e-9
PROB_FLOOR = 1e-12


@dataclass
class AnalysisRecord:
    """One epoch/split row of the metrics table."""

    epoch: int
    split: str
    loss: float
    accuracy: float
    entropy: float
    grad_norm_in: float
    grad_norm_out: float

    def csv_row(self) -> str:
        return (
            f"{self.epoch},{self.split},{self.loss:.10g},{self.accuracy:.10g},"
            f"{self.entropy:.10g},{self.grad_norm_in:.10g},{self.grad_norm_out:.10g}"
        )


METRICS_CSV_HEADER = "epoch,split,loss,accuracy,entropy,grad_norm_in,grad_norm_out"


# ---------------------------------------------------------------------------
# BLEU


def _ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates, references, max_n: int = 4):
    """Corpus-level BLEU-1..max_n with clipping and brevity penalty.

    ``candidates`` is a list of token lists; ``references`` a parallel list of
    lists of token lists (multiple references per image allowed). The
    effective reference length is the closest to the candidate's, ties going
    to the shorter one. An order with zero clipped matches contributes
    log(1e-9) instead of log(0), so zero-overlap corpora stay representable.
    """
    candidates = list(candidates)
    references = list(references)
    if not candidates:
        raise ValueError("empty candidate set")
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} reference groups")
    clipped = [0] * max_n
    totals = [0] * max_n
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        refs = list(refs)
        if not refs:
            raise ValueError("every candidate needs at least one reference")
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = _ngram_counts(cand, n)
            if not counts:
                continue
            best = Counter()
            for ref in refs:
                for gram, c in _ngram_counts(ref, n).items():
                    if c > best[gram]:
                        best[gram] = c
            totals[n - 1] += sum(counts.values())
            clipped[n - 1] += sum(min(c, best[gram]) for gram, c in counts.items())
    if cand_len == 0:
        return tuple(0.0 for _ in range(max_n))
    brevity = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    scores = []
    log_terms = []
    for n in range(1, max_n + 1):
        p = clipped[n - 1] / totals[n - 1] if totals[n - 1] else 0.0
        log_terms.append(math.log(p) if p > 0.0 else math.log(BLEU_EPSILON))
        scores.append(brevity * math.exp(sum(log_terms) / n))
    return tuple(scores)


# ---------------------------------------------------------------------------
# teacher-forced measurements


def _teacher_forced_probs(model, example) -> np.ndarray:
    return model.forward_probs(example.seq.input_ids, example.features)


def mean_nll(model, examples) -> float:
    """Mean over examples of the per-token mean NLL (the training objective)."""
    total = 0.0
    for ex in examples:
        probs = _teacher_forced_probs(model, ex)
        rows = ex.seq.valid_len
        sel = probs[np.arange(rows), ex.seq.target_ids[:rows]]
        total += -np.log(np.maximum(sel, PROB_FLOOR)).mean()
    return total / len(examples)


def entropy_profile(model, examples) -> float:
    """Mean output entropy in nats over all unpadded positions."""
    total = 0.0
    count = 0
    for ex in examples:
        probs = _teacher_forced_probs(model, ex)[: ex.seq.valid_len]
        total += float(_row_entropies(probs).sum())
        count += probs.shape[0]
    return total / count


def _row_entropies(rows: np.ndarray) -> np.ndarray:
    contrib = np.where(rows > 0.0, rows * np.log(np.where(rows > 0.0, rows, 1.0)), 0.0)
    return -contrib.sum(axis=-1)


def word_accuracy(model, examples) -> float:
    """Fraction of unpadded positions where argmax(probs) is the target.

    Ties resolve to the lowest token id, the same rule greedy decoding uses.
    """
    hits = 0
    count = 0
    for ex in examples:
        probs = _teacher_forced_probs(model, ex)[: ex.seq.valid_len]
        hits += int((probs.argmax(axis=-1) == ex.seq.target_ids[: ex.seq.valid_len]).sum())
        count += probs.shape[0]
    return hits / count


@dataclass
class ProbeResult:
    grad_norm_in: float
    grad_norm_out: float
    finite: bool


def grad_norm_probe(model, examples) -> ProbeResult:
    """L2 norms of the teacher-forced NLL gradient at the word-embedding table
    and at the final output projection, averaged over the probe examples.

    The loss is the same clamped per-token mean the trainer optimizes.
    Non-finite gradients are reported via the ``finite`` flag rather than
    raised, so a diverging run still produces a (flagged) record.
    """
    params = model.parameters()
    norm_in = 0.0
    norm_out = 0.0
    finite = True
    for ex in examples:
        ad.zero_gradients(params)
        probs, _ = model.forward(ex.seq.input_ids, ex.features, train_mode=False)
        rows = ex.seq.valid_len
        sel = ad.clamp_min(ad.pick(probs, ex.seq.target_ids[:rows]), PROB_FLOOR)
        loss = ad.scale(ad.sum_all(ad.log(sel)), -1.0 / rows)
        ad.backward(loss)
        g_in = model.word_embedding.grad
        g_out = model.output_projection.grad
        if not (np.all(np.isfinite(g_in)) and np.all(np.isfinite(g_out))):
            finite = False
        norm_in += float(np.linalg.norm(g_in))
        norm_out += float(np.linalg.norm(g_out))
    ad.zero_gradients(params)
    n = len(examples)
    return ProbeResult(norm_in / n, norm_out / n, finite)


# ---------------------------------------------------------------------------
# beam diversity


def unique_words_per_position(beam_outputs, positions: int = 13) -> list[int]:
    """Distinct tokens emitted at each generation position 1..positions,
    counted across every retained beam of every image.

    ``beam_outputs`` is a list (per image) of lists of TokenSeq hypotheses.
    Padding and end tokens are not counted.
    """
    seen: list[set] = [set() for _ in range(positions)]
    for beams in beam_outputs:
        for seq in beams:
            ids = seq.target_ids if isinstance(seq, TokenSeq) else np.asarray(seq)
            for pos, token_id in enumerate(ids[:positions]):
                if token_id == END_ID:
                    break
                seen[pos].add(int(token_id))
    return [len(s) for s in seen]
