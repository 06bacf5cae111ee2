"""Reference-set identification: embed, take the minimum squared distance, threshold.

A test video is REAL when its smallest squared embedding distance to any
frame of any reference video is at most ``threshold_sq`` (1.1 by default).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tid_net
from .errors import DomainError, EmptyInputError, EvalError, IdentityMismatchError, ProtocolError

DEFAULT_THRESHOLD_SQ = 1.1


class Label(str, enum.Enum):
    REAL = "REAL"
    FAKE = "FAKE"


@dataclass(frozen=True)
class ReferenceSet:
    identity_id: str
    embeddings: tuple
    contexts: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "embeddings", tuple(self.embeddings))
        object.__setattr__(self, "contexts", tuple(self.contexts))
        if not self.embeddings:
            raise EmptyInputError("a reference set needs at least one video")
        ids = {e.identity_id for e in self.embeddings if e.identity_id is not None}
        if ids - {self.identity_id}:
            raise IdentityMismatchError(f"references span identities {sorted(ids)}")

    def __len__(self):
        return len(self.embeddings)


@dataclass(frozen=True)
class Verdict:
    distance: float
    threshold_sq: float
    label: Label
    per_reference: tuple = ()
    video_id: str = ""


def _vectors(x):
    return np.asarray(getattr(x, "vectors", x), dtype=np.float64)


def min_sq_distance(a, b, chunk: int = 64) -> float:
    """min over (t, t') of |a[t] - b[t']|^2, computed from explicit differences."""
    a, b = _vectors(a), _vectors(b)
    if len(a) == 0 or len(b) == 0:
        raise EmptyInputError("empty embedding sequence")
    best = math.inf
    for s in range(0, len(a), chunk):
        diff = a[s:s + chunk, None, :] - b[None, :, :]
        best = min(best, float(np.min(np.sum(diff * diff, axis=2))))
    return best


def min_distance(test, refs) -> tuple:
    """(overall distance, per-reference distances); overall is the min over references."""
    embs = refs.embeddings if isinstance(refs, ReferenceSet) else tuple(refs)
    if not embs:
        raise EmptyInputError("no reference videos")
    per = tuple(min_sq_distance(test, r) for r in embs)
    return min(per), per


def verify(distance: float, threshold_sq: float = DEFAULT_THRESHOLD_SQ,
           per_reference=(), video_id: str = "") -> Verdict:
    if distance < 0 or math.isnan(distance):
        raise DomainError(f"distance must be non-negative, got {distance}")
    label = Label.FAKE if distance > threshold_sq else Label.REAL
    return Verdict(float(distance), float(threshold_sq), label, tuple(per_reference), video_id)


def _is_fake(label) -> bool:
    if isinstance(label, bool):
        return label
    return str(getattr(label, "value", label)).upper() == "FAKE"


def auc(scored) -> float:
    """Mann-Whitney AUC: P(fake distance > real distance), ties count one half."""
    fake = np.array([d for d, l in scored if _is_fake(l)], dtype=np.float64)
    real = np.array([d for d, l in scored if not _is_fake(l)], dtype=np.float64)
    if len(fake) == 0 or len(real) == 0:
        raise EvalError("AUC needs both real and fake videos")
    real_sorted = np.sort(real)
    below = np.searchsorted(real_sorted, fake, side="left")
    not_above = np.searchsorted(real_sorted, fake, side="right")
    wins = below.sum() + 0.5 * (not_above - below).sum()
    return float(wins / (len(fake) * len(real)))


def evaluate(scored, threshold_sq: float = DEFAULT_THRESHOLD_SQ) -> tuple:
    """(accuracy at the fixed threshold, AUC) for (distance, true label) pairs."""
    scored = list(scored)
    if not scored:
        raise EvalError("nothing to evaluate")
    correct = sum((verify(d, threshold_sq).label is Label.FAKE) == _is_fake(l) for d, l in scored)
    return correct / len(scored), auc(scored)


EXPORT_HEADER = "group\tvideo_id\tdistance\tlabel"


def export_distances(verdicts, groups) -> str:
    """Tab-separated (group, video_id, distance, label) rows for plotting."""
    verdicts = list(verdicts)
    groups = list(groups) if not isinstance(groups, str) else [groups] * len(verdicts)
    if len(groups) != len(verdicts):
        raise ValueError("one group label per verdict is required")
    rows = [EXPORT_HEADER]
    for g, v in zip(groups, verdicts):
        rows.append(f"{g}\t{v.video_id}\t{v.distance!r}\t{v.label.value}")
    return "\n".join(rows) + "\n"


def parse_distances(text: str) -> list:
    lines = text.splitlines()
    if not lines or lines[0] != EXPORT_HEADER:
        raise ValueError("not a distance export")
    out = []
    for line in lines[1:]:
        if line:
            g, vid, d, lab = line.split("\t")
            out.append((g, vid, float(d), lab))
    return out


def leave_one_context_out(test, pristine) -> list:
    """Pristine videos of the identity recorded in a context other than the test video's.

    ``pristine`` holds objects with ``context`` and ``video_id`` attributes
    (FeatureSequence, ManifestRecord); the test video itself is always dropped.
    """
    refs = [p for p in pristine
            if p.context != test.context and p.video_id != test.video_id]
    if not refs:
        raise ProtocolError(f"no reference of {getattr(test, 'identity_id', '?')} outside context "
                            f"{test.context!r}")
    return refs


def reference_set(params, cfg, seqs, stats=None) -> ReferenceSet:
    seqs = list(seqs)
    if not seqs:
        raise EmptyInputError("no reference videos")
    embs = [tid_net.embed(params, s, cfg, stats) for s in seqs]
    return ReferenceSet(seqs[0].identity_id, embs, [s.context for s in seqs])


def score_video(params, cfg, test_seq, refs: ReferenceSet, stats=None,
                threshold_sq: float = DEFAULT_THRESHOLD_SQ) -> Verdict:
    e = tid_net.embed(params, test_seq, cfg, stats)
    d, per = min_distance(e, refs)
    return verify(d, threshold_sq, per, video_id=test_seq.video_id)


@dataclass
class EvaluationReport:
    accuracy: float
    auc: float
    verdicts: list
    truth: list
    manipulations: list = field(default_factory=list)

    def auc_for(self, manipulation: str) -> float:
        scored = [(v.distance, t) for v, t, m in zip(self.verdicts, self.truth, self.manipulations)
                  if m in (manipulation, "none")]
        return auc(scored)

    def summary_rows(self) -> list:
        rows = [("accuracy", self.accuracy), ("auc", self.auc)]
        for m in sorted(set(self.manipulations) - {"none"}):
            rows.append((f"auc_{m}", self.auc_for(m)))
        rows.append(("n_real", sum(not _is_fake(t) for t in self.truth)))
        rows.append(("n_fake", sum(_is_fake(t) for t in self.truth)))
        return rows


def evaluate_benchmark(params, cfg, references, tests, labels, stats=None,
                       threshold_sq: float = DEFAULT_THRESHOLD_SQ) -> EvaluationReport:
    """Leave-one-context-out evaluation.

    ``references`` and ``tests`` are lists of FeatureSequence; ``labels`` maps
    video_id to (label, manipulation).
    """
    by_id: dict = {}
    for r in references:
        by_id.setdefault(r.identity_id, []).append(r)
    emb_cache = {r.video_id: tid_net.embed(params, r, cfg, stats) for r in references}
    verdicts, truth, manips = [], [], []
    for t in tests:
        pool = leave_one_context_out(t, by_id.get(t.identity_id, []))
        e = tid_net.embed(params, t, cfg, stats)
        d, per = min_distance(e, [emb_cache[p.video_id] for p in pool])
        verdicts.append(verify(d, threshold_sq, per, video_id=t.video_id))
        lab, manip = labels[t.video_id]
        truth.append(lab)
        manips.append(manip)
    acc, a = evaluate([(v.distance, l) for v, l in zip(verdicts, truth)], threshold_sq)
    return EvaluationReport(acc, a, verdicts, truth, manips)
