"""Confidence measures, threshold schedules and the accept/reject rule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import as_vector, cosine_similarity, sigmoid, softmax

SOFTMAX = "softmax_response"
STATE = "state_similarity"
CLASSIFIER = "classifier"
NEVER = "never"
ALWAYS_AT = "always_at"

KINDS = (SOFTMAX, STATE, CLASSIFIER, NEVER, ALWAYS_AT)


@dataclass(frozen=True)
class ExitTechnique:
    kind: str
    layer: int | None = None  # only for always_at

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown exit technique {self.kind!r}")
        if self.kind == ALWAYS_AT:
            if self.layer is None or self.layer < 1:
                raise ValueError("always_at needs a layer >= 1")
        elif self.layer is not None:
            raise ValueError(f"{self.kind} takes no layer")

    @classmethod
    def parse(cls, text: str) -> "ExitTechnique":
        """Parse CLI spellings: softmax, state, classifier, never, always-at=K."""
        aliases = {"softmax": SOFTMAX, "state": STATE, "similarity": STATE}
        text = text.strip()
        for prefix in ("always-at=", "always_at=", "always-at:", "always_at:"):
            if text.startswith(prefix):
                return cls(ALWAYS_AT, int(text[len(prefix):]))
        return cls(aliases.get(text, text))

    @property
    def label(self) -> str:
        return f"always_at({self.layer})" if self.kind == ALWAYS_AT else self.kind

    @property
    def is_confidence(self) -> bool:
        return self.kind in (SOFTMAX, STATE, CLASSIFIER)


@dataclass(frozen=True)
class ThresholdSchedule:
    lambda0: float
    decay: float = 1.0
    floor: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must lie in (0, 1]")
        if self.floor < 0.0:
            raise ValueError("floor must be >= 0")
        if self.floor > self.lambda0:
            raise ValueError("floor must not exceed lambda0")

    def threshold_at(self, i: int) -> float:
        if i < 1:
            raise ValueError("layer index must be >= 1")
        return max(self.floor, self.lambda0 * self.decay ** (i - 1))


# Table-1 thresholds for the 8-layer model.
DEFAULT_THRESHOLDS = {SOFTMAX: 0.85, CLASSIFIER: 0.9, STATE: 0.95}


def softmax_response_confidence(logits: np.ndarray) -> float:
    """Gap between the two largest softmax probabilities."""
    logits = as_vector(logits)
    if logits.size < 2:
        raise ValueError("softmax response needs at least two logits")
    p = softmax(logits)
    top2 = np.partition(p, -2)[-2:]
    return float(top2[1] - top2[0])


def state_similarity_confidence(h_prev: np.ndarray, h_cur: np.ndarray) -> float:
    return cosine_similarity(h_prev, h_cur)


def classifier_confidence(h: np.ndarray, probe: tuple[np.ndarray, float]) -> float:
    w, b = probe
    h = as_vector(h)
    w = as_vector(w)
    if h.shape != w.shape:
        raise ValueError(f"probe width {w.shape[0]} != hidden size {h.shape[0]}")
    return sigmoid(float(np.dot(w, h)) + float(b))


def confidence(technique: ExitTechnique, evidence) -> float:
    """Score ``evidence`` with the technique's measure.

    Evidence shapes: logits for softmax_response, ``(h_prev, h_cur)`` for
    state_similarity, ``(h, (w, b))`` for classifier.
    """
    kind = technique.kind
    try:
        if kind == SOFTMAX:
            return softmax_response_confidence(evidence)
        if kind == STATE:
            h_prev, h_cur = evidence
            return state_similarity_confidence(h_prev, h_cur)
        if kind == CLASSIFIER:
            h, probe = evidence
            return classifier_confidence(h, probe)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"evidence does not match technique {kind}: {exc}") from exc
    raise ValueError(f"{kind} has no confidence measure")


def decide(technique: ExitTechnique, evidence, threshold: float, layer: int) -> bool:
    """Accept an exit at ``layer`` iff the confidence strictly exceeds ``threshold``."""
    if technique.kind == NEVER:
        return False
    if technique.kind == ALWAYS_AT:
        return layer >= technique.layer
    return confidence(technique, evidence) > threshold
