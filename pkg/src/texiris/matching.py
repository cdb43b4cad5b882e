"""Iris signatures, dissimilarity scoring and DET / EER / AUC metrics."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import CapabilityError, DegenerateSignatureError, DimensionError, InputError, ProtocolError
from .tensor import Tensor, no_grad


@dataclass
class Signature:
    values: np.ndarray
    class_id: int = -1
    sample_id: int = -1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.values)):
            raise DegenerateSignatureError("signature has non-finite components")

    @property
    def dim(self):
        return self.values.size


@dataclass
class Probe:
    signature: Signature
    claim: int


def extract_signatures(model, images, class_ids=None, sample_ids=None, batch_size=32):
    """TEL activations for a stack of N x 1 x H x W images (inference mode)."""
    if getattr(model, "variant", None) is None or model.variant.head != "tel":
        raise CapabilityError("signatures need a model with a TEL head")
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[:, None]
    n = len(images)
    class_ids = np.full(n, -1) if class_ids is None else np.asarray(class_ids)
    sample_ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)
    model.eval()
    out = []
    with no_grad():
        for start in range(0, n, batch_size):
            feats = model.signature(Tensor(images[start:start + batch_size])).data
            for row, i in zip(feats, range(start, start + len(feats))):
                out.append(Signature(row, int(class_ids[i]), int(sample_ids[i])))
    return out


def extract_signature(model, image, class_id=-1, sample_id=-1):
    image = np.asarray(image, dtype=np.float32)
    while image.ndim < 4:
        image = image[None]
    return extract_signatures(model, image, [class_id], [sample_id])[0]


def _unit(v):
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise DegenerateSignatureError("cannot normalise an all-zero signature")
    return v / norm


def dissimilarity(a, b):
    """Euclidean distance between L2-normalised signatures, in [0, 2]."""
    va = a.values if isinstance(a, Signature) else np.asarray(a, dtype=np.float64)
    vb = b.values if isinstance(b, Signature) else np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape:
        raise DimensionError(f"signature dimensions differ: {va.shape} vs {vb.shape}")
    return float(np.linalg.norm(_unit(va) - _unit(vb)))


# ---------------------------------------------------------------------------
# scores
# ---------------------------------------------------------------------------

@dataclass
class ScoreSet:
    genuine: np.ndarray
    imposter: np.ndarray

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64).reshape(-1)
        self.imposter = np.asarray(self.imposter, dtype=np.float64).reshape(-1)

    def validate(self):
        if self.genuine.size == 0 or self.imposter.size == 0:
            raise InputError("need at least one genuine and one imposter score")
        both = np.concatenate([self.genuine, self.imposter])
        if not np.all(np.isfinite(both)) or np.any(both < 0):
            raise InputError("scores must be finite and non-negative")

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["kind", "score"])
        writer.writerows(("genuine", repr(float(s))) for s in self.genuine)
        writer.writerows(("imposter", repr(float(s))) for s in self.imposter)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header != ["kind", "score"]:
            raise InputError("score CSV header must be kind,score")
        genuine, imposter = [], []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                kind, score = row[0], float(row[1])
            except (IndexError, ValueError):
                raise InputError(f"malformed score row on line {line}") from None
            if kind == "genuine":
                genuine.append(score)
            elif kind == "imposter":
                imposter.append(score)
            else:
                raise InputError(f"unknown score kind {kind!r} on line {line}")
        return cls(genuine, imposter)


def run_verification(gallery, probes):
    """Score each probe against the gallery entries of its claimed identity.

    The score is the minimum dissimilarity over those entries; it is genuine
    when the probe's true class equals the claim and imposter otherwise.
    """
    enrolled = {}
    for sig in gallery:
        enrolled.setdefault(sig.class_id, []).append(sig)
    genuine, imposter = [], []
    for probe in probes:
        if probe.claim not in enrolled:
            raise ProtocolError(f"probe claims identity {probe.claim}, which is not enrolled")
        score = min(dissimilarity(probe.signature, g) for g in enrolled[probe.claim])
        (genuine if probe.signature.class_id == probe.claim else imposter).append(score)
    return ScoreSet(genuine, imposter)


def gallery_probe_split(signatures, rng):
    """Build the open-set verification trial.

    Half of the identities (rounded up) are enrolled: half of each enrolled
    identity's samples form the gallery and the rest probe with a truthful
    claim. The remaining identities are imposters; each of their samples
    probes while claiming a uniformly random enrolled identity.
    """
    by_class = {}
    for sig in signatures:
        by_class.setdefault(sig.class_id, []).append(sig)
    classes = sorted(by_class)
    if len(classes) < 2:
        raise ProtocolError("verification needs at least two identities")
    order = [classes[i] for i in rng.permutation(len(classes))]
    n_imposter = len(order) // 2
    enrolled, imposters = order[:len(order) - n_imposter], order[len(order) - n_imposter:]
    gallery, probes = [], []
    for c in enrolled:
        sigs = by_class[c]
        if len(sigs) < 2:
            raise ProtocolError(f"identity {c} needs >= 2 samples to be enrolled and probed")
        idx = rng.permutation(len(sigs))
        half = (len(sigs) + 1) // 2
        gallery += [sigs[i] for i in idx[:half]]
        probes += [Probe(sigs[i], c) for i in idx[half:]]
    for c in imposters:
        for sig in by_class[c]:
            probes.append(Probe(sig, int(enrolled[rng.integers(len(enrolled))])))
    return gallery, probes


# ---------------------------------------------------------------------------
# DET analysis
# ---------------------------------------------------------------------------

@dataclass
class DetCurve:
    thresholds: np.ndarray
    far: np.ndarray
    frr: np.ndarray

    def __len__(self):
        return len(self.thresholds)

    def to_csv(self):
        rows = ["threshold,far,frr"]
        rows += [f"{t!r},{a!r},{r!r}" for t, a, r in
                 zip(self.thresholds.tolist(), self.far.tolist(), self.frr.tolist())]
        return "\n".join(rows) + "\n"


def det_curve(scores):
    """Sweep every distinct score as threshold (accept iff score <= t).

    The first point (t = -inf) accepts nothing: FAR 0, FRR 1.
    """
    scores.validate()
    gen = np.sort(scores.genuine)
    imp = np.sort(scores.imposter)
    t = np.unique(np.concatenate([gen, imp]))
    far = np.searchsorted(imp, t, side="right") / imp.size
    frr = 1.0 - np.searchsorted(gen, t, side="right") / gen.size
    return DetCurve(np.concatenate([[-np.inf], t]),
                    np.concatenate([[0.0], far]),
                    np.concatenate([[1.0], frr]))


def equal_error_rate(curve):
    """FAR = FRR crossing, linearly interpolated between bracketing thresholds."""
    diff = curve.far - curve.frr
    i = int(np.argmax(diff >= 0))  # diff[0] = -1 and diff[-1] = 1 always
    d0, d1 = diff[i - 1], diff[i]
    alpha = -d0 / (d1 - d0)
    return float(curve.far[i - 1] + alpha * (curve.far[i] - curve.far[i - 1]))


def area_under_det(curve):
    """Trapezoidal integral of FRR over FAR on [0, 1] (lower is better)."""
    far, frr = curve.far, curve.frr
    return float(np.sum(np.diff(far) * (frr[1:] + frr[:-1]) * 0.5))


def det_metrics(scores):
    curve = det_curve(scores)
    return curve, equal_error_rate(curve), area_under_det(curve)


def format_report(items):
    """Render a flat mapping as ``key: value`` lines."""
    lines = []
    for key, value in items.items():
        if isinstance(value, float):
            value = f"{value:.6g}" if math.isfinite(value) else str(value)
        lines.append(f"{key}: {value}")
    return "\n".join(lines) + "\n"
