"""Within- and cross-dataset verification experiments."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ProtocolError
from .matching import det_metrics, extract_signatures, format_report, gallery_probe_split, run_verification
from .training import TrainConfig, train_stage1, train_stage2

# (label, pool, head) rows of the ablation table
ABLATION_ROWS = (("plain", "max", "fc"), ("EAP", "eap", "fc"), ("EAP+TEL", "eap", "tel"))


@dataclass
class ExperimentConfig:
    stage1: TrainConfig = field(default_factory=lambda: TrainConfig(
        stage=1, epochs=12, batch_size=8))
    stage2: TrainConfig = field(default_factory=lambda: TrainConfig(stage=2, epochs=8))
    test_fraction: float = 0.2
    ablation: bool = False
    # shorter schedule for the five extra ablation models; None reuses stage2.epochs
    ablation_epochs: int = 4


@dataclass
class VerificationResult:
    eer: float
    auc: float
    curve: object
    scores: object


@dataclass
class WithinReport:
    train_classes: list
    test_classes: list
    stage1: object
    stage2: object
    verification: VerificationResult
    ablation: dict = field(default_factory=dict)  # (label, init) -> best val accuracy
    model: object = None

    def summary(self):
        items = {
            "protocol": "within",
            "train_classes": len(self.train_classes),
            "test_classes": " ".join(map(str, self.test_classes)),
            "stage1_best_val_ssim": self.stage1.best_metric if self.stage1 else float("nan"),
            "stage2_best_val_accuracy": self.stage2.best_metric,
            "genuine_scores": self.verification.scores.genuine.size,
            "imposter_scores": self.verification.scores.imposter.size,
            "eer": self.verification.eer,
            "auc": self.verification.auc,
        }
        for (label, init), acc in self.ablation.items():
            items[f"ablation[{label},{init}]"] = acc
        return format_report(items)

    def ablation_table(self):
        lines = [f"{'variant':<10} {'random':>8} {'pretrained':>11}"]
        for label, _, _ in ABLATION_ROWS:
            r = self.ablation.get((label, "random"), float("nan"))
            p = self.ablation.get((label, "pretrained"), float("nan"))
            lines.append(f"{label:<10} {100 * r:>7.2f}% {100 * p:>10.2f}%")
        return "\n".join(lines)


@dataclass
class CrossReport:
    folds: list  # (fold index, classes, eer, auc)

    @property
    def eer(self):
        return float(np.mean([f[2] for f in self.folds]))

    @property
    def auc(self):
        return float(np.mean([f[3] for f in self.folds]))

    def summary(self):
        items = {"protocol": "cross", "folds": len(self.folds),
                 "mean_eer": self.eer, "mean_auc": self.auc}
        for i, classes, eer, auc in self.folds:
            items[f"fold{i}_classes"] = len(classes)
            items[f"fold{i}_eer"] = eer
            items[f"fold{i}_auc"] = auc
        return format_report(items)


def class_split(classes, test_fraction, rng):
    """Class-disjoint (train+val, test) split."""
    classes = np.asarray(sorted(classes))
    n_test = max(2, int(round(test_fraction * len(classes))))
    order = rng.permutation(classes)
    return sorted(order[n_test:].tolist()), sorted(order[:n_test].tolist())


def verify(model, dataset, rng):
    sigs = extract_signatures(model, dataset.images, dataset.labels, dataset.sample_ids)
    gallery, probes = gallery_probe_split(sigs, rng)
    scores = run_verification(gallery, probes)
    curve, eer, auc = det_metrics(scores)
    return VerificationResult(eer, auc, curve, scores)


def within_dataset_experiment(dataset, config=None, seed=0):
    """Train on 80% of the classes, verify on the disjoint remainder."""
    config = config or ExperimentConfig()
    classes = dataset.classes
    if len(classes) < 5:
        raise ProtocolError(f"within-dataset protocol needs >= 5 classes, got {len(classes)}")
    rng = np.random.default_rng(seed)
    train_classes, test_classes = class_split(classes, config.test_fraction, rng)
    trainval = dataset.of_classes(train_classes).relabelled()
    test = dataset.of_classes(test_classes)

    s2 = config.stage2
    s1 = replace(config.stage1, pool=s2.pool, head=s2.head)
    encoders = {}
    encoders[s2.pool], stage1 = train_stage1(trainval, s1)
    model, stage2 = train_stage2(trainval, encoders[s2.pool], s2)
    result = verify(model, test, np.random.default_rng([seed, 1]))
    report = WithinReport(train_classes, test_classes, stage1, stage2, result, model=model)

    if config.ablation:
        epochs = config.ablation_epochs or s2.epochs
        for label, pool, head in ABLATION_ROWS:
            for init in ("random", "pretrained"):
                cfg = replace(s2, pool=pool, head=head, epochs=epochs, checkpoint=None)
                if init == "pretrained" and pool not in encoders:
                    encoders[pool], _ = train_stage1(trainval, replace(s1, pool=pool, checkpoint=None))
                same_as_main = (pool, head, epochs) == (s2.pool, s2.head, s2.epochs)
                if init == "pretrained" and same_as_main:
                    report.ablation[(label, init)] = stage2.best_metric
                    continue
                _, rep = train_stage2(trainval, encoders[pool] if init == "pretrained" else "random", cfg)
                report.ablation[(label, init)] = rep.best_metric
    return report


def fold_partition(classes, folds, rng):
    """Split classes into ``folds`` disjoint groups; the last takes the remainder."""
    classes = list(rng.permutation(sorted(classes)))
    size = len(classes) // folds
    if size < 2:
        raise ProtocolError(f"{len(classes)} classes cannot form {folds} folds of >= 2 identities")
    parts = [classes[i * size:(i + 1) * size] for i in range(folds - 1)]
    parts.append(classes[(folds - 1) * size:])
    return [sorted(int(c) for c in p) for p in parts]


def cross_dataset_experiment(model, target, folds=5, seed=0):
    """Evaluate a trained model on another corpus, fold by fold, without fine-tuning."""
    rng = np.random.default_rng(seed)
    rows = []
    for i, fold_classes in enumerate(fold_partition(target.classes, folds, rng)):
        result = verify(model, target.of_classes(fold_classes), rng)
        rows.append((i, fold_classes, result.eer, result.auc))
    return CrossReport(rows)
