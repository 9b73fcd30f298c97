"""Deterministic evaluation metrics for labeled loaders."""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.metrics import roc_auc_score

from .errors import EvalError
from .fusion import extract_fused, fusion_forward


@dataclass
class Metrics:
    accuracy: float
    auc: float
    mean_loss: float
    n: int

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "auc": self.auc,
            "mean_loss": self.mean_loss,
            "n": self.n,
        }


def evaluate_logits_fn(logits_fn, loader) -> Metrics:
    """Run logits_fn over an eval loader and compute accuracy/AUC/mean loss.

    Argmax ties break toward the lower class index. AUC is the binary
    ranking statistic on the class-1 probability; it is NaN when the
    labels contain a single class.
    """
    if loader.augment is not None:
        raise EvalError("evaluation loaders must have augmentation off")
    all_labels, all_preds, all_probs = [], [], []
    loss_sum = 0.0
    n = 0
    with torch.no_grad():
        for batch in loader.batches(0):
            if (batch.labels < 0).any():
                raise EvalError("evaluation requires labeled samples")
            x = torch.from_numpy(batch.pixels)
            y = torch.from_numpy(batch.labels)
            logits = logits_fn(x)
            loss_sum += float(F.cross_entropy(logits, y, reduction="sum"))
            probs = F.softmax(logits, dim=1)
            logits_np = logits.numpy()
            all_preds.append(np.argmax(logits_np, axis=1))
            all_labels.append(batch.labels)
            all_probs.append(probs[:, -1].numpy() if logits.shape[1] == 2 else None)
            n += len(batch.sample_ids)
    if n == 0:
        raise EvalError("evaluation loader yielded no samples")
    labels = np.concatenate(all_labels)
    preds = np.concatenate(all_preds)
    accuracy = float(np.mean(preds == labels))
    if all_probs[0] is not None and len(np.unique(labels)) == 2:
        auc = float(roc_auc_score(labels, np.concatenate(all_probs)))
    else:
        auc = float("nan")
    return Metrics(accuracy=accuracy, auc=auc, mean_loss=loss_sum / n, n=n)


def evaluate(adapters, head, loader) -> Metrics:
    """Evaluate the fused grand model on a labeled, augmentation-off loader."""
    return evaluate_logits_fn(
        lambda x: fusion_forward(head, extract_fused(adapters, x)), loader
    )
