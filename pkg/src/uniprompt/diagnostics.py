"""Analysis instruments: feature variances, gain tables, sphere projections, attention maps."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
from pathlib import Path

import numpy as np

from uniprompt.autodiff import no_grad
from uniprompt.autodiff.io import save_tensor
from uniprompt.errors import ContractError, DataError

VARIANCE_SCALARIZATION = "mean_over_dimensions"
SPHERE_METHOD = "pca_uncentered_then_l2"


# variances ----------------------------------------------------------------------

def _group(features, labels=None, k=None):
    if labels is None:
        groups = [np.asarray(g, dtype=np.float64) for g in features]
    else:
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels)
        k = int(labels.max()) + 1 if k is None else k
        groups = [features[labels == c] for c in range(k)]
    for c, g in enumerate(groups):
        if g.ndim != 2 or g.shape[0] == 0:
            raise DataError(f"class {c} has no features")
    return groups


def population_variance(x):
    """Per-dimension variance of the rows of ``x`` (divides by the row count), averaged over dimensions."""
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean(axis=0)
    return float(np.mean(np.mean(centered * centered, axis=0)))


def intra_class_visual_variance(features, labels=None, k=None):
    """Per-class variances ``var_c`` and their mean ``Var_v``.

    ``features`` is either an (N, d) array with ``labels``, or a sequence of
    per-class (N_c, d) arrays.
    """
    var_c = np.array([population_variance(g) for g in _group(features, labels, k)])
    return var_c, float(var_c.mean())


def inter_class_text_variance(W):
    """``Var_t`` of class embeddings stored as the columns of ``W`` (d, k)."""
    W = np.asarray(getattr(W, "W", W), dtype=np.float64)
    if W.ndim != 2 or W.shape[1] < 2:
        raise DataError(f"inter-class variance needs at least 2 classes, got classifier of shape {W.shape}")
    return population_variance(W.T)


@dataclasses.dataclass
class VarianceReport:
    dataset: str
    var_c: list
    var_v: float
    var_t: float
    encoder_checksum: str = ""
    scalarization: str = VARIANCE_SCALARIZATION

    def rows(self):
        out = [{"dataset": self.dataset, "quantity": "Var_v", "class": "", "value": self.var_v},
               {"dataset": self.dataset, "quantity": "Var_t", "class": "", "value": self.var_t}]
        out += [{"dataset": self.dataset, "quantity": "var_c", "class": c, "value": v} for c, v in enumerate(self.var_c)]
        return out

    def to_csv(self):
        return _csv(self.rows(), ["dataset", "quantity", "class", "value"])


def image_features(encoder, images, plan=None, batch_size=256):
    with no_grad():
        chunks = [encoder.encode_image(images[lo:lo + batch_size], plan).data for lo in range(0, len(images), batch_size)]
    return np.concatenate(chunks).astype(np.float64)


def variance_report(encoder, dataset, split="train"):
    """Variances of the frozen encoder's L2-normalized joint features on ``dataset``."""
    part = dataset.splits[split]
    var_c, var_v = intra_class_visual_variance(image_features(encoder, part.images), part.labels, dataset.k)
    var_t = inter_class_text_variance(encoder.build_zero_shot_classifier(dataset.class_names))
    return VarianceReport(dataset.name, [float(v) for v in var_c], var_v, var_t, encoder.checksum())


# gain table -----------------------------------------------------------------------

def gain_vs_variance_table(records, reports, shots=None):
    """One row per (dataset, strategy): variances plus accuracy gain over zero-shot.

    Accuracies are averaged over the successful seeds of each cell.  ``shots``
    selects the shot count; by default the largest one present per dataset.
    """
    reports = {r.dataset: r for r in reports} if not isinstance(reports, dict) else reports
    by_dataset = {}
    for r in records:
        if r.status == "ok":
            by_dataset.setdefault(r.dataset, []).append(r)
    rows = []
    for dataset in sorted(by_dataset):
        if dataset not in reports:
            raise DataError(f"no variance report for dataset {dataset!r}")
        recs = by_dataset[dataset]
        trained = [r.shots for r in recs if r.strategy != "zero_shot"]
        s = shots if shots is not None else max(trained or [r.shots for r in recs])
        acc = {}
        for r in recs:
            if r.strategy == "zero_shot" or r.shots == s:
                acc.setdefault(r.strategy, []).append(r.test_accuracy)
        if "zero_shot" not in acc:
            raise DataError(f"dataset {dataset!r} has no zero-shot baseline")
        base = float(np.mean(acc["zero_shot"]))
        rep = reports[dataset]
        for strategy in sorted(acc):
            mean_acc = float(np.mean(acc[strategy]))
            rows.append({
                "dataset": dataset, "strategy": strategy, "shots": s,
                "var_v": rep.var_v, "var_t": rep.var_t,
                "accuracy": mean_acc, "gain": mean_acc - base,
            })
    return rows


def gain_table_csv(rows):
    return _csv(rows, ["dataset", "strategy", "shots", "var_v", "var_t", "accuracy", "gain"])


# sphere projection ---------------------------------------------------------------

@dataclasses.dataclass
class SphereProjection:
    points: np.ndarray
    components: np.ndarray
    n_features: int
    padded: bool
    method: str = SPHERE_METHOD

    @property
    def features(self):
        return self.points[:self.n_features]

    @property
    def classifier(self):
        return self.points[self.n_features:]


def project_to_sphere(features, classifier=None, tol=1e-12):
    """Project feature rows (and classifier columns) to unit vectors in R^3.

    The three directions are the leading right singular vectors of the pooled
    (uncentered) set, each signed so its largest-magnitude loading is positive.
    Inputs of rank below 3 get zero components and ``padded=True``.
    """
    features = np.asarray(features, dtype=np.float64)
    pooled = features
    if classifier is not None:
        pooled = np.vstack([features, np.asarray(getattr(classifier, "W", classifier), dtype=np.float64).T])
    if pooled.shape[0] < 3:
        raise DataError(f"sphere projection needs at least 3 vectors, got {pooled.shape[0]}")
    _, s, vt = np.linalg.svd(pooled, full_matrices=False)
    rank = int(np.sum(s > tol * max(s[0], 1.0))) if s.size else 0
    components = np.zeros((3, pooled.shape[1]))
    for i in range(min(3, rank)):
        v = vt[i]
        components[i] = v if v[np.argmax(np.abs(v))] > 0 else -v
    coords = pooled @ components.T
    norms = np.linalg.norm(coords, axis=1, keepdims=True)
    points = coords / np.where(norms > 0, norms, 1.0)
    return SphereProjection(points, components, features.shape[0], padded=rank < 3)


# attention maps ------------------------------------------------------------------

@dataclasses.dataclass
class AttentionMap:
    """Attention from visual-prompt queries to patch keys for one image and layer.

    ``per_head`` is (heads, n, s); ``mean`` averages it over heads.  ``rows``
    keeps the full softmax rows of the prompt queries (heads, n, sequence).
    """

    layer: int
    heads: int
    mean: np.ndarray
    per_head: np.ndarray
    rows: np.ndarray
    grid: tuple
    image_id: str = ""

    @property
    def n_prompts(self):
        return self.mean.shape[0]

    def grid_maps(self):
        """Maps reshaped to the patch grid: mean (n, g, g) and per-head (heads, n, g, g)."""
        g = self.grid
        return self.mean.reshape(self.n_prompts, *g), self.per_head.reshape(self.heads, self.n_prompts, *g)

    def sidecar(self):
        return {
            "layer": self.layer,
            "heads": self.heads,
            "n_prompts": self.n_prompts,
            "grid": list(self.grid),
            "image_id": self.image_id,
            "head_aggregation": "mean",
            "mean_file": "mean.pft",
            "per_head_file": "per_head.pft",
        }

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        mean, per_head = self.grid_maps()
        save_tensor(directory / "mean.pft", mean)
        save_tensor(directory / "per_head.pft", per_head)
        path = directory / "map.json"
        path.write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n")
        return path


def attention_response_map(encoder, strategy, image, layer=-1, image_id=""):
    """Attention sub-block (prompt rows x patch columns) of one ViT block."""
    layers = encoder.vision.layers
    index = layer + layers if layer < 0 else layer
    if not 0 <= index < layers:
        raise ContractError(f"layer {layer} out of range for a {layers}-layer image tower")
    image = np.asarray(image)
    if image.ndim != 3:
        raise ContractError(f"attention maps are computed per image; got array of shape {image.shape}")
    with no_grad():
        plan = strategy.generate().visual
        n = plan.length if plan is not None else 0
        if n == 0 or (plan.mode == "deep" and index not in plan.prompts):
            raise ContractError(f"strategy {strategy.kind.value!r} has no visual prompts at layer {index}")
        capture = []
        encoder.image_tokens(image, plan, capture)
    weights = np.asarray(capture[index][1], dtype=np.float64)
    rows = weights[:, 1:1 + n, :]
    per_head = rows[:, :, 1 + n:]
    g = encoder.vision.grid
    return AttentionMap(index, weights.shape[0], per_head.mean(axis=0), per_head, rows, (g, g), image_id)


def _csv(rows, fields):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(v) for k, v in row.items()})
    return buf.getvalue()


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value


__all__ = [
    "AttentionMap",
    "SphereProjection",
    "VarianceReport",
    "attention_response_map",
    "gain_table_csv",
    "gain_vs_variance_table",
    "image_features",
    "inter_class_text_variance",
    "intra_class_visual_variance",
    "population_variance",
    "project_to_sphere",
    "variance_report",
]
