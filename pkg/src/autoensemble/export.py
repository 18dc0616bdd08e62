"""Self-contained model export: ensemble metadata, parameters and feature schema.

An export directory holds ``model.json`` (schema, ensemble metadata, array
manifest), ``model.params`` (float64 blob) and ``model.digest`` (SHA-256 of
both), using the same binary layout as checkpoints.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import decode_arrays, encode_arrays
from .ensemble import EnsembleModel, ensemble_logits
from .errors import SchemaError
from .search import rebuild_ensemble

FORMAT = "autoensemble-model/1"


@dataclass(frozen=True)
class ExportedModel:
    ensemble: EnsembleModel
    feature_names: tuple
    label_column: str
    rho: float

    def logits(self, X) -> np.ndarray:
        return ensemble_logits(self.ensemble, X)


def export_model(model: ExportedModel, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ens = model.ensemble
    arrays = {"weights": ens.weights}
    for sn in ens.subnetworks:
        for name, v in sn.params.items():
            arrays[f"best/{sn.id}/{name}"] = v
    manifest, blob = encode_arrays(arrays)
    doc = {
        "format": FORMAT,
        "features": list(model.feature_names),
        "label_column": model.label_column,
        "rho": model.rho,
        "ensemble": ens.metadata(),
        "manifest": manifest,
    }
    meta = json.dumps(doc, sort_keys=True, indent=1).encode()
    (directory / "model.json").write_bytes(meta)
    (directory / "model.params").write_bytes(blob)
    (directory / "model.digest").write_text(hashlib.sha256(meta + blob).hexdigest())
    return directory


def load_model(directory) -> ExportedModel:
    directory = Path(directory)
    try:
        meta = (directory / "model.json").read_bytes()
        blob = (directory / "model.params").read_bytes()
        digest = (directory / "model.digest").read_text().strip()
    except OSError as exc:
        raise SchemaError(f"{directory} is not an exported model: {exc}") from None
    if hashlib.sha256(meta + blob).hexdigest() != digest:
        raise SchemaError(f"{directory}: model files fail their integrity check")
    doc = json.loads(meta)
    if doc.get("format") != FORMAT:
        raise SchemaError(f"{directory}: unknown model format {doc.get('format')!r}")
    arrays = decode_arrays(doc["manifest"], blob)
    ens = rebuild_ensemble(doc["ensemble"], arrays, arrays["weights"])
    return ExportedModel(ens, tuple(doc["features"]), doc["label_column"], float(doc["rho"]))


def align_features(model: ExportedModel, names, X) -> np.ndarray:
    """Reorder columns of ``X`` (named ``names``) into the model's feature order."""
    names = list(names)
    missing = [f for f in model.feature_names if f not in names]
    extra = [n for n in names if n not in model.feature_names]
    if missing:
        raise SchemaError(f"dataset is missing feature column(s) {missing}")
    if extra:
        raise SchemaError(f"dataset has unexpected column(s) {extra}")
    return np.asarray(X)[:, [names.index(f) for f in model.feature_names]]
