"""Episode and task construction.

Three task shapes cover the pipeline stages:

* ``SourceEpisode`` for meta-training: one class, K labeled support pairs
  and Q labeled query pairs drawn without overlap.
* ``TargetTask`` for patient fine-tuning: K unlabeled support slices plus
  every labeled slice as a (query, mask) pair.
* ``InferenceTask``: K unlabeled support slices and the full slice stack
  as queries; no labels involved.

Support selection is deterministic by default.  Fine-tuning picks
unlabeled index floor(i*N/K); inference spreads over the full stack with
round-half-up(i*(N-1)/(K-1)) so both endpoints are included, collapsing
to the middle slice for K=1.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from falconseg.errors import (
    InsufficientSamplesError,
    InsufficientSlicesError,
    InsufficientUnlabeledError,
    NoLabeledQueryError,
)


@dataclass
class SourceEpisode:
    class_id: str
    support_images: list
    support_masks: list
    query_images: list
    query_masks: list


@dataclass
class TargetTask:
    patient_id: str
    support_images: list  # unlabeled slices
    support_indices: list
    query_images: list  # labeled slices
    query_masks: list
    query_indices: list
    unlabeled_images: list = field(default_factory=list)  # non-support pool
    unlabeled_indices: list = field(default_factory=list)


@dataclass
class InferenceTask:
    patient_id: str
    support_images: list
    support_indices: list
    query_images: list  # every slice, in order
    query_indices: list


def sample_source_episode(dataset, k_shot: int, n_query: int,
                          rng: np.random.Generator) -> SourceEpisode:
    """Uniform class draw, then a disjoint support/query split."""
    class_id = dataset.classes[int(rng.integers(len(dataset.classes)))]
    pairs = dataset.samples[class_id]
    need = k_shot + n_query
    if len(pairs) < need:
        raise InsufficientSamplesError(
            f"class {class_id} has {len(pairs)} samples, episode needs {need}"
        )
    order = rng.permutation(len(pairs))
    sup = [pairs[i] for i in order[:k_shot]]
    qry = [pairs[i] for i in order[k_shot:need]]
    return SourceEpisode(
        class_id=class_id,
        support_images=[p[0] for p in sup],
        support_masks=[p[1] for p in sup],
        query_images=[p[0] for p in qry],
        query_masks=[p[1] for p in qry],
    )


def finetune_support_indices(n_unlabeled: int, k_shot: int) -> list:
    return [int(np.floor(i * n_unlabeled / k_shot)) for i in range(k_shot)]


def inference_support_indices(n_slices: int, k_shot: int) -> list:
    if k_shot == 1:
        return [n_slices // 2]
    # round-half-up spacing over the whole stack, endpoints included
    return [
        int(np.floor(i * (n_slices - 1) / (k_shot - 1) + 0.5))
        for i in range(k_shot)
    ]


def build_target_task(patient, k_shot: int, rng: np.random.Generator = None,
                      random_support: bool = False) -> TargetTask:
    """Fine-tuning task: unlabeled support, all labeled slices as queries."""
    unl = patient.unlabeled_indices
    if len(unl) < k_shot:
        raise InsufficientUnlabeledError(
            f"patient {patient.patient_id}: {len(unl)} unlabeled slices, "
            f"need {k_shot} for support"
        )
    lab = patient.labeled_indices
    if not lab:
        raise NoLabeledQueryError(
            f"patient {patient.patient_id} has no labeled slice to query"
        )
    if random_support:
        if rng is None:
            raise ValueError("random_support requires an rng")
        picks = sorted(rng.choice(len(unl), size=k_shot, replace=False).tolist())
    else:
        picks = finetune_support_indices(len(unl), k_shot)
    support_idx = [unl[i] for i in picks]
    rest = [i for i in unl if i not in support_idx]
    return TargetTask(
        patient_id=patient.patient_id,
        support_images=[patient.slices[i] for i in support_idx],
        support_indices=support_idx,
        query_images=[patient.slices[i] for i in lab],
        query_masks=[patient.masks[i] for i in lab],
        query_indices=lab,
        unlabeled_images=[patient.slices[i] for i in rest],
        unlabeled_indices=rest,
    )


def build_inference_task(patient, k_shot: int) -> InferenceTask:
    n = patient.n_slices
    if n < k_shot:
        raise InsufficientSlicesError(
            f"patient {patient.patient_id}: {n} slices, need {k_shot} support"
        )
    support_idx = inference_support_indices(n, k_shot)
    return InferenceTask(
        patient_id=patient.patient_id,
        support_images=[patient.slices[i] for i in support_idx],
        support_indices=support_idx,
        query_images=list(patient.slices),
        query_indices=list(range(n)),
    )


def task_record(task) -> str:
    """One-line JSON audit record of which slices a task used."""
    rec = {"kind": type(task).__name__, "patient": getattr(task, "patient_id", None)}
    if isinstance(task, SourceEpisode):
        rec = {"kind": "SourceEpisode", "class": task.class_id,
               "k": len(task.support_images), "q": len(task.query_images)}
    else:
        rec["support"] = task.support_indices
        rec["query"] = task.query_indices
    return json.dumps(rec, sort_keys=True)
