"""Gradient-free patient inference and the metric/report layer.

Inference conditions the frozen network on a patient's own unlabeled
support slices: the prototype is computed once per task and reused for
every query slice, and a weight checksum taken before and after guards
the no-mutation contract.

Evaluation scores each slice with DSC and symmetric HD95 (boundary pixel
sets), aggregates slice means per task and then mean and standard
deviation across tasks.  An empty prediction against a nonempty ground
truth scores DSC 0 with the image-diagonal HD sentinel and is flagged,
never silently excluded; two empty masks count as a perfect,
flagged slice.  Reports carry no timestamps so identical inputs yield
byte-identical artifacts.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from falconseg import config as config_mod
from falconseg.episodes import InferenceTask, build_inference_task
from falconseg.errors import MissingGroundTruthError
from falconseg.geometry import boundary_pixels, dsc, hd95, hd95_symmetric
from falconseg.network import count_params_flops


@dataclass
class SegmentationResult:
    patient_id: str
    prob_maps: list
    masks: list  # prob_maps binarized at threshold
    support_indices: list
    threshold: float


@dataclass
class TaskMetrics:
    patient_id: str
    n_slices: int
    dsc_mean: float
    hd95_mean: float
    hd95_pred_to_gt: float
    hd95_gt_to_pred: float
    empty_pred_slices: int
    empty_gt_slices: int
    both_empty_slices: int


@dataclass
class MetricsReport:
    rows: list
    dsc_mean: float
    dsc_std: float
    hd95_mean: float
    hd95_std: float
    params: int
    flops: int
    config_digest: str
    seed: int
    threshold: float
    aggregate: str = "task_mean"

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([
            "patient_id", "n_slices", "dsc_mean", "hd95_mean",
            "hd95_pred_to_gt", "hd95_gt_to_pred",
            "empty_pred_slices", "empty_gt_slices", "both_empty_slices",
        ])
        for r in self.rows:
            w.writerow([
                r.patient_id, r.n_slices,
                f"{r.dsc_mean:.6f}", f"{r.hd95_mean:.6f}",
                f"{r.hd95_pred_to_gt:.6f}", f"{r.hd95_gt_to_pred:.6f}",
                r.empty_pred_slices, r.empty_gt_slices, r.both_empty_slices,
            ])
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w") as f:
            f.write(self.to_csv_text())

    def summary_text(self) -> str:
        lines = [
            f"tasks: {len(self.rows)}",
            f"aggregate: {self.aggregate}",
            f"dsc_mean: {self.dsc_mean:.6f}",
            f"dsc_std: {self.dsc_std:.6f}",
            f"hd95_mean: {self.hd95_mean:.6f}",
            f"hd95_std: {self.hd95_std:.6f}",
            f"params: {self.params}",
            f"flops: {self.flops}",
            f"config_digest: {self.config_digest}",
            f"seed: {self.seed}",
            f"threshold: {self.threshold}",
        ]
        flagged = sum(
            r.empty_pred_slices + r.empty_gt_slices + r.both_empty_slices
            for r in self.rows
        )
        lines.append(f"flagged_slices: {flagged}")
        return "\n".join(lines) + "\n"


def _net_of(model):
    return getattr(model, "net", model)


def infer_patient(model, task, cfg) -> SegmentationResult:
    """Segment every query slice of one task with a single cached prototype.

    Weights are bit-frozen across the call; a checksum mismatch means a
    mutation bug and raises immediately.
    """
    net = _net_of(model)
    thr = cfg.eval.prob_threshold
    net.eval()
    before = net.weight_checksum()
    feats = [net.encode(s).bottleneck for s in task.support_images]
    proto = net.support_prototype(feats)
    probs = [net.forward_with_prototype(q, proto) for q in task.query_images]
    after = net.weight_checksum()
    if before != after:
        raise RuntimeError("inference mutated model state")
    return SegmentationResult(
        patient_id=task.patient_id,
        prob_maps=probs,
        masks=[(p >= thr).astype(np.uint8) for p in probs],
        support_indices=list(task.support_indices),
        threshold=thr,
    )


def score_slice(pred_mask, gt_mask, hd95_mode: str = "max"):
    """(dsc, hd95_sym, hd95_pred_to_gt, hd95_gt_to_pred, flag) for one slice.

    Empty-set cases never raise here: one empty side scores the diagonal
    sentinel, two empty sides score as a perfect match.  Both carry a flag.
    """
    h, w = np.asarray(gt_mask).shape
    sentinel = float(np.hypot(h, w))
    pred_empty = not np.asarray(pred_mask).any()
    gt_empty = not np.asarray(gt_mask).any()
    if pred_empty and gt_empty:
        return 1.0, 0.0, 0.0, 0.0, "both_empty"
    if pred_empty or gt_empty:
        flag = "empty_pred" if pred_empty else "empty_gt"
        return 0.0, sentinel, sentinel, sentinel, flag
    d = dsc(pred_mask, gt_mask)
    bp = boundary_pixels(pred_mask)
    bg = boundary_pixels(gt_mask)
    h_pg = hd95(bp, bg)
    h_gp = hd95(bg, bp)
    sym = hd95_symmetric(bp, bg, mode=hd95_mode)
    return d, sym, h_pg, h_gp, None


def sealed_masks_of(patients) -> dict:
    """patient_id -> {slice index -> mask} from the evaluation-only stores."""
    out = {}
    for p in patients:
        out[p.patient_id] = dict(p.eval_masks) if p.eval_masks is not None else dict(p.masks)
    return out


def scored_inference_task(patient, k_shot, sealed_masks):
    """Inference task whose queries are restricted to slices with ground truth.

    Support spacing still runs over the full volume; only the query list
    shrinks.  Synthetic val/test patients carry sealed masks for every
    slice, so there the task is unchanged; ingested trees hold masks for
    labeled slices only.
    """
    task = build_inference_task(patient, k_shot)
    have = sealed_masks.get(patient.patient_id) or {}
    keep = [i for i in task.query_indices if i in have]
    if keep == task.query_indices:
        return task
    if not keep:
        raise MissingGroundTruthError(
            f"{patient.patient_id} has no slices with ground truth"
        )
    return InferenceTask(
        patient_id=task.patient_id,
        support_images=task.support_images,
        support_indices=task.support_indices,
        query_images=[patient.slices[i] for i in keep],
        query_indices=keep,
    )


def evaluate_tasks(model, tasks, sealed_masks, cfg,
                   aggregate: str = "task_mean") -> MetricsReport:
    if aggregate not in ("task_mean", "pooled"):
        raise ValueError(f"aggregate must be task_mean or pooled, got {aggregate!r}")
    rows = []
    pooled_dsc = []
    pooled_hd = []
    for task in tasks:
        result = infer_patient(model, task, cfg)
        gt_map = sealed_masks.get(task.patient_id)
        if gt_map is None:
            raise MissingGroundTruthError(f"no sealed masks for {task.patient_id}")
        dscs, hds, hpgs, hgps = [], [], [], []
        n_ep = n_eg = n_be = 0
        for idx, pred in zip(task.query_indices, result.masks):
            if idx not in gt_map:
                raise MissingGroundTruthError(
                    f"{task.patient_id} slice {idx} has no sealed ground truth"
                )
            d, sym, h_pg, h_gp, flag = score_slice(pred, gt_map[idx],
                                                   cfg.eval.hd95_mode)
            dscs.append(d)
            hds.append(sym)
            hpgs.append(h_pg)
            hgps.append(h_gp)
            n_ep += flag == "empty_pred"
            n_eg += flag == "empty_gt"
            n_be += flag == "both_empty"
        rows.append(TaskMetrics(
            patient_id=task.patient_id,
            n_slices=len(dscs),
            dsc_mean=float(np.mean(dscs)),
            hd95_mean=float(np.mean(hds)),
            hd95_pred_to_gt=float(np.mean(hpgs)),
            hd95_gt_to_pred=float(np.mean(hgps)),
            empty_pred_slices=n_ep,
            empty_gt_slices=n_eg,
            both_empty_slices=n_be,
        ))
        pooled_dsc.extend(dscs)
        pooled_hd.extend(hds)
    if aggregate == "task_mean":
        d_vals = [r.dsc_mean for r in rows]
        h_vals = [r.hd95_mean for r in rows]
    else:
        d_vals, h_vals = pooled_dsc, pooled_hd
    params, flops = count_params_flops(cfg.network)
    return MetricsReport(
        rows=rows,
        dsc_mean=float(np.mean(d_vals)),
        dsc_std=float(np.std(d_vals)),
        hd95_mean=float(np.mean(h_vals)),
        hd95_std=float(np.std(h_vals)),
        params=params,
        flops=flops,
        config_digest=config_mod.digest(cfg),
        seed=cfg.seed,
        threshold=cfg.eval.prob_threshold,
        aggregate=aggregate,
    )


# ------------------------------------------------------------------ ablations

# named fine-tuning variants; each entry is a nested config override
ABLATION_CONFIGS = {
    "baseline_bce": {"train": {"ft_loss": "bce", "disc_enabled": False}},
    "dice_only": {"train": {"ft_loss": "dice", "disc_enabled": False}},
    "hd_only": {"train": {"ft_loss": "hd", "disc_enabled": False}},
    "falcon_full": {"train": {"ft_loss": "hd_adv", "disc_enabled": True}},
    "falcon_no_rm": {
        "train": {"ft_loss": "hd_adv", "disc_enabled": True},
        "network": {"relation_enabled": False},
    },
}


@dataclass
class AblationTable:
    rows: list = field(default_factory=list)  # dicts, one per config
    seeds: tuple = ()

    def to_text(self) -> str:
        name_w = max([len(r["config"]) for r in self.rows] + [6])
        header = (f"{'config':<{name_w}}  {'dsc_mean':>9} {'dsc_std':>8} "
                  f"{'hd95_mean':>10} {'hd95_std':>9}")
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(
                f"{r['config']:<{name_w}}  {r['dsc_mean']:>9.4f} "
                f"{r['dsc_std']:>8.4f} {r['hd95_mean']:>10.4f} "
                f"{r['hd95_std']:>9.4f}"
            )
        lines.append(f"seeds: {list(self.seeds)}")
        return "\n".join(lines) + "\n"

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["config", "dsc_mean", "dsc_std", "hd95_mean", "hd95_std",
                    "n_seeds"])
        for r in self.rows:
            w.writerow([r["config"], f"{r['dsc_mean']:.6f}", f"{r['dsc_std']:.6f}",
                        f"{r['hd95_mean']:.6f}", f"{r['hd95_std']:.6f}",
                        len(self.seeds)])
        return buf.getvalue()

    def by_config(self) -> dict:
        return {r["config"]: r for r in self.rows}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def derive_config(base_cfg, overrides: dict, seed: int = None):
    d = _merge(config_mod.as_dict(base_cfg), overrides)
    if seed is not None:
        d["seed"] = seed
    return config_mod.from_dict(d)


def default_benchmark_data(seed: int, size: int = 32, n_classes: int = 10,
                           samples_per_class: int = 10, slices: int = 16,
                           n_train: int = 8, n_val: int = 2, n_test: int = 3):
    """The synthetic cross-domain benchmark: shape-family source set plus a
    train/val/test patient cohort, both regenerated per seed."""
    from falconseg.data_io import synth_cohort, synth_source

    source = synth_source(n_classes, samples_per_class, size=size, seed=seed)
    cohort = synth_cohort(n_train, n_val, n_test, slices, size=size, seed=seed)
    return source, cohort


def benchmark_config():
    """Base config of the canonical desk-scale benchmark.

    Meta-training is deliberately short of convergence (60 episodes): the
    point of the benchmark is the adaptation gap, and a fully converged
    init segments the target cohort near-perfectly before fine-tuning even
    starts, leaving the fine-tuning variants nothing to differentiate on.
    CLI equivalent: ``falconseg ablate -o train.episodes=60``.
    """
    base = config_mod.from_dict({})
    return derive_config(base, {"train": {"episodes": 60}})


def run_ablation_suite(base_cfg, seeds=(0, 1, 2, 3, 4), configs: dict = None,
                       data_builder=None) -> AblationTable:
    """Meta-train, fine-tune, and evaluate each config over shared seeds.

    Data is regenerated per seed; configs sharing a network section also
    share the meta-trained weights for that seed, so fine-tuning variants
    differ only in the fine-tuning itself.
    """
    from falconseg import training as _training  # deferred: avoids cycle

    configs = configs or ABLATION_CONFIGS
    per_config = {name: {"dsc": [], "hd95": []} for name in configs}
    for seed in seeds:
        source, cohort = (data_builder or default_benchmark_data)(seed)
        meta_cache = {}
        for name, overrides in configs.items():
            cfg = derive_config(base_cfg, overrides, seed=seed)
            # everything meta-training depends on; ft-only variants share it
            d = config_mod.as_dict(cfg)
            net_key = str((sorted(d["network"].items()), d["train"]["episodes"],
                           d["train"]["lr"], d["train"]["query_per_episode"]))
            if net_key not in meta_cache:
                state = _training.meta_train(source, cfg)
                meta_cache[net_key] = _training.state_to_bytes(state)
            state = _training.state_from_bytes(meta_cache[net_key])
            _training.baaf_finetune(cohort["train"], state, cfg,
                                    val_patients=cohort["val"])
            k = cfg.network.support_k
            tasks = [build_inference_task(p, k) for p in cohort["test"]]
            report = evaluate_tasks(state.net, tasks,
                                    sealed_masks_of(cohort["test"]), cfg)
            per_config[name]["dsc"].append(report.dsc_mean)
            per_config[name]["hd95"].append(report.hd95_mean)
    rows = []
    for name in configs:
        d = np.asarray(per_config[name]["dsc"])
        h = np.asarray(per_config[name]["hd95"])
        rows.append({
            "config": name,
            "dsc_mean": float(d.mean()), "dsc_std": float(d.std()),
            "hd95_mean": float(h.mean()), "hd95_std": float(h.std()),
        })
    return AblationTable(rows=rows, seeds=tuple(seeds))
