"""The two optimization phases and their checkpoint/determinism plumbing.

Meta-training runs 1-way K-shot episodes on the source dataset with a
plain cross-entropy objective, one optimizer step per episode.
Fine-tuning adapts the meta-trained weights to target patients: per epoch
each training patient contributes exactly one task, scored with the
configured objective; with the adversarial term active, fake scores come
from the predictions for the labeled queries plus a small batch of
unlabeled slices, and the mask discriminator takes its own steps against
ground-truth masks (real) and the same predictions (fake, detached).

Every random draw comes from streams spawned off the run seed (weight
init, episode sampling, discriminator init, dropout, unlabeled batch
selection), so a fixed (seed, config, data) triple gives bit-identical
trajectories, and checkpoints serialize all of those streams so a resumed
run matches an uninterrupted one exactly.
"""

import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from falconseg import config as config_mod
from falconseg.episodes import build_target_task, sample_source_episode
from falconseg.errors import ConfigMismatchError, IncompatibleVersionError
from falconseg.inference_eval import (
    evaluate_tasks,
    scored_inference_task,
    sealed_masks_of,
)
from falconseg.losses import (
    adv_generator_loss_and_grad,
    bce_loss_and_grad,
    dice_loss_and_grad,
    disc_loss_and_grad,
    hausdorff_loss_and_grad,
)
from falconseg.network import Discriminator, SegmentationNet
from falconseg.nn import Adam, Dropout

CHECKPOINT_MAGIC = "FALCON-CKPT-1"


@dataclass
class TrainState:
    run_cfg: object
    net: SegmentationNet
    opt: Adam
    disc: Discriminator
    disc_opt: Adam
    rng: np.random.Generator  # episode/support sampling stream
    unl_rng: np.random.Generator  # unlabeled adversarial batch stream
    episode: int = 0
    epoch: int = 0
    step: int = 0
    best_epoch: int = -1
    loss_history: list = field(default_factory=list)
    val_history: list = field(default_factory=list)


def init_state(run_cfg) -> TrainState:
    """Fresh state with all rng streams spawned from the run seed."""
    ss = np.random.SeedSequence(run_cfg.seed)
    w_ss, ep_ss, dw_ss, dd_ss, unl_ss = ss.spawn(5)
    net = SegmentationNet(run_cfg.network, rng=np.random.default_rng(w_ss))
    disc = Discriminator(
        run_cfg.disc,
        rng=np.random.default_rng(dw_ss),
        dropout_rng=np.random.default_rng(dd_ss),
    )
    return TrainState(
        run_cfg=run_cfg,
        net=net,
        opt=Adam(net.params(), lr=run_cfg.train.lr),
        disc=disc,
        disc_opt=Adam(disc.params(), lr=run_cfg.train.lr),
        rng=np.random.default_rng(ep_ss),
        unl_rng=np.random.default_rng(unl_ss),
    )


def _log(state, phase, record):
    rec = {"step": state.step, "phase": phase,
           "lr": state.run_cfg.train.lr, "seed": state.run_cfg.seed}
    rec.update(record)
    state.loss_history.append(rec)


def write_log(state, path):
    with open(path, "w") as f:
        for rec in state.loss_history:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


# ------------------------------------------------------------ meta-training

def meta_train(source, run_cfg, state: TrainState = None) -> TrainState:
    """Episodic source-domain training; resumes if state.episode > 0."""
    state = state or init_state(run_cfg)
    net, opt = state.net, state.opt
    net.train()
    k = run_cfg.network.support_k
    n_query = run_cfg.train.query_per_episode
    while state.episode < run_cfg.train.episodes:
        ep = sample_source_episode(source, k, n_query, state.rng)
        preds, cache = net.task_forward(ep.query_images, ep.support_images)
        n_q = len(preds)
        total = 0.0
        dpreds = []
        for p, g in zip(preds, ep.query_masks):
            loss, grad = bce_loss_and_grad(p, g)
            total += loss / n_q
            dpreds.append(grad / n_q)
        net.zero_grad()
        net.task_backward(dpreds, cache)
        opt.step()
        state.episode += 1
        state.step += 1
        _log(state, "meta", {"episode": state.episode, "class": ep.class_id,
                             "total": total, "bce_term": total})
    return state


# -------------------------------------------------------------- fine-tuning

def _adv_active(cfg) -> bool:
    return (cfg.train.ft_loss == "hd_adv" and cfg.train.disc_enabled
            and cfg.loss.lambda2 > 0.0)


def _generator_step(state, task, cfg):
    """One optimizer step on the segmentation net for one patient task.

    Returns the prediction list so the discriminator phase can reuse the
    same (detached) fakes.
    """
    net, opt, disc = state.net, state.opt, state.disc
    tc, lc = cfg.train, cfg.loss
    adv = _adv_active(cfg)
    queries = list(task.query_images)
    n_q = len(queries)
    extra = []
    if adv and not tc.adv_fake_queries_only and task.unlabeled_images:
        n_extra = min(tc.unlabeled_adv_batch, len(task.unlabeled_images))
        picks = state.unl_rng.choice(len(task.unlabeled_images),
                                     size=n_extra, replace=False)
        extra = [task.unlabeled_images[i] for i in sorted(picks.tolist())]

    net.train()
    preds, cache = net.task_forward(queries + extra, task.support_images)
    dpreds = [np.zeros_like(p) for p in preds]
    comp_sums = {}
    flags = ()
    for i, (p, g) in enumerate(zip(preds[:n_q], task.query_masks)):
        if tc.ft_loss == "bce":
            loss, grad = bce_loss_and_grad(p, g)
            comp_sums["bce_term"] = comp_sums.get("bce_term", 0.0) + loss
        elif tc.ft_loss == "dice":
            loss, grad = dice_loss_and_grad(p, g, lc.epsilon)
            comp_sums["dice_term"] = comp_sums.get("dice_term", 0.0) + loss
        else:
            lv, grad = hausdorff_loss_and_grad(p, g, lc)
            comp_sums["hd_term"] = comp_sums.get("hd_term", 0.0) + lv.component("hd_term")
            comp_sums["dice_term"] = comp_sums.get("dice_term", 0.0) + lv.component("dice_term")
            flags += lv.flags
        dpreds[i] += grad / n_q

    components = {k: v / n_q for k, v in comp_sums.items()}
    if tc.ft_loss == "bce":
        total = components["bce_term"]
    elif tc.ft_loss == "dice":
        total = components["dice_term"]
    else:
        total = components["hd_term"] + lc.lambda1 * components["dice_term"]

    if adv:
        # adversary scores every prediction; its gradient reaches the
        # generator through the frozen (eval-mode) discriminator
        disc.eval()
        scores, dcaches = disc.forward(Discriminator._as_batch(preds))
        adv_loss, grad_s = adv_generator_loss_and_grad(scores)
        components["adv_term"] = adv_loss
        total += lc.lambda2 * adv_loss
        dinput = disc.backward(lc.lambda2 * grad_s, dcaches)
        disc.zero_grad()  # generator phase must not leave disc grads behind
        for i in range(len(preds)):
            dpreds[i] += dinput[i, 0]

    net.zero_grad()
    net.task_backward(dpreds, cache)
    opt.step()
    return total, components, flags, preds


def _disc_step(state, reals, fakes):
    """One discriminator step: real = ground truth, fake = predictions."""
    disc, dopt = state.disc, state.disc_opt
    disc.train()
    disc.zero_grad()
    r_scores, r_caches = disc.forward(Discriminator._as_batch(reals))
    f_scores, f_caches = disc.forward(Discriminator._as_batch(fakes))
    loss, g_r, g_f = disc_loss_and_grad(r_scores, f_scores)
    disc.backward(g_r, r_caches)
    disc.backward(g_f, f_caches)
    dopt.step()
    return loss, float(r_scores.mean()), float(f_scores.mean())


def _val_hd95(net, patients, cfg) -> float:
    # queries restricted to slices with ground truth, so ingested trees
    # (labeled masks only) validate the same way sealed cohorts do
    sealed = sealed_masks_of(patients)
    tasks = [scored_inference_task(p, cfg.network.support_k, sealed)
             for p in patients]
    report = evaluate_tasks(net, tasks, sealed, cfg)
    return report.hd95_mean


def baaf_finetune(patients, state: TrainState, run_cfg=None,
                  val_patients=None) -> TrainState:
    """Adversarial boundary-aware fine-tuning over target patients.

    Each epoch visits every patient once.  With validation patients given,
    the epoch with the lowest validation HD95 is kept (weights restored at
    the end) and training stops early once no epoch has improved for
    early_stop_patience epochs; patience 0 disables stopping but keeps
    best-epoch selection.
    """
    cfg = run_cfg or state.run_cfg
    tc = cfg.train
    adv = _adv_active(cfg)
    track_val = val_patients is not None and len(val_patients) > 0
    best_hd = None
    best_weights = None
    for epoch in range(state.epoch, tc.ft_epochs):
        for patient in patients:
            task = build_target_task(patient, cfg.network.support_k)
            total, comps, flags, preds = _generator_step(state, task, cfg)
            state.step += 1
            rec = {"epoch": epoch + 1, "patient": patient.patient_id,
                   "total": total}
            rec.update(comps)
            if flags:
                rec["flags"] = list(flags)
            _log(state, "baaf", rec)
            if adv:
                for _ in range(tc.disc_steps_per_gen_step):
                    dloss, r_mean, f_mean = _disc_step(
                        state, task.query_masks, preds)
                    state.step += 1
                    _log(state, "baaf_disc", {
                        "epoch": epoch + 1, "patient": patient.patient_id,
                        "total": dloss, "real_mean": r_mean,
                        "fake_mean": f_mean,
                    })
        state.epoch = epoch + 1
        if track_val:
            hd = _val_hd95(state.net, val_patients, cfg)
            state.val_history.append({"epoch": state.epoch, "hd95": hd})
            if best_hd is None or hd < best_hd:
                best_hd = hd
                state.best_epoch = state.epoch
                best_weights = state.net.state_dict()
            elif (tc.early_stop_patience > 0
                  and state.epoch - state.best_epoch >= tc.early_stop_patience):
                break
    if best_weights is not None:
        state.net.load_state_dict(best_weights)
    return state


# ------------------------------------------------------------- checkpoints

def _named_modules(mod, prefix=""):
    yield prefix, mod
    for name, child in mod.children():
        yield from _named_modules(child, prefix + name + ".")


def _dropout_modules(mod):
    return [(p, m) for p, m in _named_modules(mod) if isinstance(m, Dropout)]


def save_checkpoint(state: TrainState, path_or_file):
    meta = {
        "magic": CHECKPOINT_MAGIC,
        "config": config_mod.as_dict(state.run_cfg),
        "episode": state.episode,
        "epoch": state.epoch,
        "step": state.step,
        "best_epoch": state.best_epoch,
        "rng_state": state.rng.bit_generator.state,
        "unl_rng_state": state.unl_rng.bit_generator.state,
        "dropout_states": {p: m.rng.bit_generator.state
                           for p, m in _dropout_modules(state.disc)},
        "loss_history": state.loss_history,
        "val_history": state.val_history,
    }
    arrays = {"meta": np.asarray(json.dumps(meta))}
    for k, v in state.net.state_dict().items():
        arrays[f"net/{k}"] = v
    for k, v in state.opt.state_dict().items():
        arrays[f"opt/{k}"] = np.asarray(v)
    for k, v in state.disc.state_dict().items():
        arrays[f"disc/{k}"] = v
    for k, v in state.disc_opt.state_dict().items():
        arrays[f"dopt/{k}"] = np.asarray(v)
    if isinstance(path_or_file, (str, os.PathLike)):
        with open(path_or_file, "wb") as f:
            np.savez(f, **arrays)
    else:
        np.savez(path_or_file, **arrays)


def _section(z, prefix):
    return {k[len(prefix):]: z[k] for k in z.files if k.startswith(prefix)}


def load_checkpoint(path_or_file, expected_network=None) -> TrainState:
    try:
        z = np.load(path_or_file, allow_pickle=False)
    except Exception as e:
        raise IncompatibleVersionError(f"not a checkpoint archive: {e}") from e
    if "meta" not in z.files:
        raise IncompatibleVersionError("checkpoint has no metadata entry")
    meta = json.loads(str(z["meta"]))
    if meta.get("magic") != CHECKPOINT_MAGIC:
        raise IncompatibleVersionError(
            f"unsupported checkpoint magic {meta.get('magic')!r}, "
            f"expected {CHECKPOINT_MAGIC}"
        )
    run_cfg = config_mod.from_dict(meta["config"])
    if expected_network is not None and run_cfg.network != expected_network:
        raise ConfigMismatchError(
            "checkpoint network config does not match the requested one: "
            f"{run_cfg.network} vs {expected_network}"
        )
    state = init_state(run_cfg)
    state.net.load_state_dict(_section(z, "net/"))
    state.opt.load_state_dict(_section(z, "opt/"))
    state.disc.load_state_dict(_section(z, "disc/"))
    state.disc_opt.load_state_dict(_section(z, "dopt/"))
    state.rng.bit_generator.state = meta["rng_state"]
    state.unl_rng.bit_generator.state = meta["unl_rng_state"]
    for p, m in _dropout_modules(state.disc):
        m.rng.bit_generator.state = meta["dropout_states"][p]
    state.episode = int(meta["episode"])
    state.epoch = int(meta["epoch"])
    state.step = int(meta["step"])
    state.best_epoch = int(meta["best_epoch"])
    state.loss_history = list(meta["loss_history"])
    state.val_history = list(meta["val_history"])
    return state


def adopt_config(state: TrainState, run_cfg) -> TrainState:
    """Point a loaded run at this invocation's resolved config.

    Lets a resumed or fine-tuned run change horizon or rates while keeping
    the weights; the network section must still match them.  Optimizer step
    sizes follow the new train.lr so logs and updates stay consistent.
    """
    if run_cfg.network != state.run_cfg.network:
        raise ConfigMismatchError(
            "checkpoint network config does not match the requested one: "
            f"{state.run_cfg.network} vs {run_cfg.network}"
        )
    state.run_cfg = run_cfg
    state.opt.lr = run_cfg.train.lr
    if state.disc_opt is not None:
        state.disc_opt.lr = run_cfg.train.lr
    return state


def state_to_bytes(state: TrainState) -> bytes:
    buf = io.BytesIO()
    save_checkpoint(state, buf)
    return buf.getvalue()


def state_from_bytes(blob: bytes) -> TrainState:
    return load_checkpoint(io.BytesIO(blob))
