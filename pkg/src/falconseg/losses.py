"""Training objectives with analytic gradients.

Every loss here is a pure float64 function of numpy arrays.  The boundary
loss treats both distance maps as per-step constants: no gradient flows
through the distance transform or through the thresholding that binarizes
the prediction before its transform.  Finite-difference checks in the test
suite validate exactly that contract.

Component values stored in a LossValue are unweighted; ``total`` applies
the configured weights, so ``total == hd + lambda1*dice + lambda2*adv``
always reconstructs within 1e-9.
"""

from dataclasses import dataclass, field

import numpy as np

from falconseg import geometry
from falconseg.errors import EmptyBatchError, ShapeMismatchError

# clamp for every log() argument
_EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    a: float = 0.2
    lambda1: float = 0.9
    lambda2: float = 0.1
    epsilon: float = 1e-6
    prob_threshold: float = 0.5
    # distance maps measure distance to the object set by default (zero
    # inside the object); True switches to distance-to-boundary-curve
    distance_to_boundary: bool = False

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"a must be positive, got {self.a}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be non-negative")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if not 0.0 < self.prob_threshold < 1.0:
            raise ValueError(
                f"prob_threshold must lie in (0,1), got {self.prob_threshold}"
            )


@dataclass(frozen=True)
class LossValue:
    total: float
    components: dict = field(default_factory=dict)
    flags: tuple = ()

    def component(self, name: str) -> float:
        return self.components.get(name, 0.0)


def validate_probmap(pred, name: str = "pred") -> np.ndarray:
    arr = np.asarray(pred, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ShapeMismatchError(f"{name} must be a non-empty 2D array, got {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def _check_pair(pred, gt):
    p = validate_probmap(pred)
    g = geometry.validate_mask(gt, "gt")
    if p.shape != g.shape:
        raise ShapeMismatchError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    # float64 from here on: negation of an unsigned mask must not wrap
    return p, g.astype(np.float64)


# ------------------------------------------------------------------ dice

def dice_loss(pred, gt, epsilon: float = 1e-6) -> float:
    """Soft Dice loss 1 - 2*sum(pred*gt) / (sum(pred^2 + gt^2) + epsilon)."""
    p, g = _check_pair(pred, gt)
    num = 2.0 * float((p * g).sum())
    den = float((p * p).sum() + g.sum()) + epsilon  # g is {0,1}: g^2 == g
    return 1.0 - num / den


def dice_loss_and_grad(pred, gt, epsilon: float = 1e-6):
    """Dice loss plus its gradient w.r.t. every pred pixel."""
    p, g = _check_pair(pred, gt)
    n = float((p * g).sum())
    d = float((p * p).sum() + g.sum()) + epsilon
    loss = 1.0 - 2.0 * n / d
    grad = (4.0 * n * p - 2.0 * g * d) / (d * d)
    return loss, grad


# ------------------------------------------------------------------ bce

def bce_loss(pred, gt) -> float:
    """Pixel-mean binary cross entropy; pred clamped to [1e-7, 1-1e-7]."""
    p, g = _check_pair(pred, gt)
    pc = np.clip(p, _EPS, 1.0 - _EPS)
    per_pixel = -(g * np.log(pc) + (1.0 - g) * np.log(1.0 - pc))
    return float(per_pixel.mean())


def bce_loss_and_grad(pred, gt):
    p, g = _check_pair(pred, gt)
    pc = np.clip(p, _EPS, 1.0 - _EPS)
    loss = float(-(g * np.log(pc) + (1.0 - g) * np.log(1.0 - pc)).mean())
    grad = (-g / pc + (1.0 - g) / (1.0 - pc)) / p.size
    return loss, grad


# ------------------------------------------------------------------ boundary loss

def _resolve_maps(p, g, cfg, d_gt, d_pred):
    """Distance maps for the boundary loss; both are gradient constants.

    Callers (and the finite-difference tests) may pass precomputed maps to
    hold them fixed across evaluations.
    """
    if d_gt is None:
        d_gt = geometry.distance_transform(g, to_boundary=cfg.distance_to_boundary)
    if d_pred is None:
        pred_bin = (p >= cfg.prob_threshold).astype(np.uint8)
        d_pred = geometry.distance_transform(
            pred_bin, to_boundary=cfg.distance_to_boundary
        )
    return np.asarray(d_gt, dtype=np.float64), np.asarray(d_pred, dtype=np.float64)


def hausdorff_loss(pred, gt, cfg: LossConfig = None, d_gt=None, d_pred=None) -> LossValue:
    """Boundary-penalty loss plus weighted Dice term.

    total = mean(pred * d_gt^a + gt * d_pred^a) + lambda1 * dice_loss,
    where d_pred is the distance transform of pred binarized at
    cfg.prob_threshold.  When gt and the binarized pred are both empty the
    loss short-circuits to 0 with flag "both_empty".
    """
    cfg = cfg or LossConfig()
    p, g = _check_pair(pred, gt)
    if not g.any() and not (p >= cfg.prob_threshold).any():
        return LossValue(0.0, {"hd_term": 0.0, "dice_term": 0.0}, flags=("both_empty",))
    d_gt, d_pred = _resolve_maps(p, g, cfg, d_gt, d_pred)
    hd = float((p * d_gt**cfg.a + g * d_pred**cfg.a).mean())
    dice = dice_loss(p, g, cfg.epsilon)
    return LossValue(hd + cfg.lambda1 * dice, {"hd_term": hd, "dice_term": dice})


def hausdorff_loss_and_grad(pred, gt, cfg: LossConfig = None, d_gt=None, d_pred=None):
    """Boundary loss with its analytic gradient w.r.t. pred.

    The gradient holds both distance maps constant: per pixel it is
    d_gt^a / npix plus lambda1 times the Dice gradient.
    """
    cfg = cfg or LossConfig()
    p, g = _check_pair(pred, gt)
    if not g.any() and not (p >= cfg.prob_threshold).any():
        lv = LossValue(0.0, {"hd_term": 0.0, "dice_term": 0.0}, flags=("both_empty",))
        return lv, np.zeros_like(p)
    d_gt, d_pred = _resolve_maps(p, g, cfg, d_gt, d_pred)
    hd = float((p * d_gt**cfg.a + g * d_pred**cfg.a).mean())
    dice, dice_grad = dice_loss_and_grad(p, g, cfg.epsilon)
    grad = d_gt**cfg.a / p.size + cfg.lambda1 * dice_grad
    return LossValue(hd + cfg.lambda1 * dice, {"hd_term": hd, "dice_term": dice}), grad


# ------------------------------------------------------------------ adversarial

def _scores_1d(scores, name):
    arr = np.asarray(scores, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise EmptyBatchError(f"{name} is empty")
    return np.clip(arr, _EPS, 1.0 - _EPS)


def adv_generator_loss(disc_scores) -> float:
    """Generator-side adversarial loss: mean of -log(score)."""
    s = _scores_1d(disc_scores, "disc_scores")
    return float(-np.log(s).mean())


def adv_generator_loss_and_grad(disc_scores):
    s = _scores_1d(disc_scores, "disc_scores")
    loss = float(-np.log(s).mean())
    return loss, -1.0 / (s.size * s)


def disc_loss(real_scores, fake_scores) -> float:
    """Discriminator objective as a minimization target.

    The adversary maximizes mean log(real) + mean log(1 - fake); training
    loops only minimize, so this returns the negation of that objective.
    """
    r = _scores_1d(real_scores, "real_scores")
    f = _scores_1d(fake_scores, "fake_scores")
    return float(-np.log(r).mean() - np.log(1.0 - f).mean())


def disc_loss_and_grad(real_scores, fake_scores):
    """disc_loss plus gradients w.r.t. the real and fake score vectors."""
    r = _scores_1d(real_scores, "real_scores")
    f = _scores_1d(fake_scores, "fake_scores")
    loss = float(-np.log(r).mean() - np.log(1.0 - f).mean())
    grad_real = -1.0 / (r.size * r)
    grad_fake = 1.0 / (f.size * (1.0 - f))
    return loss, grad_real, grad_fake


# ------------------------------------------------------------------ combined

def combined_seg_loss(pred, gt, disc_scores, cfg: LossConfig = None) -> LossValue:
    """Full fine-tuning objective: boundary loss plus lambda2 * adversarial.

    With lambda2 == 0 the adversarial term is skipped entirely and the
    result equals hausdorff_loss exactly.
    """
    cfg = cfg or LossConfig()
    base = hausdorff_loss(pred, gt, cfg)
    if cfg.lambda2 == 0.0:
        return base
    adv = adv_generator_loss(disc_scores)
    comps = dict(base.components)
    comps["adv_term"] = adv
    return LossValue(base.total + cfg.lambda2 * adv, comps, flags=base.flags)


def combined_seg_loss_and_grad(pred, gt, disc_scores, cfg: LossConfig = None):
    """Combined loss with gradients split by argument.

    Returns (LossValue, grad_pred, grad_scores).  grad_pred covers only the
    boundary+Dice part; the adversarial gradient reaches pred through the
    discriminator network, so the caller chains grad_scores through its own
    backward pass and adds the result.
    """
    cfg = cfg or LossConfig()
    base, grad_pred = hausdorff_loss_and_grad(pred, gt, cfg)
    if cfg.lambda2 == 0.0:
        return base, grad_pred, None
    adv, grad_s = adv_generator_loss_and_grad(disc_scores)
    comps = dict(base.components)
    comps["adv_term"] = adv
    lv = LossValue(base.total + cfg.lambda2 * adv, comps, flags=base.flags)
    return lv, grad_pred, cfg.lambda2 * grad_s
