"""Segmentation model and mask discriminator.

The segmentation net is encoder -> relation -> decoder.  The encoder is a
strided-conv pyramid; its bottleneck map for each support image is summed
into a task prototype, concatenated channel-wise onto the query bottleneck,
and decoded back to full resolution with nearest-neighbor upsampling and
encoder skip connections.  A 1x1 conv plus sigmoid produces the
probability map.

Prototype aggregation sums the support maps in a content-sorted order, so
any permutation of the support set produces a bit-identical output (float
addition is not associative-commutative, fixing the order makes it so).

The discriminator scores masks: strided convs (batch norm on all but the
first), leaky-relu slope 0.2, dropout, then global average pooling and a
sigmoid head.
"""

from dataclasses import dataclass

import numpy as np

from falconseg.config import DiscriminatorConfig, NetworkConfig
from falconseg.errors import EmptySupportError, ShapeMismatchError
from falconseg.nn import (
    BatchNorm2d,
    Conv2d,
    Dropout,
    GlobalAvgPool,
    LeakyReLU,
    Linear,
    Module,
    Sequential,
    Sigmoid,
    UpsampleNearest2,
)

# slope for the segmentation net's activations; the discriminator's 0.2
# comes from its config
_SEG_SLOPE = 0.1


@dataclass
class FeaturePyramid:
    levels: list  # level l: [1, channels[l], H/2^l, W/2^l] (l zero-based)
    bottleneck: np.ndarray  # [1, m, H', W']


def _as_nchw(image, input_size, name="image"):
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeMismatchError(f"{name} must be HxWx3, got {arr.shape}")
    if (arr.shape[0], arr.shape[1]) != tuple(input_size):
        raise ShapeMismatchError(
            f"{name} spatial size {arr.shape[:2]} does not match configured "
            f"input_size {tuple(input_size)}"
        )
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr.transpose(2, 0, 1)[None]


def _canonical_sum(maps):
    """Sum arrays in byte-content order: permutation-proof to the bit."""
    order = sorted(range(len(maps)), key=lambda i: maps[i].tobytes())
    out = np.zeros_like(maps[0])
    for i in order:
        out += maps[i]
    return out


class SegmentationNet(Module):
    def __init__(self, cfg: NetworkConfig, rng=None):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        ch = cfg.channels_per_level
        m = cfg.bottleneck_channels

        self.enc_levels = []
        cin = 3
        for li, c in enumerate(ch):
            stride = 1 if li == 0 else 2
            self.enc_levels.append(
                Sequential(Conv2d(cin, c, 3, stride=stride, rng=rng), LeakyReLU(_SEG_SLOPE))
            )
            cin = c
        self.bottleneck = Sequential(
            Conv2d(ch[-1], m, 1, rng=rng), LeakyReLU(_SEG_SLOPE)
        )

        self.dec_deep = Sequential(
            Conv2d(2 * m, ch[-1], 3, rng=rng), LeakyReLU(_SEG_SLOPE)
        )
        self.up = UpsampleNearest2()
        # one block per skip level, deepest first (level depth-2 .. 0)
        self.dec_levels = [
            Sequential(Conv2d(ch[l + 1] + ch[l], ch[l], 3, rng=rng), LeakyReLU(_SEG_SLOPE))
            for l in range(cfg.depth - 2, -1, -1)
        ]
        self.head = Conv2d(ch[0], 1, 1, rng=rng)
        self.out_act = Sigmoid()

    # -------------------------------------------------------------- encode

    def _encode4d(self, x):
        levels = []
        caches = []
        for block in self.enc_levels:
            x, c = block.forward(x)
            levels.append(x)
            caches.append(c)
        bott, bc = self.bottleneck.forward(x)
        caches.append(bc)
        return levels, bott, caches

    def encode(self, image) -> FeaturePyramid:
        """Feature pyramid of one HxWx3 image in [0,1]."""
        x = _as_nchw(image, self.cfg.input_size)
        levels, bott, _ = self._encode4d(x)
        return FeaturePyramid(levels=levels, bottleneck=bott)

    def _encode_backward(self, dlevels, dbott, caches):
        """Backprop the pyramid: dlevels align with enc_levels, dbott with
        the bottleneck head.  Any entry may be None (no gradient from that
        consumer)."""
        dx = self.bottleneck.backward(dbott, caches[-1])
        for li in range(len(self.enc_levels) - 1, -1, -1):
            if dlevels[li] is not None:
                dx = dx + dlevels[li]
            dx = self.enc_levels[li].backward(dx, caches[li])
        return dx

    # -------------------------------------------------------------- relation

    def support_prototype(self, support_features) -> np.ndarray:
        """Element-wise sum of K support bottleneck maps (mean behind the
        proto_agg config flag)."""
        feats = [np.asarray(f, dtype=np.float64) for f in support_features]
        if len(feats) == 0:
            raise EmptySupportError("support_prototype needs at least one map")
        shapes = {f.shape for f in feats}
        if len(shapes) != 1:
            raise ShapeMismatchError(f"support feature shapes differ: {shapes}")
        proto = _canonical_sum(feats)
        if self.cfg.proto_agg == "mean":
            proto = proto / len(feats)
        return proto

    def relate(self, query_bottleneck, prototype) -> np.ndarray:
        """Channel-concat, query first: [*, 2m, H', W']."""
        q = np.asarray(query_bottleneck, dtype=np.float64)
        p = np.asarray(prototype, dtype=np.float64)
        if q.shape != p.shape:
            raise ShapeMismatchError(
                f"bottleneck/prototype shapes differ: {q.shape} vs {p.shape}"
            )
        return np.concatenate([q, p], axis=-3)

    # -------------------------------------------------------------- decode

    def _decode4d(self, rel, levels):
        caches = []
        x, c = self.dec_deep.forward(rel)
        caches.append(c)
        for i, block in enumerate(self.dec_levels):
            lvl = self.cfg.depth - 2 - i
            x, uc = self.up.forward(x)
            skip = levels[lvl]
            if x.shape[-2:] != skip.shape[-2:]:
                raise ShapeMismatchError(
                    f"decoder level {lvl}: upsampled {x.shape} vs skip {skip.shape}"
                )
            x = np.concatenate([x, skip], axis=1)
            split = x.shape[1] - skip.shape[1]
            x, bc = block.forward(x)
            caches.append((uc, split, bc))
        logits, hc = self.head.forward(x)
        prob, sc = self.out_act.forward(logits)
        caches.append((hc, sc))
        return prob, caches

    def _decode_backward(self, dprob, caches):
        """Returns (d_rel, dlevels) for the query pyramid."""
        hc, sc = caches[-1]
        dy = self.out_act.backward(dprob, sc)
        dy = self.head.backward(dy, hc)
        dlevels = [None] * self.cfg.depth
        for i in range(len(self.dec_levels) - 1, -1, -1):
            lvl = self.cfg.depth - 2 - i
            uc, split, bc = caches[1 + i]
            dy = self.dec_levels[i].backward(dy, bc)
            dskip = dy[:, split:]
            dlevels[lvl] = np.ascontiguousarray(dskip)
            dy = self.up.backward(np.ascontiguousarray(dy[:, :split]), uc)
        d_rel = self.dec_deep.backward(dy, caches[0])
        return d_rel, dlevels

    def decode(self, rel, pyramid: FeaturePyramid) -> np.ndarray:
        """Decode a relation tensor against a query pyramid to an HxW
        probability map."""
        rel = np.asarray(rel, dtype=np.float64)
        if rel.ndim == 3:
            rel = rel[None]
        m = self.cfg.bottleneck_channels
        if rel.shape[1] != 2 * m:
            raise ShapeMismatchError(
                f"relation tensor must have {2 * m} channels, got {rel.shape[1]}"
            )
        prob, _ = self._decode4d(rel, pyramid.levels)
        return prob[0, 0]

    # -------------------------------------------------------------- forward

    def forward(self, query_image, support_images) -> np.ndarray:
        """Full task-conditioned forward pass for one query; HxW ProbMap."""
        pyr = self.encode(query_image)
        if self.cfg.relation_enabled:
            support_feats = [self.encode(s).bottleneck for s in support_images]
            proto = self.support_prototype(support_feats)
        else:
            proto = pyr.bottleneck
        rel = self.relate(pyr.bottleneck, proto)
        prob, _ = self._decode4d(rel, pyr.levels)
        return prob[0, 0]

    def forward_with_prototype(self, query_image, prototype) -> np.ndarray:
        """Forward pass reusing a precomputed prototype (inference path)."""
        pyr = self.encode(query_image)
        rel = self.relate(pyr.bottleneck, self._maybe_substitute(prototype, pyr))
        prob, _ = self._decode4d(rel, pyr.levels)
        return prob[0, 0]

    def _maybe_substitute(self, prototype, pyr):
        # relation-module ablation: ignore the support signal entirely and
        # duplicate the query bottleneck so channel counts are unchanged
        if not self.cfg.relation_enabled:
            return pyr.bottleneck
        return prototype

    # ------------------------------------------------------- training pass

    def task_forward(self, query_images, support_images):
        """Differentiable pass over a whole task.

        Returns (preds, task_cache) where preds is one HxW ProbMap per
        query.  task_backward consumes per-query dL/dpred arrays.
        """
        sup_feats = []
        sup_caches = []
        for s in support_images:
            x = _as_nchw(s, self.cfg.input_size, "support image")
            levels, bott, caches = self._encode4d(x)
            sup_feats.append(bott)
            sup_caches.append(caches)
        proto = self.support_prototype(sup_feats) if sup_feats else None

        preds = []
        q_caches = []
        for q in query_images:
            x = _as_nchw(q, self.cfg.input_size, "query image")
            levels, bott, enc_caches = self._encode4d(x)
            cond = bott if (proto is None or not self.cfg.relation_enabled) else proto
            rel = self.relate(bott, cond)
            prob, dec_caches = self._decode4d(rel, levels)
            preds.append(prob[0, 0])
            q_caches.append((enc_caches, dec_caches))
        return preds, (sup_caches, q_caches, len(support_images))

    def task_backward(self, dpreds, task_cache):
        """Accumulate parameter gradients for a task_forward pass."""
        sup_caches, q_caches, n_support = task_cache
        m = self.cfg.bottleneck_channels
        d_proto_total = None
        for dpred, (enc_caches, dec_caches) in zip(dpreds, q_caches):
            dprob = np.asarray(dpred, dtype=np.float64)[None, None]
            d_rel, dlevels = self._decode_backward(dprob, dec_caches)
            d_bott = np.ascontiguousarray(d_rel[:, :m])
            d_cond = np.ascontiguousarray(d_rel[:, m:])
            if n_support == 0 or not self.cfg.relation_enabled:
                d_bott = d_bott + d_cond
            elif d_proto_total is None:
                d_proto_total = d_cond.copy()
            else:
                d_proto_total += d_cond
            self._encode_backward(dlevels, d_bott, enc_caches)
        if d_proto_total is not None:
            if self.cfg.proto_agg == "mean":
                d_proto_total = d_proto_total / n_support
            none_levels = [None] * self.cfg.depth
            for caches in sup_caches:
                self._encode_backward(none_levels, d_proto_total, caches)


class Discriminator(Module):
    def __init__(self, dcfg: DiscriminatorConfig, rng=None, dropout_rng=None):
        rng = rng or np.random.default_rng(0)
        self.dcfg = dcfg
        ch = dcfg.channels
        layers = [Conv2d(1, ch[0], 3, stride=2, rng=rng), LeakyReLU(dcfg.leaky_slope)]
        for i in range(1, len(ch)):
            layers += [
                Conv2d(ch[i - 1], ch[i], 3, stride=2, rng=rng),
                BatchNorm2d(ch[i]),
                LeakyReLU(dcfg.leaky_slope),
                Dropout(dcfg.dropout_rate, dropout_rng),
            ]
        self.body = Sequential(*layers)
        self.pool = GlobalAvgPool()
        self.fc = Linear(ch[-1], 1, rng=rng)
        self.out_act = Sigmoid()

    def forward(self, masks4d):
        x, bc = self.body.forward(np.asarray(masks4d, dtype=np.float64))
        x, pc = self.pool.forward(x)
        x, fc = self.fc.forward(x)
        s, sc = self.out_act.forward(x)
        return s[:, 0], (bc, pc, fc, sc)

    def backward(self, dscores, caches):
        bc, pc, fc, sc = caches
        dy = np.asarray(dscores, dtype=np.float64)[:, None]
        dy = self.out_act.backward(dy, sc)
        dy = self.fc.backward(dy, fc)
        dy = self.pool.backward(dy, pc)
        return self.body.backward(dy, bc)

    @staticmethod
    def _as_batch(masks):
        arrs = [np.asarray(m, dtype=np.float64) for m in masks]
        shapes = {a.shape for a in arrs}
        if len(shapes) != 1 or arrs[0].ndim != 2:
            raise ShapeMismatchError(f"masks must share one HxW shape, got {shapes}")
        return np.stack(arrs)[:, None]

    def discriminate(self, mask) -> float:
        """Score one HxW mask; scalar strictly inside (0,1)."""
        s, _ = self.forward(self._as_batch([mask]))
        return float(s[0])

    def discriminate_batch(self, masks) -> np.ndarray:
        s, _ = self.forward(self._as_batch(masks))
        return s


# ------------------------------------------------------------- accounting

def conv_param_count(cin: int, cout: int, k: int) -> int:
    """Learnable scalars of one biased 2D conv layer."""
    return cin * k * k * cout + cout


def _seg_conv_plan(cfg: NetworkConfig):
    """(cin, cout, k, h_out, w_out) for every conv in one query forward."""
    h, w = cfg.input_size
    ch = cfg.channels_per_level
    m = cfg.bottleneck_channels
    plan = []
    cin = 3
    for li, c in enumerate(ch):
        if li > 0:
            h, w = h // 2, w // 2
        plan.append((cin, c, 3, h, w))
        cin = c
    hb, wb = cfg.bottleneck_size
    plan.append((ch[-1], m, 1, hb, wb))
    plan.append((2 * m, ch[-1], 3, hb, wb))
    hh, ww = hb, wb
    for l in range(cfg.depth - 2, -1, -1):
        hh, ww = hh * 2, ww * 2
        plan.append((ch[l + 1] + ch[l], ch[l], 3, hh, ww))
    plan.append((ch[0], 1, 1, hh, ww))
    return plan


def count_params_flops(cfg: NetworkConfig):
    """Exact parameter count and FLOPs for one query forward pass.

    FLOPs = 2x multiply-accumulates of the conv/linear work at
    cfg.input_size, with the support prototype treated as cached (the
    inference regime); activations, upsampling, and the channel concat
    count as zero.
    """
    params = 0
    macs = 0
    for cin, cout, k, h, w in _seg_conv_plan(cfg):
        params += conv_param_count(cin, cout, k)
        macs += cin * k * k * cout * h * w
    return params, 2 * macs
