"""The part-aligned re-identification network.

A pluggable backbone maps a 384x128 RGB image to a 24x8 feature map.
On top of it sit: K per-part feature branches (each optionally gated by a
spatial-channel attention mask), a window-detection head group (shared
window pooling, one sigmoid classification head, K gated regression
heads), an optional holistic embedding branch, and optional coarser-
granularity part branches. Descriptors concatenate part features in a
fixed order: parts 1..K, then granularities ascending, then holistic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import alignment, ops, tensorio
from .layers import Block, ChannelAttention, Conv, Dense, SpatialChannelAttention

IMAGE_HEIGHT = 384
IMAGE_WIDTH = 128
MAP_HEIGHT = alignment.MAP_HEIGHT
MAP_WIDTH = 8
WINDOW_HEIGHT = alignment.WINDOW_HEIGHT


class NotInitializedError(RuntimeError):
    """Inference was requested before parameters were initialized or loaded."""


@dataclass(frozen=True)
class ModelConfig:
    """Structural choices of the network."""

    classes: int
    parts: int = 6
    backbone_channels: tuple[int, ...] = (16, 32, 64, 64, 64)
    feature_dim: int = 512
    holistic_dim: int = 512
    attention_reduction: int = 16
    with_refinement: bool = True  # spatial-channel masks on part branches
    with_alignment: bool = True  # window detection heads drive part locations
    with_mgf: bool = False  # granularity branches + holistic embedding

    @property
    def descriptor_dim(self) -> int:
        dim = self.parts * self.feature_dim
        if self.with_mgf:
            dim += sum(alignment.GRANULARITIES) * self.feature_dim
            dim += self.holistic_dim
        return dim


class ToyBackbone(Block):
    """Five 3x3 conv stages (strides 2,2,2,2,1) mapping 384x128x3 to 24x8xC.

    Inputs arrive in [0, 1] and are standardized with fixed constants so
    activations start at a healthy scale when training from scratch.
    """

    STRIDES = (2, 2, 2, 2, 1)
    INPUT_MEAN = 0.45
    INPUT_STD = 0.225

    def __init__(self, rng, channels: tuple[int, ...]):
        super().__init__()
        if len(channels) != len(self.STRIDES):
            raise ValueError(f"need {len(self.STRIDES)} channel widths, got {channels}")
        self.out_channels = channels[-1]
        widths = (3,) + tuple(channels)
        self.convs = [
            self._child(
                Conv(f"backbone.conv{i + 1}", rng, 3, widths[i], widths[i + 1],
                     stride=s, padding=1, activation="relu")
            )
            for i, s in enumerate(self.STRIDES)
        ]

    def forward(self, images: np.ndarray):
        if images.ndim != 4 or images.shape[1:] != (IMAGE_HEIGHT, IMAGE_WIDTH, 3):
            raise ops.ShapeError(
                f"backbone expects (B,{IMAGE_HEIGHT},{IMAGE_WIDTH},3), got {images.shape}"
            )
        x = (images - self.INPUT_MEAN) / self.INPUT_STD
        ctxs = []
        for conv in self.convs:
            x, ctx = conv.forward(x)
            ctxs.append(ctx)
        return x, ctxs

    def backward(self, ctxs, grad_out: np.ndarray) -> None:
        g = grad_out
        for i in range(len(self.convs) - 1, -1, -1):
            g = self.convs[i].backward(ctxs[i], g, need_input_grad=i > 0)


class PartBranch(Block):
    """Optional attention mask, window pooling, feature reduction, classifier."""

    def __init__(self, name: str, rng, cfg: ModelConfig, in_channels: int):
        super().__init__()
        self.refine = (
            self._child(
                SpatialChannelAttention(f"{name}.sca", rng, in_channels,
                                        cfg.attention_reduction)
            )
            if cfg.with_refinement
            else None
        )
        self.reduce = self._child(
            Dense(f"{name}.reduce", rng, in_channels, cfg.feature_dim, "relu")
        )
        self.classifier = self._child(
            Dense(f"{name}.classifier", rng, cfg.feature_dim, cfg.classes)
        )

    def forward(self, window: np.ndarray, refine_active: bool):
        """window: (B, h, w, C) -> part feature (B, F) and class scores (B, classes)."""
        refine_ctx = None
        gated = window
        if refine_active and self.refine is not None:
            gated, refine_ctx = self.refine.forward(window)
        pooled = ops.global_avg_pool(gated)
        feat, ctx_r = self.reduce.forward(pooled)
        scores, ctx_c = self.classifier.forward(feat)
        return feat, scores, (window.shape, refine_ctx, ctx_r, ctx_c)

    def backward(self, ctx, grad_scores: np.ndarray, grad_feat=None) -> np.ndarray:
        """Returns the gradient w.r.t. the input window."""
        window_shape, refine_ctx, ctx_r, ctx_c = ctx
        gfeat = self.classifier.backward(ctx_c, grad_scores)
        if grad_feat is not None:
            gfeat = gfeat + grad_feat
        gpooled = self.reduce.backward(ctx_r, gfeat)
        ggated = ops.global_avg_pool_backward(window_shape, gpooled)
        if refine_ctx is not None:
            return self.refine.backward(refine_ctx, ggated)
        return ggated


class DetectionHeads(Block):
    """Window classification and per-part offset regression heads.

    Both consume the shared per-window pooled vectors. The classification
    head is a dense layer plus a dense map to K+1 sigmoid scores. Each of
    the K regression heads owns a channel-attention gate, a dense layer,
    and a dense map to one tanh-normalized offset; the heads share nothing
    with each other.
    """

    def __init__(self, rng, cfg: ModelConfig, in_channels: int):
        super().__init__()
        self.parts = cfg.parts
        self.cls_reduce = self._child(
            Dense("valign.cls.conv", rng, in_channels, in_channels, "relu",
                  normalize=True)
        )
        self.cls_out = self._child(
            Dense("valign.cls.fc", rng, in_channels, cfg.parts + 1)
        )
        self.reg_attn = []
        self.reg_reduce = []
        self.reg_out = []
        for k in range(1, cfg.parts + 1):
            self.reg_attn.append(
                self._child(ChannelAttention(f"valign.reg{k}.attn", rng, in_channels,
                                             cfg.attention_reduction))
            )
            self.reg_reduce.append(
                self._child(Dense(f"valign.reg{k}.conv", rng, in_channels, in_channels,
                                  "relu", normalize=True))
            )
            self.reg_out.append(
                self._child(Dense(f"valign.reg{k}.fc", rng, in_channels, 1))
            )

    def forward(self, window_vecs: np.ndarray):
        """window_vecs: (B, R, C) -> scores (B, R, K+1), offsets (B, R, K)."""
        mid, ctx_cr = self.cls_reduce.forward(window_vecs)
        logits, ctx_co = self.cls_out.forward(mid)
        scores = ops.sigmoid(logits)
        offsets = []
        reg_ctxs = []
        for k in range(self.parts):
            a, ctx_a = self.reg_attn[k].forward(window_vecs)
            m, ctx_m = self.reg_reduce[k].forward(a)
            pre, ctx_o = self.reg_out[k].forward(m)
            offsets.append(ops.tanh(pre)[..., 0])
            reg_ctxs.append((ctx_a, ctx_m, ctx_o))
        out_offsets = np.stack(offsets, axis=-1)
        ctx = (window_vecs.shape, ctx_cr, ctx_co, scores, reg_ctxs, out_offsets)
        return scores, out_offsets, ctx

    def backward(self, ctx, grad_scores: np.ndarray, grad_offsets: np.ndarray):
        """Returns the gradient w.r.t. the shared window vectors."""
        vec_shape, ctx_cr, ctx_co, scores, reg_ctxs, offsets = ctx
        glogits = ops.sigmoid_backward(scores, grad_scores)
        gmid = self.cls_out.backward(ctx_co, glogits)
        gvecs = self.cls_reduce.backward(ctx_cr, gmid)
        for k in range(self.parts):
            ctx_a, ctx_m, ctx_o = reg_ctxs[k]
            gpre = ops.tanh_backward(offsets[..., k], grad_offsets[..., k])[..., None]
            gm = self.reg_out[k].backward(ctx_o, gpre)
            ga = self.reg_reduce[k].backward(ctx_m, gm)
            gvecs = gvecs + self.reg_attn[k].backward(ctx_a, ga)
        return gvecs


class HolisticBranch(Block):
    """Whole-map pooling into a unit-norm embedding."""

    def __init__(self, rng, cfg: ModelConfig, in_channels: int):
        super().__init__()
        self.fc = self._child(Dense("holistic.fc", rng, in_channels, cfg.holistic_dim))

    def forward(self, fmap: np.ndarray):
        pooled = ops.global_avg_pool(fmap)
        raw, ctx_fc = self.fc.forward(pooled)
        emb = ops.l2_normalize(raw)
        return emb, (fmap.shape, ctx_fc, raw)

    def backward(self, ctx, grad_emb: np.ndarray) -> np.ndarray:
        fmap_shape, ctx_fc, raw = ctx
        graw = ops.l2_normalize_backward(raw, grad_emb)
        gpooled = self.fc.backward(ctx_fc, graw)
        return ops.global_avg_pool_backward(fmap_shape, gpooled)


def gather_windows(fmap: np.ndarray, tops: np.ndarray, height: int) -> np.ndarray:
    """Slice a per-image window (tops may differ per image): (B, height, W, C)."""
    b = fmap.shape[0]
    rows = tops[:, None] + np.arange(height)[None, :]
    return fmap[np.arange(b)[:, None], rows]


def scatter_window_grad(gfmap: np.ndarray, tops: np.ndarray, gwin: np.ndarray) -> None:
    """Accumulate window gradients back onto the feature-map gradient."""
    h = gwin.shape[1]
    for i, t in enumerate(tops):
        gfmap[i, t : t + h] += gwin[i]


class CdpmNetwork:
    """Backbone plus all heads; owns the parameter registry and checkpoints."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.initialized = rng is not None
        rng = rng if rng is not None else np.random.default_rng(0)
        self.backbone = ToyBackbone(rng, cfg.backbone_channels)
        c = self.backbone.out_channels
        self.grid = alignment.enumerate_windows(MAP_HEIGHT, WINDOW_HEIGHT)
        self.part_branches = [
            PartBranch(f"part{k}", rng, cfg, c) for k in range(1, cfg.parts + 1)
        ]
        self.heads = DetectionHeads(rng, cfg, c) if cfg.with_alignment else None
        self.holistic = HolisticBranch(rng, cfg, c) if cfg.with_mgf else None
        self.granularity_branches: dict[int, list[PartBranch]] = {}
        if cfg.with_mgf:
            for g in alignment.GRANULARITIES:
                self.granularity_branches[g] = [
                    PartBranch(f"g{g}.part{j}", rng, cfg, c) for j in range(1, g + 1)
                ]
        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise ValueError("parameter names must be unique")

    # -- parameter registry ------------------------------------------------

    def blocks(self) -> list[Block]:
        out: list[Block] = [self.backbone, *self.part_branches]
        if self.heads is not None:
            out.append(self.heads)
        if self.holistic is not None:
            out.append(self.holistic)
        for g in sorted(self.granularity_branches):
            out.extend(self.granularity_branches[g])
        return out

    def parameters(self):
        out = []
        for b in self.blocks():
            out.extend(b.parameters())
        return out

    def buffers(self):
        out = []
        for b in self.blocks():
            out.extend(b.buffers())
        return out

    def named_parameters(self) -> dict[str, np.ndarray]:
        return {p.name: p.value for p in self.parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def baseline_parameters(self):
        """Backbone and base part branches without their attention masks."""
        keep = []
        for p in self.parameters():
            name = p.name
            is_base_branch = name.startswith("part") and ".sca." not in name
            if name.startswith("backbone.") or is_base_branch:
                keep.append(p)
        return keep

    def new_module_parameters(self):
        baseline = {p.name for p in self.baseline_parameters()}
        return [p for p in self.parameters() if p.name not in baseline]

    # -- checkpoints ---------------------------------------------------------

    _META_FIELDS = (
        "classes parts feature_dim holistic_dim attention_reduction "
        "with_refinement with_alignment with_mgf"
    ).split()

    def save(self, path) -> None:
        tensors: dict[str, np.ndarray] = {
            "__meta__": np.array(
                [float(getattr(self.cfg, f)) for f in self._META_FIELDS]
            ),
            "__meta_channels__": np.array(self.cfg.backbone_channels, dtype=np.float64),
        }
        for p in (*self.parameters(), *self.buffers()):
            tensors[p.name] = p.value
        tensorio.save_tensors(path, tensors)

    @classmethod
    def load(cls, path) -> "CdpmNetwork":
        tensors = tensorio.load_tensors(path)
        meta = tensors.pop("__meta__")
        channels = tuple(int(v) for v in tensors.pop("__meta_channels__"))
        kw = dict(zip(cls._META_FIELDS, meta))
        cfg = ModelConfig(
            classes=int(kw["classes"]),
            parts=int(kw["parts"]),
            backbone_channels=channels,
            feature_dim=int(kw["feature_dim"]),
            holistic_dim=int(kw["holistic_dim"]),
            attention_reduction=int(kw["attention_reduction"]),
            with_refinement=bool(kw["with_refinement"]),
            with_alignment=bool(kw["with_alignment"]),
            with_mgf=bool(kw["with_mgf"]),
        )
        net = cls(cfg)
        slots = {p.name: p for p in (*net.parameters(), *net.buffers())}
        if set(slots) != set(tensors):
            missing = set(slots) ^ set(tensors)
            raise ValueError(f"checkpoint does not match model structure: {missing}")
        for name, value in tensors.items():
            if slots[name].value.shape != value.shape:
                raise ValueError(f"shape mismatch for {name}")
            slots[name].value[...] = value
        net.initialized = True
        return net

    # -- forward pieces ------------------------------------------------------

    def backbone_forward(self, images: np.ndarray):
        return self.backbone.forward(ops.as_f64(images))

    def calibrate(self, images: np.ndarray) -> None:
        """Fit every normalization layer's statistics with one batch pass.

        Runs all heads and branches in dependency order while the layers
        record their input statistics; called at stage boundaries.
        """
        norms = []
        for block in self.blocks():
            norms.extend(block.norm_layers())
        for n in norms:
            n.calibrating = True
        try:
            fmap, _ = self.backbone_forward(images)
            b = fmap.shape[0]
            tops = self.uniform_part_tops(b)
            for k, branch in enumerate(self.part_branches):
                window = gather_windows(fmap, tops[:, k], WINDOW_HEIGHT)
                branch.forward(window, self.cfg.with_refinement)
            if self.heads is not None:
                self.detection_forward(fmap)
            for g in alignment.GRANULARITIES:
                if g not in self.granularity_branches:
                    continue
                gtops = self.uniform_granularity_tops(b, g)
                for j, branch in enumerate(self.granularity_branches[g]):
                    window = gather_windows(fmap, gtops[:, j], MAP_HEIGHT // g)
                    branch.forward(window, self.cfg.with_refinement)
        finally:
            for n in norms:
                n.calibrating = False

    def window_vectors(self, fmap: np.ndarray):
        """Pooled vector per sliding window: (B, R, C)."""
        h = self.grid.window_height
        vecs = [fmap[:, r : r + h].mean(axis=(1, 2)) for r in range(self.grid.count)]
        return np.stack(vecs, axis=1)

    def window_vectors_backward(self, fmap_shape, grad_vecs: np.ndarray) -> np.ndarray:
        g = np.zeros(fmap_shape)
        h, w = self.grid.window_height, fmap_shape[2]
        for r in range(self.grid.count):
            g[:, r : r + h] += grad_vecs[:, r][:, None, None, :] / (h * w)
        return g

    def detection_forward(self, fmap: np.ndarray):
        """Window scores and offsets for a feature-map batch."""
        if self.heads is None:
            raise NotInitializedError("detection heads are disabled in this configuration")
        vecs = self.window_vectors(fmap)
        scores, offsets, ctx = self.heads.forward(vecs)
        return scores, offsets, (fmap.shape, ctx)

    def detection_backward(self, ctx, grad_scores, grad_offsets) -> np.ndarray:
        fmap_shape, heads_ctx = ctx
        gvecs = self.heads.backward(heads_ctx, grad_scores, grad_offsets)
        return self.window_vectors_backward(fmap_shape, gvecs)

    # -- selection and inference ----------------------------------------------

    def select_part_windows(
        self, scores: np.ndarray, offsets: np.ndarray, selection: alignment.SelectionConfig
    ) -> np.ndarray:
        """Per-image 1-based window index for each part. scores: (B, R, K+1)."""
        b = scores.shape[0]
        picks = np.zeros((b, self.cfg.parts), dtype=np.int64)
        for i in range(b):
            for k in range(self.cfg.parts):
                picks[i, k] = alignment.select_window(
                    scores[i, :, k], offsets[i, :, k], selection
                )
        return picks

    def uniform_part_tops(self, batch: int) -> np.ndarray:
        layout = alignment.uniform_layout(MAP_HEIGHT, self.cfg.parts)
        tops = [int(layout.interval(k)[0]) for k in range(1, self.cfg.parts + 1)]
        return np.tile(np.array(tops, dtype=np.int64), (batch, 1))

    def uniform_granularity_tops(self, batch: int, g: int) -> np.ndarray:
        height = MAP_HEIGHT // g
        return np.tile(np.arange(g, dtype=np.int64) * height, (batch, 1))

    def descriptor(
        self, images: np.ndarray, selection: alignment.SelectionConfig | None = None
    ) -> np.ndarray:
        """Concatenated image representation, shape (B, descriptor_dim)."""
        if not self.initialized:
            raise NotInitializedError("parameters are neither initialized nor loaded")
        selection = selection or alignment.SelectionConfig()
        fmap, _ = self.backbone_forward(images)
        b = fmap.shape[0]
        if self.cfg.with_alignment:
            scores, offsets, _ = self.detection_forward(fmap)
            picks = self.select_part_windows(scores, offsets, selection)
            part_tops = picks - 1
        else:
            part_tops = self.uniform_part_tops(b)
        pieces = []
        for k, branch in enumerate(self.part_branches):
            window = gather_windows(fmap, part_tops[:, k], WINDOW_HEIGHT)
            feat, _, _ = branch.forward(window, self.cfg.with_refinement)
            pieces.append(feat)
        if self.cfg.with_mgf:
            centers = part_tops + WINDOW_HEIGHT / 2.0
            for g in alignment.GRANULARITIES:
                height = MAP_HEIGHT // g
                tops = np.zeros((b, g), dtype=np.int64)
                for i in range(b):
                    wins = alignment.infer_granularity_layout(centers[i], g, MAP_HEIGHT)
                    tops[i] = [w.top for w in wins]
                for j, branch in enumerate(self.granularity_branches[g]):
                    window = gather_windows(fmap, tops[:, j], height)
                    feat, _, _ = branch.forward(window, self.cfg.with_refinement)
                    pieces.append(feat)
            emb, _ = self.holistic.forward(fmap)
            pieces.append(emb)
        return np.concatenate(pieces, axis=1)
