"""Single-stage multi-scale detector: three anchor heads on a shared conv trunk.

The trunk downsamples by 4, each head is a 1x1 conv producing one logit per
cell, and anchors are fixed squares of side 12, 24, or 48 centered on the
cell. Scores come from the logistic sigmoid; detection is decode + greedy NMS.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics
from .errors import ConfigurationError, TrainingFailedError
from .numerics import BiasAdd, ComputeGraph, Conv2d, MaxPool2, Node, Relu, sigmoid
from .scenes import render_scene

STRIDE = 4
SCALES = (12, 24, 48)
DEFAULT_SCORE_THRESHOLD = 0.5
DEFAULT_NMS_IOU = 0.1

# trunk layout: (out_channels, kernel) conv blocks with pools after blocks 2 and 4
_TRUNK = ((8, 3), (16, 3), "pool", (16, 3), (32, 3), "pool", (32, 3))


def build_graph(seed=0):
    """Fresh detector graph with He-initialized weights and slightly negative head biases."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x17]))
    nodes = []
    src = -1
    c = 1
    for spec in _TRUNK:
        if spec == "pool":
            nodes.append(Node(MaxPool2(), src))
            src = len(nodes) - 1
            continue
        oc, k = spec
        fan_in = c * k * k
        w = rng.standard_normal((oc, c, k, k)) * np.sqrt(2.0 / fan_in)
        nodes.append(Node(Conv2d(w), src))
        nodes.append(Node(BiasAdd(np.zeros(oc)), len(nodes) - 1))
        nodes.append(Node(Relu(), len(nodes) - 1))
        src = len(nodes) - 1
        c = oc
    trunk = src
    outputs = []
    for _ in SCALES:
        w = rng.standard_normal((1, c, 1, 1)) * np.sqrt(1.0 / c)
        nodes.append(Node(Conv2d(w), trunk))
        nodes.append(Node(BiasAdd(np.full(1, -2.0)), len(nodes) - 1))
        outputs.append(len(nodes) - 1)
    return ComputeGraph(1, nodes, outputs)


@dataclass
class Proposal:
    scale_index: int
    cell: tuple  # (row, col) on the logit map
    logit: float

    @property
    def score(self):
        return float(sigmoid(self.logit))

    @property
    def box(self):
        """(cx, cy, side); center is (cell + 0.5) * stride in both axes."""
        r, c = self.cell
        return ((c + 0.5) * STRIDE, (r + 0.5) * STRIDE, float(SCALES[self.scale_index]))

    @property
    def order_key(self):
        return (self.scale_index, self.cell[0], self.cell[1])


@dataclass
class Detection:
    box: tuple  # (cx, cy, side)
    score: float
    scale_index: int
    cell: tuple
    proposals: list = field(default_factory=list)  # assigned Proposal objects


def iou(box_a, box_b):
    ax, ay, asd = box_a
    bx, by, bsd = box_b
    ah, bh = asd / 2.0, bsd / 2.0
    ix = max(0.0, min(ax + ah, bx + bh) - max(ax - ah, bx - bh))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay - ah, by - bh))
    inter = ix * iy
    union = asd * asd + bsd * bsd - inter
    return inter / union if union > 0 else 0.0


@dataclass
class DetectorModel:
    graph: ComputeGraph
    stride: int = STRIDE
    scales: tuple = SCALES
    score_threshold: float = DEFAULT_SCORE_THRESHOLD
    nms_iou: float = DEFAULT_NMS_IOU

    def forward_raw(self, image):
        """Logit maps for a raw [0,255] image; pixels are scaled to [0,1] at the boundary."""
        ctx = self.forward_context(image)
        return ctx.heads()

    def forward_context(self, image):
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 2:
            raise ConfigurationError(f"expected a 2-d grayscale image, got shape {image.shape}")
        if image.shape[0] % 4 or image.shape[1] % 4:
            raise ConfigurationError(
                f"image dims {image.shape} must be multiples of {self.stride}"
            )
        return numerics.forward_with_context(self.graph, image[None] / 255.0)

    def input_gradient(self, ctx, cotangents):
        """Gradient in raw pixel units (the /255 scaling is folded in)."""
        return numerics.backward_from_context(ctx, cotangents)[0] / 255.0

    def save(self, path):
        numerics.save_graph(self.graph, path)

    @classmethod
    def load(cls, path, **overrides):
        return cls(graph=numerics.load_graph(path), **overrides)

    def clone(self):
        g = self.graph
        nodes = []
        for n in g.nodes:
            if n.op.kind == "conv2d":
                nodes.append(Node(Conv2d(n.op.weight.copy(), pad=n.op.pad), n.src))
            elif n.op.kind == "bias_add":
                nodes.append(Node(BiasAdd(n.op.bias.copy()), n.src))
            else:
                nodes.append(Node(type(n.op)(), n.src))
        return replace(self, graph=ComputeGraph(g.in_channels, nodes, list(g.outputs)))


def scale_loss(logit_map, target_map):
    """Summed logistic loss over active cells and its cotangent.

    target_map holds +1 / -1 at active cells and 0 at ignored ones.
    """
    logit_map = np.asarray(logit_map, dtype=np.float64)
    y = np.asarray(target_map, dtype=np.float64)
    if y.shape != logit_map.shape:
        raise ConfigurationError(
            f"target shape {y.shape} does not match logits {logit_map.shape}"
        )
    active = y != 0
    loss = float(np.logaddexp(0.0, -y[active] * logit_map[active]).sum())
    cotangent = np.zeros_like(logit_map)
    cotangent[active] = -y[active] * sigmoid(-y[active] * logit_map[active])
    return loss, cotangent


def decode(model, logit_maps):
    """One proposal per (scale, cell) whose score clears the threshold."""
    out = []
    for s, logits in enumerate(logit_maps):
        scores = sigmoid(logits[0])
        rows, cols = np.nonzero(scores > model.score_threshold)
        for r, c in zip(rows.tolist(), cols.tolist()):
            out.append(Proposal(s, (r, c), float(logits[0, r, c])))
    return out


def nms(items, iou_threshold):
    """Greedy descending-score suppression; ties break by (scale, row, col) ascending."""
    order = sorted(items, key=lambda p: (-p.score, p.order_key))
    kept = []
    for cand in order:
        if all(iou(cand.box, k.box) <= iou_threshold for k in kept):
            kept.append(cand)
    return kept


def assign_proposals(detections, proposals):
    """Attach every proposal whose anchor center falls inside a detection box.

    A proposal can land in several detections when boxes of different scales
    overlap below the NMS threshold.
    """
    for d in detections:
        d.proposals = []
    for p in proposals:
        px, py, _ = p.box
        for d in detections:
            cx, cy, side = d.box
            h = side / 2.0
            if cx - h <= px < cx + h and cy - h <= py < cy + h:
                d.proposals.append(p)
    return detections


def detect(model, image):
    """forward -> decode -> NMS, then record each survivor's proposal set."""
    proposals = decode(model, model.forward_raw(image))
    survivors = nms(proposals, model.nms_iou)
    detections = [
        Detection(box=p.box, score=p.score, scale_index=p.scale_index, cell=p.cell)
        for p in survivors
    ]
    return assign_proposals(detections, proposals)


# ---------------------------------------------------------------------------
# label assignment and training
# ---------------------------------------------------------------------------

def scale_band(scale):
    return (scale / np.sqrt(2.0), scale * np.sqrt(2.0))


def target_maps(model, spec, map_shapes):
    """Per-head {+1,-1,0} cell labels for one scene.

    A cell is positive on head j when a face center falls in it and the face
    side sits in head j's band. Cells whose anchor overlaps any face stay
    unlabeled (0) so the net is free to generalize around faces; everything
    else is negative.
    """
    maps = []
    for j, scale in enumerate(model.scales):
        h, w = map_shapes[j][1], map_shapes[j][2]
        y = -np.ones((h, w))
        lo, hi = scale_band(scale)
        half = scale / 2.0
        for f in spec.faces:
            fx, fy, fs = f.box
            fh = fs / 2.0
            # ignore zone: anchor box intersects the face box
            r0 = max(0, int(np.floor((fy - fh - half) / STRIDE - 0.5)) + 1)
            r1 = min(h - 1, int(np.ceil((fy + fh + half) / STRIDE - 0.5)) - 1)
            c0 = max(0, int(np.floor((fx - fh - half) / STRIDE - 0.5)) + 1)
            c1 = min(w - 1, int(np.ceil((fx + fh + half) / STRIDE - 0.5)) - 1)
            if r1 >= r0 and c1 >= c0:
                y[r0:r1 + 1, c0:c1 + 1] = 0.0
        for f in spec.faces:
            if not (lo <= f.side <= hi):
                continue
            r, c = int(f.cy // STRIDE), int(f.cx // STRIDE)
            if 0 <= r < h and 0 <= c < w:
                y[r, c] = 1.0
        maps.append(y[None])
    return maps


def mine_negatives(target_map_list, logit_maps, ratio=3, floor=8):
    """Keep positives plus the `ratio` x positives hardest negatives per image."""
    n_pos = sum(int((y > 0).sum()) for y in target_map_list)
    budget = ratio * n_pos if n_pos else floor
    neg = []
    for j, y in enumerate(target_map_list):
        rs, cs = np.nonzero(y[0] < 0)
        for r, c in zip(rs.tolist(), cs.tolist()):
            neg.append((float(logit_maps[j][0, r, c]), j, r, c))
    neg.sort(key=lambda t: (-t[0], t[1], t[2], t[3]))
    mined = [np.where(y > 0, y, 0.0) for y in target_map_list]
    for _, j, r, c in neg[:budget]:
        mined[j][0, r, c] = -1.0
    return mined


def evaluate(model, specs, images=None, match_iou=0.3):
    """Detection rate and false positives per image over ground-truth scenes."""
    total_faces = 0
    matched = 0
    false_pos = 0
    for i, spec in enumerate(specs):
        img = images[i] if images is not None else render_scene(spec)
        dets = detect(model, img)
        gt = [f.box for f in spec.faces]
        total_faces += len(gt)
        for g in gt:
            if any(iou(g, d.box) >= match_iou for d in dets):
                matched += 1
        for d in dets:
            if not any(iou(g, d.box) >= match_iou for g in gt):
                false_pos += 1
    rate = matched / total_faces if total_faces else 0.0
    return rate, false_pos / max(1, len(specs))


def train(model, scenes, epochs, lr, seed, holdout=None, target_rate=0.95,
          max_false_pos=0.2, noise_aug=6.0, neg_ratio=3, verbose=False):
    """SGD over rendered scenes with hard-negative mining.

    Returns (model, detection_rate) once the held-out bar is reached; raises
    TrainingFailedError if the epoch budget runs out first. epochs=0 returns
    the model untouched.
    """
    if epochs == 0:
        return model, 0.0
    if holdout is None:
        cut = max(1, len(scenes) // 5)
        holdout, scenes = scenes[:cut], scenes[cut:]
    bands = {j: False for j in range(len(model.scales))}
    for spec in scenes:
        for f in spec.faces:
            for j, s in enumerate(model.scales):
                lo, hi = scale_band(s)
                if lo <= f.side <= hi:
                    bands[j] = True
    if not all(bands.values()):
        raise ConfigurationError("training scenes must cover every scale band")

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7A]))
    images = [render_scene(s) for s in scenes]
    holdout_images = [render_scene(s) for s in holdout]
    shapes = None
    rate, fpi = 0.0, float("inf")
    for epoch in range(epochs):
        order = rng.permutation(len(scenes))
        for idx in order:
            img = images[idx]
            if noise_aug:
                img = img + rng.uniform(-noise_aug, noise_aug, size=img.shape)
            ctx = numerics.forward_with_context(model.graph, img[None] / 255.0, keep_cols=True)
            if shapes is None or ctx.head_shapes != shapes:
                shapes = ctx.head_shapes
            full = target_maps(model, scenes[idx], ctx.head_shapes)
            mined = mine_negatives(full, ctx.heads(), ratio=neg_ratio)
            n_active = max(1, sum(int((y != 0).sum()) for y in mined))
            cts = []
            for y, logits in zip(mined, ctx.heads()):
                _, ct = scale_loss(logits, y)
                cts.append(ct / n_active)  # mean loss keeps steps scale-free
            _, pgrads = numerics.backward_from_context(ctx, cts, want_param_grads=True)
            numerics.sgd_step(model.graph, pgrads, lr)
        rate, fpi = evaluate(model, holdout, holdout_images)
        if verbose:
            print(f"epoch {epoch + 1}: detection rate {rate:.3f}, fp/image {fpi:.3f}")
        if rate >= target_rate and fpi <= max_false_pos:
            return model, rate
    raise TrainingFailedError(
        f"stuck at detection rate {rate:.3f} with {fpi:.2f} false positives/image",
        detection_rate=rate,
        false_positives_per_image=fpi,
    )


def default_training_run(seed=17, verbose=False):
    """The stock recipe: fresh model, synthetic scenes, fixed hyperparameters."""
    from .scenes import random_scenes

    model = DetectorModel(graph=build_graph(seed))
    scenes = random_scenes(360, seed=seed, size=(96, 96), blank_fraction=0.05)
    model, rate = train(
        model, scenes, epochs=30, lr=0.2, seed=seed,
        target_rate=0.96, max_false_pos=0.15, verbose=verbose,
    )
    return model, rate
