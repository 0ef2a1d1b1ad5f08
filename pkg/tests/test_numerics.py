"""Numerics checks against independent oracles: naive convolution and finite differences."""

import numpy as np
import pytest

from erfattack import numerics
from erfattack.errors import ConfigurationError, NonFiniteError
from erfattack.numerics import (
    BiasAdd,
    ComputeGraph,
    Conv2d,
    MaxPool2,
    Node,
    Relu,
    Sigmoid,
    backward_from_context,
    backward_to_input,
    forward,
    forward_with_context,
    load_graph,
    save_graph,
    sgd_step,
)


def naive_conv2d(x, w, pad):
    """Direct loop convolution, kept deliberately unfused and index-based."""
    out_c, in_c, kh, kw = w.shape
    c, h, wd = x.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    oh = h + 2 * pad - kh + 1
    ow = wd + 2 * pad - kw + 1
    y = np.zeros((out_c, oh, ow))
    for o in range(out_c):
        for r in range(oh):
            for col in range(ow):
                acc = 0.0
                for ci in range(in_c):
                    for i in range(kh):
                        for j in range(kw):
                            acc += w[o, ci, i, j] * xp[ci, r + i, col + j]
                y[o, r, col] = acc
    return y


def random_graph(rng, in_c=1, depth=3, with_pool=True, size_hint=12):
    """Small random conv/relu/pool chain ending in two 1x1 heads."""
    nodes = []
    c = in_c
    src = -1
    pooled = False
    for d in range(depth):
        oc = int(rng.integers(2, 5))
        w = rng.standard_normal((oc, c, 3, 3)) * 0.5
        nodes.append(Node(Conv2d(w), src))
        src = len(nodes) - 1
        nodes.append(Node(BiasAdd(rng.standard_normal(oc) * 0.1), src))
        src = len(nodes) - 1
        nodes.append(Node(Relu(), src))
        src = len(nodes) - 1
        c = oc
        if with_pool and not pooled and d == 0:
            nodes.append(Node(MaxPool2(), src))
            src = len(nodes) - 1
            pooled = True
    trunk = src
    outputs = []
    for _ in range(2):
        w = rng.standard_normal((1, c, 1, 1))
        nodes.append(Node(Conv2d(w), trunk))
        outputs.append(len(nodes) - 1)
    return ComputeGraph(in_c, nodes, outputs)


def loss_and_grad(graph, x, cotangents):
    heads = forward(graph, x)
    loss = sum(float((ct * h).sum()) for ct, h in zip(cotangents, heads))
    return loss, backward_to_input(graph, x, cotangents)


def finite_diff_grad(graph, x, cotangents, h=1e-5):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        lp = sum(float((ct * hm).sum()) for ct, hm in zip(cotangents, forward(graph, x)))
        flat[k] = orig - h
        lm = sum(float((ct * hm).sum()) for ct, hm in zip(cotangents, forward(graph, x)))
        flat[k] = orig
        gf[k] = (lp - lm) / (2 * h)
    return g


def nudge_away_from_kinks(graph, x, margin=1e-4):
    """Resample pixels until no relu sits near zero and no pool window near a tie."""
    rng = np.random.default_rng(0)
    for _ in range(50):
        ctx = forward_with_context(graph, x)
        bad = False
        for i, node in enumerate(ctx.graph.nodes):
            src = ctx.x if node.src == -1 else ctx.acts[node.src]
            if node.op.kind == "relu" and np.abs(src).min() < margin:
                bad = True
            if node.op.kind == "maxpool2":
                c, hh, ww = src.shape
                w4 = src.reshape(c, hh // 2, 2, ww // 2, 2).transpose(0, 1, 3, 2, 4).reshape(-1, 4)
                w4 = np.sort(w4, axis=1)
                top, second = w4[:, 3], w4[:, 2]
                # exact zero ties are clipped relu outputs; the relu margin keeps them frozen
                close = (top - second < margin) & ~((top == 0.0) & (second == 0.0))
                if close.any():
                    bad = True
        if not bad:
            return x
        x = x + rng.standard_normal(x.shape) * 0.01
    pytest.skip("could not move input away from kinks")


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def test_zero_weights_zero_input_gives_zero_logits():
    nodes = [Node(Conv2d(np.zeros((2, 1, 3, 3))), -1)]
    g = ComputeGraph(1, nodes, [0])
    out = forward(g, np.zeros((1, 8, 8)))
    assert len(out) == 1
    assert not out[0].any()


def test_forward_deterministic():
    rng = np.random.default_rng(3)
    g = random_graph(rng)
    x = rng.standard_normal((1, 12, 12))
    a = forward(g, x)
    b = forward(g, x)
    for ha, hb in zip(a, b):
        assert ha.tobytes() == hb.tobytes()


@pytest.mark.parametrize("seed", range(6))
def test_forward_matches_naive_conv_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    x = rng.standard_normal((2, 9, 9))
    chain = [
        (Conv2d(rng.standard_normal((3, 2, 3, 3))), 1),
        (Conv2d(rng.standard_normal((4, 3, 3, 3))), 1),
        (Conv2d(rng.standard_normal((2, 4, 1, 1))), 0),
    ]
    nodes = [Node(op, i - 1) for i, (op, _) in enumerate(chain)]
    g = ComputeGraph(2, nodes, [2])
    got = forward(g, x)[0]
    ref = x
    for op, pad in chain:
        ref = naive_conv2d(ref, op.weight, pad)
    assert np.max(np.abs(got - ref)) <= 1e-10 * max(1.0, np.max(np.abs(ref)))


def test_forward_shape_mismatch_raises():
    g = ComputeGraph(1, [Node(Conv2d(np.zeros((1, 1, 3, 3))), -1)], [0])
    with pytest.raises(ConfigurationError):
        forward(g, np.zeros((2, 8, 8)))
    with pytest.raises(ConfigurationError):
        forward(g, np.zeros((8, 8)))


def test_maxpool_requires_even_dims():
    g = ComputeGraph(1, [Node(MaxPool2(), -1)], [0])
    with pytest.raises(ConfigurationError):
        forward(g, np.zeros((1, 7, 8)))


def test_non_finite_input_rejected():
    g = ComputeGraph(1, [Node(Relu(), -1)], [0])
    x = np.zeros((1, 4, 4))
    x[0, 1, 1] = np.nan
    with pytest.raises(NonFiniteError):
        forward(g, x)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_zero_cotangent_gives_zero_gradient():
    rng = np.random.default_rng(5)
    g = random_graph(rng)
    x = rng.standard_normal((1, 12, 12))
    cts = [np.zeros(s) for s in forward_with_context(g, x).head_shapes]
    assert not backward_to_input(g, x, cts).any()


def test_cotangent_shape_mismatch_raises():
    rng = np.random.default_rng(6)
    g = random_graph(rng)
    x = rng.standard_normal((1, 12, 12))
    ctx = forward_with_context(g, x)
    bad = [np.zeros((s[0], s[1] + 1, s[2])) for s in ctx.head_shapes]
    with pytest.raises(ConfigurationError):
        backward_from_context(ctx, bad)


def test_single_neuron_cotangent_matches_finite_difference():
    # gradient of one head neuron == the partial derivative of that neuron
    rng = np.random.default_rng(7)
    g = random_graph(rng, depth=2)
    x = rng.standard_normal((1, 10, 10))
    x = nudge_away_from_kinks(g, x)
    ctx = forward_with_context(g, x)
    cts = [np.zeros(s) for s in ctx.head_shapes]
    cts[0][0, ctx.head_shapes[0][1] // 2, ctx.head_shapes[0][2] // 2] = 1.0
    ana = backward_from_context(ctx, cts)
    num = finite_diff_grad(g, x, cts)
    denom = np.maximum(np.abs(num), 1e-7)
    assert np.max(np.abs(ana - num) / denom) < 1e-4


@pytest.mark.parametrize("seed", range(8))
def test_gradient_matches_finite_difference(seed):
    rng = np.random.default_rng(200 + seed)
    g = random_graph(rng, depth=int(rng.integers(1, 3)))
    x = rng.standard_normal((1, 12, 12))
    x = nudge_away_from_kinks(g, x)
    ctx = forward_with_context(g, x)
    cts = [rng.standard_normal(s) for s in ctx.head_shapes]
    ana = backward_from_context(ctx, cts)
    num = finite_diff_grad(g, x, cts)
    denom = np.maximum(np.abs(num), 1e-7)
    assert np.max(np.abs(ana - num) / denom) < 1e-4


def test_backward_linear_in_cotangent():
    rng = np.random.default_rng(11)
    g = random_graph(rng)
    x = rng.standard_normal((1, 12, 12))
    ctx = forward_with_context(g, x)
    u = [rng.standard_normal(s) for s in ctx.head_shapes]
    v = [rng.standard_normal(s) for s in ctx.head_shapes]
    a, b = 0.7, -1.3
    mixed = backward_from_context(ctx, [a * uu + b * vv for uu, vv in zip(u, v)])
    split = a * backward_from_context(ctx, u) + b * backward_from_context(ctx, v)
    assert np.max(np.abs(mixed - split)) < 1e-10 * max(1.0, np.max(np.abs(split)))


def test_maxpool_tie_routes_to_first_window_element():
    g = ComputeGraph(1, [Node(MaxPool2(), -1)], [0])
    x = np.full((1, 2, 2), 3.0)  # four-way tie
    ctx = forward_with_context(g, x)
    grad = backward_from_context(ctx, [np.ones((1, 1, 1))])
    expect = np.zeros((1, 2, 2))
    expect[0, 0, 0] = 1.0  # row-major first element wins
    assert np.array_equal(grad, expect)


def test_sigmoid_gradient():
    g = ComputeGraph(1, [Node(Sigmoid(), -1)], [0])
    x = np.array([[[0.0, 2.0], [-2.0, 30.0]]])
    ctx = forward_with_context(g, x)
    got = backward_from_context(ctx, [np.ones((1, 2, 2))])
    s = 1.0 / (1.0 + np.exp(-x))
    assert np.allclose(got, s * (1 - s), atol=1e-12)


# ---------------------------------------------------------------------------
# sgd + checkpoint
# ---------------------------------------------------------------------------

def test_sgd_step_arithmetic():
    g = ComputeGraph(1, [Node(Conv2d(np.ones((1, 1, 1, 1))), -1)], [0])
    sgd_step(g, {0: np.full((1, 1, 1, 1), 2.0)}, 0.1)
    assert g.nodes[0].op.weight[0, 0, 0, 0] == pytest.approx(0.8)


def test_sgd_zero_gradient_and_zero_lr_keep_weights():
    rng = np.random.default_rng(13)
    g = random_graph(rng)
    before = [arr.copy() for _, arr in g.parameters()]
    sgd_step(g, {i: np.zeros_like(a) for i, a in g.parameters()}, 0.5)
    sgd_step(g, {i: np.ones_like(a) for i, a in g.parameters()}, 0.0)
    for (_, after), orig in zip(g.parameters(), before):
        assert np.array_equal(after, orig)


def test_param_gradients_match_finite_difference():
    rng = np.random.default_rng(17)
    g = random_graph(rng, depth=1, with_pool=False)
    x = rng.standard_normal((1, 8, 8))
    x = nudge_away_from_kinks(g, x)
    ctx = forward_with_context(g, x, keep_cols=True)
    cts = [rng.standard_normal(s) for s in ctx.head_shapes]
    _, pgrads = backward_from_context(ctx, cts, want_param_grads=True)
    h = 1e-6
    for i, arr in g.parameters():
        flat = arr.reshape(-1)
        for k in range(0, flat.size, max(1, flat.size // 5)):
            orig = flat[k]
            flat[k] = orig + h
            lp = sum(float((c * hm).sum()) for c, hm in zip(cts, forward(g, x)))
            flat[k] = orig - h
            lm = sum(float((c * hm).sum()) for c, hm in zip(cts, forward(g, x)))
            flat[k] = orig
            num = (lp - lm) / (2 * h)
            assert pgrads[i].reshape(-1)[k] == pytest.approx(num, rel=1e-4, abs=1e-6)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(19)
    g = random_graph(rng)
    path = tmp_path / "model.ckpt"
    save_graph(g, path)
    g2 = load_graph(path)
    assert len(g2.nodes) == len(g.nodes)
    assert g2.outputs == g.outputs
    for (i, a), (j, b) in zip(g.parameters(), g2.parameters()):
        assert i == j
        assert a.tobytes() == b.tobytes()
    x = rng.standard_normal((1, 12, 12))
    for ha, hb in zip(forward(g, x), forward(g2, x)):
        assert ha.tobytes() == hb.tobytes()


def test_checkpoint_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ConfigurationError):
        load_graph(path)


def test_checkpoint_truncation_rejected(tmp_path):
    rng = np.random.default_rng(23)
    g = random_graph(rng)
    path = tmp_path / "model.ckpt"
    save_graph(g, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-4])
    with pytest.raises(ConfigurationError):
        load_graph(path)
