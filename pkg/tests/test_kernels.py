import math

import numpy as np
import pytest

from sgqa.kernels import (
    EDGE_GEOMETRY,
    GradCheckReport,
    LossBundle,
    compute_losses,
    cross_modal_attention,
    cross_modal_transformer,
    edge_to_node,
    forward_pipeline,
    grad_check,
    init_edges,
    init_params,
    make_batch,
    merge_embedding,
    node_to_edge,
    permutation_check,
    permute_batch,
    positional_encoding,
)

RNG = np.random.default_rng


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


# ---------------------------------------------------------------------------
# straight-line loop oracles (independent of the vectorized kernels)


def ln_loop(x, g, b, eps=1e-5):
    out = np.zeros_like(x)
    for i in range(x.shape[0]):
        row = x[i]
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        inv = 1.0 / math.sqrt(var + eps)
        for j in range(x.shape[1]):
            out[i, j] = (row[j] - mu) * inv * g[j] + b[j]
    return out


def posenc_loop(centers, sizes, orients, p, activation="relu"):
    m = centers.shape[0]
    d = p["pos.b1"].shape[0]
    out = np.zeros((m, d))
    for i in range(m):
        v = list(centers[i]) + list(sizes[i]) + [orients[i]]
        h = [sum(p["pos.A1"][r][c] * v[c] for c in range(7)) + p["pos.b1"][r]
             for r in range(d)]
        if activation == "relu":
            h = [max(0.0, val) for val in h]
        for r in range(d):
            out[i, r] = sum(p["pos.A2"][r][c] * h[c] for c in range(d)) + p["pos.b2"][r]
    return out


def attention_loop(t, p, prefix, heads):
    n, d = t.shape
    dh = d // heads
    q = t @ p[f"{prefix}.Wq"].T + p[f"{prefix}.bq"]
    k = t @ p[f"{prefix}.Wk"].T + p[f"{prefix}.bk"]
    v = t @ p[f"{prefix}.Wv"].T + p[f"{prefix}.bv"]
    concat = np.zeros((n, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(n):
            scores = [float(q[i, sl] @ k[j, sl]) / math.sqrt(dh) for j in range(n)]
            mx = max(scores)
            weights = [math.exp(s - mx) for s in scores]
            z = sum(weights)
            for j in range(n):
                concat[i, sl] += (weights[j] / z) * v[j, sl]
    return concat @ p[f"{prefix}.Wo"].T + p[f"{prefix}.bo"]


def layer_loop(t, p, prefix, heads):
    r1 = t + attention_loop(t, p, prefix, heads)
    y1 = ln_loop(r1, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    h1 = y1 @ p[f"{prefix}.ff.W1"].T + p[f"{prefix}.ff.b1"]
    f = np.maximum(h1, 0.0) @ p[f"{prefix}.ff.W2"].T + p[f"{prefix}.ff.b2"]
    return ln_loop(y1 + f, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])


def transformer_loop(x, w, p, heads, layers):
    t = np.concatenate([x, w], axis=0)
    for i in range(layers):
        t = layer_loop(t, p, f"tf{i}", heads)
    return t[: x.shape[0]], t[x.shape[0]:]


# ---------------------------------------------------------------------------
# positional encoding


def test_posenc_zero_weights():
    d = 8
    p = {"pos.A1": np.zeros((d, 7)), "pos.b1": np.zeros(d),
         "pos.A2": np.zeros((d, d)), "pos.b2": np.zeros(d)}
    out, _ = positional_encoding(np.ones((3, 3)), np.ones((3, 3)), np.ones(3), p)
    assert np.all(out == 0.0)


def test_posenc_constructed_identity():
    d = 10
    a1 = np.zeros((d, 7))
    a1[:7, :7] = np.eye(7)
    p = {"pos.A1": a1, "pos.b1": np.zeros(d),
         "pos.A2": np.eye(d), "pos.b2": np.zeros(d)}
    centers = np.array([[0.5, 1.0, 0.25]])
    sizes = np.array([[2.0, 0.75, 1.5]])
    orients = np.array([0.3])
    out, _ = positional_encoding(centers, sizes, orients, p)
    np.testing.assert_allclose(out[0, :7], [0.5, 1.0, 0.25, 2.0, 0.75, 1.5, 0.3])
    assert np.all(out[0, 7:] == 0.0)


def test_posenc_matches_loop_oracle():
    rng = RNG(0)
    d = 16
    p = {"pos.A1": rng.standard_normal((d, 7)), "pos.b1": rng.standard_normal(d),
         "pos.A2": rng.standard_normal((d, d)), "pos.b2": rng.standard_normal(d)}
    centers = rng.standard_normal((4, 3))
    sizes = rng.uniform(0.1, 2, (4, 3))
    orients = rng.standard_normal(4)
    out, _ = positional_encoding(centers, sizes, orients, p)
    np.testing.assert_allclose(out, posenc_loop(centers, sizes, orients, p), atol=1e-12)


# ---------------------------------------------------------------------------
# merge embedding


def _merge_params(rng, d):
    return {
        "merge.W1": rng.standard_normal((d, d)),
        "merge.W2": rng.standard_normal((d, d)),
        "merge.ln1.g": rng.uniform(0.5, 1.5, d),
        "merge.ln1.b": rng.standard_normal(d),
        "merge.ln2.g": rng.uniform(0.5, 1.5, d),
        "merge.ln2.b": rng.standard_normal(d),
    }


def test_merge_zero_inputs_gives_shifts():
    rng = RNG(1)
    d = 8
    p = _merge_params(rng, d)
    out, _ = merge_embedding(np.zeros((2, d)), np.zeros((2, d)), p)
    expected = p["merge.ln1.b"] + p["merge.ln2.b"]
    np.testing.assert_allclose(out, np.tile(expected, (2, 1)), atol=1e-12)


def test_merge_symmetry():
    rng = RNG(2)
    d = 8
    p = _merge_params(rng, d)
    p["merge.W2"] = p["merge.W1"].copy()
    p["merge.ln2.g"] = p["merge.ln1.g"].copy()
    p["merge.ln2.b"] = p["merge.ln1.b"].copy()
    x = rng.standard_normal((3, d))
    out, _ = merge_embedding(x, x, p)
    half = ln_loop(x @ p["merge.W1"].T, p["merge.ln1.g"], p["merge.ln1.b"])
    np.testing.assert_allclose(out, 2.0 * half, atol=1e-10)


def test_merge_matches_loop_oracle():
    rng = RNG(3)
    d = 8
    p = _merge_params(rng, d)
    x_pc = rng.standard_normal((5, d))
    x_pos = rng.standard_normal((5, d))
    out, _ = merge_embedding(x_pc, x_pos, p)
    expected = (ln_loop(x_pc @ p["merge.W1"].T, p["merge.ln1.g"], p["merge.ln1.b"])
                + ln_loop(x_pos @ p["merge.W2"].T, p["merge.ln2.g"], p["merge.ln2.b"]))
    np.testing.assert_allclose(out, expected, atol=1e-10)


# ---------------------------------------------------------------------------
# transformer stack


def test_transformer_zero_attention_is_ffn_pathway():
    rng = RNG(4)
    m, l, d, heads, layers = 2, 3, 8, 2, 2
    p = init_params(rng, d, heads=heads, layers=layers)
    for i in range(layers):
        for name in ("Wq", "Wk", "Wv", "Wo"):
            p[f"tf{i}.{name}"] = np.zeros((d, d))
    x = rng.standard_normal((m, d))
    w = rng.standard_normal((l, d))
    xp, wp, _ = cross_modal_transformer(x, w, p, heads=heads, layers=layers)
    t = np.concatenate([x, w], axis=0)
    for i in range(layers):
        y1 = ln_loop(t, p[f"tf{i}.ln1.g"], p[f"tf{i}.ln1.b"])
        h1 = y1 @ p[f"tf{i}.ff.W1"].T + p[f"tf{i}.ff.b1"]
        f = np.maximum(h1, 0.0) @ p[f"tf{i}.ff.W2"].T + p[f"tf{i}.ff.b2"]
        t = ln_loop(y1 + f, p[f"tf{i}.ln2.g"], p[f"tf{i}.ln2.b"])
    np.testing.assert_allclose(np.concatenate([xp, wp]), t, atol=1e-10)


def test_transformer_matches_loop_oracle():
    rng = RNG(5)
    m, l, d, heads, layers = 2, 3, 8, 2, 3
    p = init_params(rng, d, heads=heads, layers=layers)
    x = rng.standard_normal((m, d))
    w = rng.standard_normal((l, d))
    xp, wp, _ = cross_modal_transformer(x, w, p, heads=heads, layers=layers)
    ex, ew = transformer_loop(x, w, p, heads, layers)
    np.testing.assert_allclose(xp, ex, atol=1e-10)
    np.testing.assert_allclose(wp, ew, atol=1e-10)


def test_transformer_object_permutation_equivariance():
    rng = RNG(6)
    m, l, d = 5, 4, 8
    p = init_params(rng, d, heads=4, layers=3)
    x = rng.standard_normal((m, d))
    w = rng.standard_normal((l, d))
    xp, wp, _ = cross_modal_transformer(x, w, p)
    perm = rng.permutation(m)
    xp2, wp2, _ = cross_modal_transformer(x[perm], w, p)
    np.testing.assert_allclose(xp2, xp[perm], atol=1e-9)
    np.testing.assert_allclose(wp2, wp, atol=1e-9)


def test_transformer_single_token():
    rng = RNG(7)
    d = 8
    p = init_params(rng, d, heads=2, layers=1)
    x = rng.standard_normal((1, d))
    w = np.zeros((0, d))
    xp, wp, cache = cross_modal_transformer(x, w, p, heads=2, layers=1)
    attn_weights = cache[2][0][0][4]
    np.testing.assert_allclose(attn_weights, np.ones_like(attn_weights))
    ex, _ = transformer_loop(x, w, p, 2, 1)
    np.testing.assert_allclose(xp, ex, atol=1e-10)
    assert wp.shape == (0, d)


def test_transformer_rejects_bad_width():
    p = init_params(RNG(0), 8)
    with pytest.raises(ValueError, match="divisible"):
        cross_modal_transformer(np.zeros((2, 9)), np.zeros((1, 9)), p, heads=4)


# ---------------------------------------------------------------------------
# edge initialization


def test_init_edges_single_object():
    x = np.arange(4.0).reshape(1, 4)
    c = np.array([[1.0, 2.0, 3.0]])
    e = init_edges(x, c)
    assert e.shape == (1, 1, 2 * 4 + EDGE_GEOMETRY)
    np.testing.assert_allclose(e[0, 0, 8:11], c[0])
    np.testing.assert_allclose(e[0, 0, 11:14], c[0])
    np.testing.assert_allclose(e[0, 0, 14:], 0.0)


def test_init_edges_offsets_antisymmetric():
    rng = RNG(8)
    e = init_edges(rng.standard_normal((4, 3)), rng.standard_normal((4, 3)))
    offsets = e[:, :, -3:]
    np.testing.assert_allclose(offsets, -offsets.transpose(1, 0, 2), atol=1e-12)


def test_init_edges_matches_index_oracle():
    rng = RNG(9)
    m, d = 3, 5
    x = rng.standard_normal((m, d))
    c = rng.standard_normal((m, 3))
    e = init_edges(x, c)
    for i in range(m):
        for j in range(m):
            expected = np.concatenate([x[i], x[j], c[i], c[j], c[j] - c[i]])
            np.testing.assert_allclose(e[i, j], expected, atol=1e-12)


# ---------------------------------------------------------------------------
# edge-to-node


def test_edge_to_node_zero_projections():
    rng = RNG(10)
    m, d = 3, 4
    x = rng.standard_normal((m, d))
    edges = rng.standard_normal((m, m, 2 * d + EDGE_GEOMETRY))
    p = {"e2n.W3": np.zeros((d, 2 * d + EDGE_GEOMETRY)),
         "e2n.W4": np.zeros((d, 2 * d + EDGE_GEOMETRY))}
    out, _ = edge_to_node(x, edges, p)
    np.testing.assert_allclose(out, np.maximum(0.5 * x, 0.0), atol=1e-12)


def test_edge_to_node_gate_saturates():
    rng = RNG(11)
    m, d = 3, 4
    x = np.abs(rng.standard_normal((m, d)))
    edges = np.abs(rng.standard_normal((m, m, 2 * d + EDGE_GEOMETRY)))
    big = 50.0 * np.ones((d, 2 * d + EDGE_GEOMETRY))
    out, _ = edge_to_node(x, edges, {"e2n.W3": big, "e2n.W4": big})
    np.testing.assert_allclose(out, x, rtol=1e-6)


def test_edge_to_node_matches_loop_oracle():
    rng = RNG(12)
    m, d = 3, 4
    k = 2 * d + EDGE_GEOMETRY
    x = rng.standard_normal((m, d))
    edges = rng.standard_normal((m, m, k))
    p = {"e2n.W3": rng.standard_normal((d, k)), "e2n.W4": rng.standard_normal((d, k))}
    out, _ = edge_to_node(x, edges, p)
    expected = np.zeros((m, d))
    for i in range(m):
        rowp = sum(p["e2n.W3"] @ edges[i, j] for j in range(m)) / m
        colp = sum(p["e2n.W4"] @ edges[j, i] for j in range(m)) / m
        for c in range(d):
            r = rowp[c] * colp[c]
            expected[i, c] = max(0.0, x[i, c] * (1.0 / (1.0 + math.exp(-r))))
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_edge_to_node_gate_range_and_sign():
    rng = RNG(13)
    m, d = 4, 6
    k = 2 * d + EDGE_GEOMETRY
    x = rng.standard_normal((m, d))
    edges = rng.standard_normal((m, m, k))
    p = {"e2n.W3": rng.standard_normal((d, k)), "e2n.W4": rng.standard_normal((d, k))}
    out, cache = edge_to_node(x, edges, p)
    gate = cache[4]
    assert np.all(gate > 0.0) and np.all(gate < 1.0)
    assert np.all(out >= 0.0)


def test_edge_to_node_transpose_invariant_with_shared_projection():
    rng = RNG(14)
    m, d = 4, 5
    k = 2 * d + EDGE_GEOMETRY
    w = rng.standard_normal((d, k))
    p = {"e2n.W3": w, "e2n.W4": w.copy()}
    x = rng.standard_normal((m, d))
    edges = rng.standard_normal((m, m, k))
    out_a, cache_a = edge_to_node(x, edges, p)
    out_b, cache_b = edge_to_node(x, edges.transpose(1, 0, 2), p)
    # with W3 == W4 the row/column pools swap, so the gate input is unchanged
    np.testing.assert_allclose(cache_a[4], cache_b[4], atol=1e-12)
    np.testing.assert_allclose(out_a, out_b, atol=1e-12)


# ---------------------------------------------------------------------------
# node-to-edge


def test_node_to_edge_zero_nodes():
    d = 4
    p = {"n2e.W5": RNG(0).standard_normal((d, 2 * d))}
    out, _ = node_to_edge(np.zeros((3, d)), p)
    np.testing.assert_allclose(out, 0.0)


def test_node_to_edge_symmetric_projection():
    rng = RNG(15)
    m, d = 4, 5
    half = rng.standard_normal((d, d))
    p = {"n2e.W5": np.concatenate([half, half], axis=1)}
    out, _ = node_to_edge(rng.standard_normal((m, d)), p)
    np.testing.assert_allclose(out, out.transpose(1, 0, 2), atol=1e-12)


def test_node_to_edge_matches_loop_oracle():
    rng = RNG(16)
    m, d = 2, 4
    p = {"n2e.W5": rng.standard_normal((d, 2 * d))}
    x = rng.standard_normal((m, d))
    out, _ = node_to_edge(x, p)
    for i in range(m):
        for j in range(m):
            cat = np.concatenate([x[i], x[j]])
            np.testing.assert_allclose(out[i, j], np.maximum(p["n2e.W5"] @ cat, 0.0),
                                       atol=1e-12)


# ---------------------------------------------------------------------------
# cross-modal attention


def test_cma_single_node():
    rng = RNG(17)
    l, d = 2, 4
    p = {"cma.W6": rng.standard_normal((d, 2 * d))}
    w = rng.standard_normal((l, d))
    x = rng.standard_normal((1, d))
    out, _ = cross_modal_attention(w, x, p)
    for i in range(l):
        gate = _sigmoid(p["cma.W6"] @ np.concatenate([w[i], x[0]]))
        np.testing.assert_allclose(out[i], gate * x[0], atol=1e-12)


def test_cma_node_permutation_invariant():
    rng = RNG(18)
    l, m, d = 3, 5, 4
    p = {"cma.W6": rng.standard_normal((d, 2 * d))}
    w = rng.standard_normal((l, d))
    x = rng.standard_normal((m, d))
    out, _ = cross_modal_attention(w, x, p)
    perm = rng.permutation(m)
    out_p, _ = cross_modal_attention(w, x[perm], p)
    np.testing.assert_allclose(out_p, out, atol=1e-12)


def test_cma_matches_loop_oracle():
    rng = RNG(19)
    l, m, d = 2, 3, 4
    p = {"cma.W6": rng.standard_normal((d, 2 * d))}
    w = rng.standard_normal((l, d))
    x = rng.standard_normal((m, d))
    out, _ = cross_modal_attention(w, x, p)
    expected = np.zeros((l, d))
    for i in range(l):
        for j in range(m):
            gate = _sigmoid(p["cma.W6"] @ np.concatenate([w[i], x[j]]))
            expected[i] += gate * x[j] / m
    np.testing.assert_allclose(out, expected, atol=1e-12)


# ---------------------------------------------------------------------------
# losses


def test_ce_uniform_logits():
    k = 7
    bundle, _ = compute_losses(np.zeros(k), 3, np.zeros((2, k)), np.array([0, 1]),
                               np.zeros((2, 2, 3)), np.zeros((2, 2, 3)))
    assert bundle.vqa == pytest.approx(math.log(k))
    assert bundle.node == pytest.approx(math.log(k))


def test_edge_bce_zero_logits():
    m, npred = 3, 4
    bundle, _ = compute_losses(np.zeros(2), 0, np.zeros((m, 2)), np.zeros(m, dtype=int),
                               np.zeros((m, m, npred)), np.zeros((m, m, npred)))
    assert bundle.edge == pytest.approx(math.log(2.0))


def test_ce_large_margin_vanishes():
    logits = np.full(5, -30.0)
    logits[2] = 30.0
    bundle, _ = compute_losses(logits, 2, logits.reshape(1, -1), np.array([2]),
                               np.zeros((1, 1, 1)), np.zeros((1, 1, 1)))
    assert bundle.vqa <= 1e-12
    assert bundle.node <= 1e-12


def test_losses_match_hand_computation():
    rng = RNG(20)
    m, n_ans, n_cls, n_pred = 2, 3, 4, 2
    ans = rng.standard_normal(n_ans)
    node = rng.standard_normal((m, n_cls))
    edge = rng.standard_normal((m, m, n_pred))
    labels = np.array([1, 3])
    edge_labels = (rng.random((m, m, n_pred)) < 0.5).astype(float)
    bundle, _ = compute_losses(ans, 2, node, labels, edge, edge_labels,
                               weights=(1.0, 2.0, 3.0))

    def ce(z, t):
        return math.log(sum(math.exp(v) for v in z)) - z[t]

    l_vqa = ce(ans, 2)
    l_node = (ce(node[0], 1) + ce(node[1], 3)) / 2
    total, count = 0.0, 0
    for i in range(m):
        for j in range(m):
            if i == j:
                continue
            for c in range(n_pred):
                z, y = edge[i, j, c], edge_labels[i, j, c]
                total += math.log(1 + math.exp(z)) - y * z
                count += 1
    l_edge = total / count
    assert bundle.vqa == pytest.approx(l_vqa)
    assert bundle.node == pytest.approx(l_node)
    assert bundle.edge == pytest.approx(l_edge)
    assert bundle.total == pytest.approx(l_vqa + 2 * l_node + 3 * l_edge)


def test_losses_label_out_of_range():
    with pytest.raises(ValueError, match="label out of range"):
        compute_losses(np.zeros(3), 5, np.zeros((1, 3)), np.array([0]),
                       np.zeros((1, 1, 1)), np.zeros((1, 1, 1)))


def test_losses_nonnegative_random():
    rng = RNG(21)
    for _ in range(20):
        m = 3
        bundle, _ = compute_losses(
            rng.standard_normal(4), int(rng.integers(4)),
            rng.standard_normal((m, 5)), rng.integers(0, 5, m),
            rng.standard_normal((m, m, 3)),
            (rng.random((m, m, 3)) < 0.5).astype(float))
        assert bundle.vqa >= 0 and bundle.node >= 0 and bundle.edge >= 0


# ---------------------------------------------------------------------------
# gradient checks


@pytest.mark.parametrize("op", [
    "positional_encoding",
    "merge_embedding",
    "edge_to_node",
    "node_to_edge",
    "cross_modal_attention",
    "losses",
])
def test_grad_check_small_ops(op):
    report = grad_check(op, seed=3, m=3, l=2, d=8)
    assert report.passed, (op, report.max_rel_error, report.worst_param)


def test_grad_check_transformer():
    report = grad_check("cross_modal_transformer", seed=3, m=2, l=2, d=8, layers=2)
    assert report.passed, (report.max_rel_error, report.worst_param)


def test_grad_check_linear_posenc_near_exact():
    report = grad_check("positional_encoding", seed=5, m=3, l=2, d=8,
                        activation="identity", tol=1e-8)
    assert report.max_rel_error < 1e-8


def test_grad_check_full_small():
    report = grad_check("full", seed=1, m=3, l=2, d=8, layers=2)
    assert report.passed, (report.max_rel_error, report.worst_param)


def test_grad_check_detects_corruption():
    report = grad_check("merge_embedding", seed=3, m=3, l=2, d=8, corrupt=True)
    assert not report.passed
    assert report.max_rel_error > 0.01


def test_staged_objective_matches_plain_forward():
    # the staged finite-difference objective must agree with a from-scratch
    # forward pass for perturbations of every parameter group
    from sgqa.kernels import _op_case

    rng = RNG(9)
    params, objective, _, _, _ = _op_case("full", rng, 4, 3, 8, 4, 2, "relu")
    base = objective(params)  # primes the staged prefix state
    perturb_rng = RNG(10)
    for name in sorted(params):
        arr = params[name]
        idx = int(perturb_rng.integers(arr.size))
        orig = arr.reshape(-1)[idx]
        arr.reshape(-1)[idx] = orig + 0.05
        staged = objective(params, name)
        plain = objective(params)
        arr.reshape(-1)[idx] = orig
        objective(params)  # restore the clean prefix state
        assert staged == pytest.approx(plain, rel=1e-12, abs=1e-12)
        assert staged != pytest.approx(base, rel=1e-9) or np.isclose(staged, base)


# ---------------------------------------------------------------------------
# permutation equivariance of the full pipeline


def test_permutation_check_quick():
    report = permutation_check(seed=2, m=4, l=3, d=8, trials=10)
    assert report.passed, report


def test_permute_batch_consistency():
    rng = RNG(22)
    batch = make_batch(rng, 4, 3, 8)
    perm = np.array([2, 0, 3, 1])
    permuted = permute_batch(batch, perm)
    np.testing.assert_allclose(permuted["x_pc"], batch["x_pc"][perm])
    np.testing.assert_allclose(permuted["edge_labels"][0, 1],
                               batch["edge_labels"][2, 0])


def test_pipeline_losses_finite_and_shapes():
    rng = RNG(23)
    params = init_params(rng, 8, heads=4, layers=2, n_answers=5,
                         n_node_classes=6, n_edge_predicates=4)
    batch = make_batch(rng, 4, 3, 8, n_answers=5, n_node_classes=6,
                       n_edge_predicates=4)
    bundle, cache = forward_pipeline(params, batch, layers=2)
    assert isinstance(bundle, LossBundle)
    assert bundle.total == pytest.approx(bundle.vqa + bundle.node + bundle.edge)
    assert np.isfinite(bundle.total)
    assert cache["x_vp"].shape == (4, 8)
    assert cache["x_ep"].shape == (4, 4, 8)
    assert cache["what"].shape == (3, 8)
    assert np.all(cache["x_vp"] >= 0.0)
