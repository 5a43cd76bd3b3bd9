"""Network assembly: shapes, selection wiring, descriptors, checkpoints."""
import numpy as np
import pytest

from cdpm import alignment, ops
from cdpm.model import (
    CdpmNetwork,
    DetectionHeads,
    ModelConfig,
    NotInitializedError,
    PartBranch,
    ToyBackbone,
    gather_windows,
    scatter_window_grad,
)
from gradcheck import check_grad

RNG = np.random.default_rng(51)


def small_cfg(**kw):
    base = dict(classes=5, backbone_channels=(4, 8, 8, 8, 8), feature_dim=16,
                holistic_dim=16, attention_reduction=4)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def net():
    return CdpmNetwork(small_cfg(with_mgf=True), np.random.default_rng(1))


def test_backbone_output_shape_and_determinism(net):
    imgs = RNG.random((2, 384, 128, 3))
    fmap, _ = net.backbone_forward(imgs)
    assert fmap.shape == (2, 24, 8, 8)
    fmap2, _ = net.backbone_forward(imgs)
    assert np.array_equal(fmap, fmap2)


def test_backbone_zero_image_finite(net):
    fmap, _ = net.backbone_forward(np.zeros((1, 384, 128, 3)))
    assert np.all(np.isfinite(fmap))


def test_backbone_rejects_wrong_size(net):
    with pytest.raises(ops.ShapeError):
        net.backbone_forward(np.zeros((1, 128, 384, 3)))


def test_window_vectors_match_direct_means(net):
    fmap, _ = net.backbone_forward(RNG.random((2, 384, 128, 3)))
    vecs = net.window_vectors(fmap)
    assert vecs.shape == (2, 21, 8)
    for r in range(21):
        np.testing.assert_allclose(vecs[:, r], fmap[:, r : r + 4].mean(axis=(1, 2)))


def test_window_vectors_backward_matches_fd(net):
    fmap = RNG.random((1, 24, 8, 8))
    g = RNG.standard_normal((1, 21, 8))
    gx = net.window_vectors_backward(fmap.shape, g)
    check_grad(
        lambda v: float((net.window_vectors(v) * g).sum()), fmap.copy(), gx, tol=1e-6
    )


def test_detection_head_output_ranges(net):
    vecs = RNG.standard_normal((3, 21, 8)) * 5
    scores, offsets, _ = net.heads.forward(vecs)
    assert scores.shape == (3, 21, 7) and offsets.shape == (3, 21, 6)
    assert np.all((scores > 0) & (scores < 1))
    assert np.all(np.abs(offsets) < 1)
    # independent sigmoids: rows need not sum to 1
    assert not np.allclose(scores.sum(axis=-1), 1.0)


def test_detection_heads_zero_init_neutral():
    heads = DetectionHeads(np.random.default_rng(0), small_cfg(), 8)
    for p in heads.parameters():
        p.value[...] = 0.0
    scores, offsets, _ = heads.forward(RNG.standard_normal((2, 21, 8)))
    np.testing.assert_allclose(scores, 0.5)
    np.testing.assert_allclose(offsets, 0.0)


def test_detection_heads_structure():
    cfg = small_cfg()
    heads = DetectionHeads(np.random.default_rng(0), cfg, 8)
    assert heads.cls_out.w.value.shape[1] == cfg.parts + 1
    assert len(heads.reg_out) == cfg.parts
    names = [p.name for p in heads.parameters()]
    assert len(names) == len(set(names))
    per_head = [
        {n for n in names if n.startswith(f"valign.reg{k}.")} for k in range(1, 7)
    ]
    for i in range(6):
        for j in range(i + 1, 6):
            assert not per_head[i] & per_head[j]


def test_detection_heads_gradients():
    heads = DetectionHeads(np.random.default_rng(3), small_cfg(), 8)
    vecs = RNG.standard_normal((2, 5, 8))
    gs = RNG.standard_normal((2, 5, 7))
    go = RNG.standard_normal((2, 5, 6))
    _, _, ctx = heads.forward(vecs)
    for p in heads.parameters():
        p.zero_grad()
    gv = heads.backward(ctx, gs, go)

    def scalar(v):
        s, o, _ = heads.forward(v)
        return float((s * gs).sum() + (o * go).sum())

    check_grad(scalar, vecs.copy(), gv, tol=1e-6)


def test_part_branch_gradcheck_through_sca():
    branch = PartBranch("pb", np.random.default_rng(5), small_cfg(), 8)
    window = RNG.standard_normal((2, 4, 8, 8))
    glogits = RNG.standard_normal((2, 5))

    def scalar(v):
        _, scores, _ = branch.forward(v, True)
        return float((scores * glogits).sum())

    _, _, ctx = branch.forward(window, True)
    for p in branch.parameters():
        p.zero_grad()
    gwin = branch.backward(ctx, glogits)
    check_grad(scalar, window.copy(), gwin, tol=1e-5)
    for p in branch.parameters():
        analytic = p.grad.copy()

        def f(v, p=p):
            old = p.value.copy()
            p.value[...] = v
            try:
                return scalar(window)
            finally:
                p.value[...] = old

        check_grad(f, p.value.copy(), analytic, tol=1e-5)


def test_part_branch_refinement_off_is_gap_permutation_invariant():
    branch = PartBranch("pp", np.random.default_rng(6), small_cfg(), 8)
    window = RNG.standard_normal((1, 4, 8, 8))
    feat, scores, _ = branch.forward(window, False)
    perm = window[:, ::-1, ::-1, :].copy()  # spatial permutation
    feat2, scores2, _ = branch.forward(perm, False)
    np.testing.assert_allclose(feat, feat2, atol=1e-12)
    np.testing.assert_allclose(scores, scores2, atol=1e-12)


def test_part_branch_refinement_disabled_matches_branch_without_sca():
    rng_a, rng_b = np.random.default_rng(7), np.random.default_rng(7)
    with_sca = PartBranch("a", rng_a, small_cfg(), 8)
    without = PartBranch("b", rng_b, small_cfg(with_refinement=False), 8)
    # align the shared parameters (sca params were drawn first in `with_sca`)
    without.reduce.w.value[...] = with_sca.reduce.w.value
    without.reduce.b.value[...] = with_sca.reduce.b.value
    without.classifier.w.value[...] = with_sca.classifier.w.value
    without.classifier.b.value[...] = with_sca.classifier.b.value
    window = RNG.standard_normal((2, 4, 8, 8))
    feat_a, scores_a, _ = with_sca.forward(window, False)
    feat_b, scores_b, _ = without.forward(window, False)
    assert np.array_equal(feat_a, feat_b)
    assert np.array_equal(scores_a, scores_b)


def test_gather_scatter_roundtrip():
    fmap = RNG.random((3, 24, 8, 2))
    tops = np.array([0, 5, 20])
    win = gather_windows(fmap, tops, 4)
    assert win.shape == (3, 4, 8, 2)
    for i, t in enumerate(tops):
        np.testing.assert_array_equal(win[i], fmap[i, t : t + 4])
    g = np.zeros_like(fmap)
    scatter_window_grad(g, tops, win)
    for i, t in enumerate(tops):
        np.testing.assert_array_equal(g[i, t : t + 4], win[i])
        outside = np.delete(g[i], np.s_[t : t + 4], axis=0)
        assert not outside.any()


def test_descriptor_dimensions():
    base = CdpmNetwork(small_cfg(), np.random.default_rng(2))
    imgs = RNG.random((1, 384, 128, 3))
    assert base.descriptor(imgs).shape == (1, 6 * 16)
    mgf = CdpmNetwork(small_cfg(with_mgf=True), np.random.default_rng(2))
    assert mgf.descriptor(imgs).shape == (1, (6 + 2 + 3 + 4) * 16 + 16)
    # the documented full-size dimensions
    assert ModelConfig(classes=10).descriptor_dim == 3072
    assert ModelConfig(classes=10, with_mgf=True).descriptor_dim == 8192


def test_descriptor_deterministic(net):
    imgs = RNG.random((2, 384, 128, 3))
    a = net.descriptor(imgs)
    b = net.descriptor(imgs)
    assert np.array_equal(a, b)


def test_descriptor_requires_initialization():
    blank = CdpmNetwork(small_cfg())
    with pytest.raises(NotInitializedError):
        blank.descriptor(RNG.random((1, 384, 128, 3)))


def test_parameter_groups_partition(net):
    all_names = {p.name for p in net.parameters()}
    baseline = {p.name for p in net.baseline_parameters()}
    new = {p.name for p in net.new_module_parameters()}
    assert baseline | new == all_names
    assert not baseline & new
    assert any(n.startswith("backbone.") for n in baseline)
    assert any(".sca." in n for n in new)
    assert any(n.startswith("valign.") for n in new)
    assert any(n.startswith("holistic.") for n in new)
    assert any(n.startswith("g2.") for n in new)


def test_checkpoint_roundtrip_preserves_descriptors(tmp_path, net):
    imgs = RNG.random((1, 384, 128, 3))
    want = net.descriptor(imgs)
    path = tmp_path / "net.cdpm"
    net.save(path)
    loaded = CdpmNetwork.load(path)
    assert loaded.cfg == net.cfg
    got = loaded.descriptor(imgs)
    assert np.array_equal(want, got)


def test_checkpoint_mismatch_rejected(tmp_path, net):
    path = tmp_path / "net.cdpm"
    net.save(path)
    from cdpm import tensorio

    tensors = tensorio.load_tensors(path)
    tensors.pop("part1.reduce.w")
    tensorio.save_tensors(path, tensors)
    with pytest.raises(ValueError, match="does not match"):
        CdpmNetwork.load(path)


def test_holistic_embedding_unit_norm(net):
    fmap, _ = net.backbone_forward(RNG.random((3, 384, 128, 3)))
    emb, _ = net.holistic.forward(fmap)
    np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-9)


def test_select_part_windows_routes_per_part(net):
    scores = np.full((1, 21, 7), 0.1)
    offsets = np.zeros((1, 21, 6))
    scores[0, 4, 0] = 0.9  # part 1: single high score
    scores[0, 9, 2] = 0.7  # part 3: two above threshold
    scores[0, 11, 2] = 0.8
    offsets[0, 9, 2] = 0.05
    offsets[0, 11, 2] = 0.4
    picks = net.select_part_windows(scores, offsets, alignment.SelectionConfig(0.6))
    assert picks[0, 0] == 5
    assert picks[0, 2] == 10  # smaller |offset| among the two candidates
