import math

import numpy as np
import pytest

from uniclam.contrastive import (clam_from_representations, clam_loss, combine, info_nce, pad_ids, text_clam,
                                 uniclam_loss, vision_clam)
from uniclam.encoders import EncoderConfig, EncoderStack
from uniclam.masking import TextMasker, VisionMasker
from uniclam.tensor import Tensor

CFG = EncoderConfig(K=2, h=8, heads=2, patch_size=4, vocab_size=12, q_max=6, proj_dim=4, image_size=8)


def cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def info_nce_loop(za, zp, tau):
    n = len(za)
    z = np.concatenate([za, zp])
    total = 0.0
    for i in range(n):
        num = math.exp(cos(za[i], zp[i]) / tau)
        den = sum(math.exp(cos(za[i], z[k]) / tau) for k in range(2 * n) if k != i)
        total += -math.log(num / den)
    return total / n


def clam_loop(anchors, z, tau):
    N, n, _ = anchors.shape
    total = 0.0
    for j in range(N):
        for i in range(n):
            num = math.exp(cos(anchors[j, i], z[i]) / tau)
            den = sum(math.exp(cos(anchors[j, i], z[k]) / tau) for k in range(n) if k != i)
            total += -math.log(num / den)
    return total / (N * n)


@pytest.mark.parametrize("n", [2, 3, 8])
@pytest.mark.parametrize("tau", [0.05, 0.1, 1.0])
def test_uniform_similarity_gives_log_2n_minus_1(n, tau):
    z = Tensor(np.ones((n, 5)) / math.sqrt(5))
    assert info_nce(z, z, tau).item() == pytest.approx(math.log(2 * n - 1), abs=1e-6)


def test_aligned_positives_orthogonal_negatives_go_to_zero():
    e = np.eye(4)[:2]
    vals = []
    for tau in (0.5, 0.05):
        got = info_nce(Tensor(e), Tensor(e), tau).item()
        assert got == pytest.approx(info_nce_loop(e, e, tau), abs=1e-12)
        vals.append(got)
    assert vals[0] > vals[1] > 0
    assert vals[1] < 1e-8


def test_random_batch_matches_double_loop(rng):
    a, p = rng.normal(size=(3, 8)), rng.normal(size=(3, 8))
    assert info_nce(Tensor(a), Tensor(p), 0.1).item() == pytest.approx(info_nce_loop(a, p, 0.1), abs=1e-9)


def test_info_nce_invariant_to_common_permutation(rng):
    a, p = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    perm = rng.permutation(5)
    assert info_nce(Tensor(a), Tensor(p), 0.2).item() == pytest.approx(
        info_nce(Tensor(a[perm]), Tensor(p[perm]), 0.2).item(), abs=1e-12)


def test_info_nce_positive_on_nondegenerate_batch(rng):
    for _ in range(20):
        assert info_nce(Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 3))), 0.1).item() > 0


def test_info_nce_errors():
    z = Tensor(np.ones((1, 3)))
    with pytest.raises(ValueError):
        info_nce(z, z, 0.1)
    z2 = Tensor(np.ones((2, 3)))
    with pytest.raises(ValueError):
        info_nce(z2, z2, 0.0)
    with pytest.raises(ValueError):
        clam_from_representations(Tensor(np.ones((1, 1, 3))), Tensor(np.ones((1, 3))), 0.1)


def test_clam_matches_loop_oracle(rng):
    anchors, z = rng.normal(size=(3, 4, 5)), rng.normal(size=(4, 5))
    assert clam_from_representations(Tensor(anchors), Tensor(z), 0.1).item() == pytest.approx(
        clam_loop(anchors, z, 0.1), abs=1e-9)


def test_zero_masks_make_anchor_the_unmasked_encoding(rng):
    # with nothing occluded, each anchor equals its own unmasked encoding
    ev = EncoderStack(CFG, "vision", seed=1, dtype=np.float64)
    x = rng.uniform(size=(3, 8, 8))
    loss, _ = vision_clam(x, ev, None, 0.1, masks=np.zeros((3, 1, 8, 8)))
    z = ev.encode(ev.embed_image(x)).data
    assert loss.item() == pytest.approx(clam_loop(z[None], z, 0.1), abs=1e-9)


def test_two_samples_one_mask_matches_explicit_oracle(rng):
    ev = EncoderStack(CFG, "vision", seed=2, dtype=np.float64)
    mv = VisionMasker(1, channels=3, seed=3, dtype=np.float64)
    x = rng.uniform(size=(2, 8, 8))
    loss, m = vision_clam(x, ev, mv, 0.1)
    np.testing.assert_array_equal(m.data, 1.0)  # a single mask is the whole image
    anchors = np.stack([ev.encode(ev.embed_image(x[i] * (1 - m.data[i, 0]))).data[0] for i in range(2)])
    z = np.stack([ev.encode(ev.embed_image(x[i])).data[0] for i in range(2)])
    assert loss.item() == pytest.approx(clam_loop(anchors[None], z, 0.1), abs=1e-9)


def test_full_occlusion_anchor_is_zero_input_encoding(rng):
    ev = EncoderStack(CFG, "vision", seed=4, dtype=np.float64)
    x = rng.uniform(size=(3, 8, 8))
    loss, _ = vision_clam(x, ev, None, 0.1, masks=np.ones((3, 1, 8, 8)))
    zero = ev.encode(ev.embed_image(np.zeros((1, 8, 8)))).data
    z = ev.encode(ev.embed_image(x)).data
    assert math.isfinite(loss.item())
    assert loss.item() == pytest.approx(clam_loop(np.repeat(zero, 3, 0)[None], z, 0.1), abs=1e-9)


def test_text_clam_matches_oracle(rng):
    et = EncoderStack(CFG, "text", seed=5, dtype=np.float64)
    mt = TextMasker(8, 2, 2, n_layers=1, seed=6, dtype=np.float64)
    caps = [(2, 3, 4), (5, 6), (7, 8, 9)]
    ids, km = pad_ids(caps)
    loss, m = text_clam(ids, km, et, mt, 0.1)
    tok = et.embed_text(ids, positional=False).data
    pe = et.embed_text(ids).data - tok
    anchors = np.zeros((2, 3, 4))
    for j in range(2):
        for i in range(3):
            view = tok[i] * (1 - m.data[i, j])[:, None] + pe[i]
            anchors[j, i] = et.encode(Tensor(view[None]), km[i : i + 1]).data[0]
    z = et.encode(et.embed_text(ids), km).data
    assert loss.item() == pytest.approx(clam_loop(anchors, z, 0.1), abs=1e-9)
    assert clam_loss(caps, et, mt, 0.1).item() == pytest.approx(loss.item(), abs=1e-12)


def test_fully_occluded_caption_keeps_positions():
    et = EncoderStack(CFG, "text", seed=5, dtype=np.float64)
    ids, km = pad_ids([(2, 3), (5, 6)])
    masks = np.zeros((2, 2, 2))
    masks[:, 0] = 1.0
    loss, _ = text_clam(ids, km, et, None, 0.1, masks=masks)
    assert np.isfinite(loss.item())


def test_pad_ids():
    ids, km = pad_ids([(3, 4), (5,)])
    np.testing.assert_array_equal(ids, [[3, 4], [5, 0]])
    np.testing.assert_array_equal(km, [[True, True], [True, False]])


def _models(seed=0, same=False):
    ev = EncoderStack(CFG, "vision", seed=seed, dtype=np.float64)
    et = EncoderStack(CFG, "text", seed=seed + 1, dtype=np.float64)
    if same:
        for a, b in zip(ev.layers, et.layers):
            for k in a:
                b[k].data[...] = a[k].data
    mv = VisionMasker(2, channels=3, seed=seed + 2, dtype=np.float64)
    mt = TextMasker(8, 2, 2, n_layers=1, seed=seed + 3, dtype=np.float64)
    return ev, et, mv, mt


def test_beta_one_lambda_zero_is_vision_only(rng):
    ev, et, mv, mt = _models()
    x = rng.uniform(size=(2, 8, 8))
    br = uniclam_loss(x, [(2, 3), (4, 5)], ev, et, mv, mt, 0.1, 1.0, 0.0)
    assert br.total.item() == br.l_clam_v.item()


def test_identical_stacks_zero_sharing_term(rng):
    ev, et, mv, mt = _models(same=True)
    br = uniclam_loss(rng.uniform(size=(2, 8, 8)), [(2, 3), (4, 5)], ev, et, mv, mt, 0.1, 0.3, 1e-3)
    assert br.l_gs.item() == 0.0
    assert br.total.item() == pytest.approx(0.3 * br.l_clam_v.item() + 0.7 * br.l_clam_t.item(), abs=1e-12)


def test_defaults_total_matches_component_oracles(rng):
    from uniclam.sharing import sharing_penalty

    ev, et, mv, mt = _models(seed=7)
    x = rng.uniform(size=(2, 8, 8))
    caps = [(2, 3, 4), (5, 6)]
    br = uniclam_loss(x, caps, ev, et, mv, mt, 0.1, 0.3, 1e-3)
    l_v = clam_loss(x, ev, mv, 0.1).item()
    l_t = clam_loss(caps, et, mt, 0.1).item()
    l_gs = sharing_penalty(ev, et).item()
    assert br.total.item() == pytest.approx(0.3 * l_v + 0.7 * l_t + 1e-3 * l_gs, abs=1e-9)
    assert br.values()["l_gs"] == pytest.approx(l_gs, abs=1e-12)


def test_combine_is_affine():
    t = combine(Tensor(2.0), Tensor(4.0), Tensor(10.0), 0.25, 0.5)
    assert t.item() == pytest.approx(0.5 + 3.0 + 5.0, abs=1e-15)
