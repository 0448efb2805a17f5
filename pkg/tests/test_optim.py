import numpy as np
import pytest

from uniclam import ops
from uniclam.config import RunConfig
from uniclam.contrastive import pad_ids, text_clam, uniclam_loss, vision_clam
from uniclam.optim import (DivergenceError, OptimizerState, active_modalities, adam_step, alternating_step,
                           build_train_state)
from uniclam.tensor import NonFiniteError, Tape, Tensor, backward, no_grad

TOY = RunConfig(K=2, h=8, heads=2, proj_dim=4, image_size=8, vocab_size=12, q_max=6, N_v=2, N_t=2,
                mask_channels=3, text_mask_layers=1, batch=3, dtype="float64", seed=5, steps=10)
CAPS = [(2, 3, 4), (5, 6), (7, 8, 9, 10)]


def batch(seed=0):
    return np.random.default_rng(seed).uniform(size=(3, 8, 8)), CAPS


def test_zero_gradient_is_fixed_point():
    p = Tensor(np.array([1.0, -2.0]))
    st = OptimizerState.for_params([p], lr=0.1)
    adam_step([p], [np.zeros(2)], st)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_first_step_is_unit_step():
    p = Tensor(np.array([0.0]))
    st = OptimizerState.for_params([p], lr=0.1)
    adam_step([p], [np.ones(1)], st)
    assert p.data[0] == pytest.approx(-0.1, abs=1e-8)
    assert st.t == 1


def test_adam_determinism_100_steps():
    out = []
    for _ in range(2):
        rng = np.random.default_rng(3)
        p = Tensor(rng.normal(size=10))
        st = OptimizerState.for_params([p], lr=0.01, weight_decay=5e-4)
        for _ in range(100):
            adam_step([p], [rng.normal(size=10)], st)
        out.append(p.data.copy())
    np.testing.assert_array_equal(out[0], out[1])


def test_adam_rejects_bad_gradients_without_updating():
    p = Tensor(np.ones(3))
    st = OptimizerState.for_params([p], lr=0.1)
    with pytest.raises(NonFiniteError):
        adam_step([p], [np.array([1.0, np.inf, 0.0])], st)
    np.testing.assert_array_equal(p.data, 1.0)
    assert st.t == 0
    with pytest.raises(ValueError):
        adam_step([p], [np.ones(2)], st)


def test_parameter_groups_are_disjoint():
    for sharing in ("gradual", "hard", "none"):
        s = build_train_state(TOY.replace(sharing=sharing))
        assert not {id(p) for p in s.encoder_params} & {id(p) for p in s.mask_params}
        assert len({id(p) for p in s.encoder_params}) == len(s.encoder_params)


def _snapshot(params):
    return [p.data.copy() for p in params]


def test_zero_mask_lr_leaves_generators_unchanged():
    s = build_train_state(TOY.replace(mask_lr=0.0))
    before = _snapshot(s.mask_params)
    r = alternating_step(s, *batch())
    for a, p in zip(before, s.mask_params):
        np.testing.assert_array_equal(a, p.data)
    assert r.masking_objective_post == r.masking_objective_pre


def test_masking_phase_does_not_touch_encoders():
    s = build_train_state(TOY.replace(lr=0.0, weight_decay=0.0, mask_lr=1e-2))
    before_e, before_m = _snapshot(s.encoder_params), _snapshot(s.mask_params)
    alternating_step(s, *batch())
    for a, p in zip(before_e, s.encoder_params):
        np.testing.assert_array_equal(a, p.data)
    assert any(not np.array_equal(a, p.data) for a, p in zip(before_m, s.mask_params))


def _adam_by_hand(p, g, cfg_lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m, v = (1 - b1) * g, (1 - b2) * g * g
    return p - cfg_lr * ((m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps) + wd * p)


def test_one_step_replay_oracle():
    cfg = TOY
    s = build_train_state(cfg)
    o = build_train_state(cfg)
    images, caps = batch()
    ids, km = pad_ids(caps)

    # phase (a): masks from the frozen generators are constants
    with no_grad():
        mv = o.mv.masks(images).data
        mt = o.mt.masks(o.et.embed_text(ids), km).data
    enc = o.encoder_params
    with Tape() as tape:
        total = uniclam_loss(images, caps, o.ev, o.et, None, None, cfg.tau, cfg.beta, cfg.lam,
                             masks_v=mv, masks_t=mt).total
    g = backward(tape, total, enc)
    new_enc = [_adam_by_hand(p.data, g[id(p)], cfg.lr, cfg.weight_decay) for p in enc]
    for p, d in zip(enc, new_enc):
        p.data[...] = d

    # phase (b): generators ascend on the unweighted sum, encoders fixed
    msk = o.mask_params
    for p in enc:
        p.requires_grad = False
    with Tape() as tape:
        l_v = vision_clam(images, o.ev, o.mv, cfg.tau)[0]
        l_t = text_clam(ids, km, o.et, o.mt, cfg.tau)[0]
        obj = ops.add(l_v, l_t)
        neg = ops.scale(obj, -1.0)
    g = backward(tape, neg, msk)
    new_msk = [_adam_by_hand(p.data, g[id(p)], cfg.lr, cfg.weight_decay) for p in msk]

    r = alternating_step(s, images, caps)
    for p, d in zip(s.encoder_params, new_enc):
        np.testing.assert_allclose(p.data, d, rtol=1e-9, atol=1e-10)
    for p, d in zip(s.mask_params, new_msk):
        np.testing.assert_allclose(p.data, d, rtol=1e-9, atol=1e-10)
    assert r.loss_total == pytest.approx(total.item(), abs=1e-12)
    assert r.masking_objective_pre == pytest.approx(obj.item(), abs=1e-12)


def test_ascent_moves_parameters_with_gradient_sign():
    cfg = TOY.replace(lr=0.0, weight_decay=0.0, mask_lr=1e-3)
    s = build_train_state(cfg)
    images, caps = batch(1)
    ids, km = pad_ids(caps)
    theta = s.mv.params["head.b"].data

    def objective():
        with no_grad():
            return (vision_clam(images, s.ev, s.mv, cfg.tau)[0].item()
                    + text_clam(ids, km, s.et, s.mt, cfg.tau)[0].item())

    derivs = []
    for i in range(len(theta)):
        orig = theta[i]
        theta[i] = orig + 1e-6
        fp = objective()
        theta[i] = orig - 1e-6
        fm = objective()
        theta[i] = orig
        derivs.append((fp - fm) / 2e-6)
    before = theta.copy()
    alternating_step(s, images, caps)
    moved = s.mv.params["head.b"].data - before
    for d, m in zip(derivs, moved):
        if abs(d) > 1e-6:
            assert np.sign(m) == np.sign(d)


def test_alternating_step_determinism():
    states = [build_train_state(TOY) for _ in range(2)]
    rows = [[alternating_step(s, *batch(k)) for k in range(3)] for s in states]
    assert rows[0] == rows[1]
    a, b = (s.named_tensors() for s in states)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


def test_divergence_restores_state_and_names_phase():
    s = build_train_state(TOY.replace(lr=1e30))
    before = s.named_tensors()
    before = {k: v.copy() for k, v in before.items()}
    with pytest.raises(DivergenceError) as ei, np.errstate(all="ignore"):
        for _ in range(3):
            alternating_step(s, *batch())
    assert ei.value.phase in ("encoder", "masking")
    if s.step == 0:
        for k, v in s.named_tensors().items():
            np.testing.assert_array_equal(v, before[k])


def test_random_augmentation_has_no_generators():
    s = build_train_state(TOY.replace(augmentation="random"))
    assert s.mv is None and s.mask_params == []
    r = alternating_step(s, *batch())
    assert r.masking_objective_pre == r.masking_objective_post


def test_sequential_schedule_halves():
    cfg = TOY.replace(unified="sequential", steps=5)
    assert [active_modalities(cfg, k) for k in range(5)] == [(True, False)] * 3 + [(False, True)] * 2
    s = build_train_state(cfg)
    r = alternating_step(s, *batch())
    assert r.loss_clam_t == 0.0 and r.loss_total == pytest.approx(r.loss_clam_v + cfg.lam * r.loss_gs, abs=1e-12)
    assert active_modalities(TOY, 0) == (True, True)


def test_hard_sharing_ties_and_zero_penalty():
    s = build_train_state(TOY.replace(sharing="hard"))
    assert s.ev.layers is s.et.layers
    assert alternating_step(s, *batch()).loss_gs == 0.0


def test_none_sharing_excludes_penalty_from_total():
    s = build_train_state(TOY.replace(sharing="none"))
    r = alternating_step(s, *batch())
    assert r.loss_gs > 0
    assert r.loss_total == pytest.approx(TOY.beta * r.loss_clam_v + (1 - TOY.beta) * r.loss_clam_t, abs=1e-12)


def test_batch_validation():
    s = build_train_state(TOY)
    with pytest.raises(ValueError):
        alternating_step(s, np.zeros((1, 8, 8)), [(2,)])
