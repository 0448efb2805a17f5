import json
import math

import numpy as np
import pytest

from uniclam.checkpoint import read_checkpoint, write_checkpoint
from uniclam.data import ANSWER_ID, generate_dataset
from uniclam.encoders import EncoderConfig, EncoderStack
from uniclam.gradcheck import bind, grad_check, module_values
from uniclam.tensor import Tensor, no_grad
from uniclam.vqa import (N_ANSWERS, EvalReport, VqaHead, VqaItem, answer_logits, evaluate, finetune_step,
                         make_finetune_state, nll_loss, predict_answer, report_from_predictions, vqa_items)

CFG = EncoderConfig(K=2, h=8, heads=2, patch_size=8, vocab_size=30, q_max=8, proj_dim=4, image_size=32)


def model(seed=0, zero_head=False):
    ev = EncoderStack(CFG, "vision", seed=seed, dtype=np.float64)
    et = EncoderStack(CFG, "text", seed=seed + 1, dtype=np.float64)
    return ev, et, VqaHead(8, 6, seed=seed + 2, zero=zero_head)


ITEMS = vqa_items(generate_dataset(4, 11))


def test_answer_space_has_twelve_classes():
    assert N_ANSWERS == 12
    assert VqaHead(8).params["cls.w"].shape[1] == 12


def test_prediction_is_a_distribution():
    ev, et, head = model()
    p = predict_answer(ev, et, head, ITEMS[:5])
    assert p.shape == (5, 12)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert predict_answer(ev, et, head, ITEMS[0]).shape == (12,)


def test_zero_head_is_uniform():
    ev, et, head = model(zero_head=True)
    np.testing.assert_allclose(predict_answer(ev, et, head, ITEMS[:3]), 1 / 12, atol=1e-15)


def test_prediction_matches_loop_oracle():
    ev, et, head = model(seed=4)
    item = ITEMS[2]
    with no_grad():
        v = ev.features(ev.embed_image(item.image[None].astype(np.float64))).data[0]
        t = et.features(et.embed_text(list(item.question_ids))).data[0]
    P = {k: x.data for k, x in head.params.items()}
    u = [sum(v[a] * P["bil.w"][a, b] for a in range(8)) * t[b] for b in range(8)]
    x = list(v) + list(t) + u
    h1 = [max(0.0, P["fc1.b"][j] + sum(x[i] * P["fc1.w"][i, j] for i in range(24))) for j in range(6)]
    h2 = [max(0.0, P["fc2.b"][j] + sum(h1[i] * P["fc2.w"][i, j] for i in range(6))) for j in range(6)]
    logits = [P["cls.b"][c] + sum(h2[i] * P["cls.w"][i, c] for i in range(6)) for c in range(12)]
    m = max(logits)
    e = [math.exp(z - m) for z in logits]
    np.testing.assert_allclose(predict_answer(ev, et, head, item), [x / sum(e) for x in e], atol=1e-12)


def test_argmax_invariant_to_logit_shift():
    ev, et, head = model(seed=3)
    before = predict_answer(ev, et, head, ITEMS).argmax(axis=1)
    head.params["cls.b"].data += 7.5
    np.testing.assert_array_equal(predict_answer(ev, et, head, ITEMS).argmax(axis=1), before)


def test_nll_zero_at_optimum():
    logits = Tensor(np.array([[0.0, -800.0, -800.0]]), requires_grad=True)
    from uniclam.tensor import Tape, backward
    with Tape() as tape:
        loss = nll_loss(logits, np.array([0]))
    g = backward(tape, loss, [logits])[id(logits)]
    assert loss.item() == 0.0
    np.testing.assert_array_equal(g, 0.0)


def test_nll_uniform_is_log_a():
    assert nll_loss(Tensor(np.zeros((3, 12))), np.array([0, 5, 11])).item() == pytest.approx(math.log(12), abs=1e-12)


def test_finetune_loss_matches_cross_entropy_oracle():
    ev, et, head = model(seed=8)
    batch = ITEMS[:4]
    with no_grad():
        logits = answer_logits(ev, et, head, batch).data
    ce = 0.0
    for row, it in zip(logits, batch):
        m = max(row)
        ce -= row[it.answer] - (m + math.log(sum(math.exp(z - m) for z in row)))
    st = make_finetune_state(ev, et, head, lr=1e-3)
    assert finetune_step(st, batch) == pytest.approx(ce / 4, abs=1e-9)
    assert st.step == 1


def test_finetune_updates_encoders_unless_frozen():
    for freeze in (False, True):
        ev, et, head = model(seed=1)
        w0 = ev.embed["patch.w"].data.copy()
        h0 = head.params["cls.w"].data.copy()
        st = make_finetune_state(ev, et, head, lr=1e-2, freeze_encoders=freeze)
        finetune_step(st, ITEMS[:4])
        assert np.array_equal(ev.embed["patch.w"].data, w0) == freeze
        assert not np.array_equal(head.params["cls.w"].data, h0)


def test_finetune_rejects_bad_batches():
    ev, et, head = model()
    st = make_finetune_state(ev, et, head, lr=1e-3)
    bad = VqaItem(ITEMS[0].image, ITEMS[0].question_ids, 12, True)
    with pytest.raises(ValueError, match="out of range"):
        finetune_step(st, [bad])
    with pytest.raises(ValueError):
        finetune_step(st, [])


def test_finetune_gradients_pass_grad_check():
    ev, et, head = model(seed=6)
    mods = {"ev": ev, "et": et, "head": head}
    batch = ITEMS[:2]

    def builder(t, _rng):
        bind(mods, t)
        return nll_loss(answer_logits(ev, et, head, batch), np.array([it.answer for it in batch]))

    errs = grad_check(builder, module_values(mods), max_coords=10)
    assert max(errs.values()) < 1e-4


def test_single_correct_closed_question():
    item = VqaItem(np.zeros((32, 32)), (2,), ANSWER_ID["yes"], False)
    rep = report_from_predictions(np.array([ANSWER_ID["yes"]]), [item])
    assert rep.accuracy_closed == 1.0 and rep.accuracy_open is None and rep.n_open == 0
    assert rep.accuracy_overall == 1.0
    assert json.loads(rep.to_json())["accuracy_open"] is None


def test_random_model_open_accuracy_is_chance():
    rng = np.random.default_rng(21)
    scenes = generate_dataset(1000, 500)
    items = [VqaItem(s.image, s.qa_pairs[2].question_ids, int(rng.integers(12)), True) for s in scenes]
    ev, et, head = model(seed=9)
    rep = evaluate(ev, et, head, items)
    se = math.sqrt((1 / 12) * (11 / 12) / 1000)
    assert abs(rep.accuracy_open - 1 / 12) <= 3 * se


def test_overall_is_weighted_mean():
    ev, et, head = model(seed=2)
    items = vqa_items(generate_dataset(30, 7))
    rep = evaluate(ev, et, head, items)
    expect = (rep.n_open * rep.accuracy_open + rep.n_closed * rep.accuracy_closed) / (rep.n_open + rep.n_closed)
    assert abs(rep.accuracy_overall - expect) <= 1e-12
    rep.check()
    assert rep.n_eval == 90 and rep.n_open == 30
    assert EvalReport.from_dict(json.loads(rep.to_json())) == rep
    assert evaluate(ev, et, head, items) == rep


def test_evaluate_rejects_empty():
    with pytest.raises(ValueError):
        evaluate(*model(), [])


def test_report_fields_and_confusion():
    items = [VqaItem(None, (2,), 0, False), VqaItem(None, (2,), 3, True), VqaItem(None, (2,), 4, True)]
    rep = report_from_predictions(np.array([0, 3, 5]), items)
    assert set(rep.to_dict()) == {"accuracy_open", "accuracy_closed", "accuracy_overall", "confusion", "n_eval"}
    assert rep.confusion["open"][4][5] == 1 and rep.confusion["closed"][0][0] == 1
    assert rep.accuracy_open == 0.5 and rep.accuracy_overall == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        EvalReport.from_dict({**rep.to_dict(), "extra": 1})


def test_finetuning_leaves_checkpoint_file_untouched(tmp_path):
    ev, et, head = model(seed=5)
    tensors = {f"ev.{k}": t.data for k, t in ev.named_parameters()}
    path = tmp_path / "enc.uclm"
    write_checkpoint(path, tensors)
    raw = path.read_bytes()
    loaded = read_checkpoint(path)
    for k, t in ev.named_parameters():
        t.data[...] = loaded[f"ev.{k}"]
    st = make_finetune_state(ev, et, head, lr=1e-2)
    finetune_step(st, ITEMS[:4])
    assert path.read_bytes() == raw
    assert not np.array_equal(ev.embed["patch.w"].data, read_checkpoint(path)["ev.embed.patch.w"])
