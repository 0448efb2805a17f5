"""Answer classification over pre-trained encoders.

Fusion takes the pooled (pre-projection) image and question features v and
t, forms the bilinear interaction u = (v W) * t, and runs a two-layer MLP on
[v; t; u]. A linear classifier maps the result to the answer space.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .contrastive import pad_ids
from .data import ANSWERS, SceneSample
from .encoders import EncoderStack
from .optim import OptimizerState, adam_step
from .tensor import NonFiniteError, Tape, Tensor, backward, no_grad

N_ANSWERS = len(ANSWERS)


class VqaHead:
    def __init__(self, h: int, hidden: int = 64, n_answers: int = N_ANSWERS, seed: int = 0,
                 dtype=np.float64, zero: bool = False):
        rng = np.random.default_rng(seed)
        self.h, self.hidden, self.n_answers = h, hidden, n_answers
        self.dtype = np.dtype(dtype)

        def w(shape, fan_in, name):
            data = np.zeros(shape) if zero else rng.normal(0.0, 1 / math.sqrt(fan_in), size=shape)
            return Tensor(data.astype(dtype), requires_grad=True, name=name)

        def z(shape, name):
            return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)

        self.params = {
            "bil.w": w((h, h), h, "bil.w"),
            "fc1.w": w((3 * h, hidden), 3 * h, "fc1.w"),
            "fc1.b": z((hidden,), "fc1.b"),
            "fc2.w": w((hidden, hidden), hidden, "fc2.w"),
            "fc2.b": z((hidden,), "fc2.b"),
            "cls.w": w((hidden, n_answers), hidden, "cls.w"),
            "cls.b": z((n_answers,), "cls.b"),
        }

    def named_parameters(self):
        return list(self.params.items())

    def parameters(self):
        return list(self.params.values())

    def fuse(self, v: Tensor, t: Tensor) -> Tensor:
        p = self.params
        u = ops.mul(ops.matmul(v, p["bil.w"]), t)
        x = ops.concat([v, t, u], axis=-1)
        x = ops.linear(x, p["fc1.w"], p["fc1.b"], relu=True)
        return ops.linear(x, p["fc2.w"], p["fc2.b"], relu=True)

    def logits(self, v: Tensor, t: Tensor) -> Tensor:
        return ops.linear(self.fuse(v, t), self.params["cls.w"], self.params["cls.b"])


@dataclass(frozen=True)
class VqaItem:
    image: np.ndarray
    question_ids: tuple[int, ...]
    answer: int
    is_open: bool


def vqa_items(samples: list[SceneSample]) -> list[VqaItem]:
    return [VqaItem(s.image, qa.question_ids, qa.answer, qa.is_open) for s in samples for qa in s.qa_pairs]


def _features(ev: EncoderStack, et: EncoderStack, items) -> tuple[Tensor, Tensor]:
    images = np.stack([np.asarray(i.image) for i in items]).astype(ev.dtype)
    ids, key_mask = pad_ids([i.question_ids for i in items])
    v = ev.features(ev.embed_image(images))
    t = et.features(et.embed_text(ids), key_mask)
    return v, t


def answer_logits(ev: EncoderStack, et: EncoderStack, head: VqaHead, items) -> Tensor:
    v, t = _features(ev, et, items)
    try:
        return head.logits(v, t)
    except NonFiniteError as e:
        raise NonFiniteError(f"predict_answer: {e}") from e


def predict_answer(ev: EncoderStack, et: EncoderStack, head: VqaHead, item) -> np.ndarray:
    """Answer distribution for one item (or a list of items: one row each)."""
    single = isinstance(item, VqaItem)
    items = [item] if single else list(item)
    with no_grad():
        probs = ops.softmax(answer_logits(ev, et, head, items), axis=-1).data
    return probs[0] if single else probs


def nll_loss(logits: Tensor, answers: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the given answer ids."""
    answers = np.asarray(answers, dtype=np.int64)
    if answers.size and (answers.min() < 0 or answers.max() >= logits.shape[-1]):
        raise ValueError(f"answer id out of range [0, {logits.shape[-1]})")
    return ops.scale(ops.mean(ops.gather(ops.log_softmax(logits, axis=-1), answers)), -1.0)


@dataclass
class FinetuneState:
    ev: EncoderStack
    et: EncoderStack
    head: VqaHead
    opt: OptimizerState
    freeze_encoders: bool = False
    step: int = 0

    @property
    def trainable(self) -> list[Tensor]:
        params = self.head.parameters()
        if not self.freeze_encoders:
            seen = {id(p) for p in params}
            for p in self.ev.parameters() + self.et.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    params.append(p)
        return params


def make_finetune_state(ev: EncoderStack, et: EncoderStack, head: VqaHead, lr: float, weight_decay: float = 0.0,
                        freeze_encoders: bool = False, beta1=0.9, beta2=0.999, eps=1e-8) -> FinetuneState:
    st = FinetuneState(ev, et, head, OptimizerState(lr), freeze_encoders)
    st.opt = OptimizerState.for_params(st.trainable, lr, weight_decay, beta1, beta2, eps)
    return st


def finetune_step(state: FinetuneState, batch) -> float:
    """One Adam update on the batch NLL; returns the loss before the update."""
    if not batch:
        raise ValueError("finetune_step: empty batch")
    answers = np.array([it.answer for it in batch])
    if answers.min() < 0 or answers.max() >= state.head.n_answers:
        raise ValueError(f"answer id out of range [0, {state.head.n_answers})")
    params = state.trainable
    frozen = [] if not state.freeze_encoders else state.ev.parameters() + state.et.parameters()
    for p in frozen:
        p.requires_grad = False
    try:
        with Tape() as tape:
            loss = nll_loss(answer_logits(state.ev, state.et, state.head, batch), answers)
        grads = backward(tape, loss, params)
        adam_step(params, [grads[id(p)] for p in params], state.opt)
    finally:
        for p in frozen:
            p.requires_grad = True
    state.step += 1
    return loss.item()


@dataclass
class EvalReport:
    """Accuracies by question type.

    ``confusion`` maps "labels" to the answer names and "open"/"closed" to
    count matrices indexed [true answer][predicted answer], so the split sizes
    are recoverable from the report alone.
    """

    accuracy_open: float | None
    accuracy_closed: float | None
    accuracy_overall: float
    confusion: dict
    n_eval: int

    @property
    def n_open(self) -> int:
        return int(np.sum(self.confusion["open"]))

    @property
    def n_closed(self) -> int:
        return int(np.sum(self.confusion["closed"]))

    def to_dict(self) -> dict:
        return {
            "accuracy_open": self.accuracy_open,
            "accuracy_closed": self.accuracy_closed,
            "accuracy_overall": self.accuracy_overall,
            "confusion": self.confusion,
            "n_eval": self.n_eval,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        fields = {"accuracy_open", "accuracy_closed", "accuracy_overall", "confusion", "n_eval"}
        if set(d) != fields:
            raise ValueError(f"report fields {sorted(d)} != {sorted(fields)}")
        return cls(d["accuracy_open"], d["accuracy_closed"], d["accuracy_overall"], d["confusion"], d["n_eval"])

    def weighted_overall(self) -> float:
        parts = (self.accuracy_open or 0.0) * self.n_open + (self.accuracy_closed or 0.0) * self.n_closed
        return parts / (self.n_open + self.n_closed)

    def check(self, tol: float = 1e-12) -> None:
        """Raise unless overall is the count-weighted mean of the two splits."""
        if self.n_eval != self.n_open + self.n_closed:
            raise ValueError("n_eval != number of open plus closed questions")
        if abs(self.accuracy_overall - self.weighted_overall()) > tol:
            raise ValueError("overall accuracy is not the weighted mean of open and closed")


def report_from_predictions(pred: np.ndarray, items, n_answers: int = N_ANSWERS) -> EvalReport:
    truth = np.array([it.answer for it in items])
    pred = np.asarray(pred)
    is_open = np.array([it.is_open for it in items], dtype=bool)
    correct = pred == truth
    n_open, n_closed = int(is_open.sum()), int((~is_open).sum())
    acc_open = float(correct[is_open].sum()) / n_open if n_open else None
    acc_closed = float(correct[~is_open].sum()) / n_closed if n_closed else None
    overall = float(correct.sum()) / len(items)
    conf = {}
    for key, sel in (("open", is_open), ("closed", ~is_open)):
        m = np.zeros((n_answers, n_answers), dtype=np.int64)
        np.add.at(m, (truth[sel], pred[sel]), 1)
        conf[key] = m.tolist()
    conf["labels"] = list(ANSWERS[:n_answers]) if n_answers <= len(ANSWERS) else list(range(n_answers))
    return EvalReport(acc_open, acc_closed, overall, conf, len(items))


def evaluate(ev: EncoderStack, et: EncoderStack, head: VqaHead, items, batch_size: int = 64) -> EvalReport:
    """Argmax accuracy split by open/closed questions."""
    items = list(items)
    if not items:
        raise ValueError("evaluate: empty dataset")
    preds = []
    with no_grad():
        for i in range(0, len(items), batch_size):
            preds.append(np.argmax(answer_logits(ev, et, head, items[i : i + batch_size]).data, axis=-1))
    return report_from_predictions(np.concatenate(preds), items, head.n_answers)
