"""Reading level-0 n-best files and SQuAD v2.0 ground truth, writing answer maps."""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path


class ValidationError(ValueError):
    """Input parsed fine but violates the expected structure."""


class PredictionFormatError(ValueError):
    """Input is not valid JSON."""

    def __init__(self, path, byte_offset, msg):
        self.path = str(path)
        self.byte_offset = byte_offset
        super().__init__(f"{path}: malformed JSON at byte {byte_offset}: {msg}")


@dataclass(frozen=True)
class Hypothesis:
    text: str
    probability: float
    rank: int

    @property
    def is_no_answer(self):
        return self.text.strip() == ""


@dataclass
class ModelPredictions:
    model_id: str
    per_question: dict  # qid -> list[Hypothesis], rank order

    def __getitem__(self, qid):
        return self.per_question[qid]

    def __contains__(self, qid):
        return qid in self.per_question

    def qids(self):
        return sorted(self.per_question)

    def top1(self):
        return {qid: hyps[0].text for qid, hyps in self.per_question.items()}


@dataclass(frozen=True)
class GroundTruth:
    answers: tuple
    is_impossible: bool

    @property
    def truths(self):
        """Scoring truth set; unanswerable questions score against ``[""]``."""
        return list(self.answers) if self.answers else [""]


@dataclass
class Dataset:
    per_question: dict  # qid -> GroundTruth
    split_name: str = ""
    contexts: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self):
        return len(self.per_question)

    def __getitem__(self, qid):
        return self.per_question[qid]

    def __contains__(self, qid):
        return qid in self.per_question

    def qids(self):
        return sorted(self.per_question)

    def subset(self, qids):
        return Dataset({q: self.per_question[q] for q in qids}, self.split_name)


def _read_json(path):
    raw = Path(path).read_bytes()
    text = raw.decode("utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        offset = len(text[: e.pos].encode("utf-8"))
        raise PredictionFormatError(path, offset, e.msg) from None


def _check_probability(qid, value):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"question {qid!r}: probability must be a number, got {value!r}")
    value = float(value)
    if math.isnan(value) or value < 0.0 or value > 1.0:
        raise ValidationError(f"question {qid!r}: probability {value!r} outside [0, 1]")
    return value


def parse_nbest(obj, model_id="model"):
    if not isinstance(obj, dict):
        raise ValidationError("n-best file must hold a JSON object keyed by question id")
    per_question = {}
    for qid, entries in obj.items():
        if not isinstance(entries, list):
            raise ValidationError(f"question {qid!r}: expected a list of hypotheses")
        if not entries:
            raise ValidationError(f"question {qid!r}: empty n-best list")
        parsed = []
        for entry in entries:
            if not isinstance(entry, dict) or "text" not in entry or "probability" not in entry:
                raise ValidationError(
                    f"question {qid!r}: each hypothesis needs 'text' and 'probability'"
                )
            if not isinstance(entry["text"], str):
                raise ValidationError(f"question {qid!r}: hypothesis text must be a string")
            parsed.append((entry["text"], _check_probability(qid, entry["probability"])))
        # sorted() is stable, so equal probabilities keep file order
        parsed = sorted(parsed, key=lambda tp: -tp[1])
        per_question[qid] = [Hypothesis(t, p, r) for r, (t, p) in enumerate(parsed, start=1)]
    return ModelPredictions(model_id, per_question)


def load_nbest(path, model_id=None):
    """Load ``{qid: [{"text", "probability", ...}, ...]}`` into ranked hypotheses.

    Extra per-hypothesis fields (logits, null odds, offsets) are ignored.
    """
    if model_id is None:
        model_id = Path(path).stem
    return parse_nbest(_read_json(path), model_id)


def nbest_to_json(preds):
    return {
        qid: [{"text": h.text, "probability": h.probability} for h in hyps]
        for qid, hyps in sorted(preds.per_question.items())
    }


def write_nbest(path, preds):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(nbest_to_json(preds), f, ensure_ascii=False)
        f.write("\n")


def parse_ground_truth(obj, split_name=""):
    if not isinstance(obj, dict) or not isinstance(obj.get("data"), list):
        raise ValidationError("ground truth must be SQuAD v2.0 JSON with a 'data' list")
    per_question = {}
    contexts = {}
    for article in obj["data"]:
        for para in article.get("paragraphs", []):
            for qa in para.get("qas", []):
                if "id" not in qa:
                    raise ValidationError(f"qa entry without 'id': {qa.get('question', qa)!r}")
                qid = qa["id"]
                if qid in per_question:
                    raise ValidationError(f"duplicate question id: {qid!r}")
                answers = []
                for ans in qa.get("answers", []):
                    text = ans["text"] if isinstance(ans, dict) else ans
                    if text not in answers:
                        answers.append(text)
                impossible = bool(qa.get("is_impossible", False)) or not answers
                per_question[qid] = GroundTruth(() if impossible else tuple(answers), impossible)
                if "context" in para:
                    contexts[qid] = para["context"]
    return Dataset(per_question, split_name, contexts)


def load_ground_truth(path, split_name=None):
    if split_name is None:
        split_name = Path(path).stem
    return parse_ground_truth(_read_json(path), split_name)


def dataset_to_json(dataset, title="dataset"):
    qas = []
    for qid in dataset.qids():
        gt = dataset[qid]
        qas.append({
            "id": qid,
            "question": "",
            "answers": [{"text": a, "answer_start": -1} for a in gt.answers],
            "is_impossible": gt.is_impossible,
        })
    return {"version": "v2.0", "data": [{"title": title, "paragraphs": [{"context": "", "qas": qas}]}]}


def write_predictions(path, answers):
    """Write ``{qid: answer}`` with sorted keys; no-answer is ``""``."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(answers, sort_keys=True, ensure_ascii=False, separators=(",", ":")))
        f.write("\n")


def load_predictions(path):
    obj = _read_json(path)
    if not isinstance(obj, dict) or not all(isinstance(v, str) for v in obj.values()):
        raise ValidationError(f"{path}: predictions must be a JSON object of qid -> string")
    return obj
