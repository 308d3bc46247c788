"""Level-1 training rows built from level-0 n-best lists.

Each question becomes one ``StackExample``: the top hypotheses of every model,
interleaved by rank (A1, B1, A2, B2, ...), each encoded as a fixed-length block
of token ids that starts with a slot-prefix token, plus a target distribution
over the slots obtained by a softmax of their F1 scores.
"""

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from stackqa.metrics import f1_score, get_tokens

logger = logging.getLogger(__name__)

PAD, UNK, AP, NA = "<pad>", "<unk>", "<ap>", "<na>"
PAD_ID, UNK_ID, AP_ID, NA_ID = 0, 1, 2, 3
FIRST_PREFIX_ID = 4

ANSWER, NO_ANSWER, PADDING = "answer", "no_answer", "padding"


class StackFormatError(ValueError):
    pass


@dataclass
class StackConfig:
    models: list = field(default_factory=lambda: ["model_a", "model_b"])
    n_per_model: int = 8
    tokens_per_hypothesis: int = 16
    max_answer_length: int = 30

    def __post_init__(self):
        if not self.models:
            raise ValueError("at least one model is required")
        if self.n_per_model < 1 or self.tokens_per_hypothesis < 2 or self.max_answer_length < 1:
            raise ValueError(f"invalid stack geometry: {self}")

    @property
    def num_hypotheses(self):
        return len(self.models) * self.n_per_model

    @property
    def input_length(self):
        return self.num_hypotheses * self.tokens_per_hypothesis

    def slot(self, i):
        """(model index, 1-based rank) held by 0-based slot ``i``."""
        m = len(self.models)
        return i % m, i // m + 1


class Tokenizer:
    """Word-level vocabulary with reserved ids.

    ``<pad>``=0, ``<unk>``=1, ``<ap>``=2, ``<na>``=3, ``<h1>``..``<hH>``=4..3+H;
    word ids start at 4+H.
    """

    def __init__(self, num_hypotheses, vocab=None):
        self.num_hypotheses = num_hypotheses
        self.reserved = {PAD: PAD_ID, UNK: UNK_ID, AP: AP_ID, NA: NA_ID}
        for h in range(1, num_hypotheses + 1):
            self.reserved[f"<h{h}>"] = FIRST_PREFIX_ID + h - 1
        self.vocab = dict(vocab or {})

    @property
    def first_word_id(self):
        return FIRST_PREFIX_ID + self.num_hypotheses

    def __len__(self):
        return self.first_word_id + len(self.vocab)

    def __eq__(self, other):
        return (
            isinstance(other, Tokenizer)
            and self.num_hypotheses == other.num_hypotheses
            and self.vocab == other.vocab
        )

    def add(self, word):
        if word not in self.vocab:
            self.vocab[word] = self.first_word_id + len(self.vocab)
        return self.vocab[word]

    def prefix_id(self, h_index):
        if not 1 <= h_index <= self.num_hypotheses:
            raise ValueError(f"hypothesis index {h_index} outside 1..{self.num_hypotheses}")
        return FIRST_PREFIX_ID + h_index - 1

    def word_ids(self, words):
        return [self.vocab.get(w, UNK_ID) for w in words]

    def to_json(self):
        return {"num_hypotheses": self.num_hypotheses, "reserved": self.reserved, "vocab": self.vocab}

    @classmethod
    def from_json(cls, obj):
        tok = cls(obj["num_hypotheses"], obj["vocab"])
        if obj.get("reserved", tok.reserved) != tok.reserved:
            raise StackFormatError("tokenizer reserved ids do not match this layout")
        expected = set(range(tok.first_word_id, len(tok)))
        if set(tok.vocab.values()) != expected:
            raise StackFormatError("tokenizer word ids are not contiguous")
        return tok

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(self.to_json(), f, ensure_ascii=False, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_json(json.load(f))


def answer_words(text, config):
    return get_tokens(text)[: config.max_answer_length]


def build_vocab(texts, config):
    """Assign word ids in first-appearance order over ``texts``."""
    tok = Tokenizer(config.num_hypotheses)
    for text in texts:
        for word in answer_words(text, config):
            tok.add(word)
    return tok


def corpus(preds_list, config, qids=None):
    """Hypothesis texts in sorted-qid, model, rank order (the vocabulary traversal)."""
    if qids is None:
        qids = sorted(set().union(*(p.per_question for p in preds_list)))
    for qid in sorted(qids):
        for preds in preds_list:
            for hyp in preds.per_question.get(qid, [])[: config.n_per_model]:
                yield hyp.text


def encode_hypothesis(tok, h_index, text, kind, config):
    t = config.tokens_per_hypothesis
    ids = [tok.prefix_id(h_index)]
    if kind == NO_ANSWER:
        ids.append(NA_ID)
    elif kind == PADDING:
        ids.append(AP_ID)
    else:
        ids.extend(tok.word_ids(answer_words(text, config)))
    ids = ids[:t]
    return ids + [PAD_ID] * (t - len(ids))


def softmax(scores):
    s = np.asarray(scores, dtype=np.float64)
    e = np.exp(s - s.max())
    return e / e.sum()


def target_distribution(f1s, biased=False, na_flags=None, question_unanswerable=False):
    """Softmax over slot scores; the biased variant scores -1 for wrong answerability."""
    s = np.array(f1s, dtype=np.float64)
    if biased:
        mismatch = np.asarray(na_flags, dtype=bool) != bool(question_unanswerable)
        s[mismatch] = -1.0
    return softmax(s)


def adjusted_scores(f1s, biased, na_flags, question_unanswerable):
    s = list(f1s)
    if biased:
        s = [-1.0 if na != question_unanswerable else v for v, na in zip(s, na_flags)]
    return s


@dataclass
class StackExample:
    qid: str
    x: list
    surfaces: list
    na_flags: list
    pad_flags: list
    y: list = None
    f1s: list = None

    @property
    def num_hypotheses(self):
        return len(self.surfaces)

    def to_json(self):
        d = asdict(self)
        return {k: v for k, v in d.items() if v is not None}


def interleave(lists, config):
    """Rank-major alternation across models; missing entries are None."""
    slots = []
    for i in range(config.num_hypotheses):
        m, rank = config.slot(i)
        hyps = lists[m]
        slots.append(hyps[rank - 1] if rank <= len(hyps) else None)
    return slots


def build_example(qid, lists, truths, tok, config, biased=False):
    """One level-1 row; ``truths`` is a GroundTruth or None for unlabeled splits."""
    if len(lists) != len(config.models):
        raise ValueError(f"{qid}: expected {len(config.models)} n-best lists, got {len(lists)}")
    lists = [hyps[: config.n_per_model] for hyps in lists]
    x, surfaces, na_flags, pad_flags, raw_f1 = [], [], [], [], []
    for i, hyp in enumerate(interleave(lists, config)):
        if hyp is None:
            kind, text = PADDING, ""
        elif hyp.text.strip() == "":
            kind, text = NO_ANSWER, ""
        else:
            kind, text = ANSWER, hyp.text
        x.extend(encode_hypothesis(tok, i + 1, text, kind, config))
        surfaces.append(text)
        na_flags.append(kind == NO_ANSWER)
        pad_flags.append(kind == PADDING)
        if truths is not None:
            raw_f1.append(0.0 if kind == PADDING else f1_score(text, truths.truths))
    if truths is None:
        return StackExample(qid, x, surfaces, na_flags, pad_flags)
    scores = adjusted_scores(raw_f1, biased, na_flags, truths.is_impossible)
    y = softmax(scores).tolist()
    return StackExample(qid, x, surfaces, na_flags, pad_flags, y=y, f1s=scores)


def build_examples(preds_list, dataset, tok, config, biased=False, qids=None):
    """Rows for every qid (sorted); ``dataset=None`` gives unlabeled rows."""
    if qids is None:
        qids = dataset.qids() if dataset is not None else sorted(preds_list[0].per_question)
    out = []
    for qid in qids:
        lists = []
        for preds in preds_list:
            if qid not in preds:
                raise ValueError(f"model {preds.model_id!r} has no predictions for {qid!r}")
            lists.append(preds[qid])
        truths = dataset[qid] if dataset is not None else None
        out.append(build_example(qid, lists, truths, tok, config, biased))
    return out


def padding_stats(examples):
    """Fraction of examples with at least one padded slot."""
    if not examples:
        logger.warning("padding_stats called on an empty example list")
        return 0.0
    return sum(any(ex.pad_flags) for ex in examples) / len(examples)


def write_stack_dataset(path, examples):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for ex in examples:
            f.write(json.dumps(ex.to_json(), ensure_ascii=False))
            f.write("\n")


_REQUIRED = ("qid", "x", "surfaces", "na_flags", "pad_flags")


def _parse_row(obj):
    if not isinstance(obj, dict):
        raise ValueError("row is not a JSON object")
    missing = [k for k in _REQUIRED if k not in obj]
    if missing:
        raise ValueError(f"missing field(s) {', '.join(missing)}")
    extra = set(obj) - set(_REQUIRED) - {"y", "f1s"}
    if extra:
        raise ValueError(f"unexpected field(s) {', '.join(sorted(extra))}")
    h = len(obj["surfaces"])
    if h == 0 or len(obj["x"]) % h:
        raise ValueError(f"x length {len(obj['x'])} is not a multiple of {h} slots")
    for key in ("na_flags", "pad_flags", "y", "f1s"):
        if obj.get(key) is not None and len(obj[key]) != h:
            raise ValueError(f"{key} has {len(obj[key])} entries, expected {h}")
    if not all(isinstance(i, int) and not isinstance(i, bool) and i >= 0 for i in obj["x"]):
        raise ValueError("x must hold non-negative integer token ids")
    return StackExample(
        qid=obj["qid"],
        x=obj["x"],
        surfaces=obj["surfaces"],
        na_flags=obj["na_flags"],
        pad_flags=obj["pad_flags"],
        y=obj.get("y"),
        f1s=obj.get("f1s"),
    )


def read_stack_dataset(path):
    examples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                examples.append(_parse_row(json.loads(line)))
            except (ValueError, TypeError) as e:
                raise StackFormatError(f"{path}: line {lineno}: {e}") from None
    return examples
