"""The level-1 meta-model: token ids -> log-probabilities over hypothesis slots.

Layer chain (defaults in brackets)::

    embedding [V x 512]
      -> transpose to [512 x H*T]
      -> conv(K=3, pad 1) [1024] -> ReLU -> max-pool 2
      -> conv(K=3, pad 1) [64]   -> ReLU -> global max-pool
      -> FC [64] -> ReLU -> dropout
      -> FC [H]  -> log-softmax

Training minimizes the batch-summed KL divergence between the softmax of the
slot F1 scores and the predicted distribution, with Adam and a learning rate
that drops when dev F1 stops improving. The parameters of the epoch with the
best dev F1 are kept.
"""

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from stackqa import autograd as ag
from stackqa.autograd import Tensor
from stackqa.metrics import evaluate
from stackqa.optim import Adam, ReduceOnPlateau
from stackqa.stacking import Tokenizer

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "stackqa-ckpt-v1"


@dataclass
class MetaModelConfig:
    num_hypotheses: int = 16
    tokens_per_hypothesis: int = 16
    embed_dim: int = 512
    conv_channels: list = field(default_factory=lambda: [1024, 64])
    fc_sizes: list = field(default_factory=lambda: [64, 16])
    kernel_size: int = 3
    conv_padding: int = 1
    pool_window: int = 2
    dropout_p: float = 0.2
    embed_dropout_p: float = 0.0
    noise_sigma: float = 0.0
    lr: float = 0.001
    patience: int = 3
    lr_factor: float = 0.1
    min_lr: float = 0.0
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    biased_targets: bool = False
    kl_direction: str = ag.CONVENTIONAL

    def __post_init__(self):
        self.conv_channels = list(self.conv_channels)
        self.fc_sizes = list(self.fc_sizes)
        sizes = [self.num_hypotheses, self.tokens_per_hypothesis, self.embed_dim,
                 self.kernel_size, self.pool_window, self.batch_size]
        sizes += self.conv_channels + self.fc_sizes
        if not self.conv_channels or not self.fc_sizes or min(sizes) < 1:
            raise ValueError("all layer sizes must be >= 1 and both layer lists non-empty")
        if self.fc_sizes[-1] != self.num_hypotheses:
            raise ValueError(
                f"last FC size {self.fc_sizes[-1]} must equal the number of hypotheses "
                f"{self.num_hypotheses}"
            )
        for name in ("dropout_p", "embed_dropout_p"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ValueError(f"{name}={p} outside [0, 1)")
        if self.noise_sigma < 0 or self.lr <= 0 or not 0 < self.lr_factor < 1:
            raise ValueError("noise_sigma >= 0, lr > 0 and 0 < lr_factor < 1 required")
        if self.kl_direction not in (ag.CONVENTIONAL, ag.LITERAL):
            raise ValueError(f"unknown kl_direction {self.kl_direction!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    @property
    def input_length(self):
        return self.num_hypotheses * self.tokens_per_hypothesis

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return cls(**d)


def _param_shapes(config, vocab_size):
    shapes = {"embedding": (vocab_size, config.embed_dim)}
    c_in = config.embed_dim
    for i, c_out in enumerate(config.conv_channels, start=1):
        shapes[f"conv{i}.weight"] = (c_out, c_in, config.kernel_size)
        shapes[f"conv{i}.bias"] = (c_out,)
        c_in = c_out
    for i, n_out in enumerate(config.fc_sizes, start=1):
        shapes[f"fc{i}.weight"] = (n_out, c_in)
        shapes[f"fc{i}.bias"] = (n_out,)
        c_in = n_out
    return shapes


def _fan_in(name, shape):
    return shape[1] * shape[2] if name.startswith("conv") else shape[1]


class MetaModel:
    def __init__(self, config, tokenizer, params):
        self.config = config
        self.tokenizer = tokenizer
        self.params = params  # name -> Tensor, in layer order

    def parameters(self):
        return list(self.params.values())

    def state(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state):
        for name, arr in state.items():
            self.params[name].data[...] = arr

    def clone(self):
        params = {n: Tensor(p.data.copy(), requires_grad=True) for n, p in self.params.items()}
        return MetaModel(copy.deepcopy(self.config), self.tokenizer, params)

    def save(self, path):
        obj = {
            "format": CHECKPOINT_FORMAT,
            "config": asdict(self.config),
            "tokenizer": self.tokenizer.to_json(),
            "params": {name: p.data.reshape(-1).tolist() for name, p in self.params.items()},
        }
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(obj, f, ensure_ascii=False)
            f.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            obj = json.load(f)
        if obj.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
        config = MetaModelConfig.from_dict(obj["config"])
        tok = Tokenizer.from_json(obj["tokenizer"])
        shapes = _param_shapes(config, len(tok))
        if set(shapes) != set(obj["params"]):
            raise ValueError(f"{path}: parameter names do not match the config")
        params = {}
        for name, shape in shapes.items():
            flat = np.asarray(obj["params"][name], dtype=np.float64)
            if flat.size != math.prod(shape):
                raise ValueError(f"{path}: {name} has {flat.size} values, expected shape {shape}")
            params[name] = Tensor(flat.reshape(shape), requires_grad=True)
        return cls(config, tok, params)


def init_model(config, tokenizer, seed=None):
    """Uniform(+-1/sqrt(fan_in)) for conv/FC weights and biases, N(0, 1/E) embeddings."""
    if tokenizer.num_hypotheses != config.num_hypotheses:
        raise ValueError(
            f"tokenizer has {tokenizer.num_hypotheses} slots, config expects {config.num_hypotheses}"
        )
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[0])
    params = {}
    weight_shapes = {}
    for name, shape in _param_shapes(config, len(tokenizer)).items():
        if name == "embedding":
            data = rng.normal(0.0, 1.0 / math.sqrt(config.embed_dim), size=shape)
        else:
            layer = name.rsplit(".", 1)[0]
            if name.endswith(".weight"):
                weight_shapes[layer] = shape
            bound = math.sqrt(1.0 / _fan_in(name, weight_shapes[layer]))
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return MetaModel(config, tokenizer, params)


def _as_ids(model, x):
    ids = np.asarray(x, dtype=np.int64)
    if ids.shape[-1] != model.config.input_length:
        raise ValueError(
            f"input has {ids.shape[-1]} token ids, expected H*T = {model.config.input_length}"
        )
    return ids


def forward(model, x, train_mode=False, rng=None):
    """Log-probabilities over slots for ``x`` of shape ``[H*T]`` or ``[B, H*T]``."""
    cfg = model.config
    p = model.params
    ids = _as_ids(model, x)
    if train_mode and rng is None:
        raise ValueError("train_mode needs an rng for dropout/noise")
    stochastic_embed = train_mode and (cfg.embed_dropout_p > 0 or cfg.noise_sigma > 0)
    # activations stay channel-last ([B, L, C]); same math as the channel-first chain
    if stochastic_embed:
        h = ag.embedding(p["embedding"], ids)
        h = ag.dropout(h, cfg.embed_dropout_p, rng, train_mode)
        h = ag.gaussian_noise(h, cfg.noise_sigma, rng, train_mode)
        h = ag.conv1d(h, p["conv1.weight"], p["conv1.bias"], cfg.conv_padding, channels_last=True)
    else:
        h = ag.embed_conv1d(p["embedding"], ids, p["conv1.weight"], p["conv1.bias"],
                            cfg.conv_padding, channels_last=True)
    n_conv = len(cfg.conv_channels)
    length_axis = h.data.ndim - 2
    for i in range(1, n_conv + 1):
        if i > 1:
            h = ag.conv1d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], cfg.conv_padding,
                          channels_last=True)
        # max-pool commutes with ReLU; pooling first halves the elementwise work
        h = ag.maxpool1d(h, ag.GLOBAL if i == n_conv else cfg.pool_window, axis=length_axis)
        h = ag.relu(h)
    h = ag.reshape(h, h.shape[:length_axis] + h.shape[length_axis + 1:])
    n_fc = len(cfg.fc_sizes)
    for i in range(1, n_fc + 1):
        h = ag.linear(h, p[f"fc{i}.weight"], p[f"fc{i}.bias"])
        if i < n_fc:
            h = ag.relu(h)
            h = ag.dropout(h, cfg.dropout_p, rng, train_mode)
    return ag.log_softmax(h)


def _batches(n, size):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def predict_log_probs(model, examples, batch_size=None):
    batch_size = batch_size or model.config.batch_size
    if not examples:
        return np.zeros((0, model.config.num_hypotheses))
    x = np.array([ex.x for ex in examples], dtype=np.int64)
    return np.concatenate([forward(model, x[s]).data for s in _batches(len(x), batch_size)])


def select_slot(log_probs, pad_flags):
    """Argmax over non-padding slots."""
    pad = np.asarray(pad_flags, dtype=bool)
    if pad.all():
        raise ValueError("every slot is padding")
    masked = np.where(pad, -np.inf, log_probs)
    return int(np.argmax(masked))


def predict(model, examples, batch_size=None):
    """``{qid: answer}`` picking the most probable non-padding slot per example."""
    lp = predict_log_probs(model, examples, batch_size)
    answers = {}
    for ex, row in zip(examples, lp):
        i = select_slot(row, ex.pad_flags)
        answers[ex.qid] = "" if ex.na_flags[i] else ex.surfaces[i]
    return answers


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_em: float
    dev_f1: float
    lr: float


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = None

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "dev_em", "dev_f1", "lr"])
            for r in self.epochs:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.dev_em), repr(r.dev_f1), repr(r.lr)])


def batch_loss(model, x, y, rng, train_mode=True):
    lp = forward(model, x, train_mode=train_mode, rng=rng)
    return ag.kl_div_loss(lp, y, model.config.kl_direction)


def train(model, train_examples, dev_examples, dev_dataset, config=None, on_epoch=None):
    """Train in place and return ``(best_model, history)``.

    Each epoch shuffles with a seeded permutation, takes one Adam step per
    minibatch on the batch-summed KL loss, scores the dev set with EM/F1, and
    steps the plateau scheduler on dev F1.
    """
    cfg = config or model.config
    if any(ex.y is None for ex in train_examples):
        raise ValueError("every training example needs a target distribution y")
    history = TrainHistory()
    if cfg.epochs == 0:
        return model.clone(), history
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[1])
    x = np.array([ex.x for ex in train_examples], dtype=np.int64)
    y = np.array([ex.y for ex in train_examples], dtype=np.float64)
    dev_truth = dev_dataset.subset([ex.qid for ex in dev_examples])
    opt = Adam(model.parameters(), lr=cfg.lr)
    sched = ReduceOnPlateau(opt, patience=cfg.patience, factor=cfg.lr_factor, min_lr=cfg.min_lr)
    best_state, best_f1 = None, -math.inf
    for epoch in range(1, cfg.epochs + 1):
        lr_used = opt.lr
        order = rng.permutation(len(x))
        total = 0.0
        for s in _batches(len(order), cfg.batch_size):
            idx = order[s]
            opt.zero_grad()
            loss = batch_loss(model, x[idx], y[idx], rng)
            loss.backward()
            opt.step()
            total += float(loss.data)
        report = evaluate(predict(model, dev_examples), dev_truth)
        rec = EpochRecord(epoch, total / len(x), report.em, report.f1, lr_used)
        history.epochs.append(rec)
        if report.f1 > best_f1:
            best_f1, best_state, history.best_epoch = report.f1, model.state(), epoch
        sched.step(report.f1)
        logger.info("epoch %d loss %.5f dev EM %.3f F1 %.3f lr %g",
                    epoch, rec.train_loss, rec.dev_em, rec.dev_f1, lr_used)
        if on_epoch is not None:
            on_epoch(rec)
    best = model.clone()
    best.load_state(best_state)
    return best, history
