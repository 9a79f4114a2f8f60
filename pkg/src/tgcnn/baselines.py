"""Comparison models: logistic regressions on bag-of-codes features, and
plain RNN / LSTM sequence classifiers without elapsed-time input.

The sequence baselines consume events as an embedded code sequence in visit
order (multi-code visits expanded in lexicographic code order, most recent 100
events kept) and reuse the differentiation engine for training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import OptimizerState, Tensor, adam_step
from .cohort import PatientHistory
from .errors import ConfigError, TrainingError
from .graph_builder import CodeVocabulary
from .logistic import LogisticFit, fit_logistic, predict_logistic
from .metrics import Prediction
from .model import _sigmoid_np, encode_demographics

logit_fit = fit_logistic
logit_predict = predict_logistic

DEMO_FEATURE_NAMES = ("age_at_prediction", "sex_male", "imd_scaled")


@dataclass(frozen=True)
class FeatureLayout:
    """What the columns of a feature vector mean."""

    n_codes: int
    include_codes: bool = True
    include_demographics: bool = False

    @property
    def width(self) -> int:
        return (self.n_codes if self.include_codes else 0) + \
            (3 if self.include_demographics else 0)


@dataclass
class FeatureVector:
    values: np.ndarray
    layout: FeatureLayout


def bag_of_codes(history: PatientHistory, vocab: CodeVocabulary,
                 include_codes: bool = True, include_demographics: bool = False,
                 horizon_months: int = 12) -> FeatureVector:
    """Counts of each vocabulary code over all retained visits, optionally with
    the demographic triple appended."""
    layout = FeatureLayout(n_codes=vocab.size, include_codes=include_codes,
                           include_demographics=include_demographics)
    parts = []
    if include_codes:
        counts = np.zeros(vocab.size)
        for _, codes in history.visits:
            for code in codes:
                idx = vocab.code_to_index.get(code)
                if idx is not None:
                    counts[idx] += 1
        parts.append(counts)
    if include_demographics:
        parts.append(encode_demographics(history, horizon_months))
    return FeatureVector(values=np.concatenate(parts) if parts else np.zeros(0),
                         layout=layout)


def feature_matrix(histories: list[PatientHistory], vocab: CodeVocabulary,
                   include_codes: bool = True, include_demographics: bool = False,
                   horizon_months: int = 12) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([bag_of_codes(h, vocab, include_codes, include_demographics,
                               horizon_months).values for h in histories])
    y = np.array([h.label for h in histories], dtype=np.float64)
    return X, y


@dataclass
class LogisticBaseline:
    """A fitted bag-of-codes / demographics regression emitting Prediction records."""

    fit: LogisticFit
    layout: FeatureLayout
    horizon_months: int = 12

    def predict(self, histories: list[PatientHistory],
                vocab: CodeVocabulary) -> list[Prediction]:
        ordered = sorted(histories, key=lambda h: h.patient_id)
        X = np.stack([bag_of_codes(h, vocab, self.layout.include_codes,
                                   self.layout.include_demographics,
                                   self.horizon_months).values for h in ordered])
        probs, etas = predict_logistic(self.fit, X)
        return [Prediction(patient_id=h.patient_id, probability=float(p),
                           linear_predictor=float(e), label=h.label)
                for h, p, e in zip(ordered, probs, etas)]


def train_logistic_baseline(histories: list[PatientHistory], vocab: CodeVocabulary,
                            mode: str = "both", horizon_months: int = 12,
                            ridge: float = 1e-6) -> LogisticBaseline:
    """mode selects the feature set: 'demo', 'codes', or 'both'."""
    if mode not in ("demo", "codes", "both"):
        raise ConfigError(f"unknown logistic baseline mode {mode!r}")
    include_codes = mode in ("codes", "both")
    include_demo = mode in ("demo", "both")
    X, y = feature_matrix(histories, vocab, include_codes, include_demo,
                          horizon_months)
    fit = fit_logistic(X, y, ridge=ridge)
    return LogisticBaseline(fit=fit,
                            layout=FeatureLayout(vocab.size, include_codes,
                                                 include_demo),
                            horizon_months=horizon_months)


def coefficients_csv(baseline: LogisticBaseline, vocab: CodeVocabulary) -> str:
    """Coefficients and odds ratios: feature,beta,odds_ratio."""
    names = ["intercept"]
    if baseline.layout.include_codes:
        names.extend(vocab.index_to_code)
    if baseline.layout.include_demographics:
        names.extend(DEMO_FEATURE_NAMES)
    lines = ["feature,beta,odds_ratio"]
    for name, beta in zip(names, baseline.fit.coefficients):
        lines.append(f"{name},{beta!r},{np.exp(beta)!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Sequence baselines (plain RNN / LSTM over code sequences, no elapsed time)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BaselineConfig:
    embed_dim: int = 16
    hidden: int = 32
    lr: float = 5e-3
    batch_size: int = 16
    max_epochs: int = 30
    patience: int = 6
    seed: int = 0
    max_events: int = 100
    val_fraction: float = 0.2


def code_sequence(history: PatientHistory, vocab: CodeVocabulary,
                  max_events: int = 100) -> list[int]:
    """Vocabulary indices in visit order; codes within a visit sorted
    lexicographically; front-truncated to the most recent events."""
    seq = []
    for _, codes in history.visits:
        for code in sorted(codes):
            idx = vocab.code_to_index.get(code)
            if idx is not None:
                seq.append(idx)
    return seq[-max_events:]


@dataclass
class SequenceBaseline:
    kind: str
    params: dict[str, Tensor]
    config: BaselineConfig
    vocab_size: int
    history: list[dict]

    def predict(self, histories: list[PatientHistory],
                vocab: CodeVocabulary) -> list[Prediction]:
        ordered = sorted(histories, key=lambda h: h.patient_id)
        out = []
        for h in ordered:
            seq = code_sequence(h, vocab, self.config.max_events)
            eta = float(_sequence_eta(self.params, seq, self.kind,
                                      self.vocab_size).data[0, 0])
            out.append(Prediction(patient_id=h.patient_id,
                                  probability=float(_sigmoid_np(np.array([eta]))[0]),
                                  linear_predictor=eta, label=h.label))
        return out


def _init_sequence_params(kind: str, vocab_size: int, config: BaselineConfig,
                          rng: np.random.Generator) -> dict[str, Tensor]:
    E, H = config.embed_dim, config.hidden

    def uniform(shape, fan_in):
        lim = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-lim, lim, size=shape), requires_grad=True)

    params = {"embed": uniform((vocab_size, E), vocab_size)}
    if kind == "rnn":
        params["Wx"] = uniform((E, H), E)
        params["Wh"] = uniform((H, H), H)
        params["b"] = Tensor(np.zeros(H), requires_grad=True)
    else:
        for gate in ("i", "f", "o", "g"):
            params[f"Wx_{gate}"] = uniform((E, H), E)
            params[f"Wh_{gate}"] = uniform((H, H), H)
            params[f"b_{gate}"] = Tensor(np.ones(H) if gate == "f" else np.zeros(H),
                                         requires_grad=True)
    params["out.W"] = uniform((H, 1), H)
    params["out.b"] = Tensor(np.zeros(1), requires_grad=True)
    return params


def _sequence_eta(params: dict[str, Tensor], seq: list[int], kind: str,
                  vocab_size: int) -> Tensor:
    """Logit (1, 1) for one code sequence; empty sequences reduce to the bias."""
    hidden = params["out.W"].shape[0]
    h = Tensor(np.zeros((1, hidden)))
    if seq:
        onehot = np.zeros((len(seq), vocab_size))
        onehot[np.arange(len(seq)), seq] = 1.0
        embedded = ad.matmul(Tensor(onehot), params["embed"])   # (T, E)
        c = Tensor(np.zeros((1, hidden)))
        for t in range(len(seq)):
            xt = ad.reshape(ad.take_index(embedded, t, axis=0), (1, -1))
            if kind == "rnn":
                h = ad.tanh(ad.add(ad.add(ad.matmul(xt, params["Wx"]),
                                          ad.matmul(h, params["Wh"])), params["b"]))
            else:
                gates = {}
                for gate in ("i", "f", "o", "g"):
                    z = ad.add(ad.add(ad.matmul(xt, params[f"Wx_{gate}"]),
                                      ad.matmul(h, params[f"Wh_{gate}"])),
                               params[f"b_{gate}"])
                    gates[gate] = ad.tanh(z) if gate == "g" else ad.sigmoid(z)
                c = ad.add(ad.multiply(gates["f"], c),
                           ad.multiply(gates["i"], gates["g"]))
                h = ad.multiply(gates["o"], ad.tanh(c))
    return ad.add(ad.matmul(h, params["out.W"]), params["out.b"])


def sequence_baseline_train(histories: list[PatientHistory], vocab: CodeVocabulary,
                            kind: str, config: BaselineConfig) -> SequenceBaseline:
    """Train a plain RNN or LSTM on code sequences (no elapsed-time input).

    A seeded stratified ``val_fraction`` split drives early stopping on
    validation accuracy, mirroring the main model's schedule.
    """
    if kind not in ("rnn", "lstm"):
        raise ConfigError(f"sequence baseline kind must be 'rnn' or 'lstm', got {kind!r}")
    rng = np.random.default_rng(config.seed)
    params = _init_sequence_params(kind, vocab.size, config, rng)

    items = [(h.patient_id, code_sequence(h, vocab, config.max_events), h.label)
             for h in sorted(histories, key=lambda h: h.patient_id)]
    if not items:
        raise TrainingError("no training patients")
    positives = [i for i, it in enumerate(items) if it[2]]
    negatives = [i for i, it in enumerate(items) if not it[2]]
    val_idx = set()
    for group in (positives, negatives):
        perm = rng.permutation(len(group))
        n_val = int(round(config.val_fraction * len(group)))
        val_idx.update(group[i] for i in perm[:n_val])
    train_items = [it for i, it in enumerate(items) if i not in val_idx]
    val_items = [it for i, it in enumerate(items) if i in val_idx]
    if not train_items:
        train_items, val_items = items, []

    opt = OptimizerState()
    best_acc = -np.inf
    best_arrays = {k: t.data.copy() for k, t in params.items()}
    wait = 0
    track = []

    def evaluate(subset):
        probs, labels = [], []
        for _, seq, label in subset:
            eta = _sequence_eta(params, seq, kind, vocab.size).data[0, 0]
            probs.append(float(_sigmoid_np(np.array([eta]))[0]))
            labels.append(label)
        probs = np.array(probs)
        labels = np.array(labels, dtype=bool)
        loss = float(np.mean(-(labels * np.log(np.clip(probs, 1e-12, None)) +
                               ~labels * np.log(np.clip(1 - probs, 1e-12, None)))))
        return loss, float(np.mean((probs > 0.5) == labels))

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_items))
        for start in range(0, len(order), config.batch_size):
            chunk = [train_items[i] for i in order[start:start + config.batch_size]]
            for t in params.values():
                t.zero_grad()
            etas = [_sequence_eta(params, seq, kind, vocab.size)
                    for _, seq, _ in chunk]
            p = ad.sigmoid(ad.reshape(ad.concat(etas, axis=0), (len(chunk),)))
            loss = ad.bce_mean(p, np.array([lbl for _, _, lbl in chunk],
                                           dtype=np.float64))
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            ad.backward(loss)
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                     for k, t in params.items()}
            adam_step({k: t.data for k, t in params.items()}, grads, opt,
                      lr=config.lr)
        train_loss, train_acc = evaluate(train_items)
        val_loss, val_acc = evaluate(val_items) if val_items else (train_loss, train_acc)
        track.append({"epoch": epoch, "train_loss": train_loss,
                      "train_acc": train_acc, "val_loss": val_loss,
                      "val_acc": val_acc})
        if val_acc > best_acc:
            best_acc = val_acc
            best_arrays = {k: t.data.copy() for k, t in params.items()}
            wait = 0
        else:
            wait += 1
            if wait > config.patience:
                break

    best = {k: Tensor(v, requires_grad=True, name=k) for k, v in best_arrays.items()}
    return SequenceBaseline(kind=kind, params=best, config=config,
                            vocab_size=vocab.size, history=track)
