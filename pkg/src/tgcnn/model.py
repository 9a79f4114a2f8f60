"""Two-stream temporal-graph CNN classifier.

Per stream: trainable exponential time decay on the sparse tensor values,
sparse 3-D convolution (stride 1 coarse / stride 2 fine), per-channel batch
normalisation over batch and positions, leaky ReLU, an LSTM over the position
sequence (or mean pooling when ablated). Stream hidden states are
concatenated, pass through dropout and a dense stack, are joined with encoded
demographics, and map to a single logit. The loss is mean binary cross-entropy
plus L1 on the filter banks, L2 on the weights, and the walk-continuity graph
penalty. Training, cross-validation, random hyperparameter search, and the
ablation matrix live here too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import OptimizerState, Tensor, adam_step, conv_output_length, conv_pairs
from .cohort import CohortSplit, PatientHistory, age_at, prediction_date
from .errors import ConfigError, GraphBuildError, TrainingError
from .graph_builder import CodeVocabulary, TemporalGraphTensor, build_tensor, empty_tensor
from .metrics import MetricsError, Prediction, auroc, calibration_slope_intercept

LEAKY_SLOPE = 0.01
_LSTM_GATES = ("i", "f", "o", "g")

ABLATION_NAMES = ("full", "wo_gamma", "wo_exp", "wo_time", "wo_demo",
                  "wo_two_streams", "wo_graph_reg", "wo_l2", "wo_l1", "wo_lstm",
                  "with_prescriptions")


@dataclass(frozen=True)
class ModelConfig:
    """Ablation flags plus every size, strength, and schedule the model needs."""

    use_gamma: bool = True
    use_exp: bool = True
    use_demographics: bool = True
    use_two_streams: bool = True
    use_graph_reg: bool = True
    use_l2: bool = True
    use_l1: bool = True
    use_lstm: bool = True
    use_elapsed_time: bool = True
    use_prescriptions: bool = False
    n_filters: int = 8
    filter_depth: int = 3
    coarse_stride: int = 1
    fine_stride: int = 2
    lstm_hidden: int = 16
    dense_sizes: tuple[int, ...] = (16,)
    dropout_rate: float = 0.2
    lambda1: float = 1e-4
    lambda2: float = 1e-4
    lambda_g: float = 1e-3
    lr: float = 5e-3
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 6
    seed: int = 0
    n_time_slots: int = 16
    slot_limit: str = "transitions"
    intra_visit_edges: bool = False
    horizon_months: int = 12
    share_gamma: bool = False
    validation_fold: int = 0

    @property
    def n_streams(self) -> int:
        return 2 if self.use_two_streams else 1

    def stride_for(self, stream: int) -> int:
        return self.coarse_stride if stream == 0 else self.fine_stride

    def validate(self) -> None:
        if self.filter_depth < 1 or self.filter_depth > self.n_time_slots:
            raise ConfigError(f"filter depth {self.filter_depth} must lie in "
                              f"[1, {self.n_time_slots}] (the tensor depth)")
        if self.coarse_stride not in (1, 2) or self.fine_stride not in (1, 2):
            raise ConfigError("strides must be 1 or 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        for name in ("lambda1", "lambda2", "lambda_g"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if min(self.n_filters, self.lstm_hidden, self.batch_size,
               self.max_epochs) < 1:
            raise ConfigError("sizes and schedule values must be >= 1")


def ablation_config(name: str, base: ModelConfig | None = None) -> ModelConfig:
    """The full configuration with exactly the named component disabled.

    ``wo_gamma`` freezes the decay rate at 1 but keeps the exponential;
    ``wo_exp`` drops both; ``with_prescriptions`` switches to the extended
    vocabulary instead of disabling anything.
    """
    base = base if base is not None else ModelConfig()
    base = replace(base, use_prescriptions=False)
    overrides = {
        "full": {},
        "wo_gamma": {"use_gamma": False},
        "wo_exp": {"use_exp": False, "use_gamma": False},
        "wo_time": {"use_elapsed_time": False},
        "wo_demo": {"use_demographics": False},
        "wo_two_streams": {"use_two_streams": False},
        "wo_graph_reg": {"use_graph_reg": False},
        "wo_l2": {"use_l2": False},
        "wo_l1": {"use_l1": False},
        "wo_lstm": {"use_lstm": False},
        "with_prescriptions": {"use_prescriptions": True},
    }
    if name not in overrides:
        raise ConfigError(f"unknown ablation {name!r}; valid names: "
                          f"{', '.join(ABLATION_NAMES)}")
    return replace(base, **overrides[name])


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def _is_trainable(name: str) -> bool:
    return not (name.endswith(".running_mean") or name.endswith(".running_var")
                or name.startswith("demo."))


class TGCNNParameters:
    """All named parameter arrays, wrapped as graph leaves.

    Running batch-norm moments and the demographic age statistics are
    non-trainable state; everything else receives gradients.
    """

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.tensors.items() if t.requires_grad}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            if t.requires_grad:
                t.zero_grad()

    def copy(self) -> "TGCNNParameters":
        out = {}
        for k, t in self.tensors.items():
            out[k] = Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k)
        return TGCNNParameters(out)


def init_parameters(config: ModelConfig, n_nodes: int,
                    rng: np.random.Generator) -> TGCNNParameters:
    """Zero-mean uniform init scaled by fan-in; decay rate starts at 1,
    LSTM forget-gate bias at 1."""
    config.validate()
    V, F, d, H = n_nodes, config.n_filters, config.filter_depth, config.lstm_hidden

    def uniform(shape, fan_in):
        lim = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-lim, lim, size=shape)

    t: dict[str, Tensor] = {}

    def param(name, value, trainable=True):
        t[name] = Tensor(np.asarray(value, dtype=np.float64),
                         requires_grad=trainable, name=name)

    gamma_raw_one = math.log(math.e - 1.0)   # softplus(x) = 1
    for s in range(config.n_streams):
        p = f"stream{s}."
        param(p + "filters", uniform((F, V, V, d), V * d))
        param(p + "gamma_raw", gamma_raw_one)
        param(p + "bn.scale", np.ones(F))
        param(p + "bn.shift", np.zeros(F))
        param(p + "bn.running_mean", np.zeros(F), trainable=False)
        param(p + "bn.running_var", np.ones(F), trainable=False)
        if config.use_lstm:
            for gate in _LSTM_GATES:
                param(p + f"lstm.Wx_{gate}", uniform((F, H), F))
                param(p + f"lstm.Wh_{gate}", uniform((H, H), H))
                param(p + f"lstm.b_{gate}",
                      np.ones(H) if gate == "f" else np.zeros(H))

    width = config.n_streams * (H if config.use_lstm else F)
    for i, size in enumerate(config.dense_sizes):
        param(f"dense{i}.W", uniform((width, size), width))
        param(f"dense{i}.b", np.zeros(size))
        width = size
    out_in = width + (3 if config.use_demographics else 0)
    param("out.W", uniform((out_in, 1), out_in))
    param("out.b", np.zeros(1))
    param("demo.age_mean", 0.0, trainable=False)
    param("demo.age_sd", 1.0, trainable=False)
    return TGCNNParameters(t)


# ---------------------------------------------------------------------------
# Tensor preparation
# ---------------------------------------------------------------------------

@dataclass
class PreparedPatient:
    """A patient's tensor coordinates plus precomputed convolution index maps."""

    patient_id: str
    label: bool
    rows: np.ndarray
    cols: np.ndarray
    times: np.ndarray
    pairs: dict[int, tuple]          # stride -> (entry, position, offset) arrays
    positions: dict[int, int]        # stride -> output length L
    demo: np.ndarray                 # raw [age_years, sex01, imd01]


def encode_demographics(history: PatientHistory, horizon_months: int) -> np.ndarray:
    """Raw demographic triple: age at prediction date, sex as 0/1, IMD scaled to [0,1]."""
    d = history.demographics
    age = age_at(d, prediction_date(history, horizon_months))
    return np.array([age, 0.0 if d.sex == "F" else 1.0,
                     (d.imd_quintile - 1) / 4.0])


def prepare_patient(history: PatientHistory, vocab: CodeVocabulary,
                    config: ModelConfig) -> PreparedPatient:
    try:
        tensor = build_tensor(history, vocab, n_slots=config.n_time_slots,
                              limit=config.slot_limit,
                              intra_visit_edges=config.intra_visit_edges)
    except GraphBuildError:
        # a patient whose visits all fall outside the vocabulary still gets a
        # (contentless) prediction from biases and demographics
        tensor = empty_tensor(vocab, config.n_time_slots)
    return prepare_tensor(tensor, config, patient_id=history.patient_id,
                          label=history.label,
                          demo=encode_demographics(history, config.horizon_months))


def prepare_tensor(tensor: TemporalGraphTensor, config: ModelConfig,
                   patient_id: str = "", label: bool = False,
                   demo: np.ndarray | None = None) -> PreparedPatient:
    strides = sorted({config.stride_for(s) for s in range(config.n_streams)})
    pairs, positions = {}, {}
    for stride in strides:
        L = conv_output_length(tensor.n_slots, config.filter_depth, stride)
        pairs[stride] = conv_pairs(tensor.slots, config.filter_depth, stride, L)
        positions[stride] = L
    return PreparedPatient(patient_id=patient_id, label=label,
                           rows=tensor.rows, cols=tensor.cols, times=tensor.times,
                           pairs=pairs, positions=positions,
                           demo=demo if demo is not None else np.zeros(3))


def prepare_patients(histories: list[PatientHistory], vocab: CodeVocabulary,
                     config: ModelConfig) -> list[PreparedPatient]:
    return [prepare_patient(h, vocab, config) for h in histories]


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def time_transform(times, gamma: float, config: ModelConfig) -> np.ndarray:
    """Entry values after the elapsed-time transform.

    exp(-gamma * t) when both the exponential and the trainable rate are
    enabled; exp(-t) when the rate is frozen; raw t without the exponential;
    all ones when elapsed time is ablated. Absent entries stay 0 implicitly.
    """
    t = np.asarray(times, dtype=np.float64)
    if not config.use_elapsed_time:
        return np.ones_like(t)
    if not config.use_exp:
        return t.copy()
    rate = gamma if config.use_gamma else 1.0
    return np.exp(-rate * t)


def _entry_values(pt: PreparedPatient, params: TGCNNParameters, stream: int,
                  config: ModelConfig) -> Tensor:
    if not config.use_elapsed_time:
        return Tensor(np.ones_like(pt.times))
    if not config.use_exp:
        return Tensor(pt.times.copy())
    if config.use_gamma:
        source = 0 if config.share_gamma else stream
        gamma = ad.softplus(params[f"stream{source}.gamma_raw"])
        return ad.exp(ad.negate(ad.multiply(gamma, Tensor(pt.times))))
    return Tensor(np.exp(-pt.times))


def _check_finite(t: Tensor, layer: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise TrainingError(f"non-finite activation in layer {layer!r}")
    return t


def _lstm(x: Tensor, params: TGCNNParameters, prefix: str, length: int) -> Tensor:
    batch = x.shape[0]
    hidden = params[prefix + "b_i"].shape[0]
    h = Tensor(np.zeros((batch, hidden)))
    c = Tensor(np.zeros((batch, hidden)))
    for pos in range(length):
        xt = ad.take_index(x, pos, axis=2)
        gates = {}
        for gate in _LSTM_GATES:
            z = ad.add(ad.add(ad.matmul(xt, params[prefix + f"Wx_{gate}"]),
                              ad.matmul(h, params[prefix + f"Wh_{gate}"])),
                       params[prefix + f"b_{gate}"])
            gates[gate] = ad.tanh(z) if gate == "g" else ad.sigmoid(z)
        c = ad.add(ad.multiply(gates["f"], c), ad.multiply(gates["i"], gates["g"]))
        h = ad.multiply(gates["o"], ad.tanh(c))
    return h


def forward_batch(params: TGCNNParameters, batch: list[PreparedPatient],
                  config: ModelConfig, mode: str = "infer",
                  rng: np.random.Generator | None = None) -> Tensor:
    """Linear predictors (B,) for a batch of prepared patients.

    Train mode uses batch statistics for normalisation (updating the running
    moments) and applies dropout; inference mode is deterministic.
    """
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    training = mode == "train"
    if training and config.dropout_rate > 0 and rng is None:
        raise ConfigError("training with dropout requires an rng")

    streams = []
    for s in range(config.n_streams):
        stride = config.stride_for(s)
        name = f"stream{s}"
        feats = [ad.sparse_conv3d(_entry_values(pt, params, s, config),
                                  params[f"{name}.filters"], pt.rows, pt.cols,
                                  pt.pairs[stride], pt.positions[stride])
                 for pt in batch]
        x = _check_finite(ad.stack(feats, axis=0), f"{name}.conv")
        x = ad.batch_norm(x, params[f"{name}.bn.scale"], params[f"{name}.bn.shift"],
                          params[f"{name}.bn.running_mean"].data,
                          params[f"{name}.bn.running_var"].data, training=training)
        x = ad.leaky_relu(_check_finite(x, f"{name}.bn"), LEAKY_SLOPE)
        if config.use_lstm:
            h = _lstm(x, params, f"{name}.lstm.", batch[0].positions[stride])
        else:
            h = ad.reduce_mean(x, axis=2)
        streams.append(_check_finite(h, f"{name}.hidden"))

    x = streams[0] if len(streams) == 1 else ad.concat(streams, axis=1)
    if training and config.dropout_rate > 0:
        x = ad.dropout(x, config.dropout_rate, rng)
    for i in range(len(config.dense_sizes)):
        x = ad.leaky_relu(ad.add(ad.matmul(x, params[f"dense{i}.W"]),
                                 params[f"dense{i}.b"]), LEAKY_SLOPE)
        x = _check_finite(x, f"dense{i}")
    if config.use_demographics:
        age_mean = params["demo.age_mean"].data
        age_sd = params["demo.age_sd"].data
        demo = np.stack([pt.demo for pt in batch])
        demo = demo.copy()
        demo[:, 0] = (demo[:, 0] - age_mean) / age_sd
        x = ad.concat([x, Tensor(demo)], axis=1)
    eta = ad.add(ad.matmul(x, params["out.W"]), params["out.b"])
    return _check_finite(ad.reshape(eta, (len(batch),)), "out")


@dataclass(frozen=True)
class ForwardResult:
    linear_predictor: float
    probability: float


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-ax)),
                    np.exp(-ax) / (1.0 + np.exp(-ax)))


def forward(params: TGCNNParameters, tensor: TemporalGraphTensor,
            demographics: np.ndarray, config: ModelConfig,
            mode: str = "infer", rng: np.random.Generator | None = None) -> ForwardResult:
    """Single-patient forward pass. ``demographics`` is the raw triple from
    :func:`encode_demographics` (age standardisation happens inside)."""
    pt = prepare_tensor(tensor, config, demo=np.asarray(demographics, dtype=np.float64))
    eta = forward_batch(params, [pt], config, mode=mode, rng=rng)
    value = float(eta.data[0])
    return ForwardResult(linear_predictor=value,
                         probability=float(_sigmoid_np(np.array([value]))[0]))


def sparse_conv3d(tensor: TemporalGraphTensor, filter_bank: np.ndarray,
                  stride: int) -> np.ndarray:
    """Convolve a temporal-graph tensor (raw entry values) with a filter bank.

    Returns the (F, L) feature sequence with L = floor((K - d)/stride) + 1.
    """
    filter_bank = np.asarray(filter_bank, dtype=np.float64)
    if filter_bank.ndim != 4:
        raise ConfigError("filter bank must have shape (F, V, V, d)")
    depth = filter_bank.shape[3]
    if stride not in (1, 2):
        raise ConfigError(f"stride must be 1 or 2, got {stride}")
    if depth > tensor.n_slots:
        raise ConfigError(f"filter depth {depth} exceeds tensor depth {tensor.n_slots}")
    length = conv_output_length(tensor.n_slots, depth, stride)
    pairs = conv_pairs(tensor.slots, depth, stride, length)
    out = ad.sparse_conv3d(Tensor(tensor.times), Tensor(filter_bank),
                           tensor.rows, tensor.cols, pairs, length)
    return out.data


def graph_regulariser(filter_bank: np.ndarray) -> float:
    """Walk-continuity penalty of a (F, V, V, d) filter bank (see autodiff)."""
    return ad.graph_regularizer(Tensor(np.asarray(filter_bank, dtype=np.float64))).item()


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def _loss_graph(probabilities: Tensor, labels: np.ndarray,
                params: TGCNNParameters, config: ModelConfig) -> Tensor:
    loss = ad.bce_mean(probabilities, labels)
    if config.use_l1 and config.lambda1 > 0:
        for s in range(config.n_streams):
            loss = ad.add(loss, ad.scale(ad.l1_norm(params[f"stream{s}.filters"]),
                                         config.lambda1))
    if config.use_l2 and config.lambda2 > 0:
        # all weights except the decay rate and batch-norm parameters
        for name, t in params.tensors.items():
            if not _is_trainable(name) or "gamma_raw" in name or ".bn." in name:
                continue
            loss = ad.add(loss, ad.scale(ad.l2_norm(t), config.lambda2))
    if config.use_graph_reg and config.lambda_g > 0:
        for s in range(config.n_streams):
            loss = ad.add(loss, ad.scale(
                ad.graph_regularizer(params[f"stream{s}.filters"]), config.lambda_g))
    return loss


def compute_loss(probabilities, labels, params: TGCNNParameters,
                 config: ModelConfig) -> float:
    """Scalar loss for given probabilities: cross-entropy plus active penalties."""
    p = np.asarray(probabilities, dtype=np.float64)
    if p.size == 0:
        raise TrainingError("empty batch")
    y = np.asarray(labels, dtype=np.float64)
    return _loss_graph(Tensor(p), y, params, config).item()


def full_loss_gradient_errors(params: TGCNNParameters,
                              batch: list[PreparedPatient], labels: np.ndarray,
                              config: ModelConfig, eps: float = 1e-4,
                              rng: np.random.Generator | None = None) -> dict[str, float]:
    """Finite-difference verification of the full loss, per parameter group.

    Runs in train mode (batch statistics) with dropout disabled; parameters not
    under test enter the rebuilt graph as constants so the loss value is
    identical between the analytic and numeric evaluations.
    """
    if config.dropout_rate > 0:
        raise ConfigError("gradient check requires dropout_rate = 0")
    checked = {k: t.data.copy() for k, t in params.trainable().items()}

    def loss_fn(tensors: dict[str, Tensor]) -> Tensor:
        full = dict(tensors)
        for k, t in params.tensors.items():
            if k not in full:
                full[k] = Tensor(t.data)
        p = TGCNNParameters(full)
        eta = forward_batch(p, batch, config, mode="train")
        return _loss_graph(ad.sigmoid(eta), labels, p, config)

    return ad.finite_difference_errors(loss_fn, checked, eps=eps, rng=rng)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    train_acc: float
    val_acc: float
    train_auroc: float
    val_auroc: float
    val_cslope: float


HISTORY_HEADER = "epoch,train_loss,val_loss,train_acc,val_acc,train_auroc,val_auroc,val_cslope"


def history_to_csv(history: list[EpochRecord]) -> str:
    lines = [HISTORY_HEADER]
    for r in history:
        lines.append(f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.train_acc!r},"
                     f"{r.val_acc!r},{r.train_auroc!r},{r.val_auroc!r},{r.val_cslope!r}")
    return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    params: TGCNNParameters
    history: list[EpochRecord]
    best_epoch: int


@dataclass
class EvalSummary:
    loss: float
    accuracy: float
    auroc: float
    cslope: float
    predictions: list[Prediction]


def _predict_prepared(params: TGCNNParameters, prepared: list[PreparedPatient],
                      config: ModelConfig) -> list[Prediction]:
    out = []
    for start in range(0, len(prepared), config.batch_size):
        batch = prepared[start:start + config.batch_size]
        eta = forward_batch(params, batch, config, mode="infer").data
        p = _sigmoid_np(eta)
        out.extend(Prediction(patient_id=pt.patient_id, probability=float(pv),
                              linear_predictor=float(ev), label=pt.label)
                   for pt, pv, ev in zip(batch, p, eta))
    return out


def _evaluate(params: TGCNNParameters, prepared: list[PreparedPatient],
              config: ModelConfig) -> EvalSummary:
    preds = _predict_prepared(params, prepared, config)
    probs = np.array([p.probability for p in preds])
    labels = np.array([p.label for p in preds], dtype=np.float64)
    loss = compute_loss(probs, labels, params, config)
    accuracy = float(np.mean((probs > 0.5) == labels.astype(bool)))
    try:
        roc = auroc(preds)
    except MetricsError:
        roc = float("nan")
    try:
        cslope = calibration_slope_intercept(preds)[0]
    except MetricsError:
        cslope = float("nan")
    return EvalSummary(loss=loss, accuracy=accuracy, auroc=roc, cslope=cslope,
                       predictions=preds)


def train_model(train_histories: list[PatientHistory],
                val_histories: list[PatientHistory],
                vocab: CodeVocabulary, config: ModelConfig) -> TrainResult:
    """Minibatch training with early stopping on validation accuracy.

    Fully deterministic per config.seed: one generator drives initialisation,
    epoch shuffles, and dropout masks in a fixed order.
    """
    config.validate()
    if not train_histories:
        raise TrainingError("no training patients")
    rng = np.random.default_rng(config.seed)
    params = init_parameters(config, vocab.size, rng)

    ages = [encode_demographics(h, config.horizon_months)[0] for h in train_histories]
    params["demo.age_mean"].data[...] = np.mean(ages)
    params["demo.age_sd"].data[...] = max(float(np.std(ages)), 1e-8)

    prepared_train = prepare_patients(train_histories, vocab, config)
    prepared_val = prepare_patients(val_histories, vocab, config)

    opt = OptimizerState()
    history: list[EpochRecord] = []
    best_acc = -np.inf
    best_params = params.copy()
    best_epoch = 0
    wait = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(prepared_train))
        for bi, start in enumerate(range(0, len(order), config.batch_size)):
            batch = [prepared_train[i] for i in order[start:start + config.batch_size]]
            labels = np.array([pt.label for pt in batch], dtype=np.float64)
            params.zero_grads()
            eta = forward_batch(params, batch, config, mode="train", rng=rng)
            loss = _loss_graph(ad.sigmoid(eta), labels, params, config)
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            ad.backward(loss)
            trainable = params.trainable()
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                     for k, t in trainable.items()}
            adam_step({k: t.data for k, t in trainable.items()}, grads, opt,
                      lr=config.lr)

        train_eval = _evaluate(params, prepared_train, config)
        val_eval = (_evaluate(params, prepared_val, config) if prepared_val
                    else train_eval)
        history.append(EpochRecord(
            epoch=epoch, train_loss=train_eval.loss, val_loss=val_eval.loss,
            train_acc=train_eval.accuracy, val_acc=val_eval.accuracy,
            train_auroc=train_eval.auroc, val_auroc=val_eval.auroc,
            val_cslope=val_eval.cslope))
        if val_eval.accuracy > best_acc:
            best_acc = val_eval.accuracy
            best_params = params.copy()
            best_epoch = epoch
            wait = 0
        else:
            wait += 1
            if wait > config.patience:
                break
    return TrainResult(params=best_params, history=history, best_epoch=best_epoch)


def train(split: CohortSplit, vocab: CodeVocabulary,
          config: ModelConfig) -> tuple[TGCNNParameters, list[EpochRecord]]:
    """Train on the matched set, holding out one fold (config.validation_fold)."""
    val_fold = config.validation_fold
    train_h = [h for h in split.matched_train
               if split.fold_assignment.get(h.patient_id) != val_fold]
    val_h = [h for h in split.matched_train
             if split.fold_assignment.get(h.patient_id) == val_fold]
    result = train_model(train_h, val_h, vocab, config)
    return result.params, result.history


def predict(params: TGCNNParameters, histories: list[PatientHistory],
            vocab: CodeVocabulary, config: ModelConfig) -> list[Prediction]:
    """Inference-mode predictions, sorted by patient_id."""
    ordered = sorted(histories, key=lambda h: h.patient_id)
    prepared = prepare_patients(ordered, vocab, config)
    return _predict_prepared(params, prepared, config)


# ---------------------------------------------------------------------------
# Cross-validation and hyperparameter search
# ---------------------------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    train_auroc: float
    val_auroc: float
    train_cslope: float
    val_cslope: float
    val_accuracy: float
    best_epoch: int


@dataclass
class CVResult:
    folds: list[FoldResult]

    def aggregate(self) -> dict[str, tuple[float, float]]:
        """Mean and sample SD (ddof=1) per metric across folds."""
        out = {}
        for name in ("train_auroc", "val_auroc", "train_cslope", "val_cslope",
                     "val_accuracy"):
            vals = np.array([getattr(f, name) for f in self.folds])
            sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            out[name] = (float(np.mean(vals)), sd)
        return out


def cross_validate(matched_train: list[PatientHistory], folds: dict[str, int],
                   vocab: CodeVocabulary, config: ModelConfig) -> CVResult:
    """Train one model per fold and evaluate on its held-out fold."""
    n_folds = max(folds.values()) + 1 if folds else 0
    results = []
    for f in range(n_folds):
        train_h = [h for h in matched_train if folds[h.patient_id] != f]
        val_h = [h for h in matched_train if folds[h.patient_id] == f]
        fold_config = replace(config, seed=config.seed + 1000 * (f + 1))
        fit = train_model(train_h, val_h, vocab, fold_config)
        train_eval = _evaluate(fit.params, prepare_patients(train_h, vocab, fold_config),
                               fold_config)
        val_eval = _evaluate(fit.params, prepare_patients(val_h, vocab, fold_config),
                             fold_config)
        results.append(FoldResult(fold=f, train_auroc=train_eval.auroc,
                                  val_auroc=val_eval.auroc,
                                  train_cslope=train_eval.cslope,
                                  val_cslope=val_eval.cslope,
                                  val_accuracy=val_eval.accuracy,
                                  best_epoch=fit.best_epoch))
    return CVResult(folds=results)


@dataclass(frozen=True)
class SearchRanges:
    """Sampling ranges for the random search; rates are log-uniform."""

    lr: tuple[float, float] = (1e-4, 1e-2)
    lambda1: tuple[float, float] = (1e-6, 1e-2)
    lambda2: tuple[float, float] = (1e-6, 1e-2)
    lambda_g: tuple[float, float] = (1e-6, 1e-2)
    n_filters: tuple[int, int] = (4, 64)
    filter_depth: tuple[int, int] = (2, 5)
    lstm_hidden: tuple[int, int] = (16, 128)
    dropout: tuple[float, float] = (0.1, 0.5)


@dataclass
class TrialResult:
    trial: int
    config: ModelConfig
    mean_val_accuracy: float
    mean_val_auroc: float
    cv: CVResult


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def sample_trial_config(base: ModelConfig, ranges: SearchRanges,
                        rng: np.random.Generator, trial_seed: int) -> ModelConfig:
    depth = int(rng.integers(ranges.filter_depth[0], ranges.filter_depth[1] + 1))
    return replace(
        base,
        lr=_log_uniform(rng, *ranges.lr),
        lambda1=_log_uniform(rng, *ranges.lambda1),
        lambda2=_log_uniform(rng, *ranges.lambda2),
        lambda_g=_log_uniform(rng, *ranges.lambda_g),
        n_filters=int(rng.integers(ranges.n_filters[0], ranges.n_filters[1] + 1)),
        filter_depth=min(depth, base.n_time_slots),
        lstm_hidden=int(rng.integers(ranges.lstm_hidden[0], ranges.lstm_hidden[1] + 1)),
        dropout_rate=float(rng.uniform(*ranges.dropout)),
        seed=trial_seed)


def select_best(trials: list[TrialResult]) -> TrialResult:
    """Best by mean validation accuracy; mean validation AUROC breaks ties."""
    return max(trials, key=lambda t: (t.mean_val_accuracy, t.mean_val_auroc,
                                      -t.trial))


def random_search(matched_train: list[PatientHistory], folds: dict[str, int],
                  vocab: CodeVocabulary, base: ModelConfig, n_trials: int = 20,
                  ranges: SearchRanges | None = None,
                  seed: int = 0) -> tuple[ModelConfig, list[TrialResult]]:
    """Sample configurations and pick the best by cross-validated accuracy."""
    ranges = ranges if ranges is not None else SearchRanges()
    rng = np.random.default_rng(seed)
    trials = []
    for trial in range(n_trials):
        config = sample_trial_config(base, ranges, rng, trial_seed=seed + trial)
        cv = cross_validate(matched_train, folds, vocab, config)
        agg = cv.aggregate()
        trials.append(TrialResult(trial=trial, config=config,
                                  mean_val_accuracy=agg["val_accuracy"][0],
                                  mean_val_auroc=agg["val_auroc"][0], cv=cv))
    return select_best(trials).config, trials


# ---------------------------------------------------------------------------
# Checkpoint format: "TGCNN v1" header, named float64 records, config lines
# ---------------------------------------------------------------------------

_CHECKPOINT_MAGIC = b"TGCNN v1\n"


def config_to_lines(config: ModelConfig) -> list[str]:
    lines = []
    for f in fields(config):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, tuple):
            text = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{f.name} = {text}")
    return lines


def config_from_items(items: dict[str, str]) -> ModelConfig:
    kwargs = {}
    known = {f.name: f.type for f in fields(ModelConfig)}
    for key, text in items.items():
        if key not in known:
            raise ConfigError(f"unknown model config key {key!r}")
        kwargs[key] = _coerce(known[key], key, text)
    return ModelConfig(**kwargs)


def _coerce(type_name: str, key: str, text: str):
    text = text.strip()
    if type_name == "bool":
        if text not in ("true", "false"):
            raise ConfigError(f"{key}: expected true/false, got {text!r}")
        return text == "true"
    if type_name == "int":
        return int(text)
    if type_name == "float":
        return float(text)
    if type_name.startswith("tuple"):
        return tuple(int(v) for v in text.split(",") if v != "")
    return text


def save_checkpoint(path, params: TGCNNParameters, config: ModelConfig) -> None:
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        arrays = params.arrays()
        fh.write(f"arrays {len(arrays)}\n".encode())
        for name, arr in arrays.items():
            shape = "".join(f" {n}" for n in arr.shape)
            fh.write(f"{name}{shape}\n".encode())
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        fh.write(b"config\n")
        for line in config_to_lines(config):
            fh.write(f"{line}\n".encode())


def load_checkpoint(path) -> tuple[TGCNNParameters, ModelConfig]:
    blob = open(path, "rb").read()
    if not blob.startswith(_CHECKPOINT_MAGIC):
        raise ConfigError(f"{path}: not a TGCNN v1 checkpoint")
    pos = len(_CHECKPOINT_MAGIC)

    def readline() -> str:
        nonlocal pos
        end = blob.index(b"\n", pos)
        line = blob[pos:end].decode()
        pos = end + 1
        return line

    count_line = readline()
    n_arrays = int(count_line.split()[1])
    tensors: dict[str, Tensor] = {}
    for _ in range(n_arrays):
        tokens = readline().split()
        name = tokens[0]
        shape = tuple(int(v) for v in tokens[1:])
        n_bytes = 8 * int(np.prod(shape)) if shape else 8
        arr = np.frombuffer(blob[pos:pos + n_bytes], dtype="<f8").reshape(shape).copy()
        pos += n_bytes
        tensors[name] = Tensor(arr, requires_grad=_is_trainable(name), name=name)
    if readline() != "config":
        raise ConfigError(f"{path}: missing config section")
    items = {}
    while pos < len(blob):
        line = readline()
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        items[key.strip()] = value.strip()
    return TGCNNParameters(tensors), config_from_items(items)
