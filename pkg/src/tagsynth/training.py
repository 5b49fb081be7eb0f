"""Staged optimization of the generative model.

Three stages run in order: the classifier is fitted on the labeled tags plus
the target-prior calibration term, the encoder/decoder pair is fitted with the
classifier frozen, and finally every parameter trains jointly on the full
objective with validation-based early stopping.
"""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Parameter, Tape
from .classifier import loss_supervised
from .generative import (
    EmpiricalLabelModel,
    GenConfig,
    ModelParams,
    classifier_prior_kl,
    draw_loss_noise,
    total_loss,
)
from .labelgraph import LabelGraph
from .rng import substream

OPTIMIZERS = ("sgd", "adam")

CHECKPOINT_FORMAT = "tagsynth-checkpoint-1"

HISTORY_COLUMNS = ("epoch", "recon", "kl_z", "kl_y", "l_cons", "l_c_s",
                   "total", "val_total")


class ConfigError(ValueError):
    """A configuration conflict the caller has to resolve."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "adam"
    pretrain_classifier_epochs: int = 20
    pretrain_autoencoder_epochs: int = 20
    joint_epochs: int = 60
    seed: int = 0
    early_stop_patience: int = 10
    val_fraction: float = 0.1
    allow_skip_pretrain: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.lr <= 0.0:
            raise ConfigError("lr must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, "
                              f"got {self.optimizer!r}")
        for name in ("pretrain_classifier_epochs", "pretrain_autoencoder_epochs",
                     "joint_epochs", "early_stop_patience"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")


@dataclass
class TrainData:
    """Arrays the optimizer consumes: labeled inputs with tags, unlabeled inputs."""

    x_labeled: np.ndarray
    y_s_labeled: np.ndarray
    x_unlabeled: np.ndarray

    def __post_init__(self):
        self.x_labeled = np.asarray(self.x_labeled, dtype=np.float64)
        self.y_s_labeled = np.asarray(self.y_s_labeled, dtype=np.float64)
        self.x_unlabeled = np.asarray(self.x_unlabeled, dtype=np.float64)
        if self.x_labeled.ndim != 2 or self.y_s_labeled.ndim != 2:
            raise ValueError("labeled arrays must be 2-D")
        if self.x_labeled.shape[0] != self.y_s_labeled.shape[0]:
            raise ValueError("labeled inputs and tags disagree on row count")
        if self.x_unlabeled.ndim != 2:
            raise ValueError("unlabeled inputs must be 2-D")
        if (self.x_unlabeled.shape[0] > 0
                and self.x_unlabeled.shape[1] != self.x_labeled.shape[1]):
            raise ValueError("labeled and unlabeled inputs disagree on width")

    @property
    def n_labeled(self) -> int:
        return self.x_labeled.shape[0]

    @property
    def n_unlabeled(self) -> int:
        return self.x_unlabeled.shape[0]


@dataclass
class EpochStats:
    epoch: int
    recon: float
    kl_z: float
    kl_y: float
    l_cons: float
    l_c_s: float
    total: float
    val_total: float

    def as_row(self) -> list:
        return [getattr(self, c) for c in HISTORY_COLUMNS]


class Sgd:
    kind = "sgd"

    def __init__(self, lr: float):
        self.lr = float(lr)

    def step(self, params: list[Parameter]) -> None:
        for p in params:
            if p.tensor.grad is not None:
                p.tensor.values -= self.lr * p.tensor.grad

    def state_dict(self) -> dict:
        return {"kind": self.kind, "lr": self.lr}

    def load_state_dict(self, state: dict) -> None:
        if state.get("kind") != self.kind:
            raise ConfigError(f"checkpoint optimizer is {state.get('kind')!r}, "
                              f"expected {self.kind!r}")
        self.lr = float(state["lr"])


class Adam:
    """Adaptive moment estimation with per-parameter step counts."""

    kind = "adam"

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.moments: dict[str, dict] = {}

    def step(self, params: list[Parameter]) -> None:
        for p in params:
            g = p.tensor.grad
            if g is None:
                continue
            slot = self.moments.get(p.name)
            if slot is None:
                slot = {"step": 0,
                        "m": np.zeros_like(p.tensor.values),
                        "v": np.zeros_like(p.tensor.values)}
                self.moments[p.name] = slot
            slot["step"] += 1
            t = slot["step"]
            slot["m"] = self.beta1 * slot["m"] + (1.0 - self.beta1) * g
            slot["v"] = self.beta2 * slot["v"] + (1.0 - self.beta2) * g * g
            m_hat = slot["m"] / (1.0 - self.beta1 ** t)
            v_hat = slot["v"] / (1.0 - self.beta2 ** t)
            p.tensor.values -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {
            "kind": self.kind,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "moments": {
                name: {"step": slot["step"],
                       "m": slot["m"].ravel(order="C").tolist(),
                       "v": slot["v"].ravel(order="C").tolist(),
                       "shape": list(slot["m"].shape)}
                for name, slot in self.moments.items()
            },
        }

    def load_state_dict(self, state: dict) -> None:
        if state.get("kind") != self.kind:
            raise ConfigError(f"checkpoint optimizer is {state.get('kind')!r}, "
                              f"expected {self.kind!r}")
        self.lr = float(state["lr"])
        self.beta1 = float(state["beta1"])
        self.beta2 = float(state["beta2"])
        self.eps = float(state["eps"])
        self.moments = {}
        for name, slot in state["moments"].items():
            shape = tuple(slot["shape"])
            self.moments[name] = {
                "step": int(slot["step"]),
                "m": np.array(slot["m"], dtype=np.float64).reshape(shape),
                "v": np.array(slot["v"], dtype=np.float64).reshape(shape),
            }


def make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return Sgd(config.lr)
    return Adam(config.lr)


@dataclass
class TrainState:
    params: ModelParams
    graph: LabelGraph
    gen_config: GenConfig
    train_config: TrainConfig
    label_model: EmpiricalLabelModel
    optimizer: object
    rng: np.random.Generator
    prior_graph: LabelGraph | None = None
    epoch: int = 0
    classifier_pretrained: bool = False
    autoencoder_pretrained: bool = False
    best_val: float | None = None
    epochs_since_best: int = 0
    best_params: dict | None = None
    history: list = field(default_factory=list)
    train_indices: np.ndarray | None = None
    val_indices: np.ndarray | None = None
    val_u_indices: np.ndarray | None = None
    val_seed: int = 0


def init_train_state(params: ModelParams, graph: LabelGraph, data: TrainData,
                     gen_config: GenConfig, train_config: TrainConfig,
                     prior_graph: LabelGraph | None = None) -> TrainState:
    """Wire up optimizer, RNG, label model, and the validation split."""
    if data.n_labeled == 0:
        raise ValueError("training needs a non-empty labeled set")
    rng = substream(train_config.seed, "training")
    label_model = EmpiricalLabelModel.from_labeled(
        data.y_s_labeled, prior_graph or graph,
        clamp_eps=gen_config.prior_clamp_eps)

    n_l = data.n_labeled
    n_val = int(round(train_config.val_fraction * n_l))
    n_val = min(n_val, n_l - 1)
    perm = rng.permutation(n_l)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])

    n_u = data.n_unlabeled
    n_val_u = min(n_u, max(n_val, 1)) if n_u > 0 else 0
    val_u_idx = np.sort(rng.permutation(n_u)[:n_val_u]) if n_val_u else np.array([], dtype=int)
    val_seed = int(rng.integers(0, 2 ** 63 - 1))

    return TrainState(
        params=params, graph=graph, gen_config=gen_config,
        train_config=train_config, label_model=label_model,
        optimizer=make_optimizer(train_config), rng=rng,
        prior_graph=prior_graph,
        train_indices=train_idx, val_indices=val_idx,
        val_u_indices=val_u_idx, val_seed=val_seed,
    )


def _draw_batch(rng: np.random.Generator, pool: np.ndarray, size: int) -> np.ndarray:
    """Sample ``size`` positions out of ``pool``, with replacement only when short."""
    return rng.choice(pool, size=size, replace=pool.shape[0] < size)


def _zero_grads(params: list[Parameter]) -> None:
    for p in params:
        p.tensor.zero_grad()


def _steps_per_epoch(pool_size: int, batch_size: int) -> int:
    return max(1, math.ceil(pool_size / batch_size))


def pretrain_classifier(state: TrainState, data: TrainData) -> list[float]:
    """Stage one: fit the classifier; encoder and decoder stay untouched."""
    if data.n_labeled == 0:
        raise ValueError("classifier pretraining needs labeled data")
    cfg = state.train_config
    clf_params = state.params.classifier_parameters()
    losses = []
    pool = state.train_indices
    for _ in range(cfg.pretrain_classifier_epochs):
        epoch_loss = 0.0
        steps = _steps_per_epoch(pool.shape[0], cfg.batch_size)
        for _ in range(steps):
            idx = _draw_batch(state.rng, pool, cfg.batch_size)
            xb = data.x_labeled[idx]
            yb = data.y_s_labeled[idx]
            _zero_grads(clf_params)
            with Tape() as tape:
                loss = (state.gen_config.beta
                        * loss_supervised(xb, yb, state.graph, state.params.classifier)
                        + classifier_prior_kl(xb, yb, state.graph,
                                              state.params.classifier,
                                              state.gen_config,
                                              prior_graph=state.prior_graph))
                tape.backward(loss)
            state.optimizer.step(clf_params)
            epoch_loss += loss.item()
        losses.append(epoch_loss / steps)
    state.classifier_pretrained = True
    return losses


def pretrain_autoencoder(state: TrainState, data: TrainData) -> list[float]:
    """Stage two: fit encoder and decoder; classifier gradients are discarded."""
    cfg = state.train_config
    if not state.classifier_pretrained and not cfg.allow_skip_pretrain:
        raise ConfigError("classifier pretraining has not run; set "
                          "allow_skip_pretrain to proceed anyway")
    if data.n_unlabeled == 0:
        raise ValueError("the objective needs unlabeled data")
    ae_params = state.params.encoder_parameters() + state.params.decoder_parameters()
    losses = []
    pool_l = state.train_indices
    n_u = data.n_unlabeled
    for _ in range(cfg.pretrain_autoencoder_epochs):
        epoch_loss = 0.0
        steps = _steps_per_epoch(max(pool_l.shape[0], n_u), cfg.batch_size)
        for _ in range(steps):
            idx_l = _draw_batch(state.rng, pool_l, cfg.batch_size)
            idx_u = _draw_batch(state.rng, np.arange(n_u), cfg.batch_size)
            _zero_grads(ae_params)
            with Tape() as tape:
                loss, _ = total_loss(data.x_labeled[idx_l], data.y_s_labeled[idx_l],
                                     data.x_unlabeled[idx_u], state.graph,
                                     state.params, state.gen_config,
                                     state.label_model, rng=state.rng,
                                     prior_graph=state.prior_graph)
                tape.backward(loss)
            state.optimizer.step(ae_params)
            epoch_loss += loss.item()
        losses.append(epoch_loss / steps)
    state.autoencoder_pretrained = True
    return losses


def _validation_loss(state: TrainState, data: TrainData) -> float:
    if state.val_indices is None or state.val_indices.shape[0] == 0:
        return float("nan")
    x_val = data.x_labeled[state.val_indices]
    y_val = data.y_s_labeled[state.val_indices]
    x_val_u = data.x_unlabeled[state.val_u_indices]
    # the same seed every epoch keeps validation noise identical, so the
    # series is comparable across epochs
    val_rng = np.random.default_rng(state.val_seed)
    noise = draw_loss_noise(val_rng, x_val.shape[0], x_val_u.shape[0],
                            state.gen_config, state.label_model)
    loss, _ = total_loss(x_val, y_val, x_val_u, state.graph, state.params,
                         state.gen_config, state.label_model, noise=noise,
                         prior_graph=state.prior_graph)
    return loss.item()


def _snapshot_params(params: ModelParams) -> dict:
    return {p.name: p.tensor.values.copy() for p in params.parameters()}


def _restore_params(params: ModelParams, snapshot: dict) -> None:
    for p in params.parameters():
        p.tensor.values[:] = snapshot[p.name]


def joint_epoch(state: TrainState, data: TrainData) -> EpochStats:
    """One pass of paired-batch steps over every parameter, then validation."""
    cfg = state.train_config
    if data.n_unlabeled == 0:
        raise ValueError("the objective needs unlabeled data")
    all_params = state.params.parameters()
    pool_l = state.train_indices
    n_u = data.n_unlabeled
    steps = _steps_per_epoch(max(pool_l.shape[0], n_u), cfg.batch_size)
    sums = np.zeros(6)
    for _ in range(steps):
        idx_l = _draw_batch(state.rng, pool_l, cfg.batch_size)
        idx_u = _draw_batch(state.rng, np.arange(n_u), cfg.batch_size)
        _zero_grads(all_params)
        with Tape() as tape:
            loss, breakdown = total_loss(
                data.x_labeled[idx_l], data.y_s_labeled[idx_l],
                data.x_unlabeled[idx_u], state.graph, state.params,
                state.gen_config, state.label_model, rng=state.rng,
                prior_graph=state.prior_graph)
            tape.backward(loss)
        state.optimizer.step(all_params)
        sums += (breakdown.recon, breakdown.kl_z, breakdown.kl_y,
                 breakdown.l_cons, breakdown.l_c_s, breakdown.total)
    means = [float(v) for v in sums / steps]
    val_total = _validation_loss(state, data)
    state.epoch += 1
    stats = EpochStats(state.epoch, *means, val_total)
    state.history.append(stats)
    if not math.isnan(val_total):
        if state.best_val is None or val_total < state.best_val:
            state.best_val = val_total
            state.epochs_since_best = 0
            state.best_params = _snapshot_params(state.params)
        else:
            state.epochs_since_best += 1
    return stats


def train_joint(state: TrainState, data: TrainData) -> TrainState:
    """Stage three: run joint epochs until the budget or early stopping.

    With early stopping active (patience > 0) the best-validation parameters
    end up live in ``state.params``; with patience 0 the budget runs in full
    and the last epoch stands, so long fixed-budget runs keep their progress
    even when the validation bound is noisy.
    """
    cfg = state.train_config
    if not (state.classifier_pretrained and state.autoencoder_pretrained):
        if not cfg.allow_skip_pretrain:
            raise ConfigError("pretraining stages have not run; set "
                              "allow_skip_pretrain to proceed anyway")
    if data.n_unlabeled == 0:
        raise ValueError("the objective needs unlabeled data")
    for _ in range(cfg.joint_epochs):
        joint_epoch(state, data)
        if (cfg.early_stop_patience > 0
                and state.epochs_since_best >= cfg.early_stop_patience):
            break
    if cfg.early_stop_patience > 0 and state.best_params is not None:
        _restore_params(state.params, state.best_params)
    return state


def run_training(state: TrainState, data: TrainData) -> TrainState:
    """All three stages in order on one state."""
    pretrain_classifier(state, data)
    pretrain_autoencoder(state, data)
    return train_joint(state, data)


def _params_payload(params: ModelParams) -> dict:
    return {
        p.name: {"shape": list(p.tensor.values.shape),
                 "values": p.tensor.values.ravel(order="C").tolist()}
        for p in params.parameters()
    }


def save_checkpoint(path, state: TrainState) -> None:
    """Write every mutable piece of the run to one JSON file."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "epoch": state.epoch,
        "classifier_pretrained": state.classifier_pretrained,
        "autoencoder_pretrained": state.autoencoder_pretrained,
        "params": _params_payload(state.params),
        "best_params": (
            None if state.best_params is None else
            {name: {"shape": list(arr.shape),
                    "values": arr.ravel(order="C").tolist()}
             for name, arr in state.best_params.items()}),
        "best_val": state.best_val,
        "epochs_since_best": state.epochs_since_best,
        "optimizer": state.optimizer.state_dict(),
        "rng_state": state.rng.bit_generator.state,
        "val_seed": state.val_seed,
        "train_indices": state.train_indices.tolist(),
        "val_indices": state.val_indices.tolist(),
        "val_u_indices": state.val_u_indices.tolist(),
        "history": [s.as_row() for s in state.history],
        "label_model": {
            "pool": state.label_model.pool.tolist(),
            "tag_marginals": state.label_model.tag_marginals.tolist(),
            "target_marginals": state.label_model.target_marginals.tolist(),
            "clamp_eps": state.label_model.clamp_eps,
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def _apply_param_payload(params: ModelParams, payload: dict) -> None:
    names = {p.name for p in params.parameters()}
    if names != set(payload):
        missing = sorted(names - set(payload))
        extra = sorted(set(payload) - names)
        raise ConfigError(f"checkpoint parameters do not match the model "
                          f"(missing {missing}, unexpected {extra})")
    for p in params.parameters():
        entry = payload[p.name]
        shape = tuple(entry["shape"])
        if shape != p.tensor.values.shape:
            raise ConfigError(f"checkpoint shape {shape} for {p.name!r} does "
                              f"not match model shape {p.tensor.values.shape}")
        p.tensor.values[:] = np.array(entry["values"],
                                      dtype=np.float64).reshape(shape)


def load_checkpoint(path, state: TrainState) -> TrainState:
    """Restore a saved run into a freshly initialized state, in place."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"unrecognized checkpoint format "
                          f"{payload.get('format')!r}")
    _apply_param_payload(state.params, payload["params"])
    if payload["best_params"] is None:
        state.best_params = None
    else:
        state.best_params = {
            name: np.array(entry["values"],
                           dtype=np.float64).reshape(tuple(entry["shape"]))
            for name, entry in payload["best_params"].items()
        }
    state.epoch = int(payload["epoch"])
    state.classifier_pretrained = bool(payload["classifier_pretrained"])
    state.autoencoder_pretrained = bool(payload["autoencoder_pretrained"])
    state.best_val = payload["best_val"]
    state.epochs_since_best = int(payload["epochs_since_best"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.rng.bit_generator.state = payload["rng_state"]
    state.val_seed = int(payload["val_seed"])
    state.train_indices = np.array(payload["train_indices"], dtype=int)
    state.val_indices = np.array(payload["val_indices"], dtype=int)
    state.val_u_indices = np.array(payload["val_u_indices"], dtype=int)
    state.history = [EpochStats(*row) for row in payload["history"]]
    state.label_model = _label_model_from_payload(payload["label_model"])
    return state


def _label_model_from_payload(entry: dict) -> EmpiricalLabelModel:
    return EmpiricalLabelModel(
        pool=np.array(entry["pool"], dtype=np.float64),
        tag_marginals=np.array(entry["tag_marginals"], dtype=np.float64),
        target_marginals=np.array(entry["target_marginals"], dtype=np.float64),
        clamp_eps=float(entry["clamp_eps"]))


def load_generator(path, params: ModelParams) -> EmpiricalLabelModel:
    """Load only what sampling needs from a checkpoint.

    Parameter values are written into ``params`` in place; the label model
    saved with the run is returned. Raises ConfigError when the checkpoint
    does not fit the given model.
    """
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"unrecognized checkpoint format "
                          f"{payload.get('format')!r}")
    _apply_param_payload(params, payload["params"])
    return _label_model_from_payload(payload["label_model"])


def write_history_csv(path, history: list[EpochStats]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for stats in history:
            writer.writerow(stats.as_row())
