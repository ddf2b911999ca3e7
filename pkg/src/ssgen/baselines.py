"""Comparison methods: ERM, the amortized-classifier ablations, and Tent-style adaptation."""

from __future__ import annotations

import dataclasses
import enum
import logging
from dataclasses import dataclass

import numpy as np

from ssgen import numcore as nc
from ssgen.datasets import DomainDataset, MultiDomainCorpus
from ssgen.errors import ConfigError, ContractError, DataError, NumericFailure
from ssgen.evalharness.streams import STREAM_MODES, StreamSpec, build_streams
from ssgen.model import IMAGE_PIXELS, Linear, check_dims, load_checkpoint, save_checkpoint
from ssgen.numcore import Tensor
from ssgen.trainer import TrainConfig, TrainResult, train

log = logging.getLogger(__name__)


class BaselineKind(str, enum.Enum):
    ERM = "erm"
    INVARIANT_AMORTIZED = "invariant"
    NO_HIERARCHY = "no_hierarchy"
    NO_PRIOR_SUPERVISION = "no_prior_supervision"
    NON_META = "non_meta"
    TENT_ADAPT = "tent"


# the single objective switch each amortized ablation turns off
ABLATION_FLAGS = {
    BaselineKind.INVARIANT_AMORTIZED: {"sample_conditioning": False},
    BaselineKind.NO_HIERARCHY: {"hierarchical": False},
    BaselineKind.NO_PRIOR_SUPERVISION: {"prior_supervision": False},
    BaselineKind.NON_META: {"meta_learning": False},
}


def ablation_config(kind: BaselineKind | str, base: TrainConfig) -> TrainConfig:
    kind = BaselineKind(kind)
    if kind not in ABLATION_FLAGS:
        raise ConfigError(f"{kind.value} is not an amortized-classifier ablation")
    return base.replace(**ABLATION_FLAGS[kind])


def train_invariant(corpus: MultiDomainCorpus, config: TrainConfig) -> TrainResult:
    return train(corpus, ablation_config(BaselineKind.INVARIANT_AMORTIZED, config))


def train_non_meta(corpus: MultiDomainCorpus, config: TrainConfig) -> TrainResult:
    return train(corpus, ablation_config(BaselineKind.NON_META, config))


def train_no_hierarchy(corpus: MultiDomainCorpus, config: TrainConfig) -> TrainResult:
    return train(corpus, ablation_config(BaselineKind.NO_HIERARCHY, config))


def train_no_prior_supervision(corpus: MultiDomainCorpus, config: TrainConfig) -> TrainResult:
    return train(corpus, ablation_config(BaselineKind.NO_PRIOR_SUPERVISION, config))


# ---------------------------------------------------------------- ERM with normalization


class AffineNorm:
    """Standardize each unit, then apply a learnable scale and shift.

    Training standardizes with the current batch statistics, differentiated
    through, and folds them into running averages; evaluation and Tent use the
    frozen running statistics.
    """

    def __init__(self, width: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(width), requires_grad=True)
        self.beta = Tensor(np.zeros(width), requires_grad=True)
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        if training:
            centered = x - nc.mean(x, axis=0)
            var = nc.mean(centered * centered, axis=0)
            inv_std = nc.exp(nc.scale(nc.log(var + self.eps), -0.5))
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * x.data.mean(axis=0)
            self.running_var = (1 - m) * self.running_var + m * var.data
            return centered * inv_std * self.gamma + self.beta
        dtype = x.data.dtype
        shift = Tensor((-self.running_mean).astype(dtype))
        inv_std = Tensor((1.0 / np.sqrt(self.running_var + self.eps)).astype(dtype))
        return (x + shift) * inv_std * self.gamma + self.beta

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]


class ErmModel:
    """MLP backbone with normalization after every linear layer, plus a linear head with bias."""

    def __init__(self, num_classes: int, feature_dim: int = 64, hidden=(256, 128), seed=0):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.hidden = tuple(hidden)
        sizes = [IMAGE_PIXELS, *self.hidden, feature_dim]
        self.linears: list[Linear] = []
        self.norms: list[AffineNorm] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
            self.linears.append(Linear(Tensor(w, requires_grad=True), Tensor(np.zeros(fan_out), requires_grad=True)))
            self.norms.append(AffineNorm(fan_out))
        w = rng.standard_normal((feature_dim, num_classes)) * np.sqrt(1.0 / feature_dim)
        self.head = Linear(Tensor(w, requires_grad=True), Tensor(np.zeros(num_classes), requires_grad=True))

    def first_layer(self, images) -> Tensor:
        data = np.asarray(images)
        if data.ndim != 3 or data.shape[1:] != (28, 28):
            raise ContractError(f"images must be (B, 28, 28), got {data.shape}")
        return self.linears[0](Tensor(data.reshape(len(data), IMAGE_PIXELS)))

    def logits_from_first(self, h: Tensor, training: bool = False) -> Tensor:
        """Everything after the first linear layer; Tent reuses a cached first layer."""
        for i, norm in enumerate(self.norms):
            if i > 0:
                h = self.linears[i](h)
            h = nc.relu(norm(h, training))
        return self.head(h)

    def logits(self, images, training: bool = False) -> Tensor:
        return self.logits_from_first(self.first_layer(images), training)

    def predict(self, images, chunk: int = 512) -> np.ndarray:
        images = np.asarray(images)
        out = []
        with nc.no_grad():
            for s in range(0, len(images), chunk):
                out.append(np.argmax(self.logits(images[s : s + chunk]).data, axis=1))
        return np.concatenate(out) if out else np.zeros(0, np.int64)

    def norm_parameters(self) -> list[Tensor]:
        return [p for n in self.norms for p in n.parameters()]

    def parameters(self) -> list[Tensor]:
        weights = [t for lin in self.linears for t in (lin.weight, lin.bias)]
        return weights + self.norm_parameters() + [self.head.weight, self.head.bias]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (lin, norm) in enumerate(zip(self.linears, self.norms)):
            out[f"backbone.{i}.weight"] = lin.weight
            out[f"backbone.{i}.bias"] = lin.bias
            out[f"norm.{i}.gamma"] = norm.gamma
            out[f"norm.{i}.beta"] = norm.beta
        out["head.weight"] = self.head.weight
        out["head.bias"] = self.head.bias
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data.copy() for k, v in self.named_parameters().items()}
        for i, norm in enumerate(self.norms):
            state[f"norm.{i}.running_mean"] = norm.running_mean.copy()
            state[f"norm.{i}.running_var"] = norm.running_var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        expected = set(params) | {f"norm.{i}.running_{s}" for i in range(len(self.norms)) for s in ("mean", "var")}
        if set(state) != expected:
            raise DataError(f"parameter names differ: {sorted(set(state) ^ expected)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise DataError(f"{name}: checkpoint shape {state[name].shape} != model {p.shape}")
            p.data[...] = state[name]
        for i, norm in enumerate(self.norms):
            norm.running_mean = state[f"norm.{i}.running_mean"].astype(np.float64)
            norm.running_var = state[f"norm.{i}.running_var"].astype(np.float64)

    def clone(self) -> "ErmModel":
        twin = ErmModel(self.num_classes, self.feature_dim, self.hidden, seed=0)
        twin.load_state_dict(self.state_dict())
        return twin

    def describe(self) -> dict:
        return {"kind": "erm", "num_classes": self.num_classes, "feature_dim": self.feature_dim, "hidden": list(self.hidden)}

    def save(self, path, config_hash: str = "") -> None:
        save_checkpoint(path, self.describe(), self.state_dict(), config_hash)

    @classmethod
    def load(cls, path, expect: dict | None = None) -> "ErmModel":
        meta, state = load_checkpoint(path)
        if meta.get("kind") != "erm":
            raise DataError(f"{path} does not hold an ERM model")
        check_dims(meta, expect)
        model = cls(meta["num_classes"], meta["feature_dim"], meta["hidden"], seed=0)
        model.load_state_dict(state)
        return model


@dataclass
class ErmResult:
    model: ErmModel
    history: list[dict]
    best_val_accuracy: float = float("nan")
    best_iteration: int = 0


def train_erm(corpus: MultiDomainCorpus, config: TrainConfig) -> ErmResult:
    """Supervised training on the pooled sources; domain ids are never read."""
    pool = corpus.pooled_sources()
    num_classes = corpus.num_classes
    init_rng, batch_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2))
    model = ErmModel(num_classes, config.feature_dim, config.hidden, init_rng)
    head = [model.head.weight, model.head.bias]
    body = [p for p in model.parameters() if all(p is not h for h in head)]
    opt_body = nc.Adam(body, config.lr_backbone)
    opt_head = nc.Adam(head, config.lr_heads)
    val_images, val_labels = corpus.validation_set()
    history: list[dict] = []
    result = ErmResult(model, history)
    best_state = None
    for it in range(1, config.iterations + 1):
        idx = batch_rng.choice(len(pool), min(config.batch, len(pool)), replace=False)
        nc.clear_tape()
        opt_body.zero_grad()
        opt_head.zero_grad()
        try:
            loss = nc.softmax_cross_entropy(model.logits(pool.images[idx], training=True), pool.labels[idx])
            nc.backward(loss)
            opt_body.step()
            opt_head.step()
        except NumericFailure as exc:
            nc.clear_tape()
            raise NumericFailure(f"iteration {it}: {exc}") from None
        value = loss.item()
        row = {"iteration": it, "ce_posterior": value, "ce_prior": 0.0, "kl": 0.0, "total": value, "val_accuracy": None}
        if len(val_labels) and (it % config.val_every == 0 or it == config.iterations):
            acc = float(np.mean(model.predict(val_images) == val_labels))
            row["val_accuracy"] = acc
            if best_state is None or acc > result.best_val_accuracy:
                best_state = model.state_dict()
                result.best_val_accuracy = acc
                result.best_iteration = it
        history.append(row)
    if best_state is not None:
        model.load_state_dict(best_state)
    return result


# ---------------------------------------------------------------- Tent


@dataclass
class TentConfig:
    batch_size: int = 128
    steps: int = 100
    lr: float = 1e-3
    stream_mode: str = "single_domain"

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ContractError("tent batch_size must be >= 1")
        if self.steps < 0 or self.lr < 0:
            raise ConfigError("tent steps and lr must be >= 0")
        if self.stream_mode not in STREAM_MODES:
            raise ConfigError(f"tent stream_mode must be one of {STREAM_MODES}")

    def replace(self, **changes) -> "TentConfig":
        return dataclasses.replace(self, **changes)


def prediction_entropy(logits: Tensor) -> Tensor:
    """Mean over the batch of -sum_c p_c log p_c."""
    logp = nc.log_softmax(logits)
    p = nc.exp(logp)
    return nc.scale(nc.sum_(p * logp), -1.0 / logits.shape[0])


def tent_adapt(erm_model: ErmModel, stream: list[np.ndarray], cfg: TentConfig) -> np.ndarray:
    """Predict a stream batch by batch, adapting normalization affines online.

    The model passed in is never modified; each call starts from its weights,
    so adaptation resets between streams.
    """
    for batch in stream:
        if len(batch) < 1:
            raise ContractError("stream batches must hold at least one sample")
    model = erm_model.clone()
    params = model.norm_parameters()
    opt = nc.Adam(params, cfg.lr)
    predictions = []
    for batch in stream:
        with nc.no_grad():
            h = model.first_layer(batch)
        if cfg.lr > 0:
            for _ in range(cfg.steps):
                nc.clear_tape()
                opt.zero_grad()
                nc.backward(prediction_entropy(model.logits_from_first(h)))
                opt.step()
        with nc.no_grad():
            predictions.append(np.argmax(model.logits_from_first(h).data, axis=1))
    return np.concatenate(predictions) if predictions else np.zeros(0, np.int64)


def tent_accuracy(erm_model: ErmModel, domains: list[DomainDataset], cfg: TentConfig, seed: int = 0) -> float:
    spec = StreamSpec(cfg.stream_mode, tuple(d.domain_id for d in domains), cfg.batch_size, seed)
    correct = total = 0
    for stream in build_streams(domains, spec):
        pred = tent_adapt(erm_model, stream.batches, cfg)
        truth = stream.all_labels
        correct += int(np.sum(pred == truth))
        total += len(truth)
    return correct / total
