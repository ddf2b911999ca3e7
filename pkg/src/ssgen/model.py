"""Feature extractor, classifier generators and the inference paths between them.

The backbone maps an image to a ``d``-dim feature. Two amortization networks
turn per-class summaries into diagonal Gaussians over classifier rows:

* the source generator maps a class centre of the source domains to a
  distribution over that class's source classifier row;
* the shared amortization network maps a ``2d`` input to a ``d``-dim Gaussian.
  It serves both the prior path (class centre duplicated) and the per-sample
  path (source classifier row next to the test feature).

Both generators act row-wise, one class at a time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ssgen import numcore as nc
from ssgen.errors import ContractError, DataError
from ssgen.numcore import GaussianParams, Tensor

IMAGE_PIXELS = 28 * 28
CHECKPOINT_VERSION = 1

# how each variant conditions its test-time classifier
CONDITIONING = {
    "full": "hierarchical",
    "no_prior_supervision": "hierarchical",
    "non_meta": "hierarchical",
    "no_hierarchy": "direct",
    "invariant": "invariant",
}


@dataclass
class Linear:
    weight: Tensor  # (fan_in, fan_out)
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class MLP:
    """Stack of linear layers with relu between them (and optionally after the last)."""

    def __init__(self, sizes, rng: np.random.Generator, final_relu: bool):
        self.sizes = list(sizes)
        self.final_relu = final_relu
        self.layers: list[Linear] = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
            self.layers.append(
                Linear(Tensor(w, requires_grad=True), Tensor(np.zeros(fan_out), requires_grad=True))
            )

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self.final_relu:
                x = nc.relu(x)
        return x

    def parameters(self) -> list[Tensor]:
        return [t for layer in self.layers for t in (layer.weight, layer.bias)]

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.{i}.weight"] = layer.weight
            out[f"{prefix}.{i}.bias"] = layer.bias
        return out


class GaussianHead(MLP):
    """MLP whose ``2d`` output splits into a mean and a log-variance, each ``d`` wide."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, logvar_init: float):
        super().__init__([in_dim, 2 * out_dim, 2 * out_dim], rng, final_relu=False)
        self.out_dim = out_dim
        last = self.layers[-1]
        w = last.weight.data
        # mean half starts near an identity-scale map; logvar half starts flat
        w[:, :out_dim] *= np.sqrt(0.5)
        w[:, out_dim:] *= 0.01
        last.bias.data[out_dim:] = logvar_init

    def gaussian(self, x: Tensor) -> GaussianParams:
        out = self(x)
        d = self.out_dim
        return GaussianParams.from_raw(out[..., :d], out[..., d:])


class SingleSampleModel:
    """Backbone plus both generators; ``variant`` selects the test-time path."""

    def __init__(
        self,
        num_classes: int,
        feature_dim: int = 64,
        hidden=(256, 128),
        variant: str = "full",
        seed: int | np.random.Generator = 0,
        logvar_init: float = -4.0,
    ):
        if variant not in CONDITIONING:
            raise ContractError(f"unknown variant {variant!r}")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.hidden = tuple(hidden)
        self.variant = variant
        self.logvar_init = logvar_init
        self.backbone = MLP([IMAGE_PIXELS, *self.hidden, feature_dim], rng, final_relu=True)
        self.psi = GaussianHead(feature_dim, feature_dim, rng, logvar_init)
        self.theta_a = GaussianHead(2 * feature_dim, feature_dim, rng, logvar_init)

    @property
    def conditioning(self) -> str:
        return CONDITIONING[self.variant]

    def backbone_parameters(self) -> list[Tensor]:
        return self.backbone.parameters()

    def head_parameters(self) -> list[Tensor]:
        return self.psi.parameters() + self.theta_a.parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        return {
            **self.backbone.named_parameters("backbone"),
            **self.psi.named_parameters("psi"),
            **self.theta_a.named_parameters("theta_a"),
        }

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(state) != set(params):
            raise DataError(f"parameter names differ: {sorted(set(state) ^ set(params))}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise DataError(f"{name}: checkpoint shape {state[name].shape} != model {p.shape}")
            p.data[...] = state[name]

    def describe(self) -> dict:
        return {
            "kind": "single_sample",
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "hidden": list(self.hidden),
            "variant": self.variant,
            "logvar_init": self.logvar_init,
        }

    def save(self, path, config_hash: str = "") -> None:
        save_checkpoint(path, self.describe(), self.state_dict(), config_hash)

    @classmethod
    def load(cls, path, expect: dict | None = None) -> "SingleSampleModel":
        meta, state = load_checkpoint(path)
        if meta.get("kind") != "single_sample":
            raise DataError(f"{path} does not hold a single-sample model")
        check_dims(meta, expect)
        model = cls(
            meta["num_classes"], meta["feature_dim"], meta["hidden"], meta["variant"],
            seed=0, logvar_init=meta["logvar_init"],
        )
        model.load_state_dict(state)
        return model


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, meta: dict, state: dict[str, np.ndarray], config_hash: str) -> None:
    header = {"version": CHECKPOINT_VERSION, "config_hash": config_hash, **meta}
    arrays = {f"param/{k}": v for k, v in state.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with np.load(Path(path), allow_pickle=False) as archive:
            meta = json.loads(archive["__meta__"].tobytes().decode())
            state = {k[len("param/"):]: archive[k] for k in archive.files if k.startswith("param/")}
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    if meta.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {meta.get('version')}")
    return meta, state


def check_dims(meta: dict, expect: dict | None) -> None:
    for key, want in (expect or {}).items():
        have = meta.get(key)
        if isinstance(have, list):
            have = tuple(have)
        if isinstance(want, list):
            want = tuple(want)
        if have != want:
            raise DataError(f"checkpoint {key}={have!r} does not match expected {want!r}")


# ---------------------------------------------------------------- operations


def extract_features(backbone: MLP, images) -> Tensor:
    """``(B, 28, 28)`` images to ``(B, d)`` features; rows never interact."""
    data = images.data if isinstance(images, Tensor) else np.asarray(images)
    if data.ndim != 3 or data.shape[1:] != (28, 28):
        raise ContractError(f"images must be (B, 28, 28), got {data.shape}")
    x = Tensor(data.reshape(len(data), IMAGE_PIXELS))
    return backbone(x)


def center_weights(labels, domain_ids, domain_set, num_classes: int) -> np.ndarray:
    """Constant ``(C, n)`` matrix whose product with features gives class centres.

    Per-domain class means are averaged uniformly over the domains in
    ``domain_set`` that contain the class.
    """
    labels = np.asarray(labels)
    domain_ids = np.asarray(domain_ids)
    weights = np.zeros((num_classes, len(labels)))
    for c in range(num_classes):
        groups = []
        for dom in domain_set:
            idx = np.flatnonzero((labels == c) & (domain_ids == dom))
            if len(idx):
                groups.append(idx)
        if not groups:
            raise DataError(f"class {c} has no support samples in domains {list(domain_set)}")
        for idx in groups:
            weights[c, idx] = 1.0 / (len(groups) * len(idx))
    return weights


def compute_centers(features: Tensor, labels, domain_ids, domain_set, num_classes: int) -> Tensor:
    w = center_weights(labels, domain_ids, domain_set, num_classes)
    return Tensor(w, dtype=features.data.dtype) @ features


def infer_source_classifier(psi: GaussianHead, centers: Tensor) -> GaussianParams:
    _check_rows(centers, psi.out_dim)
    return psi.gaussian(centers)


def infer_prior_classifier(theta_a: GaussianHead, centers: Tensor) -> GaussianParams:
    """Prior path: each class centre is duplicated to fill the ``2d`` input."""
    _check_rows(centers, theta_a.out_dim)
    return theta_a.gaussian(nc.concat([centers, centers], axis=1))


def infer_posterior_classifier(
    theta_a: GaussianHead, w_source: Tensor, target_feature: Tensor
) -> GaussianParams:
    """Per-sample path: row ``c`` sees ``concat(w_source[c], feature)``.

    A ``(d,)`` feature yields ``(C, d)`` parameters; a ``(B, d)`` batch yields
    ``(B, C, d)``, each slice depending only on its own feature row.
    """
    d = theta_a.out_dim
    _check_rows(w_source, d)
    feats = target_feature if isinstance(target_feature, Tensor) else Tensor(target_feature)
    single = feats.ndim == 1
    if single:
        feats = feats.reshape(1, d)
    if feats.ndim != 2 or feats.shape[1] != d:
        raise ContractError(f"target feature must have length {d}, got shape {feats.shape}")
    b, c = feats.shape[0], w_source.shape[0]
    rows_w = nc.broadcast_to(w_source, (b, c, d)).reshape(b * c, d)
    rows_f = nc.broadcast_to(feats.reshape(b, 1, d), (b, c, d)).reshape(b * c, d)
    out = theta_a(nc.concat([rows_w, rows_f], axis=1)).reshape(b, c, 2 * d)
    g = GaussianParams.from_raw(out[:, :, :d], out[:, :, d:])
    if single:
        return GaussianParams(g.mean.reshape(c, d), g.logvar.reshape(c, d))
    return g


def classify(w: Tensor, features: Tensor) -> Tensor:
    """Logits ``<w_c, feature>``; ``w`` is shared ``(C, d)`` or per-sample ``(B, C, d)``."""
    if w.ndim == 2:
        if features.ndim != 2 or features.shape[1] != w.shape[1]:
            raise ContractError(f"features {features.shape} do not match classifier {w.shape}")
        return features @ w.T
    if w.ndim == 3:
        b, c, d = w.shape
        if features.shape != (b, d):
            raise ContractError(f"features {features.shape} do not match classifier {w.shape}")
        return nc.sum_(w * features.reshape(b, 1, d), axis=2)
    raise ContractError(f"classifier must be 2-d or 3-d, got {w.shape}")


def _check_rows(x: Tensor, d: int) -> None:
    if x.ndim != 2 or x.shape[1] != d:
        raise ContractError(f"expected (C, {d}) rows, got {x.shape}")
