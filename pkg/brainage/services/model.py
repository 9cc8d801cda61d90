"""
The two-modality autoencoder: encoders with a generic/unique latent split,
own and cross decoders, weighted fusion, and the regressor, classifier and
latent discriminator heads.

Modality 1 is the structural (sMRI) table and modality 2 the functional (fMRI)
table. Each encoder emits ``mu || logvar``; the first ``generic_dim`` entries of
z form the generic code and the remaining ``unique_dim`` the unique code.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..exceptions import ConfigError, DimensionError
from ..schemas import LatentSpec, TrainConfig
from .numerics import (
    MLPCache,
    MLPParams,
    MLPSpec,
    Rng,
    as_matrix,
    gaussian_sample,
    init_mlp,
    mlp_backward,
    mlp_forward,
)

logger = logging.getLogger("brainage.services.model")

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of every network plus the latent layout."""

    latent: LatentSpec
    modalities: Tuple[int, ...]
    input_dims: Mapping[int, int]
    nets: Mapping[str, MLPSpec]
    fusion_weights: Tuple[float, float] = (0.5, 0.5)

    @property
    def fused_dim(self) -> int:
        if len(self.modalities) == 2:
            return self.latent.generic_dim + 2 * self.latent.unique_dim
        return self.latent.total_dim

    def to_dict(self) -> dict:
        return {
            "latent": self.latent.model_dump(),
            "modalities": list(self.modalities),
            "input_dims": {str(m): d for m, d in self.input_dims.items()},
            "nets": {name: spec.to_dict() for name, spec in self.nets.items()},
            "fusion_weights": list(self.fusion_weights),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelSpec":
        return cls(
            latent=LatentSpec(**data["latent"]),
            modalities=tuple(data["modalities"]),
            input_dims={int(m): int(d) for m, d in data["input_dims"].items()},
            nets={name: MLPSpec.from_dict(spec) for name, spec in data["nets"].items()},
            fusion_weights=tuple(data["fusion_weights"]),
        )


def build_model_spec(cfg: TrainConfig, input_dims: Mapping[int, int]) -> ModelSpec:
    """Derive every network shape from the training config and input widths."""
    latent = cfg.latent
    arch = cfg.architecture
    act = arch.hidden_activation
    modalities = cfg.modalities
    for m in modalities:
        if not input_dims.get(m):
            raise ConfigError(f"Modality {m} has no feature columns")

    fused_dim = latent.generic_dim + 2 * latent.unique_dim if len(modalities) == 2 else latent.total_dim
    nets: Dict[str, MLPSpec] = {}
    for m in modalities:
        nets[f"enc{m}"] = MLPSpec((input_dims[m], *arch.encoder_hidden, 2 * latent.total_dim), act, "linear")
        nets[f"dec{m}"] = MLPSpec((latent.total_dim, *arch.decoder_hidden, input_dims[m]), act, "linear")
    # discriminator shares the classifier architecture, only the input width differs
    nets["disc"] = MLPSpec((latent.generic_dim, *arch.classifier_hidden, 1), act, "sigmoid")
    nets["regressor"] = MLPSpec((fused_dim, *arch.regressor_hidden, 1), act, "linear")
    nets["classifier"] = MLPSpec((fused_dim, *arch.classifier_hidden, 1), act, "sigmoid")
    return ModelSpec(
        latent=latent,
        modalities=modalities,
        input_dims={m: int(input_dims[m]) for m in modalities},
        nets=nets,
        fusion_weights=tuple(cfg.fusion_weights),
    )


@dataclass
class ModelParams:
    """Parameters of every network plus the age standardization constants."""

    spec: ModelSpec
    nets: Dict[str, MLPParams]
    age_mean: float = 0.0
    age_std: float = 1.0

    def net(self, name: str) -> MLPParams:
        if name not in self.nets:
            raise ConfigError(f"Model has no network {name!r}")
        return self.nets[name]

    @property
    def enc1(self) -> Optional[MLPParams]:
        return self.nets.get("enc1")

    @property
    def enc2(self) -> Optional[MLPParams]:
        return self.nets.get("enc2")

    @property
    def dec1(self) -> Optional[MLPParams]:
        return self.nets.get("dec1")

    @property
    def dec2(self) -> Optional[MLPParams]:
        return self.nets.get("dec2")

    @property
    def disc(self) -> MLPParams:
        return self.nets["disc"]

    @property
    def regressor(self) -> MLPParams:
        return self.nets["regressor"]

    @property
    def classifier(self) -> MLPParams:
        return self.nets["classifier"]

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, {k: v.copy() for k, v in self.nets.items()}, self.age_mean, self.age_std)

    def replace_nets(self, updates: Mapping[str, MLPParams]) -> "ModelParams":
        nets = dict(self.nets)
        nets.update(updates)
        return ModelParams(self.spec, nets, self.age_mean, self.age_std)

    def to_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {}
        for name, params in self.nets.items():
            arrays.update(params.to_arrays(prefix=f"{name}."))
        return arrays

    @classmethod
    def from_arrays(
        cls, spec: ModelSpec, arrays: Mapping[str, np.ndarray], age_mean: float = 0.0, age_std: float = 1.0
    ) -> "ModelParams":
        nets = {name: MLPParams.from_arrays(arrays, prefix=f"{name}.") for name in spec.nets}
        for name, params in nets.items():
            params.check(spec.nets[name])
        return cls(spec, nets, age_mean, age_std)


def init_model(spec: ModelSpec, rng: Rng, age_mean: float = 0.0, age_std: float = 1.0) -> ModelParams:
    """Fresh parameters; each network draws from its own child generator."""
    nets = {}
    for index, name in enumerate(sorted(spec.nets)):
        nets[name] = init_mlp(spec.nets[name], rng.child(index))
    return ModelParams(spec, nets, float(age_mean), float(age_std))


def parameter_count(params: ModelParams) -> int:
    return int(sum(net.n_params for net in params.nets.values()))


@dataclass
class LatentCode:
    """Encoder output for a batch."""

    mu: np.ndarray
    logvar: np.ndarray
    z: np.ndarray
    generic_dim: int
    eps: Optional[np.ndarray] = None
    raw_logvar: Optional[np.ndarray] = field(default=None, repr=False)
    cache: Optional[MLPCache] = field(default=None, repr=False)

    @property
    def generic(self) -> np.ndarray:
        return self.z[:, : self.generic_dim]

    @property
    def unique(self) -> np.ndarray:
        return self.z[:, self.generic_dim:]

    @property
    def mu_unique(self) -> np.ndarray:
        return self.mu[:, self.generic_dim:]

    @property
    def logvar_unique(self) -> np.ndarray:
        return self.logvar[:, self.generic_dim:]


@dataclass
class FusedCode:
    """Input of the regressor and classifier heads."""

    generic_avg: np.ndarray
    unique1: Optional[np.ndarray]
    unique2: Optional[np.ndarray]
    fusion_weights: Tuple[float, float] = (0.5, 0.5)
    row_weights: Optional[np.ndarray] = field(default=None, repr=False)

    def matrix(self) -> np.ndarray:
        parts = [self.generic_avg]
        parts += [u for u in (self.unique1, self.unique2) if u is not None]
        return np.concatenate(parts, axis=1)

    @property
    def width(self) -> int:
        return self.matrix().shape[1]


def _check_modality(params: ModelParams, modality: int) -> None:
    if modality not in params.spec.modalities:
        raise DimensionError(f"Model does not encode modality {modality}")


def encode(
    params: ModelParams,
    modality: int,
    x,
    rng: Optional[Rng] = None,
    mode: str = "sample",
    eps: Optional[np.ndarray] = None,
) -> LatentCode:
    """Encode one modality; ``sample`` applies the reparameterization, ``deterministic`` sets z = mu."""
    _check_modality(params, modality)
    name = f"enc{modality}"
    out, cache = mlp_forward(params.net(name), params.spec.nets[name], x)
    total = params.spec.latent.total_dim
    mu = out[:, :total]
    raw_logvar = out[:, total:]
    logvar = np.clip(raw_logvar, LOGVAR_MIN, LOGVAR_MAX)

    if mode == "deterministic":
        z, eps = mu.copy(), None
    elif mode == "sample":
        if eps is None:
            if rng is None:
                raise ConfigError("Sample mode needs an Rng or explicit eps")
            eps = gaussian_sample(rng, mu.shape)
        eps = as_matrix(eps, "eps")
        if eps.shape != mu.shape:
            raise DimensionError(f"eps shape {eps.shape} != code shape {mu.shape}")
        z = mu + np.exp(0.5 * logvar) * eps
    else:
        raise ConfigError(f"Unknown encode mode {mode!r}")
    return LatentCode(mu, logvar, z, params.spec.latent.generic_dim, eps, raw_logvar, cache)


def _decode(params: ModelParams, modality: int, generic, unique) -> Tuple[np.ndarray, MLPCache]:
    _check_modality(params, modality)
    latent = params.spec.latent
    generic, unique = as_matrix(generic, "generic"), as_matrix(unique, "unique")
    if generic.shape[1] != latent.generic_dim or unique.shape[1] != latent.unique_dim:
        raise DimensionError(
            f"Decoder expects generic {latent.generic_dim} + unique {latent.unique_dim} columns, "
            f"got {generic.shape[1]} + {unique.shape[1]}"
        )
    if generic.shape[0] != unique.shape[0]:
        raise DimensionError("generic and unique codes have different batch sizes")
    name = f"dec{modality}"
    return mlp_forward(params.net(name), params.spec.nets[name], np.concatenate([generic, unique], axis=1))


def decode(params: ModelParams, modality: int, generic, unique) -> np.ndarray:
    """Reconstruct modality ``modality`` from a generic and a unique code."""
    x_hat, _ = _decode(params, modality, generic, unique)
    return x_hat


def cross_decode(
    params: ModelParams, target: int, source: int, z_target: LatentCode, z_source: LatentCode
) -> np.ndarray:
    """Rebuild ``target`` from the source generic code and its own unique code; equals ``decode`` when target == source."""
    return decode(params, target, z_source.generic, z_target.unique)


def _row_weights(fusion_weights: Tuple[float, float], present1, present2, batch: int) -> np.ndarray:
    p1 = np.ones(batch) if present1 is None else np.asarray(present1, dtype=np.float64)
    p2 = np.ones(batch) if present2 is None else np.asarray(present2, dtype=np.float64)
    w1, w2 = fusion_weights[0] * p1, fusion_weights[1] * p2
    total = w1 + w2
    # a row missing one modality falls back to the other's generic code
    w1 = np.where(total > 0, w1 / np.where(total > 0, total, 1.0), p1)
    w2 = np.where(total > 0, w2 / np.where(total > 0, total, 1.0), p2)
    return np.stack([w1, w2], axis=1)


def fuse(
    z1: Optional[LatentCode],
    z2: Optional[LatentCode],
    fusion_weights: Tuple[float, float] = (0.5, 0.5),
    present1=None,
    present2=None,
) -> FusedCode:
    """Weighted generic average plus both unique codes.

    With one code missing (unimodal model) the fused code is that modality's z.
    """
    fusion_weights = (float(fusion_weights[0]), float(fusion_weights[1]))
    if min(fusion_weights) < 0 or abs(fusion_weights[0] + fusion_weights[1] - 1.0) > 1e-12:
        raise ConfigError(f"Fusion weights must be non-negative and sum to 1, got {fusion_weights}")
    if z1 is None and z2 is None:
        raise ConfigError("fuse needs at least one latent code")
    if z1 is None or z2 is None:
        code = z1 if z1 is not None else z2
        return FusedCode(
            generic_avg=code.generic,
            unique1=code.unique if z1 is not None else None,
            unique2=code.unique if z2 is not None else None,
            fusion_weights=fusion_weights,
        )
    if z1.z.shape != z2.z.shape or z1.generic_dim != z2.generic_dim:
        raise DimensionError("Latent codes of the two modalities have inconsistent partitions")

    batch = z1.z.shape[0]
    weights = _row_weights(fusion_weights, present1, present2, batch)
    generic_avg = weights[:, :1] * z1.generic + weights[:, 1:] * z2.generic
    mask1 = np.ones((batch, 1)) if present1 is None else np.asarray(present1, dtype=np.float64)[:, None]
    mask2 = np.ones((batch, 1)) if present2 is None else np.asarray(present2, dtype=np.float64)[:, None]
    return FusedCode(generic_avg, z1.unique * mask1, z2.unique * mask2, fusion_weights, weights)


def _fused_matrix(params: ModelParams, fused) -> np.ndarray:
    matrix = fused.matrix() if isinstance(fused, FusedCode) else as_matrix(fused, "fused")
    if matrix.shape[1] != params.spec.fused_dim:
        raise DimensionError(f"Fused width {matrix.shape[1]} != {params.spec.fused_dim}")
    return matrix


def predict_age(params: ModelParams, fused) -> np.ndarray:
    """Ages in years, one per row."""
    raw, _ = mlp_forward(params.regressor, params.spec.nets["regressor"], _fused_matrix(params, fused))
    return raw[:, 0] * params.age_std + params.age_mean


def predict_sex(params: ModelParams, fused) -> np.ndarray:
    """Probability of sex label 1, one per row."""
    prob, _ = mlp_forward(params.classifier, params.spec.nets["classifier"], _fused_matrix(params, fused))
    return prob[:, 0]


def discriminate(params: ModelParams, code) -> np.ndarray:
    """Probability that each generic code was drawn from the prior."""
    code = as_matrix(code, "code")
    if code.shape[1] != params.spec.latent.generic_dim:
        raise DimensionError(f"Discriminator expects {params.spec.latent.generic_dim} columns, got {code.shape[1]}")
    prob, _ = mlp_forward(params.disc, params.spec.nets["disc"], code)
    return prob[:, 0]


def recon_pairs(modalities: Sequence[int]) -> List[Tuple[int, int]]:
    """(target, generic source) pairs of the reconstruction double sum."""
    return [(i, j) for i in modalities for j in modalities]


@dataclass
class Batch:
    """Model inputs for one minibatch; absent modality rows are zero-filled."""

    x: Dict[int, np.ndarray]
    present: Dict[int, np.ndarray]
    age: np.ndarray
    sex: np.ndarray

    @property
    def size(self) -> int:
        return int(self.age.shape[0])


@dataclass
class ForwardPass:
    """Everything the losses and the backward pass need from one forward sweep."""

    codes: Dict[int, LatentCode]
    present: Dict[int, np.ndarray]
    fused: FusedCode
    age_raw: np.ndarray
    sex_prob: np.ndarray
    age_cache: MLPCache = field(repr=False)
    sex_cache: MLPCache = field(repr=False)
    recon: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict)
    recon_caches: Dict[Tuple[int, int], MLPCache] = field(default_factory=dict, repr=False)
    disc_post: Dict[int, np.ndarray] = field(default_factory=dict)
    disc_caches: Dict[int, MLPCache] = field(default_factory=dict, repr=False)


def forward_pass(
    params: ModelParams,
    batch: Batch,
    mode: str = "sample",
    rng: Optional[Rng] = None,
    eps: Optional[Mapping[int, np.ndarray]] = None,
    with_decoders: bool = True,
    with_disc: bool = True,
) -> ForwardPass:
    """Encode, fuse, run both heads and, optionally, the decoders and the discriminator."""
    spec = params.spec
    codes: Dict[int, LatentCode] = {}
    for index, m in enumerate(spec.modalities):
        m_eps = None if eps is None else eps.get(m)
        m_rng = None if rng is None else rng.child(index)
        codes[m] = encode(params, m, batch.x[m], m_rng, mode, m_eps)

    present = {m: np.asarray(batch.present[m], dtype=bool) for m in spec.modalities}
    fused = fuse(
        codes.get(1),
        codes.get(2),
        spec.fusion_weights,
        present.get(1) if len(spec.modalities) == 2 else None,
        present.get(2) if len(spec.modalities) == 2 else None,
    )
    fused_x = fused.matrix()
    age_raw, age_cache = mlp_forward(params.regressor, spec.nets["regressor"], fused_x)
    sex_prob, sex_cache = mlp_forward(params.classifier, spec.nets["classifier"], fused_x)
    fp = ForwardPass(codes, present, fused, age_raw, sex_prob, age_cache, sex_cache)

    if with_decoders:
        for i, j in recon_pairs(spec.modalities):
            x_hat, cache = _decode(params, i, codes[j].generic, codes[i].unique)
            fp.recon[(i, j)] = x_hat
            fp.recon_caches[(i, j)] = cache
    if with_disc:
        for m in spec.modalities:
            rows = present[m]
            if rows.any():
                prob, cache = mlp_forward(params.disc, spec.nets["disc"], codes[m].generic[rows])
                fp.disc_post[m] = prob
                fp.disc_caches[m] = cache
    return fp


@dataclass
class Upstream:
    """Loss gradients w.r.t. forward-pass outputs."""

    d_age: Optional[np.ndarray] = None
    d_sex: Optional[np.ndarray] = None
    d_recon: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict)
    d_generic: Dict[int, np.ndarray] = field(default_factory=dict)
    d_unique: Dict[int, np.ndarray] = field(default_factory=dict)
    d_disc_post: Dict[int, np.ndarray] = field(default_factory=dict)
    d_mu_unique: Dict[int, np.ndarray] = field(default_factory=dict)
    d_logvar_unique: Dict[int, np.ndarray] = field(default_factory=dict)


def _accumulate(grads: Dict[str, MLPParams], name: str, update: MLPParams) -> None:
    grads[name] = grads[name].add(update) if name in grads else update


def backward_pass(params: ModelParams, fp: ForwardPass, upstream: Upstream) -> Dict[str, MLPParams]:
    """Gradients for encoders, decoders, regressor and classifier.

    The discriminator only passes gradients through to the generic codes; its
    own parameter gradients are not returned.
    """
    spec = params.spec
    latent = spec.latent
    g_dim, u_dim = latent.generic_dim, latent.unique_dim
    batch = fp.age_raw.shape[0]
    grads: Dict[str, MLPParams] = {}
    d_z = {m: np.zeros((batch, latent.total_dim)) for m in spec.modalities}

    d_fused = np.zeros((batch, spec.fused_dim))
    if upstream.d_age is not None:
        g, d_in = mlp_backward(fp.age_cache, upstream.d_age)
        grads["regressor"] = g
        d_fused += d_in
    if upstream.d_sex is not None:
        g, d_in = mlp_backward(fp.sex_cache, upstream.d_sex)
        grads["classifier"] = g
        d_fused += d_in

    if len(spec.modalities) == 2:
        weights = fp.fused.row_weights
        d_avg = d_fused[:, :g_dim]
        d_z[1][:, :g_dim] += weights[:, :1] * d_avg
        d_z[2][:, :g_dim] += weights[:, 1:] * d_avg
        d_z[1][:, g_dim:] += d_fused[:, g_dim:g_dim + u_dim] * fp.present[1][:, None]
        d_z[2][:, g_dim:] += d_fused[:, g_dim + u_dim:] * fp.present[2][:, None]
    else:
        d_z[spec.modalities[0]] += d_fused

    for (i, j), d_out in upstream.d_recon.items():
        g, d_in = mlp_backward(fp.recon_caches[(i, j)], d_out)
        _accumulate(grads, f"dec{i}", g)
        d_z[j][:, :g_dim] += d_in[:, :g_dim]
        d_z[i][:, g_dim:] += d_in[:, g_dim:]

    for m, d in upstream.d_generic.items():
        d_z[m][:, :g_dim] += d
    for m, d in upstream.d_unique.items():
        d_z[m][:, g_dim:] += d

    for m, d in upstream.d_disc_post.items():
        _, d_in = mlp_backward(fp.disc_caches[m], d)
        d_z[m][fp.present[m], :g_dim] += d_in

    for m in spec.modalities:
        code = fp.codes[m]
        d_mu = d_z[m].copy()
        d_logvar = np.zeros_like(d_mu)
        if code.eps is not None:
            d_logvar += d_z[m] * code.eps * 0.5 * np.exp(0.5 * code.logvar)
        if m in upstream.d_mu_unique:
            d_mu[:, g_dim:] += upstream.d_mu_unique[m]
        if m in upstream.d_logvar_unique:
            d_logvar[:, g_dim:] += upstream.d_logvar_unique[m]
        d_logvar *= (code.raw_logvar > LOGVAR_MIN) & (code.raw_logvar < LOGVAR_MAX)
        g, _ = mlp_backward(code.cache, np.concatenate([d_mu, d_logvar], axis=1))
        grads[f"enc{m}"] = g
    return grads
