"""Low-rank adapters on attention projections with attach/merge/detach.

While adapters are attached the base weights are frozen; the effective weight
is W + (alpha/rank) * A @ B (the scaling can be switched off to get the
literal W + A @ B form). B starts at zero, so a freshly adapted model is
functionally identical to its base.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor
from .model import ConfigError, MultimodalModel, read_tensor_container, write_tensor_container

_TARGET_TO_PROJ = {"query": "wq", "key": "wk", "value": "wv", "output": "wo"}


class LoraStateError(RuntimeError):
    """Raised for attach/merge calls in the wrong adapter state."""


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 32.0
    dropout_p: float = 0.1
    targets: tuple[str, ...] = ("query", "value")
    include_encoder: bool = False
    scaled: bool = True  # False gives the unscaled W + A @ B variant
    # std of the A entries; B stays zero either way. Random-init bases need a
    # larger A than the usual 1/sqrt(rank) to train at small learning rates.
    a_init_std: float = 2.0

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("rank must be positive")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must be in [0, 1)")
        if self.a_init_std <= 0:
            raise ConfigError("a_init_std must be positive")
        unknown = set(self.targets) - set(_TARGET_TO_PROJ)
        if unknown:
            raise ConfigError(f"unknown LoRA targets: {sorted(unknown)}")
        if not self.targets:
            raise ConfigError("need at least one LoRA target")
        object.__setattr__(self, "targets", tuple(self.targets))


class LoraAdapterSet:
    def __init__(self, config: LoraConfig, pairs: dict[str, tuple[Tensor, Tensor]]):
        self.config = config
        self.pairs = pairs
        self.enabled = True

    @property
    def scale(self) -> float:
        return self.config.alpha / self.config.rank if self.config.scaled else 1.0

    def config_dict(self) -> dict:
        return asdict(self.config)

    def tensor_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for target, (a_mat, b_mat) in self.pairs.items():
            out[f"lora.{target}.A"] = a_mat.data
            out[f"lora.{target}.B"] = b_mat.data
        return out


def _target_param_names(model: MultimodalModel, cfg: LoraConfig) -> list[str]:
    names = []
    scopes = [("dec", model.cfg.n_dec_layers)]
    if cfg.include_encoder:
        scopes.append(("enc", model.cfg.n_enc_layers))
    for scope, n_layers in scopes:
        for i in range(n_layers):
            for target in cfg.targets:
                names.append(f"{scope}.layers.{i}.attn.{_TARGET_TO_PROJ[target]}")
    return names


def attach_lora(model: MultimodalModel, cfg: LoraConfig, seed: int) -> MultimodalModel:
    """Create zero-initialized adapters on the configured projections and
    freeze every base parameter."""
    if model.lora is not None:
        raise LoraStateError("adapters already attached")
    rng = np.random.default_rng(seed)
    pairs: dict[str, tuple[Tensor, Tensor]] = {}
    for name in _target_param_names(model, cfg):
        if name not in model.params:
            raise ConfigError(f"LoRA target parameter {name!r} does not exist")
        d, k = model.params[name].data.shape
        if cfg.rank > min(d, k) // 2:
            raise ConfigError(
                f"rank {cfg.rank} too large for {name!r} ({d}x{k}); need rank <= min/2"
            )
        a_mat = Tensor(rng.normal(0.0, cfg.a_init_std, (d, cfg.rank)), requires_grad=True)
        b_mat = Tensor(np.zeros((cfg.rank, k)), requires_grad=True)
        pairs[name] = (a_mat, b_mat)
    for tensor in model.params.values():
        tensor.requires_grad = False
    model.lora = LoraAdapterSet(cfg, pairs)
    return model


def merge_lora(model: MultimodalModel) -> MultimodalModel:
    """Fold W + scale * A @ B into the base weights and drop the adapters."""
    if model.lora is None:
        raise LoraStateError("no adapters attached")
    scale = model.lora.scale
    for target, (a_mat, b_mat) in model.lora.pairs.items():
        model.params[target].data = model.params[target].data + scale * (a_mat.data @ b_mat.data)
    _release(model)
    return model


def detach_lora(model: MultimodalModel) -> MultimodalModel:
    """Drop the adapters without merging."""
    if model.lora is None:
        raise LoraStateError("no adapters attached")
    _release(model)
    return model


def _release(model: MultimodalModel) -> None:
    model.lora = None
    for tensor in model.params.values():
        tensor.requires_grad = True


def trainable_parameters(model: MultimodalModel) -> dict[str, Tensor]:
    """Adapter tensors when attached, otherwise every base parameter."""
    if model.lora is None:
        return dict(model.params)
    out = {}
    for target, (a_mat, b_mat) in model.lora.pairs.items():
        out[f"lora.{target}.A"] = a_mat
        out[f"lora.{target}.B"] = b_mat
    return out


def lora_grad_filter(model: MultimodalModel, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Drop gradients of frozen base parameters."""
    if model.lora is None:
        return grads
    return {name: g for name, g in grads.items() if name.startswith("lora.")}


def restore_adapters(model: MultimodalModel, cfg_dict: dict, tensors: dict[str, np.ndarray]) -> None:
    """Re-create an adapter set from checkpoint tensors (lora.* namespace)."""
    cfg = LoraConfig(**{**cfg_dict, "targets": tuple(cfg_dict["targets"])})
    attach_lora(model, cfg, seed=0)
    for target, (a_mat, b_mat) in model.lora.pairs.items():
        a_key, b_key = f"lora.{target}.A", f"lora.{target}.B"
        if a_key not in tensors or b_key not in tensors:
            raise ConfigError(f"checkpoint missing adapter tensors for {target!r}")
        if tensors[a_key].shape != a_mat.data.shape or tensors[b_key].shape != b_mat.data.shape:
            raise ConfigError(f"adapter shape mismatch for {target!r}")
        a_mat.data = tensors[a_key].copy()
        b_mat.data = tensors[b_key].copy()


def save_adapter(model: MultimodalModel, path) -> None:
    """Adapter-only checkpoint (base weights distributed separately)."""
    if model.lora is None:
        raise LoraStateError("no adapters attached")
    write_tensor_container(path, {"lora_cfg": model.lora.config_dict()}, model.lora.tensor_arrays())


def load_adapter(model: MultimodalModel, path) -> MultimodalModel:
    meta, tensors = read_tensor_container(path)
    if "lora_cfg" not in meta:
        raise ConfigError(f"{path}: not an adapter checkpoint")
    if model.lora is not None:
        detach_lora(model)
    restore_adapters(model, meta["lora_cfg"], tensors)
    return model
