"""Encoder + decoder bundle with a flat, prefixed parameter dictionary."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Dict

import numpy as np

from . import backbone as bb
from . import decoder as dec
from . import tensor as T
from .tensor import Tensor


def config_digest(backbone_cfg: bb.BackboneConfig, decoder_cfg: dec.DecoderConfig) -> str:
    blob = json.dumps(
        {"backbone": backbone_cfg.to_dict(), "decoder": decoder_cfg.to_dict()}, sort_keys=True, separators=(",", ":")
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class SegRet:
    backbone: bb.BackboneConfig
    decoder: dec.DecoderConfig
    params: Dict[str, Tensor]

    @classmethod
    def create(cls, backbone_cfg, decoder_cfg, seed: int = 0, dtype="f32") -> "SegRet":
        # independent streams so decoder weights do not depend on backbone depth
        ss = np.random.SeedSequence(seed)
        rb, rd = (np.random.default_rng(s) for s in ss.spawn(2))
        params = {}
        for k, v in bb.init_params(backbone_cfg, rb, dtype).items():
            params["backbone." + k] = v
        for k, v in dec.init_params(decoder_cfg, backbone_cfg.stage_channels, rd, dtype).items():
            params["decoder." + k] = v
        for k, v in params.items():
            v.name = k
        return cls(backbone_cfg, decoder_cfg, params)

    def _subset(self, prefix: str) -> Dict[str, Tensor]:
        n = len(prefix)
        return {k[n:]: v for k, v in self.params.items() if k.startswith(prefix)}

    @property
    def backbone_params(self) -> Dict[str, Tensor]:
        return self._subset("backbone.")

    @property
    def decoder_params(self) -> Dict[str, Tensor]:
        return self._subset("decoder.")

    @property
    def digest(self) -> str:
        return config_digest(self.backbone, self.decoder)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def features(self, image: Tensor) -> bb.FeaturePyramid:
        return bb.backbone_forward(image, self.backbone, self.backbone_params)

    def __call__(self, image) -> Tensor:
        if not isinstance(image, Tensor):
            image = Tensor(np.asarray(image, dtype=self.dtype))
        return dec.decoder_forward(self.features(image), self.decoder_params, self.decoder)

    def predict_logits(self, image: np.ndarray) -> np.ndarray:
        """Gradient-free logits for a numpy image ``[3, H, W]`` or ``[B, 3, H, W]``."""
        with T.no_grad():
            return self(Tensor._wrap(np.ascontiguousarray(image, dtype=self.dtype))).data

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def param_counts(self) -> Dict[str, int]:
        b = sum(v.data.size for k, v in self.params.items() if k.startswith("backbone."))
        d = sum(v.data.size for k, v in self.params.items() if k.startswith("decoder."))
        return {"backbone": b, "decoder": d, "total": b + d}
