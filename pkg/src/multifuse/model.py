"""Full detector: two encoders -> MuFEm -> SCoFA -> dense decoder."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from multifuse.detector import Decoder, DecoderConfig, DenseOutput
from multifuse.encoder import Encoder, EncoderConfig
from multifuse.errors import ConfigError, ShapeError
from multifuse.mufem import MuFEm
from multifuse.nn import Module
from multifuse.scofa import Scofa, ScofaConfig
from multifuse.tensor import Tensor


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    n_fusion_units: int = 4
    gat_patch: int = 2
    scofa: ScofaConfig = field(default_factory=ScofaConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def validate(self) -> None:
        self.encoder.validate()
        self.scofa.validate()
        self.decoder.validate()
        if not 1 <= self.n_fusion_units <= 5:
            raise ConfigError(f"model.n_fusion_units must lie in [1, 5], got {self.n_fusion_units}")
        if self.gat_patch < 1:
            raise ConfigError(f"model.gat_patch must be >= 1, got {self.gat_patch}")
        if self.encoder.total_stride % (2 ** (len(self.decoder.chain) - 1)):
            raise ConfigError("model.decoder.chain upsamples past the input resolution")


@dataclass
class ForwardResult:
    dense: DenseOutput
    fused: Tensor


class MultimodalDetector(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        self.encoder_visible = Encoder(replace(config.encoder, in_channels=3), rng)
        self.encoder_thermal = Encoder(replace(config.encoder, in_channels=1), rng)
        channels = config.encoder.out_channels
        self.mufem = MuFEm(channels, config.n_fusion_units, config.gat_patch, rng)
        self.scofa = Scofa(channels, config.scofa, rng)
        self.decoder = Decoder(self.scofa.out_channels, config.decoder, rng)
        self.name_parameters()

    @property
    def output_stride(self) -> int:
        return self.config.encoder.total_stride // self.decoder.upsample_factor

    def features(self, rgb: Tensor, thermal: Tensor) -> Tensor:
        if rgb.ndim == 3:
            rgb = Tensor(rgb.data[None])
        if thermal.ndim == 3:
            thermal = Tensor(thermal.data[None])
        if rgb.shape[2:] != thermal.shape[2:]:
            raise ShapeError(f"modalities differ in size: {rgb.shape} vs {thermal.shape}")
        fv = self.encoder_visible(rgb)
        ft = self.encoder_thermal(thermal)
        fv, ft = self.mufem(fv, ft)
        return self.scofa(fv, ft)

    def forward(self, rgb: Tensor, thermal: Tensor) -> ForwardResult:
        fused = self.features(rgb, thermal)
        dense = self.decoder(fused, self.config.encoder.total_stride)
        return ForwardResult(dense=dense, fused=fused)
