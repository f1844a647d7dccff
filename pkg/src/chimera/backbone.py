"""Trainable convolutional backbone producing a stride-4 dense feature map."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass
class DenseFeatureMap:
    """Channel-last dense features: data is B x H' x W' x C at a fixed stride."""

    data: torch.Tensor
    stride: int


class Backbone(nn.Module):
    """Three 3x3 conv stages with GELU, overall spatial stride 4.

    Input is B x 3 x H x W in [0, 1]; output is channel-last so downstream
    token-style ops can flatten spatial positions without permutes.
    """

    def __init__(self, out_channels: int = 64):
        super().__init__()
        widths = (16, 32, out_channels)
        strides = (2, 2, 1)
        layers = []
        c_in = 3
        for c_out, s in zip(widths, strides):
            layers += [nn.Conv2d(c_in, c_out, kernel_size=3, stride=s, padding=1), nn.GELU()]
            c_in = c_out
        self.stages = nn.Sequential(*layers)
        self.out_channels = out_channels
        self.stride = 4

    def forward(self, images: torch.Tensor) -> DenseFeatureMap:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected B x 3 x H x W, got {tuple(images.shape)}")
        if images.shape[2] % self.stride or images.shape[3] % self.stride:
            raise ValueError(
                f"spatial dims {tuple(images.shape[2:])} not divisible by stride {self.stride}")
        x = self.stages(images)
        return DenseFeatureMap(data=x.permute(0, 2, 3, 1), stride=self.stride)

    def stage_outputs(self, images: torch.Tensor) -> list[torch.Tensor]:
        """Post-activation output of each conv stage, channel-last."""
        outs = []
        x = images
        for layer in self.stages:
            x = layer(x)
            if isinstance(layer, nn.GELU):
                outs.append(x.permute(0, 2, 3, 1))
        return outs
