"""The full network, with the switches used for the ablation rows.

Row (a) is backbone + baseline head. (b) adds the cascade's logits for the focus loss,
(c) also enhances the backbone features with the Focus Map, (d) adds the separated
foreground features onto the origin features, (e) replaces that sum and the
baseline head with domain fusion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .backbone import HierarchicalEncoder
from .config import AblationConfig, ModelConfig
from .focus import BidirectionalCascade
from .fusion import BaselineHead, DomainFusion, enhance_origin
from .separation import Inpainter, separate

ABLATION_ROWS = {
    "a": AblationConfig(focus_loss=False, focus_module=False, separation=False, domain_fusion=False),
    "b": AblationConfig(focus_loss=True, focus_module=False, separation=False, domain_fusion=False),
    "c": AblationConfig(focus_loss=True, focus_module=True, separation=False, domain_fusion=False),
    "d": AblationConfig(focus_loss=True, focus_module=True, separation=True, domain_fusion=False),
    "e": AblationConfig(focus_loss=True, focus_module=True, separation=True, domain_fusion=True),
}


@dataclass
class Output:
    logits: torch.Tensor  # N x 1 x H x W, pre-sigmoid
    fm: torch.Tensor | None = None
    side_logits: list[torch.Tensor] = field(default_factory=list)
    foreground: list[torch.Tensor] | None = None

    @property
    def prob(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)


class FoSp(nn.Module):
    def __init__(self, model: ModelConfig | None = None, ablation: AblationConfig | None = None):
        super().__init__()
        model = model or ModelConfig()
        ablation = ablation or AblationConfig()
        self.ablation = ablation
        self.beta = model.beta
        ch = tuple(model.channels)
        self.backbone = HierarchicalEncoder(ch, model.depths, model.mixer)
        needs_cascade = ablation.focus_loss or ablation.focus_module
        self.cascade = BidirectionalCascade(ch) if needs_cascade else None
        self.inpainter = Inpainter(ch, model.inpainter_width, model.gated) if ablation.separation else None
        self.frozen_inpainter = True
        if ablation.separation and ablation.domain_fusion:
            self.fusion = DomainFusion(ch, model.fuse_channels)
            self.head = None
        else:
            self.fusion = None
            self.head = BaselineHead(ch, model.fuse_channels)

    def set_inpainter_trainable(self, trainable: bool) -> None:
        if self.inpainter is None:
            return
        self.frozen_inpainter = not trainable
        for p in self.inpainter.parameters():
            p.requires_grad_(trainable)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def _foreground(self, image, fm):
        if self.frozen_inpainter:
            self.inpainter.eval()
            with torch.no_grad():
                return separate(image, fm.detach(), self.inpainter, self.beta)
        return separate(image, fm, self.inpainter, self.beta)

    def forward(self, image: torch.Tensor) -> Output:
        size = image.shape[-2:]
        feats = self.backbone(image)
        out = Output(logits=None)
        fm = None
        if self.cascade is not None:
            fm, side = self.cascade(feats)
            out.fm, out.side_logits = fm, side
        origin = enhance_origin(feats, fm) if self.ablation.focus_module else feats
        if self.inpainter is not None:
            if fm is None or not self.ablation.focus_module:
                # extrapolated configuration: no Focus Map, inpaint everywhere
                fm = image.new_ones((image.shape[0], 1, size[0] // 16, size[1] // 16))
            out.foreground = self._foreground(image, fm)
        if self.fusion is not None:
            out.logits = self.fusion(origin, out.foreground, size)
        elif out.foreground is not None:
            out.logits = self.head([o + f for o, f in zip(origin, out.foreground)], size)
        else:
            out.logits = self.head(origin, size)
        return out
