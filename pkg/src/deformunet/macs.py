"""Analytical multiply-accumulate estimator.

Counts only true multiply-accumulate work: convolutions as
k^2*Cin*Cout*H'*W', linear maps as M*K*N, attention score/context
products per window, the offset-network convolutions, and bilinear
sampling at 4 MACs per sampled channel-point. Normalizations, softmax,
and GeLU count as zero.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import List, Optional, Tuple

from .blocks import MLP_EXPANSION
from .fileio import atomic_write_text
from .model import ModelConfig


@dataclass
class MacsEntry:
    name: str
    macs: int


@dataclass
class MacsReport:
    config_name: str
    input_extent: Tuple[int, int]
    entries: List[MacsEntry]

    @property
    def total(self) -> int:
        return sum(e.macs for e in self.entries)

    @property
    def total_giga(self) -> float:
        return self.total / 1e9

    def block_totals(self) -> List[Tuple[str, int]]:
        order: List[str] = []
        sums: dict = {}
        for e in self.entries:
            key = e.name.split(".", 1)[0]
            if key not in sums:
                order.append(key)
                sums[key] = 0
            sums[key] += e.macs
        return [(k, sums[k]) for k in order]

    def as_table(self) -> str:
        width = max(len(e.name) for e in self.entries)
        lines = [f"{'layer':<{width}}  {'MACs':>16}  {'G':>10}"]
        lines.append("-" * (width + 30))
        for e in self.entries:
            lines.append(f"{e.name:<{width}}  {e.macs:>16}  {e.macs / 1e9:>10.4f}")
        lines.append("-" * (width + 30))
        lines.append(f"{'total':<{width}}  {self.total:>16}  {self.total_giga:>10.2f}")
        return "\n".join(lines)

    def as_kv_text(self) -> str:
        lines = [f"config = {self.config_name}",
                 f"input_extent = {self.input_extent[0]}x{self.input_extent[1]}"]
        lines += [f"{e.name} = {e.macs}" for e in self.entries]
        lines.append(f"total = {self.total}")
        lines.append(f"total_giga = {self.total_giga:.6f}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        atomic_write_text(path, self.as_kv_text())


def macs_estimate(cfg: ModelConfig, extent: Optional[int] = None,
                  name: str = "") -> MacsReport:
    """Per-layer MAC counts for one forward pass at batch 1."""
    if extent is not None:
        cfg = dataclasses.replace(cfg, input_extent=(int(extent), int(extent)))
    h, w = cfg.input_extent
    s = cfg.patch_size
    c1 = cfg.channels[0]
    h0, w0 = h // s, w // s
    entries: List[MacsEntry] = []

    entries.append(MacsEntry("input_module", s * s * 1 * c1 * h0 * w0))

    for stage in cfg.stage_plan():
        bid = stage["id"]
        c = stage["channels"]
        heads = stage["heads"]
        hh, ww = stage["resolution"]
        n = hh * ww
        dense = stage["kind"] == "D"
        wh = hh if dense else cfg.window
        wwd = ww if dense else cfg.window
        r = cfg.downsample
        n_w = 1 if dense else n // (wh * wwd)
        p = (wh // r) * (wwd // r)
        d = c // heads
        q = wh * wwd

        for j in range(cfg.layers):
            pre = f"{bid}.layer{j}"
            proj = 2 * n * c * c + 2 * n_w * p * c * c      # Q,O on q tokens; K,V on sampled
            entries.append(MacsEntry(f"{pre}.attn_proj", proj))
            entries.append(MacsEntry(f"{pre}.attn_scores", n_w * q * p * c))
            entries.append(MacsEntry(f"{pre}.attn_context", n_w * q * p * c))
            if cfg.offsets_enabled:
                entries.append(MacsEntry(f"{pre}.offset_net", n_w * (25 * d * p + 2 * d * p)))
                entries.append(MacsEntry(f"{pre}.sampling", n_w * 2 * 4 * c * p))
            entries.append(MacsEntry(f"{pre}.mlp", 2 * MLP_EXPANSION * n * c * c))

        if stage["direction"] == "down":
            resample = (n // 4) * (4 * c) * (2 * c)
            conv = 9 * (2 * c) * (2 * c) * (n // 4)
        else:
            resample = n * c * (2 * c)
            conv = 9 * (c // 2) * (c // 2) * (4 * n)
        entries.append(MacsEntry(f"{bid}.resample_main", resample))
        entries.append(MacsEntry(f"{bid}.resample_short", resample))
        entries.append(MacsEntry(f"{bid}.conv", conv))

    plan = {st["id"]: st for st in cfg.stage_plan()}
    for bid, fuse_name in (("D2", "fuse_d2"), ("D1", "fuse_d1")):
        st = plan[bid]
        n = st["resolution"][0] * st["resolution"][1]
        c = st["channels"]
        entries.append(MacsEntry(fuse_name, n * (2 * c) * c))

    entries.append(MacsEntry("utm_conv", 9 * c1 * c1 * h0 * w0))
    entries.append(MacsEntry("om_pre_shuffle", h0 * w0 * c1 * (s * s * c1)))
    entries.append(MacsEntry("om_final", 9 * c1 * 1 * h * w))

    return MacsReport(config_name=name or cfg.block_pattern,
                      input_extent=(h, w), entries=entries)
