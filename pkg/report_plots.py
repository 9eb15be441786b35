#!/usr/bin/env python3
"""
Report figures: token K-S divergence curve, sensitivity heat-map and
ablation error bars grouped by bit setting.
"""

import logging
import os
import re
from typing import Dict, List, Optional, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from mb_clora import Tier  # noqa: E402
from mixed_precision import SensitivityTable  # noqa: E402
from recon_engine import TierPartition  # noqa: E402

logger = logging.getLogger(__name__)


class ReportPlotter:
    def __init__(self, output_dir: str = "report"):
        self.output_dir = output_dir
        os.makedirs(self.output_dir, exist_ok=True)

        # Bit tiers and figure chrome
        self.colors = {
            Tier.LOW: '#c2410c',
            Tier.MID: '#ca8a04',
            Tier.HIGH: '#047857',
            'ks': '#6d28d9',
            'figure': '#fbfaf7',
            'text': '#1c1917',
        }
        # One color per ablation arm, in study order
        self.arm_colors = ['#57534e', '#0369a1', '#be185d', '#4d7c0f', '#7c2d12', '#312e81']

    def _save(self, fig, name: str) -> str:
        path = os.path.join(self.output_dir, name)
        fig.tight_layout()
        fig.savefig(path, dpi=150, bbox_inches='tight', facecolor=self.colors['figure'])
        plt.close(fig)
        logger.info("Saved figure %s", path)
        return path

    def plot_token_divergence(self, report: List[Tuple[int, float]], title: str = "Token divergence") -> str:
        """
        Plots per-token K-S statistics sorted in descending order.

        Args:
            report: (token index, statistic) pairs, largest first
            title: Figure title

        Returns:
            Path to the saved PNG
        """
        stats = np.array([s for _, s in report], dtype=np.float64)
        fig, ax = plt.subplots(1, 1, figsize=(8, 4))
        fig.patch.set_facecolor(self.colors['figure'])
        ax.plot(np.arange(len(stats)), stats, color=self.colors['ks'], linewidth=2)
        ax.fill_between(np.arange(len(stats)), stats, color=self.colors['ks'], alpha=0.15)
        ax.set_xlabel("Token (sorted by K-S statistic)")
        ax.set_ylabel("K-S statistic")
        ax.set_ylim(0, 1)
        ax.set_title(title, fontweight='bold', color=self.colors['text'])
        ax.grid(alpha=0.3)
        return self._save(fig, "token_ks.png")

    def plot_sensitivity_heatmap(self, table: SensitivityTable) -> str:
        fig, ax = plt.subplots(1, 1, figsize=(1.2 * len(table.bits) + 3, 0.35 * len(table.layers) + 2))
        fig.patch.set_facecolor(self.colors['figure'])
        # log scale keeps 8-bit scores visible next to 2-bit ones
        shown = np.log10(np.maximum(table.scores, 1e-12))
        image = ax.imshow(shown, aspect='auto', cmap='viridis')
        ax.set_xticks(range(len(table.bits)))
        ax.set_xticklabels([f"{b}-bit" for b in table.bits])
        ax.set_yticks(range(len(table.layers)))
        ax.set_yticklabels(table.layers, fontsize=8)
        ax.set_title("Layer sensitivity (log10 KL)", fontweight='bold', color=self.colors['text'])
        fig.colorbar(image, ax=ax)
        return self._save(fig, "sensitivity.png")

    def plot_bit_errors(
        self, frame: pd.DataFrame, name: str = "bit_errors.png", partition: Optional[TierPartition] = None
    ) -> str:
        """
        Grouped bars: one group per bit setting, one bar per ablation arm.

        Args:
            frame: ``run_ablation`` table, an ``arm`` column plus one column per
                bit setting (``W4A4``, ``W3A16``, ...)
            name: Output file name
            partition: When given, each group is shaded with its tier color

        Returns:
            Path to the saved PNG
        """
        settings = [c for c in frame.columns if c != "arm"]
        width = 0.8 / max(len(frame), 1)
        fig, ax = plt.subplots(1, 1, figsize=(max(6, 1.5 * len(settings)), 4))
        fig.patch.set_facecolor(self.colors['figure'])
        x = np.arange(len(settings))
        if partition is not None:
            for i, setting in enumerate(settings):
                b = int(re.match(r"W(\d+)", setting).group(1))
                center = i + width * (len(frame) - 1) / 2
                ax.axvspan(center - 0.5, center + 0.5, color=self.colors[partition.tier_of(b)], alpha=0.08)
        for i, (_, row) in enumerate(frame.iterrows()):
            color = self.arm_colors[i % len(self.arm_colors)]
            ax.bar(x + i * width, [row[s] for s in settings], width, label=row["arm"], color=color)
        ax.set_xticks(x + width * (len(frame) - 1) / 2)
        ax.set_xticklabels(settings)
        ax.set_ylabel("MAE vs full precision")
        ax.legend(fontsize=8)
        ax.grid(axis='y', alpha=0.3)
        return self._save(fig, name)

    def generate_all(
        self,
        report: List[Tuple[int, float]],
        table: Optional[SensitivityTable] = None,
    ) -> Dict[str, str]:
        """Writes the token K-S curve and, when a table is given, the sensitivity heat-map."""
        paths = {"token_ks": self.plot_token_divergence(report)}
        if table is not None:
            paths["sensitivity"] = self.plot_sensitivity_heatmap(table)
        return paths
