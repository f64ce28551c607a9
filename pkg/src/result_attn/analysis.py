"""Model accounting and diagnostics.

* Parameter counts per layer (exact, trainable parameters).
* Multiply-accumulate counts for one forward pass at a fixed input shape.
  Convention: convolutions cost k_h * k_w * (C_in / groups) * C_out * H_out
  * W_out, linear layers cost in * out per row; batch norm, activations,
  pooling and elementwise ops cost zero.
* Per-module channel-attention spread: for every attention block in a
  stage, the standard deviation of the gate vector across channels
  (population convention), averaged over a batch of inputs.
* Metrics CSV plus rendered error-curve plots.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .blocks import SqueezeExcite
from .models import SEResNet
from .training import TrainingHistory, append_metrics_row


@dataclass
class LayerRow:
    name: str
    kind: str
    params: int
    macs: int


@dataclass
class AccountingReport:
    rows: list[LayerRow]

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def format_table(self) -> str:
        width = max([len(r.name) for r in self.rows] + [len("TOTAL")])
        lines = [f"{'layer':<{width}}  {'kind':<12} {'params':>12} {'macs':>14}"]
        for r in self.rows:
            lines.append(f"{r.name:<{width}}  {r.kind:<12} {r.params:>12,} {r.macs:>14,}")
        lines.append(f"{'TOTAL':<{width}}  {'':<12} {self.total_params:>12,} {self.total_macs:>14,}")
        return "\n".join(lines)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["layer", "kind", "params", "macs"])
            for r in self.rows:
                writer.writerow([r.name, r.kind, r.params, r.macs])


def _leaf_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters(recurse=False) if p.requires_grad)


def profile_model(model: nn.Module, input_shape: tuple[int, ...] | None = None) -> AccountingReport:
    """Per-layer parameter counts, plus MACs when an input shape is given.

    MACs are measured by tracing one forward pass in eval mode, so a module
    invoked several times accumulates each call.
    """
    macs: dict[str, int] = {}
    handles = []
    if input_shape is not None:
        if len(input_shape) != 4 or input_shape[1] != 3:
            raise ValueError(f"input shape must be (B, 3, H, W), got {input_shape}")

        def conv_hook(name):
            def hook(mod, inputs, output):
                kh, kw = mod.kernel_size
                per_position = kh * kw * (mod.in_channels // mod.groups) * mod.out_channels
                macs[name] = macs.get(name, 0) + per_position * output.shape[-2] * output.shape[-1]
            return hook

        def linear_hook(name):
            def hook(mod, inputs, output):
                rows = inputs[0].numel() // mod.in_features
                macs[name] = macs.get(name, 0) + rows * mod.in_features * mod.out_features
            return hook

        for name, mod in model.named_modules():
            if isinstance(mod, nn.Conv2d):
                handles.append(mod.register_forward_hook(conv_hook(name)))
            elif isinstance(mod, nn.Linear):
                handles.append(mod.register_forward_hook(linear_hook(name)))
        was_training = model.training
        model.eval()
        try:
            with torch.no_grad():
                model(torch.zeros(input_shape))
        finally:
            for h in handles:
                h.remove()
            if was_training:
                model.train()

    rows = []
    for name, mod in model.named_modules():
        if list(mod.children()):
            continue  # only leaves carry parameters directly
        params = _leaf_params(mod)
        layer_macs = macs.get(name, 0)
        if params or layer_macs:
            rows.append(LayerRow(name or "(root)", type(mod).__name__, params, layer_macs))
    return AccountingReport(rows)


def count_params(model: nn.Module) -> AccountingReport:
    """Exact trainable-parameter count per layer and in total."""
    return profile_model(model)


def count_macs(model: nn.Module, input_shape: tuple[int, ...] = (1, 3, 32, 32)) -> AccountingReport:
    """Multiply-accumulates for one forward pass at the given input shape."""
    return profile_model(model, input_shape)


@dataclass
class AttentionStdSeries:
    """Mean-over-batch channel std of the attention gates, per module."""

    rows: list[tuple[str, float]]
    batch_size: int

    @property
    def min_module(self) -> tuple[str, float]:
        return min(self.rows, key=lambda r: r[1])

    @property
    def max_module(self) -> tuple[str, float]:
        return max(self.rows, key=lambda r: r[1])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["module", "mean_std"])
            for name, value in self.rows:
                writer.writerow([name, value])


def channel_std(gates: torch.Tensor) -> torch.Tensor:
    """Population std across channels, one value per batch row."""
    return gates.std(dim=-1, unbiased=False)


def attention_std_report(model: SEResNet, batch: torch.Tensor, stage: int) -> AttentionStdSeries:
    """Capture every attention gate in one stage over a batch of inputs.

    For each block the gate vector s is recorded per input; the report holds
    the per-input std across channels averaged over the batch.
    """
    if not 1 <= stage <= len(model.stages):
        raise ValueError(f"stage must be in [1, {len(model.stages)}], got {stage}")
    stage_module = model.stages[stage - 1]
    targets = [
        (f"stage{stage}.{name}", mod)
        for name, mod in stage_module.named_modules()
        if isinstance(mod, SqueezeExcite)
    ]
    if not targets:
        raise ValueError(f"stage {stage} contains no attention blocks")

    captured: dict[str, torch.Tensor] = {}
    handles = []
    for name, se in targets:
        def hook(mod, inputs, output, name=name):
            captured[name] = torch.sigmoid(output.detach())
        handles.append(se.fc2.register_forward_hook(hook))

    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(batch)
    finally:
        for h in handles:
            h.remove()
        if was_training:
            model.train()

    rows = [(name, channel_std(captured[name]).mean().item()) for name, _ in targets]
    return AttentionStdSeries(rows, batch_size=batch.shape[0])


def emit_curves(history: TrainingHistory, out_dir, label: str = "run") -> tuple[Path, Path]:
    """Write the metrics CSV plus an error-rate-vs-epoch plot.

    The CSV is the source of truth; the plot is a rendering of it.
    """
    if not history:
        raise ValueError("history is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "metrics.csv"
    if csv_path.exists():
        csv_path.unlink()
    for record in history:
        append_metrics_row(csv_path, record)
    png_path = out_dir / "error_curves.png"
    plot_error_curves({label: history}, png_path)
    return csv_path, png_path


def plot_error_curves(histories: dict[str, TrainingHistory], path) -> Path:
    """Overlay test-error curves (one labeled series per history)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5), dpi=120)
    for label, history in histories.items():
        epochs = [r.epoch for r in history]
        ax.plot(epochs, [r.test_err for r in history], label=f"{label} test")
        ax.plot(epochs, [r.train_err for r in history], linestyle="--", alpha=0.6, label=f"{label} train")
    ax.set_xlabel("epoch")
    ax.set_ylabel("error rate (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)
