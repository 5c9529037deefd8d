"""Exact training-cost accounting and the epoch-time estimator.

All FLOP counts are Python integers (unbounded), never floats, so totals,
differences, and ratio checks are exact at any scale. Counting convention,
applied uniformly:

* one multiply-add = 2 FLOPs;
* dense layer, per sample: 2*in*out + out (the +out is the bias adds);
* conv2d, per sample: (2*in_ch*kh*kw)*out_ch*h_out*w_out + out_ch*h_out*w_out;
* relu and flatten: 1 FLOP per output element;
* maxpool2d: kernel*kernel - 1 comparisons per output element.

A backward pass over a trained layer is charged at exactly twice its
forward cost. A frozen backbone is charged forward cost only: the forward
pass still runs every epoch, while its backward cost is zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .schedule import ScheduleSpec, phase_freeze_signal, BACKBONE_UNFROZEN

__all__ = [
    "GROUPS",
    "LayerFlopsSpec",
    "EpochFlopsRecord",
    "FlopsLedger",
    "TimeModel",
    "layer_forward_flops",
    "total_flops",
    "delta_flops",
    "estimate_training_time",
    "write_ledger_csv",
    "read_ledger_csv",
]

GROUPS = ("backbone", "neck", "head")

BACKWARD_FORWARD_RATIO = 2  # backward cost assumed twice the forward cost


@dataclass(frozen=True)
class LayerFlopsSpec:
    layer_id: int
    group: str
    forward_flops_per_sample: int

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValueError(f"unknown group {self.group!r}")
        if self.forward_flops_per_sample < 0:
            raise ValueError("forward_flops_per_sample must be >= 0")


def layer_forward_flops(layer, input_shape: Sequence[int]) -> int:
    """Exact forward FLOPs of one layer for a single sample.

    `layer` provides `kind` and the hyperparameters for that kind (see
    model.Layer); `input_shape` is the per-sample input shape, without the
    batch axis.
    """
    kind = layer.kind
    input_shape = tuple(int(s) for s in input_shape)
    if kind == "dense":
        if len(input_shape) != 1 or input_shape[0] != layer.in_features:
            raise ValueError(f"dense layer expects shape ({layer.in_features},), got {input_shape}")
        return 2 * layer.in_features * layer.out_features + layer.out_features
    if kind == "conv2d":
        if len(input_shape) != 3 or input_shape[0] != layer.in_channels:
            raise ValueError(f"conv2d layer expects shape ({layer.in_channels}, H, W), got {input_shape}")
        _, h, w = input_shape
        k, s = layer.kernel, layer.stride
        if h < k or w < k:
            raise ValueError(f"conv2d input {input_shape} smaller than kernel {k}")
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        cells = layer.out_channels * ho * wo
        return (2 * layer.in_channels * k * k) * cells + cells
    if kind == "relu":
        return _element_count(input_shape)
    if kind == "flatten":
        return _element_count(input_shape)
    if kind == "maxpool2d":
        if len(input_shape) != 3:
            raise ValueError(f"maxpool2d layer expects shape (C, H, W), got {input_shape}")
        c, h, w = input_shape
        k, s = layer.kernel, layer.stride
        if h < k or w < k:
            raise ValueError(f"maxpool2d input {input_shape} smaller than window {k}")
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        return (k * k - 1) * c * ho * wo
    raise ValueError(f"no FLOPs rule for layer kind {kind!r}")


def _element_count(shape: Sequence[int]) -> int:
    n = 1
    for s in shape:
        n *= int(s)
    return n


@dataclass(frozen=True)
class EpochFlopsRecord:
    epoch: int
    frozen: int  # freeze signal actually applied, 0 or 1
    n_samples: int
    forward: dict  # group -> int
    backward: dict  # group -> int

    def total(self) -> int:
        return sum(self.forward.values()) + sum(self.backward.values())


class FlopsLedger:
    """Per-epoch, per-group FLOP records for one training run.

    The model signature (per-layer forward cost and group) is fixed at
    construction so that two ledgers can be compared only when they
    describe the same model.
    """

    def __init__(self, model: Optional[Iterable[LayerFlopsSpec]] = None):
        self.records: list[EpochFlopsRecord] = []
        self._epochs: set[int] = set()
        if model is None:
            self.model_signature = None
        else:
            self.model_signature = tuple(
                (spec.layer_id, spec.group, spec.forward_flops_per_sample) for spec in model
            )

    def record_epoch(self, epoch: int, freeze: int, model: Sequence[LayerFlopsSpec], n_samples: int) -> None:
        """Charge one epoch: every group pays forward cost for N samples;
        neck and head always pay backward; the backbone pays backward only
        when the epoch is unfrozen."""
        if epoch in self._epochs:
            raise ValueError(f"epoch {epoch} already recorded")
        if freeze not in (0, 1):
            raise ValueError(f"freeze signal must be 0 or 1, got {freeze!r}")
        if n_samples < 0:
            raise ValueError(f"n_samples must be >= 0, got {n_samples}")
        signature = tuple((s.layer_id, s.group, s.forward_flops_per_sample) for s in model)
        if self.model_signature is None:
            self.model_signature = signature
        elif signature != self.model_signature:
            raise ValueError("model spec does not match the one this ledger was built for")

        fwd = {g: 0 for g in GROUPS}
        bwd = {g: 0 for g in GROUPS}
        for spec in model:
            per_epoch = n_samples * spec.forward_flops_per_sample
            fwd[spec.group] += per_epoch
            if spec.group != "backbone" or freeze == BACKBONE_UNFROZEN:
                bwd[spec.group] += BACKWARD_FORWARD_RATIO * per_epoch
        self.records.append(EpochFlopsRecord(epoch, freeze, n_samples, fwd, bwd))
        self._epochs.add(epoch)

    def total_flops(self) -> int:
        return sum(r.total() for r in self.records)

    def cumulative_totals(self) -> list[int]:
        out, running = [], 0
        for r in self.records:
            running += r.total()
            out.append(running)
        return out

    def _comparison_key(self):
        # Neck and head are aggregated because the CSV export only keeps
        # their sum; a ledger read back from disk must still compare equal.
        ordered = sorted(self.records, key=lambda r: r.epoch)
        return tuple(
            (r.epoch, r.n_samples, r.forward["backbone"], r.forward["neck"] + r.forward["head"])
            for r in ordered
        )


def total_flops(ledger: FlopsLedger) -> int:
    return ledger.total_flops()


def delta_flops(candidate: FlopsLedger, baseline: FlopsLedger) -> int:
    """total(candidate) - total(baseline); negative means savings.

    Both ledgers must describe the same run shape: identical epochs,
    per-epoch sample counts, and per-epoch forward costs (freeze flags are
    exactly what is allowed to differ).
    """
    if candidate._comparison_key() != baseline._comparison_key():
        raise ValueError("ledgers describe different runs (model, epochs, or sample counts differ)")
    if candidate.model_signature is not None and baseline.model_signature is not None:
        if candidate.model_signature != baseline.model_signature:
            raise ValueError("ledgers describe different models")
    return candidate.total_flops() - baseline.total_flops()


@dataclass(frozen=True)
class TimeModel:
    """Measured minutes per epoch with the backbone trained vs frozen."""

    minutes_unfrozen: float = 23.0
    minutes_frozen: float = 16.0

    def __post_init__(self):
        if self.minutes_unfrozen <= 0 or self.minutes_frozen <= 0:
            raise ValueError("epoch times must be > 0")
        if self.minutes_frozen > self.minutes_unfrozen:
            raise ValueError("a frozen epoch cannot be slower than an unfrozen one")


def estimate_training_time(tm: TimeModel, spec: ScheduleSpec, total_epochs: int) -> float:
    """Total training minutes: each epoch costs the frozen or unfrozen
    per-epoch time according to the schedule."""
    if total_epochs < 1:
        raise ValueError(f"total_epochs must be >= 1, got {total_epochs}")
    minutes = 0.0
    for epoch in range(total_epochs):
        if phase_freeze_signal(epoch, spec) == BACKBONE_UNFROZEN:
            minutes += tm.minutes_unfrozen
        else:
            minutes += tm.minutes_frozen
    return minutes


LEDGER_COLUMNS = ("epoch", "frozen", "n_samples", "fwd_backbone", "bwd_backbone", "fwd_rest", "bwd_rest", "cum_total")


def write_ledger_csv(ledger: FlopsLedger, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LEDGER_COLUMNS)
        running = 0
        for r in ledger.records:
            running += r.total()
            writer.writerow(
                [
                    r.epoch,
                    r.frozen,
                    r.n_samples,
                    r.forward["backbone"],
                    r.backward["backbone"],
                    r.forward["neck"] + r.forward["head"],
                    r.backward["neck"] + r.backward["head"],
                    running,
                ]
            )


def read_ledger_csv(path) -> FlopsLedger:
    """Rebuild a ledger from its CSV export.

    The neck/head split is not recoverable from the file (they are exported
    as a combined "rest" column), so the loaded records carry the combined
    value under "head". Totals and run-shape comparisons are unaffected.
    """
    ledger = FlopsLedger()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != LEDGER_COLUMNS:
            raise ValueError(f"unexpected ledger header in {path}: {header}")
        for row in reader:
            epoch, frozen, n = int(row[0]), int(row[1]), int(row[2])
            fwd = {"backbone": int(row[3]), "neck": 0, "head": int(row[5])}
            bwd = {"backbone": int(row[4]), "neck": 0, "head": int(row[6])}
            if epoch in ledger._epochs:
                raise ValueError(f"duplicate epoch {epoch} in {path}")
            ledger.records.append(EpochFlopsRecord(epoch, frozen, n, fwd, bwd))
            ledger._epochs.add(epoch)
    return ledger
