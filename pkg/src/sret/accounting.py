"""Exact parameter and multiply-accumulate accounting.

All tallies are plain Python integers computed symbolically from the
configuration (no tensors are touched) and the equivalency check runs in
rational arithmetic, so nothing in this module rounds.

Conventions: one MAC = one multiply-accumulate ("FLOPs" figures for these
architectures are quoted in this unit). The attention core is 2 * n^2 * d
per full-attention application -- the QK^T product plus the weighted sum of
values -- and slicing into G groups divides it by exactly G:
    core(L, D, [g_1..g_N]) = sum_i 2 * g_i * (L/g_i)^2 * D.
Softmax, scaling and the other per-element attention work are excluded from
the core and reported separately in an auxiliary column, since those terms
are what keeps the recursive grouped form from being literally identical in
cost to one global attention.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Union

from .blocks import hidden_dim
from .model import ModelConfig, SReTModel
from .tensor import ConfigError

CSV_SCHEMA = "layer,params,macs"  # v1


@dataclass
class LayerCost:
    name: str
    params: int = 0
    macs: int = 0
    attn_core_macs: int = 0
    aux_macs: int = 0


@dataclass
class CostReport:
    layers: list[LayerCost] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(l.params for l in self.layers)

    @property
    def total_macs(self) -> int:
        return sum(l.macs for l in self.layers)

    @property
    def attention_core_macs(self) -> int:
        return sum(l.attn_core_macs for l in self.layers)

    @property
    def aux_macs(self) -> int:
        return sum(l.aux_macs for l in self.layers)

    def add(self, name: str, params: int = 0, macs: int = 0, core: int = 0, aux: int = 0):
        self.layers.append(LayerCost(name, params, macs, core, aux))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_SCHEMA.split(","))
            for l in self.layers:
                writer.writerow([l.name, l.params, l.macs])
            writer.writerow(["total", self.total_params, self.total_macs])

    def format_table(self) -> str:
        rows = [("layer", "params", "macs", "attn core", "aux ops")]
        for l in self.layers:
            rows.append((l.name, f"{l.params:,}", f"{l.macs:,}",
                         f"{l.attn_core_macs:,}" if l.attn_core_macs else "",
                         f"{l.aux_macs:,}" if l.aux_macs else ""))
        rows.append(("total", f"{self.total_params:,}", f"{self.total_macs:,}",
                     f"{self.attention_core_macs:,}", f"{self.aux_macs:,}"))
        widths = [max(len(r[i]) for r in rows) for i in range(5)]
        lines = []
        for i, r in enumerate(rows):
            lines.append("  ".join(c.ljust(widths[j]) if j == 0 else c.rjust(widths[j])
                                   for j, c in enumerate(r)))
            if i == 0:
                lines.append("-" * len(lines[0]))
        summary = (
            f"params: {self.total_params / 1e6:.3f} M   "
            f"macs: {self.total_macs / 1e9:.3f} B"
        )
        return "\n".join(lines) + "\n" + summary


def count_params(model: Union[SReTModel, "object"]) -> int:
    """Element count over the parameter registry; shared weights count once."""
    return sum(t.size for t in model.registry.values())


def attention_core_cost(seq_len: int, dim: int, group_counts: Iterable[int]) -> int:
    """Exact core MACs of a recursive attention stack: QK^T plus attn @ V.

    One full application costs 2 * L^2 * D; a G-way sliced application costs
    1/G of that; the naive recursive case is the all-ones schedule.
    """
    total = 0
    for g in group_counts:
        if g < 1 or seq_len % g:
            raise ConfigError(f"group count {g} does not divide sequence length {seq_len}")
        total += 2 * g * (seq_len // g) ** 2 * dim
    return total


@dataclass
class TheoremResult:
    ratio: Fraction
    expected: Fraction
    holds: bool


def verify_theorem1(seq_len: int, dim: int, recursions: int, groups: int) -> TheoremResult:
    """Check that N recursions of G-way sliced attention cost exactly N/G of
    one global attention (so N == G reproduces the global cost).

    The equivalence is analytic -- each G-way application costs 2 * L^2/G * D
    -- so the check runs in rational arithmetic and does not require G to
    divide L. Whenever G does divide L the ratio coincides exactly with the
    integer :func:`attention_core_cost` ratio.
    """
    if groups < 1:
        raise ConfigError("groups must be >= 1")
    if recursions < 1:
        raise ConfigError("recursions must be >= 1")
    if seq_len < 1 or dim < 1:
        raise ConfigError("sequence length and dim must be positive")
    vanilla = Fraction(2 * seq_len * seq_len * dim)
    sliced = recursions * vanilla / groups
    ratio = sliced / vanilla
    expected = Fraction(recursions, groups)
    return TheoremResult(ratio=ratio, expected=expected, holds=ratio == expected)


# ---------------------------------------------------------------------------
# Whole-model walk
# ---------------------------------------------------------------------------


def count_macs(model_or_config, input_resolution: int | None = None) -> CostReport:
    """Per-layer exact params/MACs for a model, walked symbolically.

    Linear layers cost tokens * d_in * d_out; convolutions cost
    out_elems * k^2 * c_in / groups; norms, GELU, GAP and the softmax/scale
    work inside attention carry no core MACs (the latter lands in the aux
    column)."""
    cfg: ModelConfig = getattr(model_or_config, "config", model_or_config)
    if input_resolution is not None and input_resolution != cfg.input_resolution:
        cfg = replace(cfg, input_resolution=input_resolution)
    cfg.validate()
    if cfg.variant == "sret":
        return _pyramid_report(cfg)
    if cfg.variant == "deit_baseline":
        return _baseline_report(cfg)
    return _mixer_report(cfg)


def _block_rows(report: CostReport, prefix: str, n: int, d: int, heads: int,
                groups: list[int], ffn_ratio: float, nll_ratio: float,
                nll_count: int, use_lrc: bool) -> None:
    recs = len(groups)
    report.add(f"{prefix}.attn.qkv", params=d * 3 * d + 3 * d, macs=recs * n * d * 3 * d)
    core = attention_core_cost(n, d, groups)
    aux = 2 * sum(heads * g * (n // g) ** 2 for g in groups)
    report.add(f"{prefix}.attn.core", macs=core, core=core, aux=aux)
    report.add(f"{prefix}.attn.proj", params=d * d + d, macs=recs * n * d * d)
    report.add(f"{prefix}.norms", params=4 * d)
    if use_lrc:
        report.add(f"{prefix}.lrc", params=4)
    h = hidden_dim(ffn_ratio, d)
    report.add(f"{prefix}.ffn", params=d * h + h + h * d + d, macs=recs * 2 * n * d * h)
    nh = hidden_dim(nll_ratio, d)
    for i in range(nll_count):
        report.add(
            f"{prefix}.nll{i}",
            params=2 * d + (d * nh + nh + nh * d + d) + 2,
            macs=2 * n * d * nh,
        )


def _pyramid_report(cfg: ModelConfig) -> CostReport:
    report = CostReport()
    tokens = cfg.stage_tokens()
    r = cfg.input_resolution
    cin = 3
    for i, cout in enumerate(cfg.stem_channels, start=1):
        side = r // (2**i)
        report.add(
            f"stem.conv{i}",
            params=cout * cin * 9 + cout,
            macs=side * side * cout * 9 * cin,
        )
        report.add(f"stem.bn{i}", params=2 * cout)
        cin = cout
    report.add("pos_embed", params=tokens[0] * cfg.stage_dims[0])
    for s, (d, blocks, heads) in enumerate(
        zip(cfg.stage_dims, cfg.stage_blocks, cfg.heads_per_stage)
    ):
        n = tokens[s]
        for k in range(blocks):
            _block_rows(
                report,
                f"stage{s + 1}.block{k}",
                n,
                d,
                heads,
                list(cfg.group_schedule.stages[s]),
                cfg.ffn_ratio,
                cfg.nll_ratio,
                cfg.nll_count_per_block(),
                cfg.use_lrc,
            )
        if s < len(cfg.stage_dims) - 1:
            to = cfg.stage_dims[s + 1]
            out_elems = tokens[s + 1] * to
            report.add(f"pool{s + 1}", params=to * 9 + to, macs=out_elems * 9)
            report.add(f"pool{s + 1}.bn", params=2 * to)
    d_last = cfg.stage_dims[-1]
    report.add("head", params=d_last * cfg.num_classes + cfg.num_classes,
               macs=d_last * cfg.num_classes)
    return report


def _baseline_report(cfg: ModelConfig) -> CostReport:
    report = CostReport()
    d = cfg.stage_dims[0]
    n = cfg.stage_tokens()[0]
    patch_in = 3 * cfg.patch_size**2
    report.add("patch_embed", params=patch_in * d + d, macs=n * patch_in * d)
    report.add("pos_embed", params=n * d)
    for k in range(cfg.stage_blocks[0]):
        _block_rows(
            report,
            f"block{k}",
            n,
            d,
            cfg.heads_per_stage[0],
            list(cfg.group_schedule.stages[0]),
            cfg.ffn_ratio,
            cfg.nll_ratio,
            cfg.nll_count_per_block(),
            cfg.use_lrc,
        )
    report.add("final_norm", params=2 * d)
    report.add("head", params=d * cfg.num_classes + cfg.num_classes,
               macs=d * cfg.num_classes)
    return report


def _mixer_report(cfg: ModelConfig) -> CostReport:
    report = CostReport()
    c = cfg.stage_dims[0]
    s = cfg.stage_tokens()[0]
    ds, dc = cfg.mixer_token_hidden, cfg.mixer_channel_hidden
    recs = cfg.recursions_per_block
    patch_in = 3 * cfg.patch_size**2
    report.add("patch_embed", params=patch_in * c + c, macs=s * patch_in * c)
    for k in range(cfg.stage_blocks[0]):
        report.add(f"block{k}.norms", params=4 * c)
        report.add(f"block{k}.token_mix", params=s * ds + ds * s,
                   macs=recs * 2 * c * s * ds)
        report.add(f"block{k}.channel_mix", params=c * dc + dc * c,
                   macs=recs * 2 * s * c * dc)
    report.add("final_norm", params=2 * c)
    report.add("head", params=c * cfg.num_classes + cfg.num_classes,
               macs=c * cfg.num_classes)
    return report
