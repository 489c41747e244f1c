"""Parameter and multiply-accumulate accounting for the segmentation network.

MACs cover convolutions only (normalization, activations, pooling and resizing
are not multiply-accumulate work in this accounting). A dilated convolution
costs the same as an undilated one of equal kernel size and output size, since
only the tap spacing changes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .model import OUTPUT_STRIDE, ModelConfig, block_specs, conv_specs
from .tensor import ShapeError, conv_output_size


def regular_conv_macs(out_h: int, out_w: int, k: int, c_in: int, c_out: int, groups: int = 1) -> int:
    return out_h * out_w * k * k * (c_in // groups) * c_out


def separable_conv_macs(out_h: int, out_w: int, k: int, c_in: int, c_out: int) -> int:
    """Depthwise k x k stage plus 1x1 pointwise stage."""
    return out_h * out_w * c_in * k * k + out_h * out_w * c_in * c_out


def separable_ratio(c_out: int, k: int) -> float:
    """Closed form of separable / regular MACs."""
    return 1.0 / c_out + 1.0 / (k * k)


@dataclass
class LayerOps:
    name: str
    kind: str
    params: int
    macs: int
    out_h: int = 0
    out_w: int = 0


@dataclass
class SeparableComparison:
    name: str
    c_in: int
    c_out: int
    k: int
    out_h: int
    out_w: int
    separable_macs: int
    regular_macs: int
    ratio: float
    formula_ratio: float


@dataclass
class OpCountReport:
    input_h: int
    input_w: int
    rows: list = field(default_factory=list)
    comparisons: list = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "input_h": self.input_h,
            "input_w": self.input_w,
            "rows": [asdict(r) for r in self.rows],
            "comparisons": [asdict(c) for c in self.comparisons],
            "total_params": self.total_params,
            "total_macs": self.total_macs,
        }

    def format_table(self) -> str:
        lines = [f"input {self.input_h}x{self.input_w}"]
        width = max(len(r.name) for r in self.rows)
        lines.append(f"{'layer':<{width}}  {'kind':<9}  {'out':>9}  {'params':>9}  {'MACs':>13}")
        for r in self.rows:
            out = f"{r.out_h}x{r.out_w}" if r.out_h else "-"
            lines.append(f"{r.name:<{width}}  {r.kind:<9}  {out:>9}  {r.params:>9,}  {r.macs:>13,}")
        lines.append(f"{'total':<{width}}  {'':<9}  {'':>9}  {self.total_params:>9,}  {self.total_macs:>13,}")
        if self.comparisons:
            lines.append("")
            lines.append(f"{'separable layer':<{width}}  {'separable':>13}  {'regular':>13}  {'ratio':>8}  {'1/Cout+1/k^2':>12}")
            for c in self.comparisons:
                lines.append(
                    f"{c.name:<{width}}  {c.separable_macs:>13,}  {c.regular_macs:>13,}  {c.ratio:>8.4f}  {c.formula_ratio:>12.4f}"
                )
        return "\n".join(lines)


def _kind(spec) -> str:
    if spec.groups > 1 and spec.groups == spec.c_in:
        return "depthwise"
    if spec.dilation > 1:
        return "atrous"
    if spec.k == 1:
        return "pointwise"
    return "conv"


def _input_sizes(config: ModelConfig, h: int, w: int) -> dict:
    """Spatial size at the input of every convolution."""
    sizes = {"stem.conv": (h, w)}
    cur = (conv_output_size(h, 3, 2, 1, 1), conv_output_size(w, 3, 2, 1, 1))
    for b in block_specs(config):
        out = (conv_output_size(cur[0], 3, b.stride, 1, 1), conv_output_size(cur[1], 3, b.stride, 1, 1))
        sizes[f"{b.name}.sep1.depthwise"] = cur
        sizes[f"{b.name}.sep1.pointwise"] = cur
        sizes[f"{b.name}.sep2.depthwise"] = cur
        sizes[f"{b.name}.sep2.pointwise"] = out
        sizes[f"{b.name}.skip.conv"] = cur
        cur = out
    for name in ["aspp.branch_1x1", "aspp.fuse", "classifier"] + [f"aspp.branch_r{r}" for r in config.aspp_rates]:
        sizes[name] = cur
    sizes["aspp.pool"] = (1, 1)
    return sizes


def count_ops(config: ModelConfig, input_h: int, input_w: int) -> OpCountReport:
    """Per-layer parameters and MACs for one image of size ``input_h`` x ``input_w``."""
    if input_h < OUTPUT_STRIDE or input_w < OUTPUT_STRIDE or input_h % OUTPUT_STRIDE or input_w % OUTPUT_STRIDE:
        raise ShapeError(f"input {input_h}x{input_w} must be positive multiples of {OUTPUT_STRIDE}")
    sizes = _input_sizes(config, input_h, input_w)
    report = OpCountReport(input_h, input_w)
    outs = {}
    for spec in conv_specs(config):
        ih, iw = sizes[spec.name]
        oh = conv_output_size(ih, spec.k, spec.stride, spec.padding, spec.dilation)
        ow = conv_output_size(iw, spec.k, spec.stride, spec.padding, spec.dilation)
        outs[spec.name] = (oh, ow)
        n_params = spec.c_out * (spec.c_in // spec.groups) * spec.k * spec.k + (spec.c_out if spec.bias else 0)
        macs = regular_conv_macs(oh, ow, spec.k, spec.c_in, spec.c_out, spec.groups)
        report.rows.append(LayerOps(spec.name, _kind(spec), n_params, macs, oh, ow))
        if spec.bn:
            report.rows.append(LayerOps(spec.bn, "batchnorm", 2 * spec.c_out, 0, oh, ow))
    for b in block_specs(config):
        for sep in ("sep1", "sep2"):
            dw = next(s for s in conv_specs(config) if s.name == f"{b.name}.{sep}.depthwise")
            pw = next(s for s in conv_specs(config) if s.name == f"{b.name}.{sep}.pointwise")
            oh, ow = outs[pw.name]
            sep_macs = separable_conv_macs(oh, ow, dw.k, dw.c_in, pw.c_out)
            reg_macs = regular_conv_macs(oh, ow, dw.k, dw.c_in, pw.c_out)
            report.comparisons.append(
                SeparableComparison(
                    f"{b.name}.{sep}",
                    dw.c_in,
                    pw.c_out,
                    dw.k,
                    oh,
                    ow,
                    sep_macs,
                    reg_macs,
                    sep_macs / reg_macs,
                    separable_ratio(pw.c_out, dw.k),
                )
            )
    return report
