# Parameter and multiply-accumulate budget of the default network at the
# clinical image size (576x432) and at the synthetic size (192x144).
from bccseg.model import ModelConfig, parameter_count
from bccseg.opcount import count_ops

config = ModelConfig()
print("parameters:", parameter_count(config))

report = count_ops(config, 432, 576)
print(report.format_table())

small = count_ops(config, 144, 192)
print()
print(f"192x144 total MACs {small.total_macs:,} ({report.total_macs / small.total_macs:.1f}x fewer than 576x432)")

# the three atrous branches cost the same regardless of rate
for row in report.rows:
    if row.name.startswith("aspp.branch_r"):
        print(f"{row.name}: {row.macs:,} MACs at {row.out_h}x{row.out_w}")
