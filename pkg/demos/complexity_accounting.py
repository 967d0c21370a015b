"""Walk through the cost accounting for the three standard family sizes.

Running this prints the parameter and FLOP budgets that motivate
training a small student at all: the large network costs roughly 250x
the parameters and 25x the compute of the small one.
"""

from actnet import ModelSpec, analytic_param_count, flops_breakdown, parameter_bytes

SIZES = [ModelSpec(4, 16), ModelSpec(5, 32), ModelSpec(6, 64)]


def main():
    print(f"{'model':>14} {'params':>13} {'MB (fp32)':>10} {'GFLOPs@256':>11}")
    reports = []
    for spec in SIZES:
        report = flops_breakdown(spec)
        reports.append(report)
        mb = parameter_bytes(spec) / 2**20
        print(
            f"{spec.label():>14} {report.param_count:>13,} {mb:>10.2f} "
            f"{report.flops_total / 1e9:>11.2f}"
        )

    small, _, big = reports
    print()
    print(f"parameter ratio big/small: {big.param_count / small.param_count:.1f}x")
    print(f"compute ratio   big/small: {big.flops_total / small.flops_total:.1f}x")

    # Where the compute actually goes, for the small model.
    print()
    print("small model, top five layers by FLOPs:")
    for layer in sorted(small.layers, key=lambda l: l.flops, reverse=True)[:5]:
        share = layer.flops / small.flops_total
        print(f"  {layer.name:>12} {layer.kind:>5} {layer.flops:>14,}  {share:5.1%}")

    # The closed form lets you sweep widths without building networks.
    print()
    print("width sweep at depth 4:")
    for width in (8, 16, 32, 64):
        count = analytic_param_count(ModelSpec(4, width))
        print(f"  first stage {width:>3} channels: {count:>11,} params")


if __name__ == "__main__":
    main()
