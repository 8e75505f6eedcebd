"""Full-width parameter counts per group variant, against the published reference."""
from gequnet.groups import GroupSpec
from gequnet.model import ModelConfig, analytic_param_count
from gequnet.verify import ALL_GROUPS, REFERENCE_PARAMS_M


def main():
    base = analytic_param_count(ModelConfig(spec=GroupSpec.parse("c2")))
    print(f"{'group':6s} {'params':>11s} {'M':>7s} {'ref M':>6s} {'x C2':>6s}")
    for name in ALL_GROUPS:
        n = analytic_param_count(ModelConfig(spec=GroupSpec.parse(name)))
        print(f"{name:6s} {n:11d} {n / 1e6:7.3f} {REFERENCE_PARAMS_M[name]:6.1f} {n / base:6.3f}")


if __name__ == "__main__":
    main()
