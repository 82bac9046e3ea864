"""Parameter and FLOP accounting for the LOW and HIGH presets.

Prints parameters by group and FLOPs per image for each preset, with one
and two channel distributions, so the cost of the prompt bank can be read
off directly. Model widths default to the full presets; pass --base-low /
--base-high to shrink them.
"""
import argparse

from pjscc import PJSCC, ModelConfig
from pjscc.metrics import count_params, model_flops


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--base-low", type=int, default=64)
    ap.add_argument("--base-high", type=int, default=96)
    ap.add_argument("--no-flops", action="store_true", help="skip the forward pass")
    args = ap.parse_args(argv)

    print(f"{'model':<22}{'backbone':>12}{'adapters':>10}{'prompts':>10}{'heads':>12}"
          f"{'total':>12}{'GFLOPs':>9}")
    for name, make in (("low", lambda **k: ModelConfig.low(base_dim=args.base_low, **k)),
                       ("high", lambda **k: ModelConfig.high(base_dim=args.base_high, **k))):
        for dists in (["awgn"], ["awgn", "rayleigh"]):
            for adapter in ("csp", "af", "identity"):
                if adapter != "csp" and len(dists) == 2:
                    continue
                model = PJSCC(make(distributions=dists, adapter=adapter))
                p = count_params(model)
                gf = "-" if args.no_flops else f"{model_flops(model) / 1e9:.2f}"
                label = f"{name}/{adapter}/{len(dists)}ch"
                print(f"{label:<22}{p['backbone']:>12}{p['adapters']:>10}{p['prompts']:>10}"
                      f"{p['heads']:>12}{p['total']:>12}{gf:>9}")


if __name__ == "__main__":
    main()
