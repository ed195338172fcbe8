"""1-shot vs 5-shot adaptation on identical episodes (the 1-shot support is the first of the five)."""
from _common import parse

from mpa import harness
from mpa.report import write_report


def main():
    cfg, _ = parse(__doc__, "kshot.json")
    rep = harness.run_kshot(cfg)
    write_report(rep, cfg.output_dir)
    for cell, agg in rep["cells"].items():
        print(f"{cell:<8} mIoU {agg['miou']:.2f} ± {agg['miou_std']:.2f} (n={agg['n_ok']})")
    for k, v in rep["verdicts"].items():
        print(f"  {k}: {v}")


if __name__ == "__main__":
    main()
