"""Component, view-strategy and augmentation-strategy ablations over shared seeds."""
from _common import parse

from mpa import harness
from mpa.report import write_report


def main():
    cfg, _ = parse(__doc__, "ablations.json")
    rep = harness.run_ablations(cfg)
    path = write_report(rep, cfg.output_dir)
    print(f"{'cell':<16}{'mIoU':>8}{'std':>8}{'ok':>5}{'failed':>8}")
    for cell, agg in rep["cells"].items():
        print(f"{cell:<16}{agg['miou']:>8.2f}{agg['miou_std']:>8.2f}{agg['n_ok']:>5}{agg['n_failed']:>8}")
    for k, v in rep["verdicts"].items():
        print(f"  {k}: {v}")
    print(f"report: {path}  ({rep['wall_clock'] / 60:.1f} min)")


if __name__ == "__main__":
    main()
