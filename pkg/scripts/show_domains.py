"""Write a grid of samples per synthetic domain (image | mask) for eyeballing."""
import argparse
from pathlib import Path

import numpy as np
from PIL import Image

from mpa.synthbench import gen_sample, preset_domains


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/domains.png")
    p.add_argument("--per-domain", type=int, default=6)
    p.add_argument("--size", type=int, default=32)
    args = p.parse_args()
    rows = []
    for spec in preset_domains(args.size):
        tiles = []
        for i in range(args.per_domain):
            s = gen_sample(spec, i % 5, i)
            img = np.moveaxis(s.image, 0, -1)
            tiles.append(np.concatenate([img, np.repeat(s.mask[..., None], 3, -1).astype(float)], axis=1))
        rows.append(np.concatenate(tiles, axis=1))
    grid = (np.concatenate(rows, axis=0) * 255).round().astype(np.uint8)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid).resize((grid.shape[1] * 2, grid.shape[0] * 2), Image.NEAREST).save(args.out)
    print(f"wrote {args.out} ({', '.join(s.name for s in preset_domains())}, one row each)")


if __name__ == "__main__":
    main()
