"""Write the end-to-end pipeline fixture and its golden output.

The golden JSON is produced with the per-patch reference feature path
(``--oracle``), so comparing it with the one-pass path checks the fast code
independently.  Attribute scores are rounded in the output; the script
refuses to write a fixture whose reference scores sit within ``GUARD`` of a
rounding boundary or of zero, where the two paths could legitimately
round differently.
"""

from __future__ import annotations

import argparse
import contextlib
import io
import json
from pathlib import Path

import numpy as np

from attrnet import cli
from attrnet import io as fmt
from attrnet.pipeline import SCORE_DECIMALS, Models, predict_image
from attrnet.synthetic import FIXTURE_GRID, fixture_attribute_network, fixture_svm, planted_corpus

ROOT = Path(__file__).resolve().parents[1]
# Over five times the largest gap seen between the two feature paths (3.7e-7).
GUARD = 2e-6
CORPUS_IMAGES = [f"img{i:03d}.pgm" for i in range(8)]
NEGATIVE_SEED = 4242


def safe(scores) -> bool:
    step = 10.0 ** -SCORE_DECIMALS
    for s in scores:
        to_boundary = abs(s - (np.floor(s / step) + 0.5) * step)
        if to_boundary < GUARD or abs(s) < GUARD:
            return False
    return True


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(ROOT / "tests" / "data" / "pipeline"))
    ap.add_argument("--seed", type=int, default=0, help="first model seed to try")
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = ROOT / "tests" / "data" / "corpus"

    (negative, _), = planted_corpus(NEGATIVE_SEED, 1, with_pattern=False)
    fmt.write_image(out / "neg000.pgm", negative)
    images = [str(corpus / n) for n in CORPUS_IMAGES] + [str(out / "neg000.pgm")]
    g = FIXTURE_GRID
    for seed in range(args.seed, args.seed + 100):
        fmt.save_network(out / "anet.lnet", fixture_attribute_network(seed))
        fmt.save_svm(out / "svm.lsvm", fixture_svm(seed))
        cfg = fmt.PipelineConfig(
            net_o="../corpus/net_o.lnet",
            net_s="../corpus/net_s.lnet",
            anet="anet.lnet",
            svm="svm.lsvm",
            threshold="../corpus/threshold.txt",
            cells=g.cells,
            cell_size=g.cell_size,
            patch_stride=g.patch_stride,
            seed=seed,
        )
        fmt.save_config(out / "config.txt", cfg)
        models = Models.load(fmt.load_config(out / "config.txt"))
        if all(safe(predict_image(fmt.read_image(p), models, oracle=True).scores) for p in images):
            break
    else:
        raise SystemExit("no seed gave scores clear of rounding boundaries")

    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = cli.main(["pipeline", "--config", str(out / "config.txt"), "--oracle", "--images", *images])
    if code:
        raise SystemExit(code)
    (out / "golden.json").write_text(buf.getvalue())
    (out / "images.json").write_text(
        json.dumps([str(Path(p).relative_to(ROOT / "tests" / "data")) for p in images], indent=1) + "\n"
    )
    print(f"wrote golden output for {len(images)} images to {out} (model seed {seed})")


if __name__ == "__main__":
    main()
