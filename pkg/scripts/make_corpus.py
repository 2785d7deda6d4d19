"""Write the planted-pattern localization corpus and its detector models.

Outputs (under tests/data/corpus by default):
  img000.pgm ... img199.pgm   evaluation images, one planted square each
  truth.json                  ground-truth rects per image
  net_o.lnet, net_s.lnet      coarse and fine detector networks
  threshold.txt               calibrated on a separate seeded split
  params.json                 window scales used by the acceptance run

Calibration images never enter the evaluation set.  Images are 8-bit, so
calibration goes through the same quantisation.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from attrnet import io as fmt
from attrnet.localize import ProposalParams, propose_windows, response_map
from attrnet.localize import calibrate_threshold
from attrnet.synthetic import (
    DETECTOR_SCALES,
    REFINER_SCALES,
    detector_networks,
    planted_corpus,
)

EVAL_SEED = 20240
CALIBRATION_SEED = 777
EVAL_COUNT = 200
CALIBRATION_COUNT = 50


def quantise(image):
    return fmt.image_from_bytes(fmt.image_to_bytes(image))


def best_score(net, image, params):
    wins = propose_windows(response_map(net, image), params.scales, params.stride, params.max_windows, image.shape[1:])
    return wins[0].score if wins else 0.0


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "tests" / "data" / "corpus"))
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    net_o, net_s = detector_networks()
    fmt.save_network(out / "net_o.lnet", net_o)
    fmt.save_network(out / "net_s.lnet", net_s)
    params = ProposalParams(DETECTOR_SCALES)

    faces = [best_score(net_o, quantise(im), params) for im, _ in planted_corpus(CALIBRATION_SEED, CALIBRATION_COUNT)]
    background = [
        best_score(net_o, quantise(im), params)
        for im, _ in planted_corpus(CALIBRATION_SEED + 1, CALIBRATION_COUNT, with_pattern=False)
    ]
    thr = calibrate_threshold(faces, background)
    fmt.save_threshold(out / "threshold.txt", thr.value)

    truth = {}
    for i, (image, rects) in enumerate(planted_corpus(EVAL_SEED, EVAL_COUNT)):
        name = f"img{i:03d}.pgm"
        fmt.write_image(out / name, image)
        truth[name] = {"height": image.shape[1], "width": image.shape[2], "rects": [r.as_list() for r in rects]}
    (out / "truth.json").write_text(json.dumps({"images": truth}, sort_keys=True, indent=1) + "\n")
    (out / "params.json").write_text(
        json.dumps({"scales": list(DETECTOR_SCALES), "scales_s": list(REFINER_SCALES)}, sort_keys=True) + "\n"
    )
    print(f"wrote {EVAL_COUNT} images to {out}; threshold {thr.value:.6f} ({thr.errors} calibration errors)")


if __name__ == "__main__":
    main()
