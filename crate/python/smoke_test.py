"""Exercises the Python bindings end to end on a small fixture model.

Build and install first:  pip install ./crates/py
"""

import json
import math
import pathlib
import sys
import tempfile

import oneshot


def main() -> int:
    assert oneshot.kl_divergence(0.0, 1.0) == 0.0
    assert abs(oneshot.kl_divergence(0.5, 1.0) - 0.125) < 1e-15
    assert abs(oneshot.kl_general(0.5, 1.0, 0.0, 1.0) - 0.125) < 1e-15
    levels, scale = oneshot.quantize([-1.0, 0.5, 1.0])
    assert levels == [-127, 64, 127] and math.isclose(scale, 1 / 127)

    model = oneshot.Model.toy("cnn", 32, seed=1, trained=True)
    print(model)
    tv = oneshot.generate(model)
    print(tv)
    assert tv.converged and tv.dkl0 < 1e-7

    reference = model.reference()
    clean = oneshot.detect(reference, tv, 1e-4)
    assert clean.verdict == "clean" and clean.d_kl == tv.dkl0, clean

    before = oneshot.forward_pass_count()
    flipped = oneshot.detect(model.with_fault("bit-flip", 0.1, 7), tv)
    assert oneshot.forward_pass_count() - before == 1
    assert flipped.faulty, flipped
    print(flipped)

    with tempfile.TemporaryDirectory() as d:
        d = pathlib.Path(d)
        model.save(d / "m.json", d / "m.bin")
        tv.save(d / "tv.json")
        again = oneshot.TestVector.load(d / "tv.json")
        assert again.input == tv.input and again.dkl0 == tv.dkl0
        loaded = oneshot.Model.load(d / "m.json", d / "m.bin")
        assert oneshot.detect(loaded.reference(), again).d_kl == tv.dkl0

        campaign = {
            "model": "m.json",
            "weights": "m.bin",
            "tv": "tv.json",
            "M": 50,
            "thresholds": oneshot.DEFAULT_THRESHOLDS,
            "base_seed": 5,
            "grid": [
                {"kind": "multiplicative-variation", "severities": [0.0, 0.04]},
                {"kind": "level-flip", "severities": [0.1]},
            ],
        }
        (d / "campaign.json").write_text(json.dumps(campaign))
        report = oneshot.run_coverage(d / "campaign.json")
        assert report.coverage("multiplicative-variation", 0.0, 1e-7) == 0.0
        assert report.coverage("level-flip", 0.1, 1e-4) >= 90.0
        assert report.csv() == oneshot.run_coverage(d / "campaign.json").csv()
        print(report.sweep())

    try:
        oneshot.Model.toy("transformer", 10)
    except ValueError as e:
        print("rejected:", e)
    else:
        raise AssertionError("unknown architecture accepted")

    print("python smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
