"""Smoke test for the dpat_py extension module.

Build and install first:  pip install maturin && maturin develop -m crates/py/Cargo.toml
"""

import math

import dpat_py


def main():
    cfg = dpat_py.default_config("desk")
    assert "[model]" in cfg
    assert len(dpat_py.config_fingerprint(cfg)) == 64

    acc, bwf = dpat_py.compute_metrics([[0.9], [0.5, 0.7]])
    assert math.isclose(acc, 0.6) and math.isclose(bwf, 0.4)

    assert dpat_py.match_loss([1.0, 0.0], [[0.5, 0.5]], 1, 0.1) == 0.0
    assert dpat_py.select_task([1.0, 0.0], [[0.0, 1.0], [1.0, 0.1]]) == 2

    try:
        dpat_py.config_fingerprint("bogus = 1")
    except dpat_py.DpatError:
        pass
    else:
        raise AssertionError("unknown keys must be rejected")

    # a tiny model so the smoke test takes seconds
    small = cfg.replace("steps = 900", "steps = 0")
    model = dpat_py.Model(small)
    t, h, w, c = model.clip_shape
    clips, labels = [], []
    for label, (shape, motion) in enumerate([("square", "up"), ("circle", "left")]):
        for seed in range(3):
            clips.append(dpat_py.sprite_clip(shape, motion, t, h, w, seed, size=10))
            labels.append(label)
    assert len(clips[0]) == t * h * w * c
    task = model.train_task(clips, labels, [0, 1])
    assert task == 1 and model.num_tasks == 1
    predicted, selected = model.predict(clips[0])
    assert predicted in (0, 1) and selected == 1
    print("dpat_py smoke test passed")


if __name__ == "__main__":
    main()
