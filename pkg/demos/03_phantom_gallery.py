"""Render a few synthetic phantoms as ASCII so the two domains and the
three lesion classes are visible without a plotting stack.

Domain A: bright background, dark lesion, multiplicative speckle.
Domain B: dark background, bright lesion, smooth bias field + gaussian noise.
Same geometry seed -> same lesion outline in both domains.
"""

import tempfile

import numpy as np

from braidseg.data import generate_dataset, load_sample, select

RAMP = " .:-=+*#%@"


def ascii_image(img, width=40):
    # img in [0,1]; two characters per pixel keeps the aspect ratio sane
    side = img.shape[0]
    step = max(1, side // width)
    rows = []
    for r in range(0, side, step):
        line = ""
        for c in range(0, side, step):
            v = float(img[r:r + step, c:c + step].mean())
            line += RAMP[min(int(v * len(RAMP)), len(RAMP) - 1)] * 2
        rows.append(line)
    return "\n".join(rows)


with tempfile.TemporaryDirectory() as root:
    samples = generate_dataset(root, seed=21, n_train=3, n_val=0, n_test=0,
                               size=48, paired=True)

    for cls in ("cystic", "solid", "mixed"):
        picks = [s for s in samples if s.cls == cls]
        print("=" * 84)
        print(f"class: {cls}")
        pair = {s.domain: s for s in picks[:2]}
        img_a, mask = load_sample(root, pair["A"])
        img_b, _ = load_sample(root, pair["B"])
        rows_a = ascii_image(img_a).splitlines()
        rows_b = ascii_image(img_b).splitlines()
        rows_m = ascii_image(mask).splitlines()
        print(f"{'domain A':<50}{'domain B':<50}mask")
        for a, b, m in zip(rows_a, rows_b, rows_m):
            print(f"{a:<50}{b:<50}{m}")

    n = len(samples)
    fg = np.mean([load_sample(root, s)[1].mean() for s in samples])
    print("=" * 84)
    print(f"{n} samples, mean foreground fraction {fg:.2f}")
