"""Trainable-parameter budget of adapter tuning on the toy backbone.

    python scripts/param_budget.py

Counts parameters twice, once by instantiating the modules and once from
the closed form, and prints the adapter fraction for several gamma next
to the Swin-B reference row.
"""

import numpy as np

from baris.era import SWIN_B_REFERENCE, EraAdapter, count_params, era_param_count
from baris.harness.backbone import AUDIT_BACKBONE, EraSettings, ToyBackbone, describe_backbone


def main():
    backbone = ToyBackbone(AUDIT_BACKBONE, np.random.default_rng(0)).num_parameters()
    specs = describe_backbone(AUDIT_BACKBONE)
    print(f"toy backbone widths {AUDIT_BACKBONE.widths}, depth {AUDIT_BACKBONE.depth}: {backbone} parameters")
    print("gamma\tnum_envs\tadapters(instantiated)\tadapters(closed form)\tfraction")
    for gamma in (2, 4, 8):
        settings = EraSettings(enabled=True, gamma=gamma, num_envs=16)
        cfgs = [settings.for_width(w) for w in AUDIT_BACKBONE.widths]
        live = sum(EraAdapter(c, np.random.default_rng(0)).num_parameters() for c in cfgs)
        closed = sum(era_param_count(c) for c in cfgs)
        frac = count_params("era", specs, cfgs).fraction
        print(f"{gamma}\t16\t{live}\t{closed}\t{100 * frac:.2f}%")
    ref = SWIN_B_REFERENCE["era"]
    print(f"swin-b reference: {ref.trainable / 1e6:.2f} M of {ref.total / 1e6:.2f} M = {100 * ref.fraction:.2f}%")


if __name__ == "__main__":
    main()
