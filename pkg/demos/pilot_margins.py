"""
Pilot run behind the sparse-view acceptance thresholds
======================================================

Trains one model per view count (64x64, field of view on [-1, 1], 200
random phantoms, 1500 RMSProp iterations at lr 2e-5, batch 2, rho 0.9) and
reports validation MSE and mean PSNR of FBP vs iRadonMap on 40 held-out
phantoms. The margin and band frozen in tests/test_acceptance.py come from
this script's output. Each view count takes about six minutes on one core.

Run: ``python demos/pilot_margins.py [views ...]`` (default 18 60 90)
"""
import sys
import time

import numpy as np

from iradonmap import ImagingGeometry, IRadonMap, TrainingConfig, build_bp_table, fbp, train
from iradonmap.data import phantom_arrays
from iradonmap.evaluate import psnr

views_list = [int(v) for v in sys.argv[1:]] or [18, 60, 90]

for views in views_list:
    g = ImagingGeometry.desk(64, views, pixel_size=2 / 64)
    sinos, images = phantom_arrays(g, 200, seed=1)
    val_sinos, val_images = phantom_arrays(g, 40, seed=2)
    model = IRadonMap(g)
    t0 = time.process_time()
    result = train(model, sinos, images, TrainingConfig(n_iterations=1500, checkpoint_interval=0),
                   val=(val_sinos, val_images), val_interval=100)
    print(f"== {views} views, {time.process_time() - t0:.0f} s CPU")
    for it, mse in result.val_mse:
        print(f"   iter {it:5d}  val mse {mse:.3e}")

    # %% mean PSNR (peak 1) over the held-out phantoms
    table = build_bp_table(g)
    p_fbp = np.mean([psnr(fbp(s.astype(np.float64), table), im) for s, im in zip(val_sinos, val_images)])
    p_net = np.mean([psnr(model(s), im) for s, im in zip(val_sinos, val_images)])
    print(f"   PSNR fbp {p_fbp:.2f} dB  iradonmap {p_net:.2f} dB  gain {p_net - p_fbp:+.2f} dB")
