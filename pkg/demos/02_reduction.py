"""Compare EOF and CVAE reconstructions of canonical plumes.

A small CVAE (two conv layers each way, 32x32 inputs) is trained for a few
epochs, so expect the EOFs to win here; the full experiment uses 64x64 inputs,
six conv layers and 100 epochs.

    python3 demos/02_reduction.py
"""
import numpy as np

from plumemu import cvae as cv
from plumemu import pipeline as pl
from plumemu.eof import fit_eof, reconstruct

cfg = pl.load_config(None, n_sites=4, n_times=30, days=11.0, grid_side=32, target_res=32,
                     enc_channels="8,16", dec_channels="16,1")
plumes = pl.experiment_dataset(cfg)
canon, angles, _ = pl.prepare(plumes, cfg.preprocess)
images = canon.images()
energy = np.mean(images ** 2)
print(f"{len(canon)} canonical plumes, mean square value {energy:.3e}")

for r in (2, 4, 8, 16):
    basis = fit_eof(canon, r)
    rec = reconstruct(basis, basis.train_coeffs).matrix()
    err = np.mean((rec - canon.matrix()) ** 2)
    print(f"EOF  r={r:2d}: reconstruction mse {err:.3e} ({err / energy:.2%} of signal)")

for r in (4, 8):
    model, hist = cv.train(canon, cv.TrainConfig(epochs=30, restarts=1, batch_size=16, seed=1),
                           cv.ArchSpec(32, r, (8, 16), (16, 1)))
    err = float(np.mean(cv.reconstruction_mse(model, images)))
    print(f"CVAE r={r:2d}: reconstruction mse {err:.3e} ({err / energy:.2%} of signal), "
          f"final epoch loss {hist.epoch_loss[hist.chosen][-1]:.3e}")
