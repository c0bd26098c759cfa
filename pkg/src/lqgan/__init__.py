"""Latent-space GAN with a simulated quantum generator.

Subpackages and modules:

* ``lqgan.autodiff``: small reverse-mode autodiff with double backward.
* ``lqgan.quantum``: statevector simulator and adjoint gradients.
* ``lqgan.nets``: MLPs and the convolutional autoencoder.
* ``lqgan.gan``: WGAN-GP training loop, generators and critic.
* ``lqgan.metrics``: FID and JSD.
* ``lqgan.data``: image datasets, conversion and batching.
* ``lqgan.experiments``: verdicts, capacity selection, sweeps and scaling fits.
* ``lqgan.cli``: the ``lqgan`` command.
"""

__version__ = "0.1.0"
