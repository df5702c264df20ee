"""wavepinn: recover plate sound-speed maps from ultrasonic wavefield
snapshots with a physics-informed neural network.

Subpackages: diffnet (network + differentiation engine), wavegen
(finite-difference forward solver and dataset container), pca_filter
(snapshot denoising), pinn_trainer (loss assembly and training), cli.
"""

__version__ = "0.1.0"
