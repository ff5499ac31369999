"""Desk-scale lab for motion-representation learning.

Subpackages:
    ops        dense-tensor layers with explicit forward/backward passes
    params     named parameter sets, Adam, MT1 persistence
    gradcheck  central finite-difference verification harness
    scene      synthetic rigid-body video renderer (correspondence/depth/mask)
    guide      the motion-embedding module (conv -> pos-enc concat -> conv ->
               occupancy-normalized pooling -> linear head)
    toy        trajectory-regression experiment (shape invariance vs motion
               sensitivity)
    diffusion  miniature video denoiser with value injection, DDIM, ablations
    cli        command-line orchestration
"""

__version__ = "0.1.0"
