"""Learning inverse maps of known noise and dynamical transforms from observed data only.

Modules
-------
diffcore  reverse-mode autodiff over numpy arrays
nets      MLP vector-field and consistency networks
flows     time grids and conditional paths
noise     noise processes and the Poisson-Gaussian fitter
solvers   ODE/SDE integrators and a spectral Navier-Stokes solver
train     IFM / ICM / GCT training loops and AdamW
data      dataset generators and I/O
evaluate  metrics and Gaussian-mixture oracles
cli       command-line front end
"""

__version__ = "0.1.0"
