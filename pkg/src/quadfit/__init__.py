"""Quadruped shape/pose model, robust fitting, and gait lameness classification.

The package is organized around a small pipeline:

- :mod:`quadfit.body_model` / :mod:`quadfit.synthetic_model` -- the parametric
  articulated mesh (shape blending, forward kinematics, linear blend skinning,
  surface markers) and a procedural synthetic quadruped used as test subject.
- :mod:`quadfit.camera`, :mod:`quadfit.silhouette` -- perspective projection,
  mask rasterization, exact distance transforms and IoU.
- :mod:`quadfit.energies`, :mod:`quadfit.fitting` -- the robust fitting
  objective and the staged optimizer (alignment, template generation,
  per-frame sequence fitting).
- :mod:`quadfit.gait` -- deterministic synthetic trot generator with
  controllable lameness asymmetry.
- :mod:`quadfit.graphs`, :mod:`quadfit.stgcn` -- skeleton graphs and the
  spatio-temporal graph convolutional classifier.
- :mod:`quadfit.cli` -- the ``quadfit`` command line front end.
"""

__version__ = "0.1.0"
