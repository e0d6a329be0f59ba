"""Equivariant denoising diffusion over small n-body systems, with
oracle-guided policy optimization and numerical checks of the
underlying alignment results.

Layout: ``nbody`` holds configurations and symmetry helpers, ``oracle``
the analytic energy models and a fitted surrogate, ``autodiff`` a small
reverse-mode tape over numpy, ``diffusion`` the noise schedule, score
network and samplers, ``rewards``/``grpo`` the post-training stack,
``theory`` the theorem suites, and ``config``/``cli`` the experiment
front end.
"""

__version__ = "0.1.0"
