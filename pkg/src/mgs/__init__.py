"""Manifold-guided sampling for small diffusion models.

Subpackages split along pipeline stages: `nn` (gradient engine),
`diffusion` (schedules, denoiser training, samplers), `manifold`
(embedder/relation-net training and diagnostics), `guidance` (sampling-time
manifold guidance), `metrics` (uniformity and bias evaluation), `data`
(synthetic benchmark datasets), plus `config`/`runner`/`cli` for
reproducible runs.
"""

__version__ = "0.1.0"
