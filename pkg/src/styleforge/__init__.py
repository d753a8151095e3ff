"""Cross-speaker style transfer for TTS via voice-conversion data augmentation.

Submodules
----------
dsp        deterministic feature extraction, f0, waveform reconstruction
corpus     synthetic micro-corpus generation, manifests, dataset pooling
align      monophone HMM training and forced alignment
spkemb     speaker embeddings trained with a generalized end-to-end loss
vc         voice conversion conditioned on aligned states and log-f0
tts        multi-style sequence-to-sequence synthesis with a VAE reference
evaluation objective metrics and listening-test statistics
benchmarks published listening-test results shipped as fixtures
config     YAML experiment configuration
pipeline   staged, resumable orchestration of the above
reporting  Markdown + SVG report over a finished run
cli        command-line entry points
"""

__version__ = "0.1.0"

from . import errors

__all__ = ["errors", "__version__"]
