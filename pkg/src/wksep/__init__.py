"""Weakly supervised, text-conditioned source separation on synthetic audio scenes.

Subpackage map:

* ``autodiff``  reverse-mode array autodiff engine, Adam, gradient checking, checkpoints
* ``dsp``       STFT/iSTFT, masking, log-mel, WAV I/O
* ``synth``     procedural source bank, mixtures, mixtures of mixtures, prompts
* ``embed``     toy audio-text embedding (frozen after contrastive pretraining)
* ``sepmodel``  conditional mask-predicting U-Net
* ``losses``    reconstruction / contrastive / consistency objectives
* ``train``     training loops and separation evaluation
* ``bsseval``   SDR / SIR / SAR via least-squares signal decomposition
* ``cli``       experiment driver (pretrain-embed, train, eval, ablate)
"""

__version__ = "0.1.0"
