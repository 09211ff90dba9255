"""lipsynth: silent face-video to speech synthesis at desk scale.

Subpackages/modules:
    tensor   -- numpy-backed reverse-mode autodiff and layer primitives
    dsp      -- waveform <-> log-mel pipeline, Griffin-Lim vocoder
    model    -- encoder / location-sensitive attention / decoder / postnet
    data     -- synthetic corpus, containers, manifests, batching
    train    -- optimizer, LR schedule, checkpoints, training loop
    metrics  -- ESTOI, mel-MSE, edit distance, WER/CER
    cli      -- command-line surface
"""

__version__ = "0.1.0"
