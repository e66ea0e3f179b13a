"""One-step discrete generation through a learned sequence-to-Gaussian coupling.

Stage A fits an encoder, a reconstruction head and an affine-coupling flow so
that encoded sequences land on a standard normal. Stage B trains a parallel
decoder on the induced (latent, sequence) pairs; sampling is one Gaussian draw
and one decoder pass.
"""

__version__ = "0.1.0"
