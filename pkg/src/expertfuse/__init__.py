"""Joint video-text embeddings from gated fusion of pretrained experts.

Video clips arrive as variable-length feature sequences from several
pretrained "expert" models (objects, faces, audio, scenes, ...), captions
as word-vector sequences.  The package aggregates each stream, projects
the streams to a shared width, lets them modulate one another through a
collaborative gating stage, and embeds both modalities so that matching
pairs score highest under a weighted inner product.  Training, retrieval
metrics, a binary feature format with a synthetic benchmark generator,
and a command-line interface round out the toolkit.
"""

__version__ = "0.1.0"
