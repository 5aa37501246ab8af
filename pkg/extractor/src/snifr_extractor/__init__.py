"""Feature-extraction adapter: media clips -> pooled 768-d SNFR1 files.

FFmpeg decodes each clip to 16 kHz mono audio and 16 fps frames; a
pretrained audio transformer and a pretrained video transformer embed
them; mean pooling yields one 768-d vector per modality per clip (T=1).
Both the decoder and the embedders are injectable so the pipeline can be
exercised without media tooling or model checkpoints.
"""

__version__ = "0.1.0"
