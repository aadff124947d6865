"""Multi-task variational autoencoder for symbolic music style transfer."""

from midivae.roll_codec import RollConfig, SongRecord, decode_song, encode_song
from midivae.vae_model import HyperParams, MidiVae

__version__ = "0.1.0"

__all__ = ["HyperParams", "MidiVae", "RollConfig", "SongRecord", "decode_song", "encode_song", "__version__"]
